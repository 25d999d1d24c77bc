#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>

#include "caduf/common.hpp"
#include "caduf/rng.hpp"

namespace caduf {

// Reverse-mode autodiff over dense double tensors (NCHW layout for rank 4).
// A Tensor is a shared handle to one graph node; ops built while grad mode
// is on record their parents and a backward closure.

struct TensorData;
using NodePtr = std::shared_ptr<TensorData>;

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    bool is_leaf = true;
    bool backward_done = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorData&)> backward_fn;

    i64 numel() const { return static_cast<i64>(values.size()); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr d) : d_(std::move(d)) {}

    static Tensor zeros(const Shape& s) { return filled(s, 0.0); }

    static Tensor filled(const Shape& s, double v) {
        auto d = std::make_shared<TensorData>();
        d->shape = s;
        d->values.assign(static_cast<size_t>(numel_of(s)), v);
        return Tensor(std::move(d));
    }

    static Tensor from(const Shape& s, std::vector<double> vals) {
        if (static_cast<i64>(vals.size()) != numel_of(s))
            throw input_error("tensor init: value count does not match shape " + shape_str(s));
        auto d = std::make_shared<TensorData>();
        d->shape = s;
        d->values = std::move(vals);
        return Tensor(std::move(d));
    }

    static Tensor scalar(double v) { return filled({1}, v); }

    bool defined() const { return static_cast<bool>(d_); }
    TensorData& node() const { return *d_; }
    const NodePtr& ptr() const { return d_; }

    const Shape& shape() const { return d_->shape; }
    i64 numel() const { return d_->numel(); }
    i64 dim(size_t i) const { return d_->shape.at(i); }
    size_t rank() const { return d_->shape.size(); }

    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }
    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }

    double item() const {
        if (numel() != 1) throw input_error("item(): tensor is not scalar");
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool f) {
        if (!d_->is_leaf) throw input_error("requires_grad can only be set on leaves");
        d_->requires_grad = f;
        return *this;
    }

    const std::vector<double>& grad() const {
        if (d_->grad.size() != d_->values.size())
            throw numeric_error("grad accessed before backward reached this tensor");
        return d_->grad;
    }
    bool has_grad() const { return d_->grad.size() == d_->values.size(); }
    void zero_grad() { d_->grad.assign(d_->values.size(), 0.0); }

    // index helpers (rank 4, NCHW)
    double& at4(i64 n, i64 c, i64 h, i64 w) {
        const Shape& s = d_->shape;
        return d_->values[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }
    double at4(i64 n, i64 c, i64 h, i64 w) const {
        const Shape& s = d_->shape;
        return d_->values[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }

  private:
    NodePtr d_;
};

// Builds an op node. `backward` receives the completed node and must add
// into each parent's grad (after calling ensure_grad on it). Parents and
// the closure are only recorded when grad tracking is active.
inline Tensor make_op(const Shape& out_shape, std::vector<double> out_values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorData&)> backward) {
    if (static_cast<i64>(out_values.size()) != numel_of(out_shape))
        throw numeric_error("make_op: value count does not match shape");
    auto d = std::make_shared<TensorData>();
    d->shape = out_shape;
    d->values = std::move(out_values);
    bool track = false;
    if (grad_mode_flag()) {
        for (const Tensor& p : parents)
            if (p.node().requires_grad) track = true;
    }
    if (track) {
        d->requires_grad = true;
        d->is_leaf = false;
        d->parents.reserve(parents.size());
        for (Tensor& p : parents) d->parents.push_back(p.ptr());
        d->backward_fn = std::move(backward);
    }
    return Tensor(std::move(d));
}

// Reverse-topological sweep from `loss` (a scalar). Each non-leaf node runs
// its backward closure exactly once; running backward twice through the
// same subgraph throws instead of silently producing wrong gradients.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw input_error("backward: loss must be scalar");
    TensorData* root = &loss.node();
    if (!root->requires_grad)
        throw input_error("backward: loss does not require grad");

    std::vector<TensorData*> order;
    std::unordered_set<TensorData*> seen;
    std::vector<std::pair<TensorData*, size_t>> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorData* p = node->parents[idx].get();
            ++idx;
            if (!p->is_leaf && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is now topological (parents before children); run in reverse.
    for (TensorData* n : order)
        if (n->backward_done)
            throw numeric_error("backward: graph already consumed; rebuild the forward pass");

    root->ensure_grad();
    std::fill(root->grad.begin(), root->grad.end(), 0.0);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorData* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
        n->backward_done = true;
    }
}

}  // namespace caduf
