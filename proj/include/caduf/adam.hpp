#pragma once

#include <map>

#include "caduf/tensor.hpp"

namespace caduf {

// Named parameter registry. Iteration order is registration order, which
// fixes the update and serialization order of every parameter.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> items;

    Tensor add(const std::string& name, Tensor t) {
        for (auto& [n, _] : items)
            if (n == name) throw input_error("parameter registered twice: " + name);
        t.set_requires_grad(true);
        items.push_back({name, t});
        return t;
    }

    Tensor* find(const std::string& name) {
        for (auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    i64 total_count() const {
        i64 c = 0;
        for (auto& [n, t] : items) c += t.numel();
        return c;
    }

    void zero_grad() {
        for (auto& [n, t] : items) t.zero_grad();
    }
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // coupled: added to the gradient
};

// Adam with bias correction. Moment buffers are kept per parameter in
// registration order and survive learning-rate changes.
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    AdamConfig& config() { return cfg_; }
    const AdamConfig& config() const { return cfg_; }

    void step(ParamStore& params) {
        if (states_.size() != params.items.size()) states_.resize(params.items.size());
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t k = 0; k < params.items.size(); ++k) {
            Tensor& p = params.items[k].second;
            if (!p.has_grad()) continue;
            State& st = states_[k];
            if (st.m.size() != p.values().size()) {
                st.m.assign(p.values().size(), 0.0);
                st.v.assign(p.values().size(), 0.0);
            }
            double* val = p.data();
            const double* gr = p.node().grad.data();
            for (size_t i = 0; i < st.m.size(); ++i) {
                double g = gr[i] + cfg_.weight_decay * val[i];
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mh = st.m[i] / bc1;
                double vh = st.v[i] / bc2;
                val[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

    i64 step_count() const { return t_; }

    struct State {
        std::vector<double> m, v;
    };
    std::vector<State>& states() { return states_; }
    i64& raw_step_count() { return t_; }

  private:
    AdamConfig cfg_;
    std::vector<State> states_;
    i64 t_ = 0;
};

// Fan-in scaled uniform init, U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
inline void init_fan_in_uniform(Tensor& w, Rng& rng) {
    check(w.rank() == 4, "init: rank 4 weight expected");
    i64 fan_in = w.dim(1) * w.dim(2) * w.dim(3);
    double bound = std::sqrt(1.0 / double(fan_in));
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
}

}  // namespace caduf
