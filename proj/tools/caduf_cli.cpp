#include <cstdio>

int main(int argc, char** argv) {
    (void)argc;
    (void)argv;
    std::printf("caduf: not wired up yet\n");
    return 2;
}
