// Rough single-core timings for the hot ops, used to size training runs.
#include <chrono>
#include <cstdio>

#include "cuedepth/autodiff.hpp"
#include "cuedepth/rng.hpp"

using namespace cuedepth;
using clk = std::chrono::steady_clock;

static double ms_since(clk::time_point t0) {
    return std::chrono::duration<double, std::milli>(clk::now() - t0).count();
}

int main() {
    Rng rng(1);

    // representative encoder stage: 3x3 conv on a 64x64 plane
    {
        Tensor x = Tensor::uniform({4, 16, 64, 64}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({16, 16, 3, 3}, rng, -0.2, 0.2);
        const int reps = 20;
        auto t0 = clk::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            Graph g;
            Var y = conv2d(g.leaf(x), g.leaf(k), 1, 1);
            sink += y.value()[0];
        }
        std::printf("conv3x3 16->16 @4x64x64 fwd: %7.2f ms/rep (sink %g)\n", ms_since(t0) / reps, sink);
    }
    {
        Tensor x = Tensor::uniform({4, 16, 64, 64}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({16, 16, 3, 3}, rng, -0.2, 0.2);
        const int reps = 10;
        auto t0 = clk::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            Graph g;
            Var xv = g.leaf(x, true);
            Var kv = g.leaf(k, true);
            Var loss = reduce_mean(conv2d(xv, kv, 1, 1));
            g.backward(loss);
            sink += kv.grad()[0];
        }
        std::printf("conv3x3 16->16 @4x64x64 fwd+bwd: %7.2f ms/rep (sink %g)\n", ms_since(t0) / reps, sink);
    }
    {
        Tensor x = Tensor::uniform({4, 32, 32, 32}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({32, 32, 3, 3}, rng, -0.2, 0.2);
        const int reps = 10;
        auto t0 = clk::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            Graph g;
            Var xv = g.leaf(x, true);
            Var kv = g.leaf(k, true);
            Var loss = reduce_mean(conv2d(xv, kv, 1, 1));
            g.backward(loss);
            sink += kv.grad()[0];
        }
        std::printf("conv3x3 32->32 @4x32x32 fwd+bwd: %7.2f ms/rep (sink %g)\n", ms_since(t0) / reps, sink);
    }
    {
        Tensor x = Tensor::uniform({4, 28, 64, 64}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({16, 28, 1, 1}, rng, -0.2, 0.2);
        const int reps = 20;
        auto t0 = clk::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            Graph g;
            Var xv = g.leaf(x, true);
            Var kv = g.leaf(k, true);
            Var loss = reduce_mean(conv2d(xv, kv, 1, 0));
            g.backward(loss);
            sink += kv.grad()[0];
        }
        std::printf("conv1x1 28->16 @4x64x64 fwd+bwd: %7.2f ms/rep (sink %g)\n", ms_since(t0) / reps, sink);
    }
    {
        Tensor x = Tensor::uniform({4, 32, 64, 64}, rng, -3.0, 3.0);
        const int reps = 20;
        auto t0 = clk::now();
        double sink = 0.0;
        for (int r = 0; r < reps; ++r) {
            Graph g;
            Var xv = g.leaf(x, true);
            Var loss = reduce_mean(softmax_axis(xv, 1));
            g.backward(loss);
            sink += xv.grad()[0];
        }
        std::printf("softmax 32ch @4x64x64 fwd+bwd:   %7.2f ms/rep (sink %g)\n", ms_since(t0) / reps, sink);
    }
    return 0;
}
