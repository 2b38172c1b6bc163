#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "cuedepth/autodiff.hpp"
#include "cuedepth/optim.hpp"
#include "cuedepth/rng.hpp"

using namespace cuedepth;

TEST_CASE("sgd step moves against the gradient") {
    Tensor p({2}, {1.0, -2.0});
    Tensor g({2}, {0.5, -1.0});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.1;
    optimizer_step({&p}, {&g}, state, cfg);
    REQUIRE(p[0] == Catch::Approx(0.95));
    REQUIRE(p[1] == Catch::Approx(-1.9));
}

TEST_CASE("adam first step size is lr over one plus eps for unit gradient") {
    Tensor p({1}, {0.0});
    Tensor g({1}, {1.0});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::adam;
    cfg.lr = 0.01;
    optimizer_step({&p}, {&g}, state, cfg);
    REQUIRE(p[0] == Catch::Approx(-cfg.lr / (1.0 + cfg.eps)).epsilon(1e-12));
    REQUIRE(state.t == 1);
}

TEST_CASE("non-finite gradient faults before any mutation") {
    Tensor p1({2}, {1.0, 2.0});
    Tensor p2({1}, {3.0});
    Tensor g1({2}, {0.1, 0.1});
    Tensor g2({1}, {std::numeric_limits<double>::quiet_NaN()});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 1.0;
    REQUIRE_THROWS_AS(optimizer_step({&p1, &p2}, {&g1, &g2}, state, cfg), NumericFault);
    // the healthy parameter was not stepped either
    REQUIRE(p1[0] == 1.0);
    REQUIRE(p1[1] == 2.0);
    REQUIRE(p2[0] == 3.0);
    REQUIRE(state.t == 0);
}

TEST_CASE("decoupled weight decay shrinks parameters independently of gradient") {
    Tensor p({1}, {10.0});
    Tensor g({1}, {0.0});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    optimizer_step({&p}, {&g}, state, cfg);
    REQUIRE(p[0] == Catch::Approx(10.0 - 0.1 * 0.5 * 10.0));
}

TEST_CASE("adam converges on a quadratic bowl") {
    Tensor p({2}, {4.0, -3.0});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::adam;
    cfg.lr = 0.05;
    for (int step = 0; step < 800; ++step) {
        Graph g;
        Var pv = g.leaf(p, true);
        Var loss = reduce_sum(mul(pv, pv));
        g.backward(loss);
        Tensor grad = pv.grad();
        optimizer_step({&p}, {&grad}, state, cfg);
    }
    REQUIRE(std::abs(p[0]) < 1e-2);
    REQUIRE(std::abs(p[1]) < 1e-2);
}

TEST_CASE("momentum sgd accelerates along a consistent gradient") {
    Tensor p({1}, {0.0});
    Tensor g({1}, {1.0});
    OptState state;
    OptConfig cfg;
    cfg.kind = OptKind::sgd;
    cfg.lr = 0.1;
    cfg.momentum = 0.9;
    optimizer_step({&p}, {&g}, state, cfg);
    optimizer_step({&p}, {&g}, state, cfg);
    // steps: 0.1, then 0.1 * (1 + 0.9)
    REQUIRE(p[0] == Catch::Approx(-0.1 - 0.19));
}
