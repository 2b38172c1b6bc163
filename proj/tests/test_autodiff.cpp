#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "cuedepth/autodiff.hpp"
#include "cuedepth/rng.hpp"
#include "support/finite_diff.hpp"

using namespace cuedepth;
using testsupport::max_rel_err;
using testsupport::numeric_grad;

namespace {

using BuildFn = std::function<Var(Graph&, Var)>;

// Scalar probe: dot the op output with fixed weights so every output
// element contributes to the loss.
double probe_loss(const Tensor& xval, const BuildFn& build, const Tensor& w) {
    Graph g;
    Var x = g.leaf(xval, true);
    Var y = build(g, x);
    Var wl = g.leaf(w);
    return reduce_sum(mul(y, wl)).value()[0];
}

Tensor probe_tape_grad(const Tensor& xval, const BuildFn& build, const Tensor& w) {
    Graph g;
    Var x = g.leaf(xval, true);
    Var y = build(g, x);
    Var wl = g.leaf(w);
    Var loss = reduce_sum(mul(y, wl));
    g.backward(loss);
    return x.grad();
}

void check_op_grad(const Tensor& xval, const BuildFn& build, Rng& rng, double tol = 1e-4) {
    Graph probe_g;
    Var probe_x = probe_g.leaf(xval);
    Var probe_y = build(probe_g, probe_x);
    Tensor w = Tensor::uniform(probe_y.shape(), rng, -1.0, 1.0);

    Tensor analytic = probe_tape_grad(xval, build, w);
    Tensor numeric = numeric_grad([&](const Tensor& t) { return probe_loss(t, build, w); }, xval);
    INFO("max rel err " << max_rel_err(analytic, numeric));
    REQUIRE(max_rel_err(analytic, numeric) < tol);
}

} // namespace

TEST_CASE("linear gradients match finite differences") {
    Rng rng(1);
    Tensor x = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    Tensor wt = Tensor::uniform({4, 5}, rng, -1.0, 1.0);
    Tensor bias = Tensor::uniform({5}, rng, -0.5, 0.5);

    check_op_grad(x, [&](Graph& g, Var v) { return linear(v, g.leaf(wt, true), g.leaf(bias, true)); }, rng);
    check_op_grad(wt, [&](Graph& g, Var v) { return linear(g.leaf(x, true), v, g.leaf(bias, true)); }, rng);
    check_op_grad(bias, [&](Graph& g, Var v) { return linear(g.leaf(x, true), g.leaf(wt, true), v); }, rng);
}

TEST_CASE("linear rejects incompatible shapes") {
    Graph g;
    Var x = g.leaf(Tensor::zeros({2, 3}));
    Var w = g.leaf(Tensor::zeros({4, 5}));
    Var b = g.leaf(Tensor::zeros({5}));
    REQUIRE_THROWS_AS(linear(x, w, b), DimensionError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(2);

    SECTION("1x1 stride 1") {
        Tensor x = Tensor::uniform({2, 3, 4, 5}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({4, 3, 1, 1}, rng, -1.0, 1.0);
        check_op_grad(x, [&](Graph& g, Var v) { return conv2d(v, g.leaf(k, true), 1, 0); }, rng);
        check_op_grad(k, [&](Graph& g, Var v) { return conv2d(g.leaf(x, true), v, 1, 0); }, rng);
    }
    SECTION("3x3 stride 1 pad 1") {
        Tensor x = Tensor::uniform({2, 2, 5, 6}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({3, 2, 3, 3}, rng, -1.0, 1.0);
        check_op_grad(x, [&](Graph& g, Var v) { return conv2d(v, g.leaf(k, true), 1, 1); }, rng);
        check_op_grad(k, [&](Graph& g, Var v) { return conv2d(g.leaf(x, true), v, 1, 1); }, rng);
    }
    SECTION("3x3 stride 2") {
        Tensor x = Tensor::uniform({1, 2, 7, 9}, rng, -1.0, 1.0);
        Tensor k = Tensor::uniform({2, 2, 3, 3}, rng, -1.0, 1.0);
        check_op_grad(x, [&](Graph& g, Var v) { return conv2d(v, g.leaf(k, true), 2, 0); }, rng);
        check_op_grad(k, [&](Graph& g, Var v) { return conv2d(g.leaf(x, true), v, 2, 0); }, rng);
    }
}

TEST_CASE("conv2d validates its contract") {
    Graph g;
    Var x = g.leaf(Tensor::zeros({1, 2, 8, 8}));
    Var k = g.leaf(Tensor::zeros({4, 2, 3, 3}));
    SECTION("non-integral output extent") {
        REQUIRE_THROWS_AS(conv2d(x, k, 2, 0), DimensionError);
    }
    SECTION("kernel extent outside 1 or 3") {
        Var k5 = g.leaf(Tensor::zeros({4, 2, 5, 5}));
        REQUIRE_THROWS_AS(conv2d(x, k5, 1, 2), ContractError);
    }
    SECTION("channel mismatch") {
        Var kbad = g.leaf(Tensor::zeros({4, 3, 3, 3}));
        REQUIRE_THROWS_AS(conv2d(x, kbad, 1, 1), DimensionError);
    }
    SECTION("valid shapes compute the documented extents") {
        Var y = conv2d(x, k, 1, 1);
        REQUIRE(y.shape() == Shape{1, 4, 8, 8});
        Var x7 = g.leaf(Tensor::zeros({1, 2, 7, 7}));
        Var y2 = conv2d(x7, k, 2, 0);
        REQUIRE(y2.shape() == Shape{1, 4, 3, 3});
    }
}

TEST_CASE("channel_bias gradients match finite differences") {
    Rng rng(3);
    Tensor x = Tensor::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({3}, rng, -1.0, 1.0);
    check_op_grad(x, [&](Graph& g, Var v) { return channel_bias(v, g.leaf(b, true)); }, rng);
    check_op_grad(b, [&](Graph& g, Var v) { return channel_bias(g.leaf(x, true), v); }, rng);
}

TEST_CASE("unary elementwise gradients match finite differences") {
    Rng rng(4);
    Tensor pos = Tensor::uniform({3, 7}, rng, 0.2, 3.0);
    Tensor mixed = Tensor::uniform({3, 7}, rng, -2.0, 2.0);

    check_op_grad(mixed, [](Graph&, Var v) { return relu(v); }, rng);
    check_op_grad(pos, [](Graph&, Var v) { return log(v); }, rng);
    check_op_grad(mixed, [](Graph&, Var v) { return exp(v); }, rng);
    check_op_grad(pos, [](Graph&, Var v) { return sqrt(v); }, rng);
    check_op_grad(mixed, [](Graph&, Var v) { return affine(v, 2.5, -0.75); }, rng);
}

TEST_CASE("relu derivative at zero is zero") {
    Graph g;
    Var x = g.leaf(Tensor({3}, {-1.0, 0.0, 2.0}), true);
    Var loss = reduce_sum(relu(x));
    g.backward(loss);
    REQUIRE(x.grad()[0] == 0.0);
    REQUIRE(x.grad()[1] == 0.0);
    REQUIRE(x.grad()[2] == 1.0);
}

TEST_CASE("log rejects non-positive input and names the index") {
    Graph g;
    Var x = g.leaf(Tensor({3}, {1.0, -0.5, 2.0}));
    try {
        log(x);
        FAIL("expected DomainError");
    } catch (const DomainError& e) {
        REQUIRE(std::string(e.what()).find("index 1") != std::string::npos);
    }
}

TEST_CASE("binary elementwise gradients match finite differences") {
    Rng rng(5);
    Tensor a = Tensor::uniform({4, 3}, rng, -2.0, 2.0);
    Tensor b = Tensor::uniform({4, 3}, rng, 0.5, 2.5);
    Tensor s = Tensor::scalar(1.7);

    for (EwKind kind : {EwKind::add, EwKind::sub, EwKind::mul, EwKind::div}) {
        check_op_grad(a, [&](Graph& g, Var v) { return elementwise(v, kind, g.leaf(b, true)); }, rng);
        check_op_grad(b, [&](Graph& g, Var v) { return elementwise(g.leaf(a, true), kind, v); }, rng);
        // scalar broadcast on either side
        check_op_grad(a, [&](Graph& g, Var v) { return elementwise(v, kind, g.leaf(s, true)); }, rng);
        check_op_grad(s, [&](Graph& g, Var v) { return elementwise(g.leaf(a, true), kind, v); }, rng);
    }
}

TEST_CASE("binary elementwise rejects non-scalar mismatch") {
    Graph g;
    Var a = g.leaf(Tensor::zeros({2, 3}));
    Var b = g.leaf(Tensor::zeros({2, 4}));
    REQUIRE_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("softmax gradients match finite differences on each axis") {
    Rng rng(6);
    Tensor x = Tensor::uniform({2, 5, 3}, rng, -3.0, 3.0);
    for (int axis : {0, 1, 2}) {
        check_op_grad(x, [axis](Graph&, Var v) { return softmax_axis(v, axis); }, rng);
    }
}

TEST_CASE("softmax is stable under large offsets") {
    Graph g;
    Tensor x({2}, {1000.0, 1001.0});
    Var y = softmax_axis(g.leaf(x), 0);
    REQUIRE(y.value().all_finite());
    REQUIRE(y.value()[0] + y.value()[1] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("reduction gradients match finite differences") {
    Rng rng(7);
    Tensor x = Tensor::uniform({4, 5}, rng, -1.0, 1.0);
    Tensor mask = Tensor::zeros({4, 5});
    for (std::size_t i = 0; i < mask.numel(); i += 3) mask[i] = 1.0;

    check_op_grad(x, [](Graph&, Var v) { return reduce_mean(v); }, rng);
    check_op_grad(x, [](Graph&, Var v) { return reduce_sum(v); }, rng);
    check_op_grad(x, [&](Graph&, Var v) { return reduce_mean(v, &mask); }, rng);
    check_op_grad(x, [&](Graph&, Var v) { return reduce_sum(v, &mask); }, rng);
}

TEST_CASE("masked mean uses unmasked count only") {
    Graph g;
    Tensor x({4}, {10.0, 20.0, 30.0, 40.0});
    Tensor mask({4}, {1.0, 0.0, 0.0, 1.0});
    Var m = reduce_mean(g.leaf(x), &mask);
    REQUIRE(m.value()[0] == 25.0);
}

TEST_CASE("fully masked reduction throws") {
    Graph g;
    Tensor x = Tensor::zeros({3});
    Tensor mask = Tensor::zeros({3});
    REQUIRE_THROWS_AS(reduce_mean(g.leaf(x), &mask), DegenerateInputError);
}

TEST_CASE("select_mask fills and blocks gradient") {
    Graph g;
    Tensor x({3}, {1.0, 2.0, 3.0});
    Tensor mask({3}, {1.0, 0.0, 1.0});
    Var xv = g.leaf(x, true);
    Var y = select_mask(xv, mask, -9.0);
    REQUIRE(y.value()[1] == -9.0);
    g.backward(reduce_sum(y));
    REQUIRE(xv.grad()[0] == 1.0);
    REQUIRE(xv.grad()[1] == 0.0);
    REQUIRE(xv.grad()[2] == 1.0);
}

TEST_CASE("spatial op gradients match finite differences") {
    Rng rng(8);
    Tensor x = Tensor::uniform({2, 3, 4, 6}, rng, -1.0, 1.0);
    check_op_grad(x, [](Graph&, Var v) { return avgpool2x2(v); }, rng);
    check_op_grad(x, [](Graph&, Var v) { return upsample2x(v); }, rng);
    check_op_grad(x, [](Graph&, Var v) { return global_avg_pool(v); }, rng);
}

TEST_CASE("avgpool2x2 requires even extents") {
    Graph g;
    Var x = g.leaf(Tensor::zeros({1, 1, 5, 4}));
    REQUIRE_THROWS_AS(avgpool2x2(x), DimensionError);
}

TEST_CASE("concat_channels layout and gradients") {
    Rng rng(9);
    Tensor a = Tensor::uniform({2, 2, 3, 3}, rng, -1.0, 1.0);
    Tensor b = Tensor::uniform({2, 1, 3, 3}, rng, -1.0, 1.0);

    Graph g;
    Var va = g.leaf(a);
    Var vb = g.leaf(b);
    Var cat = concat_channels({va, vb});
    REQUIRE(cat.shape() == Shape{2, 3, 3, 3});
    // the second image's appended channel sits after its own first two
    REQUIRE(cat.value().at({1, 2, 0, 0}) == b.at({1, 0, 0, 0}));
    REQUIRE(cat.value().at({0, 1, 2, 2}) == a.at({0, 1, 2, 2}));

    check_op_grad(a, [&](Graph& gr, Var v) { return concat_channels({v, gr.leaf(b, true)}); }, rng);
    check_op_grad(b, [&](Graph& gr, Var v) { return concat_channels({gr.leaf(a, true), v}); }, rng);
}

TEST_CASE("reshape relabels extents and passes gradients through") {
    Rng rng(17);
    Tensor x = Tensor::uniform({1, 4, 1, 3}, rng, -1.0, 1.0);

    Graph g;
    Var r = reshape(g.leaf(x), {4, 3});
    REQUIRE(r.shape() == Shape{4, 3});
    REQUIRE(r.value().at({2, 1}) == x.at({0, 2, 0, 1}));

    check_op_grad(x, [&](Graph&, Var v) { return relu(reshape(v, {4, 3})); }, rng);

    REQUIRE_THROWS_AS(reshape(g.leaf(x), {5, 3}), DimensionError);
}

TEST_CASE("instance_broadcast scatters columns and routes gradients") {
    Rng rng(21);
    Tensor embeds({2, 3}, {10.0, 20.0, 30.0, 1.0, 2.0, 3.0});
    std::vector<Tensor> maps;
    maps.push_back(Tensor({2, 2}, {0.0, 1.0, 3.0, 1.0}));
    maps.push_back(Tensor({2, 2}, {2.0, 0.0, 0.0, 2.0}));

    Graph g;
    Var out = instance_broadcast(g.leaf(embeds), maps);
    REQUIRE(out.shape() == Shape{2, 2, 2, 2});
    REQUIRE(out.value().at({0, 0, 0, 0}) == 0.0);
    REQUIRE(out.value().at({0, 0, 0, 1}) == 10.0);
    REQUIRE(out.value().at({0, 1, 1, 0}) == 3.0);
    REQUIRE(out.value().at({1, 0, 0, 0}) == 20.0);

    Tensor e2 = Tensor::uniform({4, 5}, rng, -1.0, 1.0);
    std::vector<Tensor> m2;
    Tensor idx({3, 3});
    for (std::size_t i = 0; i < 9; ++i) idx[i] = static_cast<double>(rng.uniform_int(0, 5));
    m2.push_back(idx);
    check_op_grad(e2, [&](Graph&, Var v) { return instance_broadcast(v, m2); }, rng);

    Tensor bad({1, 1}, {7.0});
    REQUIRE_THROWS_AS(instance_broadcast(g.leaf(e2), {bad}), ContractError);
}

TEST_CASE("cumulative_centers values and gradients") {
    Graph g;
    Tensor w({1, 3}, {0.2, 0.3, 0.5});
    Var c = cumulative_centers(g.leaf(w), 1.0, 11.0);
    // centers at 1 + 10 * (0.1, 0.35, 0.75)
    REQUIRE(c.value()[0] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(c.value()[1] == Catch::Approx(4.5).margin(1e-12));
    REQUIRE(c.value()[2] == Catch::Approx(8.5).margin(1e-12));

    Rng rng(10);
    Tensor w2 = Tensor::uniform({2, 6}, rng, 0.05, 0.3);
    check_op_grad(w2, [](Graph&, Var v) { return cumulative_centers(v, 1.0, 10.0); }, rng);
}

TEST_CASE("bin_center_mix values and gradients") {
    Rng rng(11);
    Graph g;
    Tensor probs({1, 2, 1, 2}, {0.25, 0.5, 0.75, 0.5});
    Tensor centers({1, 2}, {2.0, 6.0});
    Var d = bin_center_mix(g.leaf(probs), g.leaf(centers));
    REQUIRE(d.shape() == Shape{1, 1, 1, 2});
    REQUIRE(d.value()[0] == Catch::Approx(0.25 * 2.0 + 0.75 * 6.0));
    REQUIRE(d.value()[1] == Catch::Approx(0.5 * 2.0 + 0.5 * 6.0));

    Tensor p2 = Tensor::uniform({2, 4, 3, 3}, rng, 0.0, 1.0);
    Tensor c2 = Tensor::uniform({2, 4}, rng, 1.0, 10.0);
    check_op_grad(p2, [&](Graph& gr, Var v) { return bin_center_mix(v, gr.leaf(c2, true)); }, rng);
    check_op_grad(c2, [&](Graph& gr, Var v) { return bin_center_mix(gr.leaf(p2, true), v); }, rng);
}

TEST_CASE("chamfer_to_values matches brute force and differentiates") {
    Rng rng(12);
    Tensor centers({1, 3}, {1.0, 4.0, 9.0});
    std::vector<std::vector<double>> values = {{2.0, 8.0}};

    Graph g;
    Var c = g.leaf(centers, true);
    Var loss = chamfer_to_values(c, values);
    // forward: mean over values of min (1, 4), (1,16) -> (1 + 1)/2 = 1
    // backward: mean over centers of min: c=1 ->1, c=4 -> 4, c=9 ->1 => 2
    REQUIRE(loss.value()[0] == Catch::Approx(1.0 + 2.0));

    Tensor c2 = Tensor::uniform({2, 5}, rng, 0.0, 10.0);
    std::vector<std::vector<double>> v2 = {{1.0, 3.0, 7.5}, {2.2, 9.1}};
    check_op_grad(c2, [&](Graph&, Var v) { return chamfer_to_values(v, v2); }, rng, 5e-4);
}

TEST_CASE("backward requires a scalar loss") {
    Graph g;
    Var x = g.leaf(Tensor::zeros({2, 2}), true);
    Var y = relu(x);
    REQUIRE_THROWS_AS(g.backward(y), ContractError);
}

TEST_CASE("gradient accumulates across shared consumers") {
    Graph g;
    Var x = g.leaf(Tensor::scalar(3.0), true);
    Var y = add(mul(x, x), x); // x^2 + x, d/dx = 2x + 1 = 7
    g.backward(y);
    REQUIRE(x.grad()[0] == Catch::Approx(7.0));
}

TEST_CASE("composite network chain matches finite differences end to end") {
    Rng rng(13);
    Tensor x = Tensor::uniform({1, 2, 8, 8}, rng, 0.1, 1.0);
    Tensor k1 = Tensor::uniform({4, 2, 3, 3}, rng, -0.4, 0.4);
    Tensor b1 = Tensor::uniform({4}, rng, -0.1, 0.1);
    Tensor k2 = Tensor::uniform({3, 4, 1, 1}, rng, -0.4, 0.4);

    auto net = [&](Graph& g, Var kv1) {
        Var h = relu(channel_bias(conv2d(g.leaf(x, true), kv1, 1, 1), g.leaf(b1, true)));
        h = avgpool2x2(h);
        Var logits = conv2d(h, g.leaf(k2, true), 1, 0);
        Var probs = softmax_axis(logits, 1);
        Var picked = offset(probs, 0.01);
        return reduce_mean(log(picked));
    };

    Graph pg;
    Tensor w = Tensor::scalar(1.0);
    Tensor analytic = probe_tape_grad(k1, [&](Graph& g, Var v) { return net(g, v); }, w);
    Tensor numeric = numeric_grad(
        [&](const Tensor& t) { return probe_loss(t, [&](Graph& g, Var v) { return net(g, v); }, w); }, k1);
    REQUIRE(max_rel_err(analytic, numeric) < 1e-3);
}
