#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/tensor.hpp"

namespace cuedepth {

class Graph;

/// Handle to a node on a Graph tape. Cheap to copy.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph* graph() const { return graph_; }
    std::size_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const;

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// record is topologically sorted by construction; backward() walks it
/// once in reverse. A graph is built and consumed by one thread.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        Tensor value;
        Tensor grad;       // allocated on first accumulation
        bool has_grad = false;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward; // empty for leaves
        const char* op = "leaf";
    };

    Var leaf(Tensor value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    std::size_t add_node(Tensor value, std::vector<std::size_t> inputs, const char* op,
                         BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        n.op = op;
        for (std::size_t in : n.inputs) {
            if (nodes_[in].requires_grad) {
                n.requires_grad = true;
                break;
            }
        }
        if (n.requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer of a node, allocated as zeros on first use.
    Tensor& grad_buf(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape());
            n.has_grad = true;
        }
        return n.grad;
    }

    const Tensor& grad(std::size_t id) const {
        const Node& n = nodes_[id];
        if (!n.has_grad) {
            static const Tensor empty;
            if (n.value.numel() == 0) return empty;
            throw ContractError("gradient of node was never computed; call backward first");
        }
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

    /// Accumulate d(loss)/d(leaf) for every reachable requires_grad node.
    /// Contributions from multiple consumers sum. Single use per graph.
    void backward(Var loss) {
        if (loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
        const std::size_t root = loss.id();
        if (nodes_[root].value.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(nodes_[root].value.shape()));
        }
        if (!nodes_[root].requires_grad) return;
        grad_buf(root)[0] = 1.0;
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.has_grad && n.backward) n.backward(*this, i);
        }
    }

    void reserve(std::size_t n) { nodes_.reserve(n); }

private:
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Tensor& Var::grad() const { return graph_->grad(id_); }
inline const Shape& Var::shape() const { return graph_->value(id_).shape(); }

namespace detail {

inline Graph* same_graph(Var a, Var b, const char* op) {
    if (a.graph() != b.graph()) throw ContractError(std::string(op) + ": operands on different graphs");
    return a.graph();
}

inline void axpy(double* dst, const double* src, double a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

// dot product with fixed 8-way partial sums; the explicit reassociation
// lets the compiler vectorize while staying deterministic per build
inline double dot8(const double* a, const double* b, std::size_t n) {
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    double acc = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

} // namespace detail

// ---------------------------------------------------------------------------
// linear: out[b,o] = sum_i x[b,i] * w[i,o] + b[o]
// ---------------------------------------------------------------------------

inline Var linear(Var x, Var w, Var b) {
    Graph* g = detail::same_graph(x, w, "linear");
    detail::same_graph(x, b, "linear");
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.extent(1) != wv.extent(0) ||
        wv.extent(1) != bv.extent(0)) {
        throw DimensionError("linear: incompatible shapes x" + shape_str(xv.shape()) + " w" +
                             shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
    }
    const std::size_t B = xv.extent(0), I = xv.extent(1), O = wv.extent(1);
    Tensor out({B, O});
    for (std::size_t bi = 0; bi < B; ++bi) {
        double* op = out.data() + bi * O;
        for (std::size_t o = 0; o < O; ++o) op[o] = bv[o];
        const double* xp = xv.data() + bi * I;
        for (std::size_t i = 0; i < I; ++i) detail::axpy(op, wv.data() + i * O, xp[i], O);
    }
    const std::size_t xid = x.id(), wid = w.id(), bid = b.id();
    std::size_t id = g->add_node(std::move(out), {xid, wid, bid}, "linear",
                                 [xid, wid, bid, B, I, O](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.value(xid);
        const Tensor& wv2 = gg.value(wid);
        if (gg.needs_grad(xid)) {
            Tensor& gx = gg.grad_buf(xid);
            for (std::size_t bi = 0; bi < B; ++bi) {
                const double* gp = go.data() + bi * O;
                double* gxp = gx.data() + bi * I;
                for (std::size_t i = 0; i < I; ++i) gxp[i] += detail::dot8(gp, wv2.data() + i * O, O);
            }
        }
        if (gg.needs_grad(wid)) {
            Tensor& gw = gg.grad_buf(wid);
            for (std::size_t bi = 0; bi < B; ++bi) {
                const double* gp = go.data() + bi * O;
                const double* xp = xv2.data() + bi * I;
                for (std::size_t i = 0; i < I; ++i) detail::axpy(gw.data() + i * O, gp, xp[i], O);
            }
        }
        if (gg.needs_grad(bid)) {
            Tensor& gb = gg.grad_buf(bid);
            for (std::size_t bi = 0; bi < B; ++bi) detail::axpy(gb.data(), go.data() + bi * O, 1.0, O);
        }
    });
    return Var(g, id);
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, kernels 1x1 or 3x3, stride 1 or 2.
// Output extents must divide exactly: Ho = (H + 2*pad - kh)/stride + 1.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    std::size_t B, C, H, W, F, kh, kw, Ho, Wo;
    int stride, pad;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int pad) {
    if (x.rank() != 4 || k.rank() != 4) {
        throw DimensionError("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) +
                             " and " + shape_str(k.shape()));
    }
    ConvDims d;
    d.B = x.extent(0); d.C = x.extent(1); d.H = x.extent(2); d.W = x.extent(3);
    d.F = k.extent(0); d.kh = k.extent(2); d.kw = k.extent(3);
    d.stride = stride; d.pad = pad;
    if ((d.kh != 1 && d.kh != 3) || (d.kw != 1 && d.kw != 3)) {
        throw ContractError("conv2d: kernel extents must be 1 or 3, got " + shape_str(k.shape()));
    }
    if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
    if (pad < 0) throw ContractError("conv2d: pad must be non-negative");
    if (k.extent(1) != d.C) {
        throw DimensionError("conv2d: channel mismatch x" + shape_str(x.shape()) + " vs k" +
                             shape_str(k.shape()));
    }
    const std::ptrdiff_t hnum = static_cast<std::ptrdiff_t>(d.H) + 2 * pad - static_cast<std::ptrdiff_t>(d.kh);
    const std::ptrdiff_t wnum = static_cast<std::ptrdiff_t>(d.W) + 2 * pad - static_cast<std::ptrdiff_t>(d.kw);
    if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0) {
        throw DimensionError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                             ", kernel " + shape_str(k.shape()) + ", stride " + std::to_string(stride) +
                             ", pad " + std::to_string(pad));
    }
    d.Ho = static_cast<std::size_t>(hnum / stride) + 1;
    d.Wo = static_cast<std::size_t>(wnum / stride) + 1;
    return d;
}

// out-of-range guard for xo: xi = xo*stride - pad + kx in [0, W)
inline void conv_x_range(const ConvDims& d, std::size_t kx, std::size_t& lo, std::size_t& hi) {
    const int s = d.stride;
    const int base = -d.pad + static_cast<int>(kx);
    int xlo = 0;
    while (xlo * s + base < 0) ++xlo;
    int xhi = static_cast<int>(d.Wo); // exclusive
    while (xhi > xlo && (xhi - 1) * s + base >= static_cast<int>(d.W)) --xhi;
    lo = static_cast<std::size_t>(xlo);
    hi = static_cast<std::size_t>(xhi);
}

// ---------------------------------------------------------------------------
// Register-blocked kernels for the two layer shapes the depth nets use:
// 3x3 stride-1 pad-1 and 1x1 stride-1 pad-0. Four planes accumulate per
// input-row sweep so the inner loops stay FMA-bound instead of store-bound.
// ---------------------------------------------------------------------------

constexpr std::size_t kConvRowMax = 512;

inline bool conv_fast3(const ConvDims& d) {
    return d.stride == 1 && d.pad == 1 && d.kh == 3 && d.kw == 3 && d.W <= kConvRowMax;
}

inline bool conv_fast1(const ConvDims& d) {
    return d.stride == 1 && d.pad == 0 && d.kh == 1 && d.kw == 1;
}

// acc[i][x] += w0[i]*r[x-1] + w1[i]*r[x] + w2[i]*r[x+1], zero-padded columns
inline void conv3_row_update(double (*acc)[kConvRowMax], int nb, const double* r, const double* w0,
                             const double* w1, const double* w2, std::size_t W) {
    if (nb == 4) {
        const double a0 = w0[0], a1 = w0[1], a2 = w0[2], a3 = w0[3];
        const double b0 = w1[0], b1 = w1[1], b2 = w1[2], b3 = w1[3];
        const double c0 = w2[0], c1 = w2[1], c2 = w2[2], c3 = w2[3];
#pragma omp simd
        for (std::size_t x = 1; x < W - 1; ++x) {
            const double xm = r[x - 1], xc = r[x], xp = r[x + 1];
            acc[0][x] += a0 * xm + b0 * xc + c0 * xp;
            acc[1][x] += a1 * xm + b1 * xc + c1 * xp;
            acc[2][x] += a2 * xm + b2 * xc + c2 * xp;
            acc[3][x] += a3 * xm + b3 * xc + c3 * xp;
        }
    } else {
        for (int i = 0; i < nb; ++i) {
            const double a = w0[i], b = w1[i], c = w2[i];
#pragma omp simd
            for (std::size_t x = 1; x < W - 1; ++x)
                acc[i][x] += a * r[x - 1] + b * r[x] + c * r[x + 1];
        }
    }
    for (int i = 0; i < nb; ++i) {
        acc[i][0] += w1[i] * r[0] + (W > 1 ? w2[i] * r[1] : 0.0);
        if (W > 1) acc[i][W - 1] += w0[i] * r[W - 2] + w1[i] * r[W - 1];
    }
}

// forward, one batch item: out[f] = sum_c k[f,c] (*) x[c]
inline void conv3_fwd_one(const double* xb, const double* kp, double* ob, std::size_t C, std::size_t F,
                          std::size_t H, std::size_t W) {
    double acc[4][kConvRowMax];
    double w0[4], w1[4], w2[4];
    for (std::size_t f0 = 0; f0 < F; f0 += 4) {
        const int fb = static_cast<int>(std::min<std::size_t>(4, F - f0));
        for (std::size_t yo = 0; yo < H; ++yo) {
            for (int fi = 0; fi < fb; ++fi) std::memset(acc[fi], 0, W * sizeof(double));
            for (std::size_t c = 0; c < C; ++c) {
                const double* xc = xb + c * H * W;
                for (int ky = 0; ky < 3; ++ky) {
                    const int yi = static_cast<int>(yo) - 1 + ky;
                    if (yi < 0 || yi >= static_cast<int>(H)) continue;
                    for (int fi = 0; fi < fb; ++fi) {
                        const double* kw = kp + ((f0 + static_cast<std::size_t>(fi)) * C + c) * 9 +
                                           static_cast<std::size_t>(ky) * 3;
                        w0[fi] = kw[0];
                        w1[fi] = kw[1];
                        w2[fi] = kw[2];
                    }
                    conv3_row_update(acc, fb, xc + static_cast<std::size_t>(yi) * W, w0, w1, w2, W);
                }
            }
            for (int fi = 0; fi < fb; ++fi) {
                std::memcpy(ob + ((f0 + static_cast<std::size_t>(fi)) * H + yo) * W, acc[fi],
                            W * sizeof(double));
            }
        }
    }
}

// input gradient, one batch item: gx[c] += sum_f flip(k[f,c]) (*) go[f]
inline void conv3_bwd_x_one(const double* gob, const double* kp, double* gxb, std::size_t C,
                            std::size_t F, std::size_t H, std::size_t W) {
    double acc[4][kConvRowMax];
    double w0[4], w1[4], w2[4];
    for (std::size_t c0 = 0; c0 < C; c0 += 4) {
        const int cb = static_cast<int>(std::min<std::size_t>(4, C - c0));
        for (std::size_t yi = 0; yi < H; ++yi) {
            for (int ci = 0; ci < cb; ++ci) std::memset(acc[ci], 0, W * sizeof(double));
            for (std::size_t f = 0; f < F; ++f) {
                const double* gof = gob + f * H * W;
                for (int ky = 0; ky < 3; ++ky) {
                    const int yo = static_cast<int>(yi) + 1 - ky;
                    if (yo < 0 || yo >= static_cast<int>(H)) continue;
                    for (int ci = 0; ci < cb; ++ci) {
                        const double* kw = kp + (f * C + c0 + static_cast<std::size_t>(ci)) * 9 +
                                           static_cast<std::size_t>(ky) * 3;
                        w0[ci] = kw[2];
                        w1[ci] = kw[1];
                        w2[ci] = kw[0];
                    }
                    conv3_row_update(acc, cb, gof + static_cast<std::size_t>(yo) * W, w0, w1, w2, W);
                }
            }
            for (int ci = 0; ci < cb; ++ci) {
                double* gr = gxb + ((c0 + static_cast<std::size_t>(ci)) * H + yi) * W;
                const double* a = acc[ci];
#pragma omp simd
                for (std::size_t x = 0; x < W; ++x) gr[x] += a[x];
            }
        }
    }
}

// kernel gradient: gk[f,c,ky,kx] += sum over batch and pixels. Taps
// accumulate into stack rows so the horizontal sum happens once per
// filter pair instead of once per image row.
inline void conv3_bwd_k(const ConvDims& d, const double* xv, const double* gov, double* gk) {
    double xpad[kConvRowMax + 2];
    double acc[9][kConvRowMax];
    const std::size_t H = d.H, W = d.W;
    xpad[0] = 0.0;
    xpad[W + 1] = 0.0;
    for (std::size_t f = 0; f < d.F; ++f) {
        for (std::size_t c = 0; c < d.C; ++c) {
            for (int t = 0; t < 9; ++t) std::memset(acc[t], 0, W * sizeof(double));
            for (std::size_t b = 0; b < d.B; ++b) {
                const double* xplane = xv + (b * d.C + c) * H * W;
                const double* gop = gov + (b * d.F + f) * H * W;
                for (std::size_t yi = 0; yi < H; ++yi) {
                    std::memcpy(xpad + 1, xplane + yi * W, W * sizeof(double));
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yo = static_cast<int>(yi) + 1 - ky;
                        if (yo < 0 || yo >= static_cast<int>(H)) continue;
                        const double* gr = gop + static_cast<std::size_t>(yo) * W;
                        double* a0 = acc[ky * 3 + 0];
                        double* a1 = acc[ky * 3 + 1];
                        double* a2 = acc[ky * 3 + 2];
#pragma omp simd
                        for (std::size_t x = 0; x < W; ++x) {
                            const double g = gr[x];
                            a0[x] += g * xpad[x];
                            a1[x] += g * xpad[x + 1];
                            a2[x] += g * xpad[x + 2];
                        }
                    }
                }
            }
            double* gkp = gk + (f * d.C + c) * 9;
            for (int t = 0; t < 9; ++t) {
                double s = 0.0;
                for (std::size_t x = 0; x < W; ++x) s += acc[t][x];
                gkp[t] += s;
            }
        }
    }
}

// 1x1 kernel gradient: one dot product per (f, c, batch) plane pair
inline void conv1_bwd_k(const ConvDims& d, const double* xv, const double* gov, double* gk) {
    const std::size_t N = d.H * d.W;
    for (std::size_t f = 0; f < d.F; ++f) {
        for (std::size_t c = 0; c < d.C; ++c) {
            double s = 0.0;
            for (std::size_t b = 0; b < d.B; ++b)
                s += dot8(xv + (b * d.C + c) * N, gov + (b * d.F + f) * N, N);
            gk[f * d.C + c] += s;
        }
    }
}

// 1x1 forward, one batch item, processed in row-buffer chunks
inline void conv1_fwd_one(const double* xb, const double* kp, double* ob, std::size_t C, std::size_t F,
                          std::size_t N) {
    double acc[4][kConvRowMax];
    double w[4];
    for (std::size_t f0 = 0; f0 < F; f0 += 4) {
        const int fb = static_cast<int>(std::min<std::size_t>(4, F - f0));
        for (std::size_t off = 0; off < N; off += kConvRowMax) {
            const std::size_t len = std::min(kConvRowMax, N - off);
            for (int fi = 0; fi < fb; ++fi) std::memset(acc[fi], 0, len * sizeof(double));
            for (std::size_t c = 0; c < C; ++c) {
                const double* r = xb + c * N + off;
                for (int fi = 0; fi < fb; ++fi) w[fi] = kp[(f0 + static_cast<std::size_t>(fi)) * C + c];
                if (fb == 4) {
                    const double u0 = w[0], u1 = w[1], u2 = w[2], u3 = w[3];
#pragma omp simd
                    for (std::size_t i = 0; i < len; ++i) {
                        const double v = r[i];
                        acc[0][i] += u0 * v;
                        acc[1][i] += u1 * v;
                        acc[2][i] += u2 * v;
                        acc[3][i] += u3 * v;
                    }
                } else {
                    for (int fi = 0; fi < fb; ++fi) {
                        const double u = w[fi];
#pragma omp simd
                        for (std::size_t i = 0; i < len; ++i) acc[fi][i] += u * r[i];
                    }
                }
            }
            for (int fi = 0; fi < fb; ++fi) {
                std::memcpy(ob + (f0 + static_cast<std::size_t>(fi)) * N + off, acc[fi],
                            len * sizeof(double));
            }
        }
    }
}

// 1x1 input gradient, one batch item: gx[c] += sum_f k[f,c] * go[f]
inline void conv1_bwd_x_one(const double* gob, const double* kp, double* gxb, std::size_t C,
                            std::size_t F, std::size_t N) {
    double acc[4][kConvRowMax];
    double w[4];
    for (std::size_t c0 = 0; c0 < C; c0 += 4) {
        const int cb = static_cast<int>(std::min<std::size_t>(4, C - c0));
        for (std::size_t off = 0; off < N; off += kConvRowMax) {
            const std::size_t len = std::min(kConvRowMax, N - off);
            for (int ci = 0; ci < cb; ++ci) std::memset(acc[ci], 0, len * sizeof(double));
            for (std::size_t f = 0; f < F; ++f) {
                const double* r = gob + f * N + off;
                for (int ci = 0; ci < cb; ++ci) w[ci] = kp[f * C + c0 + static_cast<std::size_t>(ci)];
                if (cb == 4) {
                    const double u0 = w[0], u1 = w[1], u2 = w[2], u3 = w[3];
#pragma omp simd
                    for (std::size_t i = 0; i < len; ++i) {
                        const double v = r[i];
                        acc[0][i] += u0 * v;
                        acc[1][i] += u1 * v;
                        acc[2][i] += u2 * v;
                        acc[3][i] += u3 * v;
                    }
                } else {
                    for (int ci = 0; ci < cb; ++ci) {
                        const double u = w[ci];
#pragma omp simd
                        for (std::size_t i = 0; i < len; ++i) acc[ci][i] += u * r[i];
                    }
                }
            }
            for (int ci = 0; ci < cb; ++ci) {
                double* gr = gxb + (c0 + static_cast<std::size_t>(ci)) * N + off;
                const double* a = acc[ci];
#pragma omp simd
                for (std::size_t i = 0; i < len; ++i) gr[i] += a[i];
            }
        }
    }
}

} // namespace detail

inline Var conv2d(Var x, Var k, int stride = 1, int pad = 0) {
    Graph* g = detail::same_graph(x, k, "conv2d");
    const Tensor& xv = x.value();
    const Tensor& kv = k.value();
    const detail::ConvDims d = detail::conv_dims(xv, kv, stride, pad);

    Tensor out({d.B, d.F, d.Ho, d.Wo});
    if (detail::conv_fast3(d)) {
        for (std::size_t b = 0; b < d.B; ++b)
            detail::conv3_fwd_one(xv.data() + b * d.C * d.H * d.W, kv.data(),
                                  out.data() + b * d.F * d.H * d.W, d.C, d.F, d.H, d.W);
    } else if (detail::conv_fast1(d)) {
        for (std::size_t b = 0; b < d.B; ++b)
            detail::conv1_fwd_one(xv.data() + b * d.C * d.H * d.W, kv.data(),
                                  out.data() + b * d.F * d.H * d.W, d.C, d.F, d.H * d.W);
    } else {
    for (std::size_t b = 0; b < d.B; ++b) {
        for (std::size_t f = 0; f < d.F; ++f) {
            double* op = out.data() + (b * d.F + f) * d.Ho * d.Wo;
            for (std::size_t c = 0; c < d.C; ++c) {
                const double* xplane = xv.data() + (b * d.C + c) * d.H * d.W;
                const double* kp = kv.data() + (f * d.C + c) * d.kh * d.kw;
                for (std::size_t ky = 0; ky < d.kh; ++ky) {
                    for (std::size_t kx = 0; kx < d.kw; ++kx) {
                        const double wgt = kp[ky * d.kw + kx];
                        std::size_t xlo, xhi;
                        detail::conv_x_range(d, kx, xlo, xhi);
                        for (std::size_t yo = 0; yo < d.Ho; ++yo) {
                            const int yi = static_cast<int>(yo) * stride - pad + static_cast<int>(ky);
                            if (yi < 0 || yi >= static_cast<int>(d.H)) continue;
                            const double* row = xplane + static_cast<std::size_t>(yi) * d.W;
                            double* orow = op + yo * d.Wo;
                            const int base = -pad + static_cast<int>(kx);
                            if (stride == 1) {
                                const double* src = row + xlo + base;
                                for (std::size_t xo = xlo; xo < xhi; ++xo) orow[xo] += wgt * src[xo - xlo];
                            } else {
                                for (std::size_t xo = xlo; xo < xhi; ++xo)
                                    orow[xo] += wgt * row[static_cast<std::size_t>(static_cast<int>(xo) * 2 + base)];
                            }
                        }
                    }
                }
            }
        }
    }
    }

    const std::size_t xid = x.id(), kid = k.id();
    std::size_t id = g->add_node(std::move(out), {xid, kid}, "conv2d",
                                 [xid, kid, d](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.value(xid);
        const Tensor& kv2 = gg.value(kid);
        const int stride = d.stride, pad = d.pad;
        if (gg.needs_grad(xid)) {
            Tensor& gx = gg.grad_buf(xid);
            if (detail::conv_fast3(d)) {
                for (std::size_t b = 0; b < d.B; ++b)
                    detail::conv3_bwd_x_one(go.data() + b * d.F * d.H * d.W, kv2.data(),
                                            gx.data() + b * d.C * d.H * d.W, d.C, d.F, d.H, d.W);
            } else if (detail::conv_fast1(d)) {
                for (std::size_t b = 0; b < d.B; ++b)
                    detail::conv1_bwd_x_one(go.data() + b * d.F * d.H * d.W, kv2.data(),
                                            gx.data() + b * d.C * d.H * d.W, d.C, d.F, d.H * d.W);
            } else {
            for (std::size_t b = 0; b < d.B; ++b) {
                for (std::size_t c = 0; c < d.C; ++c) {
                    double* gxplane = gx.data() + (b * d.C + c) * d.H * d.W;
                    for (std::size_t f = 0; f < d.F; ++f) {
                        const double* gop = go.data() + (b * d.F + f) * d.Ho * d.Wo;
                        const double* kp = kv2.data() + (f * d.C + c) * d.kh * d.kw;
                        for (std::size_t ky = 0; ky < d.kh; ++ky) {
                            for (std::size_t kx = 0; kx < d.kw; ++kx) {
                                const double wgt = kp[ky * d.kw + kx];
                                std::size_t xlo, xhi;
                                detail::conv_x_range(d, kx, xlo, xhi);
                                for (std::size_t yo = 0; yo < d.Ho; ++yo) {
                                    const int yi = static_cast<int>(yo) * stride - pad + static_cast<int>(ky);
                                    if (yi < 0 || yi >= static_cast<int>(d.H)) continue;
                                    double* grow = gxplane + static_cast<std::size_t>(yi) * d.W;
                                    const double* gorow = gop + yo * d.Wo;
                                    const int base = -pad + static_cast<int>(kx);
                                    if (stride == 1) {
                                        double* dst = grow + xlo + base;
                                        for (std::size_t xo = xlo; xo < xhi; ++xo) dst[xo - xlo] += wgt * gorow[xo];
                                    } else {
                                        for (std::size_t xo = xlo; xo < xhi; ++xo)
                                            grow[static_cast<std::size_t>(static_cast<int>(xo) * 2 + base)] += wgt * gorow[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            }
        }
        if (gg.needs_grad(kid)) {
            Tensor& gk = gg.grad_buf(kid);
            if (detail::conv_fast3(d)) {
                detail::conv3_bwd_k(d, xv2.data(), go.data(), gk.data());
            } else if (detail::conv_fast1(d)) {
                detail::conv1_bwd_k(d, xv2.data(), go.data(), gk.data());
            } else {
            for (std::size_t f = 0; f < d.F; ++f) {
                for (std::size_t c = 0; c < d.C; ++c) {
                    double* gkp = gk.data() + (f * d.C + c) * d.kh * d.kw;
                    for (std::size_t ky = 0; ky < d.kh; ++ky) {
                        for (std::size_t kx = 0; kx < d.kw; ++kx) {
                            std::size_t xlo, xhi;
                            detail::conv_x_range(d, kx, xlo, xhi);
                            double acc = 0.0;
                            for (std::size_t b = 0; b < d.B; ++b) {
                                const double* xplane = xv2.data() + (b * d.C + c) * d.H * d.W;
                                const double* gop = go.data() + (b * d.F + f) * d.Ho * d.Wo;
                                for (std::size_t yo = 0; yo < d.Ho; ++yo) {
                                    const int yi = static_cast<int>(yo) * stride - pad + static_cast<int>(ky);
                                    if (yi < 0 || yi >= static_cast<int>(d.H)) continue;
                                    const double* row = xplane + static_cast<std::size_t>(yi) * d.W;
                                    const double* gorow = gop + yo * d.Wo;
                                    const int base = -pad + static_cast<int>(kx);
                                    if (stride == 1) {
                                        acc += detail::dot8(row + xlo + base, gorow + xlo, xhi - xlo);
                                    } else {
                                        for (std::size_t xo = xlo; xo < xhi; ++xo)
                                            acc += row[static_cast<std::size_t>(static_cast<int>(xo) * 2 + base)] * gorow[xo];
                                    }
                                }
                            }
                            gkp[ky * d.kw + kx] += acc;
                        }
                    }
                }
            }
            }
        }
    });
    return Var(g, id);
}

/// Adds a per-channel bias to a B x C x H x W tensor.
inline Var channel_bias(Var x, Var b) {
    Graph* g = detail::same_graph(x, b, "channel_bias");
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 4 || bv.rank() != 1 || bv.extent(0) != xv.extent(1)) {
        throw DimensionError("channel_bias: x" + shape_str(xv.shape()) + " vs b" + shape_str(bv.shape()));
    }
    const std::size_t B = xv.extent(0), C = xv.extent(1), HW = xv.extent(2) * xv.extent(3);
    Tensor out(xv.shape());
    for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = xv.data() + (bi * C + c) * HW;
            double* dst = out.data() + (bi * C + c) * HW;
            const double bias = bv[c];
            for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + bias;
        }
    const std::size_t xid = x.id(), bid = b.id();
    std::size_t id = g->add_node(std::move(out), {xid, bid}, "channel_bias",
                                 [xid, bid, B, C, HW](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(xid)) {
            Tensor& gx = gg.grad_buf(xid);
            detail::axpy(gx.data(), go.data(), 1.0, go.numel());
        }
        if (gg.needs_grad(bid)) {
            Tensor& gb = gg.grad_buf(bid);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t c = 0; c < C; ++c) {
                    const double* src = go.data() + (bi * C + c) * HW;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < HW; ++i) acc += src[i];
                    gb[c] += acc;
                }
        }
    });
    return Var(g, id);
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops require equal shapes or a scalar (numel 1)
// on either side; no other broadcasting.
// ---------------------------------------------------------------------------

inline Var relu(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "relu", [xid](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.value(xid);
        Tensor& gx = gg.grad_buf(xid);
        // derivative at exactly 0 is 0
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (xv2[i] > 0.0) gx[i] += go[i];
    });
    return Var(g, id);
}

inline Var log(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        if (xv[i] <= 0.0) {
            throw DomainError("log of non-positive value " + std::to_string(xv[i]) +
                              " at flat index " + std::to_string(i));
        }
        out[i] = std::log(xv[i]);
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "log", [xid](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.value(xid);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] / xv2[i];
    });
    return Var(g, id);
}

inline Var exp(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::exp(xv[i]);
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "exp", [xid](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& yv = gg.value(self);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * yv[i];
    });
    return Var(g, id);
}

inline Var sqrt(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        if (xv[i] < 0.0) {
            throw DomainError("sqrt of negative value " + std::to_string(xv[i]) +
                              " at flat index " + std::to_string(i));
        }
        out[i] = std::sqrt(xv[i]);
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "sqrt", [xid](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& yv = gg.value(self);
        Tensor& gx = gg.grad_buf(xid);
        // subgradient 0 at x == 0, same convention as relu
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (yv[i] > 0.0) gx[i] += go[i] * 0.5 / yv[i];
    });
    return Var(g, id);
}

namespace detail {

enum class BinKind { add, sub, mul, div };

inline Var binary_op(Var x, Var y, BinKind kind, const char* name) {
    Graph* g = same_graph(x, y, name);
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    const bool xs = xv.numel() == 1, ys = yv.numel() == 1;
    if (!xs && !ys && !xv.same_shape(yv)) {
        throw DimensionError(std::string(name) + ": shape mismatch " + shape_str(xv.shape()) +
                             " vs " + shape_str(yv.shape()) + " (only scalar broadcast allowed)");
    }
    const Shape& oshape = xs ? yv.shape() : xv.shape();
    Tensor out(oshape);
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double a = xv[xs ? 0 : i];
        const double b = yv[ys ? 0 : i];
        switch (kind) {
            case BinKind::add: out[i] = a + b; break;
            case BinKind::sub: out[i] = a - b; break;
            case BinKind::mul: out[i] = a * b; break;
            case BinKind::div: out[i] = a / b; break;
        }
    }
    const std::size_t xid = x.id(), yid = y.id();
    std::size_t id = g->add_node(std::move(out), {xid, yid}, name,
                                 [xid, yid, xs, ys, kind, n](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        const Tensor& xv2 = gg.value(xid);
        const Tensor& yv2 = gg.value(yid);
        if (gg.needs_grad(xid)) {
            Tensor& gx = gg.grad_buf(xid);
            for (std::size_t i = 0; i < n; ++i) {
                double d = 0.0;
                switch (kind) {
                    case BinKind::add: d = go[i]; break;
                    case BinKind::sub: d = go[i]; break;
                    case BinKind::mul: d = go[i] * yv2[ys ? 0 : i]; break;
                    case BinKind::div: d = go[i] / yv2[ys ? 0 : i]; break;
                }
                gx[xs ? 0 : i] += d;
            }
        }
        if (gg.needs_grad(yid)) {
            Tensor& gy = gg.grad_buf(yid);
            for (std::size_t i = 0; i < n; ++i) {
                const double a = xv2[xs ? 0 : i];
                const double b = yv2[ys ? 0 : i];
                double d = 0.0;
                switch (kind) {
                    case BinKind::add: d = go[i]; break;
                    case BinKind::sub: d = -go[i]; break;
                    case BinKind::mul: d = go[i] * a; break;
                    case BinKind::div: d = -go[i] * a / (b * b); break;
                }
                gy[ys ? 0 : i] += d;
            }
        }
    });
    return Var(g, id);
}

} // namespace detail

inline Var add(Var x, Var y) { return detail::binary_op(x, y, detail::BinKind::add, "add"); }
inline Var sub(Var x, Var y) { return detail::binary_op(x, y, detail::BinKind::sub, "sub"); }
inline Var mul(Var x, Var y) { return detail::binary_op(x, y, detail::BinKind::mul, "mul"); }
inline Var div(Var x, Var y) { return detail::binary_op(x, y, detail::BinKind::div, "div"); }

/// out = a * x + c with constants a, c (no gradient to the constants).
inline Var affine(Var x, double a, double c) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = a * xv[i] + c;
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "affine", [xid, a](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        detail::axpy(gg.grad_buf(xid).data(), go.data(), a, go.numel());
    });
    return Var(g, id);
}

inline Var scale(Var x, double a) { return affine(x, a, 0.0); }
inline Var offset(Var x, double c) { return affine(x, 1.0, c); }

inline Var operator+(Var x, Var y) { return add(x, y); }
inline Var operator-(Var x, Var y) { return sub(x, y); }
inline Var operator*(Var x, Var y) { return mul(x, y); }
inline Var operator/(Var x, Var y) { return div(x, y); }
inline Var operator*(double a, Var x) { return scale(x, a); }
inline Var operator*(Var x, double a) { return scale(x, a); }
inline Var operator+(Var x, double c) { return offset(x, c); }
inline Var operator-(Var x, double c) { return offset(x, -c); }

/// Dispatcher over the elementwise kinds; y is required for the binary kinds.
enum class EwKind { relu, log, exp, sqrt, add, mul, sub, div };

inline Var elementwise(Var x, EwKind kind, std::optional<Var> y = std::nullopt) {
    switch (kind) {
        case EwKind::relu: return relu(x);
        case EwKind::log: return log(x);
        case EwKind::exp: return exp(x);
        case EwKind::sqrt: return sqrt(x);
        default: break;
    }
    if (!y) throw ContractError("elementwise: binary kind requires a second operand");
    switch (kind) {
        case EwKind::add: return add(x, *y);
        case EwKind::sub: return sub(x, *y);
        case EwKind::mul: return mul(x, *y);
        default: return div(x, *y);
    }
}

// ---------------------------------------------------------------------------
// softmax along one axis, with max-subtraction for stability.
// ---------------------------------------------------------------------------

inline Var softmax_axis(Var x, int axis) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    if (axis < 0 || static_cast<std::size_t>(axis) >= xv.rank()) {
        throw ContractError("softmax_axis: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(xv.shape()));
    }
    const std::size_t ax = static_cast<std::size_t>(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < ax; ++i) outer *= xv.extent(i);
    for (std::size_t i = ax + 1; i < xv.rank(); ++i) inner *= xv.extent(i);
    const std::size_t N = xv.extent(ax);

    Tensor out(xv.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * N * inner + in;
            double mx = xv[base];
            for (std::size_t k = 1; k < N; ++k) mx = std::max(mx, xv[base + k * inner]);
            double sum = 0.0;
            for (std::size_t k = 0; k < N; ++k) {
                const double e = std::exp(xv[base + k * inner] - mx);
                out[base + k * inner] = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t k = 0; k < N; ++k) out[base + k * inner] *= inv;
        }
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "softmax",
                                 [xid, outer, inner, N](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& yv = gg.value(self);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * N * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < N; ++k) dot += go[base + k * inner] * yv[base + k * inner];
                for (std::size_t k = 0; k < N; ++k) {
                    const std::size_t idx = base + k * inner;
                    gx[idx] += yv[idx] * (go[idx] - dot);
                }
            }
        }
    });
    return Var(g, id);
}

// ---------------------------------------------------------------------------
// Reductions. The optional mask selects the evaluated elements; mean
// divides by the unmasked count.
// ---------------------------------------------------------------------------

enum class ReduceKind { mean, sum };

inline Var reduce(Var x, ReduceKind kind, const Tensor* mask = nullptr) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    Tensor maskcopy;
    if (mask) {
        check_same_shape(xv, *mask, "reduce mask");
        maskcopy = *mask;
    }
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        if (mask && maskcopy[i] == 0.0) continue;
        acc += xv[i];
        ++count;
    }
    if (count == 0) throw DegenerateInputError("reduce: no unmasked elements");
    const bool is_mean = kind == ReduceKind::mean;
    Tensor out = Tensor::scalar(is_mean ? acc / static_cast<double>(count) : acc);
    const std::size_t xid = x.id();
    const bool masked = mask != nullptr;
    std::size_t id = g->add_node(std::move(out), {xid}, is_mean ? "mean" : "sum",
                                 [xid, masked, m = std::move(maskcopy), is_mean, count](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const double go = gg.grad(self)[0];
        const double d = is_mean ? go / static_cast<double>(count) : go;
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t i = 0; i < gx.numel(); ++i) {
            if (masked && m[i] == 0.0) continue;
            gx[i] += d;
        }
    });
    return Var(g, id);
}

inline Var reduce_mean(Var x, const Tensor* mask = nullptr) { return reduce(x, ReduceKind::mean, mask); }
inline Var reduce_sum(Var x, const Tensor* mask = nullptr) { return reduce(x, ReduceKind::sum, mask); }

/// out = mask ? x : fill. Gradient flows only through selected elements.
inline Var select_mask(Var x, const Tensor& mask, double fill) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    check_same_shape(xv, mask, "select_mask");
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = mask[i] != 0.0 ? xv[i] : fill;
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "select_mask",
                                 [xid, m = mask](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (m[i] != 0.0) gx[i] += go[i];
    });
    return Var(g, id);
}

// ---------------------------------------------------------------------------
// Spatial ops for the mini networks.
// ---------------------------------------------------------------------------

/// 2x2 average pooling, stride 2. Extents must be even.
inline Var avgpool2x2(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    if (xv.rank() != 4 || xv.extent(2) % 2 != 0 || xv.extent(3) % 2 != 0) {
        throw DimensionError("avgpool2x2: needs 4-d input with even spatial extents, got " +
                             shape_str(xv.shape()));
    }
    const std::size_t B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({B, C, Ho, Wo});
    for (std::size_t p = 0; p < B * C; ++p) {
        const double* src = xv.data() + p * H * W;
        double* dst = out.data() + p * Ho * Wo;
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t x2 = 0; x2 < Wo; ++x2) {
                const double* r0 = src + 2 * y * W + 2 * x2;
                dst[y * Wo + x2] = 0.25 * (r0[0] + r0[1] + r0[W] + r0[W + 1]);
            }
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "avgpool2x2",
                                 [xid, B, C, H, W, Ho, Wo](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t p = 0; p < B * C; ++p) {
            double* dst = gx.data() + p * H * W;
            const double* src = go.data() + p * Ho * Wo;
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t x2 = 0; x2 < Wo; ++x2) {
                    const double d = 0.25 * src[y * Wo + x2];
                    double* r0 = dst + 2 * y * W + 2 * x2;
                    r0[0] += d; r0[1] += d; r0[W] += d; r0[W + 1] += d;
                }
        }
    });
    return Var(g, id);
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2x(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("upsample2x: needs 4-d input, got " + shape_str(xv.shape()));
    const std::size_t B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    const std::size_t Ho = H * 2, Wo = W * 2;
    Tensor out({B, C, Ho, Wo});
    for (std::size_t p = 0; p < B * C; ++p) {
        const double* src = xv.data() + p * H * W;
        double* dst = out.data() + p * Ho * Wo;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x2 = 0; x2 < W; ++x2) {
                const double v = src[y * W + x2];
                double* r0 = dst + 2 * y * Wo + 2 * x2;
                r0[0] = v; r0[1] = v; r0[Wo] = v; r0[Wo + 1] = v;
            }
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "upsample2x",
                                 [xid, B, C, H, W, Wo](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad_buf(xid);
        for (std::size_t p = 0; p < B * C; ++p) {
            double* dst = gx.data() + p * H * W;
            const double* src = go.data() + p * (H * 2) * Wo;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x2 = 0; x2 < W; ++x2) {
                    const double* r0 = src + 2 * y * Wo + 2 * x2;
                    dst[y * W + x2] += r0[0] + r0[1] + r0[Wo] + r0[Wo + 1];
                }
        }
    });
    return Var(g, id);
}

/// B x C x H x W -> B x C mean over the spatial extents.
inline Var global_avg_pool(Var x) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("global_avg_pool: needs 4-d input, got " + shape_str(xv.shape()));
    const std::size_t B = xv.extent(0), C = xv.extent(1), HW = xv.extent(2) * xv.extent(3);
    Tensor out({B, C});
    for (std::size_t p = 0; p < B * C; ++p) {
        const double* src = xv.data() + p * HW;
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += src[i];
        out[p] = acc / static_cast<double>(HW);
    }
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "global_avg_pool",
                                 [xid, B, C, HW](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad_buf(xid);
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t p = 0; p < B * C; ++p) {
            const double d = go[p] * inv;
            double* dst = gx.data() + p * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] += d;
        }
    });
    return Var(g, id);
}

/// Same data, new extents. Row-major layout is shared, so this is a
/// relabeling; gradients flow through untouched.
inline Var reshape(Var x, Shape shape) {
    Graph* g = x.graph();
    const Tensor& xv = x.value();
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    if (n != xv.numel() || shape.empty()) {
        throw DimensionError("reshape: " + shape_str(xv.shape()) + " to " + shape_str(shape) +
                             " changes element count");
    }
    Tensor out(shape);
    std::copy(xv.data(), xv.data() + n, out.data());
    const std::size_t xid = x.id();
    std::size_t id = g->add_node(std::move(out), {xid}, "reshape", [xid](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(xid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad_buf(xid);
        detail::axpy(gx.data(), go.data(), 1.0, go.numel());
    });
    return Var(g, id);
}

/// Concatenate 4-d tensors along the channel axis.
inline Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_channels: empty input");
    Graph* g = parts[0].graph();
    const Tensor& first = parts[0].value();
    if (first.rank() != 4) throw DimensionError("concat_channels: needs 4-d inputs");
    const std::size_t B = first.extent(0), H = first.extent(2), W = first.extent(3);
    std::size_t Ctot = 0;
    std::vector<std::size_t> ids, chans;
    for (const Var& v : parts) {
        detail::same_graph(parts[0], v, "concat_channels");
        const Tensor& t = v.value();
        if (t.rank() != 4 || t.extent(0) != B || t.extent(2) != H || t.extent(3) != W) {
            throw DimensionError("concat_channels: incompatible part shape " + shape_str(t.shape()));
        }
        Ctot += t.extent(1);
        ids.push_back(v.id());
        chans.push_back(t.extent(1));
    }
    const std::size_t HW = H * W;
    Tensor out({B, Ctot, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t coff = 0;
        for (std::size_t pi = 0; pi < ids.size(); ++pi) {
            const Tensor& t = g->value(ids[pi]);
            const std::size_t C = chans[pi];
            std::copy(t.data() + b * C * HW, t.data() + (b + 1) * C * HW,
                      out.data() + (b * Ctot + coff) * HW);
            coff += C;
        }
    }
    std::size_t id = g->add_node(std::move(out), ids, "concat_channels",
                                 [ids, chans, B, Ctot, HW](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        for (std::size_t b = 0; b < B; ++b) {
            std::size_t coff = 0;
            for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                const std::size_t C = chans[pi];
                if (gg.needs_grad(ids[pi])) {
                    Tensor& gp = gg.grad_buf(ids[pi]);
                    detail::axpy(gp.data() + b * C * HW, go.data() + (b * Ctot + coff) * HW, 1.0, C * HW);
                }
                coff += C;
            }
        }
    });
    return Var(g, id);
}

inline Var concat_channels(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return concat_channels(std::span<const Var>(v));
}

/// Scatter per-column embeddings to pixels. embeds is E x K; each index
/// map holds, per pixel, 0 (no column, output 0) or a 1-based column id.
/// out[b,e,y,x] = embeds[e, idx-1].
inline Var instance_broadcast(Var embeds, const std::vector<Tensor>& index_maps) {
    Graph* g = embeds.graph();
    const Tensor& ev = embeds.value();
    if (ev.rank() != 2) throw DimensionError("instance_broadcast: needs E x K embeds, got " + shape_str(ev.shape()));
    if (index_maps.empty()) throw ContractError("instance_broadcast: no index maps");
    const std::size_t E = ev.extent(0), K = ev.extent(1);
    const std::size_t B = index_maps.size();
    const Shape mshape = index_maps[0].shape();
    if (mshape.size() != 2) throw DimensionError("instance_broadcast: index maps must be 2-d");
    const std::size_t H = mshape[0], W = mshape[1];
    for (const Tensor& m : index_maps) {
        if (!(m.shape() == mshape)) throw DimensionError("instance_broadcast: inconsistent index map shapes");
        for (std::size_t i = 0; i < m.numel(); ++i) {
            const double v = m[i];
            if (v < 0.0 || v != std::floor(v) || v > static_cast<double>(K)) {
                throw ContractError("instance_broadcast: index map value " + std::to_string(v) +
                                    " outside 0.." + std::to_string(K));
            }
        }
    }
    Tensor out = Tensor::zeros({B, E, H, W});
    const std::size_t HW = H * W;
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor& m = index_maps[b];
        for (std::size_t e = 0; e < E; ++e) {
            double* dst = out.data() + (b * E + e) * HW;
            const double* row = ev.data() + e * K;
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t idx = static_cast<std::size_t>(m[i]);
                if (idx > 0) dst[i] = row[idx - 1];
            }
        }
    }
    const std::size_t eid = embeds.id();
    std::size_t id = g->add_node(std::move(out), {eid}, "instance_broadcast",
                                 [eid, maps = index_maps, E, K, HW, B](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(eid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& ge = gg.grad_buf(eid);
        for (std::size_t b = 0; b < B; ++b) {
            const Tensor& m = maps[b];
            for (std::size_t e = 0; e < E; ++e) {
                const double* src = go.data() + (b * E + e) * HW;
                double* row = ge.data() + e * K;
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::size_t idx = static_cast<std::size_t>(m[i]);
                    if (idx > 0) row[idx - 1] += src[i];
                }
            }
        }
    });
    return Var(g, id);
}

// ---------------------------------------------------------------------------
// Bin-head ops.
// ---------------------------------------------------------------------------

/// centers[b,i] = d_min + (d_max - d_min) * (sum_{j<i} w[b,j] + w[b,i]/2)
inline Var cumulative_centers(Var widths, double d_min, double d_max) {
    Graph* g = widths.graph();
    const Tensor& wv = widths.value();
    if (wv.rank() != 2) throw DimensionError("cumulative_centers: needs B x N widths, got " + shape_str(wv.shape()));
    const std::size_t B = wv.extent(0), N = wv.extent(1);
    const double range = d_max - d_min;
    Tensor out({B, N});
    for (std::size_t b = 0; b < B; ++b) {
        double cum = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            const double w = wv[b * N + i];
            out[b * N + i] = d_min + range * (cum + 0.5 * w);
            cum += w;
        }
    }
    const std::size_t wid = widths.id();
    std::size_t id = g->add_node(std::move(out), {wid}, "cumulative_centers",
                                 [wid, B, N, range](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(wid)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gw = gg.grad_buf(wid);
        // dc_i/dw_j = range * (j < i ? 1 : j == i ? 0.5 : 0)
        for (std::size_t b = 0; b < B; ++b) {
            double tail = 0.0;
            for (std::size_t j = N; j-- > 0;) {
                gw[b * N + j] += range * (tail + 0.5 * go[b * N + j]);
                tail += go[b * N + j];
            }
        }
    });
    return Var(g, id);
}

/// depth[b,0,h,w] = sum_k probs[b,k,h,w] * centers[b,k]
inline Var bin_center_mix(Var probs, Var centers) {
    Graph* g = detail::same_graph(probs, centers, "bin_center_mix");
    const Tensor& pv = probs.value();
    const Tensor& cv = centers.value();
    if (pv.rank() != 4 || cv.rank() != 2 || pv.extent(0) != cv.extent(0) || pv.extent(1) != cv.extent(1)) {
        throw DimensionError("bin_center_mix: probs " + shape_str(pv.shape()) + " vs centers " +
                             shape_str(cv.shape()));
    }
    const std::size_t B = pv.extent(0), N = pv.extent(1), HW = pv.extent(2) * pv.extent(3);
    Tensor out({B, std::size_t{1}, pv.extent(2), pv.extent(3)});
    for (std::size_t b = 0; b < B; ++b) {
        double* dst = out.data() + b * HW;
        for (std::size_t k = 0; k < N; ++k) {
            const double c = cv[b * N + k];
            const double* src = pv.data() + (b * N + k) * HW;
            detail::axpy(dst, src, c, HW);
        }
    }
    const std::size_t pid = probs.id(), cid = centers.id();
    std::size_t id = g->add_node(std::move(out), {pid, cid}, "bin_center_mix",
                                 [pid, cid, B, N, HW](Graph& gg, std::size_t self) {
        const Tensor& go = gg.grad(self);
        const Tensor& pv2 = gg.value(pid);
        const Tensor& cv2 = gg.value(cid);
        if (gg.needs_grad(pid)) {
            Tensor& gp = gg.grad_buf(pid);
            for (std::size_t b = 0; b < B; ++b) {
                const double* gd = go.data() + b * HW;
                for (std::size_t k = 0; k < N; ++k)
                    detail::axpy(gp.data() + (b * N + k) * HW, gd, cv2[b * N + k], HW);
            }
        }
        if (gg.needs_grad(cid)) {
            Tensor& gc = gg.grad_buf(cid);
            for (std::size_t b = 0; b < B; ++b) {
                const double* gd = go.data() + b * HW;
                for (std::size_t k = 0; k < N; ++k) {
                    const double* src = pv2.data() + (b * N + k) * HW;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < HW; ++i) acc += gd[i] * src[i];
                    gc[b * N + k] += acc;
                }
            }
        }
    });
    return Var(g, id);
}

/// Bidirectional chamfer between per-image centers (B x N) and per-image
/// value sets, averaged over the batch:
///   mean_i min_k (v_i - c_k)^2 + mean_k min_i (c_k - v_i)^2
/// Nearest assignments are treated as constant in the backward pass.
inline Var chamfer_to_values(Var centers, const std::vector<std::vector<double>>& values) {
    Graph* g = centers.graph();
    const Tensor& cv = centers.value();
    if (cv.rank() != 2) throw DimensionError("chamfer_to_values: needs B x N centers, got " + shape_str(cv.shape()));
    const std::size_t B = cv.extent(0), N = cv.extent(1);
    if (values.size() != B) {
        throw DimensionError("chamfer_to_values: batch mismatch, " + std::to_string(values.size()) +
                             " value sets for " + std::to_string(B) + " images");
    }
    for (const auto& vs : values)
        if (vs.empty()) throw DegenerateInputError("chamfer_to_values: empty value set");

    // nearest center per value and nearest value per center
    std::vector<std::vector<std::size_t>> v2c(B);
    std::vector<std::vector<double>> nearest_v(B);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* cp = cv.data() + b * N;
        const auto& vs = values[b];
        v2c[b].resize(vs.size());
        double fwd = 0.0;
        for (std::size_t i = 0; i < vs.size(); ++i) {
            double best = (vs[i] - cp[0]) * (vs[i] - cp[0]);
            std::size_t bk = 0;
            for (std::size_t k = 1; k < N; ++k) {
                const double d = (vs[i] - cp[k]) * (vs[i] - cp[k]);
                if (d < best) { best = d; bk = k; }
            }
            v2c[b][i] = bk;
            fwd += best;
        }
        fwd /= static_cast<double>(vs.size());
        nearest_v[b].resize(N);
        double bwd = 0.0;
        for (std::size_t k = 0; k < N; ++k) {
            double best = (cp[k] - vs[0]) * (cp[k] - vs[0]);
            double bv = vs[0];
            for (double v : vs) {
                const double d = (cp[k] - v) * (cp[k] - v);
                if (d < best) { best = d; bv = v; }
            }
            nearest_v[b][k] = bv;
            bwd += best;
        }
        bwd /= static_cast<double>(N);
        total += fwd + bwd;
    }
    total /= static_cast<double>(B);

    const std::size_t cid = centers.id();
    std::size_t id = g->add_node(Tensor::scalar(total), {cid}, "chamfer",
                                 [cid, B, N, vals = values, v2c = std::move(v2c),
                                  nearest_v = std::move(nearest_v)](Graph& gg, std::size_t self) {
        if (!gg.needs_grad(cid)) return;
        const double go = gg.grad(self)[0];
        const Tensor& cv2 = gg.value(cid);
        Tensor& gc = gg.grad_buf(cid);
        const double binv = go / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
            const auto& vs = vals[b];
            const double vinv = binv / static_cast<double>(vs.size());
            for (std::size_t i = 0; i < vs.size(); ++i) {
                const std::size_t k = v2c[b][i];
                gc[b * N + k] += vinv * 2.0 * (cv2[b * N + k] - vs[i]);
            }
            const double ninv = binv / static_cast<double>(N);
            for (std::size_t k = 0; k < N; ++k)
                gc[b * N + k] += ninv * 2.0 * (cv2[b * N + k] - nearest_v[b][k]);
        }
    });
    return Var(g, id);
}

} // namespace cuedepth
