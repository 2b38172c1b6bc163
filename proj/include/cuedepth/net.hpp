#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cuedepth/autodiff.hpp"
#include "cuedepth/cues.hpp"
#include "cuedepth/error.hpp"
#include "cuedepth/rng.hpp"
#include "cuedepth/tensor.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

enum class HeadKind { adabins, plain };

inline std::string head_name(HeadKind h) {
    switch (h) {
        case HeadKind::adabins: return "adabins";
        case HeadKind::plain: return "plain";
    }
    throw ContractError("head_name: bad enum");
}

inline HeadKind head_from_name(const std::string& s) {
    if (s == "adabins") return HeadKind::adabins;
    if (s == "plain") return HeadKind::plain;
    throw ConfigError("unknown head '" + s + "' (adabins|plain)");
}

struct LossConfig {
    double silog_lambda = 0.85;
    double silog_alpha = 10.0;
    double bin_loss_weight = 0.1; // ignored by the plain head
};

struct TrainSettings {
    double lr = 5e-4;
    int epochs = 30;
    int batch = 8;
    std::uint64_t seed = 0;
    std::string optimizer = "adam";
    double val_fraction = 0.1;
};

struct NetConfig {
    std::size_t in_channels = 3;
    std::size_t base_width = 16;
    std::size_t n_bins = 32;
    double depth_min = 1.0;
    double depth_max = 10.0;
    HeadKind head = HeadKind::adabins;
    LossConfig loss;
    TrainSettings train;

    void validate() const {
        if (in_channels < 1) throw ConfigError("net config: in_channels must be positive");
        if (base_width < 2 || base_width % 2 != 0) {
            throw ConfigError("net config: base_width must be an even count >= 2");
        }
        if (n_bins < 2 || n_bins > 256) throw ConfigError("net config: n_bins must be in [2, 256]");
        if (depth_min <= 0.0 || depth_min >= depth_max) {
            throw ConfigError("net config: depth range [" + std::to_string(depth_min) + ", " +
                              std::to_string(depth_max) + "] is invalid");
        }
        if (loss.bin_loss_weight < 0.0) throw ConfigError("net config: bin_loss_weight must be >= 0");
        if (loss.silog_lambda < 0.0 || loss.silog_lambda > 1.0) {
            throw ConfigError("net config: silog_lambda must lie in [0, 1]");
        }
        if (loss.silog_alpha <= 0.0) throw ConfigError("net config: silog_alpha must be positive");
        if (train.lr < 0.0) throw ConfigError("net config: lr must be >= 0");
        if (train.epochs < 0) throw ConfigError("net config: epochs must be >= 0");
        if (train.batch < 1) throw ConfigError("net config: batch must be >= 1");
        if (train.optimizer != "adam" && train.optimizer != "sgd") {
            throw ConfigError("net config: optimizer must be adam or sgd");
        }
        if (train.val_fraction <= 0.0 || train.val_fraction >= 1.0) {
            throw ConfigError("net config: val_fraction must lie in (0, 1)");
        }
    }

    nlohmann::json to_json() const {
        return {{"in_channels", in_channels},
                {"base_width", base_width},
                {"n_bins", n_bins},
                {"depth_min", depth_min},
                {"depth_max", depth_max},
                {"head", head_name(head)},
                {"loss",
                 {{"silog_lambda", loss.silog_lambda},
                  {"silog_alpha", loss.silog_alpha},
                  {"bin_loss_weight", loss.bin_loss_weight}}},
                {"train",
                 {{"lr", train.lr},
                  {"epochs", train.epochs},
                  {"batch", train.batch},
                  {"seed", train.seed},
                  {"optimizer", train.optimizer},
                  {"val_fraction", train.val_fraction}}}};
    }

    static NetConfig from_json(const nlohmann::json& j) {
        NetConfig c;
        if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::size_t>();
        if (j.contains("base_width")) c.base_width = j.at("base_width").get<std::size_t>();
        if (j.contains("n_bins")) c.n_bins = j.at("n_bins").get<std::size_t>();
        if (j.contains("depth_min")) c.depth_min = j.at("depth_min").get<double>();
        if (j.contains("depth_max")) c.depth_max = j.at("depth_max").get<double>();
        if (j.contains("head")) c.head = head_from_name(j.at("head").get<std::string>());
        if (j.contains("loss")) {
            const auto& jl = j.at("loss");
            if (jl.contains("silog_lambda")) c.loss.silog_lambda = jl.at("silog_lambda").get<double>();
            if (jl.contains("silog_alpha")) c.loss.silog_alpha = jl.at("silog_alpha").get<double>();
            if (jl.contains("bin_loss_weight")) c.loss.bin_loss_weight = jl.at("bin_loss_weight").get<double>();
        }
        if (j.contains("train")) {
            const auto& jt = j.at("train");
            if (jt.contains("lr")) c.train.lr = jt.at("lr").get<double>();
            if (jt.contains("epochs")) c.train.epochs = jt.at("epochs").get<int>();
            if (jt.contains("batch")) c.train.batch = jt.at("batch").get<int>();
            if (jt.contains("seed")) c.train.seed = jt.at("seed").get<std::uint64_t>();
            if (jt.contains("optimizer")) c.train.optimizer = jt.at("optimizer").get<std::string>();
            if (jt.contains("val_fraction")) c.train.val_fraction = jt.at("val_fraction").get<double>();
        }
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Model parameters.
// ---------------------------------------------------------------------------

struct NamedParam {
    std::string name;
    Tensor* tensor;
};

struct NamedParamConst {
    std::string name;
    const Tensor* tensor;
};

/// Encoder-decoder with three 2x downsampling stages, additive skip
/// connections, and either the adaptive-bin head or a plain regression
/// head. Stage widths derive from base_width, so the parameter count is
/// a pure function of the config.
struct DepthModel {
    NetConfig config;
    Tensor proj_w, proj_b;
    Tensor enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b;
    Tensor dec3_w, dec3_b, dec2_w, dec2_b, dec1_w, dec1_b;
    Tensor head_w, head_b;
    Tensor bins_w, bins_b; // adabins only

    std::size_t w1() const { return config.base_width; }
    std::size_t w2() const { return config.base_width * 2; }
    std::size_t w3() const { return config.base_width * 3; }

    static DepthModel make(const NetConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        DepthModel m;
        m.config = cfg;
        Rng rng(Rng::sub_seed(seed, 0, 41));
        auto conv = [&](std::size_t out, std::size_t in, std::size_t k) {
            const double std = std::sqrt(2.0 / static_cast<double>(in * k * k));
            return Tensor::normal({out, in, k, k}, rng, 0.0, std);
        };
        const std::size_t w1 = m.w1(), w2 = m.w2(), w3 = m.w3();
        m.proj_w = conv(w1, cfg.in_channels, 1);
        m.proj_b = Tensor::zeros({w1});
        m.enc1_w = conv(w1, w1, 3);
        m.enc1_b = Tensor::zeros({w1});
        m.enc2_w = conv(w2, w1, 3);
        m.enc2_b = Tensor::zeros({w2});
        m.enc3_w = conv(w3, w2, 3);
        m.enc3_b = Tensor::zeros({w3});
        m.dec3_w = conv(w2, w3, 3);
        m.dec3_b = Tensor::zeros({w2});
        m.dec2_w = conv(w1, w2, 3);
        m.dec2_b = Tensor::zeros({w1});
        m.dec1_w = conv(w1, w1, 3);
        m.dec1_b = Tensor::zeros({w1});
        if (cfg.head == HeadKind::adabins) {
            m.head_w = conv(cfg.n_bins, w1, 1);
            m.head_b = Tensor::zeros({cfg.n_bins});
            m.bins_w = Tensor::normal({w3, cfg.n_bins}, rng, 0.0, 0.01);
            m.bins_b = Tensor::zeros({cfg.n_bins});
        } else {
            m.head_w = conv(1, w1, 1);
            m.head_b = Tensor::full({1}, 0.5 * (cfg.depth_min + cfg.depth_max));
        }
        return m;
    }

    std::vector<NamedParam> params() {
        std::vector<NamedParam> p = {
            {"proj.w", &proj_w}, {"proj.b", &proj_b}, {"enc1.w", &enc1_w}, {"enc1.b", &enc1_b},
            {"enc2.w", &enc2_w}, {"enc2.b", &enc2_b}, {"enc3.w", &enc3_w}, {"enc3.b", &enc3_b},
            {"dec3.w", &dec3_w}, {"dec3.b", &dec3_b}, {"dec2.w", &dec2_w}, {"dec2.b", &dec2_b},
            {"dec1.w", &dec1_w}, {"dec1.b", &dec1_b}, {"head.w", &head_w}, {"head.b", &head_b},
        };
        if (config.head == HeadKind::adabins) {
            p.push_back({"bins.w", &bins_w});
            p.push_back({"bins.b", &bins_b});
        }
        return p;
    }

    std::vector<NamedParamConst> params() const {
        std::vector<NamedParamConst> out;
        for (const NamedParam& np : const_cast<DepthModel*>(this)->params()) out.push_back({np.name, np.tensor});
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const NamedParamConst& np : params()) n += np.tensor->numel();
        return n;
    }

    void check_finite() const {
        for (const NamedParamConst& np : params()) {
            if (!np.tensor->all_finite()) throw NumericFault("parameter " + np.name + " holds non-finite values");
        }
    }
};

// ---------------------------------------------------------------------------
// Bin state.
// ---------------------------------------------------------------------------

struct BinState {
    std::vector<double> widths;
    std::vector<double> centers;

    void validate(double d_min, double d_max) const {
        if (widths.size() != centers.size() || widths.empty()) {
            throw ValidationError("bin state: widths/centers length mismatch");
        }
        double sum = 0.0;
        for (double w : widths) {
            if (w <= 0.0) throw ValidationError("bin state: non-positive width");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9) {
            throw ValidationError("bin state: widths sum to " + std::to_string(sum));
        }
        double cum = 0.0;
        const double range = d_max - d_min;
        for (std::size_t i = 0; i < centers.size(); ++i) {
            const double expect = d_min + range * (cum + 0.5 * widths[i]);
            if (std::abs(centers[i] - expect) > 1e-9) {
                throw ValidationError("bin state: center " + std::to_string(i) + " off its width partition");
            }
            if (i > 0 && !(centers[i] > centers[i - 1])) {
                throw ValidationError("bin state: centers not strictly increasing at " + std::to_string(i));
            }
            cum += widths[i];
        }
        if (!(centers.front() > d_min) || !(centers.back() < d_max)) {
            throw ValidationError("bin state: centers leave (d_min, d_max)");
        }
    }
};

/// Per-image bin states from the forward pass tensors [B,N].
inline std::vector<BinState> extract_bins(const Tensor& widths, const Tensor& centers) {
    check_same_shape(widths, centers, "extract_bins");
    if (widths.rank() != 2) throw DimensionError("extract_bins: needs B x N tensors");
    const std::size_t B = widths.extent(0), N = widths.extent(1);
    std::vector<BinState> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        out[b].widths.assign(widths.data() + b * N, widths.data() + (b + 1) * N);
        out[b].centers.assign(centers.data() + b * N, centers.data() + (b + 1) * N);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

/// Graph handles for one forward pass; bin fields are set only for the
/// adabins head.
struct ForwardPass {
    Var depth; // [B,1,H,W]
    std::optional<Var> widths;
    std::optional<Var> centers;
    std::optional<Var> probs;
};

/// Parameter leaves registered on a graph, ordered like params().
struct ModelLeaves {
    std::vector<Var> order;
    Var proj_w, proj_b;
    Var enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b;
    Var dec3_w, dec3_b, dec2_w, dec2_b, dec1_w, dec1_b;
    Var head_w, head_b;
    Var bins_w, bins_b;
};

inline ModelLeaves leaf_model(Graph& g, const DepthModel& m, bool trainable) {
    ModelLeaves l;
    auto put = [&](const Tensor& t, Var& slot) {
        slot = g.leaf(t, trainable);
        l.order.push_back(slot);
    };
    put(m.proj_w, l.proj_w);
    put(m.proj_b, l.proj_b);
    put(m.enc1_w, l.enc1_w);
    put(m.enc1_b, l.enc1_b);
    put(m.enc2_w, l.enc2_w);
    put(m.enc2_b, l.enc2_b);
    put(m.enc3_w, l.enc3_w);
    put(m.enc3_b, l.enc3_b);
    put(m.dec3_w, l.dec3_w);
    put(m.dec3_b, l.dec3_b);
    put(m.dec2_w, l.dec2_w);
    put(m.dec2_b, l.dec2_b);
    put(m.dec1_w, l.dec1_w);
    put(m.dec1_b, l.dec1_b);
    put(m.head_w, l.head_w);
    put(m.head_b, l.head_b);
    if (m.config.head == HeadKind::adabins) {
        put(m.bins_w, l.bins_w);
        put(m.bins_b, l.bins_b);
    }
    return l;
}

constexpr double kBinWidthFloor = 1e-3;
constexpr double kPlainDepthFloor = 1e-4;

inline ForwardPass model_forward(Graph& g, const DepthModel& m, const ModelLeaves& l, Var input) {
    const Tensor& xv = input.value();
    if (xv.rank() != 4) throw DimensionError("model_forward: input must be [B,C,H,W]");
    if (xv.extent(1) != m.config.in_channels) {
        throw ConfigError("model_forward: input has " + std::to_string(xv.extent(1)) +
                          " channels, config expects " + std::to_string(m.config.in_channels));
    }
    if (xv.extent(2) % 8 != 0 || xv.extent(3) % 8 != 0) {
        throw DimensionError("model_forward: spatial extents must be multiples of 8, got " +
                             shape_str(xv.shape()));
    }

    Var x = relu(channel_bias(conv2d(input, l.proj_w), l.proj_b));
    Var e1 = relu(channel_bias(conv2d(avgpool2x2(x), l.enc1_w, 1, 1), l.enc1_b));
    Var e2 = relu(channel_bias(conv2d(avgpool2x2(e1), l.enc2_w, 1, 1), l.enc2_b));
    Var e3 = relu(channel_bias(conv2d(avgpool2x2(e2), l.enc3_w, 1, 1), l.enc3_b));
    Var d3 = add(relu(channel_bias(conv2d(upsample2x(e3), l.dec3_w, 1, 1), l.dec3_b)), e2);
    Var d2 = add(relu(channel_bias(conv2d(upsample2x(d3), l.dec2_w, 1, 1), l.dec2_b)), e1);
    Var d1 = add(relu(channel_bias(conv2d(upsample2x(d2), l.dec1_w, 1, 1), l.dec1_b)), x);

    ForwardPass fp;
    if (m.config.head == HeadKind::adabins) {
        const double n = static_cast<double>(m.config.n_bins);
        Var logits = channel_bias(conv2d(d1, l.head_w), l.head_b);
        Var pooled = global_avg_pool(e3);
        Var raw = softmax_axis(linear(pooled, l.bins_w, l.bins_b), 1);
        Var widths = affine(raw, 1.0 / (1.0 + n * kBinWidthFloor), kBinWidthFloor / (1.0 + n * kBinWidthFloor));
        Var centers = cumulative_centers(widths, m.config.depth_min, m.config.depth_max);
        Var probs = softmax_axis(logits, 1);
        fp.depth = bin_center_mix(probs, centers);
        fp.widths = widths;
        fp.centers = centers;
        fp.probs = probs;
    } else {
        Var logit = channel_bias(conv2d(d1, l.head_w), l.head_b);
        fp.depth = offset(relu(logit), kPlainDepthFloor);
    }
    return fp;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

/// alpha * sqrt(mean(g^2) - lambda * mean(g)^2), g = log(pred) - log(gt)
/// over masked pixels (all pixels when mask is null).
inline Var silog_loss(Var pred, const Tensor& gt, const Tensor* mask, double lambda = 0.85,
                      double alpha = 10.0) {
    const Tensor& pv = pred.value();
    check_same_shape(pv, gt, "silog_loss");
    if (mask) check_same_shape(pv, *mask, "silog_loss mask");

    std::size_t active = 0;
    Tensor log_gt = Tensor::zeros(gt.shape());
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        if (mask && (*mask)[i] == 0.0) continue;
        if (!(pv[i] > 0.0) || !std::isfinite(pv[i])) {
            throw DomainError("silog_loss: prediction " + std::to_string(pv[i]) + " at flat index " +
                              std::to_string(i) + " is not a positive finite value");
        }
        if (gt[i] <= 0.0) {
            throw DomainError("silog_loss: non-positive ground truth at flat index " + std::to_string(i));
        }
        log_gt[i] = std::log(gt[i]);
        ++active;
    }
    if (active == 0) throw DegenerateInputError("silog_loss: mask selects no pixels");

    Graph* g = pred.graph();
    Var lp = mask ? log(select_mask(pred, *mask, 1.0)) : log(pred);
    Var diff = sub(lp, g->leaf(std::move(log_gt)));
    Var mg = reduce_mean(diff, mask);
    Var ms = reduce_mean(mul(diff, diff), mask);
    // relu guards sqrt against a negative eps from rounding; the true
    // value is a variance plus (1-lambda)*mean^2, never below zero
    return scale(sqrt(relu(sub(ms, scale(mul(mg, mg), lambda)))), alpha);
}

/// Plain-number twin of silog_loss for evaluation paths.
inline double silog_value(const Tensor& pred, const Tensor& gt, const Tensor* mask,
                          double lambda = 0.85, double alpha = 10.0) {
    check_same_shape(pred, gt, "silog_value");
    if (mask) check_same_shape(pred, *mask, "silog_value mask");
    double sum = 0.0, sum2 = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < gt.numel(); ++i) {
        if (mask && (*mask)[i] == 0.0) continue;
        if (!(pred[i] > 0.0) || !std::isfinite(pred[i])) {
            throw DomainError("silog_value: prediction " + std::to_string(pred[i]) + " at flat index " +
                              std::to_string(i) + " is not a positive finite value");
        }
        if (gt[i] <= 0.0) {
            throw DomainError("silog_value: non-positive ground truth at flat index " + std::to_string(i));
        }
        const double d = std::log(pred[i]) - std::log(gt[i]);
        sum += d;
        sum2 += d * d;
        ++n;
    }
    if (n == 0) throw DegenerateInputError("silog_value: mask selects no pixels");
    const double mg = sum / static_cast<double>(n);
    const double ms = sum2 / static_cast<double>(n);
    return alpha * std::sqrt(std::max(0.0, ms - lambda * mg * mg));
}

/// beta * bidirectional chamfer between per-image bin centers and the
/// image's ground-truth depth values.
inline Var bin_density_loss(Var centers, const std::vector<std::vector<double>>& gt_values,
                            double beta, double d_min, double d_max) {
    if (beta < 0.0) throw DomainError("bin_density_loss: beta must be >= 0");
    for (const auto& vs : gt_values)
        for (double v : vs) {
            if (v < d_min - 1e-9 || v > d_max + 1e-9) {
                throw DomainError("bin_density_loss: depth value " + std::to_string(v) +
                                  " outside [" + std::to_string(d_min) + ", " + std::to_string(d_max) + "]");
            }
        }
    return scale(chamfer_to_values(centers, gt_values), beta);
}

// ---------------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------------

/// Depth maps for a batch of cue channel stacks [B,C,H,W] -> [B,H,W].
inline Tensor predict_batch(const DepthModel& m, const Tensor& cue_batch) {
    if (cue_batch.rank() != 4) throw DimensionError("predict_batch: input must be [B,C,H,W]");
    Graph g;
    ModelLeaves l = leaf_model(g, m, false);
    ForwardPass fp = model_forward(g, m, l, g.leaf(cue_batch));
    const Tensor& d = fp.depth.value();
    Tensor out({d.extent(0), d.extent(2), d.extent(3)});
    std::copy(d.data(), d.data() + d.numel(), out.data());
    return out;
}

/// Depth map for one cue channel stack [C,H,W] -> [H,W].
inline Tensor predict(const DepthModel& m, const Tensor& cue_map) {
    if (cue_map.rank() != 3) throw DimensionError("predict: cue map must be [C,H,W]");
    Tensor batch({std::size_t{1}, cue_map.extent(0), cue_map.extent(1), cue_map.extent(2)});
    std::copy(cue_map.data(), cue_map.data() + cue_map.numel(), batch.data());
    Tensor d = predict_batch(m, batch);
    Tensor out({d.extent(1), d.extent(2)});
    std::copy(d.data(), d.data() + d.numel(), out.data());
    return out;
}

inline Tensor predict(const DepthModel& m, const CueMap& cm) { return predict(m, cm.channels); }

} // namespace cuedepth
