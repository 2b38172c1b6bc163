#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/cues.hpp"
#include "cuedepth/dataset.hpp"
#include "cuedepth/metrics.hpp"
#include "cuedepth/net.hpp"
#include "cuedepth/optim.hpp"
#include "cuedepth/serialize.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Model bundle: depth net plus the cue embedders trained with it.
// ---------------------------------------------------------------------------

struct CueModel {
    DepthModel net;
    CueConfig cues;
    SizeEmbedder area_embedder;
    SizeEmbedder dims_embedder;

    static CueModel make(const NetConfig& ncfg, const CueConfig& ccfg, std::uint64_t seed) {
        ccfg.validate();
        if (ncfg.in_channels != channel_count(ccfg)) {
            throw ConfigError("cue model: net expects " + std::to_string(ncfg.in_channels) +
                              " channels but the cue config yields " + std::to_string(channel_count(ccfg)));
        }
        CueModel m;
        m.net = DepthModel::make(ncfg, seed);
        m.cues = ccfg;
        m.area_embedder = SizeEmbedder::make(1, Rng::sub_seed(seed, 1, 42));
        m.dims_embedder = SizeEmbedder::make(3, Rng::sub_seed(seed, 2, 42));
        return m;
    }

    bool uses_area() const { return cues.area != AreaMode::off; }
    bool uses_size() const { return cues.size; }

    std::vector<NamedParam> params() {
        std::vector<NamedParam> p = net.params();
        if (uses_area()) {
            p.push_back({"area_embed.w1", &area_embedder.w1});
            p.push_back({"area_embed.b1", &area_embedder.b1});
            p.push_back({"area_embed.w2", &area_embedder.w2});
            p.push_back({"area_embed.b2", &area_embedder.b2});
        }
        if (uses_size()) {
            p.push_back({"size_embed.w1", &dims_embedder.w1});
            p.push_back({"size_embed.b1", &dims_embedder.b1});
            p.push_back({"size_embed.w2", &dims_embedder.w2});
            p.push_back({"size_embed.b2", &dims_embedder.b2});
        }
        return p;
    }

    std::vector<NamedParamConst> params() const {
        std::vector<NamedParamConst> out;
        for (const NamedParam& np : const_cast<CueModel*>(this)->params()) out.push_back({np.name, np.tensor});
        return out;
    }
};

/// Full cue channel stack for one sample on the model's current
/// embedder parameters.
inline CueMap model_cue_map(const CueModel& m, const SceneSample& s, const Catalog& catalog,
                            const CueTables& tables, const CueNoise& noise = {}) {
    return build_cue_map(s, catalog, m.cues, tables, m.area_embedder, m.dims_embedder, noise);
}

/// Per-sample sem2 corruption stream; one fixed draw per sample index.
inline CueNoise cue_noise_for_sample(std::uint64_t master, double flip_prob, std::size_t index) {
    return CueNoise{flip_prob, Rng::sub_seed(master, index, 23)};
}

// ---------------------------------------------------------------------------
// Training data: constant channels precomputed, embedder inputs kept as
// columns so the embedders stay inside the differentiated graph.
// ---------------------------------------------------------------------------

struct TrainingExample {
    Tensor constant; // [C_const, H, W]
    CueColumns area;
    CueColumns size;
    Tensor depth; // [H, W]
};

struct TrainingSet {
    std::vector<TrainingExample> examples;
    std::size_t constant_channels = 0;
    bool has_area = false;
    bool has_size = false;
    std::size_t height = 0;
    std::size_t width = 0;
};

inline TrainingSet prepare_training_set(const std::vector<SceneSample>& samples, const Catalog& catalog,
                                        const CueConfig& cues, const CueTables& tables,
                                        double sem2_flip_prob = 0.15, std::uint64_t noise_seed = 0) {
    if (samples.empty()) throw DegenerateInputError("prepare_training_set: no samples");
    TrainingSet ts;
    ts.has_area = cues.area != AreaMode::off;
    ts.has_size = cues.size;
    CueConfig constant_cfg = cues;
    constant_cfg.area = AreaMode::off;
    constant_cfg.size = false;
    ts.constant_channels = channel_count(constant_cfg);
    ts.height = samples[0].depth_map.extent(0);
    ts.width = samples[0].depth_map.extent(1);
    const SizeEmbedder unused_area = SizeEmbedder::make(1, 0);
    const SizeEmbedder unused_dims = SizeEmbedder::make(3, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const SceneSample& s = samples[i];
        if (s.depth_map.extent(0) != ts.height || s.depth_map.extent(1) != ts.width) {
            throw DimensionError("prepare_training_set: sample " + std::to_string(i) + " extents differ");
        }
        TrainingExample ex;
        ex.constant = build_cue_map(s, catalog, constant_cfg, tables, unused_area, unused_dims,
                                    cue_noise_for_sample(noise_seed, sem2_flip_prob, i))
                          .channels;
        if (ts.has_area) ex.area = area_columns(s, cues.area);
        if (ts.has_size) ex.size = size_columns(s, catalog, tables.priors);
        ex.depth = s.depth_map;
        ts.examples.push_back(std::move(ex));
    }
    return ts;
}

inline TrainingSet prepare_training_set(const std::vector<SceneSample>& samples, const Catalog& catalog,
                                        const CueModel& m, const CueTables& tables,
                                        double sem2_flip_prob = 0.15, std::uint64_t noise_seed = 0) {
    return prepare_training_set(samples, catalog, m.cues, tables, sem2_flip_prob, noise_seed);
}

// ---------------------------------------------------------------------------
// Deterministic train/val split.
// ---------------------------------------------------------------------------

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Samples ranked by a seeded hash of their index; the top fraction
/// (at least one, never all) becomes the validation split.
inline SplitIndices train_val_split(std::size_t n, std::uint64_t seed, double val_fraction = 0.1) {
    if (n < 2) throw DegenerateInputError("train_val_split: need at least 2 samples");
    if (val_fraction <= 0.0 || val_fraction >= 1.0) {
        throw DomainError("train_val_split: fraction must lie in (0, 1)");
    }
    std::vector<std::pair<std::uint64_t, std::size_t>> ranked(n);
    for (std::size_t i = 0; i < n; ++i) {
        ranked[i] = {detail::mix64(seed ^ detail::mix64(i + 0x9e3779b97f4a7c15ull)), i};
    }
    std::sort(ranked.begin(), ranked.end());
    std::size_t n_val = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * val_fraction));
    n_val = std::min(std::max<std::size_t>(n_val, 1), n - 1);
    SplitIndices out;
    for (std::size_t k = 0; k < n; ++k) {
        (k < n_val ? out.val : out.train).push_back(ranked[k].second);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    return out;
}

// ---------------------------------------------------------------------------
// History.
// ---------------------------------------------------------------------------

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_abs_rel = 0.0;
    double val_rmse = 0.0;
    double val_d1 = 0.0;
    double val_silog = 0.0; // in-memory extra; not part of the CSV contract
};

struct History {
    std::vector<EpochRow> rows;
    static constexpr const char* csv_header = "epoch,train_loss,val_loss,val_abs_rel,val_rmse,val_d1";

    void save_csv(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw PersistenceError("cannot write history " + path.string());
        os << csv_header << '\n' << std::setprecision(17);
        for (const EpochRow& r : rows) {
            os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_abs_rel << ','
               << r.val_rmse << ',' << r.val_d1 << '\n';
        }
        if (!os) throw PersistenceError("short write on history " + path.string());
    }

    static History load_csv(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw PersistenceError("cannot open history " + path.string());
        std::string line;
        if (!std::getline(is, line)) throw FormatError("history " + path.string() + " is empty");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line != csv_header) {
            throw FormatError("history " + path.string() + " has header '" + line + "'");
        }
        History h;
        std::size_t line_no = 1;
        while (std::getline(is, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string field;
            std::vector<double> vals;
            while (std::getline(ls, field, ',')) {
                std::size_t used = 0;
                double v = 0.0;
                try {
                    v = std::stod(field, &used);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used != field.size()) {
                    throw ParseError("history " + path.string() + " line " + std::to_string(line_no) +
                                     ": bad value '" + field + "'");
                }
                vals.push_back(v);
            }
            if (vals.size() != 6) {
                throw FormatError("history " + path.string() + " line " + std::to_string(line_no) +
                                  ": expected 6 columns, got " + std::to_string(vals.size()));
            }
            EpochRow r;
            r.epoch = static_cast<int>(vals[0]);
            r.train_loss = vals[1];
            r.val_loss = vals[2];
            r.val_abs_rel = vals[3];
            r.val_rmse = vals[4];
            r.val_d1 = vals[5];
            r.val_silog = std::numeric_limits<double>::quiet_NaN();
            h.rows.push_back(r);
        }
        return h;
    }
};

// ---------------------------------------------------------------------------
// Batch assembly.
// ---------------------------------------------------------------------------

namespace detail {

struct BatchGraph {
    Var input;
    Tensor gt; // [B,1,H,W]
    std::vector<std::vector<double>> depth_values;
    std::vector<Var> params; // same order as CueModel::params()
    ModelLeaves model_leaves;
};

inline BatchGraph assemble_batch(Graph& g, const CueModel& m, const TrainingSet& ts,
                                 const std::vector<std::size_t>& idx, bool trainable) {
    const std::size_t B = idx.size(), H = ts.height, W = ts.width, HW = H * W;
    BatchGraph bg;
    bg.model_leaves = leaf_model(g, m.net, trainable);
    bg.params = bg.model_leaves.order;

    Tensor constant({B, ts.constant_channels, H, W});
    bg.gt = Tensor({B, std::size_t{1}, H, W});
    bg.depth_values.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
        const TrainingExample& ex = ts.examples[idx[b]];
        std::copy(ex.constant.data(), ex.constant.data() + ts.constant_channels * HW,
                  constant.data() + b * ts.constant_channels * HW);
        std::copy(ex.depth.data(), ex.depth.data() + HW, bg.gt.data() + b * HW);
        bg.depth_values[b].assign(ex.depth.data(), ex.depth.data() + HW);
    }

    std::vector<Var> parts{g.leaf(std::move(constant))};
    auto add_embedded = [&](const SizeEmbedder& emb, auto pick) {
        SizeEmbedderVars ev{g.leaf(emb.w1, trainable), g.leaf(emb.b1, trainable),
                            g.leaf(emb.w2, trainable), g.leaf(emb.b2, trainable)};
        bg.params.push_back(ev.w1);
        bg.params.push_back(ev.b1);
        bg.params.push_back(ev.w2);
        bg.params.push_back(ev.b2);
        std::vector<CueColumns> cc;
        cc.reserve(B);
        for (std::size_t b = 0; b < B; ++b) cc.push_back(pick(ts.examples[idx[b]]));
        CueBatchColumns merged = merge_columns(cc);
        parts.push_back(instance_broadcast(size_embedder_forward(ev, g.leaf(merged.cols)), merged.index_maps));
    };
    if (ts.has_area) add_embedded(m.area_embedder, [](const TrainingExample& e) { return e.area; });
    if (ts.has_size) add_embedded(m.dims_embedder, [](const TrainingExample& e) { return e.size; });

    bg.input = parts.size() == 1 ? parts[0] : concat_channels(std::span<const Var>(parts));
    return bg;
}

inline Var composite_loss(const CueModel& m, const BatchGraph& bg, const ForwardPass& fp) {
    const NetConfig& cfg = m.net.config;
    Var loss = silog_loss(fp.depth, bg.gt, nullptr, cfg.loss.silog_lambda, cfg.loss.silog_alpha);
    if (cfg.head == HeadKind::adabins && cfg.loss.bin_loss_weight > 0.0) {
        loss = add(loss, bin_density_loss(*fp.centers, bg.depth_values, cfg.loss.bin_loss_weight,
                                          cfg.depth_min, cfg.depth_max));
    }
    return loss;
}

inline void fisher_yates(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(v[i - 1], v[j]);
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

/// Validation predictions on the current parameters; rows follow the
/// given index order.
inline Tensor predict_set(const CueModel& m, const TrainingSet& ts, const std::vector<std::size_t>& idx,
                          int batch) {
    Tensor pred({idx.size(), ts.height, ts.width});
    const std::size_t HW = ts.height * ts.width;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch)) {
        const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(batch));
        std::vector<std::size_t> slice(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                       idx.begin() + static_cast<std::ptrdiff_t>(stop));
        Graph g;
        detail::BatchGraph bg = detail::assemble_batch(g, m, ts, slice, false);
        ForwardPass fp = model_forward(g, m.net, bg.model_leaves, bg.input);
        std::copy(fp.depth.value().data(), fp.depth.value().data() + slice.size() * HW,
                  pred.data() + start * HW);
    }
    return pred;
}

inline Tensor gather_depths(const TrainingSet& ts, const std::vector<std::size_t>& idx) {
    Tensor gt({idx.size(), ts.height, ts.width});
    const std::size_t HW = ts.height * ts.width;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Tensor& d = ts.examples[idx[k]].depth;
        std::copy(d.data(), d.data() + HW, gt.data() + k * HW);
    }
    return gt;
}

/// The exact split train() will use for a dataset of n samples.
inline SplitIndices training_split(const NetConfig& cfg, std::size_t n) {
    return train_val_split(n, Rng::sub_seed(cfg.train.seed, 0, 31), cfg.train.val_fraction);
}

/// silog + beta * bin density, minimized with the configured optimizer.
/// The split, the batch order, and every RNG draw derive from
/// config.train.seed, so one (seed, config, build) triple reproduces a
/// history byte for byte.
inline History train(CueModel& m, const TrainingSet& data) {
    const NetConfig& cfg = m.net.config;
    cfg.validate();
    const std::size_t expected = data.constant_channels + (data.has_area ? kSizeEmbedDim : 0) +
                                 (data.has_size ? kSizeEmbedDim : 0);
    if (expected != cfg.in_channels) {
        throw ConfigError("train: training set provides " + std::to_string(expected) +
                          " channels, config expects " + std::to_string(cfg.in_channels));
    }
    if ((data.has_area != m.uses_area()) || (data.has_size != m.uses_size())) {
        throw ConfigError("train: training set cue blocks disagree with the model's cue config");
    }

    const SplitIndices split = training_split(cfg, data.examples.size());
    std::vector<std::size_t> order = split.train;
    {
        Rng shuffle_rng(Rng::sub_seed(cfg.train.seed, 0, 3));
        detail::fisher_yates(order, shuffle_rng);
    }

    std::vector<Tensor*> param_ptrs;
    for (const NamedParam& np : m.params()) param_ptrs.push_back(np.tensor);
    OptConfig ocfg;
    ocfg.kind = cfg.train.optimizer == "adam" ? OptKind::adam : OptKind::sgd;
    ocfg.lr = cfg.train.lr;
    OptState ostate;

    const std::size_t batch = static_cast<std::size_t>(cfg.train.batch);
    const Tensor val_gt = gather_depths(data, split.val);

    History h;
    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        double train_loss_sum = 0.0;
        std::size_t train_images = 0, batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += batch, ++batch_index) {
            const std::size_t stop = std::min(order.size(), start + batch);
            std::vector<std::size_t> slice(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
            Graph g;
            g.reserve(128);
            detail::BatchGraph bg = detail::assemble_batch(g, m, data, slice, true);
            ForwardPass fp = model_forward(g, m.net, bg.model_leaves, bg.input);
            if (!fp.depth.value().all_finite()) {
                throw NumericFault("train: non-finite prediction at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_index));
            }
            Var loss = detail::composite_loss(m, bg, fp);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                throw NumericFault("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index));
            }
            g.backward(loss);
            std::vector<const Tensor*> grads;
            grads.reserve(bg.params.size());
            for (const Var& v : bg.params) grads.push_back(&v.grad());
            optimizer_step(param_ptrs, grads, ostate, ocfg);
            train_loss_sum += lv * static_cast<double>(slice.size());
            train_images += slice.size();
        }

        double val_loss_sum = 0.0;
        std::size_t val_images = 0;
        Tensor val_pred({split.val.size(), data.height, data.width});
        const std::size_t HW = data.height * data.width;
        for (std::size_t start = 0; start < split.val.size(); start += batch) {
            const std::size_t stop = std::min(split.val.size(), start + batch);
            std::vector<std::size_t> slice(split.val.begin() + static_cast<std::ptrdiff_t>(start),
                                           split.val.begin() + static_cast<std::ptrdiff_t>(stop));
            Graph g;
            detail::BatchGraph bg = detail::assemble_batch(g, m, data, slice, false);
            ForwardPass fp = model_forward(g, m.net, bg.model_leaves, bg.input);
            if (!fp.depth.value().all_finite()) {
                throw NumericFault("train: non-finite prediction at epoch " + std::to_string(epoch) +
                                   ", validation batch " + std::to_string(start / batch));
            }
            Var loss = detail::composite_loss(m, bg, fp);
            val_loss_sum += loss.value()[0] * static_cast<double>(slice.size());
            val_images += slice.size();
            std::copy(fp.depth.value().data(), fp.depth.value().data() + slice.size() * HW,
                      val_pred.data() + start * HW);
        }

        const MetricsReport mr = evaluate(val_pred, val_gt);
        EpochRow row;
        row.epoch = epoch;
        row.train_loss = train_loss_sum / static_cast<double>(train_images);
        row.val_loss = val_loss_sum / static_cast<double>(val_images);
        row.val_abs_rel = mr.abs_rel;
        row.val_rmse = mr.rms;
        row.val_d1 = mr.delta1;
        row.val_silog = silog_value(val_pred, val_gt, nullptr, cfg.loss.silog_lambda, cfg.loss.silog_alpha);
        h.rows.push_back(row);
    }
    m.net.check_finite();
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoints: one-line JSON header, then a CDT1 payload holding every
// parameter back to back at the offsets the manifest records.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const CueModel& m) {
    std::vector<NamedParamConst> ps = m.params();
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t total = 0;
    for (const NamedParamConst& np : ps) {
        nlohmann::json shape = nlohmann::json::array();
        for (std::size_t e : np.tensor->shape()) shape.push_back(e);
        manifest.push_back({{"name", np.name}, {"shape", shape}, {"offset", total}});
        total += np.tensor->numel();
    }
    Tensor payload({total});
    std::size_t off = 0;
    for (const NamedParamConst& np : ps) {
        std::copy(np.tensor->data(), np.tensor->data() + np.tensor->numel(), payload.data() + off);
        off += np.tensor->numel();
    }
    nlohmann::json header = {{"net", m.net.config.to_json()}, {"cues", m.cues.to_json()}, {"params", manifest}};

    std::ofstream os(path, std::ios::binary);
    if (!os) throw PersistenceError("cannot write checkpoint " + path.string());
    os << header.dump() << '\n';
    write_tensor(os, payload);
    if (!os) throw PersistenceError("short write on checkpoint " + path.string());
}

inline CueModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw PersistenceError("cannot open checkpoint " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw FormatError("checkpoint " + path.string() + " lacks a header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path.string() + " header: " + e.what());
    }
    try {
        const NetConfig ncfg = NetConfig::from_json(header.at("net"));
        const CueConfig ccfg = CueConfig::from_json(header.at("cues"));
        CueModel m = CueModel::make(ncfg, ccfg, 0);
        const Tensor payload = read_tensor(is, path.string());

        std::vector<NamedParam> ps = m.params();
        std::set<std::string> seen;
        for (const auto& entry : header.at("params")) {
            const std::string name = entry.at("name").get<std::string>();
            if (!seen.insert(name).second) {
                throw FormatError("checkpoint lists parameter '" + name + "' twice");
            }
            auto it = std::find_if(ps.begin(), ps.end(), [&](const NamedParam& np) { return np.name == name; });
            if (it == ps.end()) throw FormatError("checkpoint names unknown parameter '" + name + "'");
            Shape shape;
            for (const auto& e : entry.at("shape")) shape.push_back(e.get<std::size_t>());
            if (!(shape == it->tensor->shape())) {
                throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(shape) +
                                  ", model expects " + shape_str(it->tensor->shape()));
            }
            const std::size_t off = entry.at("offset").get<std::size_t>();
            if (off + it->tensor->numel() > payload.numel()) {
                throw FormatError("checkpoint parameter '" + name + "' overruns the payload");
            }
            std::copy(payload.data() + off, payload.data() + off + it->tensor->numel(), it->tensor->data());
        }
        if (seen.size() != ps.size()) {
            throw FormatError("checkpoint fills " + std::to_string(seen.size()) + " of " +
                              std::to_string(ps.size()) + " parameters");
        }
        m.net.check_finite();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path.string() + ": " + e.what());
    }
}

} // namespace cuedepth
