#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/autodiff.hpp"
#include "cuedepth/embedding.hpp"
#include "cuedepth/error.hpp"
#include "cuedepth/rng.hpp"
#include "cuedepth/scene.hpp"
#include "cuedepth/serialize.hpp"
#include "cuedepth/tensor.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

constexpr int kSizeEmbedDim = 10;

// ---------------------------------------------------------------------------
// Metric size priors.
// ---------------------------------------------------------------------------

/// Class name -> approximate real-world (width, height, depth) in metres.
struct SizePriorTable {
    std::map<std::string, std::array<double, 3>> entries;

    bool has(const std::string& name) const { return entries.count(name) > 0; }
    const std::array<double, 3>& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw LookupError("no size prior for class '" + name + "'");
        return it->second;
    }
};

inline SizePriorTable load_size_priors(std::istream& in) {
    SizePriorTable t;
    std::string line;
    std::size_t line_no = 0;
    auto strip_cr = [](std::string& s) {
        if (!s.empty() && s.back() == '\r') s.pop_back();
    };
    if (!std::getline(in, line)) throw FormatError("size prior table is empty");
    ++line_no;
    strip_cr(line);
    if (line != "class,width_m,height_m,depth_m") {
        throw FormatError("size prior table header must be 'class,width_m,height_m,depth_m', got '" + line + "'");
    }
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 4) {
            throw ParseError("size prior table line " + std::to_string(line_no) + ": expected 4 fields, got " +
                             std::to_string(fields.size()));
        }
        std::array<double, 3> dims{};
        for (int k = 0; k < 3; ++k) {
            std::size_t used = 0;
            try {
                dims[static_cast<std::size_t>(k)] = std::stod(fields[static_cast<std::size_t>(k + 1)], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != fields[static_cast<std::size_t>(k + 1)].size()) {
                throw ParseError("size prior table line " + std::to_string(line_no) + ": unparseable value '" +
                                 fields[static_cast<std::size_t>(k + 1)] + "'");
            }
            if (dims[static_cast<std::size_t>(k)] <= 0.0) {
                throw ValidationError("size prior table line " + std::to_string(line_no) +
                                      ": dimensions must be strictly positive");
            }
        }
        t.entries[fields[0]] = dims;
    }
    return t;
}

inline SizePriorTable load_size_priors(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open size prior table " + path.string());
    return load_size_priors(in);
}

inline void save_size_priors(const SizePriorTable& t, std::ostream& out) {
    out << "class,width_m,height_m,depth_m\n" << std::setprecision(17);
    for (const auto& [name, dims] : t.entries) {
        out << name << ',' << dims[0] << ',' << dims[1] << ',' << dims[2] << '\n';
    }
}

inline void save_size_priors(const SizePriorTable& t, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw PersistenceError("cannot write size prior table " + path.string());
    save_size_priors(t, out);
}

/// Publishes priors for the catalog's familiar classes only; unfamiliar
/// classes have no entry by construction.
inline SizePriorTable priors_from_catalog(const Catalog& cat) {
    SizePriorTable t;
    for (const ObjectClass& c : cat.classes)
        if (c.familiar) t.entries[c.name] = c.mean_dims;
    return t;
}

// ---------------------------------------------------------------------------
// Learned size embedder: two 1x1 convolutions with a relu between.
// ---------------------------------------------------------------------------

struct SizeEmbedder {
    int in_ch = 1;
    int hidden = kSizeEmbedDim;
    int out_ch = kSizeEmbedDim;
    Tensor w1, b1, w2, b2; // [hidden,in,1,1], [hidden], [out,hidden,1,1], [out]

    static SizeEmbedder make(int in_ch, std::uint64_t seed, int hidden = kSizeEmbedDim,
                             int out_ch = kSizeEmbedDim) {
        if (in_ch < 1 || hidden < 1 || out_ch < 1) throw DomainError("SizeEmbedder: channel counts must be positive");
        SizeEmbedder e;
        e.in_ch = in_ch;
        e.hidden = hidden;
        e.out_ch = out_ch;
        Rng rng(Rng::sub_seed(seed, 0, 21));
        const std::size_t ic = static_cast<std::size_t>(in_ch), hc = static_cast<std::size_t>(hidden),
                          oc = static_cast<std::size_t>(out_ch);
        e.w1 = Tensor::normal({hc, ic, 1, 1}, rng, 0.0, std::sqrt(2.0 / static_cast<double>(in_ch)));
        e.b1 = Tensor::zeros({hc});
        e.w2 = Tensor::normal({oc, hc, 1, 1}, rng, 0.0, std::sqrt(2.0 / static_cast<double>(hidden)));
        e.b2 = Tensor::zeros({oc});
        return e;
    }

    /// Plain per-column evaluation on a parameter snapshot; the graph
    /// path in size_embedder_forward computes the same function.
    void apply(const double* x, double* out) const {
        std::vector<double> h(static_cast<std::size_t>(hidden));
        for (int j = 0; j < hidden; ++j) {
            double acc = b1[static_cast<std::size_t>(j)];
            for (int i = 0; i < in_ch; ++i)
                acc += w1[static_cast<std::size_t>(j * in_ch + i)] * x[i];
            h[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : 0.0;
        }
        for (int o = 0; o < out_ch; ++o) {
            double acc = b2[static_cast<std::size_t>(o)];
            for (int j = 0; j < hidden; ++j)
                acc += w2[static_cast<std::size_t>(o * hidden + j)] * h[static_cast<std::size_t>(j)];
            out[o] = acc;
        }
    }

    /// cols is [in_ch, K]; returns [out_ch, K].
    Tensor apply_columns(const Tensor& cols) const {
        if (cols.rank() != 2 || cols.extent(0) != static_cast<std::size_t>(in_ch)) {
            throw DimensionError("SizeEmbedder: columns " + shape_str(cols.shape()) + " need " +
                                 std::to_string(in_ch) + " rows");
        }
        const std::size_t K = cols.extent(1);
        Tensor out({static_cast<std::size_t>(out_ch), K});
        std::vector<double> x(static_cast<std::size_t>(in_ch)), y(static_cast<std::size_t>(out_ch));
        for (std::size_t k = 0; k < K; ++k) {
            for (int i = 0; i < in_ch; ++i) x[static_cast<std::size_t>(i)] = cols[static_cast<std::size_t>(i) * K + k];
            apply(x.data(), y.data());
            for (int o = 0; o < out_ch; ++o) out[static_cast<std::size_t>(o) * K + k] = y[static_cast<std::size_t>(o)];
        }
        return out;
    }
};

struct SizeEmbedderVars {
    Var w1, b1, w2, b2;
};

/// Graph-side forward over a column tensor [1, in_ch, 1, K] -> [out, K].
inline Var size_embedder_forward(const SizeEmbedderVars& p, Var cols) {
    Var h = relu(channel_bias(conv2d(cols, p.w1), p.b1));
    Var o = channel_bias(conv2d(h, p.w2), p.b2);
    return reshape(o, {o.value().extent(1), o.value().extent(3)});
}

// ---------------------------------------------------------------------------
// Cue configuration and channel layout.
// ---------------------------------------------------------------------------

enum class SemRepr { raw, random, language };
enum class AreaMode { off, mask, bbox };

inline std::string sem_repr_name(SemRepr r) {
    switch (r) {
        case SemRepr::raw: return "raw";
        case SemRepr::random: return "random";
        case SemRepr::language: return "language";
    }
    throw ContractError("sem_repr_name: bad enum");
}

inline SemRepr sem_repr_from_name(const std::string& s) {
    if (s == "raw") return SemRepr::raw;
    if (s == "random") return SemRepr::random;
    if (s == "language") return SemRepr::language;
    throw ConfigError("unknown sem_repr '" + s + "' (raw|random|language)");
}

inline std::string area_mode_name(AreaMode m) {
    switch (m) {
        case AreaMode::off: return "off";
        case AreaMode::mask: return "mask";
        case AreaMode::bbox: return "bbox";
    }
    throw ContractError("area_mode_name: bad enum");
}

inline AreaMode area_mode_from_name(const std::string& s) {
    if (s == "off") return AreaMode::off;
    if (s == "mask") return AreaMode::mask;
    if (s == "bbox") return AreaMode::bbox;
    throw ConfigError("unknown area mode '" + s + "' (off|mask|bbox)");
}

struct CueConfig {
    bool sem1 = false;
    bool sem2 = false;
    SemRepr sem_repr = SemRepr::language;
    AreaMode area = AreaMode::off;
    bool size = false;

    void validate() const {
        if (sem2 && !sem1) throw ConfigError("cue config: sem2 requires sem1");
        if (area != AreaMode::off && !sem1) throw ConfigError("cue config: area cue requires sem1");
        if (size && !sem1) throw ConfigError("cue config: size cue requires sem1");
        if (sem2 && sem_repr == SemRepr::raw) {
            throw ConfigError("cue config: sem2 needs an embedded representation (random|language)");
        }
    }

    std::string summary() const {
        if (!sem1) return "baseline";
        std::string s = "sem1(" + sem_repr_name(sem_repr) + ")";
        if (sem2) s += "+sem2";
        if (area == AreaMode::mask) s += "+area(M)";
        if (area == AreaMode::bbox) s += "+area(B)";
        if (size) s += "+size";
        return s;
    }

    nlohmann::json to_json() const {
        return {{"sem1", sem1},
                {"sem2", sem2},
                {"sem_repr", sem_repr_name(sem_repr)},
                {"area", area_mode_name(area)},
                {"size", size}};
    }

    static CueConfig from_json(const nlohmann::json& j) {
        CueConfig c;
        if (j.contains("sem1")) c.sem1 = j.at("sem1").get<bool>();
        if (j.contains("sem2")) c.sem2 = j.at("sem2").get<bool>();
        if (j.contains("sem_repr")) c.sem_repr = sem_repr_from_name(j.at("sem_repr").get<std::string>());
        if (j.contains("area")) c.area = area_mode_from_name(j.at("area").get<std::string>());
        if (j.contains("size")) c.size = j.at("size").get<bool>();
        c.validate();
        return c;
    }
};

struct CueBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t width = 0;
};

struct CueLayout {
    std::vector<CueBlock> blocks;

    std::size_t channels() const {
        return blocks.empty() ? 0 : blocks.back().offset + blocks.back().width;
    }
    const CueBlock* find(const std::string& name) const {
        for (const CueBlock& b : blocks)
            if (b.name == name) return &b;
        return nullptr;
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const CueBlock& b : blocks) {
            arr.push_back({{"name", b.name}, {"offset", b.offset}, {"width", b.width}});
        }
        return {{"blocks", arr}};
    }

    static CueLayout from_json(const nlohmann::json& j) {
        CueLayout l;
        std::size_t off = 0;
        for (const auto& jb : j.at("blocks")) {
            CueBlock b{jb.at("name").get<std::string>(), jb.at("offset").get<std::size_t>(),
                       jb.at("width").get<std::size_t>()};
            if (b.offset != off) throw FormatError("cue layout blocks are not contiguous at '" + b.name + "'");
            off = b.offset + b.width;
            l.blocks.push_back(std::move(b));
        }
        return l;
    }
};

inline CueLayout make_cue_layout(const CueConfig& cfg, int word_dim = kWordDim,
                                 int size_dim = kSizeEmbedDim) {
    cfg.validate();
    CueLayout l;
    std::size_t off = 0;
    auto push = [&](const std::string& name, std::size_t width) {
        l.blocks.push_back({name, off, width});
        off += width;
    };
    push("appearance", 3);
    if (cfg.sem1) push("sem1", cfg.sem_repr == SemRepr::raw ? 1 : static_cast<std::size_t>(word_dim));
    if (cfg.sem2) push("sem2", static_cast<std::size_t>(word_dim));
    if (cfg.area != AreaMode::off) push("area", static_cast<std::size_t>(size_dim));
    if (cfg.size) push("size", static_cast<std::size_t>(size_dim));
    return l;
}

inline std::size_t channel_count(const CueConfig& cfg) { return make_cue_layout(cfg).channels(); }

// ---------------------------------------------------------------------------
// Apparent area.
// ---------------------------------------------------------------------------

/// Fraction of the image an instance occupies, by pixel mask or by the
/// tight bounding rectangle of those pixels.
inline double instance_area(const Tensor& instance_map, int instance_id, AreaMode mode) {
    if (mode == AreaMode::off) throw ConfigError("instance_area: mode is off");
    if (instance_map.rank() != 2) {
        throw DimensionError("instance_area: map must be 2-d, got " + shape_str(instance_map.shape()));
    }
    const std::size_t H = instance_map.extent(0), W = instance_map.extent(1);
    std::size_t count = 0;
    std::size_t x0 = W, x1 = 0, y0 = H, y1 = 0;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            if (static_cast<int>(instance_map.at({y, x})) != instance_id) continue;
            ++count;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (count == 0) throw LookupError("instance id " + std::to_string(instance_id) + " not present in map");
    const double total = static_cast<double>(H * W);
    if (mode == AreaMode::mask) return static_cast<double>(count) / total;
    return static_cast<double>((x1 - x0 + 1) * (y1 - y0 + 1)) / total;
}

// ---------------------------------------------------------------------------
// Second label map: simulated imperfect segmentation.
// ---------------------------------------------------------------------------

/// Per-class relabeling for the sem2 map: class id c flips to a
/// uniformly chosen other class with probability flip_prob, consistently
/// for every pixel of c in the sample. Index 0 maps to 0.
inline std::vector<int> sem2_relabeling(std::size_t n_classes, double flip_prob, std::uint64_t seed) {
    if (flip_prob < 0.0 || flip_prob > 1.0) throw DomainError("sem2 flip probability outside [0,1]");
    std::vector<int> relabel(n_classes + 1);
    relabel[0] = 0;
    for (std::size_t c = 1; c <= n_classes; ++c) {
        Rng rng(Rng::sub_seed(seed, c, 17));
        int target = static_cast<int>(c);
        if (n_classes > 1 && rng.bernoulli(flip_prob)) {
            int other = rng.uniform_int(1, static_cast<int>(n_classes) - 1);
            target = other < static_cast<int>(c) ? other : other + 1;
        }
        relabel[c] = target;
    }
    return relabel;
}

struct CueNoise {
    double sem2_flip_prob = 0.15;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Cue map assembly.
// ---------------------------------------------------------------------------

struct CueTables {
    EmbeddingTable embeddings; // ignored when sem_repr = raw
    SizePriorTable priors;
};

struct CueMap {
    Tensor channels; // [C, H, W]
    CueLayout layout;
};

namespace detail {

/// Distinct positive ids in a label raster, ascending.
inline std::vector<int> present_ids(const Tensor& map) {
    std::vector<int> ids;
    for (std::size_t i = 0; i < map.numel(); ++i) {
        const int v = static_cast<int>(map[i]);
        if (v > 0 && std::find(ids.begin(), ids.end(), v) == ids.end()) ids.push_back(v);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

} // namespace detail

/// Inputs fed to the dims embedder for one class: log metric priors for
/// familiar classes, zeros when no prior is published.
inline std::array<double, 3> size_prior_input(const ObjectClass& cls, const SizePriorTable& priors) {
    if (!cls.familiar || !priors.has(cls.name)) return {0.0, 0.0, 0.0};
    const std::array<double, 3>& dims = priors.at(cls.name);
    return {std::log(dims[0]), std::log(dims[1]), std::log(dims[2])};
}

/// Builds the full per-pixel channel stack for one sample on a frozen
/// parameter snapshot. Background pixels carry zero cue vectors.
inline CueMap build_cue_map(const SceneSample& sample, const Catalog& catalog, const CueConfig& cfg,
                            const CueTables& tables, const SizeEmbedder& area_embedder,
                            const SizeEmbedder& dims_embedder, const CueNoise& noise = {}) {
    cfg.validate();
    if ((cfg.sem1 && cfg.sem_repr != SemRepr::raw) || cfg.sem2) {
        if (tables.embeddings.dim != kWordDim) {
            throw DimensionError("build_cue_map: embedding table dim " + std::to_string(tables.embeddings.dim) +
                                 ", layout expects " + std::to_string(kWordDim));
        }
    }
    if (cfg.area != AreaMode::off && (area_embedder.in_ch != 1 || area_embedder.out_ch != kSizeEmbedDim)) {
        throw DimensionError("build_cue_map: area embedder must map 1 -> " + std::to_string(kSizeEmbedDim));
    }
    if (cfg.size && (dims_embedder.in_ch != 3 || dims_embedder.out_ch != kSizeEmbedDim)) {
        throw DimensionError("build_cue_map: dims embedder must map 3 -> " + std::to_string(kSizeEmbedDim));
    }
    const CueLayout layout = make_cue_layout(cfg);
    const std::size_t H = sample.semantic_map.extent(0), W = sample.semantic_map.extent(1);
    const std::size_t HW = H * W;
    CueMap cm;
    cm.layout = layout;
    cm.channels = Tensor::zeros({layout.channels(), H, W});

    std::copy(sample.appearance.data(), sample.appearance.data() + 3 * HW, cm.channels.data());

    const std::vector<int> class_ids = detail::present_ids(sample.semantic_map);
    const std::vector<int> instance_ids = detail::present_ids(sample.instance_map);
    const int max_cid = class_ids.empty() ? 0 : class_ids.back();
    const int max_iid = instance_ids.empty() ? 0 : instance_ids.back();

    auto paint_by_map = [&](const Tensor& map, const CueBlock& block,
                            const std::vector<std::vector<double>>& columns) {
        for (std::size_t c = 0; c < block.width; ++c) {
            double* plane = cm.channels.data() + (block.offset + c) * HW;
            const double* src = map.data();
            for (std::size_t i = 0; i < HW; ++i) {
                const int id = static_cast<int>(src[i]);
                if (id > 0) plane[i] = columns[static_cast<std::size_t>(id)][c];
            }
        }
    };

    if (cfg.sem1) {
        const CueBlock& block = *layout.find("sem1");
        if (cfg.sem_repr == SemRepr::raw) {
            double* plane = cm.channels.data() + block.offset * HW;
            std::copy(sample.semantic_map.data(), sample.semantic_map.data() + HW, plane);
        } else {
            std::vector<std::vector<double>> cols(static_cast<std::size_t>(max_cid) + 1);
            for (int cid : class_ids)
                cols[static_cast<std::size_t>(cid)] = embed_class_name(tables.embeddings, catalog.by_id(cid).name).vec;
            paint_by_map(sample.semantic_map, block, cols);
        }
    }

    if (cfg.sem2) {
        const CueBlock& block = *layout.find("sem2");
        const std::vector<int> relabel = sem2_relabeling(catalog.size(), noise.sem2_flip_prob, noise.seed);
        std::vector<std::vector<double>> cols(static_cast<std::size_t>(max_cid) + 1);
        for (int cid : class_ids) {
            const int reported = relabel[static_cast<std::size_t>(cid)];
            cols[static_cast<std::size_t>(cid)] =
                embed_class_name(tables.embeddings, catalog.by_id(reported).name).vec;
        }
        paint_by_map(sample.semantic_map, block, cols);
    }

    if (cfg.area != AreaMode::off) {
        const CueBlock& block = *layout.find("area");
        std::vector<std::vector<double>> cols(static_cast<std::size_t>(max_iid) + 1);
        for (int iid : instance_ids) {
            const double frac = instance_area(sample.instance_map, iid, cfg.area);
            std::vector<double> out(static_cast<std::size_t>(area_embedder.out_ch));
            area_embedder.apply(&frac, out.data());
            cols[static_cast<std::size_t>(iid)] = std::move(out);
        }
        paint_by_map(sample.instance_map, block, cols);
    }

    if (cfg.size) {
        const CueBlock& block = *layout.find("size");
        std::vector<std::vector<double>> cols(static_cast<std::size_t>(max_cid) + 1);
        for (int cid : class_ids) {
            const std::array<double, 3> x = size_prior_input(catalog.by_id(cid), tables.priors);
            std::vector<double> out(static_cast<std::size_t>(dims_embedder.out_ch));
            dims_embedder.apply(x.data(), out.data());
            cols[static_cast<std::size_t>(cid)] = std::move(out);
        }
        paint_by_map(sample.semantic_map, block, cols);
    }

    return cm;
}

inline void save_cue_map(const CueMap& cm, const std::filesystem::path& stem) {
    save_tensor(stem.string() + ".cdt", cm.channels);
    std::ofstream out(stem.string() + ".layout.json");
    if (!out) throw PersistenceError("cannot write cue layout " + stem.string() + ".layout.json");
    out << cm.layout.to_json().dump(2) << '\n';
}

inline CueMap load_cue_map(const std::filesystem::path& stem) {
    CueMap cm;
    cm.channels = load_tensor(stem.string() + ".cdt");
    std::ifstream in(stem.string() + ".layout.json");
    if (!in) throw PersistenceError("cannot open cue layout " + stem.string() + ".layout.json");
    nlohmann::json j;
    in >> j;
    cm.layout = CueLayout::from_json(j);
    if (cm.channels.rank() != 3 || cm.channels.extent(0) != cm.layout.channels()) {
        throw FormatError("cue map channels " + shape_str(cm.channels.shape()) +
                          " disagree with layout width " + std::to_string(cm.layout.channels()));
    }
    return cm;
}

// ---------------------------------------------------------------------------
// Column extraction for in-graph training of the embedders.
// ---------------------------------------------------------------------------

/// Embedder inputs for one sample as a column tensor plus the pixel ->
/// column index map consumed by instance_broadcast. A sample with no
/// foreground gets one never-referenced zero column so downstream
/// convolutions keep a nonzero width.
struct CueColumns {
    Tensor cols;      // [1, in_ch, 1, K]
    Tensor index_map; // [H, W]; 0 = background, else 1-based column
    std::size_t count = 0;
};

inline CueColumns area_columns(const SceneSample& sample, AreaMode mode) {
    const std::size_t H = sample.instance_map.extent(0), W = sample.instance_map.extent(1);
    const std::vector<int> ids = detail::present_ids(sample.instance_map);
    CueColumns cc;
    cc.count = std::max<std::size_t>(ids.size(), 1);
    cc.cols = Tensor::zeros({1, 1, 1, cc.count});
    cc.index_map = Tensor::zeros({H, W});
    std::vector<std::size_t> column_of(ids.empty() ? 1 : static_cast<std::size_t>(ids.back()) + 1, 0);
    for (std::size_t k = 0; k < ids.size(); ++k) {
        cc.cols[k] = instance_area(sample.instance_map, ids[k], mode);
        column_of[static_cast<std::size_t>(ids[k])] = k + 1;
    }
    for (std::size_t i = 0; i < H * W; ++i) {
        const int id = static_cast<int>(sample.instance_map[i]);
        if (id > 0) cc.index_map[i] = static_cast<double>(column_of[static_cast<std::size_t>(id)]);
    }
    return cc;
}

inline CueColumns size_columns(const SceneSample& sample, const Catalog& catalog,
                               const SizePriorTable& priors) {
    const std::size_t H = sample.semantic_map.extent(0), W = sample.semantic_map.extent(1);
    const std::vector<int> ids = detail::present_ids(sample.semantic_map);
    CueColumns cc;
    cc.count = std::max<std::size_t>(ids.size(), 1);
    cc.cols = Tensor::zeros({1, 3, 1, cc.count});
    cc.index_map = Tensor::zeros({H, W});
    std::vector<std::size_t> column_of(ids.empty() ? 1 : static_cast<std::size_t>(ids.back()) + 1, 0);
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const std::array<double, 3> x = size_prior_input(catalog.by_id(ids[k]), priors);
        for (std::size_t d = 0; d < 3; ++d) cc.cols[d * cc.count + k] = x[d];
        column_of[static_cast<std::size_t>(ids[k])] = k + 1;
    }
    for (std::size_t i = 0; i < H * W; ++i) {
        const int id = static_cast<int>(sample.semantic_map[i]);
        if (id > 0) cc.index_map[i] = static_cast<double>(column_of[static_cast<std::size_t>(id)]);
    }
    return cc;
}

/// Stacks per-image columns side by side and offsets each image's index
/// map into the merged column range.
struct CueBatchColumns {
    Tensor cols; // [1, in_ch, 1, sum K]
    std::vector<Tensor> index_maps;
};

inline CueBatchColumns merge_columns(const std::vector<CueColumns>& per_image) {
    if (per_image.empty()) throw ContractError("merge_columns: empty batch");
    const std::size_t in_ch = per_image[0].cols.extent(1);
    std::size_t total = 0;
    for (const CueColumns& cc : per_image) {
        if (cc.cols.extent(1) != in_ch) throw DimensionError("merge_columns: mixed input channel counts");
        total += cc.count;
    }
    CueBatchColumns out;
    out.cols = Tensor::zeros({1, in_ch, 1, total});
    std::size_t base = 0;
    for (const CueColumns& cc : per_image) {
        for (std::size_t d = 0; d < in_ch; ++d)
            for (std::size_t k = 0; k < cc.count; ++k)
                out.cols[d * total + base + k] = cc.cols[d * cc.count + k];
        Tensor idx = cc.index_map;
        for (std::size_t i = 0; i < idx.numel(); ++i)
            if (idx[i] > 0.0) idx[i] += static_cast<double>(base);
        out.index_maps.push_back(std::move(idx));
        base += cc.count;
    }
    return out;
}

} // namespace cuedepth
