#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cuedepth/cues.hpp"
#include "cuedepth/dataset.hpp"
#include "cuedepth/embedding.hpp"
#include "cuedepth/error.hpp"
#include "cuedepth/metrics.hpp"
#include "cuedepth/net.hpp"
#include "cuedepth/train.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Dataset reference: a manifest directory on disk, or an inline block that
// regenerates the dataset deterministically.
// ---------------------------------------------------------------------------

/// Turns an inline dataset block into a manifest. Only "count" is required;
/// everything else falls back to library defaults.
inline DatasetManifest dataset_block_to_manifest(const nlohmann::json& block) {
    DatasetManifest m;
    try {
        if (!block.contains("count")) throw ConfigError("dataset block: missing required key 'count'");
        m.count = block.at("count").get<std::size_t>();
        m.seed = block.value("seed", std::uint64_t{0});
        m.catalog = builtin_catalog(block.value("catalog", std::string("household")));
        m.config.preset = preset_from_name(block.value("preset", std::string("familiar")));
        m.config.n_min = block.value("n_min", 2);
        m.config.n_max = block.value("n_max", 4);
        m.config.noise_sigma = block.value("noise_sigma", 0.0);
        m.config.min_side_px = block.value("min_side_px", 5.0);
        if (block.contains("camera")) {
            const nlohmann::json& jc = block.at("camera");
            m.camera.focal_px = jc.value("focal_px", m.camera.focal_px);
            m.camera.width_px = jc.value("width_px", m.camera.width_px);
            m.camera.height_px = jc.value("height_px", m.camera.height_px);
            m.camera.depth_min = jc.value("depth_min", m.camera.depth_min);
            m.camera.depth_max = jc.value("depth_max", m.camera.depth_max);
            m.camera.background_depth = jc.value("background_depth", m.camera.background_depth);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("dataset block: ") + e.what());
    }
    if (m.count == 0) throw ConfigError("dataset block: count must be at least 1");
    if (m.config.n_min < 1 || m.config.n_max < m.config.n_min) {
        throw ConfigError("dataset block: need 1 <= n_min <= n_max");
    }
    if (m.config.noise_sigma < 0.0) throw ConfigError("dataset block: noise_sigma must be non-negative");
    m.camera.validate();
    return m;
}

struct DatasetRef {
    bool inlined = false;
    std::string path;      // manifest directory, when !inlined
    nlohmann::json block;  // generation parameters, when inlined

    nlohmann::json to_json() const { return inlined ? block : nlohmann::json(path); }

    static DatasetRef from_json(const nlohmann::json& j) {
        DatasetRef r;
        if (j.is_string()) {
            r.path = j.get<std::string>();
            if (r.path.empty()) throw ConfigError("dataset reference: empty path");
        } else if (j.is_object()) {
            r.inlined = true;
            r.block = j;
            dataset_block_to_manifest(j); // reject malformed blocks up front
        } else {
            throw ConfigError("dataset reference must be a manifest path or an inline block");
        }
        return r;
    }

    bool operator==(const DatasetRef& o) const { return to_json() == o.to_json(); }
    bool operator!=(const DatasetRef& o) const { return !(*this == o); }
};

/// Materializes the referenced dataset: regenerates inline blocks, loads
/// manifest directories from disk.
inline std::pair<DatasetManifest, std::vector<SceneSample>> resolve_dataset(const DatasetRef& ref) {
    if (ref.inlined) {
        DatasetManifest m = dataset_block_to_manifest(ref.block);
        return {m, generate_samples(m)};
    }
    DatasetManifest m = load_manifest(ref.path);
    return {m, load_dataset(ref.path)};
}

// ---------------------------------------------------------------------------
// Experiment specification.
// ---------------------------------------------------------------------------

struct ExperimentSpec {
    std::string name;
    DatasetRef dataset;
    CueConfig cues;
    NetConfig net;
    std::vector<std::uint64_t> seeds;
    std::string out = "runs";
    std::uint64_t tables_seed = 7;
    double label_noise = 0.15;

    void validate() const {
        if (name.empty()) throw ConfigError("experiment: name must not be empty");
        if (name.find('/') != std::string::npos || name.find('\\') != std::string::npos ||
            name.find("..") != std::string::npos) {
            throw ConfigError("experiment '" + name + "': name must be a plain directory segment");
        }
        if (seeds.empty()) throw ConfigError("experiment '" + name + "': seeds must not be empty");
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
            throw ConfigError("experiment '" + name + "': duplicate seeds");
        }
        if (out.empty()) throw ConfigError("experiment '" + name + "': output directory must not be empty");
        if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
            throw ConfigError("experiment '" + name + "': label_noise must lie in [0, 1]");
        }
        cues.validate();
        net.validate();
    }

    nlohmann::json to_json() const {
        return {{"name", name},           {"dataset", dataset.to_json()}, {"cues", cues.to_json()},
                {"net", net.to_json()},   {"seeds", seeds},               {"out", out},
                {"tables_seed", tables_seed}, {"label_noise", label_noise}};
    }

    static ExperimentSpec from_json(const nlohmann::json& j) {
        ExperimentSpec s;
        try {
            s.name = j.at("name").get<std::string>();
            s.dataset = DatasetRef::from_json(j.at("dataset"));
            if (j.contains("cues")) s.cues = CueConfig::from_json(j.at("cues"));
            if (j.contains("net")) s.net = NetConfig::from_json(j.at("net"));
            s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
            s.out = j.value("out", std::string("runs"));
            s.tables_seed = j.value("tables_seed", std::uint64_t{7});
            s.label_noise = j.value("label_noise", 0.15);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("experiment spec: ") + e.what());
        }
        s.validate();
        return s;
    }

    static ExperimentSpec load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw PersistenceError("cannot open experiment spec " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("experiment spec " + path.string() + ": " + e.what());
        }
        return from_json(j);
    }
};

/// Builds the frozen cue tables an experiment trains against: class
/// embeddings matching the configured representation plus metric size
/// priors straight from the catalog.
inline CueTables make_cue_tables(const Catalog& catalog, const CueConfig& cues, std::uint64_t seed) {
    std::vector<std::string> names;
    std::vector<double> log_sizes;
    for (const ObjectClass& c : catalog.classes) {
        names.push_back(c.name);
        log_sizes.push_back(std::log(std::cbrt(c.mean_dims[0] * c.mean_dims[1] * c.mean_dims[2])));
    }
    CueTables t;
    t.priors = priors_from_catalog(catalog);
    if (cues.sem_repr == SemRepr::random) {
        t.embeddings = make_random_table(names, std::vector<double>(kWordDim, 0.0),
                                         std::vector<double>(kWordDim, 1.0), seed);
    } else {
        t.embeddings = make_language_table(names, log_sizes, seed);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Runner.
// ---------------------------------------------------------------------------

struct SeedOutcome {
    std::uint64_t seed = 0;
    bool ok = false;
    bool skipped = false; // completed earlier; stored metrics were reused
    std::string error;    // populated when !ok
    MetricsReport metrics; // valid when ok
};

struct ExperimentResult {
    std::string name;
    std::filesystem::path dir;
    std::vector<SeedOutcome> outcomes;

    bool all_ok() const {
        return std::all_of(outcomes.begin(), outcomes.end(), [](const SeedOutcome& o) { return o.ok; });
    }
};

/// Parallel seed budget from CUEDEPTH_THREADS; unset means sequential.
inline std::size_t thread_cap() {
    const char* env = std::getenv("CUEDEPTH_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
        throw ConfigError("CUEDEPTH_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return static_cast<std::size_t>(v);
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw PersistenceError("cannot open " + path.string() + " for writing");
    os << text;
    if (!os) throw PersistenceError("failed writing " + path.string());
}

/// Trains and evaluates one seed in its own directory. Never throws; every
/// failure lands in the outcome and in error.txt next to the artifacts.
inline SeedOutcome run_seed(const ExperimentSpec& spec, const NetConfig& base, const TrainingSet& ts,
                            const std::filesystem::path& dir, std::uint64_t seed, bool force) {
    SeedOutcome out;
    out.seed = seed;
    const std::filesystem::path metrics_path = dir / "metrics.json";
    if (!force && std::filesystem::exists(metrics_path)) {
        try {
            std::ifstream in(metrics_path);
            if (!in) throw PersistenceError("cannot open " + metrics_path.string());
            nlohmann::json j;
            in >> j;
            out.metrics = MetricsReport::from_json(j);
            out.ok = true;
            out.skipped = true;
        } catch (const std::exception& e) {
            out.error = "stored metrics unreadable (" + std::string(e.what()) + "); rerun with force";
        }
        return out;
    }
    try {
        std::filesystem::create_directories(dir);
        std::error_code ec;
        std::filesystem::remove(metrics_path, ec); // no stale completion marker during recompute
        std::filesystem::remove(dir / "error.txt", ec);

        NetConfig nc = base;
        nc.train.seed = seed;
        CueModel model = CueModel::make(nc, spec.cues, seed);
        const History history = train(model, ts);

        const SplitIndices split = training_split(nc, ts.examples.size());
        const Tensor pred = predict_set(model, ts, split.val, static_cast<std::size_t>(nc.train.batch));
        const Tensor gt = gather_depths(ts, split.val);
        out.metrics = evaluate(pred, gt);

        save_checkpoint(dir / "model.ckpt", model);
        history.save_csv(dir / "history.csv");
        write_text(dir / "config.json",
                   nlohmann::json({{"net", nc.to_json()}, {"cues", spec.cues.to_json()}, {"seed", seed}})
                           .dump(2) +
                       "\n");
        nlohmann::json jm = out.metrics.to_json();
        jm["seed"] = seed;
        write_text(metrics_path, jm.dump(2) + "\n"); // last write marks the seed complete
        out.ok = true;
    } catch (const std::exception& e) {
        out.error = e.what();
        try {
            std::filesystem::create_directories(dir);
            write_text(dir / "error.txt", std::string(e.what()) + "\n");
        } catch (...) {
        }
    }
    return out;
}

} // namespace detail

/// Runs every seed of one experiment: dataset and cue channels are built
/// once and shared read-only, seeds train independently (in parallel up to
/// CUEDEPTH_THREADS) and persist under <out>/<name>/seed-<seed>/. Completed
/// seeds are skipped unless force; failures are recorded per seed and the
/// remaining seeds still run.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, bool force = false) {
    spec.validate();

    auto [manifest, samples] = resolve_dataset(spec.dataset);
    const CueTables tables = make_cue_tables(manifest.catalog, spec.cues, spec.tables_seed);
    NetConfig base = spec.net;
    base.in_channels = static_cast<int>(channel_count(spec.cues));
    base.validate();
    const TrainingSet ts =
        prepare_training_set(samples, manifest.catalog, spec.cues, tables, spec.label_noise);

    const std::filesystem::path root = std::filesystem::path(spec.out) / spec.name;
    std::filesystem::create_directories(root);
    const std::filesystem::path spec_path = root / "experiment.json";
    const std::string spec_dump = spec.to_json().dump(2) + "\n";
    if (!force && std::filesystem::exists(spec_path)) {
        std::ifstream in(spec_path);
        std::stringstream existing;
        existing << in.rdbuf();
        if (existing.str() != spec_dump) {
            throw ConfigError("run directory " + root.string() +
                              " holds results for a different spec; pass force to overwrite");
        }
    }
    detail::write_text(spec_path, spec_dump);

    ExperimentResult result;
    result.name = spec.name;
    result.dir = root;
    result.outcomes.resize(spec.seeds.size());

    auto run_one = [&](std::size_t i) {
        const std::uint64_t seed = spec.seeds[i];
        result.outcomes[i] =
            detail::run_seed(spec, base, ts, root / ("seed-" + std::to_string(seed)), seed, force);
    };
    const std::size_t workers = std::min<std::size_t>(thread_cap(), spec.seeds.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < spec.seeds.size(); ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < spec.seeds.size(); i = next.fetch_add(1)) {
                    run_one(i);
                }
            });
        }
        for (std::thread& th : pool) th.join();
    }

    nlohmann::json jseeds = nlohmann::json::array();
    for (const SeedOutcome& o : result.outcomes) {
        nlohmann::json row{{"seed", o.seed},
                           {"status", o.ok ? (o.skipped ? "skipped" : "ok") : "failed"}};
        if (!o.ok) row["error"] = o.error;
        jseeds.push_back(row);
    }
    detail::write_text(root / "summary.json",
                       nlohmann::json({{"name", spec.name}, {"cues", spec.cues.summary()}, {"seeds", jseeds}})
                               .dump(2) +
                           "\n");
    return result;
}

} // namespace cuedepth
