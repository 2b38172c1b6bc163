#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/rng.hpp"
#include "cuedepth/scene.hpp"
#include "cuedepth/serialize.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

/// Everything needed to regenerate a dataset bit for bit.
struct DatasetManifest {
    Catalog catalog;
    Camera camera;
    SceneConfig config;
    std::uint64_t seed = 0;
    std::size_t count = 0;

    nlohmann::json to_json() const {
        nlohmann::json jcat = nlohmann::json::array();
        for (const ObjectClass& c : catalog.classes) {
            jcat.push_back({{"name", c.name},
                            {"mean_dims", {c.mean_dims[0], c.mean_dims[1], c.mean_dims[2]}},
                            {"size_sigma", c.size_sigma},
                            {"familiar", c.familiar}});
        }
        return {{"catalog", jcat},
                {"camera",
                 {{"focal_px", camera.focal_px},
                  {"width_px", camera.width_px},
                  {"height_px", camera.height_px},
                  {"depth_min", camera.depth_min},
                  {"depth_max", camera.depth_max},
                  {"background_depth", camera.background_depth}}},
                {"preset", preset_name(config.preset)},
                {"n_instances", {config.n_min, config.n_max}},
                {"noise_sigma", config.noise_sigma},
                {"min_side_px", config.min_side_px},
                {"seed", seed},
                {"count", count}};
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        try {
            for (const auto& jc : j.at("catalog")) {
                ObjectClass c;
                c.name = jc.at("name");
                c.mean_dims = {jc.at("mean_dims").at(0), jc.at("mean_dims").at(1), jc.at("mean_dims").at(2)};
                c.size_sigma = jc.at("size_sigma");
                c.familiar = jc.at("familiar");
                m.catalog.classes.push_back(c);
            }
            const auto& jc = j.at("camera");
            m.camera.focal_px = jc.at("focal_px");
            m.camera.width_px = jc.at("width_px");
            m.camera.height_px = jc.at("height_px");
            m.camera.depth_min = jc.at("depth_min");
            m.camera.depth_max = jc.at("depth_max");
            m.camera.background_depth = jc.at("background_depth");
            m.config.preset = preset_from_name(j.at("preset"));
            m.config.n_min = j.at("n_instances").at(0);
            m.config.n_max = j.at("n_instances").at(1);
            m.config.noise_sigma = j.at("noise_sigma");
            m.config.min_side_px = j.at("min_side_px");
            m.seed = j.at("seed");
            m.count = j.at("count");
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("dataset manifest: ") + e.what());
        }
        m.catalog.validate();
        m.camera.validate();
        return m;
    }
};

namespace detail {

// per-sample master seed; streams 0 and 1 feed placement and noise
inline std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index) {
    return Rng::sub_seed(dataset_seed, index);
}

inline std::string sample_stem(std::size_t index) {
    std::ostringstream os;
    os << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

} // namespace detail

/// Generate one sample of a dataset; any index can be produced
/// independently, so generation order never matters.
inline SceneSample generate_sample(const DatasetManifest& m, std::size_t index) {
    const std::uint64_t s = detail::sample_seed(m.seed, index);
    std::vector<SceneInstance> instances =
        sample_scene(m.catalog, m.camera, m.config, Rng::sub_seed(s, 0, 0));
    Rng noise_rng(Rng::sub_seed(s, 0, 1));
    return render(instances, m.camera, m.config.noise_sigma, noise_rng);
}

inline std::vector<SceneSample> generate_samples(const DatasetManifest& m) {
    std::vector<SceneSample> out;
    out.reserve(m.count);
    for (std::size_t i = 0; i < m.count; ++i) out.push_back(generate_sample(m, i));
    return out;
}

/// Write a dataset directory: manifest.json plus per-sample tensors.
inline void generate_dataset(const DatasetManifest& m, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw PersistenceError("cannot create dataset directory " + out_dir + ": " + ec.message());

    {
        std::ofstream f(fs::path(out_dir) / "manifest.json");
        if (!f) throw PersistenceError("cannot write manifest in " + out_dir);
        f << m.to_json().dump(2) << '\n';
    }
    for (std::size_t i = 0; i < m.count; ++i) {
        const SceneSample s = generate_sample(m, i);
        const std::string stem = (fs::path(out_dir) / detail::sample_stem(i)).string();
        save_tensor(stem + ".app.cdt", s.appearance);
        save_tensor(stem + ".sem.cdt", s.semantic_map);
        save_tensor(stem + ".inst.cdt", s.instance_map);
        save_tensor(stem + ".depth.cdt", s.depth_map);
    }
}

inline DatasetManifest load_manifest(const std::string& dir_or_file) {
    namespace fs = std::filesystem;
    fs::path p(dir_or_file);
    if (fs::is_directory(p)) p /= "manifest.json";
    std::ifstream f(p);
    if (!f) throw PersistenceError("cannot open dataset manifest " + p.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("dataset manifest " + p.string() + ": " + e.what());
    }
    return DatasetManifest::from_json(j);
}

/// Load a dataset directory back into memory. The instance lists are
/// not persisted, so `scene` stays empty; cue construction works from
/// the rasters alone.
inline std::vector<SceneSample> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const DatasetManifest m = load_manifest(dir);
    std::vector<SceneSample> out;
    out.reserve(m.count);
    for (std::size_t i = 0; i < m.count; ++i) {
        const std::string stem = (fs::path(dir) / detail::sample_stem(i)).string();
        SceneSample s;
        s.camera = m.camera;
        s.appearance = load_tensor(stem + ".app.cdt");
        s.semantic_map = load_tensor(stem + ".sem.cdt");
        s.instance_map = load_tensor(stem + ".inst.cdt");
        s.depth_map = load_tensor(stem + ".depth.cdt");
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace cuedepth
