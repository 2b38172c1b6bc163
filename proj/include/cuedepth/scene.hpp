#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/rng.hpp"
#include "cuedepth/tensor.hpp"

namespace cuedepth {

/// One object category: metric dimensions plus how much individual
/// instances scatter around them.
struct ObjectClass {
    std::string name;
    std::array<double, 3> mean_dims{1.0, 1.0, 1.0}; // width, height, thickness in metres
    double size_sigma = 0.0;                        // log-normal spread of instance scale
    bool familiar = true;                           // a size prior will be published for it
};

/// Ordered class list. Class ids are 1-based positions; 0 is reserved
/// for background in the rendered maps.
struct Catalog {
    std::vector<ObjectClass> classes;

    const ObjectClass& by_id(int class_id) const {
        if (class_id < 1 || static_cast<std::size_t>(class_id) > classes.size()) {
            throw LookupError("catalog has no class id " + std::to_string(class_id));
        }
        return classes[static_cast<std::size_t>(class_id - 1)];
    }
    int id_of(const std::string& name) const {
        for (std::size_t i = 0; i < classes.size(); ++i)
            if (classes[i].name == name) return static_cast<int>(i + 1);
        throw LookupError("catalog has no class named '" + name + "'");
    }
    std::size_t size() const { return classes.size(); }

    void validate() const {
        std::unordered_set<std::string> seen;
        for (const ObjectClass& c : classes) {
            if (c.mean_dims[0] <= 0.0 || c.mean_dims[1] <= 0.0 || c.mean_dims[2] <= 0.0) {
                throw ValidationError("class '" + c.name + "' has non-positive mean dimension");
            }
            if (c.size_sigma < 0.0) throw ValidationError("class '" + c.name + "' has negative size_sigma");
            if (!seen.insert(c.name).second) throw ValidationError("duplicate class name '" + c.name + "'");
        }
    }
};

struct Camera {
    double focal_px = 64.0;
    std::size_t width_px = 64;
    std::size_t height_px = 64;
    double depth_min = 1.0;
    double depth_max = 10.0;
    double background_depth = 10.0;

    void validate() const {
        if (focal_px <= 0.0) throw ValidationError("camera focal_px must be positive");
        if (depth_min <= 0.0 || depth_min >= depth_max) {
            throw ValidationError("camera depth range [" + std::to_string(depth_min) + ", " +
                                  std::to_string(depth_max) + "] is invalid");
        }
        if (background_depth < depth_min || background_depth > depth_max) {
            throw ValidationError("camera background_depth outside depth range");
        }
        if (width_px == 0 || height_px == 0) throw ValidationError("camera extents must be positive");
    }
};

inline Camera default_camera() { return Camera{}; }

/// One placed billboard: a fronto-parallel rectangle at constant depth.
struct SceneInstance {
    int instance_id = 0; // positive, unique within a scene
    int class_id = 0;    // 1-based catalog position
    double width_m = 0.0;
    double height_m = 0.0;
    double depth_z = 0.0;
    double center_u = 0.0; // px
    double center_v = 0.0;
    double albedo = 0.5;
};

/// Integer pixel rectangle after projection and clipping, plus the
/// analytic footprint before either.
struct ProjectedRect {
    long u0 = 0, v0 = 0;   // top-left covered pixel
    long w_px = 0, h_px = 0; // covered pixel counts (clipped)
    double w_analytic = 0.0, h_analytic = 0.0;
};

/// Pinhole projection of an instance. Returns nothing when the
/// footprint misses the image entirely; callers resample.
inline std::optional<ProjectedRect> project(const SceneInstance& inst, const Camera& cam) {
    if (inst.depth_z <= 0.0) throw DomainError("project: instance depth must be positive");
    const double wf = cam.focal_px * inst.width_m / inst.depth_z;
    const double hf = cam.focal_px * inst.height_m / inst.depth_z;
    // pixel (x, y) is covered when its center lies inside the footprint
    const long u0 = static_cast<long>(std::ceil(inst.center_u - wf / 2.0 - 0.5));
    const long u1 = static_cast<long>(std::floor(inst.center_u + wf / 2.0 - 0.5));
    const long v0 = static_cast<long>(std::ceil(inst.center_v - hf / 2.0 - 0.5));
    const long v1 = static_cast<long>(std::floor(inst.center_v + hf / 2.0 - 0.5));
    const long cu0 = std::max(u0, 0L);
    const long cv0 = std::max(v0, 0L);
    const long cu1 = std::min(u1, static_cast<long>(cam.width_px) - 1);
    const long cv1 = std::min(v1, static_cast<long>(cam.height_px) - 1);
    if (cu0 > cu1 || cv0 > cv1) return std::nullopt;
    return ProjectedRect{cu0, cv0, cu1 - cu0 + 1, cv1 - cv0 + 1, wf, hf};
}

enum class Preset { familiar, relative, absolute, ambiguous };

inline std::string preset_name(Preset p) {
    switch (p) {
        case Preset::familiar: return "familiar";
        case Preset::relative: return "relative";
        case Preset::absolute: return "absolute";
        case Preset::ambiguous: return "ambiguous";
    }
    return "?";
}

inline Preset preset_from_name(const std::string& s) {
    if (s == "familiar") return Preset::familiar;
    if (s == "relative") return Preset::relative;
    if (s == "absolute") return Preset::absolute;
    if (s == "ambiguous") return Preset::ambiguous;
    throw ParseError("unknown scene preset '" + s + "'");
}

struct SceneConfig {
    Preset preset = Preset::familiar;
    int n_min = 2;
    int n_max = 4;
    double noise_sigma = 0.0;   // stddev of additive albedo noise
    double min_side_px = 5.0;   // smallest allowed analytic footprint side
};

namespace detail {

// placement margin keeps footprints strictly inside the image and one
// pixel apart, so every instance is fully visible and unoccluded
constexpr double kPlacementMargin = 1.0;

inline bool rects_touch(const ProjectedRect& a, const ProjectedRect& b) {
    return !(a.u0 + a.w_px + 1 <= b.u0 || b.u0 + b.w_px + 1 <= a.u0 ||
             a.v0 + a.h_px + 1 <= b.v0 || b.v0 + b.h_px + 1 <= a.v0);
}

inline double draw_albedo(Rng& rng) {
    // uniform over [0, 0.3) and [0.7, 1.0): mean 0.5 like the
    // background, so albedo carries no depth or class information,
    // while every instance keeps at least 0.2 contrast against it
    const double a = rng.uniform(0.0, 0.6);
    return a < 0.3 ? a : a + 0.4;
}

inline std::vector<int> preset_class_pool(const Catalog& catalog, Preset preset) {
    std::vector<int> pool;
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        const ObjectClass& c = catalog.classes[i];
        const int id = static_cast<int>(i + 1);
        switch (preset) {
            case Preset::familiar:
            case Preset::relative:
                if (c.familiar) pool.push_back(id);
                break;
            case Preset::absolute:
                if (!c.familiar) pool.push_back(id);
                break;
            case Preset::ambiguous:
                pool.push_back(id);
                break;
        }
    }
    return pool;
}

} // namespace detail

/// Draw a list of placed instances for one scene. Deterministic under
/// the seed. Instances are fully inside the image, mutually
/// non-overlapping, and no footprint side falls under min_side_px.
inline std::vector<SceneInstance> sample_scene(const Catalog& catalog, const Camera& cam,
                                               const SceneConfig& cfg, std::uint64_t seed) {
    catalog.validate();
    cam.validate();
    if (catalog.classes.empty()) throw GenerationError("sample_scene: empty catalog");
    if (cfg.n_min < 1 || cfg.n_max < cfg.n_min) {
        throw ConfigError("sample_scene: invalid instance count range");
    }
    std::vector<int> pool = detail::preset_class_pool(catalog, cfg.preset);
    if (pool.empty()) {
        throw GenerationError("sample_scene: preset '" + preset_name(cfg.preset) +
                              "' has no eligible classes in this catalog");
    }
    if (cfg.preset == Preset::ambiguous && pool.size() < 2) {
        throw GenerationError("sample_scene: preset 'ambiguous' needs at least two classes");
    }

    Rng rng(seed);
    const int n = cfg.preset == Preset::relative ? std::max(2, rng.uniform_int(cfg.n_min, cfg.n_max))
                                                 : rng.uniform_int(cfg.n_min, cfg.n_max);
    const int shared_class = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];

    constexpr int kSceneRetries = 64;
    for (int attempt = 0; attempt < kSceneRetries; ++attempt) {
        std::vector<SceneInstance> placed;
        std::vector<ProjectedRect> rects;
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            ok = false;
            for (int tries = 0; tries < 64; ++tries) {
                SceneInstance inst;
                inst.instance_id = i + 1;
                inst.class_id = cfg.preset == Preset::relative
                                    ? shared_class
                                    : pool[static_cast<std::size_t>(
                                          rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
                const ObjectClass& cls = catalog.by_id(inst.class_id);
                const double scale = std::exp(rng.normal(0.0, cls.size_sigma));
                inst.width_m = cls.mean_dims[0] * scale;
                inst.height_m = cls.mean_dims[1] * scale;

                // feasible depth window: near enough for min_side_px,
                // far enough that the footprint fits inside the image
                const double m = detail::kPlacementMargin;
                const double z_fit_w = cam.focal_px * inst.width_m / (static_cast<double>(cam.width_px) - 2.0 * m);
                const double z_fit_h = cam.focal_px * inst.height_m / (static_cast<double>(cam.height_px) - 2.0 * m);
                const double z_near = std::max({cam.depth_min, z_fit_w, z_fit_h});
                const double z_far = std::min(cam.background_depth,
                                              cam.focal_px * std::min(inst.width_m, inst.height_m) / cfg.min_side_px);
                if (z_near >= z_far) continue;
                inst.depth_z = rng.log_uniform(z_near, z_far);

                const double wf = cam.focal_px * inst.width_m / inst.depth_z;
                const double hf = cam.focal_px * inst.height_m / inst.depth_z;
                inst.center_u = rng.uniform(wf / 2.0 + m, static_cast<double>(cam.width_px) - wf / 2.0 - m);
                inst.center_v = rng.uniform(hf / 2.0 + m, static_cast<double>(cam.height_px) - hf / 2.0 - m);
                inst.albedo = detail::draw_albedo(rng);

                std::optional<ProjectedRect> rect = project(inst, cam);
                if (!rect) continue;
                bool clash = false;
                for (const ProjectedRect& r : rects)
                    if (detail::rects_touch(*rect, r)) clash = true;
                if (clash) continue;

                placed.push_back(inst);
                rects.push_back(*rect);
                ok = true;
                break;
            }
        }
        if (!ok) continue;
        if (cfg.preset == Preset::relative) {
            double zmin = placed[0].depth_z, zmax = placed[0].depth_z;
            for (const SceneInstance& p : placed) {
                zmin = std::min(zmin, p.depth_z);
                zmax = std::max(zmax, p.depth_z);
            }
            if (zmax - zmin <= 0.1) continue;
        }
        return placed;
    }
    throw GenerationError("sample_scene: could not place instances for preset '" +
                          preset_name(cfg.preset) + "' after bounded retries");
}

/// Rendered scene: appearance channels, label rasters, ground truth.
struct SceneSample {
    Tensor appearance;   // [3, H, W]: albedo, u/width, v/height
    Tensor semantic_map; // [H, W], class id, 0 background
    Tensor instance_map; // [H, W], instance id, 0 background
    Tensor depth_map;    // [H, W], metres
    std::vector<SceneInstance> scene;
    Camera camera;
};

/// Z-buffered rasterization of the instance list.
inline SceneSample render(const std::vector<SceneInstance>& instances, const Camera& cam,
                          double noise_sigma, Rng& noise_rng) {
    cam.validate();
    const std::size_t H = cam.height_px, W = cam.width_px;
    SceneSample s;
    s.camera = cam;
    s.scene = instances;
    s.appearance = Tensor({3, H, W});
    s.semantic_map = Tensor::zeros({H, W});
    s.instance_map = Tensor::zeros({H, W});
    s.depth_map = Tensor::full({H, W}, cam.background_depth);

    double* albedo = s.appearance.data();
    for (std::size_t i = 0; i < H * W; ++i) albedo[i] = 0.5;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            s.appearance.at({1, y, x}) = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
            s.appearance.at({2, y, x}) = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
        }

    for (const SceneInstance& inst : instances) {
        if (inst.depth_z < cam.depth_min || inst.depth_z > cam.background_depth) {
            throw ValidationError("render: instance " + std::to_string(inst.instance_id) +
                                  " depth outside [depth_min, background_depth]");
        }
        std::optional<ProjectedRect> rect = project(inst, cam);
        if (!rect) continue;
        for (long y = rect->v0; y < rect->v0 + rect->h_px; ++y) {
            for (long x = rect->u0; x < rect->u0 + rect->w_px; ++x) {
                const std::size_t yy = static_cast<std::size_t>(y), xx = static_cast<std::size_t>(x);
                if (inst.depth_z < s.depth_map.at({yy, xx})) {
                    s.depth_map.at({yy, xx}) = inst.depth_z;
                    s.semantic_map.at({yy, xx}) = static_cast<double>(inst.class_id);
                    s.instance_map.at({yy, xx}) = static_cast<double>(inst.instance_id);
                    s.appearance.at({0, yy, xx}) = inst.albedo;
                }
            }
        }
    }

    if (noise_sigma > 0.0) {
        for (std::size_t i = 0; i < H * W; ++i) {
            albedo[i] = std::clamp(albedo[i] + noise_rng.normal(0.0, noise_sigma), 0.0, 1.0);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Built-in catalogs for the scene presets.
// ---------------------------------------------------------------------------

/// Six size-diverse household classes, all with published priors, plus
/// three priorless ones for the `absolute` preset.
inline Catalog builtin_catalog(const std::string& name) {
    Catalog cat;
    if (name == "household") {
        cat.classes = {
            {"stool", {0.45, 0.55, 0.45}, 0.12, true},
            {"crate", {0.75, 0.65, 0.75}, 0.12, true},
            {"cabinet", {1.05, 1.55, 0.55}, 0.12, true},
            {"door", {0.95, 2.05, 0.05}, 0.12, true},
            {"bookshelf", {1.35, 1.95, 0.35}, 0.12, true},
            {"wardrobe", {1.85, 2.15, 0.65}, 0.12, true},
            {"gizmo", {0.55, 0.75, 0.45}, 0.12, false},
            {"contraption", {1.15, 0.95, 0.85}, 0.12, false},
            {"apparatus", {1.65, 1.45, 1.05}, 0.12, false},
        };
    } else if (name == "ambiguous-pair") {
        // two classes with identical appearance statistics and size
        // scatter, distinguished only by their metric dimensions
        cat.classes = {
            {"boxlet", {0.2, 0.2, 0.2}, 0.0, true},
            {"bincube", {0.8, 0.8, 0.8}, 0.0, true},
        };
    } else {
        throw LookupError("no builtin catalog named '" + name + "'");
    }
    return cat;
}

} // namespace cuedepth
