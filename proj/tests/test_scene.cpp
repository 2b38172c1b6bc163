#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cuedepth/dataset.hpp"
#include "cuedepth/scene.hpp"

using namespace cuedepth;

namespace {

SceneInstance make_instance(int id, int cls, double w, double h, double z, double cu, double cv,
                            double albedo = 0.3) {
    SceneInstance i;
    i.instance_id = id;
    i.class_id = cls;
    i.width_m = w;
    i.height_m = h;
    i.depth_z = z;
    i.center_u = cu;
    i.center_v = cv;
    i.albedo = albedo;
    return i;
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("projection footprint matches the pinhole model") {
    Camera cam;
    cam.focal_px = 100.0;
    cam.width_px = cam.height_px = 64;
    SceneInstance inst = make_instance(1, 1, 1.0, 1.0, 2.0, 32.0, 32.0);

    auto rect = project(inst, cam);
    REQUIRE(rect.has_value());
    REQUIRE(rect->w_px == 50);
    REQUIRE(rect->h_px == 50);
    REQUIRE(rect->w_analytic == Catch::Approx(50.0));

    inst.depth_z = 4.0;
    auto half = project(inst, cam);
    REQUIRE(half->w_analytic == Catch::Approx(25.0));
    REQUIRE(half->h_analytic == Catch::Approx(25.0));

    // inverting the area relation recovers the depth
    const double z = cam.focal_px * std::sqrt(1.0 * 1.0 / (50.0 * 50.0));
    REQUIRE(z == Catch::Approx(2.0));
}

TEST_CASE("projection clips to the image and reports full misses") {
    Camera cam; // 64x64, f=64
    SceneInstance at_edge = make_instance(1, 1, 1.0, 1.0, 2.0, 0.0, 32.0);
    auto rect = project(at_edge, cam);
    REQUIRE(rect.has_value());
    REQUIRE(rect->u0 == 0);
    REQUIRE(rect->w_px < rect->w_analytic);

    SceneInstance gone = make_instance(2, 1, 1.0, 1.0, 2.0, -100.0, 32.0);
    REQUIRE_FALSE(project(gone, cam).has_value());
}

TEST_CASE("scene sampling presets honor their contracts") {
    Catalog cat = builtin_catalog("household");
    Camera cam;
    SceneConfig cfg;

    SECTION("familiar uses familiar classes only") {
        cfg.preset = Preset::familiar;
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            for (const SceneInstance& i : sample_scene(cat, cam, cfg, seed)) {
                REQUIRE(cat.by_id(i.class_id).familiar);
            }
        }
    }
    SECTION("relative places one class at distinct depths") {
        cfg.preset = Preset::relative;
        cfg.n_min = 2;
        cfg.n_max = 3;
        auto scene = sample_scene(cat, cam, cfg, 7);
        REQUIRE(scene.size() >= 2);
        std::set<int> classes;
        double zmin = 1e9, zmax = -1e9;
        for (const SceneInstance& i : scene) {
            classes.insert(i.class_id);
            zmin = std::min(zmin, i.depth_z);
            zmax = std::max(zmax, i.depth_z);
        }
        REQUIRE(classes.size() == 1);
        REQUIRE(zmax - zmin > 0.1);
    }
    SECTION("absolute uses unfamiliar classes only") {
        cfg.preset = Preset::absolute;
        for (const SceneInstance& i : sample_scene(cat, cam, cfg, 11)) {
            REQUIRE_FALSE(cat.by_id(i.class_id).familiar);
        }
    }
    SECTION("absolute fails loudly without unfamiliar classes") {
        Catalog fam_only;
        fam_only.classes = {cat.classes[0], cat.classes[1]};
        cfg.preset = Preset::absolute;
        REQUIRE_THROWS_AS(sample_scene(fam_only, cam, cfg, 1), GenerationError);
    }
    SECTION("same seed reproduces the scene exactly") {
        cfg.preset = Preset::familiar;
        auto a = sample_scene(cat, cam, cfg, 99);
        auto b = sample_scene(cat, cam, cfg, 99);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i].depth_z == b[i].depth_z);
            REQUIRE(a[i].center_u == b[i].center_u);
            REQUIRE(a[i].width_m == b[i].width_m);
            REQUIRE(a[i].albedo == b[i].albedo);
        }
    }
    SECTION("instance ids are unique and footprints stay inside the image") {
        cfg.preset = Preset::familiar;
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            auto scene = sample_scene(cat, cam, cfg, seed);
            std::set<int> ids;
            for (const SceneInstance& i : scene) {
                REQUIRE(ids.insert(i.instance_id).second);
                auto rect = project(i, cam);
                REQUIRE(rect.has_value());
                // unclipped: the analytic extents fit where they were placed
                REQUIRE(static_cast<double>(rect->w_px) >= std::floor(rect->w_analytic));
                REQUIRE(rect->u0 > 0);
                REQUIRE(rect->u0 + rect->w_px < static_cast<long>(cam.width_px));
                REQUIRE(std::min(rect->w_analytic, rect->h_analytic) >= cfg.min_side_px);
            }
        }
    }
}

TEST_CASE("render z-buffers overlapping instances") {
    Camera cam;
    std::vector<SceneInstance> scene = {
        make_instance(1, 1, 2.0, 2.0, 3.0, 32.0, 32.0, 0.2),  // 42x42 px
        make_instance(2, 2, 0.5, 0.5, 1.0, 36.0, 32.0, 0.8),  // 32x32 px
    };
    Rng rng(0);
    SceneSample s = render(scene, cam, 0.0, rng);

    // the overlap column carries the nearer instance
    REQUIRE(s.depth_map.at({32, 36}) == 1.0);
    REQUIRE(s.instance_map.at({32, 36}) == 2.0);
    REQUIRE(s.semantic_map.at({32, 36}) == 2.0);
    REQUIRE(s.appearance.at({0, 32, 36}) == 0.8);
    // a pixel covered only by the farther instance keeps it
    REQUIRE(s.depth_map.at({32, 14}) == 3.0);
    REQUIRE(s.instance_map.at({32, 14}) == 1.0);
}

TEST_CASE("render depth equals brute-force minimum over covering instances") {
    Camera cam;
    cam.width_px = cam.height_px = 16;
    cam.focal_px = 16.0;
    Rng scene_rng(5);
    std::vector<SceneInstance> scene;
    for (int i = 0; i < 4; ++i) {
        scene.push_back(make_instance(i + 1, 1 + i % 2, scene_rng.uniform(0.5, 3.0),
                                      scene_rng.uniform(0.5, 3.0), scene_rng.uniform(1.0, 9.0),
                                      scene_rng.uniform(0.0, 16.0), scene_rng.uniform(0.0, 16.0)));
    }
    Rng rng(0);
    SceneSample s = render(scene, cam, 0.0, rng);

    for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
            double best = cam.background_depth;
            for (const SceneInstance& i : scene) {
                const double wf = cam.focal_px * i.width_m / i.depth_z;
                const double hf = cam.focal_px * i.height_m / i.depth_z;
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                if (std::abs(px - i.center_u) <= wf / 2.0 && std::abs(py - i.center_v) <= hf / 2.0) {
                    best = std::min(best, i.depth_z);
                }
            }
            REQUIRE(s.depth_map.at({y, x}) == best);
        }
    }
}

TEST_CASE("noiseless single-instance depth histogram has two values") {
    Camera cam;
    std::vector<SceneInstance> scene = {make_instance(1, 1, 1.5, 1.0, 2.5, 30.0, 30.0)};
    Rng rng(0);
    SceneSample s = render(scene, cam, 0.0, rng);
    std::set<double> depths;
    for (std::size_t i = 0; i < s.depth_map.numel(); ++i) depths.insert(s.depth_map[i]);
    REQUIRE(depths == std::set<double>{2.5, cam.background_depth});

    // pixel count equals the projected rectangle area
    auto rect = project(scene[0], cam);
    std::size_t count = 0;
    for (std::size_t i = 0; i < s.instance_map.numel(); ++i)
        if (s.instance_map[i] == 1.0) ++count;
    REQUIRE(count == static_cast<std::size_t>(rect->w_px * rect->h_px));
}

TEST_CASE("semantic and instance maps agree everywhere") {
    Catalog cat = builtin_catalog("household");
    Camera cam;
    SceneConfig cfg;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        SceneSample s = render(sample_scene(cat, cam, cfg, seed), cam, 0.0, rng);
        for (std::size_t i = 0; i < s.instance_map.numel(); ++i) {
            REQUIRE((s.instance_map[i] > 0.0) == (s.semantic_map[i] > 0.0));
        }
        // each instance's pixels carry exactly one class
        for (const SceneInstance& inst : s.scene) {
            std::set<double> classes;
            for (std::size_t i = 0; i < s.instance_map.numel(); ++i)
                if (s.instance_map[i] == inst.instance_id) classes.insert(s.semantic_map[i]);
            REQUIRE(classes == std::set<double>{static_cast<double>(inst.class_id)});
        }
    }
}

TEST_CASE("rendered footprints recover depth through the pinhole relation") {
    Catalog cat = builtin_catalog("household");
    Camera cam;
    SceneConfig cfg;
    cfg.preset = Preset::familiar;
    int checked = 0;
    for (std::uint64_t seed = 100; seed < 180; ++seed) {
        Rng rng(seed);
        SceneSample s = render(sample_scene(cat, cam, cfg, seed), cam, 0.0, rng);
        for (const SceneInstance& inst : s.scene) {
            auto rect = project(inst, cam);
            // the 5% bound is a discretization tolerance; it needs both
            // footprint sides to span at least 20 pixels
            if (std::min(rect->w_px, rect->h_px) < 20) continue;
            std::size_t area = 0;
            for (std::size_t i = 0; i < s.instance_map.numel(); ++i)
                if (s.instance_map[i] == inst.instance_id) ++area;
            const double z_est =
                cam.focal_px * std::sqrt(inst.width_m * inst.height_m / static_cast<double>(area));
            REQUIRE(z_est == Catch::Approx(inst.depth_z).epsilon(0.05));
            ++checked;
        }
    }
    REQUIRE(checked > 25);
}

TEST_CASE("albedo carries no depth information across a dataset") {
    DatasetManifest m;
    m.catalog = builtin_catalog("household");
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.config.noise_sigma = 0.0;
    m.seed = 424242;
    m.count = 800; // albedo is constant per instance, so the effective
                   // sample count is instances, not pixels

    double sa = 0.0, sd = 0.0, saa = 0.0, sdd = 0.0, sad = 0.0;
    std::size_t n = 0;
    double isa = 0.0, isd = 0.0, isaa = 0.0, isdd = 0.0, isad = 0.0;
    std::size_t in = 0;
    for (const SceneSample& s : generate_samples(m)) {
        for (std::size_t i = 0; i < s.depth_map.numel(); ++i) {
            const double a = s.appearance[i]; // albedo plane is first
            const double d = s.depth_map[i];
            sa += a;
            sd += d;
            saa += a * a;
            sdd += d * d;
            sad += a * d;
            ++n;
        }
        for (const SceneInstance& inst : s.scene) {
            isa += inst.albedo;
            isd += inst.depth_z;
            isaa += inst.albedo * inst.albedo;
            isdd += inst.depth_z * inst.depth_z;
            isad += inst.albedo * inst.depth_z;
            ++in;
        }
    }
    auto corr = [](double xsum, double ysum, double xx, double yy, double xy, double count) {
        const double cov = xy / count - (xsum / count) * (ysum / count);
        const double vx = xx / count - (xsum / count) * (xsum / count);
        const double vy = yy / count - (ysum / count) * (ysum / count);
        return cov / std::sqrt(vx * vy);
    };
    REQUIRE(std::abs(corr(sa, sd, saa, sdd, sad, static_cast<double>(n))) < 0.05);
    REQUIRE(std::abs(corr(isa, isd, isaa, isdd, isad, static_cast<double>(in))) < 0.05);
}

TEST_CASE("dataset round-trips and regenerates bitwise") {
    namespace fs = std::filesystem;
    const fs::path base = fs::temp_directory_path() / "cuedepth_test_ds";
    fs::remove_all(base);

    DatasetManifest m;
    m.catalog = builtin_catalog("household");
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.config.noise_sigma = 0.02;
    m.seed = 9001;
    m.count = 4;

    generate_dataset(m, (base / "a").string());
    DatasetManifest loaded = load_manifest((base / "a").string());
    REQUIRE(loaded.count == m.count);
    REQUIRE(loaded.seed == m.seed);
    REQUIRE(loaded.catalog.classes.size() == m.catalog.classes.size());
    generate_dataset(loaded, (base / "b").string());

    for (const auto& entry : fs::directory_iterator(base / "a")) {
        const fs::path other = base / "b" / entry.path().filename();
        REQUIRE(fs::exists(other));
        REQUIRE(read_bytes(entry.path()) == read_bytes(other));
    }

    // loading the rasters matches in-memory generation
    std::vector<SceneSample> from_disk = load_dataset((base / "a").string());
    std::vector<SceneSample> in_memory = generate_samples(m);
    REQUIRE(from_disk.size() == in_memory.size());
    for (std::size_t i = 0; i < from_disk.size(); ++i) {
        for (std::size_t p = 0; p < from_disk[i].depth_map.numel(); ++p) {
            REQUIRE(from_disk[i].depth_map[p] == in_memory[i].depth_map[p]);
            REQUIRE(from_disk[i].semantic_map[p] == in_memory[i].semantic_map[p]);
        }
    }
    fs::remove_all(base);
}

TEST_CASE("empty dataset still writes a valid manifest") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "cuedepth_test_empty";
    fs::remove_all(dir);
    DatasetManifest m;
    m.catalog = builtin_catalog("household");
    m.camera = default_camera();
    m.count = 0;
    m.seed = 1;
    generate_dataset(m, dir.string());
    DatasetManifest back = load_manifest(dir.string());
    REQUIRE(back.count == 0);
    REQUIRE(load_dataset(dir.string()).empty());
    fs::remove_all(dir);
}

TEST_CASE("generation throughput supports large datasets") {
    DatasetManifest m;
    m.catalog = builtin_catalog("household");
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.config.noise_sigma = 0.02;
    m.seed = 5;
    m.count = 1000;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<SceneSample> samples = generate_samples(m);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    REQUIRE(samples.size() == 1000);
    REQUIRE(secs < 10.0);
}
