#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "cuedepth/cues.hpp"
#include "cuedepth/dataset.hpp"

using namespace cuedepth;

namespace {

std::string small_table_text() {
    std::ostringstream os;
    os << "chair";
    for (int d = 0; d < 25; ++d) os << ' ' << 0.1 * (d + 1);
    os << "\ntable";
    for (int d = 0; d < 25; ++d) os << ' ' << -0.2 * (d + 1);
    os << '\n';
    return os.str();
}

EmbeddingTable toy_table(const std::vector<std::string>& names, std::uint64_t seed) {
    Rng rng(seed);
    EmbeddingTable t;
    for (const std::string& n : names) {
        std::vector<double> v(25);
        for (double& x : v) x = rng.normal();
        t.entries[n] = v;
    }
    t.recompute_stats();
    return t;
}

SceneSample two_instance_sample() {
    Camera cam = default_camera();
    // same class, same metric size, different depths -> different areas
    std::vector<SceneInstance> insts = {
        {1, 1, 0.5, 0.5, 2.0, 16.0, 16.0, 0.3},
        {2, 1, 0.5, 0.5, 4.0, 48.0, 48.0, 0.7},
    };
    Rng noise(0);
    return render(insts, cam, 0.0, noise);
}

} // namespace

// ---------------------------------------------------------------------------
// Embedding tables.
// ---------------------------------------------------------------------------

TEST_CASE("embedding loader parses the token-plus-floats format") {
    std::istringstream in(small_table_text());
    EmbeddingLoadResult r = load_embedding_table(in);
    REQUIRE(r.table.entries.size() == 2);
    REQUIRE(r.duplicates == 0);
    REQUIRE(r.table.entries.at("chair")[0] == Catch::Approx(0.1));
    REQUIRE(r.table.entries.at("chair")[24] == Catch::Approx(2.5));
    REQUIRE(r.table.stats_defined);
    for (int d = 0; d < 25; ++d) {
        const double v = 0.1 * (d + 1), w = -0.2 * (d + 1);
        REQUIRE(r.table.mean[static_cast<std::size_t>(d)] == Catch::Approx((v + w) / 2.0).margin(1e-12));
    }
    r.table.validate();
}

TEST_CASE("embedding loader flags an empty stream") {
    std::istringstream in("");
    EmbeddingLoadResult r = load_embedding_table(in);
    REQUIRE(r.table.entries.empty());
    REQUIRE_FALSE(r.table.stats_defined);
}

TEST_CASE("embedding loader keeps the last duplicate and counts it") {
    std::ostringstream os;
    os << "dup";
    for (int d = 0; d < 25; ++d) os << " 1.0";
    os << "\ndup";
    for (int d = 0; d < 25; ++d) os << " 2.0";
    os << '\n';
    std::istringstream in(os.str());
    EmbeddingLoadResult r = load_embedding_table(in);
    REQUIRE(r.duplicates == 1);
    REQUIRE(r.table.entries.at("dup")[0] == 2.0);
}

TEST_CASE("embedding loader reports bad lines by number") {
    std::ostringstream os;
    os << "ok";
    for (int d = 0; d < 25; ++d) os << " 0.5";
    os << "\nbad 1.0 2.0 oops";
    for (int d = 0; d < 22; ++d) os << " 3.0";
    os << '\n';
    std::istringstream in(os.str());
    REQUIRE_THROWS_WITH(load_embedding_table(in), Catch::Matchers::ContainsSubstring("line 2"));

    std::ostringstream os2;
    os2 << "short 1.0 2.0 3.0\n";
    std::istringstream in2(os2.str());
    REQUIRE_THROWS_AS(load_embedding_table(in2), FormatError);
}

TEST_CASE("embedding table text round trip preserves vectors and stats") {
    EmbeddingTable t = toy_table({"alpha", "beta", "gamma"}, 5);
    std::ostringstream os;
    save_embedding_table(t, os);
    std::istringstream in(os.str());
    EmbeddingLoadResult r = load_embedding_table(in);
    REQUIRE(r.table.entries == t.entries);
    for (int d = 0; d < 25; ++d) {
        const std::size_t i = static_cast<std::size_t>(d);
        REQUIRE(std::abs(r.table.mean[i] - t.mean[i]) <= 1e-9);
        REQUIRE(std::abs(r.table.stddev[i] - t.stddev[i]) <= 1e-9);
    }
}

TEST_CASE("class names embed by lookup, token mean, or zero fallback") {
    std::istringstream in(small_table_text());
    EmbeddingTable t = load_embedding_table(in).table;

    ClassEmbedding single = embed_class_name(t, "chair");
    REQUIRE_FALSE(single.oov);
    REQUIRE(single.vec == t.entries.at("chair"));

    ClassEmbedding pair = embed_class_name(t, "coffee table");
    REQUIRE_FALSE(pair.oov);
    // "coffee" is unknown, so the mean is over the found token alone
    REQUIRE(pair.vec == t.entries.at("table"));

    ClassEmbedding both = embed_class_name(t, "chair_table");
    for (int d = 0; d < 25; ++d) {
        const std::size_t i = static_cast<std::size_t>(d);
        REQUIRE(both.vec[i] ==
                Catch::Approx((t.entries.at("chair")[i] + t.entries.at("table")[i]) / 2.0).margin(1e-12));
    }

    ClassEmbedding miss = embed_class_name(t, "zzqx");
    REQUIRE(miss.oov);
    REQUIRE(std::all_of(miss.vec.begin(), miss.vec.end(), [](double v) { return v == 0.0; }));

    REQUIRE_THROWS_AS(embed_class_name(t, ""), DomainError);
}

TEST_CASE("random tables are seed-stable, order-independent, and match target stats") {
    std::vector<double> mean(25), stddev(25);
    for (int d = 0; d < 25; ++d) {
        mean[static_cast<std::size_t>(d)] = 0.1 * d - 1.0;
        stddev[static_cast<std::size_t>(d)] = 0.5 + 0.02 * d;
    }
    EmbeddingTable a = make_random_table({"x", "y", "z"}, mean, stddev, 42);
    EmbeddingTable b = make_random_table({"z", "x", "y"}, mean, stddev, 42);
    REQUIRE(a.entries == b.entries);
    EmbeddingTable c = make_random_table({"x", "y", "z"}, mean, stddev, 43);
    REQUIRE(a.entries.at("x") != c.entries.at("x"));

    std::vector<std::string> many;
    for (int i = 0; i < 10000; ++i) many.push_back("class" + std::to_string(i));
    EmbeddingTable big = make_random_table(many, mean, stddev, 7);
    for (int d = 0; d < 25; ++d) {
        const std::size_t i = static_cast<std::size_t>(d);
        REQUIRE(std::abs(big.mean[i] - mean[i]) < 3.0 * stddev[i] / 100.0);
    }

    EmbeddingTable flat = make_random_table({"p", "q"}, mean, std::vector<double>(25, 0.0), 1);
    REQUIRE(flat.entries.at("p") == mean);
    REQUIRE(flat.entries.at("q") == mean);
}

TEST_CASE("synthetic language vectors get closer as log sizes do") {
    std::vector<std::string> names;
    std::vector<double> logs;
    Rng rng(31);
    for (int i = 0; i < 40; ++i) {
        names.push_back("c" + std::to_string(i));
        logs.push_back(rng.uniform(-1.5, 1.5));
    }
    EmbeddingTable t = make_language_table(names, logs, 99);
    EmbeddingTable t2 = make_language_table(names, logs, 99);
    REQUIRE(t.entries == t2.entries);

    // rank correlation proxy: mean vector distance for near pairs must
    // undercut the mean for far pairs
    double near_sum = 0.0, far_sum = 0.0;
    int near_n = 0, far_n = 0;
    for (std::size_t i = 0; i < names.size(); ++i)
        for (std::size_t j = i + 1; j < names.size(); ++j) {
            const std::vector<double>& u = t.entries.at(names[i]);
            const std::vector<double>& v = t.entries.at(names[j]);
            double d2 = 0.0;
            for (int d = 0; d < 25; ++d) {
                const double diff = u[static_cast<std::size_t>(d)] - v[static_cast<std::size_t>(d)];
                d2 += diff * diff;
            }
            const double gap = std::abs(logs[i] - logs[j]);
            if (gap < 0.3) {
                near_sum += std::sqrt(d2);
                ++near_n;
            } else if (gap > 1.2) {
                far_sum += std::sqrt(d2);
                ++far_n;
            }
        }
    REQUIRE(near_n > 10);
    REQUIRE(far_n > 10);
    REQUIRE(near_sum / near_n < 0.75 * (far_sum / far_n));
}

// ---------------------------------------------------------------------------
// Size priors.
// ---------------------------------------------------------------------------

TEST_CASE("size prior csv round trips and rejects malformed input") {
    SizePriorTable t;
    t.entries["chair"] = {0.5, 0.9, 0.5};
    t.entries["door"] = {0.95, 2.05, 0.05};
    std::ostringstream os;
    save_size_priors(t, os);
    std::istringstream in(os.str());
    SizePriorTable back = load_size_priors(in);
    REQUIRE(back.entries == t.entries);

    std::istringstream bad_header("name,w,h,d\nchair,1,1,1\n");
    REQUIRE_THROWS_AS(load_size_priors(bad_header), FormatError);

    std::istringstream short_row("class,width_m,height_m,depth_m\nchair,1.0,2.0\n");
    REQUIRE_THROWS_WITH(load_size_priors(short_row), Catch::Matchers::ContainsSubstring("line 2"));

    std::istringstream neg("class,width_m,height_m,depth_m\nchair,1.0,-2.0,1.0\n");
    REQUIRE_THROWS_AS(load_size_priors(neg), ValidationError);

    std::istringstream junk("class,width_m,height_m,depth_m\nchair,1.0,abc,1.0\n");
    REQUIRE_THROWS_AS(load_size_priors(junk), ParseError);

    REQUIRE_THROWS_AS(t.at("unknown"), LookupError);
}

TEST_CASE("catalog publishes priors for familiar classes only") {
    Catalog cat = builtin_catalog("household");
    SizePriorTable t = priors_from_catalog(cat);
    for (const ObjectClass& c : cat.classes) {
        REQUIRE(t.has(c.name) == c.familiar);
        if (c.familiar) REQUIRE(t.at(c.name) == c.mean_dims);
    }
}

// ---------------------------------------------------------------------------
// Size embedder.
// ---------------------------------------------------------------------------

TEST_CASE("size embedder emits ten channels and matches its graph forward") {
    SizeEmbedder area = SizeEmbedder::make(1, 3);
    SizeEmbedder dims = SizeEmbedder::make(3, 4);
    REQUIRE(area.out_ch == 10);
    REQUIRE(dims.out_ch == 10);

    Rng rng(8);
    Tensor cols = Tensor::uniform({1, 3, 1, 7}, rng, -2.0, 2.0);
    Graph g;
    SizeEmbedderVars vars{g.leaf(dims.w1, true), g.leaf(dims.b1, true), g.leaf(dims.w2, true),
                          g.leaf(dims.b2, true)};
    Var out = size_embedder_forward(vars, g.leaf(cols));
    REQUIRE(out.shape() == Shape{10, 7});

    Tensor flat({3, 7});
    for (std::size_t i = 0; i < flat.numel(); ++i) flat[i] = cols[i];
    Tensor plain = dims.apply_columns(flat);
    for (std::size_t i = 0; i < plain.numel(); ++i) {
        REQUIRE(out.value()[i] == Catch::Approx(plain[i]).margin(1e-12));
    }
}

// ---------------------------------------------------------------------------
// Config and layout.
// ---------------------------------------------------------------------------

TEST_CASE("cue config invariants reject dangling cues") {
    CueConfig c;
    c.sem2 = true;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = CueConfig{};
    c.area = AreaMode::mask;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = CueConfig{};
    c.size = true;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = CueConfig{};
    c.sem1 = true;
    c.sem2 = true;
    c.sem_repr = SemRepr::raw;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    CueConfig ok;
    ok.sem1 = true;
    ok.sem2 = true;
    ok.area = AreaMode::bbox;
    ok.size = true;
    REQUIRE_NOTHROW(ok.validate());
    CueConfig back = CueConfig::from_json(ok.to_json());
    REQUIRE(back.summary() == ok.summary());
}

TEST_CASE("channel counts follow the enabled blocks") {
    CueConfig baseline;
    REQUIRE(channel_count(baseline) == 3);
    REQUIRE(baseline.summary() == "baseline");

    CueConfig sem1;
    sem1.sem1 = true;
    REQUIRE(channel_count(sem1) == 28);

    CueConfig raw = sem1;
    raw.sem_repr = SemRepr::raw;
    REQUIRE(channel_count(raw) == 4);

    CueConfig full;
    full.sem1 = full.sem2 = full.size = true;
    full.area = AreaMode::mask;
    REQUIRE(channel_count(full) == 73);
    REQUIRE(full.summary() == "sem1(language)+sem2+area(M)+size");

    const CueLayout layout = make_cue_layout(full);
    std::size_t sum = 0;
    for (const CueBlock& b : layout.blocks) {
        REQUIRE(b.offset == sum);
        sum += b.width;
    }
    REQUIRE(sum == layout.channels());

    CueLayout round = CueLayout::from_json(layout.to_json());
    REQUIRE(round.channels() == 73);
    REQUIRE(round.find("area") != nullptr);
    REQUIRE(round.find("area")->offset == layout.find("area")->offset);
}

// ---------------------------------------------------------------------------
// Instance area.
// ---------------------------------------------------------------------------

TEST_CASE("instance area covers mask, bbox, and failure modes") {
    Tensor map = Tensor::zeros({200, 200});
    for (std::size_t y = 10; y < 60; ++y)
        for (std::size_t x = 20; x < 70; ++x) map.at({y, x}) = 1.0;
    REQUIRE(instance_area(map, 1, AreaMode::mask) == Catch::Approx(0.0625).margin(1e-15));
    REQUIRE(instance_area(map, 1, AreaMode::bbox) == Catch::Approx(0.0625).margin(1e-15));

    // carve a notch: mask shrinks, bbox holds
    for (std::size_t y = 10; y < 30; ++y)
        for (std::size_t x = 20; x < 40; ++x) map.at({y, x}) = 2.0;
    REQUIRE(instance_area(map, 1, AreaMode::bbox) == Catch::Approx(0.0625).margin(1e-15));
    REQUIRE(instance_area(map, 1, AreaMode::mask) < instance_area(map, 1, AreaMode::bbox));

    Tensor full = Tensor::full({8, 8}, 3.0);
    REQUIRE(instance_area(full, 3, AreaMode::mask) == 1.0);
    REQUIRE(instance_area(full, 3, AreaMode::bbox) == 1.0);

    REQUIRE_THROWS_AS(instance_area(map, 99, AreaMode::mask), LookupError);
    REQUIRE_THROWS_AS(instance_area(map, 1, AreaMode::off), ConfigError);
}

TEST_CASE("bbox area is at least mask area on generated scenes") {
    DatasetManifest m;
    m.catalog = builtin_catalog("household");
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.seed = 404;
    m.count = 24;
    for (std::size_t i = 0; i < m.count; ++i) {
        SceneSample s = generate_sample(m, i);
        for (const SceneInstance& inst : s.scene) {
            const double mask = instance_area(s.instance_map, inst.instance_id, AreaMode::mask);
            const double bbox = instance_area(s.instance_map, inst.instance_id, AreaMode::bbox);
            REQUIRE(bbox >= mask);
            REQUIRE(mask > 0.0);
            REQUIRE(bbox <= 1.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Cue map assembly.
// ---------------------------------------------------------------------------

namespace {

struct CueRig {
    Catalog catalog = builtin_catalog("household");
    CueTables tables;
    SizeEmbedder area_embedder = SizeEmbedder::make(1, 11);
    SizeEmbedder dims_embedder = SizeEmbedder::make(3, 12);

    CueRig() {
        std::vector<std::string> names;
        std::vector<double> logs;
        for (const ObjectClass& c : catalog.classes) {
            names.push_back(c.name);
            logs.push_back(std::log(std::cbrt(c.mean_dims[0] * c.mean_dims[1] * c.mean_dims[2])));
        }
        tables.embeddings = make_language_table(names, logs, 77);
        tables.priors = priors_from_catalog(catalog);
    }
};

} // namespace

TEST_CASE("all-off config reproduces the appearance channels alone") {
    CueRig rig;
    SceneSample s = two_instance_sample();
    CueMap cm = build_cue_map(s, rig.catalog, CueConfig{}, rig.tables, rig.area_embedder, rig.dims_embedder);
    REQUIRE(cm.channels.shape() == Shape{3, 64, 64});
    for (std::size_t i = 0; i < s.appearance.numel(); ++i) REQUIRE(cm.channels[i] == s.appearance[i]);
}

TEST_CASE("raw repr exposes the class id as one float channel") {
    CueRig rig;
    SceneSample s = two_instance_sample();
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.sem_repr = SemRepr::raw;
    CueMap cm = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);
    REQUIRE(cm.channels.extent(0) == 4);
    const std::size_t HW = 64 * 64;
    for (std::size_t i = 0; i < HW; ++i) REQUIRE(cm.channels[3 * HW + i] == s.semantic_map[i]);
}

TEST_CASE("same class twice: shared sem and size blocks, distinct area blocks") {
    CueRig rig;
    SceneSample s = two_instance_sample();
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.area = AreaMode::mask;
    cfg.size = true;
    CueMap cm = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);
    const CueLayout& L = cm.layout;
    const std::size_t HW = 64 * 64;

    // probe one interior pixel per instance
    auto pixel_of = [&](int iid) -> std::size_t {
        for (std::size_t i = 0; i < HW; ++i)
            if (static_cast<int>(s.instance_map[i]) == iid) return i;
        FAIL("instance not rendered");
        return 0;
    };
    const std::size_t p1 = pixel_of(1), p2 = pixel_of(2);

    const CueBlock* sem = L.find("sem1");
    const CueBlock* area = L.find("area");
    const CueBlock* size = L.find("size");
    REQUIRE(sem != nullptr);
    REQUIRE(area != nullptr);
    REQUIRE(size != nullptr);

    bool area_differs = false;
    for (std::size_t c = 0; c < 25; ++c) {
        REQUIRE(cm.channels[(sem->offset + c) * HW + p1] == cm.channels[(sem->offset + c) * HW + p2]);
    }
    for (std::size_t c = 0; c < 10; ++c) {
        REQUIRE(cm.channels[(size->offset + c) * HW + p1] == cm.channels[(size->offset + c) * HW + p2]);
        if (cm.channels[(area->offset + c) * HW + p1] != cm.channels[(area->offset + c) * HW + p2])
            area_differs = true;
    }
    REQUIRE(area_differs);

    // background pixels carry zero cue vectors
    std::size_t bg = 0;
    while (static_cast<int>(s.instance_map[bg]) != 0) ++bg;
    for (std::size_t c = 3; c < cm.channels.extent(0); ++c) REQUIRE(cm.channels[c * HW + bg] == 0.0);
}

TEST_CASE("cue values are functions of class and instance identity") {
    CueRig rig;
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.sem2 = true;
    cfg.area = AreaMode::mask;
    cfg.size = true;

    DatasetManifest m;
    m.catalog = rig.catalog;
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.seed = 2024;
    m.count = 6;
    for (std::size_t i = 0; i < m.count; ++i) {
        SceneSample s = generate_sample(m, i);
        CueMap cm = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder,
                                  CueNoise{0.15, 900 + i});
        const std::size_t C = cm.channels.extent(0), HW = 64 * 64;

        // first pixel seen for each class / instance is the reference
        std::map<int, std::size_t> class_ref, inst_ref;
        for (std::size_t p = 0; p < HW; ++p) {
            const int cid = static_cast<int>(s.semantic_map[p]);
            const int iid = static_cast<int>(s.instance_map[p]);
            if (cid > 0) {
                auto [it, fresh] = class_ref.emplace(cid, p);
                if (!fresh) {
                    for (const char* name : {"sem1", "sem2", "size"}) {
                        const CueBlock* b = cm.layout.find(name);
                        for (std::size_t c = b->offset; c < b->offset + b->width; ++c)
                            REQUIRE(cm.channels[c * HW + p] == cm.channels[c * HW + it->second]);
                    }
                }
            }
            if (iid > 0) {
                auto [it, fresh] = inst_ref.emplace(iid, p);
                if (!fresh) {
                    const CueBlock* b = cm.layout.find("area");
                    for (std::size_t c = b->offset; c < b->offset + b->width; ++c)
                        REQUIRE(cm.channels[c * HW + p] == cm.channels[c * HW + it->second]);
                }
            } else {
                for (std::size_t c = 3; c < C; ++c) REQUIRE(cm.channels[c * HW + p] == 0.0);
            }
        }
    }
}

TEST_CASE("cue maps are deterministic and relabeling-equivariant") {
    CueRig rig;
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.area = AreaMode::bbox;
    cfg.size = true;
    SceneSample s = two_instance_sample();

    CueMap a = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);
    CueMap b = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);
    for (std::size_t i = 0; i < a.channels.numel(); ++i) REQUIRE(a.channels[i] == b.channels[i]);

    // swap instance ids 1 <-> 2 everywhere; pixels keep their cue values
    SceneSample swapped = s;
    for (std::size_t i = 0; i < swapped.instance_map.numel(); ++i) {
        const int id = static_cast<int>(swapped.instance_map[i]);
        if (id == 1) swapped.instance_map[i] = 2.0;
        else if (id == 2) swapped.instance_map[i] = 1.0;
    }
    for (SceneInstance& inst : swapped.scene) inst.instance_id = inst.instance_id == 1 ? 2 : 1;
    CueMap c = build_cue_map(swapped, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);
    for (std::size_t i = 0; i < a.channels.numel(); ++i) REQUIRE(a.channels[i] == c.channels[i]);
}

TEST_CASE("second label map flips classes consistently") {
    CueRig rig;
    SceneSample s = two_instance_sample();
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.sem2 = true;

    // zero flip probability: sem2 equals sem1
    CueMap clean = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder,
                                 CueNoise{0.0, 5});
    const std::size_t HW = 64 * 64;
    const CueBlock* s1 = clean.layout.find("sem1");
    const CueBlock* s2 = clean.layout.find("sem2");
    for (std::size_t c = 0; c < 25; ++c)
        for (std::size_t p = 0; p < HW; ++p)
            REQUIRE(clean.channels[(s1->offset + c) * HW + p] == clean.channels[(s2->offset + c) * HW + p]);

    // certain flip: class 1 reports as some other class, consistently
    CueMap noisy = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder,
                                 CueNoise{1.0, 5});
    const std::vector<int> relabel = sem2_relabeling(rig.catalog.size(), 1.0, 5);
    REQUIRE(relabel[1] != 1);
    const std::vector<double>& expect =
        rig.tables.embeddings.entries.at(rig.catalog.by_id(relabel[1]).name);
    std::size_t probe = 0;
    while (static_cast<int>(s.semantic_map[probe]) != 1) ++probe;
    for (std::size_t c = 0; c < 25; ++c)
        REQUIRE(noisy.channels[(s2->offset + c) * HW + probe] == expect[c]);

    // the relabeling map itself is seed-stable and in range
    REQUIRE(sem2_relabeling(9, 0.5, 123) == sem2_relabeling(9, 0.5, 123));
    for (int v : sem2_relabeling(9, 1.0, 77)) REQUIRE((v >= 0 && v <= 9));
}

TEST_CASE("unfamiliar classes feed zeros into the dims embedder") {
    CueRig rig;
    Camera cam = default_camera();
    const int gizmo = rig.catalog.id_of("gizmo");
    std::vector<SceneInstance> insts = {{1, gizmo, 0.5, 0.5, 2.0, 32.0, 32.0, 0.3}};
    Rng noise(0);
    SceneSample s = render(insts, cam, 0.0, noise);

    CueConfig cfg;
    cfg.sem1 = true;
    cfg.size = true;
    CueMap cm = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);

    std::array<double, 3> zeros{0.0, 0.0, 0.0};
    std::vector<double> expect(10);
    rig.dims_embedder.apply(zeros.data(), expect.data());

    const CueBlock* size = cm.layout.find("size");
    const std::size_t HW = 64 * 64;
    std::size_t probe = 0;
    while (static_cast<int>(s.semantic_map[probe]) != gizmo) ++probe;
    for (std::size_t c = 0; c < 10; ++c)
        REQUIRE(cm.channels[(size->offset + c) * HW + probe] == expect[c]);
}

TEST_CASE("cue map persistence round trips tensor and layout") {
    CueRig rig;
    SceneSample s = two_instance_sample();
    CueConfig cfg;
    cfg.sem1 = true;
    cfg.area = AreaMode::mask;
    CueMap cm = build_cue_map(s, rig.catalog, cfg, rig.tables, rig.area_embedder, rig.dims_embedder);

    const std::filesystem::path stem = std::filesystem::temp_directory_path() / "cuedepth_cues_rt";
    save_cue_map(cm, stem);
    CueMap back = load_cue_map(stem);
    REQUIRE(back.layout.channels() == cm.layout.channels());
    for (std::size_t i = 0; i < cm.channels.numel(); ++i) REQUIRE(back.channels[i] == cm.channels[i]);
    std::filesystem::remove(stem.string() + ".cdt");
    std::filesystem::remove(stem.string() + ".layout.json");
}

TEST_CASE("graph-side column path reproduces the static cue map") {
    CueRig rig;
    CueConfig full;
    full.sem1 = true;
    full.area = AreaMode::mask;
    full.size = true;

    DatasetManifest m;
    m.catalog = rig.catalog;
    m.camera = default_camera();
    m.config.preset = Preset::familiar;
    m.seed = 31337;
    m.count = 2;
    std::vector<SceneSample> batch = generate_samples(m);

    CueConfig constant = full;
    constant.area = AreaMode::off;
    constant.size = false;

    std::vector<CueColumns> area_cc, size_cc;
    for (const SceneSample& s : batch) {
        area_cc.push_back(area_columns(s, full.area));
        size_cc.push_back(size_columns(s, rig.catalog, rig.tables.priors));
    }
    CueBatchColumns area_b = merge_columns(area_cc);
    CueBatchColumns size_b = merge_columns(size_cc);

    Graph g;
    SizeEmbedderVars av{g.leaf(rig.area_embedder.w1, true), g.leaf(rig.area_embedder.b1, true),
                        g.leaf(rig.area_embedder.w2, true), g.leaf(rig.area_embedder.b2, true)};
    SizeEmbedderVars dv{g.leaf(rig.dims_embedder.w1, true), g.leaf(rig.dims_embedder.b1, true),
                        g.leaf(rig.dims_embedder.w2, true), g.leaf(rig.dims_embedder.b2, true)};
    Var area_planes = instance_broadcast(size_embedder_forward(av, g.leaf(area_b.cols)), area_b.index_maps);
    Var size_planes = instance_broadcast(size_embedder_forward(dv, g.leaf(size_b.cols)), size_b.index_maps);

    const std::size_t HW = 64 * 64;
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        CueMap whole = build_cue_map(batch[bi], rig.catalog, full, rig.tables, rig.area_embedder,
                                     rig.dims_embedder);
        CueMap prefix = build_cue_map(batch[bi], rig.catalog, constant, rig.tables, rig.area_embedder,
                                      rig.dims_embedder);
        const CueBlock* area = whole.layout.find("area");
        const CueBlock* size = whole.layout.find("size");

        for (std::size_t i = 0; i < prefix.channels.numel(); ++i)
            REQUIRE(whole.channels[i] == prefix.channels[i]);
        for (std::size_t c = 0; c < 10; ++c)
            for (std::size_t p = 0; p < HW; ++p) {
                const double want_area = whole.channels[(area->offset + c) * HW + p];
                const double want_size = whole.channels[(size->offset + c) * HW + p];
                REQUIRE(area_planes.value()[(bi * 10 + c) * HW + p] ==
                        Catch::Approx(want_area).margin(1e-12));
                REQUIRE(size_planes.value()[(bi * 10 + c) * HW + p] ==
                        Catch::Approx(want_size).margin(1e-12));
            }
    }
}
