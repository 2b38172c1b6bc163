// command line front end: dataset generation, training, evaluation,
// ablation suites, ingestion of external segmentations, reports and cue
// map dumps. exit codes: 0 success, 1 any-seed failure, 2 config error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/ablation.hpp"
#include "cuedepth/dataset.hpp"
#include "cuedepth/experiment.hpp"
#include "cuedepth/ingest.hpp"
#include "cuedepth/report_gen.hpp"
#include "cuedepth/train.hpp"

#include "CLI11.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using namespace cuedepth;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw PersistenceError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return j;
}

int cmd_gen(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed,
            bool force) {
    DatasetManifest m = DatasetManifest::from_json(read_json_file(config));
    if (seed) m.seed = *seed;
    const fs::path manifest_path = fs::path(out) / "manifest.json";
    const std::string dump = m.to_json().dump(2) + "\n";
    if (fs::exists(manifest_path) && !force) {
        std::ifstream in(manifest_path);
        std::stringstream existing;
        existing << in.rdbuf();
        if (existing.str() != dump) {
            throw ConfigError(out + " holds a different dataset; pass --force to replace it");
        }
        bool complete = true;
        for (std::size_t i = 0; i < m.count && complete; ++i) {
            complete = fs::exists(fs::path(out) / (detail::sample_stem(i) + ".depth.cdt"));
        }
        if (complete) {
            std::cout << "dataset already present at " << out << ", skipping\n";
            return 0;
        }
    }
    generate_dataset(m, out);
    std::cout << "wrote " << m.count << " samples to " << out << '\n';
    return 0;
}

void print_outcomes(const ExperimentResult& res) {
    for (const SeedOutcome& o : res.outcomes) {
        std::cout << res.name << "/seed-" << o.seed << ": ";
        if (o.ok) {
            std::cout << (o.skipped ? "skipped (complete)" : "ok") << "  rms=" << o.metrics.rms
                      << "  abs_rel=" << o.metrics.abs_rel << "  d1=" << o.metrics.delta1 << '\n';
        } else {
            std::cout << "FAILED: " << o.error << '\n';
        }
    }
}

int cmd_train(const std::string& config, const std::optional<std::string>& out,
              std::optional<std::uint64_t> seed, bool force) {
    ExperimentSpec spec = ExperimentSpec::load(config);
    if (out) spec.out = *out;
    if (seed) spec.seeds = {*seed};
    const ExperimentResult res = run_experiment(spec, force);
    print_outcomes(res);
    return res.all_ok() ? 0 : 1;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::optional<std::string>& out,
             const std::string& split_name, std::uint64_t tables_seed, double label_noise) {
    CueModel model = load_checkpoint(ckpt);
    const DatasetManifest man = load_manifest(data);
    const std::vector<SceneSample> samples = load_dataset(data);
    const CueTables tables = make_cue_tables(man.catalog, model.cues, tables_seed);
    const TrainingSet ts = prepare_training_set(samples, man.catalog, model.cues, tables, label_noise);
    const NetConfig& nc = model.net.config;

    std::vector<std::size_t> idx;
    if (split_name == "all") {
        for (std::size_t i = 0; i < ts.examples.size(); ++i) idx.push_back(i);
    } else {
        const SplitIndices split = training_split(nc, ts.examples.size());
        idx = split_name == "train" ? split.train : split.val;
    }
    const Tensor pred = predict_set(model, ts, idx, static_cast<std::size_t>(nc.train.batch));
    const MetricsReport rep = evaluate(pred, gather_depths(ts, idx));
    const std::string text = rep.to_json().dump(2) + "\n";
    std::cout << text;
    if (out) detail::write_text(*out, text);
    return 0;
}

int cmd_ablate(const std::string& preset, const std::vector<std::string>& spec_files,
               const std::string& config, const std::optional<std::string>& out, bool force) {
    if (!preset.empty() && !spec_files.empty()) {
        throw ConfigError("pass either --preset or --specs, not both");
    }
    std::vector<ExperimentSpec> specs;
    if (!preset.empty()) {
        if (config.empty()) {
            throw ConfigError("--preset needs --config <base spec> for dataset, net, seeds and out");
        }
        ExperimentSpec base = ExperimentSpec::load(config);
        if (out) base.out = *out;
        specs = ablation_preset(preset, base);
    } else if (!spec_files.empty()) {
        for (const std::string& f : spec_files) specs.push_back(ExperimentSpec::load(f));
        if (out) {
            for (ExperimentSpec& s : specs) s.out = *out;
        }
    } else {
        throw ConfigError("ablate needs --preset <name> or --specs <spec files>");
    }
    const AblationTable table = run_ablation_suite(specs, force);
    save_ablation(table, specs[0].out);
    std::cout << table.render();
    std::cout << "wrote ablation.{txt,csv,json} to " << specs[0].out << '\n';
    return 0;
}

int cmd_ingest(const std::string& instances, const std::string& descriptor, const std::string& appearance,
               const std::string& names, const std::string& out) {
    const IngestedSample rec = ingest_external_sample(instances, descriptor, appearance, names);
    fs::create_directories(out);
    save_tensor(fs::path(out) / "ingested.app.cdt", rec.sample.appearance);
    save_tensor(fs::path(out) / "ingested.sem.cdt", rec.sample.semantic_map);
    save_tensor(fs::path(out) / "ingested.inst.cdt", rec.sample.instance_map);
    nlohmann::json jcat = nlohmann::json::array();
    for (std::size_t i = 0; i < rec.catalog.classes.size(); ++i) {
        jcat.push_back({{"class_id", i + 1},
                        {"name", rec.catalog.classes[i].name},
                        {"external_class_id", rec.external_class_ids[i]}});
    }
    detail::write_text(fs::path(out) / "catalog.json", jcat.dump(2) + "\n");
    std::cout << "ingested " << rec.sample.instance_map.extent(0) << "x"
              << rec.sample.instance_map.extent(1) << " rasters, "
              << detail::present_ids(rec.sample.instance_map).size() << " instances, "
              << rec.catalog.classes.size() << " classes -> " << out << '\n';
    return 0;
}

int cmd_report(const std::string& dir, bool plot) {
    std::vector<fs::path> svgs;
    const std::string text = write_report(dir, plot, &svgs);
    std::cout << text;
    for (const fs::path& p : svgs) std::cout << "wrote " << p.string() << '\n';
    return 0;
}

int cmd_embed(const std::string& config, const std::string& ckpt, const std::string& out,
              std::optional<std::uint64_t> seed, std::optional<std::size_t> limit) {
    const ExperimentSpec spec = ExperimentSpec::load(config);
    auto [man, samples] = resolve_dataset(spec.dataset);
    CueModel model = [&] {
        if (!ckpt.empty()) return load_checkpoint(ckpt);
        NetConfig nc = spec.net;
        nc.in_channels = channel_count(spec.cues);
        return CueModel::make(nc, spec.cues, seed ? *seed : spec.seeds.front());
    }();
    const CueTables tables = make_cue_tables(man.catalog, model.cues, spec.tables_seed);
    fs::create_directories(out);
    const std::size_t n = limit ? std::min(*limit, samples.size()) : samples.size();
    std::size_t channels = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const CueMap cm = model_cue_map(model, samples[i], man.catalog, tables,
                                        cue_noise_for_sample(0, spec.label_noise, i));
        channels = cm.layout.channels();
        save_cue_map(cm, fs::path(out) / (detail::sample_stem(i) + ".cues"));
    }
    std::cout << "wrote " << n << " cue maps (" << channels << " channels, layout '"
              << model.cues.summary() << "') to " << out << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"size-cue depth estimation laboratory"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a dataset from a manifest");
    std::string gen_config, gen_out;
    std::optional<std::uint64_t> gen_seed;
    bool gen_force = false;
    gen->add_option("--config", gen_config, "dataset manifest JSON")->required();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "override the manifest seed");
    gen->add_flag("--force", gen_force, "replace an existing dataset");

    // train
    auto* train = app.add_subcommand("train", "run one experiment spec across its seeds");
    std::string train_config;
    std::optional<std::string> train_out;
    std::optional<std::uint64_t> train_seed;
    bool train_force = false;
    train->add_option("--config", train_config, "experiment spec JSON")->required();
    train->add_option("--out", train_out, "override the spec's output directory");
    train->add_option("--seed", train_seed, "run only this seed");
    train->add_flag("--force", train_force, "recompute completed seeds");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_split = "val";
    std::optional<std::string> eval_out;
    std::uint64_t eval_tables_seed = 7;
    double eval_label_noise = 0.15;
    eval->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "also write the metrics JSON here");
    eval->add_option("--split", eval_split, "val, train or all")
        ->check(CLI::IsMember({"val", "train", "all"}));
    eval->add_option("--tables-seed", eval_tables_seed, "cue table seed used in training");
    eval->add_option("--label-noise", eval_label_noise, "sem2 flip probability used in training");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "run an ablation suite and render its table");
    std::string abl_preset, abl_config;
    std::vector<std::string> abl_specs;
    std::optional<std::string> abl_out;
    bool abl_force = false;
    ablate->add_option("--preset", abl_preset, "paper-table2-mini or embedding-ablation");
    ablate->add_option("--specs", abl_specs, "experiment spec JSON files to compare");
    ablate->add_option("--config", abl_config, "base spec for --preset rows");
    ablate->add_option("--out", abl_out, "override the output directory");
    ablate->add_flag("--force", abl_force, "recompute completed seeds");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "convert external segmentation rasters to a sample");
    std::string ing_inst, ing_desc, ing_app, ing_names, ing_out;
    ingest->add_option("--instances", ing_inst, "instance id raster (.cdt)")->required();
    ingest->add_option("--descriptor", ing_desc, "instance descriptor CSV")->required();
    ingest->add_option("--appearance", ing_app, "appearance raster (.cdt)")->required();
    ingest->add_option("--names", ing_names, "class id to name CSV")->required();
    ingest->add_option("--out", ing_out, "output directory")->required();

    // report
    auto* report = app.add_subcommand("report", "summarize a run directory");
    std::string rep_dir;
    bool rep_plot = false;
    report->add_option("dir", rep_dir, "run directory")->required();
    report->add_flag("--plot", rep_plot, "write training-curves.svg per experiment");

    // embed
    auto* embed = app.add_subcommand("embed", "dump cue maps for a spec's dataset");
    std::string emb_config, emb_ckpt, emb_out;
    std::optional<std::uint64_t> emb_seed;
    std::optional<std::size_t> emb_limit;
    embed->add_option("--config", emb_config, "experiment spec JSON")->required();
    embed->add_option("--ckpt", emb_ckpt, "use this checkpoint's embedders");
    embed->add_option("--out", emb_out, "output directory")->required();
    embed->add_option("--seed", emb_seed, "embedder seed when no checkpoint is given");
    embed->add_option("--limit", emb_limit, "only the first N samples");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_seed, gen_force);
        if (train->parsed()) return cmd_train(train_config, train_out, train_seed, train_force);
        if (eval->parsed()) {
            return cmd_eval(eval_ckpt, eval_data, eval_out, eval_split, eval_tables_seed,
                            eval_label_noise);
        }
        if (ablate->parsed()) return cmd_ablate(abl_preset, abl_specs, abl_config, abl_out, abl_force);
        if (ingest->parsed()) return cmd_ingest(ing_inst, ing_desc, ing_app, ing_names, ing_out);
        if (report->parsed()) return cmd_report(rep_dir, rep_plot);
        if (embed->parsed()) return cmd_embed(emb_config, emb_ckpt, emb_out, emb_seed, emb_limit);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const RunError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
