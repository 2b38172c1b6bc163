#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/experiment.hpp"
#include "cuedepth/metrics.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Per-metric aggregation across seeds.
// ---------------------------------------------------------------------------

struct MetricStats {
    double abs_rel = 0.0;
    double sq_rel = 0.0;
    double rms = 0.0;
    double rms_log = 0.0;
    double delta1 = 0.0;
    double delta2 = 0.0;
    double delta3 = 0.0;

    nlohmann::json to_json() const {
        return {{"abs_rel", abs_rel}, {"sq_rel", sq_rel},   {"rms", rms},       {"rms_log", rms_log},
                {"delta1", delta1},  {"delta2", delta2},   {"delta3", delta3}};
    }
    static MetricStats from_json(const nlohmann::json& j) {
        MetricStats s;
        s.abs_rel = j.at("abs_rel");
        s.sq_rel = j.at("sq_rel");
        s.rms = j.at("rms");
        s.rms_log = j.at("rms_log");
        s.delta1 = j.at("delta1");
        s.delta2 = j.at("delta2");
        s.delta3 = j.at("delta3");
        return s;
    }
};

inline MetricStats metrics_mean(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw DegenerateInputError("metrics_mean: no reports");
    MetricStats s;
    for (const MetricsReport& r : reports) {
        s.abs_rel += r.abs_rel;
        s.sq_rel += r.sq_rel;
        s.rms += r.rms;
        s.rms_log += r.rms_log;
        s.delta1 += r.delta1;
        s.delta2 += r.delta2;
        s.delta3 += r.delta3;
    }
    const double n = static_cast<double>(reports.size());
    s.abs_rel /= n;
    s.sq_rel /= n;
    s.rms /= n;
    s.rms_log /= n;
    s.delta1 /= n;
    s.delta2 /= n;
    s.delta3 /= n;
    return s;
}

/// Population standard deviation per metric; zero for a single seed.
inline MetricStats metrics_std(const std::vector<MetricsReport>& reports, const MetricStats& mean) {
    if (reports.empty()) throw DegenerateInputError("metrics_std: no reports");
    MetricStats s;
    for (const MetricsReport& r : reports) {
        s.abs_rel += (r.abs_rel - mean.abs_rel) * (r.abs_rel - mean.abs_rel);
        s.sq_rel += (r.sq_rel - mean.sq_rel) * (r.sq_rel - mean.sq_rel);
        s.rms += (r.rms - mean.rms) * (r.rms - mean.rms);
        s.rms_log += (r.rms_log - mean.rms_log) * (r.rms_log - mean.rms_log);
        s.delta1 += (r.delta1 - mean.delta1) * (r.delta1 - mean.delta1);
        s.delta2 += (r.delta2 - mean.delta2) * (r.delta2 - mean.delta2);
        s.delta3 += (r.delta3 - mean.delta3) * (r.delta3 - mean.delta3);
    }
    const double n = static_cast<double>(reports.size());
    s.abs_rel = std::sqrt(s.abs_rel / n);
    s.sq_rel = std::sqrt(s.sq_rel / n);
    s.rms = std::sqrt(s.rms / n);
    s.rms_log = std::sqrt(s.rms_log / n);
    s.delta1 = std::sqrt(s.delta1 / n);
    s.delta2 = std::sqrt(s.delta2 / n);
    s.delta3 = std::sqrt(s.delta3 / n);
    return s;
}

// ---------------------------------------------------------------------------
// Ablation table.
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    std::string cues; // CueConfig summary string
    std::vector<MetricsReport> per_seed;
    MetricStats mean;
    MetricStats stddev;
};

struct AblationTable {
    std::vector<std::uint64_t> seeds; // aligned with every row's per_seed entries
    std::vector<AblationRow> rows;    // rows[0] is the comparison baseline

    void validate() const {
        if (rows.empty()) throw ValidationError("ablation table: no rows");
        const std::size_t n = rows[0].per_seed.size();
        if (n == 0) throw ValidationError("ablation table: row '" + rows[0].name + "' has no seed reports");
        if (seeds.size() != n) {
            throw ValidationError("ablation table: " + std::to_string(seeds.size()) + " seeds listed but " +
                                  std::to_string(n) + " reports per row");
        }
        for (const AblationRow& r : rows) {
            if (r.per_seed.size() != n) {
                throw ValidationError("ablation table: row '" + r.name + "' has " +
                                      std::to_string(r.per_seed.size()) + " seed reports, expected " +
                                      std::to_string(n));
            }
            const MetricStats m = metrics_mean(r.per_seed);
            const double drift = std::max({std::abs(m.abs_rel - r.mean.abs_rel),
                                           std::abs(m.sq_rel - r.mean.sq_rel),
                                           std::abs(m.rms - r.mean.rms),
                                           std::abs(m.rms_log - r.mean.rms_log),
                                           std::abs(m.delta1 - r.mean.delta1),
                                           std::abs(m.delta2 - r.mean.delta2),
                                           std::abs(m.delta3 - r.mean.delta3)});
            if (!(drift <= 1e-12)) {
                throw ValidationError("ablation table: stored mean for row '" + r.name +
                                      "' is off by " + std::to_string(drift) +
                                      " from its per-seed reports");
            }
        }
    }

    /// Whether row i improves on the baseline row's mean RMSE.
    bool beats_baseline(std::size_t i) const {
        if (i >= rows.size()) throw ContractError("ablation table: row index out of range");
        return rows[i].mean.rms < rows[0].mean.rms;
    }

    std::string direction(std::size_t i) const {
        return i == 0 ? "-" : (beats_baseline(i) ? "yes" : "no");
    }

    std::string render() const {
        auto cell = [](double mean, double sd) {
            std::ostringstream os;
            os << std::fixed << std::setprecision(4) << mean << " +- " << sd;
            return os.str();
        };
        std::vector<std::vector<std::string>> grid;
        grid.push_back({"experiment", "cues", "abs_rel", "rms", "delta1", "direction_check"});
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const AblationRow& r = rows[i];
            grid.push_back({r.name, r.cues, cell(r.mean.abs_rel, r.stddev.abs_rel),
                            cell(r.mean.rms, r.stddev.rms), cell(r.mean.delta1, r.stddev.delta1),
                            direction(i)});
        }
        std::vector<std::size_t> width(grid[0].size(), 0);
        for (const auto& row : grid)
            for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
        std::ostringstream os;
        for (const auto& row : grid) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                os << std::left << std::setw(static_cast<int>(width[c]) + (c + 1 < row.size() ? 2 : 0))
                   << row[c];
            }
            os << '\n';
        }
        return os.str();
    }

    std::string to_csv() const {
        auto quote = [](const std::string& s) {
            if (s.find(',') == std::string::npos && s.find('"') == std::string::npos) return s;
            std::string q = "\"";
            for (char ch : s) q += (ch == '"') ? std::string("\"\"") : std::string(1, ch);
            return q + "\"";
        };
        std::ostringstream os;
        os << std::setprecision(17)
           << "experiment,cues,seed,abs_rel,sq_rel,rms,rms_log,delta1,delta2,delta3,direction_check\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const AblationRow& r = rows[i];
            for (std::size_t k = 0; k < r.per_seed.size(); ++k) {
                const MetricsReport& m = r.per_seed[k];
                os << quote(r.name) << ',' << quote(r.cues) << ',' << seeds[k] << ',' << m.abs_rel << ','
                   << m.sq_rel << ',' << m.rms << ',' << m.rms_log << ',' << m.delta1 << ',' << m.delta2
                   << ',' << m.delta3 << ",\n";
            }
            os << quote(r.name) << ',' << quote(r.cues) << ",mean," << r.mean.abs_rel << ','
               << r.mean.sq_rel << ',' << r.mean.rms << ',' << r.mean.rms_log << ',' << r.mean.delta1
               << ',' << r.mean.delta2 << ',' << r.mean.delta3 << ',' << direction(i) << '\n';
            os << quote(r.name) << ',' << quote(r.cues) << ",std," << r.stddev.abs_rel << ','
               << r.stddev.sq_rel << ',' << r.stddev.rms << ',' << r.stddev.rms_log << ','
               << r.stddev.delta1 << ',' << r.stddev.delta2 << ',' << r.stddev.delta3 << ",\n";
        }
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json jrows = nlohmann::json::array();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const AblationRow& r = rows[i];
            nlohmann::json jper = nlohmann::json::array();
            for (const MetricsReport& m : r.per_seed) jper.push_back(m.to_json());
            jrows.push_back({{"name", r.name},
                             {"cues", r.cues},
                             {"per_seed", jper},
                             {"mean", r.mean.to_json()},
                             {"std", r.stddev.to_json()},
                             {"direction_check", direction(i)}});
        }
        return {{"seeds", seeds}, {"rows", jrows}};
    }

    static AblationTable from_json(const nlohmann::json& j) {
        AblationTable t;
        try {
            t.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
            for (const nlohmann::json& jr : j.at("rows")) {
                AblationRow r;
                r.name = jr.at("name").get<std::string>();
                r.cues = jr.at("cues").get<std::string>();
                for (const nlohmann::json& jm : jr.at("per_seed")) {
                    r.per_seed.push_back(MetricsReport::from_json(jm));
                }
                r.mean = MetricStats::from_json(jr.at("mean"));
                r.stddev = MetricStats::from_json(jr.at("std"));
                t.rows.push_back(std::move(r));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("ablation table: ") + e.what());
        }
        t.validate();
        return t;
    }
};

// ---------------------------------------------------------------------------
// Suite runner and presets.
// ---------------------------------------------------------------------------

/// Runs every spec as an experiment and assembles the comparison table.
/// Specs must share the dataset, the NetConfig (ignoring in_channels and
/// the per-seed training seed) and the seed list; the first spec is the
/// baseline of the direction_check column. All seeds run even when some
/// fail; failures then surface as one error after the table is complete.
inline AblationTable run_ablation_suite(const std::vector<ExperimentSpec>& specs, bool force = false) {
    if (specs.size() < 2) {
        throw ConfigError("ablation suite: need at least 2 specs to compare, got " +
                          std::to_string(specs.size()));
    }
    auto net_signature = [](const NetConfig& nc) {
        nlohmann::json j = nc.to_json();
        j.erase("in_channels");
        j["train"].erase("seed");
        return j;
    };
    std::set<std::string> names;
    for (const ExperimentSpec& s : specs) {
        s.validate();
        if (!names.insert(s.name).second) {
            throw ConfigError("ablation suite: duplicate experiment name '" + s.name + "'");
        }
        if (s.dataset != specs[0].dataset) {
            throw ConfigError("ablation suite: spec '" + s.name + "' trains on a different dataset than '" +
                              specs[0].name + "'");
        }
        if (net_signature(s.net) != net_signature(specs[0].net)) {
            throw ConfigError("ablation suite: spec '" + s.name + "' uses a different NetConfig than '" +
                              specs[0].name + "'");
        }
        if (s.seeds != specs[0].seeds) {
            throw ConfigError("ablation suite: spec '" + s.name + "' uses a different seed list than '" +
                              specs[0].name + "'");
        }
    }

    AblationTable table;
    table.seeds = specs[0].seeds;
    std::vector<std::string> failures;
    for (const ExperimentSpec& spec : specs) {
        const ExperimentResult res = run_experiment(spec, force);
        AblationRow row;
        row.name = spec.name;
        row.cues = spec.cues.summary();
        for (const SeedOutcome& o : res.outcomes) {
            if (o.ok) {
                row.per_seed.push_back(o.metrics);
            } else {
                failures.push_back(spec.name + "/seed-" + std::to_string(o.seed) + ": " + o.error);
            }
        }
        if (!row.per_seed.empty()) {
            row.mean = metrics_mean(row.per_seed);
            row.stddev = metrics_std(row.per_seed, row.mean);
        }
        table.rows.push_back(std::move(row));
    }
    if (!failures.empty()) {
        std::string msg = "ablation suite: " + std::to_string(failures.size()) + " seed run(s) failed:";
        for (const std::string& f : failures) msg += "\n  " + f;
        throw RunError(msg);
    }
    table.validate();
    return table;
}

/// Built-in row sets. The base spec supplies dataset, net, seeds and
/// output directory; each row overrides name and cue configuration.
inline std::vector<ExperimentSpec> ablation_preset(const std::string& preset, const ExperimentSpec& base) {
    auto derive = [&base](const std::string& row_name, const CueConfig& cues) {
        ExperimentSpec s = base;
        s.name = row_name;
        s.cues = cues;
        return s;
    };
    if (preset == "paper-table2-mini") {
        CueConfig off;
        CueConfig s1;
        s1.sem1 = true;
        CueConfig s1am = s1;
        s1am.area = AreaMode::mask;
        CueConfig s1ab = s1;
        s1ab.area = AreaMode::bbox;
        CueConfig s1ams = s1am;
        s1ams.size = true;
        CueConfig full = s1ams;
        full.sem2 = true;
        return {derive("baseline", off),           derive("sem1", s1),
                derive("sem1-areaM", s1am),        derive("sem1-areaB", s1ab),
                derive("sem1-areaM-size", s1ams),  derive("sem1-sem2-areaM-size", full)};
    }
    if (preset == "embedding-ablation") {
        CueConfig off;
        CueConfig raw;
        raw.sem1 = true;
        raw.sem_repr = SemRepr::raw;
        CueConfig rnd;
        rnd.sem1 = true;
        rnd.sem_repr = SemRepr::random;
        CueConfig lang;
        lang.sem1 = true;
        lang.sem_repr = SemRepr::language;
        return {derive("baseline", off), derive("sem1-raw", raw), derive("sem1-random25", rnd),
                derive("sem1-language25", lang)};
    }
    throw ConfigError("unknown ablation preset '" + preset + "' (expected paper-table2-mini or embedding-ablation)");
}

/// Writes the three table renderings next to the per-experiment run dirs.
inline void save_ablation(const AblationTable& table, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "ablation.txt", table.render());
    detail::write_text(dir / "ablation.csv", table.to_csv());
    detail::write_text(dir / "ablation.json", table.to_json().dump(2) + "\n");
}

} // namespace cuedepth
