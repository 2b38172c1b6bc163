#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cuedepth/ablation.hpp"
#include "cuedepth/error.hpp"
#include "cuedepth/metrics.hpp"
#include "cuedepth/train.hpp"

#include "nlohmann/json.hpp"

namespace cuedepth {

// ---------------------------------------------------------------------------
// Offline report over a run directory: per-seed final metrics, mean +- std,
// and optional SVG training curves.
// ---------------------------------------------------------------------------

struct SeedRecord {
    std::uint64_t seed = 0;
    MetricsReport metrics;
    bool has_history = false;
    History history;
};

struct ExperimentReport {
    std::string name;
    std::filesystem::path dir;
    std::vector<SeedRecord> seeds;
};

namespace detail {

/// seed-<n> directories with a metrics.json, ascending by n.
inline std::vector<ExperimentReport> seed_records(const std::filesystem::path& dir) {
    std::vector<SeedRecord> recs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        const std::string stem = entry.path().filename().string();
        if (stem.rfind("seed-", 0) != 0) continue;
        const std::string num = stem.substr(5);
        if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos) continue;
        const std::filesystem::path metrics_path = entry.path() / "metrics.json";
        if (!std::filesystem::exists(metrics_path)) continue;
        SeedRecord r;
        r.seed = std::stoull(num);
        std::ifstream in(metrics_path);
        if (!in) throw PersistenceError("cannot open " + metrics_path.string());
        nlohmann::json j;
        try {
            in >> j;
            r.metrics = MetricsReport::from_json(j);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(metrics_path.string() + ": " + e.what());
        }
        const std::filesystem::path hist_path = entry.path() / "history.csv";
        if (std::filesystem::exists(hist_path)) {
            r.history = History::load_csv(hist_path);
            r.has_history = true;
        }
        recs.push_back(std::move(r));
    }
    if (recs.empty()) return {};
    std::sort(recs.begin(), recs.end(),
              [](const SeedRecord& a, const SeedRecord& b) { return a.seed < b.seed; });
    ExperimentReport rep;
    rep.name = dir.filename().string();
    rep.dir = dir;
    rep.seeds = std::move(recs);
    return {std::move(rep)};
}

} // namespace detail

/// Collects experiments under a run directory. Accepts either one
/// experiment directory (seed-*/ inside) or a root holding several.
inline std::vector<ExperimentReport> scan_run_directory(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw PersistenceError("run directory " + dir.string() + " does not exist");
    }
    std::vector<ExperimentReport> reports = detail::seed_records(dir);
    if (reports.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (!entry.is_directory()) continue;
            std::vector<ExperimentReport> sub = detail::seed_records(entry.path());
            reports.insert(reports.end(), sub.begin(), sub.end());
        }
        std::sort(reports.begin(), reports.end(),
                  [](const ExperimentReport& a, const ExperimentReport& b) { return a.name < b.name; });
    }
    if (reports.empty()) {
        throw PersistenceError("no run artifacts under " + dir.string() + "; expected " +
                               (dir / "seed-*" / "metrics.json").string() + " or " +
                               (dir / "<experiment>" / "seed-*" / "metrics.json").string() +
                               " (with history.csv beside each metrics.json)");
    }
    return reports;
}

/// Aligned text: one block per experiment, one row per seed, then a
/// mean +- std summary row.
inline std::string render_report(const std::vector<ExperimentReport>& reports) {
    auto fmt = [](double v) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4) << v;
        return os.str();
    };
    std::ostringstream out;
    for (std::size_t e = 0; e < reports.size(); ++e) {
        const ExperimentReport& rep = reports[e];
        std::vector<std::vector<std::string>> grid;
        grid.push_back(
            {"experiment", "seed", "abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3"});
        std::vector<MetricsReport> all;
        for (const SeedRecord& r : rep.seeds) {
            const MetricsReport& m = r.metrics;
            grid.push_back({rep.name, std::to_string(r.seed), fmt(m.abs_rel), fmt(m.sq_rel), fmt(m.rms),
                            fmt(m.rms_log), fmt(m.delta1), fmt(m.delta2), fmt(m.delta3)});
            all.push_back(m);
        }
        const MetricStats mean = metrics_mean(all);
        const MetricStats sd = metrics_std(all, mean);
        grid.push_back({rep.name, "mean+-std", fmt(mean.abs_rel) + "+-" + fmt(sd.abs_rel),
                        fmt(mean.sq_rel) + "+-" + fmt(sd.sq_rel), fmt(mean.rms) + "+-" + fmt(sd.rms),
                        fmt(mean.rms_log) + "+-" + fmt(sd.rms_log),
                        fmt(mean.delta1) + "+-" + fmt(sd.delta1),
                        fmt(mean.delta2) + "+-" + fmt(sd.delta2),
                        fmt(mean.delta3) + "+-" + fmt(sd.delta3)});
        std::vector<std::size_t> width(grid[0].size(), 0);
        for (const auto& row : grid)
            for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
        for (const auto& row : grid) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                out << std::left << std::setw(static_cast<int>(width[c]) + (c + 1 < row.size() ? 2 : 0))
                    << row[c];
            }
            out << '\n';
        }
        if (e + 1 < reports.size()) out << '\n';
    }
    return out.str();
}

/// Validation-loss-per-epoch polylines, one per seed, as a standalone SVG.
inline std::string training_curves_svg(const ExperimentReport& rep) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    const double width = 640.0, height = 400.0;
    const double ml = 70.0, mr = 20.0, mt = 40.0, mb = 45.0;

    double lo = 0.0, hi = 0.0;
    int max_epoch = 0;
    bool any = false;
    for (const SeedRecord& r : rep.seeds) {
        if (!r.has_history) continue;
        for (const EpochRow& row : r.history.rows) {
            if (!any) {
                lo = hi = row.val_loss;
                any = true;
            }
            lo = std::min(lo, row.val_loss);
            hi = std::max(hi, row.val_loss);
            max_epoch = std::max(max_epoch, row.epoch);
        }
    }
    if (hi - lo < 1e-12) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;

    auto x_of = [&](double epoch) {
        const double span = std::max(1.0, static_cast<double>(max_epoch - 1));
        return ml + (epoch - 1.0) / span * (width - ml - mr);
    };
    auto y_of = [&](double v) { return mt + (hi - v) / (hi - lo) * (height - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << ' ' << height
        << "\" font-family=\"monospace\" font-size=\"12\">\n";
    svg << "  <rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    svg << "  <text x=\"" << ml << "\" y=\"22\" font-size=\"14\">" << rep.name
        << ": validation loss per epoch</text>\n";
    svg << "  <line x1=\"" << ml << "\" y1=\"" << (height - mb) << "\" x2=\"" << (width - mr)
        << "\" y2=\"" << (height - mb) << "\" stroke=\"black\"/>\n";
    svg << "  <line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << (height - mb)
        << "\" stroke=\"black\"/>\n";
    svg << "  <text x=\"" << (width / 2.0) << "\" y=\"" << (height - 12.0)
        << "\" text-anchor=\"middle\">epoch</text>\n";
    svg << "  <text x=\"" << (ml - 8.0) << "\" y=\"" << (y_of(hi - pad) + 4.0)
        << "\" text-anchor=\"end\">" << std::setprecision(4) << (hi - pad) << "</text>\n";
    svg << "  <text x=\"" << (ml - 8.0) << "\" y=\"" << (y_of(lo + pad) + 4.0)
        << "\" text-anchor=\"end\">" << std::setprecision(4) << (lo + pad) << "</text>\n";
    svg << "  <text x=\"" << (ml - 8.0) << "\" y=\"" << (height - mb + 16.0)
        << "\" text-anchor=\"middle\">1</text>\n";
    if (max_epoch > 1) {
        svg << "  <text x=\"" << (width - mr) << "\" y=\"" << (height - mb + 16.0)
            << "\" text-anchor=\"middle\">" << max_epoch << "</text>\n";
    }

    std::size_t color = 0;
    for (const SeedRecord& r : rep.seeds) {
        if (!r.has_history || r.history.rows.empty()) continue;
        const char* stroke = palette[color % (sizeof(palette) / sizeof(palette[0]))];
        std::ostringstream pts;
        for (const EpochRow& row : r.history.rows) {
            pts << x_of(static_cast<double>(row.epoch)) << ',' << y_of(row.val_loss) << ' ';
        }
        svg << "  <polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\""
            << pts.str() << "\"/>\n";
        for (const EpochRow& row : r.history.rows) {
            svg << "  <circle cx=\"" << x_of(static_cast<double>(row.epoch)) << "\" cy=\""
                << y_of(row.val_loss) << "\" r=\"2\" fill=\"" << stroke << "\"/>\n";
        }
        svg << "  <text x=\"" << (width - mr - 90.0) << "\" y=\"" << (mt + 14.0 * static_cast<double>(color))
            << "\" fill=\"" << stroke << "\">seed " << r.seed << "</text>\n";
        ++color;
    }
    svg << "</svg>\n";
    return svg.str();
}

/// Renders the text report; with plot, also writes one training-curves.svg
/// per experiment and returns their paths.
inline std::string write_report(const std::filesystem::path& dir, bool plot,
                                std::vector<std::filesystem::path>* svg_paths = nullptr) {
    const std::vector<ExperimentReport> reports = scan_run_directory(dir);
    if (plot) {
        for (const ExperimentReport& rep : reports) {
            bool any_history = false;
            for (const SeedRecord& r : rep.seeds) any_history = any_history || r.has_history;
            if (!any_history) {
                throw PersistenceError("cannot plot " + rep.name + ": no " +
                                       (rep.dir / "seed-*" / "history.csv").string() + " found");
            }
            const std::filesystem::path out = rep.dir / "training-curves.svg";
            detail::write_text(out, training_curves_svg(rep));
            if (svg_paths != nullptr) svg_paths->push_back(out);
        }
    }
    return render_report(reports);
}

} // namespace cuedepth
