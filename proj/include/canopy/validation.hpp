#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "canopy/accuracy.hpp"
#include "canopy/csv.hpp"
#include "canopy/dataset.hpp"
#include "canopy/errors.hpp"
#include "canopy/geometry.hpp"
#include "canopy/loglog.hpp"
#include "canopy/metrics.hpp"
#include "canopy/mixed.hpp"
#include "canopy/rng.hpp"

namespace canopy {

// Leave-one-out cross-validation. The fit callback receives the n-1
// training rows and returns a predictor for the held-out row.
template <typename FitFn>
std::vector<double> loocv(const std::vector<PlotSample>& samples, FitFn&& fit) {
    if (samples.size() < 3)
        throw validation_error("LOOCV needs at least 3 rows, got " + std::to_string(samples.size()));
    std::vector<double> predictions(samples.size());
    std::vector<PlotSample> train;
    train.reserve(samples.size() - 1);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        train.clear();
        for (std::size_t j = 0; j < samples.size(); ++j)
            if (j != i) train.push_back(samples[j]);
        try {
            predictions[i] = fit(train)(samples[i]);
        } catch (const std::exception& e) {
            throw validation_error("LOOCV fold " + std::to_string(i) + " (plot '" + samples[i].plot_id +
                                   "') failed: " + e.what());
        }
    }
    return predictions;
}

// Coefficients are refit per fold; the predictor set stays fixed.
inline std::vector<double> loocv_loglog(const std::vector<PlotSample>& samples,
                                        const std::vector<std::string>& predictors) {
    return loocv(samples, [&predictors](const std::vector<PlotSample>& train) {
        LogLogModel m = fit_loglog(train, predictors);
        return [m](const PlotSample& s) { return predict_loglog(m, s.metrics); };
    });
}

// Costlier protocol that repeats the stepwise search inside every fold.
inline std::vector<double> loocv_loglog_reselect(const std::vector<PlotSample>& samples,
                                                 const std::vector<std::string>& candidates,
                                                 std::size_t max_predictors = 4) {
    return loocv(samples, [&candidates, max_predictors](const std::vector<PlotSample>& train) {
        LogLogModel m = stepwise_select(train, candidates, max_predictors).model;
        return [m](const PlotSample& s) { return predict_loglog(m, s.metrics); };
    });
}

inline std::vector<double> loocv_mixed(const std::vector<PlotSample>& samples,
                                       const MixedFitOptions& options = {}) {
    return loocv(samples, [&options](const std::vector<PlotSample>& train) {
        MixedModel m = fit_mixed(train, options);
        return [m](const PlotSample& s) { return predict_mixed(m, s.metrics, s.project); };
    });
}

enum class EstimateMethod { synthetic_grid, plot_mean_prediction, direct };

inline std::string to_string(EstimateMethod m) {
    switch (m) {
        case EstimateMethod::synthetic_grid: return "synthetic_grid";
        case EstimateMethod::plot_mean_prediction: return "plot_mean_prediction";
        default: return "direct";
    }
}

struct StandEstimate {
    std::string stand_id;
    EstimateMethod method = EstimateMethod::synthetic_grid;
    double value = 0.0;
    std::size_t n_units = 0;
    std::size_t n_skipped = 0;
    bool flagged = false;
};

// Mean model prediction over the grid cells whose centers fall in the stand.
// Cells the model cannot predict (missing or out-of-domain metrics) are
// skipped; the estimate is flagged when more than 10% of cells were skipped.
template <typename PredictFn>
StandEstimate synthetic_stand_estimate(PredictFn&& predict, const GridSpec& grid,
                                       const std::map<std::string, MetricVector>& cell_metrics,
                                       const StandPolygon& stand) {
    const auto cells = cells_in_stand(grid, stand);
    if (cells.empty())
        throw validation_error("stand '" + stand.id + "' contains no grid-cell centers");

    double sum = 0.0;
    std::size_t used = 0, skipped = 0;
    for (const auto& cell : cells) {
        const auto it = cell_metrics.find(GridSpec::cell_id(cell.first, cell.second));
        if (it == cell_metrics.end()) {
            ++skipped;
            continue;
        }
        try {
            sum += predict(it->second);
            ++used;
        } catch (const prediction_domain_error&) {
            ++skipped;
        }
    }
    if (used == 0)
        throw validation_error("stand '" + stand.id + "': no usable grid cells (" +
                               std::to_string(skipped) + " skipped)");

    StandEstimate e;
    e.stand_id = stand.id;
    e.method = EstimateMethod::synthetic_grid;
    e.value = sum / static_cast<double>(used);
    e.n_units = used;
    e.n_skipped = skipped;
    e.flagged = static_cast<double>(skipped) > 0.1 * static_cast<double>(cells.size());
    return e;
}

inline StandEstimate direct_stand_estimate(const std::string& stand_id,
                                           const std::vector<double>& plot_volumes) {
    if (plot_volumes.empty())
        throw validation_error("stand '" + stand_id + "' has no measured plots");
    double sum = 0.0;
    for (double v : plot_volumes) sum += v;
    StandEstimate e;
    e.stand_id = stand_id;
    e.method = EstimateMethod::direct;
    e.value = sum / static_cast<double>(plot_volumes.size());
    e.n_units = plot_volumes.size();
    return e;
}

// Area and compactness filter, then a seeded uniform sample per ALS project.
// Projects are processed in name order and each draws from its own derived
// seed, so the result does not depend on how projects interleave in the input.
inline std::vector<StandPolygon> select_stands(const std::vector<StandPolygon>& stands,
                                               std::size_t per_project = 200,
                                               double min_area_ha = 1.0,
                                               double min_compactness = 0.2,
                                               std::uint64_t seed = 0) {
    std::map<std::string, std::vector<std::size_t>> qualifying;
    for (std::size_t i = 0; i < stands.size(); ++i) {
        const auto& s = stands[i];
        if (stand_area(s) < min_area_ha * 10'000.0) continue;
        if (!(compactness(s) > min_compactness)) continue;
        qualifying[s.als_project].push_back(i);
    }

    std::vector<StandPolygon> selected;
    for (auto& kv : qualifying) {
        auto& idx = kv.second;
        if (idx.size() > per_project) {
            Rng rng(derive_seed(seed, hash_label(kv.first)));
            for (std::size_t j = 0; j < per_project; ++j) {
                const std::size_t pick = j + static_cast<std::size_t>(rng.below(idx.size() - j));
                std::swap(idx[j], idx[pick]);
            }
            idx.resize(per_project);
            std::sort(idx.begin(), idx.end());
        }
        for (std::size_t i : idx) selected.push_back(stands[i]);
    }
    return selected;
}

struct AugmentResult {
    std::vector<PlotSample> plots;
    std::vector<std::string> appended_ids;
    std::vector<std::string> warnings;
};

// Appends, per ALS project, the k densest-canopy local plots (largest
// zmean_f, ties by plot id) to the regional modeling set.
inline AugmentResult augment_with_top_plots(const std::vector<PlotSample>& nfi_plots,
                                            const std::vector<PlotSample>& fmi_plots,
                                            int k = 7) {
    if (k < 0)
        throw validation_error("top-plot count must be nonnegative, got " + std::to_string(k));

    AugmentResult result;
    result.plots = nfi_plots;
    std::set<std::string> seen;
    for (const auto& p : nfi_plots) seen.insert(p.plot_id);
    for (const auto& p : fmi_plots) {
        if (seen.count(p.plot_id))
            throw validation_error("plot '" + p.plot_id + "' appears in both plot sets");
    }

    std::map<std::string, std::vector<std::size_t>> by_project;
    for (std::size_t i = 0; i < fmi_plots.size(); ++i)
        by_project[fmi_plots[i].project].push_back(i);

    for (auto& kv : by_project) {
        auto& idx = kv.second;
        for (std::size_t i : idx) {
            if (!fmi_plots[i].metrics.has("zmean_f"))
                throw validation_error("plot '" + fmi_plots[i].plot_id + "': metric 'zmean_f' is missing");
        }
        std::sort(idx.begin(), idx.end(), [&fmi_plots](std::size_t a, std::size_t b) {
            const double za = *fmi_plots[a].metrics.get("zmean_f");
            const double zb = *fmi_plots[b].metrics.get("zmean_f");
            if (za != zb) return za > zb;
            return fmi_plots[a].plot_id < fmi_plots[b].plot_id;
        });
        const auto take = std::min(static_cast<std::size_t>(k), idx.size());
        if (take < static_cast<std::size_t>(k))
            result.warnings.push_back("project '" + kv.first + "': only " + std::to_string(idx.size()) +
                                      " local plots available, requested " + std::to_string(k));
        for (std::size_t j = 0; j < take; ++j) {
            const auto& plot = fmi_plots[idx[j]];
            if (!seen.insert(plot.plot_id).second)
                throw validation_error("plot '" + plot.plot_id + "' appears in both plot sets");
            result.plots.push_back(plot);
            result.appended_ids.push_back(plot.plot_id);
        }
    }
    return result;
}

struct ComparisonRow {
    std::string block;
    std::string group;
    AccuracyReport acc;
};

struct ComparisonTable {
    std::string title;
    bool show_n = false;
    bool show_r2 = true;
    std::vector<ComparisonRow> rows;
};

inline ComparisonTable compare_models(const std::string& title,
                                      const std::vector<ComparisonRow>& rows,
                                      bool show_n = false, bool show_r2 = true) {
    ComparisonTable t;
    t.title = title;
    t.show_n = show_n;
    t.show_r2 = show_r2;
    t.rows = rows;
    return t;
}

// Per-project deviation rows between two synthetic estimate sets for the
// same stands, with the reference set in the observation role, plus a
// pooled row over all projects.
inline std::vector<ComparisonRow> paired_stand_rows(const std::string& block,
                                                    const std::vector<StandEstimate>& reference,
                                                    const std::vector<StandEstimate>& comparison,
                                                    const std::map<std::string, std::string>& stand_project,
                                                    const std::string& pooled_label = "All") {
    if (reference.size() != comparison.size())
        throw validation_error("paired comparison: " + std::to_string(reference.size()) + " reference vs " +
                               std::to_string(comparison.size()) + " comparison estimates");
    std::map<std::string, double> comp_by_id;
    for (const auto& e : comparison) comp_by_id[e.stand_id] = e.value;

    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> grouped;
    std::vector<double> all_ref, all_comp;
    for (const auto& e : reference) {
        const auto it = comp_by_id.find(e.stand_id);
        if (it == comp_by_id.end())
            throw validation_error("stand '" + e.stand_id + "' missing from comparison estimates");
        const auto pj = stand_project.find(e.stand_id);
        if (pj == stand_project.end())
            throw validation_error("stand '" + e.stand_id + "' has no ALS project assignment");
        grouped[pj->second].first.push_back(e.value);
        grouped[pj->second].second.push_back(it->second);
        all_ref.push_back(e.value);
        all_comp.push_back(it->second);
    }

    std::vector<ComparisonRow> rows;
    for (const auto& kv : grouped)
        rows.push_back({block, kv.first,
                        accuracy(kv.second.first, kv.second.second, ReportLevel::stand, kv.first)});
    rows.push_back({block, pooled_label,
                    accuracy(all_ref, all_comp, ReportLevel::stand, pooled_label)});
    return rows;
}

inline std::string comparison_to_csv(const ComparisonTable& table) {
    std::string out = "block,group,n,rmsd,rmsd_pct,md,md_pct,r2\n";
    for (const auto& row : table.rows) {
        out += row.block + ',' + row.group + ',' + std::to_string(row.acc.n) + ',';
        out += csv::format_double(row.acc.rmsd) + ',' + csv::format_double(row.acc.rmsd_pct) + ',';
        out += csv::format_double(row.acc.md) + ',' + csv::format_double(row.acc.md_pct) + ',';
        out += std::isnan(row.acc.r2) ? std::string() : csv::format_double(row.acc.r2);
        out += '\n';
    }
    return out;
}

// Aligned text rendering; percentages shown as integers.
inline std::string comparison_to_text(const ComparisonTable& table) {
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header = {"", ""};
    if (table.show_n) header.push_back("n");
    header.insert(header.end(), {"RMSD", "RMSD%", "MD", "MD%"});
    if (table.show_r2) header.push_back("R2");
    cells.push_back(header);

    char buf[64];
    auto num = [&buf](double v, const char* fmt) {
        std::snprintf(buf, sizeof buf, fmt, v);
        return std::string(buf);
    };
    for (const auto& row : table.rows) {
        std::vector<std::string> line = {row.block, row.group};
        if (table.show_n) line.push_back(std::to_string(row.acc.n));
        line.push_back(num(row.acc.rmsd, "%.2f"));
        line.push_back(std::to_string(static_cast<long long>(std::llround(row.acc.rmsd_pct))));
        line.push_back(num(row.acc.md, "%.2f"));
        line.push_back(std::to_string(static_cast<long long>(std::llround(row.acc.md_pct))));
        if (table.show_r2)
            line.push_back(std::isnan(row.acc.r2) ? "-" : num(row.acc.r2, "%.2f"));
        cells.push_back(std::move(line));
    }

    std::vector<std::size_t> widths(cells[0].size(), 0);
    for (const auto& line : cells)
        for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());

    std::string out;
    if (!table.title.empty()) out += table.title + '\n';
    for (const auto& line : cells) {
        for (std::size_t c = 0; c < line.size(); ++c) {
            if (c > 0) out += "  ";
            const bool left = c < 2;
            const std::size_t pad = widths[c] - line[c].size();
            if (left) {
                out += line[c];
                out.append(pad, ' ');
            } else {
                out.append(pad, ' ');
                out += line[c];
            }
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += '\n';
    }
    return out;
}

}
