#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "canopy/config.hpp"
#include "canopy/dataset.hpp"
#include "canopy/errors.hpp"
#include "canopy/geojson.hpp"
#include "canopy/geometry.hpp"
#include "canopy/height_normalization.hpp"
#include "canopy/inventory.hpp"
#include "canopy/las_io.hpp"
#include "canopy/loglog.hpp"
#include "canopy/metrics.hpp"
#include "canopy/mixed.hpp"
#include "canopy/model_io.hpp"
#include "canopy/point_text_io.hpp"
#include "canopy/raster.hpp"
#include "canopy/rng.hpp"
#include "canopy/simulation.hpp"
#include "canopy/validation.hpp"

namespace canopy {

struct PipelineConfig {
    Config raw;
    std::string out_dir;
    std::uint64_t seed = 1;
    std::string dtm_path;
    std::string stands_path;
    std::string points_dir;
    std::string nfi_plots_path;
    std::string fmi_plots_path;
    std::string validation_plots_path;
    std::string stratum = "spruce_mature";
    std::set<std::string> strata = {"spruce_mature"};
    double grid_cell = 16.0;
    std::size_t max_predictors = 4;
    bool loocv_reselect = false;
    int top_k = 7;
    std::optional<double> fixed_theta;
    std::size_t stands_per_project = 200;
    double min_area_ha = 1.0;
    double min_compactness = 0.2;
};

namespace pipeline_detail {

inline std::string join_path(const std::string& dir, const std::string& leaf) {
    if (leaf.empty() || leaf.front() == '/' || dir.empty()) return leaf;
    return (std::filesystem::path(dir) / leaf).lexically_normal().string();
}

}

inline PipelineConfig load_pipeline_config(const std::string& config_path,
                                           const std::string& out_override = "",
                                           std::optional<std::uint64_t> seed_override = std::nullopt) {
    PipelineConfig pc;
    pc.raw = Config::parse_file(config_path);
    const std::string dir = std::filesystem::path(config_path).parent_path().string();
    const auto& c = pc.raw;

    pc.out_dir = !out_override.empty() ? out_override
                                       : pipeline_detail::join_path(dir, c.get("paths", "out", "out"));
    auto path_or_out = [&](const std::string& key, const std::string& fallback) {
        return c.has("paths", key) ? pipeline_detail::join_path(dir, c.get("paths", key, ""))
                                   : pipeline_detail::join_path(pc.out_dir, fallback);
    };
    pc.dtm_path = path_or_out("dtm", "dtm.asc");
    pc.stands_path = path_or_out("stands", "stands.geojson");
    pc.points_dir = c.has("paths", "points_dir")
                        ? pipeline_detail::join_path(dir, c.get("paths", "points_dir", ""))
                        : pc.out_dir;
    pc.nfi_plots_path = path_or_out("nfi_plots", "plots_nfi.csv");
    pc.fmi_plots_path = path_or_out("fmi_plots", "plots_fmi.csv");
    pc.validation_plots_path = path_or_out("validation_plots", "plots_validation.csv");

    pc.seed = seed_override ? *seed_override : c.get_u64("seeds", "master", 1);
    pc.stratum = c.get("strata", "target", pc.stratum);
    pc.strata = c.get_string_set("strata", "known", {pc.stratum});
    pc.grid_cell = c.get_double("grid", "cell_size", pc.grid_cell);
    if (!(pc.grid_cell > 0.0))
        throw validation_error("grid cell size must be positive");

    pc.max_predictors = static_cast<std::size_t>(c.get_long("model", "max_predictors", 4));
    pc.loocv_reselect = c.get_bool("model", "loocv_reselect", false);
    pc.top_k = static_cast<int>(c.get_long("model", "top_k", 7));
    pc.fixed_theta = c.get_optional_double("model", "fixed_theta");

    pc.stands_per_project = static_cast<std::size_t>(c.get_long("estimate", "stands_per_project", 200));
    pc.min_area_ha = c.get_double("estimate", "min_area_ha", 1.0);
    pc.min_compactness = c.get_double("estimate", "min_compactness", 0.2);
    return pc;
}

namespace pipeline_detail {

inline std::string points_txt_path(const PipelineConfig& pc, const std::string& label) {
    return join_path(pc.points_dir, "points_" + label + ".txt");
}

inline std::string points_las_path(const PipelineConfig& pc, const std::string& label) {
    return join_path(pc.points_dir, "points_" + label + ".las");
}

inline std::string cell_metrics_path(const PipelineConfig& pc, const std::string& label) {
    return join_path(pc.out_dir, "cell_metrics_" + label + ".csv");
}

inline std::string grid_json_path(const PipelineConfig& pc, const std::string& label) {
    return join_path(pc.out_dir, "grid_" + label + ".json");
}

inline std::string fmi_model_path(const PipelineConfig& pc, const std::string& label) {
    return join_path(pc.out_dir, "model_fmi_" + label + ".json");
}

inline std::string plot_metrics_path(const PipelineConfig& pc) {
    return join_path(pc.out_dir, "plot_metrics.csv");
}

inline std::string truth_path(const PipelineConfig& pc) {
    return join_path(pc.out_dir, "truth.csv");
}

inline std::string stand_estimates_path(const PipelineConfig& pc) {
    return join_path(pc.out_dir, "stand_estimates.csv");
}

inline void write_text(const std::string& path, const std::string& content) {
    auto out = csv::open_output(path);
    out << content;
}

inline PointCloud read_points_auto(const PipelineConfig& pc, const std::string& label) {
    const std::string txt = points_txt_path(pc, label);
    if (std::filesystem::exists(txt)) return read_point_text(txt);
    const std::string las = points_las_path(pc, label);
    if (std::filesystem::exists(las)) return read_las_subset(las);
    throw validation_error("no point file for ALS project '" + label + "': tried " + txt + " and " + las);
}

inline std::set<std::string> project_labels(const std::vector<StandPolygon>& stands) {
    std::set<std::string> labels;
    for (const auto& s : stands) {
        if (s.als_project.empty())
            throw validation_error("stand '" + s.id + "' has no ALS project");
        labels.insert(s.als_project);
    }
    return labels;
}

inline GridSpec project_grid(const std::vector<StandPolygon>& stands, const std::string& label,
                             double cell_size) {
    double min_x = 0.0, min_y = 0.0, max_x = 0.0, max_y = 0.0;
    bool first = true;
    for (const auto& s : stands) {
        if (s.als_project != label) continue;
        for (const auto& ring : s.rings)
            for (const auto& v : ring) {
                if (first) {
                    min_x = max_x = v.x;
                    min_y = max_y = v.y;
                    first = false;
                } else {
                    min_x = std::min(min_x, v.x);
                    max_x = std::max(max_x, v.x);
                    min_y = std::min(min_y, v.y);
                    max_y = std::max(max_y, v.y);
                }
            }
    }
    if (first)
        throw validation_error("no stands belong to ALS project '" + label + "'");
    return grid_covering(min_x, min_y, max_x, max_y, cell_size);
}

inline void write_grid_json(const GridSpec& grid, const std::string& path) {
    nlohmann::json j;
    j["origin_x"] = grid.origin_x;
    j["origin_y"] = grid.origin_y;
    j["cell_size"] = grid.cell_size;
    j["ncols"] = grid.ncols;
    j["nrows"] = grid.nrows;
    write_text(path, j.dump(1, '\t') + "\n");
}

inline GridSpec read_grid_json(const std::string& path) {
    const nlohmann::json j = read_model_json(path);
    GridSpec g;
    g.origin_x = j.at("origin_x").get<double>();
    g.origin_y = j.at("origin_y").get<double>();
    g.cell_size = j.at("cell_size").get<double>();
    g.ncols = j.at("ncols").get<int>();
    g.nrows = j.at("nrows").get<int>();
    return g;
}

// Grid-bucketed point index: cell metrics read their bucket directly, plot
// circles scan the few buckets their bounding box overlaps.
class BucketedCloud {
public:
    BucketedCloud(const PointCloud& cloud, const GridSpec& grid) : cloud_(cloud), grid_(grid) {
        for (std::size_t i = 0; i < cloud.points.size(); ++i) {
            const auto cell = grid.cell_of(cloud.points[i].x, cloud.points[i].y);
            if (grid.contains_cell(cell.first, cell.second)) buckets_[cell].push_back(i);
        }
    }

    PointCloud cell_cloud(int col, int row) const {
        PointCloud out;
        out.normalized = cloud_.normalized;
        const auto it = buckets_.find({col, row});
        if (it == buckets_.end()) return out;
        out.points.reserve(it->second.size());
        for (std::size_t i : it->second) out.points.push_back(cloud_.points[i]);
        return out;
    }

    PointCloud circle_cloud(double cx, double cy, double radius) const {
        PointCloud out;
        out.normalized = cloud_.normalized;
        const auto lo = grid_.cell_of(cx - radius, cy - radius);
        const auto hi = grid_.cell_of(cx + radius, cy + radius);
        for (int row = lo.second; row <= hi.second; ++row)
            for (int col = lo.first; col <= hi.first; ++col) {
                const auto it = buckets_.find({col, row});
                if (it == buckets_.end()) continue;
                for (std::size_t i : it->second) {
                    const Point& p = cloud_.points[i];
                    const double dx = p.x - cx, dy = p.y - cy;
                    if (dx * dx + dy * dy <= radius * radius) out.points.push_back(p);
                }
            }
        return out;
    }

private:
    const PointCloud& cloud_;
    const GridSpec& grid_;
    std::map<std::pair<int, int>, std::vector<std::size_t>> buckets_;
};

inline std::vector<PlotRecord> read_required_plots(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw validation_error("plot file does not exist: " + path);
    return read_plots_csv(path);
}

}

// Generates the synthetic study area and writes every input the later
// stages consume, plus the true stand volumes.
inline void cmd_simulate(const PipelineConfig& pc, std::ostream& log = std::cerr) {
    namespace pd = pipeline_detail;
    const auto& c = pc.raw;

    SimConfig sc;
    sc.seed = pc.seed;
    sc.extent_x = c.get_double("simulate", "extent_x", sc.extent_x);
    sc.extent_y = c.get_double("simulate", "extent_y", sc.extent_y);
    sc.n_projects = static_cast<std::size_t>(c.get_long("simulate", "n_projects",
                                                        static_cast<long long>(sc.n_projects)));
    sc.local_region_frac = c.get_double("simulate", "local_region_frac", sc.local_region_frac);
    sc.local_density_boost = c.get_double("simulate", "local_density_boost", sc.local_density_boost);
    sc.stand_target_area_m2 = c.get_double("simulate", "stand_target_area_m2", sc.stand_target_area_m2);
    sc.base_stem_density_ha = c.get_double("simulate", "base_stem_density_ha", sc.base_stem_density_ha);
    sc.height_low = c.get_double("simulate", "height_low", sc.height_low);
    sc.height_high = c.get_double("simulate", "height_high", sc.height_high);
    sc.local_height_low = c.get_double("simulate", "local_height_low", sc.local_height_low);
    sc.local_height_high = c.get_double("simulate", "local_height_high", sc.local_height_high);
    sc.pulse_density = c.get_doubles("simulate", "pulse_density", sc.pulse_density);
    sc.project_height_sd = c.get_double("simulate", "project_height_sd", sc.project_height_sd);
    sc.return_noise_sd = c.get_double("simulate", "return_noise_sd", sc.return_noise_sd);

    std::filesystem::create_directories(pc.out_dir);
    const SimWorld world = generate_world(sc);
    log << "generated world: " << world.stands.size() << " stands, " << world.trees.size()
        << " trees\n";

    write_asc(world.dtm, pc.dtm_path);
    write_stands_geojson(world.stands, pc.stands_path);

    for (std::size_t i = 0; i < sc.n_projects; ++i) {
        const std::string label = project_label(i);
        const PointCloud cloud = simulate_als(world, i);
        write_point_text(cloud, pd::points_txt_path(pc, label));
        log << "project " << label << ": " << cloud.points.size() << " returns\n";
    }

    PlotDesign nfi;
    nfi.kind = PlotDesignKind::systematic_cluster;
    nfi.n = static_cast<std::size_t>(c.get_long("simulate", "nfi_plots", 180));
    nfi.source = PlotSource::NFI;
    nfi.id_prefix = "p";
    nfi.cluster_spacing = c.get_double("simulate", "cluster_spacing", 60.0);
    const auto nfi_plots = sample_plots(world, nfi, derive_seed(sc.seed, 11));
    write_plots_csv(nfi_plots, pc.nfi_plots_path);

    const std::array<double, 4> local_region = {0.0, 0.0, sc.extent_x,
                                                sc.local_region_frac * sc.extent_y};
    PlotDesign fmi;
    fmi.kind = PlotDesignKind::random_grid;
    fmi.n = static_cast<std::size_t>(c.get_long("simulate", "fmi_plots", 60));
    fmi.source = PlotSource::FMI;
    fmi.id_prefix = "f";
    fmi.region = local_region;
    const auto fmi_plots = sample_plots(world, fmi, derive_seed(sc.seed, 12));
    write_plots_csv(fmi_plots, pc.fmi_plots_path);

    // Independent inventory: the largest local stands of one project.
    const std::string val_project = c.get("simulate", "validation_project", "B");
    const auto n_val_stands = static_cast<std::size_t>(c.get_long("simulate", "validation_stands", 6));
    std::vector<const StandPolygon*> val_candidates;
    for (const auto& s : world.stands) {
        if (s.als_project != val_project) continue;
        double cy = 0.0;
        for (std::size_t v = 0; v + 1 < s.rings[0].size(); ++v) cy += s.rings[0][v].y;
        cy /= static_cast<double>(s.rings[0].size() - 1);
        if (in_local_region(sc, cy)) val_candidates.push_back(&s);
    }
    std::sort(val_candidates.begin(), val_candidates.end(),
              [](const StandPolygon* a, const StandPolygon* b) {
                  const double aa = stand_area(*a), ab = stand_area(*b);
                  if (aa != ab) return aa > ab;
                  return a->id < b->id;
              });
    if (val_candidates.size() < n_val_stands)
        throw validation_error("only " + std::to_string(val_candidates.size()) +
                               " local stands in project '" + val_project + "', need " +
                               std::to_string(n_val_stands) + " validation stands");
    PlotDesign val;
    val.kind = PlotDesignKind::random_grid;
    val.n = static_cast<std::size_t>(c.get_long("simulate", "validation_plots", 60));
    val.source = PlotSource::VALIDATION;
    val.id_prefix = "v";
    for (std::size_t i = 0; i < n_val_stands; ++i) val.within_stands.push_back(val_candidates[i]->id);
    const auto val_plots = sample_plots(world, val, derive_seed(sc.seed, 13));
    write_plots_csv(val_plots, pc.validation_plots_path);

    std::string truth = "stand_id,als_project,area_ha,true_volume_ha,mean_height\n";
    for (const auto& s : world.stands) {
        truth += s.id + ',' + s.als_project + ',' + csv::format_double(stand_area(s) / 10'000.0) + ',';
        truth += csv::format_double(world.true_stand_volume_ha.at(s.id)) + ',';
        truth += csv::format_double(world.stand_mean_height.at(s.id)) + '\n';
    }
    pd::write_text(pd::truth_path(pc), truth);
    log << "plots: " << nfi_plots.size() << " nfi, " << fmi_plots.size() << " fmi, "
        << val_plots.size() << " validation\n";
}

// Normalizes each project's point cloud against the DTM and writes plot and
// grid-cell metrics.
inline void cmd_metrics(const PipelineConfig& pc, std::ostream& log = std::cerr) {
    namespace pd = pipeline_detail;
    if (!std::filesystem::exists(pc.dtm_path))
        throw validation_error("DTM does not exist: " + pc.dtm_path);
    const Raster dtm = read_asc(pc.dtm_path);
    const auto stands = read_stands_geojson(pc.stands_path);
    const auto labels = pd::project_labels(stands);

    std::vector<PlotRecord> plots;
    for (const auto* path : {&pc.nfi_plots_path, &pc.fmi_plots_path, &pc.validation_plots_path}) {
        const auto part = pd::read_required_plots(*path);
        plots.insert(plots.end(), part.begin(), part.end());
    }
    std::set<std::string> seen_ids;
    for (const auto& p : plots) {
        if (!seen_ids.insert(p.plot_id).second)
            throw validation_error("duplicate plot id across plot files: '" + p.plot_id + "'");
        if (!labels.count(p.als_project))
            throw validation_error("plot '" + p.plot_id + "' references unknown ALS project '" +
                                   p.als_project + "'");
    }

    std::filesystem::create_directories(pc.out_dir);
    const double radius = CirclePlot{}.radius();
    std::vector<std::pair<std::string, MetricVector>> plot_rows(plots.size());
    for (const auto& label : labels) {
        const PointCloud raw = pd::read_points_auto(pc, label);
        const auto normalized = normalize_heights(raw, dtm);
        const GridSpec grid = pd::project_grid(stands, label, pc.grid_cell);
        const pd::BucketedCloud buckets(normalized.cloud, grid);

        std::vector<std::pair<std::string, MetricVector>> cell_rows;
        cell_rows.reserve(static_cast<std::size_t>(grid.ncols) * grid.nrows);
        for (int row = 0; row < grid.nrows; ++row)
            for (int col = 0; col < grid.ncols; ++col) {
                const PointCloud cell = buckets.cell_cloud(col, row);
                cell_rows.emplace_back(GridSpec::cell_id(col, row),
                                       cell.points.empty() ? MetricVector{} : compute_metrics(cell));
            }
        write_metrics_csv(cell_rows, pd::cell_metrics_path(pc, label));
        pd::write_grid_json(grid, pd::grid_json_path(pc, label));

        std::size_t n_plots = 0;
        for (std::size_t i = 0; i < plots.size(); ++i) {
            if (plots[i].als_project != label) continue;
            const PointCloud clip = buckets.circle_cloud(plots[i].center_x, plots[i].center_y, radius);
            plot_rows[i] = {plots[i].plot_id, compute_metrics(clip)};
            ++n_plots;
        }
        log << "project " << label << ": " << normalized.cloud.points.size() << " points ("
            << normalized.rejected() << " off-terrain), " << cell_rows.size() << " cells, "
            << n_plots << " plots\n";
    }
    write_metrics_csv(plot_rows, pd::plot_metrics_path(pc));
}

enum class FitFamily { all, fmi_loglog, nfi_mixed, nfi_fmi, nfi_adjusted };

inline FitFamily parse_fit_family(const std::string& name) {
    if (name.empty() || name == "all") return FitFamily::all;
    if (name == "fmi_loglog") return FitFamily::fmi_loglog;
    if (name == "nfi_mixed") return FitFamily::nfi_mixed;
    if (name == "nfi_fmi") return FitFamily::nfi_fmi;
    if (name == "nfi_adjusted") return FitFamily::nfi_adjusted;
    throw validation_error("unknown model family '" + name +
                           "' (expected fmi_loglog, nfi_mixed, nfi_fmi, nfi_adjusted or all)");
}

namespace pipeline_detail {

struct FitInputs {
    std::vector<PlotSample> nfi;
    std::vector<PlotSample> fmi;
    std::map<std::string, std::vector<PlotSample>> fmi_by_project;
};

inline FitInputs load_fit_inputs(const PipelineConfig& pc) {
    const auto metric_rows = read_metrics_csv(plot_metrics_path(pc));
    std::map<std::string, MetricVector> metrics_by_id(metric_rows.begin(), metric_rows.end());

    FitInputs in;
    const auto nfi_plots = filter_stratum(read_required_plots(pc.nfi_plots_path), pc.stratum, pc.strata);
    const auto fmi_plots = filter_stratum(read_required_plots(pc.fmi_plots_path), pc.stratum, pc.strata);
    in.nfi = join_samples(nfi_plots, metrics_by_id);
    in.fmi = join_samples(fmi_plots, metrics_by_id);
    for (const auto& s : in.fmi) in.fmi_by_project[s.project].push_back(s);
    return in;
}

inline MixedFitOptions mixed_options(const PipelineConfig& pc) {
    MixedFitOptions opts;
    opts.fixed_theta = pc.fixed_theta;
    return opts;
}

inline std::string mixed_fit_log(const MixedModel& m) {
    std::string log;
    log += "plots: " + std::to_string(m.n_obs) + '\n';
    log += "groups: " + std::to_string(m.n_groups) + '\n';
    for (const auto& kv : m.group_sizes)
        log += "group " + kv.first + ": " + std::to_string(kv.second) + '\n';
    log += "theta: " + csv::format_double(m.theta) + '\n';
    log += "sigma_b: " + csv::format_double(m.sigma_b) + '\n';
    log += "sigma_eps: " + csv::format_double(m.sigma_eps) + '\n';
    log += "reml_loglik: " + csv::format_double(m.reml_loglik) + '\n';
    log += "evaluations: " + std::to_string(m.likelihood_trace.size()) + '\n';
    for (const auto& [theta, ll] : m.likelihood_trace)
        log += "eval theta " + csv::format_double(theta) + " loglik " + csv::format_double(ll) + '\n';
    if (m.boundary) log += "warning: variance ratio stopped at the search bound\n";
    return log;
}

}

inline void cmd_fit(const PipelineConfig& pc, FitFamily family = FitFamily::all,
                    std::ostream& log = std::cerr) {
    namespace pd = pipeline_detail;
    const auto inputs = pd::load_fit_inputs(pc);
    std::filesystem::create_directories(pc.out_dir);

    const bool all = family == FitFamily::all;
    if (all || family == FitFamily::fmi_loglog) {
        if (inputs.fmi_by_project.empty())
            throw validation_error("no FMI plots to fit local models on");
        for (const auto& kv : inputs.fmi_by_project) {
            const auto result = stepwise_select(kv.second, metric_names(), pc.max_predictors);
            write_model_json(loglog_to_json(result.model), pd::fmi_model_path(pc, kv.first));

            std::string fit_log;
            fit_log += "project: " + kv.first + '\n';
            fit_log += "plots: " + std::to_string(kv.second.size()) + '\n';
            fit_log += "initial_aic: " + csv::format_double(result.initial_aic) + '\n';
            for (const auto& step : result.trace)
                fit_log += std::string("step ") +
                           (step.action == StepwiseStep::Action::add ? "add " : "drop ") + step.metric +
                           " aic " + csv::format_double(step.aic) + '\n';
            std::string names;
            for (const auto& p : result.model.predictors) names += (names.empty() ? "" : ", ") + p;
            fit_log += "predictors: " + names + '\n';
            fit_log += "sigma2: " + csv::format_double(result.model.sigma2) + '\n';
            fit_log += "aic: " + csv::format_double(result.model.aic) + '\n';
            pd::write_text(pd::join_path(pc.out_dir, "fit_fmi_" + kv.first + ".log"), fit_log);
            log << "fmi model " << kv.first << ": " << result.model.predictors.size()
                << " predictors, aic " << result.model.aic << "\n";
        }
    }

    const auto opts = pd::mixed_options(pc);
    if (all || family == FitFamily::nfi_mixed) {
        const MixedModel m = fit_mixed(inputs.nfi, opts);
        write_model_json(mixed_to_json(m), pd::join_path(pc.out_dir, "model_nfi.json"));
        pd::write_text(pd::join_path(pc.out_dir, "fit_nfi.log"), pd::mixed_fit_log(m));
        log << "nfi model: " << m.n_groups << " groups, theta " << m.theta << "\n";
        if (m.boundary) log << "warning: nfi model variance ratio at search bound\n";
    }
    if (all || family == FitFamily::nfi_fmi) {
        const auto aug = augment_with_top_plots(inputs.nfi, inputs.fmi,
                                                static_cast<int>(inputs.fmi.size()));
        const MixedModel m = fit_mixed(aug.plots, opts);
        write_model_json(mixed_to_json(m), pd::join_path(pc.out_dir, "model_nfi_fmi.json"));
        pd::write_text(pd::join_path(pc.out_dir, "fit_nfi_fmi.log"), pd::mixed_fit_log(m));
        log << "nfi+fmi model: " << m.n_obs << " plots\n";
    }
    if (all || family == FitFamily::nfi_adjusted) {
        const auto aug = augment_with_top_plots(inputs.nfi, inputs.fmi, pc.top_k);
        const MixedModel m = fit_mixed(aug.plots, opts);
        write_model_json(mixed_to_json(m), pd::join_path(pc.out_dir, "model_nfi_adjusted.json"));
        std::string fit_log = pd::mixed_fit_log(m);
        std::string ids;
        for (const auto& id : aug.appended_ids) ids += (ids.empty() ? "" : ", ") + id;
        fit_log += "appended: " + ids + '\n';
        for (const auto& w : aug.warnings) fit_log += "warning: " + w + '\n';
        pd::write_text(pd::join_path(pc.out_dir, "fit_nfi_adjusted.log"), fit_log);
        log << "adjusted nfi model: appended " << aug.appended_ids.size() << " plots\n";
    }
}

namespace pipeline_detail {

struct LoadedModels {
    std::map<std::string, LogLogModel> fmi;
    MixedModel nfi;
    MixedModel nfi_fmi;
    MixedModel nfi_adjusted;
};

inline LoadedModels load_models(const PipelineConfig& pc, const std::set<std::string>& labels) {
    LoadedModels m;
    for (const auto& label : labels)
        m.fmi[label] = loglog_from_json(read_model_json(fmi_model_path(pc, label)));
    m.nfi = mixed_from_json(read_model_json(join_path(pc.out_dir, "model_nfi.json")));
    m.nfi_fmi = mixed_from_json(read_model_json(join_path(pc.out_dir, "model_nfi_fmi.json")));
    m.nfi_adjusted = mixed_from_json(read_model_json(join_path(pc.out_dir, "model_nfi_adjusted.json")));
    return m;
}

inline std::map<std::string, MetricVector> load_cell_metrics(const PipelineConfig& pc,
                                                             const std::string& label) {
    const auto rows = read_metrics_csv(cell_metrics_path(pc, label));
    return {rows.begin(), rows.end()};
}

}

// Synthetic estimates for a seeded stand sample, one row per stand and model.
inline void cmd_estimate(const PipelineConfig& pc, std::ostream& log = std::cerr) {
    namespace pd = pipeline_detail;
    const auto stands = read_stands_geojson(pc.stands_path);
    const auto labels = pd::project_labels(stands);
    const auto models = pd::load_models(pc, labels);

    const auto selected = select_stands(stands, pc.stands_per_project, pc.min_area_ha,
                                        pc.min_compactness, derive_seed(pc.seed, 21));
    log << "selected " << selected.size() << " stands of " << stands.size() << "\n";

    std::filesystem::create_directories(pc.out_dir);
    std::string out = "stand_id,als_project,model,value,n_cells,n_skipped,flagged\n";
    std::string current_label;
    GridSpec grid;
    std::map<std::string, MetricVector> cells;
    for (const auto& stand : selected) {
        if (stand.als_project != current_label) {
            current_label = stand.als_project;
            grid = pd::read_grid_json(pd::grid_json_path(pc, current_label));
            cells = pd::load_cell_metrics(pc, current_label);
        }
        const LogLogModel& local = models.fmi.at(stand.als_project);
        const auto append = [&out, &stand](const std::string& model, const StandEstimate& e) {
            out += e.stand_id + ',' + stand.als_project + ',' + model + ',' +
                   csv::format_double(e.value) + ',' + std::to_string(e.n_units) + ',' +
                   std::to_string(e.n_skipped) + ',' + (e.flagged ? "1" : "0") + '\n';
        };
        append("fmi", synthetic_stand_estimate(
                          [&local](const MetricVector& mv) { return predict_loglog(local, mv); }, grid,
                          cells, stand));
        const auto mixed_est = [&](const MixedModel& m) {
            return synthetic_stand_estimate(
                [&m, &stand](const MetricVector& mv) { return predict_mixed(m, mv, stand.als_project); },
                grid, cells, stand);
        };
        append("nfi", mixed_est(models.nfi));
        append("nfi_fmi", mixed_est(models.nfi_fmi));
        append("nfi_adjusted", mixed_est(models.nfi_adjusted));
    }
    pd::write_text(pd::stand_estimates_path(pc), out);
}

namespace pipeline_detail {

// Prediction at every eval row; rows that are part of the training set get a
// leave-one-out refit so the model never sees the row it predicts.
inline std::vector<double> mixed_cv_predictions(const std::vector<PlotSample>& train,
                                                const MixedModel& full_model,
                                                const std::vector<PlotSample>& eval,
                                                const MixedFitOptions& opts) {
    std::set<std::string> train_ids;
    for (const auto& t : train) train_ids.insert(t.plot_id);
    std::vector<double> preds;
    preds.reserve(eval.size());
    for (const auto& e : eval) {
        if (train_ids.count(e.plot_id)) {
            std::vector<PlotSample> fold;
            fold.reserve(train.size() - 1);
            for (const auto& t : train)
                if (t.plot_id != e.plot_id) fold.push_back(t);
            const MixedModel m = fit_mixed(fold, opts);
            preds.push_back(predict_mixed(m, e.metrics, e.project));
        } else {
            preds.push_back(predict_mixed(full_model, e.metrics, e.project));
        }
    }
    return preds;
}

inline std::vector<ComparisonRow> project_split_rows(const std::string& block,
                                                     const std::vector<PlotSample>& samples,
                                                     const std::vector<double>& preds,
                                                     const std::string& group_prefix,
                                                     const std::string& pooled_label,
                                                     ReportLevel level) {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_project;
    std::vector<double> all_obs, all_pred;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        by_project[samples[i].project].first.push_back(samples[i].volume_ha);
        by_project[samples[i].project].second.push_back(preds[i]);
        all_obs.push_back(samples[i].volume_ha);
        all_pred.push_back(preds[i]);
    }
    std::vector<ComparisonRow> rows;
    for (const auto& kv : by_project)
        rows.push_back({block, group_prefix + kv.first,
                        accuracy(kv.second.first, kv.second.second, level, group_prefix + kv.first)});
    rows.push_back({block, pooled_label, accuracy(all_obs, all_pred, level, pooled_label)});
    return rows;
}

struct StandEstimateRow {
    std::string stand_id;
    std::string project;
    std::string model;
    double value = 0.0;
};

inline std::vector<StandEstimateRow> read_stand_estimates(const std::string& path) {
    const auto lines = csv::read_lines(path);
    if (lines.empty() || csv::split(lines[0])[0] != "stand_id")
        throw validation_error(path + ": not a stand estimate file");
    std::vector<StandEstimateRow> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = csv::split(lines[i]);
        if (f.size() != 7) throw parse_error(path, i + 1, "expected 7 fields");
        rows.push_back({f[0], f[1], f[2], csv::parse_double(f[3], path, i + 1)});
    }
    return rows;
}

inline void write_report(const PipelineConfig& pc, const std::string& name,
                         const ComparisonTable& table) {
    write_text(join_path(pc.out_dir, name + ".csv"), comparison_to_csv(table));
    write_text(join_path(pc.out_dir, name + ".txt"), comparison_to_text(table));
}

}

// Accuracy reports: local-model cross-validation, pooled-model accuracy at
// the local plots, stand-level model comparison, and independent validation.
inline void cmd_validate(const PipelineConfig& pc, std::ostream& log = std::cerr) {
    namespace pd = pipeline_detail;
    const auto inputs = pd::load_fit_inputs(pc);
    const auto stands = read_stands_geojson(pc.stands_path);
    const auto labels = pd::project_labels(stands);
    const auto models = pd::load_models(pc, labels);
    const auto opts = pd::mixed_options(pc);
    std::filesystem::create_directories(pc.out_dir);

    // Local log-log models assessed on their own modeling plots.
    {
        std::vector<ComparisonRow> rows;
        std::vector<PlotSample> pooled_samples;
        std::vector<double> pooled_preds;
        for (const auto& kv : inputs.fmi_by_project) {
            const auto preds = pc.loocv_reselect
                                   ? loocv_loglog_reselect(kv.second, metric_names(), pc.max_predictors)
                                   : loocv_loglog(kv.second, models.fmi.at(kv.first).predictors);
            std::vector<double> obs;
            for (const auto& s : kv.second) obs.push_back(s.volume_ha);
            rows.push_back({"FMI", "ALS project " + kv.first,
                            accuracy(obs, preds, ReportLevel::plot, "ALS project " + kv.first)});
            pooled_samples.insert(pooled_samples.end(), kv.second.begin(), kv.second.end());
            pooled_preds.insert(pooled_preds.end(), preds.begin(), preds.end());
        }
        std::vector<double> obs;
        for (const auto& s : pooled_samples) obs.push_back(s.volume_ha);
        rows.push_back({"FMI", "total", accuracy(obs, pooled_preds, ReportLevel::plot, "total")});
        pd::write_report(pc, "loocv_local_models",
                         compare_models("Local model cross-validation at modeling plots", rows, true, true));
    }

    // Pooled-model variants evaluated at the local plots. Plots that are in
    // a variant's training data are predicted by leave-one-out refits.
    const std::string top_block = "NFI & top " + std::to_string(pc.top_k) + " FMI";
    {
        std::vector<ComparisonRow> rows;
        const auto nfi_preds = [&] {
            std::vector<double> preds;
            for (const auto& s : inputs.fmi) preds.push_back(predict_mixed(models.nfi, s.metrics, s.project));
            return preds;
        }();
        auto block = pd::project_split_rows("NFI", inputs.fmi, nfi_preds, "ALS project ", "total",
                                            ReportLevel::plot);
        rows.insert(rows.end(), block.begin(), block.end());

        const auto all_aug = augment_with_top_plots(inputs.nfi, inputs.fmi,
                                                    static_cast<int>(inputs.fmi.size()));
        const auto fmi_preds = pd::mixed_cv_predictions(all_aug.plots, models.nfi_fmi, inputs.fmi, opts);
        block = pd::project_split_rows("NFI & FMI", inputs.fmi, fmi_preds, "ALS project ", "total",
                                       ReportLevel::plot);
        rows.insert(rows.end(), block.begin(), block.end());

        const auto top_aug = augment_with_top_plots(inputs.nfi, inputs.fmi, pc.top_k);
        const auto top_preds = pd::mixed_cv_predictions(top_aug.plots, models.nfi_adjusted, inputs.fmi, opts);
        block = pd::project_split_rows(top_block, inputs.fmi, top_preds, "ALS project ", "total",
                                       ReportLevel::plot);
        rows.insert(rows.end(), block.begin(), block.end());
        pd::write_report(pc, "regional_model_plot_accuracy",
                         compare_models("Pooled-model accuracy at local plots", rows, false, true));
    }

    // Stand-level agreement between local and pooled synthetic estimates.
    {
        const auto est_rows = pd::read_stand_estimates(pd::stand_estimates_path(pc));
        std::map<std::string, std::string> stand_project;
        std::map<std::string, std::vector<StandEstimate>> by_model;
        for (const auto& r : est_rows) {
            stand_project[r.stand_id] = r.project;
            StandEstimate e;
            e.stand_id = r.stand_id;
            e.method = EstimateMethod::synthetic_grid;
            e.value = r.value;
            e.n_units = 1;
            by_model[r.model].push_back(e);
        }
        for (const auto* key : {"fmi", "nfi", "nfi_fmi", "nfi_adjusted"})
            if (!by_model.count(key))
                throw validation_error(pd::stand_estimates_path(pc) + ": no rows for model '" +
                                       std::string(key) + "'");
        std::vector<ComparisonRow> rows;
        const std::map<std::string, std::string> blocks = {
            {"nfi", "NFI"}, {"nfi_fmi", "NFI & FMI"}, {"nfi_adjusted", top_block}};
        for (const auto* key : {"nfi", "nfi_fmi", "nfi_adjusted"}) {
            const auto block = paired_stand_rows(blocks.at(key), by_model.at("fmi"), by_model.at(key),
                                                 stand_project, "All");
            rows.insert(rows.end(), block.begin(), block.end());
        }
        pd::write_report(pc, "stand_model_comparison",
                         compare_models("Synthetic stand estimates: local vs pooled models", rows,
                                        false, false));

        // With simulator truth available, also score every model against it.
        if (std::filesystem::exists(pd::truth_path(pc))) {
            const auto lines = csv::read_lines(pd::truth_path(pc));
            std::map<std::string, double> truth;
            for (std::size_t i = 1; i < lines.size(); ++i) {
                if (lines[i].empty()) continue;
                const auto f = csv::split(lines[i]);
                truth[f[0]] = csv::parse_double(f[3], pd::truth_path(pc), i + 1);
            }
            std::vector<ComparisonRow> truth_rows;
            const std::map<std::string, std::string> truth_blocks = {{"fmi", "FMI"},
                                                                     {"nfi", "NFI"},
                                                                     {"nfi_fmi", "NFI & FMI"},
                                                                     {"nfi_adjusted", top_block}};
            for (const auto* key : {"fmi", "nfi", "nfi_fmi", "nfi_adjusted"}) {
                std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_project;
                std::vector<double> all_obs, all_pred;
                for (const auto& e : by_model.at(key)) {
                    const auto it = truth.find(e.stand_id);
                    if (it == truth.end())
                        throw validation_error("stand '" + e.stand_id + "' missing from " +
                                               pd::truth_path(pc));
                    const auto& project = stand_project.at(e.stand_id);
                    by_project[project].first.push_back(it->second);
                    by_project[project].second.push_back(e.value);
                    all_obs.push_back(it->second);
                    all_pred.push_back(e.value);
                }
                const auto& label = truth_blocks.at(key);
                for (const auto& kv : by_project)
                    truth_rows.push_back({label, kv.first,
                                          accuracy(kv.second.first, kv.second.second, ReportLevel::stand,
                                                   kv.first)});
                truth_rows.push_back({label, "All",
                                      accuracy(all_obs, all_pred, ReportLevel::stand, "All")});
            }
            pd::write_report(pc, "stand_truth_accuracy",
                             compare_models("Synthetic stand estimates vs simulated truth", truth_rows,
                                            true, true));
        }
    }

    // Independent inventory: plot-level predictions and stand-level means
    // against the direct estimates.
    {
        const auto metric_rows = read_metrics_csv(pd::plot_metrics_path(pc));
        std::map<std::string, MetricVector> metrics_by_id(metric_rows.begin(), metric_rows.end());
        const auto val_plots = filter_stratum(pd::read_required_plots(pc.validation_plots_path),
                                              pc.stratum, pc.strata);
        const auto val_samples = join_samples(val_plots, metrics_by_id);
        if (val_samples.empty())
            throw validation_error("no validation plots after stratum filtering");

        std::map<std::string, std::vector<std::size_t>> plots_by_stand;
        for (std::size_t i = 0; i < val_samples.size(); ++i) {
            const auto& plot = val_plots[i];
            const StandPolygon* home = nullptr;
            for (const auto& s : stands)
                if (point_in_polygon(s, plot.center_x, plot.center_y)) {
                    home = &s;
                    break;
                }
            if (!home)
                throw validation_error("validation plot '" + plot.plot_id + "' lies in no stand");
            plots_by_stand[home->id].push_back(i);
        }

        const std::vector<std::pair<std::string, std::function<double(const PlotSample&)>>> families = {
            {"FMI model",
             [&models](const PlotSample& s) { return predict_loglog(models.fmi.at(s.project), s.metrics); }},
            {"NFI model",
             [&models](const PlotSample& s) { return predict_mixed(models.nfi, s.metrics, s.project); }},
            {"adjusted NFI model", [&models](const PlotSample& s) {
                 return predict_mixed(models.nfi_adjusted, s.metrics, s.project);
             }}};

        std::vector<ComparisonRow> rows;
        std::map<std::string, std::vector<double>> family_preds;
        for (const auto& fam : families) {
            std::vector<double> obs, preds;
            for (const auto& s : val_samples) {
                obs.push_back(s.volume_ha);
                preds.push_back(fam.second(s));
            }
            family_preds[fam.first] = preds;
            rows.push_back({"plot", fam.first, accuracy(obs, preds, ReportLevel::plot, fam.first)});
        }
        for (const auto& fam : families) {
            std::vector<double> direct_values, model_means;
            for (const auto& kv : plots_by_stand) {
                double direct = 0.0, mean_pred = 0.0;
                for (std::size_t i : kv.second) {
                    direct += val_samples[i].volume_ha;
                    mean_pred += family_preds[fam.first][i];
                }
                direct_values.push_back(direct / static_cast<double>(kv.second.size()));
                model_means.push_back(mean_pred / static_cast<double>(kv.second.size()));
            }
            rows.push_back({"stand", fam.first,
                            accuracy(direct_values, model_means, ReportLevel::stand, fam.first)});
        }
        pd::write_report(pc, "independent_validation",
                         compare_models("Independent inventory validation", rows, true, true));
        log << "validation: " << val_samples.size() << " plots in " << plots_by_stand.size()
            << " stands\n";
    }
}

}
