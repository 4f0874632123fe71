#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canopy/dataset.hpp"
#include "canopy/errors.hpp"
#include "canopy/geometry.hpp"
#include "canopy/inventory.hpp"
#include "canopy/point_cloud.hpp"
#include "canopy/raster.hpp"
#include "canopy/rng.hpp"

namespace canopy {

struct TrueModel {
    std::array<double, 4> beta = {23.73, 19.75, 0.98, -63.34};
    double sigma_b = 1.39;
    double sigma_eps = 17.08;
};

// Knobs for the synthetic world. Realism is not the goal; a known monotone
// height-to-volume signal with genuine between-project differences is.
struct SimConfig {
    std::uint64_t seed = 1;
    double extent_x = 1000.0;
    double extent_y = 600.0;
    std::size_t n_projects = 3;
    // Southern strip with an ongoing management inventory: crosses every
    // project band, carries taller and denser forest than the region at
    // large, so a regionally trained model is biased there.
    double local_region_frac = 0.35;
    double local_density_boost = 1.25;
    double stand_target_area_m2 = 20'000.0;
    double base_stem_density_ha = 600.0;
    double density_height_power = 0.6;
    double reference_height = 18.0;
    double height_low = 10.0;
    double height_high = 24.0;
    double local_height_low = 16.0;
    double local_height_high = 28.0;
    double tree_volume_coef = 2.08e-4;
    double tree_volume_power = 2.6;
    std::vector<double> pulse_density = {5.0, 2.0, 2.0};
    double project_height_sd = 0.06;
    double return_noise_sd = 0.10;
    double second_return_prob = 0.5;
    double crown_base_frac = 0.4;
    TrueModel true_model;
};

struct Tree {
    double x = 0.0;
    double y = 0.0;
    double height = 0.0;
    double crown_radius = 0.0;
    double volume = 0.0;
};

// Smooth analytic terrain; the DTM raster samples it, ALS returns sit on it.
struct Terrain {
    double base = 50.0;
    std::array<double, 4> amp{};
    std::array<double, 4> fx{};
    std::array<double, 4> fy{};
    std::array<double, 4> phase{};

    double operator()(double x, double y) const {
        double z = base;
        for (std::size_t k = 0; k < 4; ++k)
            z += amp[k] * std::sin(2.0 * pi * (fx[k] * x + fy[k] * y) + phase[k]);
        return z;
    }
};

struct SimWorld {
    SimConfig config;
    Terrain terrain;
    Raster dtm;
    std::vector<StandPolygon> stands;
    std::vector<Tree> trees;
    std::map<std::string, double> true_stand_volume_ha;
    std::map<std::string, double> stand_mean_height;
    std::vector<double> project_height_factor;
};

inline std::string project_label(std::size_t index) {
    if (index >= 26)
        throw validation_error("at most 26 ALS projects are supported");
    return std::string(1, static_cast<char>('A' + index));
}

inline std::size_t project_of_x(const SimConfig& config, double x) {
    const double band = config.extent_x / static_cast<double>(config.n_projects);
    const auto i = static_cast<long long>(std::floor(x / band));
    const long long hi = static_cast<long long>(config.n_projects) - 1;
    return static_cast<std::size_t>(std::clamp(i, 0LL, hi));
}

inline bool in_local_region(const SimConfig& config, double y) {
    return y < config.local_region_frac * config.extent_y;
}

namespace sim_detail {

struct Rect {
    double x0, y0, x1, y1;
    double area() const { return (x1 - x0) * (y1 - y0); }
};

// Tree lookup by stem position, for crown hit tests over millions of pulses.
class TreeHash {
public:
    TreeHash(const std::vector<Tree>& trees, double cell) : trees_(trees), cell_(cell) {
        for (std::size_t i = 0; i < trees.size(); ++i) {
            buckets_[key(trees[i].x, trees[i].y)].push_back(i);
            reach_ = std::max(reach_, trees[i].crown_radius);
        }
    }

    template <typename Visit>
    void near(double x, double y, Visit&& visit) const {
        const auto r = static_cast<long long>(std::ceil(reach_ / cell_));
        const long long cx = cell_index(x), cy = cell_index(y);
        for (long long dy = -r; dy <= r; ++dy)
            for (long long dx = -r; dx <= r; ++dx) {
                const auto it = buckets_.find((cx + dx) * 1'000'003LL + (cy + dy));
                if (it == buckets_.end()) continue;
                for (std::size_t i : it->second) visit(trees_[i]);
            }
    }

private:
    long long cell_index(double v) const { return static_cast<long long>(std::floor(v / cell_)); }
    long long key(double x, double y) const { return cell_index(x) * 1'000'003LL + cell_index(y); }

    const std::vector<Tree>& trees_;
    double cell_;
    double reach_ = 0.0;
    std::map<long long, std::vector<std::size_t>> buckets_;
};

inline double crown_surface_height(const Tree& t, double dist, double crown_base_frac) {
    if (dist > t.crown_radius) return 0.0;
    return t.height * (1.0 - (1.0 - crown_base_frac) * dist / t.crown_radius);
}

}

inline void validate_sim_config(const SimConfig& config) {
    if (!(config.extent_x > 0.0) || !(config.extent_y > 0.0))
        throw validation_error("simulation extent must be positive");
    if (config.n_projects < 2)
        throw validation_error("simulation needs at least 2 ALS projects, got " +
                               std::to_string(config.n_projects));
    if (!(config.local_region_frac > 0.0) || !(config.local_region_frac < 1.0))
        throw validation_error("local region fraction must be in (0, 1)");
    if (!(config.local_density_boost > 0.0))
        throw validation_error("local density boost must be positive");
    if (!(config.stand_target_area_m2 > 0.0) || !(config.base_stem_density_ha > 0.0))
        throw validation_error("stand target area and stem density must be positive");
    for (double d : config.pulse_density)
        if (!(d > 0.0)) throw validation_error("pulse densities must be positive");
    if (config.pulse_density.empty())
        throw validation_error("at least one pulse density is required");
}

inline double pulse_density_of(const SimConfig& config, std::size_t project) {
    return config.pulse_density[std::min(project, config.pulse_density.size() - 1)];
}

inline SimWorld generate_world(const SimConfig& config) {
    validate_sim_config(config);
    SimWorld world;
    world.config = config;

    Rng terrain_rng(derive_seed(config.seed, 1));
    for (std::size_t k = 0; k < 4; ++k) {
        world.terrain.amp[k] = terrain_rng.uniform(0.5, 2.5);
        world.terrain.fx[k] = terrain_rng.uniform(0.2, 1.5) / 1000.0;
        world.terrain.fy[k] = terrain_rng.uniform(0.2, 1.5) / 1000.0;
        world.terrain.phase[k] = terrain_rng.uniform(0.0, 2.0 * pi);
    }

    const double cell = 10.0;
    Raster dtm;
    dtm.cell_size = cell;
    dtm.origin_x = -cell;
    dtm.origin_y = -cell;
    dtm.ncols = static_cast<int>(std::ceil(config.extent_x / cell)) + 3;
    dtm.nrows = static_cast<int>(std::ceil(config.extent_y / cell)) + 3;
    dtm.values.resize(static_cast<std::size_t>(dtm.ncols) * dtm.nrows);
    for (int row = 0; row < dtm.nrows; ++row)
        for (int col = 0; col < dtm.ncols; ++col)
            dtm.values[static_cast<std::size_t>(row) * dtm.ncols + col] =
                world.terrain(dtm.center_x(col), dtm.center_y_south(dtm.nrows - 1 - row));
    world.dtm = std::move(dtm);

    // Binary-space partition of the extent into rectangular stands.
    Rng stand_rng(derive_seed(config.seed, 2));
    std::vector<sim_detail::Rect> open = {{0.0, 0.0, config.extent_x, config.extent_y}};
    std::vector<sim_detail::Rect> leaves;
    while (!open.empty()) {
        const sim_detail::Rect r = open.back();
        open.pop_back();
        if (r.area() <= config.stand_target_area_m2) {
            leaves.push_back(r);
            continue;
        }
        const double frac = stand_rng.uniform(0.4, 0.6);
        if (r.x1 - r.x0 >= r.y1 - r.y0) {
            const double xm = r.x0 + frac * (r.x1 - r.x0);
            open.push_back({xm, r.y0, r.x1, r.y1});
            open.push_back({r.x0, r.y0, xm, r.y1});
        } else {
            const double ym = r.y0 + frac * (r.y1 - r.y0);
            open.push_back({r.x0, ym, r.x1, r.y1});
            open.push_back({r.x0, r.y0, r.x1, ym});
        }
    }

    Rng tree_rng(derive_seed(config.seed, 3));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        const auto& r = leaves[i];
        StandPolygon stand;
        stand.id = "s" + std::to_string(i + 1);
        stand.stratum = "spruce_mature";
        stand.als_project = project_label(project_of_x(config, (r.x0 + r.x1) / 2.0));
        stand.rings = {{{r.x0, r.y0}, {r.x1, r.y0}, {r.x1, r.y1}, {r.x0, r.y1}, {r.x0, r.y0}}};
        validate_stand(stand);

        const bool local = in_local_region(config, (r.y0 + r.y1) / 2.0);
        const double h_lo = local ? config.local_height_low : config.height_low;
        const double h_hi = local ? config.local_height_high : config.height_high;
        const double stand_height = tree_rng.uniform(h_lo, h_hi);
        world.stand_mean_height[stand.id] = stand_height;

        const double area_ha = r.area() / 10'000.0;
        const double stems_ha = config.base_stem_density_ha * (local ? config.local_density_boost : 1.0) *
                                std::pow(stand_height / config.reference_height, config.density_height_power);
        const auto n_trees = tree_rng.poisson(stems_ha * area_ha);

        double volume_sum = 0.0;
        for (std::uint64_t t = 0; t < n_trees; ++t) {
            Tree tree;
            tree.x = tree_rng.uniform(r.x0, r.x1);
            tree.y = tree_rng.uniform(r.y0, r.y1);
            const double m = std::clamp(1.0 + 0.18 * tree_rng.normal(), 0.5, 1.6);
            tree.height = stand_height * m;
            tree.crown_radius = 0.18 * tree.height + 0.3;
            tree.volume = config.tree_volume_coef * std::pow(tree.height, config.tree_volume_power);
            volume_sum += tree.volume;
            world.trees.push_back(tree);
        }
        world.true_stand_volume_ha[stand.id] = volume_sum / area_ha;
        world.stands.push_back(std::move(stand));
    }

    Rng effect_rng(derive_seed(config.seed, 4));
    world.project_height_factor.resize(config.n_projects);
    for (std::size_t i = 0; i < config.n_projects; ++i)
        world.project_height_factor[i] = 1.0 + config.project_height_sd * effect_rng.normal();

    return world;
}

// Simulates one project's acquisition over its extent band. Each pulse gets
// a canopy first return when it lands in a crown (tallest crown wins), and
// a ground return always or as the second echo. The project's multiplicative
// height factor perturbs canopy heights only, giving the between-project
// slope differences a random-effects model can pick up.
inline PointCloud simulate_als(const SimWorld& world, std::size_t project) {
    const auto& config = world.config;
    if (project >= config.n_projects)
        throw validation_error("project index " + std::to_string(project) + " out of range");

    const double band = config.extent_x / static_cast<double>(config.n_projects);
    const double x_lo = band * static_cast<double>(project);
    const double x_hi = x_lo + band;
    const double factor = world.project_height_factor[project];

    Rng rng(derive_seed(config.seed, 100 + project));
    const double area = band * config.extent_y;
    const auto n_pulses = rng.poisson(pulse_density_of(config, project) * area);

    const sim_detail::TreeHash hash(world.trees, 10.0);

    PointCloud cloud;
    cloud.normalized = false;
    cloud.points.reserve(static_cast<std::size_t>(static_cast<double>(n_pulses) * 1.5));
    for (std::uint64_t p = 0; p < n_pulses; ++p) {
        const double x = rng.uniform(x_lo, x_hi);
        const double y = rng.uniform(0.0, config.extent_y);
        const double ground = world.terrain(x, y);

        double canopy = 0.0;
        hash.near(x, y, [&](const Tree& t) {
            const double d = std::hypot(x - t.x, y - t.y);
            canopy = std::max(canopy, sim_detail::crown_surface_height(t, d, config.crown_base_frac));
        });

        if (canopy > 0.0) {
            const double z1 = ground + factor * canopy + config.return_noise_sd * rng.normal();
            if (rng.uniform() < config.second_return_prob) {
                const double z2 = ground + config.return_noise_sd * rng.normal();
                cloud.points.push_back({x, y, z1, 1, 2});
                cloud.points.push_back({x, y, z2, 2, 2});
            } else {
                cloud.points.push_back({x, y, z1, 1, 1});
            }
        } else {
            cloud.points.push_back({x, y, ground + config.return_noise_sd * rng.normal(), 1, 1});
        }
    }
    return cloud;
}

enum class PlotDesignKind { systematic_cluster, random_grid };

struct PlotDesign {
    PlotDesignKind kind = PlotDesignKind::systematic_cluster;
    std::size_t n = 90;
    PlotSource source = PlotSource::NFI;
    std::string id_prefix = "p";
    std::vector<std::string> within_stands;
    std::optional<std::array<double, 4>> region;  // x0, y0, x1, y1
    double cluster_spacing = 60.0;
    double grid_spacing = 20.0;
};

namespace sim_detail {

inline double plot_truth_volume_ha(const TreeHash& hash, double x, double y) {
    const double radius = CirclePlot{}.radius();
    double volume = 0.0;
    hash.near(x, y, [&](const Tree& t) {
        const double dx = t.x - x, dy = t.y - y;
        if (dx * dx + dy * dy <= radius * radius) volume += t.volume;
    });
    return volume * (10'000.0 / CirclePlot{}.area);
}

}

// Plot centers per sampling design; volumes are exact sums over the tree
// list, so every plot record carries ground truth.
inline std::vector<PlotRecord> sample_plots(const SimWorld& world, const PlotDesign& design,
                                            std::uint64_t seed) {
    const auto& config = world.config;
    if (design.n == 0)
        throw validation_error("plot design must request at least one plot");

    const double radius = CirclePlot{}.radius();
    const double margin = radius + 1.0;
    const sim_detail::TreeHash hash(world.trees, 10.0);

    std::map<std::string, const StandPolygon*> stand_filter;
    for (const auto& id : design.within_stands) {
        const auto it = std::find_if(world.stands.begin(), world.stands.end(),
                                     [&id](const StandPolygon& s) { return s.id == id; });
        if (it == world.stands.end())
            throw validation_error("plot design references unknown stand '" + id + "'");
        stand_filter[id] = &*it;
    }

    std::vector<std::pair<double, double>> centers;
    if (design.kind == PlotDesignKind::systematic_cluster) {
        const double s = design.cluster_spacing;
        const double lo_x = margin + s, hi_x = config.extent_x - margin - s;
        const double lo_y = margin + s, hi_y = config.extent_y - margin - s;
        if (lo_x >= hi_x || lo_y >= hi_y)
            throw validation_error("extent too small for the cluster design");
        const auto n_clusters = (design.n + 8) / 9;
        const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_clusters))));
        const auto rows = (n_clusters + cols - 1) / cols;
        const double dx = cols > 1 ? (hi_x - lo_x) / static_cast<double>(cols - 1) : 0.0;
        const double dy = rows > 1 ? (hi_y - lo_y) / static_cast<double>(rows - 1) : 0.0;
        for (std::size_t c = 0; c < n_clusters && centers.size() < design.n; ++c) {
            const double cx = lo_x + dx * static_cast<double>(c % cols);
            const double cy = lo_y + dy * static_cast<double>(c / cols);
            for (int gy = -1; gy <= 1 && centers.size() < design.n; ++gy)
                for (int gx = -1; gx <= 1 && centers.size() < design.n; ++gx)
                    centers.emplace_back(cx + s * gx, cy + s * gy);
        }
    } else {
        const double g = design.grid_spacing;
        std::vector<std::pair<double, double>> candidates;
        for (double y = std::ceil(margin / g) * g; y <= config.extent_y - margin; y += g)
            for (double x = std::ceil(margin / g) * g; x <= config.extent_x - margin; x += g) {
                if (design.region) {
                    const auto& r = *design.region;
                    if (x < r[0] || x > r[2] || y < r[1] || y > r[3]) continue;
                }
                if (!stand_filter.empty()) {
                    bool inside = false;
                    for (const auto& kv : stand_filter)
                        if (point_in_polygon(*kv.second, x, y)) {
                            inside = true;
                            break;
                        }
                    if (!inside) continue;
                }
                candidates.emplace_back(x, y);
            }
        if (candidates.size() < design.n)
            throw validation_error("plot design requests " + std::to_string(design.n) + " plots but only " +
                                   std::to_string(candidates.size()) + " grid nodes qualify");
        Rng rng(seed);
        std::vector<std::size_t> idx(candidates.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t j = 0; j < design.n; ++j) {
            const std::size_t pick = j + static_cast<std::size_t>(rng.below(idx.size() - j));
            std::swap(idx[j], idx[pick]);
        }
        idx.resize(design.n);
        std::sort(idx.begin(), idx.end());
        for (std::size_t i : idx) centers.push_back(candidates[i]);
    }

    std::vector<PlotRecord> plots;
    plots.reserve(centers.size());
    for (std::size_t i = 0; i < centers.size(); ++i) {
        PlotRecord p;
        p.plot_id = design.id_prefix + std::to_string(i + 1);
        p.source = design.source;
        p.center_x = centers[i].first;
        p.center_y = centers[i].second;
        p.als_project = project_label(project_of_x(config, centers[i].first));
        p.stratum = "spruce_mature";
        p.volume_ha = sim_detail::plot_truth_volume_ha(hash, centers[i].first, centers[i].second);
        p.measurement_date = {2017, 7, 1};
        plots.push_back(std::move(p));
    }
    return plots;
}

// Draws responses straight from the pooled-model equation with known
// parameters: the generator behind the parameter-recovery checks.
inline std::vector<PlotSample> simulate_mixed_responses(const TrueModel& truth, std::size_t n_groups,
                                                        std::size_t group_size, std::uint64_t seed,
                                                        double z_low = 5.0, double z_high = 20.0) {
    if (n_groups < 2)
        throw validation_error("mixed-response simulation needs at least 2 groups");
    Rng rng(seed);
    std::vector<PlotSample> samples;
    samples.reserve(n_groups * group_size);
    for (std::size_t g = 0; g < n_groups; ++g) {
        const std::string project = "G" + std::to_string(g + 1);
        const double b = truth.sigma_b * rng.normal();
        for (std::size_t j = 0; j < group_size; ++j) {
            const double z = rng.uniform(z_low, z_high);
            const double p = rng.uniform(0.2, 1.0);
            const double mean = truth.beta[0] + (truth.beta[1] + b) * z + truth.beta[2] * z * z +
                                truth.beta[3] * p;
            const double y = mean + truth.sigma_eps * std::sqrt(z) * rng.normal();
            PlotSample s;
            s.plot_id = project + "_" + std::to_string(j + 1);
            s.project = project;
            s.source = PlotSource::NFI;
            s.volume_ha = y;
            s.metrics.set("zmean_f", z);
            s.metrics.set("perc_n_2m", p);
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

}
