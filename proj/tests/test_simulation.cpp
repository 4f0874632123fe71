#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <canopy/errors.hpp>
#include <canopy/geometry.hpp>
#include <canopy/rng.hpp>
#include <canopy/simulation.hpp>

using namespace canopy;

namespace {

SimConfig small_config() {
    SimConfig c;
    c.seed = 5;
    c.extent_x = 300.0;
    c.extent_y = 200.0;
    c.n_projects = 2;
    c.pulse_density = {0.8, 0.8};
    c.stand_target_area_m2 = 8'000.0;
    return c;
}

struct RectOf {
    double x0, y0, x1, y1;
};

RectOf rect_of(const StandPolygon& s) {
    return {s.rings[0][0].x, s.rings[0][0].y, s.rings[0][2].x, s.rings[0][2].y};
}

}

TEST_CASE("random streams are reproducible and reasonably distributed") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        REQUIRE(a.next_u64() == b.next_u64());
    }
    Rng c(42), d(43);
    bool differs = false;
    for (int i = 0; i < 10 && !differs; ++i) differs = c.next_u64() != d.next_u64();
    REQUIRE(differs);

    Rng r(7);
    double sum = 0.0, sq = 0.0;
    const int n = 100'000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
        sq += u * u;
    }
    const double mean = sum / n;
    REQUIRE(mean == Catch::Approx(0.5).margin(0.005));
    REQUIRE(sq / n - mean * mean == Catch::Approx(1.0 / 12.0).margin(0.005));

    double nsum = 0.0, nsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        nsum += x;
        nsq += x * x;
    }
    REQUIRE(nsum / n == Catch::Approx(0.0).margin(0.02));
    REQUIRE(nsq / n == Catch::Approx(1.0).margin(0.02));

    const double lo_hi = r.uniform(3.0, 9.0);
    REQUIRE(lo_hi >= 3.0);
    REQUIRE(lo_hi < 9.0);

    double psum = 0.0;
    for (int i = 0; i < 20'000; ++i) psum += static_cast<double>(r.poisson(4.0));
    REQUIRE(psum / 20'000.0 == Catch::Approx(4.0).margin(0.1));
    REQUIRE(r.poisson(0.0) == 0);
    // the large-mean branch stays near its mean too
    double big = 0.0;
    for (int i = 0; i < 2'000; ++i) big += static_cast<double>(r.poisson(200.0));
    REQUIRE(big / 2'000.0 == Catch::Approx(200.0).margin(2.0));

    std::set<std::uint64_t> seen;
    for (int i = 0; i < 200; ++i) {
        const auto v = r.below(10);
        REQUIRE(v < 10);
        seen.insert(v);
    }
    REQUIRE(seen.size() == 10);

    std::vector<int> items(20);
    std::iota(items.begin(), items.end(), 0);
    auto shuffled = items;
    r.shuffle(shuffled);
    auto sorted = shuffled;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(sorted == items);
}

TEST_CASE("seed derivation separates streams and labels") {
    REQUIRE(derive_seed(1, 2) == derive_seed(1, 2));
    REQUIRE(derive_seed(1, 2) != derive_seed(1, 3));
    REQUIRE(derive_seed(1, 2) != derive_seed(2, 2));
    REQUIRE(hash_label("A") == hash_label("A"));
    REQUIRE(hash_label("A") != hash_label("B"));
    REQUIRE(hash_label("") != hash_label("A"));
}

TEST_CASE("simulation config validation rejects unusable settings") {
    REQUIRE_NOTHROW(validate_sim_config(small_config()));

    auto c = small_config();
    c.extent_x = 0.0;
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);

    c = small_config();
    c.n_projects = 1;
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);

    c = small_config();
    c.local_region_frac = 1.0;
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);

    c = small_config();
    c.pulse_density = {};
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);

    c = small_config();
    c.pulse_density = {1.0, 0.0};
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);

    c = small_config();
    c.stand_target_area_m2 = -1.0;
    REQUIRE_THROWS_AS(validate_sim_config(c), validation_error);
}

TEST_CASE("project helpers partition the extent") {
    const auto config = small_config();
    REQUIRE(project_label(0) == "A");
    REQUIRE(project_label(25) == "Z");
    REQUIRE_THROWS_AS(project_label(26), validation_error);

    // two 150 m bands
    REQUIRE(project_of_x(config, 10.0) == 0);
    REQUIRE(project_of_x(config, 149.9) == 0);
    REQUIRE(project_of_x(config, 150.1) == 1);
    REQUIRE(project_of_x(config, -5.0) == 0);
    REQUIRE(project_of_x(config, 400.0) == 1);

    REQUIRE(in_local_region(config, 10.0));
    REQUIRE_FALSE(in_local_region(config, 0.35 * config.extent_y));

    REQUIRE(pulse_density_of(config, 0) == 0.8);
    REQUIRE(pulse_density_of(config, 7) == 0.8);
    auto uneven = config;
    uneven.pulse_density = {2.0, 1.0};
    REQUIRE(pulse_density_of(uneven, 1) == 1.0);
    REQUIRE(pulse_density_of(uneven, 9) == 1.0);
}

TEST_CASE("world generation is deterministic and self-consistent") {
    const auto config = small_config();
    const SimWorld w1 = generate_world(config);
    const SimWorld w2 = generate_world(config);

    REQUIRE(w1.stands.size() == w2.stands.size());
    REQUIRE(w1.trees.size() == w2.trees.size());
    for (std::size_t i = 0; i < std::min<std::size_t>(w1.trees.size(), 500); ++i) {
        REQUIRE(w1.trees[i].x == w2.trees[i].x);
        REQUIRE(w1.trees[i].height == w2.trees[i].height);
        REQUIRE(w1.trees[i].volume == w2.trees[i].volume);
    }
    REQUIRE(w1.dtm.values == w2.dtm.values);
    REQUIRE(w1.project_height_factor == w2.project_height_factor);

    // stand count tracks extent area over target area
    const double expected = config.extent_x * config.extent_y / config.stand_target_area_m2;
    REQUIRE(static_cast<double>(w1.stands.size()) >= expected);
    REQUIRE(static_cast<double>(w1.stands.size()) <= 4.0 * expected);

    std::set<std::string> ids;
    for (const auto& s : w1.stands) {
        REQUIRE(ids.insert(s.id).second);
        REQUIRE(s.stratum == "spruce_mature");
        const auto r = rect_of(s);
        REQUIRE(s.als_project == project_label(project_of_x(config, (r.x0 + r.x1) / 2.0)));
        REQUIRE(r.x0 >= 0.0);
        REQUIRE(r.x1 <= config.extent_x);
        REQUIRE(w1.true_stand_volume_ha.count(s.id) == 1);
        REQUIRE(w1.stand_mean_height.count(s.id) == 1);

        // height regimes split by the local strip
        const double h = w1.stand_mean_height.at(s.id);
        if (in_local_region(config, (r.y0 + r.y1) / 2.0)) {
            REQUIRE(h >= config.local_height_low);
            REQUIRE(h <= config.local_height_high);
        } else {
            REQUIRE(h >= config.height_low);
            REQUIRE(h <= config.height_high);
        }
    }

    // recompute one stand's per-hectare truth from the tree list
    const auto& stand = w1.stands[w1.stands.size() / 2];
    const auto r = rect_of(stand);
    double volume = 0.0;
    for (const auto& t : w1.trees)
        if (t.x >= r.x0 && t.x < r.x1 && t.y >= r.y0 && t.y < r.y1) volume += t.volume;
    const double area_ha = (r.x1 - r.x0) * (r.y1 - r.y0) / 10'000.0;
    REQUIRE(w1.true_stand_volume_ha.at(stand.id) ==
            Catch::Approx(volume / area_ha).epsilon(1e-12));
}

TEST_CASE("simulated acquisitions stay inside their band and are reproducible") {
    const auto config = small_config();
    const SimWorld world = generate_world(config);

    const PointCloud c0 = simulate_als(world, 0);
    const PointCloud c0_again = simulate_als(world, 0);
    REQUIRE(c0.size() == c0_again.size());
    for (std::size_t i = 0; i < std::min<std::size_t>(c0.size(), 200); ++i) {
        REQUIRE(c0.points[i].x == c0_again.points[i].x);
        REQUIRE(c0.points[i].z == c0_again.points[i].z);
    }

    const PointCloud c1 = simulate_als(world, 1);
    REQUIRE_FALSE(c0.normalized);
    REQUIRE(c0.size() > 0);

    const double band = config.extent_x / 2.0;
    const double area = band * config.extent_y;
    const double lambda = 0.8 * area;
    double pulses = 0.0;
    for (const auto& p : c0.points) {
        REQUIRE(p.x >= 0.0);
        REQUIRE(p.x < band);
        REQUIRE(p.y >= 0.0);
        REQUIRE(p.y < config.extent_y);
        REQUIRE(p.return_number >= 1);
        REQUIRE(p.return_number <= p.num_returns);
        REQUIRE(p.num_returns <= 2);
        if (p.return_number == 1) pulses += 1.0;
        // returns sit near the terrain surface, never far below it
        const double ground = world.terrain(p.x, p.y);
        REQUIRE(p.z > ground - 1.0);
        REQUIRE(p.z < ground + 80.0);
    }
    REQUIRE(pulses == Catch::Approx(lambda).margin(5.0 * std::sqrt(lambda)));

    for (const auto& p : c1.points) {
        REQUIRE(p.x >= band);
        REQUIRE(p.x < config.extent_x);
    }

    // two-return pulses carry the echoes back to back
    bool saw_pair = false;
    for (std::size_t i = 0; i + 1 < c0.points.size() && !saw_pair; ++i) {
        if (c0.points[i].num_returns == 2) {
            REQUIRE(c0.points[i].return_number == 1);
            REQUIRE(c0.points[i + 1].return_number == 2);
            REQUIRE(c0.points[i + 1].x == c0.points[i].x);
            REQUIRE(c0.points[i + 1].z <= c0.points[i].z);
            saw_pair = true;
        }
    }
    REQUIRE(saw_pair);

    REQUIRE_THROWS_AS(simulate_als(world, 2), validation_error);
}

TEST_CASE("cluster plot sampling lays out three-by-three crosses") {
    const auto config = small_config();
    const SimWorld world = generate_world(config);

    PlotDesign design;
    design.kind = PlotDesignKind::systematic_cluster;
    design.n = 18;
    design.id_prefix = "p";
    design.cluster_spacing = 30.0;
    const auto plots = sample_plots(world, design, 7);
    REQUIRE(plots.size() == 18);
    for (std::size_t i = 0; i < plots.size(); ++i) {
        REQUIRE(plots[i].plot_id == "p" + std::to_string(i + 1));
        REQUIRE(plots[i].source == PlotSource::NFI);
        REQUIRE(plots[i].stratum == "spruce_mature");
        REQUIRE(plots[i].volume_ha >= 0.0);
        REQUIRE(plots[i].als_project ==
                project_label(project_of_x(config, plots[i].center_x)));
    }

    // the first nine plots form one cluster: a 3x3 grid at the spacing
    const double cx = plots[4].center_x;
    const double cy = plots[4].center_y;
    std::size_t k = 0;
    for (int gy = -1; gy <= 1; ++gy)
        for (int gx = -1; gx <= 1; ++gx, ++k) {
            REQUIRE(plots[k].center_x == Catch::Approx(cx + 30.0 * gx));
            REQUIRE(plots[k].center_y == Catch::Approx(cy + 30.0 * gy));
        }

    PlotDesign zero = design;
    zero.n = 0;
    REQUIRE_THROWS_AS(sample_plots(world, zero, 7), validation_error);

    // spacing too large for the extent
    PlotDesign wide = design;
    wide.cluster_spacing = 200.0;
    REQUIRE_THROWS_WITH(sample_plots(world, wide, 7),
                        Catch::Matchers::ContainsSubstring("extent too small"));
}

TEST_CASE("random grid sampling honors region and stand filters") {
    const auto config = small_config();
    const SimWorld world = generate_world(config);

    PlotDesign design;
    design.kind = PlotDesignKind::random_grid;
    design.n = 12;
    design.source = PlotSource::FMI;
    design.id_prefix = "f";
    design.region = {{0.0, 0.0, config.extent_x, 70.0}};
    design.grid_spacing = 15.0;

    const auto plots = sample_plots(world, design, 11);
    REQUIRE(plots.size() == 12);
    for (const auto& p : plots) {
        REQUIRE(p.source == PlotSource::FMI);
        REQUIRE(p.center_y <= 70.0);
    }

    // reproducible for a fixed seed
    const auto again = sample_plots(world, design, 11);
    for (std::size_t i = 0; i < plots.size(); ++i) {
        REQUIRE(plots[i].center_x == again[i].center_x);
        REQUIRE(plots[i].center_y == again[i].center_y);
        REQUIRE(plots[i].volume_ha == again[i].volume_ha);
    }

    // restricting to stands keeps every center inside one of them
    PlotDesign within;
    within.kind = PlotDesignKind::random_grid;
    within.n = 4;
    within.id_prefix = "v";
    within.grid_spacing = 10.0;
    within.within_stands = {world.stands[0].id, world.stands[1].id};
    const auto confined = sample_plots(world, within, 3);
    REQUIRE(confined.size() == 4);
    for (const auto& p : confined) {
        const bool inside = point_in_polygon(world.stands[0], p.center_x, p.center_y) ||
                            point_in_polygon(world.stands[1], p.center_x, p.center_y);
        REQUIRE(inside);
    }

    PlotDesign unknown = within;
    unknown.within_stands = {"nope"};
    REQUIRE_THROWS_WITH(sample_plots(world, unknown, 3),
                        Catch::Matchers::ContainsSubstring("nope"));

    PlotDesign greedy = design;
    greedy.n = 100'000;
    REQUIRE_THROWS_WITH(sample_plots(world, greedy, 11),
                        Catch::Matchers::ContainsSubstring("only"));
}

TEST_CASE("sampled plot volumes match a direct sum over nearby trees") {
    const auto config = small_config();
    const SimWorld world = generate_world(config);

    PlotDesign design;
    design.kind = PlotDesignKind::random_grid;
    design.n = 25;
    design.grid_spacing = 12.0;
    const auto plots = sample_plots(world, design, 21);

    const double radius = CirclePlot{}.radius();
    for (const auto& p : plots) {
        double volume = 0.0;
        for (const auto& t : world.trees) {
            const double dx = t.x - p.center_x;
            const double dy = t.y - p.center_y;
            if (dx * dx + dy * dy <= radius * radius) volume += t.volume;
        }
        const double expected = volume * (10'000.0 / 250.0);
        if (expected == 0.0)
            REQUIRE(p.volume_ha == 0.0);
        else
            REQUIRE_THAT(p.volume_ha, Catch::Matchers::WithinRel(expected, 1e-9));
    }
}

TEST_CASE("mixed response generator is shaped and seeded as documented") {
    TrueModel truth;
    const auto samples = simulate_mixed_responses(truth, 5, 7, 31);
    REQUIRE(samples.size() == 35);
    std::map<std::string, std::size_t> counts;
    for (const auto& s : samples) {
        counts[s.project] += 1;
        const double z = *s.metrics.get("zmean_f");
        const double p = *s.metrics.get("perc_n_2m");
        REQUIRE(z >= 5.0);
        REQUIRE(z < 20.0);
        REQUIRE(p >= 0.2);
        REQUIRE(p < 1.0);
    }
    REQUIRE(counts.size() == 5);
    for (std::size_t g = 1; g <= 5; ++g)
        REQUIRE(counts.at("G" + std::to_string(g)) == 7);

    const auto again = simulate_mixed_responses(truth, 5, 7, 31);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        REQUIRE(samples[i].plot_id == again[i].plot_id);
        REQUIRE(samples[i].volume_ha == again[i].volume_ha);
    }
    const auto other = simulate_mixed_responses(truth, 5, 7, 32);
    REQUIRE(samples[0].volume_ha != other[0].volume_ha);

    REQUIRE_THROWS_AS(simulate_mixed_responses(truth, 1, 7, 31), validation_error);

    // custom covariate range is respected
    const auto wide = simulate_mixed_responses(truth, 2, 5, 1, 8.0, 11.0);
    for (const auto& s : wide) {
        REQUIRE(*s.metrics.get("zmean_f") >= 8.0);
        REQUIRE(*s.metrics.get("zmean_f") < 11.0);
    }
}
