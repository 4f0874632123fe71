#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "canopy/csv.hpp"
#include "canopy/errors.hpp"

namespace canopy {

struct Date {
    int year = 1970;
    unsigned month = 1;
    unsigned day = 1;

    std::chrono::sys_days to_days() const {
        return std::chrono::sys_days{std::chrono::year{year} / std::chrono::month{month} / std::chrono::day{day}};
    }

    bool operator==(const Date&) const = default;
};

inline Date parse_date(const std::string& text) {
    int y = 0;
    unsigned m = 0, d = 0;
    if (std::sscanf(text.c_str(), "%d-%u-%u", &y, &m, &d) != 3)
        throw validation_error("invalid ISO date '" + text + "'");
    const auto ymd = std::chrono::year{y} / std::chrono::month{m} / std::chrono::day{d};
    if (!ymd.ok()) throw validation_error("invalid calendar date '" + text + "'");
    return {y, m, d};
}

inline std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", d.year, d.month, d.day);
    return buf;
}

// Exact day count over the mean Julian year.
inline double delta_years(const Date& from, const Date& to) {
    return std::chrono::duration<double, std::ratio<86400>>(to.to_days() - from.to_days()).count() / 365.25;
}

// One measured tree; volume comes from external allometric models and is an
// input here. volume_prev/years_between describe the previous measurement
// occasion when the plot has one.
struct TreeRecord {
    std::string plot_id;
    double dbh = 0.0;  // cm
    std::string species;
    double volume = 0.0;  // m^3
    std::optional<double> volume_prev;
    std::optional<double> years_between;
};

enum class PlotSource { NFI, FMI, VALIDATION };

inline std::string to_string(PlotSource s) {
    switch (s) {
        case PlotSource::NFI: return "NFI";
        case PlotSource::FMI: return "FMI";
        case PlotSource::VALIDATION: return "VALIDATION";
    }
    return "?";
}

inline PlotSource parse_source(const std::string& s) {
    if (s == "NFI") return PlotSource::NFI;
    if (s == "FMI") return PlotSource::FMI;
    if (s == "VALIDATION") return PlotSource::VALIDATION;
    throw validation_error("unknown plot source '" + s + "'");
}

struct PlotRecord {
    std::string plot_id;
    PlotSource source = PlotSource::NFI;
    double center_x = 0.0;
    double center_y = 0.0;
    std::string als_project;
    std::string stratum;
    double volume_ha = 0.0;  // m^3 / ha
    Date measurement_date;
};

// Drops trees below the dbh threshold, aligning inventories whose callipering
// limits differ (NFI tallies down to 0 cm, FMI from 10 cm up).
inline std::vector<TreeRecord> harmonize_dbh(const std::vector<TreeRecord>& trees, double threshold_cm) {
    if (!(threshold_cm >= 0.0)) throw validation_error("harmonize_dbh: negative threshold");
    std::vector<TreeRecord> kept;
    kept.reserve(trees.size());
    for (const auto& t : trees)
        if (!(t.dbh < threshold_cm)) kept.push_back(t);
    return kept;
}

// Fore-/back-casts a tree volume to target_date using the yearly increment
// between the two most recent measurement occasions. Negative extrapolations
// are clamped to 0.
inline double temporal_adjust(const TreeRecord& tree, const Date& measured, const Date& target) {
    if (!tree.volume_prev || !tree.years_between)
        throw validation_error("temporal_adjust: tree on plot " + tree.plot_id +
                               " has no previous measurement occasion");
    if (!(*tree.years_between > 0.0))
        throw validation_error("temporal_adjust: years_between must be positive");
    const double increment = (tree.volume - *tree.volume_prev) / *tree.years_between;
    const double adjusted = tree.volume + increment * delta_years(measured, target);
    return std::max(adjusted, 0.0);
}

inline double plot_volume_ha(const std::vector<TreeRecord>& trees, double plot_area_m2) {
    if (!(plot_area_m2 > 0.0)) throw validation_error("plot_volume_ha: non-positive plot area");
    double total = 0.0;
    for (const auto& t : trees) total += t.volume;
    return total * 10000.0 / plot_area_m2;
}

// Subset by stratum (validated against the configured stratum set) and
// optionally by ALS project; stable order.
inline std::vector<PlotRecord> filter_stratum(const std::vector<PlotRecord>& plots,
                                              const std::string& stratum,
                                              const std::set<std::string>& valid_strata,
                                              const std::optional<std::string>& project = std::nullopt) {
    if (!valid_strata.count(stratum))
        throw validation_error("unknown stratum '" + stratum + "'");
    std::vector<PlotRecord> out;
    for (const auto& p : plots) {
        if (p.stratum != stratum) continue;
        if (project && p.als_project != *project) continue;
        out.push_back(p);
    }
    return out;
}

// Plot CSV: plot_id,source,x,y,als_project,stratum,volume_ha,date
inline std::vector<PlotRecord> read_plots_csv(const std::string& path) {
    const auto lines = csv::read_lines(path);
    if (lines.empty()) throw parse_error(path, 1, "missing header row");
    std::vector<PlotRecord> plots;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (csv::trim(lines[i]).empty()) continue;
        const auto f = csv::split(lines[i]);
        if (f.size() != 8)
            throw parse_error(path, i + 1, "expected 8 fields, got " + std::to_string(f.size()));
        PlotRecord p;
        p.plot_id = std::string(csv::trim(f[0]));
        p.source = parse_source(std::string(csv::trim(f[1])));
        p.center_x = csv::parse_double(f[2], path, i + 1);
        p.center_y = csv::parse_double(f[3], path, i + 1);
        p.als_project = std::string(csv::trim(f[4]));
        p.stratum = std::string(csv::trim(f[5]));
        p.volume_ha = csv::parse_double(f[6], path, i + 1);
        if (p.volume_ha < 0.0) throw parse_error(path, i + 1, "negative volume_ha");
        p.measurement_date = parse_date(std::string(csv::trim(f[7])));
        plots.push_back(std::move(p));
    }
    return plots;
}

inline void write_plots_csv(const std::vector<PlotRecord>& plots, const std::string& path) {
    auto out = csv::open_output(path);
    out << "plot_id,source,x,y,als_project,stratum,volume_ha,date\n";
    for (const auto& p : plots) {
        out << p.plot_id << ',' << to_string(p.source) << ',' << csv::format_double(p.center_x) << ','
            << csv::format_double(p.center_y) << ',' << p.als_project << ',' << p.stratum << ','
            << csv::format_double(p.volume_ha) << ',' << format_date(p.measurement_date) << "\n";
    }
}

// Tree CSV: plot_id,dbh_cm,species,volume_m3,volume_prev_m3,years_between
// (the last two may be empty, but only together).
inline std::vector<TreeRecord> read_trees_csv(const std::string& path) {
    const auto lines = csv::read_lines(path);
    if (lines.empty()) throw parse_error(path, 1, "missing header row");
    std::vector<TreeRecord> trees;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (csv::trim(lines[i]).empty()) continue;
        const auto f = csv::split(lines[i]);
        if (f.size() != 6)
            throw parse_error(path, i + 1, "expected 6 fields, got " + std::to_string(f.size()));
        TreeRecord t;
        t.plot_id = std::string(csv::trim(f[0]));
        t.dbh = csv::parse_double(f[1], path, i + 1);
        if (!(t.dbh > 0.0)) throw parse_error(path, i + 1, "dbh must be positive");
        t.species = std::string(csv::trim(f[2]));
        t.volume = csv::parse_double(f[3], path, i + 1);
        if (t.volume < 0.0) throw parse_error(path, i + 1, "negative volume");
        const bool has_prev = !csv::trim(f[4]).empty();
        const bool has_years = !csv::trim(f[5]).empty();
        if (has_prev != has_years)
            throw parse_error(path, i + 1, "volume_prev_m3 and years_between must be given together");
        if (has_prev) {
            t.volume_prev = csv::parse_double(f[4], path, i + 1);
            t.years_between = csv::parse_double(f[5], path, i + 1);
            if (!(*t.years_between > 0.0)) throw parse_error(path, i + 1, "years_between must be positive");
        }
        trees.push_back(std::move(t));
    }
    return trees;
}

inline void write_trees_csv(const std::vector<TreeRecord>& trees, const std::string& path) {
    auto out = csv::open_output(path);
    out << "plot_id,dbh_cm,species,volume_m3,volume_prev_m3,years_between\n";
    for (const auto& t : trees) {
        out << t.plot_id << ',' << csv::format_double(t.dbh) << ',' << t.species << ','
            << csv::format_double(t.volume) << ',';
        if (t.volume_prev) out << csv::format_double(*t.volume_prev);
        out << ',';
        if (t.years_between) out << csv::format_double(*t.years_between);
        out << "\n";
    }
}

}
