#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canopy/csv.hpp"
#include "canopy/errors.hpp"
#include "canopy/point_cloud.hpp"

namespace canopy {

// Named ALS predictor values for one plot or grid cell. Metrics whose return
// subset is empty are absent keys, never 0 or NaN.
class MetricVector {
public:
    std::optional<double> get(const std::string& name) const {
        const auto it = values_.find(name);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    bool has(const std::string& name) const { return values_.count(name) != 0; }
    void set(const std::string& name, double value) { values_[name] = value; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    const std::map<std::string, double>& items() const { return values_; }

private:
    std::map<std::string, double> values_;
};

namespace metric_detail {

inline const std::vector<std::string>& height_bases() {
    static const std::vector<std::string> bases{
        "zmean", "zsd", "zp05", "zp10", "zp20", "zp30", "zp40",
        "zp50", "zp60", "zp70", "zp80", "zp90", "zp95"};
    return bases;
}

inline const std::vector<int>& percentile_ranks() {
    static const std::vector<int> ranks{5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 95};
    return ranks;
}

inline std::string suffix(bool thresholded, bool first) {
    return std::string(thresholded ? "_2m" : "") + (first ? "_f" : "_l");
}

// Linear interpolation between closest order statistics, rank
// h = 1 + p/100 * (n-1) ("type 7"). `sorted` must be ascending, non-empty.
inline double percentile(const std::vector<double>& sorted, int p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double h = 1.0 + p / 100.0 * static_cast<double>(n - 1);
    const double lo = std::floor(h);
    std::size_t ilo = static_cast<std::size_t>(lo) - 1;
    if (ilo >= n - 1) return sorted[n - 1];
    return sorted[ilo] + (h - lo) * (sorted[ilo + 1] - sorted[ilo]);
}

}

// Canonical metric order: height metrics before density metrics, first
// returns before last, unthresholded before the 2 m threshold variant,
// bases in their documented order; perc_n_2m closes the list. This order is
// the stepwise candidate pool and the metric CSV column order.
inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (bool first : {true, false})
            for (bool thresholded : {false, true})
                for (const auto& base : metric_detail::height_bases())
                    out.push_back(base + metric_detail::suffix(thresholded, first));
        for (bool first : {true, false})
            for (bool thresholded : {false, true})
                for (int k = 2; k <= 10; ++k)
                    out.push_back("d" + std::to_string(k) + metric_detail::suffix(thresholded, first));
        out.push_back("perc_n_2m");
        return out;
    }();
    return names;
}

// Computes every metric in metric_names() that is defined for the cloud.
// First returns: return_number == 1; last returns: return_number ==
// num_returns; threshold variants keep heights strictly above 2 m and
// recompute bin limits on the thresholded subset.
inline MetricVector compute_metrics(const PointCloud& cloud) {
    if (!cloud.normalized)
        throw validation_error("compute_metrics: cloud must be height-normalized");

    MetricVector mv;
    std::vector<double> heights;

    for (bool first : {true, false}) {
        std::vector<double> class_heights;
        for (const Point& p : cloud.points)
            if ((first && p.is_first()) || (!first && p.is_last())) class_heights.push_back(p.z);

        for (bool thresholded : {false, true}) {
            heights.clear();
            if (thresholded) {
                for (double h : class_heights)
                    if (h > 2.0) heights.push_back(h);
            } else {
                heights = class_heights;
            }
            const std::size_t n = heights.size();
            if (n == 0) continue;
            const std::string sfx = metric_detail::suffix(thresholded, first);

            double sum = 0.0;
            for (double h : heights) sum += h;
            const double mean = sum / static_cast<double>(n);
            mv.set("zmean" + sfx, mean);

            if (n >= 2) {
                double ss = 0.0;
                for (double h : heights) ss += (h - mean) * (h - mean);
                mv.set("zsd" + sfx, std::sqrt(ss / static_cast<double>(n - 1)));
            }

            std::sort(heights.begin(), heights.end());
            const auto& ranks = metric_detail::percentile_ranks();
            const auto& bases = metric_detail::height_bases();
            for (std::size_t k = 0; k < ranks.size(); ++k)
                mv.set(bases[k + 2] + sfx, metric_detail::percentile(heights, ranks[k]));

            const double zmin = heights.front();
            const double zmax = heights.back();
            if (zmax > zmin) {
                for (int k = 2; k <= 10; ++k) {
                    const double threshold = zmin + (k - 1) * (zmax - zmin) / 10.0;
                    std::size_t count = 0;
                    for (double h : heights)
                        if (h > threshold) ++count;
                    mv.set("d" + std::to_string(k) + sfx,
                           100.0 * static_cast<double>(count) / static_cast<double>(n));
                }
            }
        }
    }

    if (!cloud.points.empty()) {
        std::size_t above = 0;
        for (const Point& p : cloud.points)
            if (p.z > 2.0) ++above;
        mv.set("perc_n_2m", 100.0 * static_cast<double>(above) / static_cast<double>(cloud.points.size()));
    }
    return mv;
}

// Metric CSV: one row per unit, columns `id` + metric_names() order, missing
// metrics as empty fields.
inline void write_metrics_csv(const std::vector<std::pair<std::string, MetricVector>>& rows,
                              const std::string& path) {
    auto out = csv::open_output(path);
    out << "id";
    for (const auto& name : metric_names()) out << ',' << name;
    out << "\n";
    for (const auto& [id, mv] : rows) {
        out << id;
        for (const auto& name : metric_names()) {
            out << ',';
            if (const auto v = mv.get(name)) out << csv::format_double(*v);
        }
        out << "\n";
    }
}

inline std::vector<std::pair<std::string, MetricVector>> read_metrics_csv(const std::string& path) {
    const auto lines = csv::read_lines(path);
    if (lines.empty()) throw parse_error(path, 1, "missing header row");
    const auto header = csv::split(lines[0]);
    if (header.empty() || csv::trim(header[0]) != "id")
        throw parse_error(path, 1, "first column must be 'id'");

    std::vector<std::pair<std::string, MetricVector>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (csv::trim(lines[i]).empty()) continue;
        const auto fields = csv::split(lines[i]);
        if (fields.size() != header.size())
            throw parse_error(path, i + 1, "expected " + std::to_string(header.size()) + " fields, got " +
                              std::to_string(fields.size()));
        MetricVector mv;
        for (std::size_t c = 1; c < fields.size(); ++c) {
            if (csv::trim(fields[c]).empty()) continue;
            mv.set(std::string(csv::trim(header[c])), csv::parse_double(fields[c], path, i + 1));
        }
        rows.emplace_back(std::string(csv::trim(fields[0])), std::move(mv));
    }
    return rows;
}

}
