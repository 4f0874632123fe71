#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "canopy/errors.hpp"

namespace canopy {

enum class ReportLevel { plot, stand };

inline std::string to_string(ReportLevel level) {
    return level == ReportLevel::plot ? "plot" : "stand";
}

// Deviation summary between observations and predictions. MD follows the
// observed-minus-predicted convention, so systematic over-prediction shows
// up as a negative mean deviance.
struct AccuracyReport {
    std::size_t n = 0;
    double rmsd = 0.0;
    double rmsd_pct = 0.0;
    double md = 0.0;
    double md_pct = 0.0;
    double r2 = std::numeric_limits<double>::quiet_NaN();
    ReportLevel level = ReportLevel::plot;
    std::string grouping;
};

inline AccuracyReport accuracy(const std::vector<double>& observed,
                               const std::vector<double>& predicted,
                               ReportLevel level = ReportLevel::plot,
                               const std::string& grouping = "total") {
    if (observed.size() != predicted.size())
        throw validation_error("accuracy: observed has " + std::to_string(observed.size()) +
                               " values, predicted has " + std::to_string(predicted.size()));
    if (observed.empty())
        throw validation_error("accuracy: empty input");

    const auto n = static_cast<double>(observed.size());
    double sq_sum = 0.0, dev_sum = 0.0, obs_sum = 0.0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        const double d = observed[i] - predicted[i];
        sq_sum += d * d;
        dev_sum += d;
        obs_sum += observed[i];
    }
    const double mean_obs = obs_sum / n;
    if (mean_obs == 0.0)
        throw validation_error("accuracy: mean observation is zero, percentage forms undefined");

    AccuracyReport r;
    r.n = observed.size();
    r.rmsd = std::sqrt(sq_sum / n);
    r.md = dev_sum / n;
    r.rmsd_pct = 100.0 * r.rmsd / mean_obs;
    r.md_pct = 100.0 * r.md / mean_obs;
    if (observed.size() >= 2) {
        double ss_tot = 0.0;
        for (double y : observed) ss_tot += (y - mean_obs) * (y - mean_obs);
        r.r2 = ss_tot > 0.0 ? 1.0 - sq_sum / ss_tot : std::numeric_limits<double>::quiet_NaN();
    }
    r.level = level;
    r.grouping = grouping;
    return r;
}

}
