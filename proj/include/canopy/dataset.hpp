#pragma once

#include <map>
#include <string>
#include <vector>

#include "canopy/errors.hpp"
#include "canopy/inventory.hpp"
#include "canopy/metrics.hpp"

namespace canopy {

// One modeling row: a field plot joined with its ALS metrics.
struct PlotSample {
    std::string plot_id;
    std::string project;
    PlotSource source = PlotSource::NFI;
    double volume_ha = 0.0;
    MetricVector metrics;
};

inline std::vector<PlotSample> join_samples(const std::vector<PlotRecord>& plots,
                                            const std::map<std::string, MetricVector>& metrics_by_id) {
    std::vector<PlotSample> samples;
    samples.reserve(plots.size());
    for (const auto& p : plots) {
        const auto it = metrics_by_id.find(p.plot_id);
        if (it == metrics_by_id.end())
            throw validation_error("no ALS metrics for plot '" + p.plot_id + "'");
        samples.push_back({p.plot_id, p.als_project, p.source, p.volume_ha, it->second});
    }
    return samples;
}

}
