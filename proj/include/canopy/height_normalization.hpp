#pragma once

#include <cstddef>
#include <vector>

#include "canopy/errors.hpp"
#include "canopy/point_cloud.hpp"
#include "canopy/raster.hpp"

namespace canopy {

struct NormalizeResult {
    PointCloud cloud;                          // normalized, rejected points dropped
    std::vector<std::size_t> rejected_indices; // input indices, ascending
    std::size_t rejected() const { return rejected_indices.size(); }
};

// Subtracts bilinearly interpolated terrain elevation from each return.
// Points outside the DTM extent or adjacent to nodata cells are dropped and
// reported; the relative order of surviving points is preserved.
inline NormalizeResult normalize_heights(const PointCloud& cloud, const Raster& dtm) {
    if (cloud.normalized)
        throw validation_error("normalize_heights: cloud is already normalized");
    NormalizeResult result;
    result.cloud.crs_id = cloud.crs_id;
    result.cloud.normalized = true;
    result.cloud.points.reserve(cloud.points.size());
    for (std::size_t i = 0; i < cloud.points.size(); ++i) {
        const Point& p = cloud.points[i];
        const auto ground = bilinear(dtm, p.x, p.y);
        if (!ground) {
            result.rejected_indices.push_back(i);
            continue;
        }
        Point q = p;
        q.z = p.z - *ground;
        result.cloud.points.push_back(q);
    }
    return result;
}

}
