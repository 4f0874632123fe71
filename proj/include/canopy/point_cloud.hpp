#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "canopy/errors.hpp"

namespace canopy {

// One ALS return. z is an elevation until the cloud is normalized, a height
// above ground afterwards.
struct Point {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
    int return_number = 1;
    int num_returns = 1;

    bool is_first() const { return return_number == 1; }
    bool is_last() const { return return_number == num_returns; }
};

inline void validate_point(const Point& p, const std::string& context) {
    if (!(std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z)))
        throw validation_error(context + ": non-finite coordinate");
    if (p.return_number < 1 || p.return_number > p.num_returns)
        throw validation_error(context + ": return_number " + std::to_string(p.return_number) +
                               " outside [1, num_returns=" + std::to_string(p.num_returns) + "]");
}

struct PointCloud {
    std::vector<Point> points;
    std::string crs_id;
    bool normalized = false;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

}
