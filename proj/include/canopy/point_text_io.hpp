#pragma once

#include <array>
#include <string>

#include "canopy/csv.hpp"
#include "canopy/errors.hpp"
#include "canopy/point_cloud.hpp"

namespace canopy {

// Delimited text points: header `x,y,z,return_number,num_returns` (any column
// order), '.' decimal separator, UTF-8.
inline PointCloud read_point_text(const std::string& path, const std::string& crs_id = "") {
    const auto lines = csv::read_lines(path);
    if (lines.empty()) throw parse_error(path, 1, "missing header row");

    const auto header = csv::split(lines[0]);
    constexpr std::array<const char*, 5> required{"x", "y", "z", "return_number", "num_returns"};
    std::array<std::size_t, 5> index{};
    for (std::size_t k = 0; k < required.size(); ++k) {
        bool found = false;
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (csv::trim(header[c]) == required[k]) {
                index[k] = c;
                found = true;
                break;
            }
        }
        if (!found) throw parse_error(path, 1, std::string("missing column '") + required[k] + "'");
    }

    PointCloud cloud;
    cloud.crs_id = crs_id;
    cloud.normalized = false;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (csv::trim(lines[i]).empty()) continue;
        const auto fields = csv::split(lines[i]);
        if (fields.size() < header.size())
            throw parse_error(path, i + 1, "expected " + std::to_string(header.size()) + " fields, got " +
                              std::to_string(fields.size()));
        Point p;
        p.x = csv::parse_double(fields[index[0]], path, i + 1);
        p.y = csv::parse_double(fields[index[1]], path, i + 1);
        p.z = csv::parse_double(fields[index[2]], path, i + 1);
        p.return_number = static_cast<int>(csv::parse_long(fields[index[3]], path, i + 1));
        p.num_returns = static_cast<int>(csv::parse_long(fields[index[4]], path, i + 1));
        validate_point(p, path + ":" + std::to_string(i + 1));
        cloud.points.push_back(p);
    }
    return cloud;
}

// Coordinates fixed at 3 decimals (mm resolution).
inline void write_point_text(const PointCloud& cloud, const std::string& path) {
    auto out = csv::open_output(path);
    out << "x,y,z,return_number,num_returns\n";
    for (const Point& p : cloud.points) {
        out << csv::format_fixed(p.x, 3) << ',' << csv::format_fixed(p.y, 3) << ','
            << csv::format_fixed(p.z, 3) << ',' << p.return_number << ',' << p.num_returns << "\n";
    }
}

}
