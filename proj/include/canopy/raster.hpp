#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "canopy/csv.hpp"
#include "canopy/errors.hpp"

namespace canopy {

// North-up single-band grid in Arc/Info ASCII convention: origin is the
// lower-left corner, values are stored row-major starting at the northern row.
// A cell's value is the surface elevation at the cell center.
struct Raster {
    double origin_x = 0.0;  // xllcorner
    double origin_y = 0.0;  // yllcorner
    double cell_size = 1.0;
    int ncols = 0;
    int nrows = 0;
    std::vector<double> values;  // nrows * ncols, first row = northernmost
    double nodata = -9999.0;

    double at(int col, int row_from_north) const {
        return values[static_cast<std::size_t>(row_from_north) * ncols + col];
    }

    // row 0 = southernmost; matches the y axis direction.
    double at_south_row(int col, int row_from_south) const {
        return at(col, nrows - 1 - row_from_south);
    }

    double center_x(int col) const { return origin_x + (col + 0.5) * cell_size; }
    double center_y_south(int row_from_south) const { return origin_y + (row_from_south + 0.5) * cell_size; }

    double width() const { return ncols * cell_size; }
    double height() const { return nrows * cell_size; }
};

// Bilinear interpolation between the 4 surrounding cell centers. Returns
// nullopt when the query lacks 4 in-grid neighbors or touches nodata.
inline std::optional<double> bilinear(const Raster& r, double x, double y) {
    const double gx = (x - r.origin_x) / r.cell_size - 0.5;
    const double gy = (y - r.origin_y) / r.cell_size - 0.5;
    const double fcol = std::floor(gx);
    const double frow = std::floor(gy);
    const int c0 = static_cast<int>(fcol);
    const int s0 = static_cast<int>(frow);  // row index from the south
    if (fcol < 0.0 || frow < 0.0 || c0 + 1 >= r.ncols || s0 + 1 >= r.nrows) return std::nullopt;
    const double v00 = r.at_south_row(c0, s0);
    const double v10 = r.at_south_row(c0 + 1, s0);
    const double v01 = r.at_south_row(c0, s0 + 1);
    const double v11 = r.at_south_row(c0 + 1, s0 + 1);
    if (v00 == r.nodata || v10 == r.nodata || v01 == r.nodata || v11 == r.nodata) return std::nullopt;
    const double fx = gx - fcol;
    const double fy = gy - frow;
    return (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 +
           (1.0 - fx) * fy * v01 + fx * fy * v11;
}

namespace detail {
inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}
}

inline Raster read_asc(const std::string& path) {
    const auto lines = csv::read_lines(path);
    Raster r;
    std::size_t i = 0;
    bool saw_ncols = false, saw_nrows = false, saw_cell = false;
    // Header: keyword/value pairs until the first line starting with a number.
    while (i < lines.size()) {
        std::string_view line = csv::trim(lines[i]);
        if (line.empty()) { ++i; continue; }
        const std::size_t sep = line.find_first_of(" \t");
        const std::string key = detail::lower(std::string(line.substr(0, sep)));
        if (!key.empty() && (std::isdigit(static_cast<unsigned char>(key[0])) || key[0] == '-' || key[0] == '+' || key[0] == '.'))
            break;
        if (sep == std::string_view::npos)
            throw parse_error(path, i + 1, "header line without a value: '" + std::string(line) + "'");
        const std::string_view value = csv::trim(line.substr(sep + 1));
        if (key == "ncols") { r.ncols = static_cast<int>(csv::parse_long(value, path, i + 1)); saw_ncols = true; }
        else if (key == "nrows") { r.nrows = static_cast<int>(csv::parse_long(value, path, i + 1)); saw_nrows = true; }
        else if (key == "xllcorner") r.origin_x = csv::parse_double(value, path, i + 1);
        else if (key == "yllcorner") r.origin_y = csv::parse_double(value, path, i + 1);
        else if (key == "cellsize") { r.cell_size = csv::parse_double(value, path, i + 1); saw_cell = true; }
        else if (key == "nodata_value") r.nodata = csv::parse_double(value, path, i + 1);
        else throw parse_error(path, i + 1, "unknown header keyword '" + key + "'");
        ++i;
    }
    if (!saw_ncols || !saw_nrows || !saw_cell)
        throw parse_error(path, i + 1, "incomplete ASCII grid header (need ncols, nrows, cellsize)");
    if (r.ncols <= 0 || r.nrows <= 0 || !(r.cell_size > 0.0))
        throw validation_error(path + ": non-positive grid dimensions");

    r.values.reserve(static_cast<std::size_t>(r.ncols) * r.nrows);
    for (; i < lines.size(); ++i) {
        std::string_view line = csv::trim(lines[i]);
        std::size_t pos = 0;
        while (pos < line.size()) {
            while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
            if (pos >= line.size()) break;
            std::size_t end = pos;
            while (end < line.size() && line[end] != ' ' && line[end] != '\t') ++end;
            r.values.push_back(csv::parse_double(line.substr(pos, end - pos), path, i + 1));
            pos = end;
        }
    }
    const std::size_t expected = static_cast<std::size_t>(r.ncols) * r.nrows;
    if (r.values.size() != expected)
        throw validation_error(path + ": expected " + std::to_string(expected) + " cell values, got " +
                               std::to_string(r.values.size()));
    return r;
}

inline void write_asc(const Raster& r, const std::string& path) {
    auto out = csv::open_output(path);
    out << "ncols " << r.ncols << "\n";
    out << "nrows " << r.nrows << "\n";
    out << "xllcorner " << csv::format_double(r.origin_x) << "\n";
    out << "yllcorner " << csv::format_double(r.origin_y) << "\n";
    out << "cellsize " << csv::format_double(r.cell_size) << "\n";
    out << "NODATA_value " << csv::format_double(r.nodata) << "\n";
    for (int row = 0; row < r.nrows; ++row) {
        for (int col = 0; col < r.ncols; ++col) {
            if (col) out << ' ';
            out << csv::format_double(r.at(col, row));
        }
        out << "\n";
    }
}

}
