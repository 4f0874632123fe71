#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "canopy/errors.hpp"
#include "canopy/point_cloud.hpp"

namespace canopy {

inline constexpr double pi = 3.14159265358979323846;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

// Circular field plot, 250 m^2 by default.
struct CirclePlot {
    std::string id;
    double center_x = 0.0;
    double center_y = 0.0;
    double area = 250.0;

    double radius() const { return std::sqrt(area / pi); }
};

// Boundary-inclusive disc clip.
inline PointCloud clip_to_plot(const PointCloud& cloud, const CirclePlot& plot) {
    const double r2 = plot.area / pi;  // radius squared
    PointCloud out;
    out.crs_id = cloud.crs_id;
    out.normalized = cloud.normalized;
    for (const Point& p : cloud.points) {
        const double dx = p.x - plot.center_x;
        const double dy = p.y - plot.center_y;
        if (dx * dx + dy * dy <= r2) out.points.push_back(p);
    }
    return out;
}

// Row-major grid of square cells; cells are half-open so every point belongs
// to exactly one cell.
struct GridSpec {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double cell_size = 16.0;
    int ncols = 0;
    int nrows = 0;

    struct CellRect {
        double x0, y0, x1, y1;  // [x0,x1) x [y0,y1)
    };

    CellRect cell_polygon(int col, int row) const {
        if (col < 0 || col >= ncols || row < 0 || row >= nrows)
            throw validation_error("grid cell index (" + std::to_string(col) + "," + std::to_string(row) +
                                   ") out of range");
        return {origin_x + col * cell_size, origin_y + row * cell_size,
                origin_x + (col + 1) * cell_size, origin_y + (row + 1) * cell_size};
    }

    // Cell owning a point; may fall outside [0,ncols)x[0,nrows).
    std::pair<int, int> cell_of(double x, double y) const {
        const int col = static_cast<int>(std::floor((x - origin_x) / cell_size));
        const int row = static_cast<int>(std::floor((y - origin_y) / cell_size));
        return {col, row};
    }

    bool contains_cell(int col, int row) const {
        return col >= 0 && col < ncols && row >= 0 && row < nrows;
    }

    double center_x(int col) const { return origin_x + (col + 0.5) * cell_size; }
    double center_y(int row) const { return origin_y + (row + 0.5) * cell_size; }

    static std::string cell_id(int col, int row) {
        return std::to_string(col) + "_" + std::to_string(row);
    }
};

// Grid registration defaults to the DTM origin snapped down to multiples of
// the cell size, which makes independent runs over the same terrain agree.
inline GridSpec grid_covering(double min_x, double min_y, double max_x, double max_y,
                              double cell_size = 16.0) {
    GridSpec g;
    g.cell_size = cell_size;
    g.origin_x = std::floor(min_x / cell_size) * cell_size;
    g.origin_y = std::floor(min_y / cell_size) * cell_size;
    g.ncols = static_cast<int>(std::ceil((max_x - g.origin_x) / cell_size));
    g.nrows = static_cast<int>(std::ceil((max_y - g.origin_y) / cell_size));
    return g;
}

// Closed vertex rings (first == last); rings[0] is the outer boundary, the
// rest are holes.
struct StandPolygon {
    std::string id;
    std::vector<std::vector<Vec2>> rings;
    std::string stratum;
    std::string als_project;
};

namespace geom_detail {

inline double signed_ring_area(const std::vector<Vec2>& ring) {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i)
        acc += ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
    return 0.5 * acc;
}

inline double ring_perimeter(const std::vector<Vec2>& ring) {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i)
        acc += std::hypot(ring[i + 1].x - ring[i].x, ring[i + 1].y - ring[i].y);
    return acc;
}

inline bool on_segment(double px, double py, const Vec2& a, const Vec2& b) {
    const double cross = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
    if (cross != 0.0) return false;
    const double dot = (px - a.x) * (b.x - a.x) + (py - a.y) * (b.y - a.y);
    const double len2 = (b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y);
    return dot >= 0.0 && dot <= len2;
}

// Proper segment intersection test for the desk-scale simplicity check.
inline bool segments_cross(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
    const auto orient = [](const Vec2& p, const Vec2& q, const Vec2& r) {
        const double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
    };
    const int o1 = orient(a, b, c), o2 = orient(a, b, d);
    const int o3 = orient(c, d, a), o4 = orient(c, d, b);
    return o1 != o2 && o3 != o4 && o1 != 0 && o2 != 0 && o3 != 0 && o4 != 0;
}

}

// Even-odd rule over all rings; points on any ring edge count as inside.
inline bool point_in_polygon(const StandPolygon& poly, double x, double y) {
    for (const auto& ring : poly.rings)
        for (std::size_t i = 0; i + 1 < ring.size(); ++i)
            if (geom_detail::on_segment(x, y, ring[i], ring[i + 1])) return true;

    bool inside = false;
    for (const auto& ring : poly.rings) {
        for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
            const Vec2& a = ring[i];
            const Vec2& b = ring[i + 1];
            if ((a.y > y) != (b.y > y)) {
                const double xint = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
                if (xint > x) inside = !inside;
            }
        }
    }
    return inside;
}

inline void validate_stand(const StandPolygon& poly) {
    if (poly.rings.empty()) throw validation_error("stand " + poly.id + ": no rings");
    for (const auto& ring : poly.rings) {
        if (ring.size() < 4)
            throw validation_error("stand " + poly.id + ": ring with fewer than 3 distinct vertices");
        if (ring.front().x != ring.back().x || ring.front().y != ring.back().y)
            throw validation_error("stand " + poly.id + ": ring not closed (first vertex != last)");
    }
    const auto& outer = poly.rings[0];
    const std::size_t n = outer.size() - 1;  // edges
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 2; j < n; ++j) {
            if (i == 0 && j == n - 1) continue;  // adjacent through the closure
            if (geom_detail::segments_cross(outer[i], outer[i + 1], outer[j], outer[j + 1]))
                throw validation_error("stand " + poly.id + ": self-intersecting outer ring");
        }
    }
}

// Shoelace area of the outer ring minus hole areas.
inline double stand_area(const StandPolygon& poly) {
    if (poly.rings.empty()) throw validation_error("stand " + poly.id + ": no rings");
    double area = std::abs(geom_detail::signed_ring_area(poly.rings[0]));
    for (std::size_t i = 1; i < poly.rings.size(); ++i)
        area -= std::abs(geom_detail::signed_ring_area(poly.rings[i]));
    return area;
}

inline double stand_perimeter(const StandPolygon& poly) {
    double acc = 0.0;
    for (const auto& ring : poly.rings) acc += geom_detail::ring_perimeter(ring);
    return acc;
}

// sqrt(area) / perimeter; scale-free, at most 1/(2*sqrt(pi)) for any simple
// polygon. Stand selection keeps ratios above a cutoff, 0.2 by default.
inline double compactness(const StandPolygon& poly) {
    const double area = stand_area(poly);
    const double perimeter = stand_perimeter(poly);
    if (!(area > 0.0) || !(perimeter > 0.0))
        throw validation_error("stand " + poly.id + ": degenerate polygon");
    return std::sqrt(area) / perimeter;
}

// Cells whose center lies within the stand (even-odd, boundary inclusive),
// ordered by (row, col) ascending.
inline std::vector<std::pair<int, int>> cells_in_stand(const GridSpec& grid, const StandPolygon& stand) {
    double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
    for (const auto& ring : stand.rings) {
        for (const auto& v : ring) {
            min_x = std::min(min_x, v.x);
            max_x = std::max(max_x, v.x);
            min_y = std::min(min_y, v.y);
            max_y = std::max(max_y, v.y);
        }
    }
    auto [c0, r0] = grid.cell_of(min_x, min_y);
    auto [c1, r1] = grid.cell_of(max_x, max_y);
    c0 = std::max(c0, 0);
    r0 = std::max(r0, 0);
    c1 = std::min(c1, grid.ncols - 1);
    r1 = std::min(r1, grid.nrows - 1);

    std::vector<std::pair<int, int>> cells;
    for (int row = r0; row <= r1; ++row)
        for (int col = c0; col <= c1; ++col)
            if (point_in_polygon(stand, grid.center_x(col), grid.center_y(row)))
                cells.emplace_back(col, row);
    return cells;
}

}
