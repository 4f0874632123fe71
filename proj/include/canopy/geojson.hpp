#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/errors.hpp"
#include "canopy/geometry.hpp"

namespace canopy {

// Stands are exchanged as a GeoJSON FeatureCollection of Polygon features
// with properties `id`, `stratum`, `als_project`. Coordinates are taken as
// already projected; MultiPolygon features are rejected.
inline std::vector<StandPolygon> read_stands_geojson(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open file: " + path);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(path + ": " + e.what());
    }
    if (doc.value("type", "") != "FeatureCollection")
        throw validation_error(path + ": expected a GeoJSON FeatureCollection");

    std::vector<StandPolygon> stands;
    std::size_t index = 0;
    for (const auto& feature : doc.value("features", nlohmann::json::array())) {
        ++index;
        const auto& geometry = feature.at("geometry");
        const std::string gtype = geometry.value("type", "");
        if (gtype != "Polygon")
            throw validation_error(path + ": feature " + std::to_string(index) + " has geometry type '" +
                                   gtype + "', only Polygon stands are supported");
        StandPolygon stand;
        const auto& props = feature.value("properties", nlohmann::json::object());
        if (props.contains("id")) {
            const auto& id = props.at("id");
            stand.id = id.is_string() ? id.get<std::string>() : id.dump();
        } else {
            stand.id = "stand_" + std::to_string(index);
        }
        stand.stratum = props.value("stratum", "");
        stand.als_project = props.value("als_project", "");
        for (const auto& ring : geometry.at("coordinates")) {
            std::vector<Vec2> vertices;
            for (const auto& coord : ring) {
                if (!coord.is_array() || coord.size() < 2)
                    throw validation_error(path + ": stand " + stand.id + " has a malformed coordinate");
                vertices.push_back({coord[0].get<double>(), coord[1].get<double>()});
            }
            stand.rings.push_back(std::move(vertices));
        }
        validate_stand(stand);
        stands.push_back(std::move(stand));
    }
    return stands;
}

inline void write_stands_geojson(const std::vector<StandPolygon>& stands, const std::string& path) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& stand : stands) {
        nlohmann::json rings = nlohmann::json::array();
        for (const auto& ring : stand.rings) {
            nlohmann::json coords = nlohmann::json::array();
            for (const auto& v : ring) coords.push_back({v.x, v.y});
            rings.push_back(std::move(coords));
        }
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", std::move(rings)}}},
                            {"properties",
                             {{"id", stand.id}, {"stratum", stand.stratum}, {"als_project", stand.als_project}}}});
    }
    nlohmann::json doc{{"type", "FeatureCollection"}, {"features", std::move(features)}};
    std::ofstream out(path);
    if (!out) throw validation_error("cannot open file for writing: " + path);
    out << doc.dump(1, '\t') << "\n";
}

}
