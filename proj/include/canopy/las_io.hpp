#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "canopy/errors.hpp"
#include "canopy/point_cloud.hpp"

static_assert(std::endian::native == std::endian::little,
              "LAS decoding assumes a little-endian host");

namespace canopy {

namespace las_detail {

template <typename T>
T decode(const unsigned char* buf, std::size_t offset) {
    T value;
    std::memcpy(&value, buf + offset, sizeof(T));
    return value;
}

}

// Minimal LAS 1.2 reader: point record formats 0 and 1, uncompressed.
// Coordinates are decoded as raw * scale + offset per the LAS specification.
inline PointCloud read_las_subset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot open file: " + path);
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    constexpr std::size_t header_min = 227;
    if (data.size() < header_min) throw validation_error(path + ": file too short for a LAS header");
    if (std::memcmp(data.data(), "LASF", 4) != 0)
        throw validation_error(path + ": bad magic, not a LAS file");

    const auto version_major = data[24];
    const auto version_minor = data[25];
    if (version_major != 1 || version_minor != 2)
        throw validation_error(path + ": unsupported LAS version " + std::to_string(version_major) + "." +
                               std::to_string(version_minor) + " (only 1.2 is supported)");

    const auto header_size = las_detail::decode<std::uint16_t>(data.data(), 94);
    const auto point_offset = las_detail::decode<std::uint32_t>(data.data(), 96);
    const auto format = data[104];
    const auto record_length = las_detail::decode<std::uint16_t>(data.data(), 105);
    const auto point_count = las_detail::decode<std::uint32_t>(data.data(), 107);
    const double sx = las_detail::decode<double>(data.data(), 131);
    const double sy = las_detail::decode<double>(data.data(), 139);
    const double sz = las_detail::decode<double>(data.data(), 147);
    const double ox = las_detail::decode<double>(data.data(), 155);
    const double oy = las_detail::decode<double>(data.data(), 163);
    const double oz = las_detail::decode<double>(data.data(), 171);

    if (header_size < header_min)
        throw validation_error(path + ": declared header size " + std::to_string(header_size) + " below LAS 1.2 minimum");
    if (format != 0 && format != 1)
        throw validation_error(path + ": unsupported point record format " + std::to_string(format));
    const std::size_t min_record = format == 0 ? 20 : 28;
    if (record_length < min_record)
        throw validation_error(path + ": point record length " + std::to_string(record_length) +
                               " below minimum for format " + std::to_string(format));
    if (point_offset > data.size())
        throw validation_error(path + ": point data offset beyond end of file");

    const std::size_t available = data.size() - point_offset;
    if (available != static_cast<std::size_t>(point_count) * record_length)
        throw validation_error(path + ": truncated point data, header declares " + std::to_string(point_count) +
                               " records but " + std::to_string(available / record_length) + " present");

    PointCloud cloud;
    cloud.normalized = false;
    cloud.points.reserve(point_count);
    for (std::uint32_t i = 0; i < point_count; ++i) {
        const std::size_t base = point_offset + static_cast<std::size_t>(i) * record_length;
        Point p;
        p.x = las_detail::decode<std::int32_t>(data.data(), base + 0) * sx + ox;
        p.y = las_detail::decode<std::int32_t>(data.data(), base + 4) * sy + oy;
        p.z = las_detail::decode<std::int32_t>(data.data(), base + 8) * sz + oz;
        const unsigned char flags = data[base + 14];
        p.return_number = flags & 0x07;
        p.num_returns = (flags >> 3) & 0x07;
        validate_point(p, path + ": point record " + std::to_string(i));
        cloud.points.push_back(p);
    }
    return cloud;
}

}
