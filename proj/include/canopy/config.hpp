#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "canopy/csv.hpp"
#include "canopy/errors.hpp"

namespace canopy {

// Sectioned key = value text, '#' starts a comment. Values are kept as raw
// strings; typed access happens through the getters.
class Config {
public:
    static Config parse_string(const std::string& text, const std::string& name = "<config>") {
        Config c;
        c.name_ = name;
        std::string section;
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const std::size_t eol = text.find('\n', pos);
            std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
            pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
            ++line_no;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed{csv::trim(line)};
            if (trimmed.empty()) continue;
            if (trimmed.front() == '[') {
                if (trimmed.back() != ']' || trimmed.size() < 3)
                    throw parse_error(name, line_no, "malformed section header '" + trimmed + "'");
                section = std::string(csv::trim(trimmed.substr(1, trimmed.size() - 2)));
                continue;
            }
            const std::size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw parse_error(name, line_no, "expected key = value, got '" + trimmed + "'");
            const std::string key{csv::trim(trimmed.substr(0, eq))};
            const std::string value{csv::trim(trimmed.substr(eq + 1))};
            if (key.empty())
                throw parse_error(name, line_no, "empty key");
            c.sections_[section][key] = value;
        }
        return c;
    }

    static Config parse_file(const std::string& path) {
        const auto lines = csv::read_lines(path);
        std::string text;
        for (const auto& l : lines) {
            text += l;
            text += '\n';
        }
        return parse_string(text, path);
    }

    bool has(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    std::string require(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        if (s == sections_.end() || !s->second.count(key))
            throw validation_error(name_ + ": missing required setting [" + section + "] " + key);
        return s->second.at(key);
    }

    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback) const {
        return has(section, key) ? sections_.at(section).at(key) : fallback;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        if (!has(section, key)) return fallback;
        return parse_double(section, key);
    }

    double require_double(const std::string& section, const std::string& key) const {
        require(section, key);
        return parse_double(section, key);
    }

    long long get_long(const std::string& section, const std::string& key, long long fallback) const {
        if (!has(section, key)) return fallback;
        return parse_long(section, key);
    }

    std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
        if (!has(section, key)) return fallback;
        const auto v = parse_long(section, key);
        if (v < 0)
            throw validation_error(name_ + ": [" + section + "] " + key + " must be nonnegative");
        return static_cast<std::uint64_t>(v);
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        if (!has(section, key)) return fallback;
        const std::string v = sections_.at(section).at(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw validation_error(name_ + ": [" + section + "] " + key + " must be a boolean, got '" + v + "'");
    }

    std::optional<double> get_optional_double(const std::string& section, const std::string& key) const {
        if (!has(section, key)) return std::nullopt;
        const std::string v = sections_.at(section).at(key);
        if (v.empty()) return std::nullopt;
        return parse_double(section, key);
    }

    std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                    const std::vector<double>& fallback) const {
        if (!has(section, key)) return fallback;
        std::vector<double> out;
        for (const auto& piece : csv::split(sections_.at(section).at(key)))
            out.push_back(csv::parse_double(csv::trim(piece), name_, 0));
        return out;
    }

    std::set<std::string> get_string_set(const std::string& section, const std::string& key,
                                         const std::set<std::string>& fallback) const {
        if (!has(section, key)) return fallback;
        std::set<std::string> out;
        for (const auto& piece : csv::split(sections_.at(section).at(key)))
            out.insert(std::string(csv::trim(piece)));
        return out;
    }

private:
    double parse_double(const std::string& section, const std::string& key) const {
        const std::string& v = sections_.at(section).at(key);
        try {
            return csv::parse_double(v, name_, 0);
        } catch (const parse_error&) {
            throw validation_error(name_ + ": [" + section + "] " + key + " must be a number, got '" + v + "'");
        }
    }

    long long parse_long(const std::string& section, const std::string& key) const {
        const std::string& v = sections_.at(section).at(key);
        try {
            return csv::parse_long(v, name_, 0);
        } catch (const parse_error&) {
            throw validation_error(name_ + ": [" + section + "] " + key + " must be an integer, got '" + v + "'");
        }
    }

    std::string name_;
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

}
