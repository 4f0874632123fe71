#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "canopy/errors.hpp"
#include "canopy/loglog.hpp"
#include "canopy/mixed.hpp"
#include "canopy/version.hpp"

namespace canopy {

// Model files are JSON. nlohmann serializes doubles with shortest
// round-trip formatting, so loading reproduces predictions bit for bit.

inline nlohmann::json loglog_to_json(const LogLogModel& model) {
    nlohmann::json j;
    j["family"] = "fmi_loglog";
    j["version"] = version;
    j["predictors"] = model.predictors;
    j["beta"] = model.beta;
    j["sigma2"] = model.sigma2;
    j["aic"] = model.aic;
    j["n_obs"] = model.n_obs;
    return j;
}

inline LogLogModel loglog_from_json(const nlohmann::json& j) {
    if (j.value("family", "") != std::string("fmi_loglog"))
        throw validation_error("model file is not a log-log model (family: '" + j.value("family", "") + "')");
    LogLogModel m;
    m.predictors = j.at("predictors").get<std::vector<std::string>>();
    m.beta = j.at("beta").get<std::vector<double>>();
    if (m.beta.size() != m.predictors.size() + 1)
        throw validation_error("log-log model has " + std::to_string(m.beta.size()) + " coefficients for " +
                               std::to_string(m.predictors.size()) + " predictors");
    m.sigma2 = j.at("sigma2").get<double>();
    m.aic = j.at("aic").get<double>();
    m.n_obs = j.at("n_obs").get<std::size_t>();
    return m;
}

inline nlohmann::json mixed_to_json(const MixedModel& model) {
    nlohmann::json j;
    j["family"] = "nfi_mixed";
    j["version"] = version;
    j["beta"] = std::vector<double>(model.beta.data(), model.beta.data() + 4);
    j["se_beta"] = std::vector<double>(model.se_beta.data(), model.se_beta.data() + 4);
    j["sigma_b"] = model.sigma_b;
    j["sigma_eps"] = model.sigma_eps;
    j["theta"] = model.theta;
    j["reml_loglik"] = model.reml_loglik;
    j["boundary"] = model.boundary;
    j["n_obs"] = model.n_obs;
    j["n_groups"] = model.n_groups;
    j["blups"] = model.blups;
    j["group_sizes"] = model.group_sizes;
    return j;
}

inline MixedModel mixed_from_json(const nlohmann::json& j) {
    if (j.value("family", "") != std::string("nfi_mixed"))
        throw validation_error("model file is not a mixed model (family: '" + j.value("family", "") + "')");
    MixedModel m;
    const auto beta = j.at("beta").get<std::vector<double>>();
    const auto se = j.at("se_beta").get<std::vector<double>>();
    if (beta.size() != 4 || se.size() != 4)
        throw validation_error("mixed model must have exactly 4 coefficients");
    for (int i = 0; i < 4; ++i) {
        m.beta(i) = beta[static_cast<std::size_t>(i)];
        m.se_beta(i) = se[static_cast<std::size_t>(i)];
    }
    m.sigma_b = j.at("sigma_b").get<double>();
    m.sigma_eps = j.at("sigma_eps").get<double>();
    m.theta = j.at("theta").get<double>();
    m.reml_loglik = j.at("reml_loglik").get<double>();
    m.boundary = j.at("boundary").get<bool>();
    m.n_obs = j.at("n_obs").get<std::size_t>();
    m.n_groups = j.at("n_groups").get<std::size_t>();
    m.blups = j.at("blups").get<std::map<std::string, double>>();
    m.group_sizes = j.at("group_sizes").get<std::map<std::string, std::size_t>>();
    return m;
}

inline void write_model_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw validation_error("cannot open model file for writing: " + path);
    out << j.dump(1, '\t') << '\n';
}

inline nlohmann::json read_model_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open model file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw validation_error("malformed model file " + path + ": " + e.what());
    }
    return j;
}

}
