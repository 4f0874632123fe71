#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "canopy/dataset.hpp"
#include "canopy/errors.hpp"
#include "canopy/metrics.hpp"

namespace canopy {

// Pooled volume model: fixed effects (1, zmean_f, zmean_f^2, perc_n_2m), a
// per-project random slope on zmean_f, and residual variance proportional to
// zmean_f. Fitted by restricted maximum likelihood.
struct MixedModel {
    Eigen::Vector4d beta = Eigen::Vector4d::Zero();
    double sigma_b = 0.0;
    double sigma_eps = 0.0;
    std::map<std::string, double> blups;
    std::map<std::string, std::size_t> group_sizes;
    std::size_t n_obs = 0;
    std::size_t n_groups = 0;
    Eigen::Vector4d se_beta = Eigen::Vector4d::Zero();
    double theta = 0.0;
    double reml_loglik = 0.0;
    bool boundary = false;
    std::vector<std::pair<double, double>> likelihood_trace;
};

struct MixedFitOptions {
    std::optional<double> fixed_theta;
    double theta_min = 1e-10;
    double theta_max = 1e8;
    double rel_tol = 1e-8;
    std::size_t max_evaluations = 500;
};

namespace mixed_detail {

// Per-group sums that do not depend on the variance ratio. With D = diag(v)
// the rank-1 update of G = D + theta*z*z^T reduces every profiled-likelihood
// evaluation to a handful of 4-vector operations.
struct GroupStats {
    std::string label;
    std::size_t n = 0;
    Eigen::Matrix4d xt_di_x = Eigen::Matrix4d::Zero();
    Eigen::Vector4d xt_di_y = Eigen::Vector4d::Zero();
    Eigen::Vector4d xt_di_z = Eigen::Vector4d::Zero();
    double zt_di_z = 0.0;
    double zt_di_y = 0.0;
    double yt_di_y = 0.0;
    double logdet_d = 0.0;
};

struct Row {
    std::string plot_id;
    std::string project;
    double volume = 0.0;
    double zmean_f = 0.0;
    double perc_n_2m = 0.0;
};

inline Row extract_row(const PlotSample& s) {
    const auto z = s.metrics.get("zmean_f");
    if (!z)
        throw validation_error("plot '" + s.plot_id + "': metric 'zmean_f' is missing");
    if (!(*z > 0.0))
        throw validation_error("plot '" + s.plot_id + "': zmean_f must be positive (it scales the residual "
                               "variance), got " + std::to_string(*z));
    const auto p = s.metrics.get("perc_n_2m");
    if (!p)
        throw validation_error("plot '" + s.plot_id + "': metric 'perc_n_2m' is missing");
    return {s.plot_id, s.project, s.volume_ha, *z, *p};
}

inline Eigen::Vector4d design_row(double zmean_f, double perc_n_2m) {
    return {1.0, zmean_f, zmean_f * zmean_f, perc_n_2m};
}

inline std::map<std::string, GroupStats> accumulate_groups(const std::vector<Row>& rows) {
    std::map<std::string, GroupStats> groups;
    for (const auto& r : rows) {
        auto& g = groups[r.project];
        g.label = r.project;
        const Eigen::Vector4d x = design_row(r.zmean_f, r.perc_n_2m);
        const double v = r.zmean_f;
        g.n += 1;
        g.xt_di_x += x * x.transpose() / v;
        g.xt_di_y += x * (r.volume / v);
        g.xt_di_z += x;
        g.zt_di_z += r.zmean_f;
        g.zt_di_y += r.volume;
        g.yt_di_y += r.volume * r.volume / v;
        g.logdet_d += std::log(v);
    }
    return groups;
}

struct ProfileEval {
    Eigen::Vector4d beta = Eigen::Vector4d::Zero();
    Eigen::Matrix4d xtwx_inv = Eigen::Matrix4d::Zero();
    double sigma2 = 0.0;
    double loglik = 0.0;
};

inline ProfileEval evaluate_profile(const std::map<std::string, GroupStats>& groups,
                                    std::size_t n_obs, double theta) {
    Eigen::Matrix4d a = Eigen::Matrix4d::Zero();
    Eigen::Vector4d rhs = Eigen::Vector4d::Zero();
    double logdet_g = 0.0;
    for (const auto& kv : groups) {
        const auto& g = kv.second;
        const double c = theta / (1.0 + theta * g.zt_di_z);
        a += g.xt_di_x - c * (g.xt_di_z * g.xt_di_z.transpose());
        rhs += g.xt_di_y - c * g.xt_di_z * g.zt_di_y;
        logdet_g += g.logdet_d + std::log1p(theta * g.zt_di_z);
    }

    Eigen::LDLT<Eigen::Matrix4d> ldlt(a);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0.0).any())
        throw singular_error("mixed-model normal equations are singular "
                             "(zmean_f, zmean_f^2 and perc_n_2m may be collinear)");
    const Eigen::Vector4d beta = ldlt.solve(rhs);
    const double logdet_a = ldlt.vectorD().array().log().sum();

    double rss = 0.0;
    for (const auto& kv : groups) {
        const auto& g = kv.second;
        const double c = theta / (1.0 + theta * g.zt_di_z);
        const double zt_di_r = g.zt_di_y - g.xt_di_z.dot(beta);
        rss += g.yt_di_y - 2.0 * beta.dot(g.xt_di_y) + beta.dot(g.xt_di_x * beta) - c * zt_di_r * zt_di_r;
    }
    rss = std::max(rss, 1e-300);

    const double dof = static_cast<double>(n_obs) - 4.0;
    ProfileEval ev;
    ev.beta = beta;
    ev.xtwx_inv = ldlt.solve(Eigen::Matrix4d::Identity());
    ev.sigma2 = rss / dof;
    constexpr double ln_2pi = 1.8378770664093454836;
    ev.loglik = -0.5 * (dof * std::log(ev.sigma2) + logdet_g + logdet_a + dof * (1.0 + ln_2pi));
    return ev;
}

}

inline MixedModel fit_mixed(const std::vector<PlotSample>& samples,
                            const MixedFitOptions& options = {}) {
    std::vector<mixed_detail::Row> rows;
    rows.reserve(samples.size());
    for (const auto& s : samples) rows.push_back(mixed_detail::extract_row(s));
    if (rows.size() < 6)
        throw validation_error("mixed-model fit needs at least 6 plots, got " + std::to_string(rows.size()));

    const auto groups = mixed_detail::accumulate_groups(rows);
    if (groups.size() < 2)
        throw validation_error("mixed-model fit needs at least 2 ALS projects, got " +
                               std::to_string(groups.size()));
    const std::size_t n = rows.size();

    MixedModel model;
    auto evaluate = [&](double theta) {
        if (model.likelihood_trace.size() >= options.max_evaluations) {
            std::string tail;
            const std::size_t from = model.likelihood_trace.size() >= 5 ? model.likelihood_trace.size() - 5 : 0;
            for (std::size_t i = from; i < model.likelihood_trace.size(); ++i)
                tail += "\n  theta=" + std::to_string(model.likelihood_trace[i].first) +
                        " loglik=" + std::to_string(model.likelihood_trace[i].second);
            throw convergence_error("profiled REML search exceeded " + std::to_string(options.max_evaluations) +
                                    " evaluations; last evaluations:" + tail);
        }
        const double ll = mixed_detail::evaluate_profile(groups, n, theta).loglik;
        model.likelihood_trace.emplace_back(theta, ll);
        return ll;
    };

    double best_theta;
    if (options.fixed_theta) {
        if (*options.fixed_theta < 0.0)
            throw validation_error("fixed variance ratio must be nonnegative, got " +
                                   std::to_string(*options.fixed_theta));
        best_theta = *options.fixed_theta;
        evaluate(best_theta);
    } else {
        if (!(options.theta_min > 0.0) || !(options.theta_max > options.theta_min))
            throw validation_error("variance-ratio search bounds must satisfy 0 < min < max");
        const double t_lo = std::log(options.theta_min);
        const double t_hi = std::log(options.theta_max);

        // Coarse scan over log(theta) first; the profiled likelihood is not
        // assumed unimodal, so the refinement bracket comes from the grid.
        constexpr int grid_points = 61;
        int best_idx = 0;
        double best_ll = -std::numeric_limits<double>::infinity();
        std::vector<double> ts(grid_points);
        for (int i = 0; i < grid_points; ++i) {
            ts[i] = t_lo + (t_hi - t_lo) * static_cast<double>(i) / (grid_points - 1);
            const double ll = evaluate(std::exp(ts[i]));
            if (ll > best_ll) {
                best_ll = ll;
                best_idx = i;
            }
        }

        double a = ts[std::max(best_idx - 1, 0)];
        double b = ts[std::min(best_idx + 1, grid_points - 1)];
        constexpr double golden = 0.6180339887498949;
        double x1 = b - golden * (b - a);
        double x2 = a + golden * (b - a);
        double f1 = evaluate(std::exp(x1));
        double f2 = evaluate(std::exp(x2));
        while (b - a > options.rel_tol) {
            if (f1 < f2) {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + golden * (b - a);
                f2 = evaluate(std::exp(x2));
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - golden * (b - a);
                f1 = evaluate(std::exp(x1));
            }
        }

        const auto best = std::max_element(model.likelihood_trace.begin(), model.likelihood_trace.end(),
                                           [](const auto& lhs, const auto& rhs) { return lhs.second < rhs.second; });
        best_theta = best->first;
        const double t_best = std::log(best_theta);
        const double edge = (t_hi - t_lo) / (grid_points - 1);
        model.boundary = t_best <= t_lo + edge * 1e-6 || t_best >= t_hi - edge * 1e-6;
    }

    const auto ev = mixed_detail::evaluate_profile(groups, n, best_theta);
    model.beta = ev.beta;
    model.theta = best_theta;
    model.sigma_eps = std::sqrt(ev.sigma2);
    model.sigma_b = std::sqrt(best_theta * ev.sigma2);
    model.reml_loglik = ev.loglik;
    model.se_beta = (ev.sigma2 * ev.xtwx_inv.diagonal().array()).sqrt().matrix();
    model.n_obs = n;
    model.n_groups = groups.size();
    for (const auto& kv : groups) {
        const auto& g = kv.second;
        model.group_sizes[kv.first] = g.n;
        const double zt_di_r = g.zt_di_y - g.xt_di_z.dot(ev.beta);
        model.blups[kv.first] = best_theta * zt_di_r / (1.0 + best_theta * g.zt_di_z);
    }
    return model;
}

inline double predict_mixed(const MixedModel& model, const MetricVector& metrics,
                            const std::string& project = "") {
    const auto z = metrics.get("zmean_f");
    if (!z) throw prediction_domain_error("metric 'zmean_f' is missing");
    const auto p = metrics.get("perc_n_2m");
    if (!p) throw prediction_domain_error("metric 'perc_n_2m' is missing");
    double b = 0.0;
    if (!project.empty()) {
        const auto it = model.blups.find(project);
        if (it != model.blups.end()) b = it->second;
    }
    const double value = model.beta(0) + (b + model.beta(1)) * *z + model.beta(2) * *z * *z + model.beta(3) * *p;
    return std::max(value, 0.0);
}

struct ResidualEntry {
    std::string plot_id;
    std::string project;
    double residual = 0.0;
    double standardized = 0.0;
    bool flagged = false;
};

inline std::vector<ResidualEntry> residual_diagnostics(const MixedModel& model,
                                                       const std::vector<PlotSample>& samples,
                                                       double flag_threshold = 3.0) {
    std::vector<ResidualEntry> report;
    report.reserve(samples.size());
    for (const auto& s : samples) {
        const auto r = mixed_detail::extract_row(s);
        double b = 0.0;
        const auto it = model.blups.find(r.project);
        if (it != model.blups.end()) b = it->second;
        const double fitted = model.beta(0) + (b + model.beta(1)) * r.zmean_f +
                              model.beta(2) * r.zmean_f * r.zmean_f + model.beta(3) * r.perc_n_2m;
        ResidualEntry e;
        e.plot_id = r.plot_id;
        e.project = r.project;
        e.residual = r.volume - fitted;
        e.standardized = e.residual / (model.sigma_eps * std::sqrt(r.zmean_f));
        e.flagged = std::abs(e.standardized) > flag_threshold;
        report.push_back(e);
    }
    return report;
}

}
