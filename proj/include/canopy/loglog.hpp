#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "canopy/dataset.hpp"
#include "canopy/errors.hpp"
#include "canopy/metrics.hpp"

namespace canopy {

// Regression design: intercept column plus one column per named predictor.
struct DesignMatrix {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<std::string> columns;
};

// Volume model linear in log space. The stored intercept is the raw OLS
// estimate; the lognormal back-transformation shift is applied when
// predicting, not here.
struct LogLogModel {
    std::vector<std::string> predictors;
    std::vector<double> beta;
    double sigma2 = 0.0;
    double aic = 0.0;
    std::size_t n_obs = 0;
};

struct StepwiseStep {
    enum class Action { add, drop };
    Action action = Action::add;
    std::string metric;
    double aic = 0.0;
};

struct StepwiseResult {
    LogLogModel model;
    double initial_aic = 0.0;
    std::vector<StepwiseStep> trace;
};

namespace loglog_detail {

inline double aic_of(double rss, std::size_t n, std::size_t n_predictors) {
    // p counts the intercept, the slope terms and the error variance.
    const double p = static_cast<double>(n_predictors) + 2.0;
    const double safe_rss = std::max(rss, 1e-300);
    return static_cast<double>(n) * std::log(safe_rss / static_cast<double>(n)) + 2.0 * p;
}

inline DesignMatrix build_design(const std::vector<PlotSample>& samples,
                                 const std::vector<std::string>& predictors) {
    const std::size_t n = samples.size();
    const std::size_t k = predictors.size();
    DesignMatrix d;
    d.columns.reserve(k + 1);
    d.columns.push_back("intercept");
    for (const auto& name : predictors) d.columns.push_back(name);
    d.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k + 1));
    d.y.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = samples[i];
        if (!(s.volume_ha > 0.0))
            throw validation_error("plot '" + s.plot_id + "': volume must be positive for a log-log fit, got " +
                                   std::to_string(s.volume_ha));
        d.y(static_cast<Eigen::Index>(i)) = std::log(s.volume_ha);
        d.x(static_cast<Eigen::Index>(i), 0) = 1.0;
        for (std::size_t j = 0; j < k; ++j) {
            const auto v = s.metrics.get(predictors[j]);
            if (!v)
                throw validation_error("plot '" + s.plot_id + "': metric '" + predictors[j] + "' is missing");
            if (!(*v > 0.0))
                throw validation_error("plot '" + s.plot_id + "': metric '" + predictors[j] +
                                       "' must be positive for a log-log fit, got " + std::to_string(*v));
            d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = std::log(*v);
        }
    }
    return d;
}

}

inline LogLogModel fit_loglog(const std::vector<PlotSample>& samples,
                              const std::vector<std::string>& predictors) {
    const std::size_t n = samples.size();
    const std::size_t k = predictors.size();
    if (n < k + 2)
        throw validation_error("log-log fit needs at least " + std::to_string(k + 2) + " plots for " +
                               std::to_string(k) + " predictors, got " + std::to_string(n));

    const DesignMatrix d = loglog_detail::build_design(samples, predictors);

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.x);
    if (qr.rank() < d.x.cols()) {
        std::string cols;
        for (const auto& name : predictors) cols += (cols.empty() ? "" : ", ") + name;
        throw singular_error("log-log design matrix is rank deficient (predictors: " + cols + ")");
    }
    const Eigen::VectorXd beta = qr.solve(d.y);
    const double rss = (d.y - d.x * beta).squaredNorm();

    LogLogModel m;
    m.predictors = predictors;
    m.beta.assign(beta.data(), beta.data() + beta.size());
    m.sigma2 = rss / static_cast<double>(n - k - 1);
    m.aic = loglog_detail::aic_of(rss, n, k);
    m.n_obs = n;
    return m;
}

// Predictors considered by the stepwise search: present and strictly positive
// on every row, so any subset stays fittable and cross-validatable.
inline std::vector<std::string> stepwise_candidate_pool(const std::vector<PlotSample>& samples,
                                                        const std::vector<std::string>& candidates) {
    std::vector<std::string> pool;
    for (const auto& name : candidates) {
        if (std::find(pool.begin(), pool.end(), name) != pool.end()) continue;
        bool usable = !samples.empty();
        for (const auto& s : samples) {
            const auto v = s.metrics.get(name);
            if (!v || !(*v > 0.0)) {
                usable = false;
                break;
            }
        }
        if (usable) pool.push_back(name);
    }
    return pool;
}

inline StepwiseResult stepwise_select(const std::vector<PlotSample>& samples,
                                      const std::vector<std::string>& candidates,
                                      std::size_t max_predictors = 4) {
    const std::vector<std::string> pool = stepwise_candidate_pool(samples, candidates);
    if (pool.empty())
        throw validation_error("stepwise selection has no usable candidate metrics "
                               "(each must be present and positive on every plot)");

    StepwiseResult result;
    std::vector<std::size_t> current;
    auto names_of = [&pool](const std::vector<std::size_t>& idx) {
        std::vector<std::string> names;
        names.reserve(idx.size());
        for (std::size_t i : idx) names.push_back(pool[i]);
        return names;
    };

    LogLogModel best = fit_loglog(samples, {});
    result.initial_aic = best.aic;

    while (true) {
        struct Move {
            std::vector<std::size_t> subset;
            StepwiseStep::Action action;
            std::size_t pool_index;
        };
        std::vector<Move> moves;
        if (current.size() < max_predictors) {
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (std::find(current.begin(), current.end(), i) != current.end()) continue;
                auto subset = current;
                subset.insert(std::upper_bound(subset.begin(), subset.end(), i), i);
                moves.push_back({std::move(subset), StepwiseStep::Action::add, i});
            }
        }
        for (std::size_t i : current) {
            auto subset = current;
            subset.erase(std::find(subset.begin(), subset.end(), i));
            moves.push_back({std::move(subset), StepwiseStep::Action::drop, i});
        }

        const Move* best_move = nullptr;
        LogLogModel best_move_model;
        for (const auto& move : moves) {
            LogLogModel m;
            try {
                m = fit_loglog(samples, names_of(move.subset));
            } catch (const singular_error&) {
                continue;
            }
            const bool better = best_move == nullptr || m.aic < best_move_model.aic ||
                                (m.aic == best_move_model.aic && move.pool_index < best_move->pool_index);
            if (better) {
                best_move = &move;
                best_move_model = std::move(m);
            }
        }

        if (best_move == nullptr || !(best_move_model.aic < best.aic)) break;
        current = best_move->subset;
        best = std::move(best_move_model);
        result.trace.push_back({best_move->action, pool[best_move->pool_index], best.aic});
    }

    result.model = std::move(best);
    return result;
}

inline double predict_loglog(const LogLogModel& model, const MetricVector& metrics) {
    double lp = model.beta.at(0) + model.sigma2 / 2.0;
    for (std::size_t j = 0; j < model.predictors.size(); ++j) {
        const auto v = metrics.get(model.predictors[j]);
        if (!v)
            throw prediction_domain_error("metric '" + model.predictors[j] + "' is missing");
        if (!(*v > 0.0))
            throw prediction_domain_error("metric '" + model.predictors[j] + "' must be positive, got " +
                                          std::to_string(*v));
        lp += model.beta.at(j + 1) * std::log(*v);
    }
    return std::exp(lp);
}

}
