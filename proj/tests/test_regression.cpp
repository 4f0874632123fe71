#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include <canopy/errors.hpp>
#include <canopy/loglog.hpp>
#include <canopy/mixed.hpp>
#include <canopy/model_io.hpp>
#include <canopy/rng.hpp>
#include <canopy/simulation.hpp>

using namespace canopy;

namespace {

PlotSample make_sample(const std::string& id, double volume,
                       const std::vector<std::pair<std::string, double>>& metrics,
                       const std::string& project = "A") {
    PlotSample s;
    s.plot_id = id;
    s.project = project;
    s.volume_ha = volume;
    for (const auto& [k, v] : metrics) s.metrics.set(k, v);
    return s;
}

// Log-linear responses from known coefficients, optional multiplicative noise.
std::vector<PlotSample> loglinear_samples(std::size_t n, const std::vector<double>& beta,
                                          const std::vector<std::string>& names, Rng& rng,
                                          double noise_sd = 0.0) {
    std::vector<PlotSample> samples;
    for (std::size_t i = 0; i < n; ++i) {
        double lp = beta[0];
        std::vector<std::pair<std::string, double>> metrics;
        for (std::size_t j = 0; j < names.size(); ++j) {
            const double x = rng.uniform(2.0, 30.0);
            metrics.emplace_back(names[j], x);
            lp += beta[j + 1] * std::log(x);
        }
        const double y = std::exp(lp + noise_sd * rng.normal());
        samples.push_back(make_sample("p" + std::to_string(i + 1), y, metrics));
    }
    return samples;
}

// Straight normal-equation solve, independent of the QR path under test.
Eigen::VectorXd ols_oracle(const std::vector<PlotSample>& samples,
                           const std::vector<std::string>& predictors) {
    const auto n = static_cast<Eigen::Index>(samples.size());
    const auto k = static_cast<Eigen::Index>(predictors.size());
    Eigen::MatrixXd x(n, k + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        for (Eigen::Index j = 0; j < k; ++j)
            x(i, j + 1) = std::log(*samples[static_cast<std::size_t>(i)].metrics.get(
                predictors[static_cast<std::size_t>(j)]));
        y(i) = std::log(samples[static_cast<std::size_t>(i)].volume_ha);
    }
    return (x.transpose() * x).inverse() * (x.transpose() * y);
}

struct DenseMixed {
    Eigen::Vector4d beta;
    Eigen::Vector4d se;
    double sigma2 = 0.0;
    double loglik = 0.0;
    std::map<std::string, double> blups;
};

// Textbook REML at a fixed variance ratio using explicit n-by-n matrices.
DenseMixed dense_mixed_oracle(const std::vector<PlotSample>& samples, double theta) {
    const auto n = static_cast<Eigen::Index>(samples.size());
    Eigen::MatrixXd x(n, 4);
    Eigen::VectorXd y(n);
    Eigen::MatrixXd vstar = Eigen::MatrixXd::Zero(n, n);
    std::map<std::string, std::vector<Eigen::Index>> groups;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        const double z = *s.metrics.get("zmean_f");
        const double p = *s.metrics.get("perc_n_2m");
        x.row(i) << 1.0, z, z * z, p;
        y(i) = s.volume_ha;
        vstar(i, i) = z;
        groups[s.project].push_back(i);
    }
    for (const auto& kv : groups)
        for (Eigen::Index a : kv.second)
            for (Eigen::Index b : kv.second) vstar(a, b) += theta * x(a, 1) * x(b, 1);

    const Eigen::MatrixXd vinv = vstar.inverse();
    const Eigen::Matrix4d xtvx = x.transpose() * vinv * x;
    const Eigen::Matrix4d xtvx_inv = xtvx.inverse();

    DenseMixed d;
    d.beta = xtvx_inv * (x.transpose() * vinv * y);
    const Eigen::VectorXd r = y - x * d.beta;
    const double dof = static_cast<double>(n) - 4.0;
    d.sigma2 = r.dot(vinv * r) / dof;
    d.se = (d.sigma2 * xtvx_inv.diagonal().array()).sqrt();
    const double ln_2pi = std::log(2.0 * 3.14159265358979323846);
    d.loglik = -0.5 * (dof * std::log(d.sigma2) + std::log(vstar.determinant()) +
                       std::log(xtvx.determinant()) + dof * (1.0 + ln_2pi));
    for (const auto& kv : groups) {
        double b = 0.0;
        for (Eigen::Index a : kv.second) b += x(a, 1) * vinv.row(a).dot(r) * theta;
        d.blups[kv.first] = b;
    }
    return d;
}

}

TEST_CASE("log-log fit matches the normal-equation oracle") {
    Rng rng(7);
    const std::vector<double> beta = {0.8, 1.4, -0.3, 0.6};
    const std::vector<std::string> names = {"m1", "m2", "m3"};
    const auto samples = loglinear_samples(40, beta, names, rng, 0.15);

    const LogLogModel m = fit_loglog(samples, names);
    const Eigen::VectorXd ref = ols_oracle(samples, names);
    REQUIRE(m.beta.size() == 4);
    for (std::size_t j = 0; j < 4; ++j)
        REQUIRE(m.beta[j] == Catch::Approx(ref(static_cast<Eigen::Index>(j))).epsilon(1e-9));
    REQUIRE(m.n_obs == 40);

    // residual variance against direct recomputation
    double rss = 0.0;
    for (const auto& s : samples) {
        double lp = m.beta[0];
        for (std::size_t j = 0; j < names.size(); ++j)
            lp += m.beta[j + 1] * std::log(*s.metrics.get(names[j]));
        const double e = std::log(s.volume_ha) - lp;
        rss += e * e;
    }
    REQUIRE(m.sigma2 == Catch::Approx(rss / (40.0 - 4.0)).epsilon(1e-9));
    REQUIRE(m.aic == Catch::Approx(40.0 * std::log(rss / 40.0) + 2.0 * 5.0).epsilon(1e-12));
}

TEST_CASE("noiseless log-log data is recovered to high precision") {
    Rng rng(11);
    const std::vector<double> beta = {1.5, 2.0, -0.5, 0.25, 1.0};
    const std::vector<std::string> names = {"a", "b", "c", "d"};
    const auto samples = loglinear_samples(50, beta, names, rng, 0.0);
    const LogLogModel m = fit_loglog(samples, names);
    for (std::size_t j = 0; j < beta.size(); ++j)
        REQUIRE(m.beta[j] == Catch::Approx(beta[j]).epsilon(1e-8));
    REQUIRE(m.sigma2 < 1e-18);
}

TEST_CASE("log-log fit validates inputs") {
    Rng rng(3);
    const auto samples = loglinear_samples(4, {1.0, 0.5}, {"m"}, rng, 0.0);
    REQUIRE_THROWS_AS(fit_loglog({samples[0], samples[1]}, {"m"}), validation_error);

    auto zero_vol = samples;
    zero_vol[1].volume_ha = 0.0;
    REQUIRE_THROWS_WITH(fit_loglog(zero_vol, {"m"}), Catch::Matchers::ContainsSubstring("p2"));

    auto missing = samples;
    missing[2].metrics = MetricVector{};
    REQUIRE_THROWS_WITH(fit_loglog(missing, {"m"}), Catch::Matchers::ContainsSubstring("missing"));

    // duplicated column makes the design singular
    std::vector<PlotSample> dup;
    for (const auto& s : samples) {
        PlotSample t = s;
        t.metrics.set("m_copy", *s.metrics.get("m"));
        dup.push_back(t);
    }
    REQUIRE_THROWS_AS(fit_loglog(dup, {"m", "m_copy"}), singular_error);
}

TEST_CASE("bias-corrected back-transform shifts by half the residual variance") {
    LogLogModel m;
    m.predictors = {"m1"};
    m.beta = {1.0, 2.0};
    m.sigma2 = 0.04;
    MetricVector mv;
    mv.set("m1", std::exp(1.0));
    REQUIRE(predict_loglog(m, mv) == Catch::Approx(std::exp(1.0 + 2.0 + 0.02)));

    mv.set("m1", -1.0);
    REQUIRE_THROWS_AS(predict_loglog(m, mv), prediction_domain_error);
    MetricVector none;
    REQUIRE_THROWS_AS(predict_loglog(m, none), prediction_domain_error);
}

TEST_CASE("stepwise selection finds planted predictors and respects the cap") {
    Rng rng(23);
    std::vector<PlotSample> samples;
    for (std::size_t i = 0; i < 200; ++i) {
        const double x_true = rng.uniform(5.0, 25.0);
        std::vector<std::pair<std::string, double>> metrics = {{"true_m", x_true}};
        for (int d = 0; d < 5; ++d)
            metrics.emplace_back("decoy" + std::to_string(d), rng.uniform(5.0, 25.0));
        const double y = std::exp(0.5 + 1.2 * std::log(x_true) + 0.05 * rng.normal());
        samples.push_back(make_sample("p" + std::to_string(i), y, metrics));
    }
    std::vector<std::string> pool = {"decoy0", "decoy1", "true_m", "decoy2", "decoy3", "decoy4"};
    const auto result = stepwise_select(samples, pool, 4);
    REQUIRE(result.model.predictors.size() <= 4);
    REQUIRE(std::find(result.model.predictors.begin(), result.model.predictors.end(), "true_m") !=
            result.model.predictors.end());

    // strict AIC descent along the trace, ending at the reported model
    double last = result.initial_aic;
    for (const auto& step : result.trace) {
        REQUIRE(step.aic < last);
        last = step.aic;
    }
    REQUIRE(result.model.aic == last);

    // deterministic: same input, same output
    const auto again = stepwise_select(samples, pool, 4);
    REQUIRE(again.model.predictors == result.model.predictors);
    REQUIRE(again.model.beta == result.model.beta);
}

TEST_CASE("stepwise pool keeps only metrics positive on every row") {
    Rng rng(5);
    auto samples = loglinear_samples(10, {1.0, 0.7}, {"good"}, rng, 0.1);
    for (auto& s : samples) s.metrics.set("sometimes", 3.0);
    samples[4].metrics.set("sometimes", 0.0);
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) samples[i].metrics.set("partial", 2.0);

    const auto pool = stepwise_candidate_pool(samples, {"good", "sometimes", "partial", "good"});
    REQUIRE(pool == std::vector<std::string>{"good"});
    REQUIRE_THROWS_AS(stepwise_select(samples, {"partial"}, 4), validation_error);
}

TEST_CASE("stepwise drops a predictor made redundant by later additions") {
    // The proxy is the product of the real drivers plus noise, so it wins the
    // first step, but the response weights the drivers unevenly, so both real
    // metrics still enter. The proxy noise is built orthogonal to the
    // residual of the real-driver fit, which makes the final drop certain:
    // removing the proxy changes the residual sum of squares by nothing and
    // saves the parameter penalty.
    Rng rng(31);
    const std::size_t n = 60;
    std::vector<double> la(n), lb(n), ly(n);
    Eigen::MatrixXd x(n, 3);
    Eigen::VectorXd yv(n), epv(n);
    for (std::size_t i = 0; i < n; ++i) {
        la[i] = std::log(rng.uniform(2.0, 20.0));
        lb[i] = std::log(rng.uniform(2.0, 20.0));
        ly[i] = 0.3 + 1.3 * la[i] + 0.7 * lb[i] + 0.05 * rng.normal();
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = 1.0;
        x(r, 1) = la[i];
        x(r, 2) = lb[i];
        yv(r) = ly[i];
        epv(r) = 0.1 * rng.normal();
    }
    const Eigen::VectorXd resid = yv - x * x.colPivHouseholderQr().solve(yv);
    epv -= resid * (epv.dot(resid) / resid.squaredNorm());

    std::vector<PlotSample> samples;
    for (std::size_t i = 0; i < n; ++i)
        samples.push_back(
            make_sample("p" + std::to_string(i), std::exp(ly[i]),
                        {{"proxy", std::exp(la[i] + lb[i] + epv(static_cast<Eigen::Index>(i)))},
                         {"m1", std::exp(la[i])},
                         {"m2", std::exp(lb[i])}}));

    const auto result = stepwise_select(samples, {"proxy", "m1", "m2"}, 4);
    REQUIRE(result.model.predictors == std::vector<std::string>{"m1", "m2"});
    REQUIRE(result.trace.size() == 4);
    REQUIRE(result.trace[0].action == StepwiseStep::Action::add);
    REQUIRE(result.trace[0].metric == "proxy");
    REQUIRE(result.trace[3].action == StepwiseStep::Action::drop);
    REQUIRE(result.trace[3].metric == "proxy");
    REQUIRE(result.model.aic == Catch::Approx(fit_loglog(samples, {"m1", "m2"}).aic));
}

TEST_CASE("mixed fit with a fixed ratio matches the dense GLS oracle") {
    TrueModel truth;
    const auto samples = simulate_mixed_responses(truth, 4, 8, 424242);
    for (double theta : {0.0, 0.01, 0.5, 10.0}) {
        MixedFitOptions opts;
        opts.fixed_theta = theta;
        const MixedModel m = fit_mixed(samples, opts);
        const DenseMixed ref = dense_mixed_oracle(samples, theta);
        for (int j = 0; j < 4; ++j) {
            REQUIRE(m.beta(j) == Catch::Approx(ref.beta(j)).epsilon(1e-6));
            REQUIRE(m.se_beta(j) == Catch::Approx(ref.se(j)).epsilon(1e-6));
        }
        REQUIRE(m.sigma_eps * m.sigma_eps == Catch::Approx(ref.sigma2).epsilon(1e-8));
        REQUIRE(m.reml_loglik == Catch::Approx(ref.loglik).margin(1e-6));
        for (const auto& [label, blup] : ref.blups)
            REQUIRE(m.blups.at(label) == Catch::Approx(blup).margin(1e-8));
        REQUIRE(m.theta == theta);
    }
}

TEST_CASE("theta = 0 reduces to weighted least squares") {
    TrueModel truth;
    const auto samples = simulate_mixed_responses(truth, 3, 10, 99);
    MixedFitOptions opts;
    opts.fixed_theta = 0.0;
    const MixedModel m = fit_mixed(samples, opts);

    // explicit weighted normal equations, weights 1/zmean_f
    Eigen::Matrix4d xtwx = Eigen::Matrix4d::Zero();
    Eigen::Vector4d xtwy = Eigen::Vector4d::Zero();
    for (const auto& s : samples) {
        const double z = *s.metrics.get("zmean_f");
        const double p = *s.metrics.get("perc_n_2m");
        const Eigen::Vector4d row(1.0, z, z * z, p);
        xtwx += row * row.transpose() / z;
        xtwy += row * (s.volume_ha / z);
    }
    const Eigen::Vector4d ref = xtwx.inverse() * xtwy;
    for (int j = 0; j < 4; ++j) REQUIRE(m.beta(j) == Catch::Approx(ref(j)).epsilon(1e-8));
    REQUIRE(m.sigma_b == 0.0);
    for (const auto& [label, blup] : m.blups) REQUIRE(blup == 0.0);
}

TEST_CASE("REML search returns the best evaluated ratio and logs every evaluation") {
    TrueModel truth;
    truth.sigma_b = 8.0;
    const auto samples = simulate_mixed_responses(truth, 8, 12, 2024);
    const MixedModel m = fit_mixed(samples);

    REQUIRE_FALSE(m.likelihood_trace.empty());
    REQUIRE(m.likelihood_trace.size() < 500);
    for (const auto& [theta, ll] : m.likelihood_trace) REQUIRE(m.reml_loglik >= ll - 1e-12);

    // the profiled solution at the returned ratio matches the dense solve
    const DenseMixed ref = dense_mixed_oracle(samples, m.theta);
    for (int j = 0; j < 4; ++j) REQUIRE(m.beta(j) == Catch::Approx(ref.beta(j)).epsilon(1e-6));
    REQUIRE(m.reml_loglik == Catch::Approx(ref.loglik).margin(1e-6));
    REQUIRE_FALSE(m.boundary);
    REQUIRE(m.n_groups == 8);
    REQUIRE(m.group_sizes.at("G1") == 12);
    REQUIRE(m.sigma_b == Catch::Approx(std::sqrt(m.theta) * m.sigma_eps));
}

TEST_CASE("mixed parameter recovery on one long simulation") {
    TrueModel truth;
    truth.sigma_b = 6.0;
    const auto samples = simulate_mixed_responses(truth, 26, 40, 7);
    const MixedModel m = fit_mixed(samples);
    for (std::size_t j = 0; j < 4; ++j) {
        const auto i = static_cast<Eigen::Index>(j);
        REQUIRE(std::abs(m.beta(i) - truth.beta[j]) < 4.0 * m.se_beta(i) + 1e-9);
    }
    REQUIRE(m.sigma_eps == Catch::Approx(truth.sigma_eps).epsilon(0.15));
    REQUIRE(m.sigma_b == Catch::Approx(truth.sigma_b).epsilon(0.5));
}

TEST_CASE("mixed fit input contracts") {
    TrueModel truth;
    const auto samples = simulate_mixed_responses(truth, 2, 3, 1);
    REQUIRE_THROWS_AS(fit_mixed({samples[0], samples[1], samples[2]}), validation_error);

    auto one_group = samples;
    for (auto& s : one_group) s.project = "G1";
    REQUIRE_THROWS_AS(fit_mixed(one_group), validation_error);

    auto bad_z = samples;
    bad_z[0].metrics.set("zmean_f", 0.0);
    REQUIRE_THROWS_WITH(fit_mixed(bad_z), Catch::Matchers::ContainsSubstring("zmean_f"));

    MixedFitOptions neg;
    neg.fixed_theta = -1.0;
    REQUIRE_THROWS_AS(fit_mixed(samples, neg), validation_error);
}

TEST_CASE("REML evaluation cap raises a diagnostic error") {
    TrueModel truth;
    const auto samples = simulate_mixed_responses(truth, 3, 10, 5);
    MixedFitOptions opts;
    opts.max_evaluations = 10;
    REQUIRE_THROWS_AS(fit_mixed(samples, opts), convergence_error);
    try {
        fit_mixed(samples, opts);
        FAIL("expected convergence_error");
    } catch (const convergence_error& e) {
        REQUIRE(std::string(e.what()).find("theta=") != std::string::npos);
    }
}

TEST_CASE("mixed prediction reproduces the documented example") {
    MixedModel m;
    m.beta << 23.73, 19.75, 0.98, -63.34;
    m.blups["A"] = -0.92;
    MetricVector mv;
    mv.set("zmean_f", 10.0);
    mv.set("perc_n_2m", 0.9);
    REQUIRE(predict_mixed(m, mv, "A") == Catch::Approx(253.024).margin(5e-4));
    // unknown project and omitted project fall back to the fixed part
    REQUIRE(predict_mixed(m, mv, "Z") == Catch::Approx(253.024 + 9.2).margin(5e-4));
    REQUIRE(predict_mixed(m, mv) == predict_mixed(m, mv, "Z"));

    // large negative linear term floors at zero
    MixedModel neg;
    neg.beta << -1000.0, 0.0, 0.0, 0.0;
    REQUIRE(predict_mixed(neg, mv) == 0.0);

    MetricVector no_z;
    no_z.set("perc_n_2m", 0.5);
    REQUIRE_THROWS_AS(predict_mixed(m, no_z), prediction_domain_error);
    MetricVector no_p;
    no_p.set("zmean_f", 10.0);
    REQUIRE_THROWS_AS(predict_mixed(m, no_p), prediction_domain_error);
}

TEST_CASE("residual diagnostics standardize by the variance function and flag outliers") {
    TrueModel truth;
    truth.sigma_eps = 5.0;
    const auto samples = simulate_mixed_responses(truth, 3, 20, 77);
    const MixedModel m = fit_mixed(samples);

    const auto report = residual_diagnostics(m, samples);
    REQUIRE(report.size() == samples.size());
    std::size_t flagged = 0;
    for (const auto& e : report) flagged += e.flagged ? 1 : 0;
    REQUIRE(flagged <= samples.size() / 10);

    // plant a gross outlier: it must be flagged, with the standardized value
    // scaled by sigma_eps * sqrt(zmean_f)
    auto spiked = samples;
    spiked[7].volume_ha += 60.0 * truth.sigma_eps;
    const auto spiked_report = residual_diagnostics(m, spiked);
    REQUIRE(spiked_report[7].flagged);
    const double fitted = samples[7].volume_ha - report[7].residual;
    REQUIRE(spiked_report[7].standardized ==
            Catch::Approx((spiked[7].volume_ha - fitted) /
                          (m.sigma_eps * std::sqrt(*spiked[7].metrics.get("zmean_f")))));

    // tighter threshold flags at least as many
    const auto strict = residual_diagnostics(m, samples, 0.5);
    std::size_t strict_flagged = 0;
    for (const auto& e : strict) strict_flagged += e.flagged ? 1 : 0;
    REQUIRE(strict_flagged >= flagged);
}

TEST_CASE("model JSON round trips preserve both families") {
    const auto dir = std::filesystem::temp_directory_path() /
                     ("canopy_model_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);

    Rng rng(13);
    const auto loglog_samples = loglinear_samples(30, {0.5, 1.1, 0.4}, {"m1", "m2"}, rng, 0.1);
    const LogLogModel lm = fit_loglog(loglog_samples, {"m1", "m2"});
    const std::string lpath = (dir / "loglog.json").string();
    write_model_json(loglog_to_json(lm), lpath);
    const LogLogModel lback = loglog_from_json(read_model_json(lpath));
    REQUIRE(lback.predictors == lm.predictors);
    REQUIRE(lback.beta == lm.beta);
    REQUIRE(lback.sigma2 == lm.sigma2);
    REQUIRE(lback.aic == lm.aic);
    REQUIRE(lback.n_obs == lm.n_obs);

    TrueModel truth;
    truth.sigma_b = 8.0;
    const MixedModel mm = fit_mixed(simulate_mixed_responses(truth, 4, 10, 3));
    const std::string mpath = (dir / "mixed.json").string();
    write_model_json(mixed_to_json(mm), mpath);
    const MixedModel mback = mixed_from_json(read_model_json(mpath));
    REQUIRE((mback.beta.array() == mm.beta.array()).all());
    REQUIRE((mback.se_beta.array() == mm.se_beta.array()).all());
    REQUIRE(mback.blups == mm.blups);
    REQUIRE(mback.group_sizes == mm.group_sizes);
    REQUIRE(mback.theta == mm.theta);
    REQUIRE(mback.sigma_b == mm.sigma_b);
    REQUIRE(mback.sigma_eps == mm.sigma_eps);
    REQUIRE(mback.reml_loglik == mm.reml_loglik);
    REQUIRE(mback.boundary == mm.boundary);
    REQUIRE(mback.n_obs == mm.n_obs);
    REQUIRE(mback.n_groups == mm.n_groups);

    // family tags are enforced both ways
    REQUIRE_THROWS_AS(mixed_from_json(read_model_json(lpath)), validation_error);
    REQUIRE_THROWS_AS(loglog_from_json(read_model_json(mpath)), validation_error);
    REQUIRE_THROWS_AS(read_model_json((dir / "absent.json").string()), validation_error);

    std::filesystem::remove_all(dir);
}
