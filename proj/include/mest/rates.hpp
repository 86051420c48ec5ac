#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/QR>

#include "channel.hpp"
#include "scale_mixture.hpp"

namespace mest {

struct RatePrediction {
    TailClass tail{kInf, Regime::finite_variance};
    double exponent = -1.0;        // log-log slope of eps_est against alpha
    bool log_correction = false;   // eps ~ c / (alpha ln alpha) in the marginal case
    double coefficient = kInf;     // leading constant, see coefficient_available
    bool coefficient_available = false;
    double limit = 0.0;            // sigma_0^2 or sigma_tilde_0^2
};

/** \brief Large-alpha decay of the ridgeless square-loss estimation error. */
inline RatePrediction predict_rate(const ScaleMixture& mix, double noise_second_moment) {
    if (!std::isfinite(noise_second_moment)) throw InfiniteNoiseVariance();
    RatePrediction r;
    r.tail = tail_class(mix);
    switch (r.tail.regime) {
        case Regime::finite_variance: r.exponent = -1.0; break;
        case Regime::marginal:
            r.exponent = -1.0;
            r.log_correction = true;
            break;
        default: r.exponent = -1.0 / r.tail.exponent;
    }
    try {
        r.limit = limit_sigma_tilde(mix, r.tail).value;
        const double p = r.tail.regime == Regime::infinite_variance ? 1.0 / r.tail.exponent : 1.0;
        r.coefficient = noise_second_moment / std::pow(r.limit, p);
        r.coefficient_available = std::isfinite(r.coefficient) && r.limit > 0.0;
    } catch (const NonConvergedLimit&) {
        r.coefficient_available = false;
    }
    return r;
}

inline RatePrediction predict_rate(const ScaleMixture& mix, const NoiseModel& noise) {
    return predict_rate(mix, noise.second_moment());
}

struct RateFit {
    double slope = 0.0;
    double intercept = 0.0;
    double loglog = 0.0;   // coefficient of ln ln alpha when requested
    double residual = 0.0; // rms of the log residuals
    std::size_t points = 0;
};

namespace detail {

inline std::vector<std::pair<double, double>> in_window(const std::vector<std::pair<double, double>>& sweep,
                                                        double lo, double hi) {
    for (std::size_t i = 1; i < sweep.size(); ++i)
        if (!(sweep[i].first > sweep[i - 1].first))
            throw std::invalid_argument("alpha values must be strictly increasing");
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : sweep)
        if (p.first >= lo && p.first <= hi) {
            if (!(p.first > 0.0 && p.second > 0.0)) throw std::invalid_argument("rate fit needs positive values");
            pts.push_back(p);
        }
    if (pts.size() < 5) throw InsufficientPoints("rate fit needs at least 5 points in the window");
    return pts;
}

// Least squares of y on the columns of X (first column is the intercept).
inline Eigen::VectorXd lsq(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double& rms) {
    Eigen::VectorXd beta = X.colPivHouseholderQr().solve(y);
    rms = std::sqrt((X * beta - y).squaredNorm() / static_cast<double>(y.size()));
    return beta;
}

}  // namespace detail

/** \brief ln eps = intercept + slope ln alpha (+ loglog ln ln alpha) on the points with
 *  alpha in [lo, hi]. */
inline RateFit fit_rate(const std::vector<std::pair<double, double>>& sweep, double lo = 0.0, double hi = kInf,
                        bool loglog_regressor = false) {
    const auto pts = detail::in_window(sweep, lo, hi);
    const int n = static_cast<int>(pts.size());
    const int cols = loglog_regressor ? 3 : 2;
    Eigen::MatrixXd X(n, cols);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        const double la = std::log(pts[i].first);
        X(i, 0) = 1.0;
        X(i, 1) = la;
        if (loglog_regressor) {
            if (!(pts[i].first > 1.0)) throw std::invalid_argument("ln ln alpha needs alpha > 1");
            X(i, 2) = std::log(la);
        }
        y[i] = std::log(pts[i].second);
    }
    RateFit f;
    const auto beta = detail::lsq(X, y, f.residual);
    f.intercept = beta[0];
    f.slope = beta[1];
    if (loglog_regressor) f.loglog = beta[2];
    f.points = pts.size();
    return f;
}

/** \brief Marginal-case check: slope of ln(alpha eps) against ln ln alpha, which tends
 *  to -1 when eps ~ c / (alpha ln alpha). */
inline RateFit fit_marginal_rate(const std::vector<std::pair<double, double>>& sweep, double lo = 0.0,
                                 double hi = kInf) {
    const auto pts = detail::in_window(sweep, lo, hi);
    const int n = static_cast<int>(pts.size());
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        if (!(pts[i].first > 1.0)) throw std::invalid_argument("ln ln alpha needs alpha > 1");
        X(i, 0) = 1.0;
        X(i, 1) = std::log(std::log(pts[i].first));
        y[i] = std::log(pts[i].first * pts[i].second);
    }
    RateFit f;
    const auto beta = detail::lsq(X, y, f.residual);
    f.intercept = beta[0];
    f.slope = beta[1];
    f.points = pts.size();
    return f;
}

struct TailFit {
    double two_a = 0.0;     // minus the log-log slope of the empirical cCDF
    double intercept = 0.0;
    double residual = 0.0;
    std::size_t points = 0;
};

/** \brief Log-log least squares of the empirical P[|z| >= t] over the norms in [lo, hi]. */
inline TailFit tail_index_from_norms(std::vector<double> norms, double lo, double hi) {
    if (!(lo > 0.0 && hi > lo)) throw std::invalid_argument("tail fit window must satisfy 0 < lo < hi");
    for (double z : norms)
        if (!(z > 0.0)) throw std::invalid_argument("norms must be positive");
    std::sort(norms.begin(), norms.end());
    const double n = static_cast<double>(norms.size());
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < norms.size(); ++i) {
        if (i > 0 && norms[i] == norms[i - 1]) continue;
        if (norms[i] < lo || norms[i] > hi) continue;
        xs.push_back(std::log(norms[i]));
        ys.push_back(std::log((n - static_cast<double>(i)) / n));
    }
    if (xs.size() < 100) throw InsufficientPoints("tail fit needs at least 100 samples in the window");
    const int m = static_cast<int>(xs.size());
    Eigen::MatrixXd X(m, 2);
    Eigen::VectorXd y(m);
    for (int i = 0; i < m; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = xs[i];
        y[i] = ys[i];
    }
    TailFit t;
    const auto beta = detail::lsq(X, y, t.residual);
    t.intercept = beta[0];
    t.two_a = -beta[1];
    t.points = xs.size();
    return t;
}

}  // namespace mest
