#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/QR>
#include <boost/math/tools/roots.hpp>

#include "channel.hpp"
#include "scale_mixture.hpp"

namespace mest {

struct Cluster {
    double weight = 1.0;
    double t0 = 0.0;  // mu_c^T beta_star
    ScaleMixture law = ScaleMixture::dirac(1.0);
};

struct ProblemSpec {
    double alpha = 1.0;
    double beta_star_sq = 1.0;
    std::vector<Cluster> clusters{Cluster{}};
    // gram[c][c'] = d mu_{c'}^T mu_c; empty means all zero
    std::vector<std::vector<double>> gram;
    NoiseModel noise = NoiseModel::gaussian(1.0);
    LossSpec loss = LossSpec::square(0.0);

    static ProblemSpec single(double alpha, ScaleMixture law, NoiseModel noise, LossSpec loss,
                              double beta_star_sq = 1.0) {
        ProblemSpec p;
        p.alpha = alpha;
        p.beta_star_sq = beta_star_sq;
        p.clusters = {Cluster{1.0, 0.0, std::move(law)}};
        p.noise = std::move(noise);
        p.loss = loss;
        return p;
    }

    std::size_t K() const { return clusters.size(); }
    double gram_at(std::size_t c, std::size_t cp) const { return gram.empty() ? 0.0 : gram[c][cp]; }
    bool centered() const {
        for (const auto& c : clusters)
            if (c.t0 != 0.0) return false;
        for (const auto& row : gram)
            for (double g : row)
                if (g != 0.0) return false;
        return true;
    }

    void validate() const {
        if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
        if (!(beta_star_sq > 0.0)) throw std::invalid_argument("beta_star_sq must be > 0");
        if (clusters.empty()) throw std::invalid_argument("at least one cluster is required");
        double total = 0.0;
        for (const auto& c : clusters) total += c.weight;
        if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("cluster weights must sum to 1");
        if (!gram.empty()) {
            if (gram.size() != K()) throw std::invalid_argument("gram must be K x K");
            for (const auto& row : gram)
                if (row.size() != K()) throw std::invalid_argument("gram must be K x K");
        }
    }
};

struct OrderParams {
    double m = 0.0;
    double q = 0.0;
    double v = 1.0;
    std::vector<double> t;  // per cluster, same length as clusters
};

struct HatParams {
    std::vector<double> m_hat, q_hat, t_hat;
    double v_hat = 0.0;

    double m_hat_total() const {
        double s = 0.0;
        for (double x : m_hat) s += x;
        return s;
    }
    double q_hat_total() const {
        double s = 0.0;
        for (double x : q_hat) s += x;
        return s;
    }
};

struct SolverDiagnostics {
    long iterations = 0;
    double residual = kInf;
    bool converged = false;
    double damping = 0.0;
    std::string note;
};

struct FixedPointSolution {
    OrderParams params;
    HatParams hats;
    double eps_est = 0.0;
    double eps_gen = 0.0;
    double eps_train = 0.0;
    double angle = 0.0;
    SolverDiagnostics diagnostics;
};

class FixedPointNotConverged : public NotConverged {
public:
    explicit FixedPointNotConverged(FixedPointSolution partial)
        : NotConverged("fixed-point iteration did not converge", partial.diagnostics.iterations,
                       partial.diagnostics.residual),
          partial(std::move(partial)) {}
    FixedPointSolution partial;
};

struct SolverConfig {
    double tol = 1e-9;
    long max_iters = 100000;
    double damping = 0.5;
    double min_damping = 0.01;
    int stall_window = 10;
    int anderson_depth = 5;  // 0 gives plain damped iteration
    std::optional<OrderParams> warm_start;
    quad::Tolerance quad;
    double lad_delta_floor = 1e-8;
};

/** \brief Moments of r ~ N(mu, var) restricted to |r| < c and its complement. */
struct TruncatedMoments {
    double p_in;    // P(|r| < c)
    double m1_in;   // E[r; |r| < c]
    double m2_in;   // E[r^2; |r| < c]
    double p_hi;    // P(r > c)
    double p_lo;    // P(r < -c)
    double abs_out; // E[|r|; |r| > c]
};

inline TruncatedMoments truncated_moments(double mu, double var, double c) {
    TruncatedMoments t{};
    if (!(var > 0.0)) {
        if (std::abs(mu) <= c) {
            t.p_in = 1.0;
            t.m1_in = mu;
            t.m2_in = mu * mu;
        } else {
            (mu > 0 ? t.p_hi : t.p_lo) = 1.0;
            t.abs_out = std::abs(mu);
        }
        return t;
    }
    const double s = std::sqrt(var);
    const double a = (-c - mu) / s;
    const double b = (c - mu) / s;
    auto upper = [](double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); };
    auto pdf = [](double x) {
        return std::isinf(x) ? 0.0 : std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    };
    t.p_lo = upper(-a);
    t.p_hi = upper(b);
    if (b - a <= 2.0) {
        // Narrow window: the erf differences cancel, integrate the moments directly.
        using boost::math::quadrature::gauss;
        // Nodes come in pairs +-r; the odd part g(r) - g(-r) = g(r) (1 - e^{-2 r mu / var}).
        double p0 = 0.0, p1 = 0.0, p2 = 0.0;
        const double norm = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        const auto& xg = gauss<double, 20>::abscissa();
        const auto& wg = gauss<double, 20>::weights();
        for (std::size_t i = 0; i < xg.size(); ++i) {
            const double r = c * xg[i];
            const double g = norm * std::exp(-0.5 * (r - mu) * (r - mu) / var);
            const double h = norm * std::exp(-0.5 * (r + mu) * (r + mu) / var);
            const double x = 2.0 * r * mu / var;
            const double even = g + h;
            const double odd = std::abs(x) < 1.0 ? -g * std::expm1(-x) : g - h;
            p0 += wg[i] * even;
            p1 += wg[i] * r * odd;
            p2 += wg[i] * r * r * even;
        }
        const double half = c / s;
        t.p_in = half * p0;
        t.m1_in = half * p1;
        t.m2_in = half * p2;
        t.abs_out = (mu * t.p_hi + s * pdf(b)) - (mu * t.p_lo - s * pdf(a));
        return t;
    }
    if (a > 0.0) t.p_in = upper(a) - upper(b);
    else if (b < 0.0) t.p_in = upper(-b) - upper(-a);
    else t.p_in = 1.0 - t.p_lo - t.p_hi;
    const double pa = pdf(a), pb = pdf(b);
    const double apa = std::isinf(a) ? 0.0 : a * pa;
    const double bpb = std::isinf(b) ? 0.0 : b * pb;
    const double ez = pa - pb;
    const double ez2 = t.p_in + apa - bpb;
    t.m1_in = mu * t.p_in + s * ez;
    t.m2_in = mu * mu * t.p_in + 2.0 * mu * s * ez + var * ez2;
    t.abs_out = (mu * t.p_hi + s * pb) - (mu * t.p_lo - s * pa);
    return t;
}

namespace detail {

inline void require_finite_noise(const ProblemSpec& spec) {
    if (!std::isfinite(spec.noise.second_moment())) throw InfiniteNoiseVariance();
}

inline HatParams empty_hats(std::size_t K) {
    HatParams h;
    h.m_hat.assign(K, 0.0);
    h.q_hat.assign(K, 0.0);
    h.t_hat.assign(K, 0.0);
    return h;
}

inline double t_of(const OrderParams& p, std::size_t c) { return p.t.empty() ? 0.0 : p.t[c]; }

template <std::size_t N, class F>
quad::Values<N> expect_joint(const ScaleMixture& cov, const ScaleMixture& noise, F&& f,
                             const quad::Tolerance& tol) {
    quad::Tolerance inner = tol;
    inner.rel = tol.rel * 0.1;
    return expect_n<N>(
        cov,
        [&](double s) { return expect_n<N>(noise, [&](double sh) { return f(s, sh); }, inner); },
        tol);
}

// Huber or LAD problems are solved as Huber(delta_eff) with ridge lambda_eff.
struct EffectiveLoss {
    double delta;
    double lambda;
    double scale;  // 1 for Huber, delta_floor for LAD
};

inline EffectiveLoss effective_loss(const LossSpec& loss, double floor) {
    if (loss.is_lad()) return {floor, loss.lambda * floor, floor};
    return {loss.delta, loss.lambda, 1.0};
}

}  // namespace detail

/** \brief Square-loss hat update. Depends on the noise only through E[sigma_hat^2]
 *  per component. */
inline HatParams channel_update_square(const ProblemSpec& spec, const OrderParams& p,
                                       const quad::Tolerance& tol = {}) {
    detail::require_finite_noise(spec);
    const std::size_t K = spec.K();
    HatParams h = detail::empty_hats(K);
    const double a = spec.alpha, b2 = spec.beta_star_sq;
    const double theta_bar = spec.noise.mean_theta();
    for (std::size_t c = 0; c < K; ++c) {
        const auto& cl = spec.clusters[c];
        const double v = p.v;
        // E[s^2/A^2], E[s^4/A^2], E[s^2/A], E[1/A] with A = 1 + v s^2
        const auto e = expect_n<4>(
            cl.law,
            [v](double s) {
                const double s2 = s * s, A = 1.0 + v * s2;
                return quad::Values<4>{s2 / (A * A), s2 * s2 / (A * A), s2 / A, 1.0 / A};
            },
            tol);
        const double tc = detail::t_of(p, c);
        double qh = 0.0;
        for (const auto& comp : spec.noise.components) {
            if (comp.weight == 0.0) continue;
            const double th = comp.theta;
            const double r0 = th * cl.t0 - tc;
            const double ej = th * th * b2 - 2.0 * th * p.m + p.q;
            qh += comp.weight * ((moment(comp.scale, 2) + r0 * r0) * e[0] + ej * e[1]);
        }
        h.q_hat[c] = a * cl.weight * qh;
        h.v_hat += a * cl.weight * e[2];
        h.m_hat[c] = a * cl.weight * theta_bar * e[2];
        h.t_hat[c] = a * cl.weight * (theta_bar * cl.t0 - tc) * e[3];
    }
    return h;
}

/** \brief Huber(delta) hat update from closed-form truncated Gaussian moments of the
 *  residual, conditional on (sigma, sigma_hat). */
inline HatParams channel_update_huber(const ProblemSpec& spec, const OrderParams& p, double delta,
                                      const quad::Tolerance& tol = {}) {
    const std::size_t K = spec.K();
    HatParams h = detail::empty_hats(K);
    const double a = spec.alpha, b2 = spec.beta_star_sq, v = p.v;
    for (std::size_t c = 0; c < K; ++c) {
        const auto& cl = spec.clusters[c];
        const double tc = detail::t_of(p, c);
        for (const auto& comp : spec.noise.components) {
            if (comp.weight == 0.0) continue;
            const double th = comp.theta;
            const double r0 = th * cl.t0 - tc;
            const double ej = std::max(th * th * b2 - 2.0 * th * p.m + p.q, 0.0);
            const auto e = detail::expect_joint<3>(
                cl.law, comp.scale,
                [&](double s, double sh) {
                    const double s2 = s * s, A = 1.0 + v * s2;
                    const double psi = sh * sh + s2 * ej;
                    const auto tm = truncated_moments(r0, psi, delta * A);
                    const double sat = std::isinf(delta) ? 0.0 : delta * delta * (tm.p_lo + tm.p_hi);
                    const double tail = std::isinf(delta) ? 0.0 : delta * (tm.p_hi - tm.p_lo);
                    return quad::Values<3>{s2 * (tm.m2_in / (A * A) + sat), s2 * tm.p_in / A,
                                           tm.m1_in / A + tail};
                },
                tol);
            const double w = a * cl.weight * comp.weight;
            h.q_hat[c] += w * e[0];
            h.v_hat += w * e[1];
            h.m_hat[c] += w * th * e[1];
            h.t_hat[c] += w * e[2];
        }
    }
    return h;
}

/** \brief Closed-form ridge prior update. */
inline OrderParams prior_update(const ProblemSpec& spec, const HatParams& h, double lambda) {
    const double L = lambda + h.v_hat;
    if (!(L > 0.0)) throw DegenerateDenominator("lambda + v_hat must be > 0");
    const std::size_t K = spec.K();
    const double M = h.m_hat_total();
    const double b2 = spec.beta_star_sq;
    double tt0 = 0.0, tgt = 0.0;
    for (std::size_t c = 0; c < K; ++c) {
        tt0 += h.t_hat[c] * spec.clusters[c].t0;
        for (std::size_t cp = 0; cp < K; ++cp) tgt += h.t_hat[c] * h.t_hat[cp] * spec.gram_at(c, cp);
    }
    OrderParams p;
    p.v = 1.0 / L;
    p.m = (b2 * M + tt0) / L;
    p.q = (b2 * M * M + 2.0 * M * tt0 + tgt + h.q_hat_total()) / (L * L);
    if (!spec.centered()) {
        p.t.assign(K, 0.0);
        for (std::size_t c = 0; c < K; ++c) {
            double acc = M * spec.clusters[c].t0;
            for (std::size_t cp = 0; cp < K; ++cp) acc += h.t_hat[cp] * spec.gram_at(cp, c);
            p.t[c] = acc / L;
        }
    }
    return p;
}

inline OrderParams prior_update(const ProblemSpec& spec, const HatParams& h) {
    return prior_update(spec, h, detail::effective_loss(spec.loss, 1e-8).lambda);
}

/** \brief Hat update for the loss configured in spec (LAD uses the given delta floor). */
inline HatParams channel_update(const ProblemSpec& spec, const OrderParams& p,
                                const quad::Tolerance& tol = {}, double lad_floor = 1e-8) {
    if (spec.loss.is_square()) return channel_update_square(spec, p, tol);
    return channel_update_huber(spec, p, detail::effective_loss(spec.loss, lad_floor).delta, tol);
}

/** \brief Test error E[(y - beta_hat^T x)^2]; +inf when a needed moment diverges. */
inline double generalisation_error(const ProblemSpec& spec, const OrderParams& p) {
    double total = 0.0;
    for (std::size_t c = 0; c < spec.K(); ++c) {
        const auto& cl = spec.clusters[c];
        const double s2 = moment(cl.law, 2);
        for (const auto& comp : spec.noise.components) {
            if (comp.weight == 0.0) continue;
            const double th = comp.theta;
            const double r0 = th * cl.t0 - detail::t_of(p, c);
            const double ej = std::max(th * th * spec.beta_star_sq - 2.0 * th * p.m + p.q, 0.0);
            const double cov_part = ej == 0.0 ? 0.0 : s2 * ej;
            total += cl.weight * comp.weight * (r0 * r0 + cov_part + moment(comp.scale, 2));
        }
    }
    return total;
}

/** \brief Average training loss (1/n) sum rho(y_i - beta_hat^T x_i) at a fixed point. */
inline double training_loss(const ProblemSpec& spec, const OrderParams& p,
                            const quad::Tolerance& tol = {}, double lad_floor = 1e-8) {
    const double b2 = spec.beta_star_sq, v = p.v;
    double total = 0.0;
    if (spec.loss.is_square()) {
        detail::require_finite_noise(spec);
        for (std::size_t c = 0; c < spec.K(); ++c) {
            const auto& cl = spec.clusters[c];
            const auto e = expect_n<2>(
                cl.law,
                [v](double s) {
                    const double s2 = s * s, A = 1.0 + v * s2;
                    return quad::Values<2>{1.0 / (A * A), s2 / (A * A)};
                },
                tol);
            for (const auto& comp : spec.noise.components) {
                if (comp.weight == 0.0) continue;
                const double th = comp.theta;
                const double r0 = th * cl.t0 - detail::t_of(p, c);
                const double ej = th * th * b2 - 2.0 * th * p.m + p.q;
                total += 0.5 * cl.weight * comp.weight *
                         ((moment(comp.scale, 2) + r0 * r0) * e[0] + ej * e[1]);
            }
        }
        return total;
    }
    const auto eff = detail::effective_loss(spec.loss, lad_floor);
    const double delta = eff.delta;
    for (std::size_t c = 0; c < spec.K(); ++c) {
        const auto& cl = spec.clusters[c];
        for (const auto& comp : spec.noise.components) {
            if (comp.weight == 0.0) continue;
            const double th = comp.theta;
            const double r0 = th * cl.t0 - detail::t_of(p, c);
            const double ej = std::max(th * th * b2 - 2.0 * th * p.m + p.q, 0.0);
            const auto e = detail::expect_joint<1>(
                cl.law, comp.scale,
                [&](double s, double sh) {
                    const double s2 = s * s, A = 1.0 + v * s2, Vs = v * s2;
                    const auto tm = truncated_moments(r0, s2 * ej + sh * sh, delta * A);
                    double val = 0.5 * tm.m2_in / (A * A);
                    if (!std::isinf(delta))
                        val += delta * (tm.abs_out - (Vs * delta + 0.5 * delta) * (tm.p_lo + tm.p_hi));
                    return quad::Values<1>{val};
                },
                tol);
            total += cl.weight * comp.weight * e[0];
        }
    }
    return total / eff.scale;
}

inline double normalised_angle(double m, double q, double beta_star_sq) {
    if (!(q > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    const double c = std::clamp(m / std::sqrt(beta_star_sq * q), -1.0, 1.0);
    return std::acos(c) / std::numbers::pi;
}

namespace detail {

inline std::vector<double> pack(const OrderParams& p) {
    std::vector<double> x{p.m, p.q, p.v};
    x.insert(x.end(), p.t.begin(), p.t.end());
    return x;
}

inline OrderParams unpack(const std::vector<double>& x) {
    OrderParams p;
    p.m = x[0];
    p.q = x[1];
    p.v = x[2];
    p.t.assign(x.begin() + 3, x.end());
    return p;
}

inline double relative_change(const std::vector<double>& a, const std::vector<double>& b) {
    double r = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        r = std::max(r, std::abs(b[i] - a[i]) / (std::abs(a[i]) + 1e-12));
    return r;
}

inline void fill_errors(const ProblemSpec& spec, FixedPointSolution& s, const SolverConfig& cfg) {
    const auto& p = s.params;
    s.eps_est = spec.beta_star_sq - 2.0 * p.m + p.q;
    s.eps_gen = generalisation_error(spec, p);
    s.eps_train = training_loss(spec, p, cfg.quad, cfg.lad_delta_floor);
    s.angle = normalised_angle(p.m, p.q, spec.beta_star_sq);
}

}  // namespace detail

/** \brief Damped fixed-point iteration of the channel and prior updates. */
inline FixedPointSolution solve(const ProblemSpec& spec, const SolverConfig& cfg = {}) {
    spec.validate();
    if (spec.loss.is_square()) detail::require_finite_noise(spec);
    const auto eff = detail::effective_loss(spec.loss, cfg.lad_delta_floor);

    OrderParams init;
    if (cfg.warm_start) {
        init = *cfg.warm_start;
        if (spec.loss.is_lad()) init.v /= eff.scale;
    } else {
        init.m = 0.1 * spec.beta_star_sq;
        init.q = spec.beta_star_sq;
        init.v = spec.loss.is_lad() ? 1.0 / eff.scale : 1.0;
    }
    if (spec.centered()) init.t.clear();
    else if (init.t.size() != spec.K()) init.t.assign(spec.K(), 0.0);

    std::vector<double> x = detail::pack(init);
    const std::size_t n = x.size();
    double gamma = cfg.damping;
    bool accelerate = cfg.anderson_depth > 0;
    double best = kInf;
    std::vector<double> best_x = x;
    int stall = 0;
    int polish = 0;
    // Anderson history: iterates and residuals T(x) - x
    std::deque<Eigen::VectorXd> hx, hg;
    auto fall_back = [&] {
        // Acceleration stalled or left the domain: resume plain damped steps from the best iterate.
        accelerate = false;
        hx.clear();
        hg.clear();
        x = best_x;
    };
    FixedPointSolution sol;
    long it = 0;
    for (; it < cfg.max_iters; ++it) {
        const OrderParams cur = detail::unpack(x);
        std::vector<double> y;
        HatParams hats;
        double res = kInf;
        try {
            hats = channel_update(spec, cur, cfg.quad, cfg.lad_delta_floor);
            y = detail::pack(prior_update(spec, hats, eff.lambda));
            res = detail::relative_change(x, y);
        } catch (const Error&) {
            if (!accelerate || best_x == x) throw;
        }
        if (!std::isfinite(res)) {
            if (accelerate && best_x != x) {
                fall_back();
                continue;
            }
            sol.diagnostics.note = "non-finite update";
            break;
        }
        if (sol.diagnostics.converged) {
            // Polishing past tol for a few steps, keeping the best iterate.
            if (res < sol.diagnostics.residual) {
                sol.params = cur;
                sol.hats = std::move(hats);
                sol.diagnostics.residual = res;
            }
            if (--polish <= 0 || sol.diagnostics.residual < 1e-3 * cfg.tol) break;
        } else {
            sol.params = cur;
            sol.hats = std::move(hats);
            sol.diagnostics.residual = res;
            if (res < cfg.tol) {
                sol.diagnostics.converged = true;
                polish = 10;
            }
        }
        if (res < best) {
            best = res;
            best_x = x;
            stall = 0;
        } else if (++stall >= cfg.stall_window) {
            stall = 0;
            if (accelerate) {
                fall_back();
                continue;
            }
            gamma = std::max(0.5 * gamma, cfg.min_damping);
            best = res;
        }
        Eigen::VectorXd xv(n), gv(n), w(n);
        for (std::size_t i = 0; i < n; ++i) {
            xv[i] = x[i];
            gv[i] = y[i] - x[i];
            w[i] = 1.0 / (std::abs(x[i]) + 1e-12);
        }
        Eigen::VectorXd step = xv + gamma * gv;
        if (accelerate && !hx.empty()) {
            const int mk = static_cast<int>(hx.size());
            Eigen::MatrixXd dX(n, mk), dG(n, mk);
            for (int j = 0; j < mk; ++j) {
                dX.col(j) = (j + 1 < mk ? hx[j + 1] : xv) - hx[j];
                dG.col(j) = (j + 1 < mk ? hg[j + 1] : gv) - hg[j];
            }
            const Eigen::VectorXd coef =
                (w.asDiagonal() * dG).colPivHouseholderQr().solve(w.asDiagonal() * gv);
            const Eigen::VectorXd cand = step - (dX + gamma * dG) * coef;
            const bool ok = cand.allFinite() && cand[1] > 0.0 && cand[2] > 0.0 &&
                            cand[0] * cand[0] < spec.beta_star_sq * cand[1];
            if (ok) step = cand;
            else {
                hx.clear();
                hg.clear();
            }
        }
        if (accelerate) {
            hx.push_back(xv);
            hg.push_back(gv);
            if (static_cast<int>(hx.size()) > cfg.anderson_depth) {
                hx.pop_front();
                hg.pop_front();
            }
        }
        for (std::size_t i = 0; i < n; ++i) x[i] = step[i];
    }
    sol.diagnostics.iterations = std::min(it + 1, cfg.max_iters);
    sol.diagnostics.damping = gamma;
    if (sol.params.t.empty() && !spec.centered()) sol.params.t.assign(spec.K(), 0.0);
    detail::fill_errors(spec, sol, cfg);
    if (spec.loss.is_lad()) {
        // Report in LAD units: the Huber surrogate's objective is delta_floor times the LAD one.
        const double f = eff.scale;
        sol.params.v *= f;
        sol.hats.v_hat /= f;
        for (auto& x2 : sol.hats.m_hat) x2 /= f;
        for (auto& x2 : sol.hats.t_hat) x2 /= f;
        for (auto& x2 : sol.hats.q_hat) x2 /= f * f;
    }
    if (!sol.diagnostics.converged) throw FixedPointNotConverged(sol);
    return sol;
}

/** \brief Square loss, single centered cluster: solve 1 - lambda v = alpha Y(v) for v
 *  and evaluate the order parameters in closed form. */
inline FixedPointSolution stieltjes_form_solve(const ProblemSpec& spec) {
    spec.validate();
    if (!spec.loss.is_square()) throw std::invalid_argument("stieltjes_form_solve needs the square loss");
    if (spec.K() != 1 || !spec.centered())
        throw std::invalid_argument("stieltjes_form_solve needs a single centered cluster");
    if (!spec.noise.unit_theta()) throw std::invalid_argument("stieltjes_form_solve needs theta = 1");
    detail::require_finite_noise(spec);
    const auto& law = spec.clusters[0].law;
    const double a = spec.alpha, lam = spec.loss.lambda, b2 = spec.beta_star_sq;
    const double s0 = spec.noise.second_moment();

    auto g = [&](double logv) {
        const double v = std::exp(logv);
        return a * capital_Y(law, v) + lam * v - 1.0;
    };
    if (lam == 0.0 && a <= 1.0)
        throw RootNotBracketed("1 - lambda v = alpha Y(v) has no root (lambda = 0 needs alpha > 1)");
    double lo = -1.0, hi = 1.0;
    while (g(lo) > 0.0) {
        lo -= 4.0;
        if (lo < -700.0) throw RootNotBracketed("no lower bracket for 1 - lambda v = alpha Y(v)");
    }
    while (g(hi) < 0.0) {
        hi += 4.0;
        if (hi > 600.0) throw RootNotBracketed("no upper bracket for 1 - lambda v = alpha Y(v)");
    }
    boost::uintmax_t iters = 200;
    auto bracket = boost::math::tools::toms748_solve(
        g, lo, hi, [](double l, double h) { return std::abs(h - l) < 1e-15 * std::max(1.0, std::abs(l)); },
        iters);
    const double v = std::exp(0.5 * (bracket.first + bracket.second));
    const double Y = capital_Y(law, v);
    const double Yp = capital_Y_prime(law, v);
    const double eps = v * (s0 + (b2 * lam - s0) * lam / (a * Yp + lam));

    FixedPointSolution sol;
    sol.params.v = v;
    sol.params.m = b2 * a * Y / (lam + a * Y / v) / v;
    sol.params.q = eps - b2 + 2.0 * sol.params.m;
    sol.hats = detail::empty_hats(1);
    sol.hats.v_hat = a * Y / v;
    sol.hats.m_hat[0] = a * Y / v;
    sol.hats.q_hat[0] = a * s0 * Yp + a * (Y - v * Yp) * eps / (v * v);
    sol.eps_est = eps;
    sol.eps_gen = generalisation_error(spec, sol.params);
    sol.eps_train = 0.5 * s0 * (1.0 - Y - v * Yp) + 0.5 * eps * Yp;
    sol.angle = normalised_angle(sol.params.m, sol.params.q, b2);
    sol.diagnostics.converged = true;
    sol.diagnostics.iterations = static_cast<long>(iters);
    sol.diagnostics.residual = 0.0;
    return sol;
}

}  // namespace mest
