#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <memory>
#include <numbers>
#include <sstream>
#include <cmath>
#include <string>
#include <vector>

#include "channel.hpp"
#include "scale_mixture.hpp"

namespace mest {

struct BODiagnostics {
    long iterations = 0;
    double residual = kInf;
    bool converged = false;
    // max |q_i - q_j| over the initialisations that converged
    double disagreement = 0.0;
    std::string note;
};

struct BOSolution {
    double q = 0.0;
    double q_hat = 0.0;
    double eps_bo = 0.0;
    BODiagnostics diagnostics;
};

class BONotConverged : public NotConverged {
public:
    explicit BONotConverged(BOSolution partial)
        : NotConverged("Bayes-optimal iteration did not converge", partial.diagnostics.iterations,
                       partial.diagnostics.residual),
          partial(std::move(partial)) {}
    BOSolution partial;
};

struct BOConfig {
    double tol = 1e-9;
    long max_iters = 10000;
    double damping = 1.0;
    std::vector<double> inits{0.01, 0.5, 0.99};  // fractions of beta_star_sq
    quad::Tolerance quad;
    int hermite_nodes = 60;
};

namespace detail {

// A few scales at which a law puts its mass, used to place breakpoints.
inline void representative_scales(const ScaleMixture& mix, std::vector<double>& out) {
    std::visit(
        [&](const auto& c) {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, Dirac>) {
                out.push_back(c.sigma);
            } else if constexpr (std::is_same_v<T, InverseGamma>) {
                out.push_back(std::sqrt(c.b / c.a));
            } else if constexpr (std::is_same_v<T, Pareto>) {
                out.push_back(1.0);
            } else if constexpr (std::is_same_v<T, Contaminated>) {
                if (c.eps < 1.0) representative_scales(*c.base, out);
                if (c.eps > 0.0) representative_scales(*c.tail, out);
            } else {
                for (const auto& [s, w] : c.atoms)
                    if (w > 0.0) out.push_back(s);
            }
        },
        mix.variant());
}

}  // namespace detail

/** \brief Fisher information of the location family r -> p(r) where r = sqrt(V) g + sigma_hat g'
 *  mixes the noise components (all theta must be 1). */
inline double noise_fisher_information(const NoiseModel& noise, double V, const quad::Tolerance& tol = {}) {
    if (!(V >= 0.0)) throw std::invalid_argument("fisher information needs V >= 0");
    std::vector<double> scales;
    for (const auto& c : noise.components)
        if (c.weight > 0.0) detail::representative_scales(c.scale, scales);
    quad::Tolerance inner = tol;
    inner.rel = tol.rel * 0.1;
    // J = 2 int_0^inf p'(r)^2 / p(r) dr, integrated in w = log r.
    auto f = [&](double w) {
        const double r = std::exp(w);
        double A = 0.0, B = 0.0;
        for (const auto& c : noise.components) {
            if (c.weight == 0.0) continue;
            const auto e = expect_n<2>(
                c.scale,
                [&](double sh) {
                    const double s2 = V + sh * sh;
                    if (s2 <= 0.0) return quad::Values<2>{0.0, 0.0};
                    const double p = normal_pdf(r, s2);
                    return quad::Values<2>{p, p / s2};
                },
                inner);
            A += c.weight * e[0];
            B += c.weight * e[1];
        }
        if (A <= 0.0) return quad::Values<1>{0.0};
        return quad::Values<1>{2.0 * r * r * r * B * (B / A)};
    };
    std::vector<double> br;
    for (double s : scales) {
        const double t = std::sqrt(V + s * s);
        if (!(t > 0.0)) continue;
        for (double k : {-3.0, -1.0, 0.0, 1.0, 2.0, 4.0}) br.push_back(std::log(t) + k);
    }
    if (br.empty()) throw std::invalid_argument("fisher information of a degenerate noise law");
    std::sort(br.begin(), br.end());
    return quad::integrate_line<1>(f, br, -kInf, kInf, tol)[0];
}

/** \brief Lazily built piecewise Chebyshev interpolant of log J(V) in x = log V.
 *
 *  log J is analytic in a strip |Im x| < pi around the real axis (its singularities
 *  sit at V = -(sigma_hat)^2), so fixed-width panels converge geometrically. Panels
 *  whose trailing coefficients stay large are evaluated directly instead. */
class FisherTable {
public:
    explicit FisherTable(NoiseModel noise, quad::Tolerance tol = {}) : noise_(std::move(noise)), tol_(tol) {}

    double operator()(double V) {
        if (!(V > 0.0)) return noise_fisher_information(noise_, V, tol_);
        const double x = std::log(V);
        if (std::abs(x) > kRange) return noise_fisher_information(noise_, V, tol_);
        const long key = static_cast<long>(std::floor(x / kWidth));
        auto it = panels_.find(key);
        if (it == panels_.end()) it = panels_.emplace(key, build(key * kWidth)).first;
        const Panel& p = it->second;
        if (!p.ok) return noise_fisher_information(noise_, V, tol_);
        // Clenshaw on t in [-1, 1]
        const double t = 2.0 * (x - p.a) / kWidth - 1.0;
        double b1 = 0.0, b2 = 0.0;
        for (int k = kNodes - 1; k >= 1; --k) {
            const double b0 = 2.0 * t * b1 - b2 + p.c[k];
            b2 = b1;
            b1 = b0;
        }
        return std::exp(t * b1 - b2 + p.c[0]);
    }

    std::size_t panels() const { return panels_.size(); }

private:
    static constexpr int kNodes = 24;
    static constexpr double kWidth = 4.0;
    static constexpr double kRange = 80.0;

    struct Panel {
        double a = 0.0;
        std::array<double, kNodes> c{};
        bool ok = false;
    };

    Panel build(double a) const {
        Panel p;
        p.a = a;
        std::array<double, kNodes> f{};
        for (int j = 0; j < kNodes; ++j) {
            const double t = std::cos(std::numbers::pi * (j + 0.5) / kNodes);
            const double J = noise_fisher_information(noise_, std::exp(a + 0.5 * kWidth * (t + 1.0)), tol_);
            if (!(J > 0.0) || !std::isfinite(J)) return p;
            f[j] = std::log(J);
        }
        double scale = 0.0;
        for (int k = 0; k < kNodes; ++k) {
            double acc = 0.0;
            for (int j = 0; j < kNodes; ++j) acc += f[j] * std::cos(std::numbers::pi * k * (j + 0.5) / kNodes);
            p.c[k] = (k == 0 ? 1.0 : 2.0) * acc / kNodes;
            scale = std::max(scale, std::abs(p.c[k]));
        }
        double tail = 0.0;
        for (int k = kNodes - 4; k < kNodes; ++k) tail = std::max(tail, std::abs(p.c[k]));
        // log J carries the quadrature's relative noise; trailing terms at that level are converged.
        p.ok = tail <= std::max(10.0 * tol_.rel, 1e-13 * scale);
        return p;
    }

    NoiseModel noise_;
    quad::Tolerance tol_;
    std::map<long, Panel> panels_;
};

/** \brief int (d_mu Z0)^2 / Z0 dy at fixed (mu, V). */
inline double bo_y_integral(const NoiseModel& noise, double mu, double V, const quad::Tolerance& tol = {}) {
    std::vector<double> br;
    for (const auto& c : noise.components) {
        if (c.weight == 0.0) continue;
        std::vector<double> sc;
        detail::representative_scales(c.scale, sc);
        for (double s : sc) {
            const double w = std::sqrt(c.theta * c.theta * V + s * s);
            if (!(w > 0.0)) continue;
            for (double k : {-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0}) br.push_back(c.theta * mu + k * w);
        }
    }
    std::sort(br.begin(), br.end());
    auto f = [&](double y) {
        const auto z = z0(noise, y, mu, V);
        if (z.z <= 0.0) return quad::Values<1>{0.0};
        return quad::Values<1>{z.dz_dmu * (z.dz_dmu / z.z)};
    };
    return quad::integrate_line<1>(f, br, -kInf, kInf, tol, 1e300)[0];
}

/** \brief Generic qhat(q): Gauss-Hermite over zeta, adaptive over y, any theta. */
inline double bo_channel_generic(double alpha, double beta_star_sq, const ScaleMixture& law,
                                 const NoiseModel& noise, double q, const BOConfig& cfg = {}) {
    if (!(q >= 0.0 && q < beta_star_sq)) throw std::invalid_argument("bo_channel needs 0 <= q < beta_star_sq");
    if (alpha == 0.0) return 0.0;
    const double gap = beta_star_sq - q;
    const auto& gh = quad::gauss_hermite(cfg.hermite_nodes);
    return alpha * expect(
                       law,
                       [&](double s) {
                           if (s == 0.0) return 0.0;
                           double acc = 0.0;
                           for (std::size_t i = 0; i < gh.nodes.size(); ++i)
                               acc += gh.weights[i] *
                                      bo_y_integral(noise, s * std::sqrt(q) * gh.nodes[i], s * s * gap, cfg.quad);
                           return s * s * acc;
                       },
                       cfg.quad);
}

/** \brief Bayes-optimal conjugate update qhat(q). With theta = 1 throughout, Z0 is a
 *  location family and the (zeta, y) integral is the noise Fisher information. */
inline double bo_channel(double alpha, double beta_star_sq, const ScaleMixture& law, const NoiseModel& noise,
                         double q, const BOConfig& cfg = {}) {
    if (!(q >= 0.0 && q < beta_star_sq)) throw std::invalid_argument("bo_channel needs 0 <= q < beta_star_sq");
    if (alpha == 0.0) return 0.0;
    if (!noise.unit_theta()) return bo_channel_generic(alpha, beta_star_sq, law, noise, q, cfg);
    const double gap = beta_star_sq - q;
    return alpha * expect(
                       law,
                       [&](double s) {
                           if (s == 0.0) return 0.0;
                           return s * s * noise_fisher_information(noise, s * s * gap, cfg.quad);
                       },
                       cfg.quad);
}

/** \brief Per-thread FisherTable shared by every solve with the same noise and tolerance. */
inline FisherTable& cached_fisher_table(const NoiseModel& noise, const quad::Tolerance& tol) {
    thread_local std::map<std::string, std::unique_ptr<FisherTable>> cache;
    std::ostringstream key;
    key.precision(17);
    key << tol.rel << ' ' << tol.abs << ' ' << tol.max_intervals << ' ' << tol.tail;
    for (const auto& c : noise.components) key << '|' << c.weight << ' ' << c.theta << ' ' << c.scale.describe();
    auto& slot = cache[key.str()];
    if (!slot) slot = std::make_unique<FisherTable>(noise, tol);
    return *slot;
}

/** \brief bo_channel for theta = 1 with J read from a FisherTable. */
inline double bo_channel(double alpha, double beta_star_sq, const ScaleMixture& law, FisherTable& table, double q,
                         const BOConfig& cfg = {}) {
    if (!(q >= 0.0 && q < beta_star_sq)) throw std::invalid_argument("bo_channel needs 0 <= q < beta_star_sq");
    if (alpha == 0.0) return 0.0;
    const double gap = beta_star_sq - q;
    return alpha * expect(
                       law,
                       [&](double s) {
                           if (s == 0.0) return 0.0;
                           return s * s * table(s * s * gap);
                       },
                       cfg.quad);
}

namespace detail {

inline bool point_mass_law(const ScaleMixture& law) {
    return std::holds_alternative<Dirac>(law.variant()) || std::holds_alternative<Discrete>(law.variant());
}

struct BORun {
    double q, q_hat;
    long iterations;
    double residual;
    bool converged;
};

// Damped iteration of q -> beta^4 qhat(q) / (1 + beta^2 qhat(q)) with a Steffensen
// extrapolation every third step.
inline BORun bo_iterate(double alpha, double b2, const ScaleMixture& law, const NoiseModel& noise, double q0,
                        const BOConfig& cfg, FisherTable* table) {
    auto T = [&](double q, double& qh) {
        qh = table ? bo_channel(alpha, b2, law, *table, q, cfg) : bo_channel(alpha, b2, law, noise, q, cfg);
        return b2 * b2 * qh / (1.0 + b2 * qh);
    };
    BORun run{q0, 0.0, 0, kInf, false};
    double q = q0;
    std::vector<double> seq;
    int polish = 0;
    for (long it = 0; it < cfg.max_iters; ++it) {
        double qh;
        const double tq = T(q, qh);
        const double res = std::abs(tq - q) / b2;
        run.iterations = it + 1;
        if (!run.converged || res < run.residual) {
            run.q = tq;
            run.q_hat = qh;
            run.residual = res;
        }
        if (run.converged) {
            if (--polish <= 0 || run.residual < 1e-3 * cfg.tol) break;
        } else if (res < cfg.tol) {
            run.converged = true;
            polish = 5;
        }
        double next = q + cfg.damping * (tq - q);
        seq.push_back(q);
        if (seq.size() == 3) {
            const double d1 = seq[1] - seq[0], d2 = seq[2] - seq[1];
            const double den = d2 - d1;
            if (den != 0.0 && d1 * d2 > 0.0) {
                const double ext = seq[2] - d2 * d2 / den;
                if (std::isfinite(ext) && ext >= 0.0 && ext < b2) next = ext;
            }
            seq.clear();
        }
        q = std::clamp(next, 0.0, std::nextafter(b2, 0.0));
    }
    return run;
}

}  // namespace detail

/** \brief Solve the Bayes-optimal (q, qhat) pair for one centered cluster. Runs every
 *  initialisation, returns the run started from the smallest q0 and reports the spread. */
inline BOSolution solve_bo(double alpha, double beta_star_sq, const ScaleMixture& law, const NoiseModel& noise,
                           const BOConfig& cfg = {}) {
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
    if (!(beta_star_sq > 0.0)) throw std::invalid_argument("beta_star_sq must be > 0");
    if (cfg.inits.empty()) throw std::invalid_argument("solve_bo needs an initialisation");
    std::vector<double> inits = cfg.inits;
    std::sort(inits.begin(), inits.end());
    // Continuous covariate laws evaluate J at many V per step; tabulate it once.
    FisherTable* table = nullptr;
    if (noise.unit_theta() && !detail::point_mass_law(law)) table = &cached_fisher_table(noise, cfg.quad);
    BOSolution sol;
    double lo = kInf, hi = -kInf;
    bool first = true;
    for (double frac : inits) {
        const auto run =
            detail::bo_iterate(alpha, beta_star_sq, law, noise, frac * beta_star_sq, cfg, table);
        if (first) {
            sol.q = run.q;
            sol.q_hat = run.q_hat;
            sol.diagnostics.iterations = run.iterations;
            sol.diagnostics.residual = run.residual;
            sol.diagnostics.converged = run.converged;
            first = false;
        }
        if (run.converged) {
            lo = std::min(lo, run.q);
            hi = std::max(hi, run.q);
        }
    }
    sol.diagnostics.disagreement = hi >= lo ? hi - lo : 0.0;
    if (sol.diagnostics.disagreement > 1e-6 * beta_star_sq)
        sol.diagnostics.note = "initialisations reached different fixed points";
    // Re-impose the prior identity exactly on the returned pair.
    sol.q = beta_star_sq * beta_star_sq * sol.q_hat / (1.0 + beta_star_sq * sol.q_hat);
    sol.eps_bo = beta_star_sq - sol.q;
    if (!sol.diagnostics.converged) throw BONotConverged(sol);
    return sol;
}

struct BOGenBaseline {
    double eps_est = 0.0;
    double eps_gen = 0.0;
    bool finite = true;  // false when E[sigma^2] or E[sigma_hat^2] is infinite
    BOSolution bo;
};

/** \brief Rescaled posterior-mean baseline: estimation error and generalisation error. */
inline BOGenBaseline bo_gen_baseline(const BOSolution& bo, double beta_star_sq, const ScaleMixture& law,
                                     const NoiseModel& noise) {
    BOGenBaseline out;
    out.bo = bo;
    const double th = noise.mean_theta(), th2 = noise.mean_theta_sq();
    out.eps_est = beta_star_sq - 2.0 * th * bo.q + th * th * bo.q;
    const double s0 = moment(law, 2), sh0 = noise.second_moment();
    out.finite = std::isfinite(s0) && std::isfinite(sh0);
    out.eps_gen = out.finite ? s0 * (beta_star_sq * th2 - th * th * bo.q) + sh0 : kInf;
    return out;
}

inline BOGenBaseline bo_gen_baseline(double alpha, double beta_star_sq, const ScaleMixture& law,
                                     const NoiseModel& noise, const BOConfig& cfg = {}) {
    return bo_gen_baseline(solve_bo(alpha, beta_star_sq, law, noise, cfg), beta_star_sq, law, noise);
}

}  // namespace mest
