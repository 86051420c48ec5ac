#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "quadrature.hpp"

namespace mest {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

class ScaleMixture;

struct Dirac {
    double sigma;
};

/** sigma^2 ~ InvGamma(a, b): density of sigma is 2 b^a e^{-b/sigma^2} / (Gamma(a) sigma^{2a+1}). */
struct InverseGamma {
    double a;
    double b;
};

/** Density 2a sigma^{-2a-1} on sigma > 1. */
struct Pareto {
    double a;
};

struct Contaminated {
    double eps;
    std::shared_ptr<const ScaleMixture> base;
    std::shared_ptr<const ScaleMixture> tail;
};

struct Discrete {
    // (sigma_k, w_k) pairs
    std::vector<std::pair<double, double>> atoms;
};

/** \brief Law of a positive scale variable sigma. Immutable once built. */
class ScaleMixture {
public:
    using Variant = std::variant<Dirac, InverseGamma, Pareto, Contaminated, Discrete>;

    static ScaleMixture dirac(double sigma) {
        if (!(sigma >= 0.0) || !std::isfinite(sigma))
            throw std::invalid_argument("Dirac scale must be finite and >= 0");
        return ScaleMixture(Dirac{sigma});
    }
    static ScaleMixture inverse_gamma(double a, double b) {
        if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b))
            throw std::invalid_argument("inverse-gamma needs a > 0 and b > 0");
        return ScaleMixture(InverseGamma{a, b});
    }
    static ScaleMixture pareto(double a) {
        if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("Pareto needs a > 0");
        return ScaleMixture(Pareto{a});
    }
    static ScaleMixture contaminated(double eps, ScaleMixture base, ScaleMixture tail) {
        if (!(eps >= 0.0 && eps <= 1.0))
            throw std::invalid_argument("contamination fraction must lie in [0, 1]");
        return ScaleMixture(Contaminated{eps, std::make_shared<const ScaleMixture>(std::move(base)),
                                         std::make_shared<const ScaleMixture>(std::move(tail))});
    }
    static ScaleMixture discrete(std::vector<std::pair<double, double>> atoms) {
        if (atoms.empty()) throw std::invalid_argument("discrete law needs at least one atom");
        double total = 0.0;
        for (const auto& [s, w] : atoms) {
            if (!(s > 0.0) || !std::isfinite(s))
                throw std::invalid_argument("discrete atoms must be strictly positive");
            if (!(w >= 0.0)) throw std::invalid_argument("discrete weights must be >= 0");
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw std::invalid_argument("discrete weights must sum to 1");
        return ScaleMixture(Discrete{std::move(atoms)});
    }

    const Variant& variant() const { return v_; }

    std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        std::visit(
            [&](const auto& c) {
                using T = std::decay_t<decltype(c)>;
                if constexpr (std::is_same_v<T, Dirac>) os << "dirac(" << c.sigma << ")";
                else if constexpr (std::is_same_v<T, InverseGamma>)
                    os << "inverse_gamma(" << c.a << "," << c.b << ")";
                else if constexpr (std::is_same_v<T, Pareto>) os << "pareto(" << c.a << ")";
                else if constexpr (std::is_same_v<T, Contaminated>)
                    os << "contaminated(" << c.eps << "," << c.base->describe() << ","
                       << c.tail->describe() << ")";
                else {
                    os << "discrete(";
                    for (std::size_t i = 0; i < c.atoms.size(); ++i)
                        os << (i ? "," : "") << c.atoms[i].first << ":" << c.atoms[i].second;
                    os << ")";
                }
            },
            v_);
        return os.str();
    }

private:
    explicit ScaleMixture(Variant v) : v_(std::move(v)) {}
    Variant v_;
};

template <class Rng>
double sample_sigma(const ScaleMixture& mix, Rng& rng) {
    return std::visit(
        [&](const auto& c) -> double {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, Dirac>) {
                return c.sigma;
            } else if constexpr (std::is_same_v<T, InverseGamma>) {
                std::gamma_distribution<double> gamma(c.a, 1.0);
                return std::sqrt(c.b / gamma(rng));
            } else if constexpr (std::is_same_v<T, Pareto>) {
                // 1 - U lies in (0, 1], keeping sigma finite.
                std::uniform_real_distribution<double> unif(0.0, 1.0);
                return std::pow(1.0 - unif(rng), -1.0 / (2.0 * c.a));
            } else if constexpr (std::is_same_v<T, Contaminated>) {
                if (c.eps <= 0.0) return sample_sigma(*c.base, rng);
                if (c.eps >= 1.0) return sample_sigma(*c.tail, rng);
                std::bernoulli_distribution coin(c.eps);
                return coin(rng) ? sample_sigma(*c.tail, rng) : sample_sigma(*c.base, rng);
            } else {
                std::uniform_real_distribution<double> unif(0.0, 1.0);
                double u = unif(rng), acc = 0.0;
                for (const auto& [s, w] : c.atoms) {
                    acc += w;
                    if (u < acc) return s;
                }
                return c.atoms.back().first;
            }
        },
        mix.variant());
}

/** \brief E[sigma^k]; +inf when the moment does not exist. */
inline double moment(const ScaleMixture& mix, int k) {
    if (k < 1) throw std::invalid_argument("moment order must be >= 1");
    return std::visit(
        [&](const auto& c) -> double {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, Dirac>) {
                return std::pow(c.sigma, k);
            } else if constexpr (std::is_same_v<T, InverseGamma>) {
                if (k >= 2.0 * c.a) return kInf;
                return std::exp(0.5 * k * std::log(c.b) + std::lgamma(c.a - 0.5 * k) -
                                std::lgamma(c.a));
            } else if constexpr (std::is_same_v<T, Pareto>) {
                if (k >= 2.0 * c.a) return kInf;
                return 2.0 * c.a / (2.0 * c.a - k);
            } else if constexpr (std::is_same_v<T, Contaminated>) {
                if (c.eps <= 0.0) return moment(*c.base, k);
                if (c.eps >= 1.0) return moment(*c.tail, k);
                return (1.0 - c.eps) * moment(*c.base, k) + c.eps * moment(*c.tail, k);
            } else {
                double acc = 0.0;
                for (const auto& [s, w] : c.atoms) acc += w * std::pow(s, k);
                return acc;
            }
        },
        mix.variant());
}

/** \brief E[f(sigma)] for a vector-valued f, by log-scale adaptive quadrature for
 *  the continuous families and exact sums for point masses. */
template <std::size_t N, class F>
quad::Values<N> expect_n(const ScaleMixture& mix, F&& f, const quad::Tolerance& tol = {}) {
    return std::visit(
        [&](const auto& c) -> quad::Values<N> {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, Dirac>) {
                return f(c.sigma);
            } else if constexpr (std::is_same_v<T, InverseGamma>) {
                // In u = log sigma the density is 2 exp(a log b - lgamma(a) - b e^{-2u} - 2a u).
                const double logc = std::log(2.0) + c.a * std::log(c.b) - std::lgamma(c.a);
                auto g = [&](double u) {
                    quad::Values<N> out{};
                    const double logw = logc - c.b * std::exp(-2.0 * u) - 2.0 * c.a * u;
                    if (logw < -745.0) return out;
                    const double w = std::exp(logw);
                    const quad::Values<N> fx = f(std::exp(u));
                    for (std::size_t k = 0; k < N; ++k) out[k] = w * fx[k];
                    return out;
                };
                const double mode = 0.5 * std::log(c.b / c.a);
                const double sd = 0.5 / std::sqrt(c.a);
                std::vector<double> br{mode - 30.0, mode + 30.0};
                for (double k : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) {
                    br.push_back(mode - k * sd);
                    br.push_back(mode + k * sd);
                }
                br.push_back(mode);
                return quad::integrate_line<N>(g, br, -kInf, kInf, tol);
            } else if constexpr (std::is_same_v<T, Pareto>) {
                const double rate = 2.0 * c.a;
                auto g = [&](double u) {
                    quad::Values<N> out{};
                    const double w = rate * std::exp(-rate * u);
                    if (w == 0.0) return out;
                    const quad::Values<N> fx = f(std::exp(u));
                    for (std::size_t k = 0; k < N; ++k) out[k] = w * fx[k];
                    return out;
                };
                const double scale = 1.0 / rate;
                std::vector<double> br{0.0, 30.0};
                for (double k : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0}) br.push_back(k * scale);
                return quad::integrate_line<N>(g, br, 0.0, kInf, tol);
            } else if constexpr (std::is_same_v<T, Contaminated>) {
                if (c.eps <= 0.0) return expect_n<N>(*c.base, f, tol);
                if (c.eps >= 1.0) return expect_n<N>(*c.tail, f, tol);
                quad::Values<N> lo = expect_n<N>(*c.base, f, tol);
                quad::Values<N> hi = expect_n<N>(*c.tail, f, tol);
                for (std::size_t k = 0; k < N; ++k) lo[k] = (1.0 - c.eps) * lo[k] + c.eps * hi[k];
                return lo;
            } else {
                quad::Values<N> acc{};
                for (const auto& [s, w] : c.atoms) {
                    if (w == 0.0) continue;
                    const quad::Values<N> fx = f(s);
                    for (std::size_t k = 0; k < N; ++k) acc[k] += w * fx[k];
                }
                return acc;
            }
        },
        mix.variant());
}

template <class F>
double expect(const ScaleMixture& mix, F&& f, const quad::Tolerance& tol = {}) {
    return expect_n<1>(mix, [&](double s) { return quad::Values<1>{f(s)}; }, tol)[0];
}

/** \brief S(x) = E[1/(x + sigma^2)]. */
inline double stieltjes(const ScaleMixture& mix, double x) {
    if (!(x > 0.0)) throw std::invalid_argument("stieltjes needs x > 0");
    return expect(mix, [x](double s) { return 1.0 / (x + s * s); });
}

/** \brief Y(v) = v E[sigma^2 / (1 + v sigma^2)]. */
inline double capital_Y(const ScaleMixture& mix, double v) {
    if (!(v > 0.0)) throw std::invalid_argument("capital_Y needs v > 0");
    // purely relative: Y(v) ~ 1/alpha gets tiny deep in the sweeps
    return expect(mix, [v](double s) {
        const double vs = v * s * s;
        return vs / (1.0 + vs);
    }, quad::Tolerance{.abs = 0.0});
}

/** \brief dY/dv = E[sigma^2 / (1 + v sigma^2)^2]. */
inline double capital_Y_prime(const ScaleMixture& mix, double v) {
    return expect(mix, [v](double s) {
        const double s2 = s * s;
        const double a = 1.0 + v * s2;
        return s2 / (a * a);
    }, quad::Tolerance{.abs = 0.0});
}

enum class Regime { finite_variance, marginal, infinite_variance };

struct TailClass {
    double exponent;  // +inf for point masses
    Regime regime;
};

inline Regime regime_of(double a) {
    if (a > 1.0) return Regime::finite_variance;
    if (a == 1.0) return Regime::marginal;
    return Regime::infinite_variance;
}

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::finite_variance: return "finite_variance";
        case Regime::marginal: return "marginal";
        default: return "infinite_variance";
    }
}

inline double tail_exponent(const ScaleMixture& mix) {
    return std::visit(
        [&](const auto& c) -> double {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, InverseGamma> || std::is_same_v<T, Pareto>) {
                return c.a;
            } else if constexpr (std::is_same_v<T, Contaminated>) {
                if (c.eps <= 0.0) return tail_exponent(*c.base);
                if (c.eps >= 1.0) return tail_exponent(*c.tail);
                return std::min(tail_exponent(*c.base), tail_exponent(*c.tail));
            } else {
                return kInf;
            }
        },
        mix.variant());
}

inline TailClass tail_class(const ScaleMixture& mix) {
    const double a = tail_exponent(mix);
    return {a, regime_of(a)};
}

/** \brief The sequence whose x -> inf limit defines sigma_0^2 (a > 1) or
 *  tilde sigma_0^2 (a <= 1). Uses 1 - x S(x) = E[sigma^2/(x + sigma^2)]. */
inline double sigma_tilde_term(const ScaleMixture& mix, const TailClass& tc, double x) {
    const double rest = expect(mix, [x](double s) {
        const double s2 = s * s;
        return s2 / (x + s2);
    });
    switch (tc.regime) {
        case Regime::finite_variance: return x * rest;
        case Regime::marginal: return x / std::log(x) * rest;
        default: return std::pow(x, tc.exponent) * rest;
    }
}

struct LimitEstimate {
    double value;
    double residual;
};

/** \brief Extrapolated x -> inf limit of sigma_tilde_term on x = 10^4, 10^5, ...
 *
 *  Aitken's delta-squared handles the power-law corrections of the a != 1
 *  regimes; in the marginal regime the leading correction is c / ln x and is
 *  removed by Richardson elimination in 1/ln x.
 */
inline LimitEstimate limit_sigma_tilde(const ScaleMixture& mix, const TailClass& tc,
                                       double rel_tol = 1e-6) {
    std::vector<double> xs, hs, est;
    double prev = std::numeric_limits<double>::quiet_NaN();
    double residual = kInf;
    for (int e = 4; e <= 24; ++e) {
        const double x = std::pow(10.0, e);
        xs.push_back(x);
        hs.push_back(sigma_tilde_term(mix, tc, x));
        const std::size_t n = hs.size();
        double cur;
        if (tc.regime == Regime::marginal) {
            if (n < 2) continue;
            const double l1 = std::log(xs[n - 2]), l2 = std::log(xs[n - 1]);
            cur = (hs[n - 1] * l2 - hs[n - 2] * l1) / (l2 - l1);
        } else {
            if (n < 3) continue;
            const double d1 = hs[n - 2] - hs[n - 3];
            const double d2 = hs[n - 1] - hs[n - 2];
            const double denom = d2 - d1;
            cur = (std::abs(denom) < 1e-300 || std::abs(d2) < 1e-15 * std::abs(hs[n - 1]))
                      ? hs[n - 1]
                      : hs[n - 1] - d2 * d2 / denom;
        }
        if (std::isfinite(prev)) {
            residual = std::abs(cur - prev);
            if (residual <= rel_tol * std::abs(cur)) return {cur, residual};
        }
        prev = cur;
    }
    throw NonConvergedLimit("sigma tilde limit did not stabilise", prev, residual);
}

}  // namespace mest
