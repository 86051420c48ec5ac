#include <catch_amalgamated.hpp>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mest/scale_mixture.hpp"

using namespace mest;

namespace {

// Independent oracle: integrate over s = sigma^2 with the closed-form density of s
// (inverse-gamma or Pareto), using Boost's exp-sinh rule instead of the library path.
template <class G>
double oracle_expect_s(const ScaleMixture& mix, G g) {
    boost::math::quadrature::exp_sinh<double> rule;
    const auto& v = mix.variant();
    if (auto* ig = std::get_if<InverseGamma>(&v)) {
        const double a = ig->a, b = ig->b;
        auto dens = [&](double s) {
            if (s <= 0) return 0.0;
            return std::exp(a * std::log(b) - std::lgamma(a) - (a + 1) * std::log(s) - b / s) * g(s);
        };
        return rule.integrate(dens, 0.0, INFINITY, 1e-13);
    }
    if (auto* p = std::get_if<Pareto>(&v)) {
        const double a = p->a;
        auto dens = [&](double s) { return a * std::pow(s, -a - 1) * g(s); };
        return rule.integrate(dens, 1.0, INFINITY, 1e-13);
    }
    throw std::logic_error("oracle only covers continuous families");
}

std::vector<ScaleMixture> builtin_families() {
    return {ScaleMixture::dirac(1.0),
            ScaleMixture::dirac(2.5),
            ScaleMixture::inverse_gamma(1.1, 0.1),
            ScaleMixture::inverse_gamma(2.0, 1.0),
            ScaleMixture::inverse_gamma(0.8, 1.0),
            ScaleMixture::inverse_gamma(0.5, 3.0),
            ScaleMixture::pareto(0.5),
            ScaleMixture::pareto(1.0),
            ScaleMixture::pareto(1.65),
            ScaleMixture::contaminated(0.3, ScaleMixture::dirac(1.0), ScaleMixture::pareto(1.65)),
            ScaleMixture::contaminated(0.5, ScaleMixture::dirac(1.0),
                                       ScaleMixture::inverse_gamma(1.1, 0.1)),
            ScaleMixture::discrete({{0.5, 0.25}, {1.0, 0.5}, {4.0, 0.25}})};
}

}  // namespace

TEST_CASE("sample_sigma examples") {
    std::mt19937_64 rng(7);
    REQUIRE(sample_sigma(ScaleMixture::dirac(2.0), rng) == 2.0);

    auto clean = ScaleMixture::contaminated(0.0, ScaleMixture::dirac(1.0), ScaleMixture::pareto(0.5));
    for (int i = 0; i < 1000; ++i) REQUIRE(sample_sigma(clean, rng) == 1.0);

    // E[sigma^2] = b/(a-1) = 1 for the unit-variance parametrisation a = 1 + b.
    auto ig = ScaleMixture::inverse_gamma(1.1, 0.1);
    const int n = 1000000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s = sample_sigma(ig, rng);
        sum += s * s;
        sum2 += s * s * s * s;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    REQUIRE(std::abs(mean - 1.0) < 3.0 * se);
}

TEST_CASE("sampled scales follow the target law (Kolmogorov-Smirnov)") {
    std::mt19937_64 rng(31);
    const int n = 100000;
    auto ks = [&](const ScaleMixture& mix, auto cdf) {
        std::vector<double> s(n);
        for (auto& x : s) x = sample_sigma(mix, rng);
        std::sort(s.begin(), s.end());
        double d = 0.0;
        for (int i = 0; i < n; ++i) {
            const double f = cdf(s[i]);
            d = std::max({d, std::abs(f - double(i) / n), std::abs(f - double(i + 1) / n)});
        }
        return d;
    };
    // 1% critical value of the KS statistic.
    const double crit = 1.63 / std::sqrt(double(n));
    REQUIRE(ks(ScaleMixture::inverse_gamma(1.1, 0.1),
               [](double x) { return boost::math::gamma_q(1.1, 0.1 / (x * x)); }) < crit);
    REQUIRE(ks(ScaleMixture::inverse_gamma(3.0, 2.0),
               [](double x) { return boost::math::gamma_q(3.0, 2.0 / (x * x)); }) < crit);
    REQUIRE(ks(ScaleMixture::pareto(0.8), [](double x) { return 1.0 - std::pow(x, -1.6); }) < crit);
}

TEST_CASE("sampling is deterministic given the seed") {
    auto mix = ScaleMixture::contaminated(0.4, ScaleMixture::inverse_gamma(2.0, 1.0),
                                          ScaleMixture::pareto(0.7));
    std::mt19937_64 a(123), b(123);
    for (int i = 0; i < 1000; ++i) REQUIRE(sample_sigma(mix, a) == sample_sigma(mix, b));
}

TEST_CASE("moment examples") {
    REQUIRE(std::isinf(moment(ScaleMixture::pareto(1.0), 2)));
    REQUIRE(moment(ScaleMixture::dirac(3.0), 2) == 9.0);
    auto mix = ScaleMixture::contaminated(0.5, ScaleMixture::dirac(1.0),
                                          ScaleMixture::inverse_gamma(2.0, 1.0));
    REQUIRE(moment(mix, 2) == Catch::Approx(1.0).epsilon(1e-14));
    REQUIRE(moment(ScaleMixture::pareto(2.0), 2) == Catch::Approx(2.0));
    REQUIRE(moment(ScaleMixture::inverse_gamma(3.0, 4.0), 2) == Catch::Approx(2.0));
}

TEST_CASE("moments agree with quadrature of sigma^k") {
    for (const auto& mix : builtin_families()) {
        for (int k : {1, 2}) {
            const double m = moment(mix, k);
            if (!std::isfinite(m)) continue;
            const double q = expect(mix, [k](double s) { return std::pow(s, k); });
            INFO(mix.describe() << " k=" << k);
            REQUIRE(q == Catch::Approx(m).epsilon(1e-9));
        }
    }
}

TEST_CASE("stieltjes examples") {
    REQUIRE(stieltjes(ScaleMixture::dirac(1.0), 1.0) == Catch::Approx(0.5).epsilon(1e-15));
    for (const auto& mix : builtin_families()) {
        const double x = 1e12;
        INFO(mix.describe());
        REQUIRE(std::abs(x * stieltjes(mix, x) - 1.0) < 1e-5);
    }

    // Monte Carlo oracle for IG(2,1) at x = 1.
    auto ig = ScaleMixture::inverse_gamma(2.0, 1.0);
    std::mt19937_64 rng(2024);
    const int n = 10000000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s = sample_sigma(ig, rng);
        const double g = 1.0 / (1.0 + s * s);
        sum += g;
        sum2 += g * g;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    REQUIRE(std::abs(stieltjes(ig, 1.0) - mean) < 3.0 * se);
}

TEST_CASE("quadrature agrees with an independent exp-sinh oracle") {
    for (const auto& mix : builtin_families()) {
        const auto& v = mix.variant();
        if (!std::holds_alternative<InverseGamma>(v) && !std::holds_alternative<Pareto>(v)) continue;
        for (double x : {1e-4, 0.3, 1.0, 7.0, 1e3}) {
            INFO(mix.describe() << " x=" << x);
            const double ref = oracle_expect_s(mix, [x](double s) { return 1.0 / (x + s); });
            REQUIRE(stieltjes(mix, x) == Catch::Approx(ref).epsilon(1e-9));
            const double yref = oracle_expect_s(mix, [x](double s) { return x * s / (1.0 + x * s); });
            REQUIRE(capital_Y(mix, x) == Catch::Approx(yref).epsilon(1e-9));
        }
    }
}

TEST_CASE("capital_Y examples") {
    REQUIRE(capital_Y(ScaleMixture::dirac(1.0), 1.0) == Catch::Approx(0.5).epsilon(1e-15));
    for (const auto& mix : builtin_families()) REQUIRE(capital_Y(mix, 1e-12) < 1e-5);

    const double v = 1e-6;
    const double ratio = std::log(capital_Y(ScaleMixture::pareto(0.5), v)) / std::log(v);
    REQUIRE(std::abs(ratio - 0.5) < 0.02);
}

TEST_CASE("tail_class examples") {
    auto d = tail_class(ScaleMixture::dirac(1.0));
    REQUIRE(std::isinf(d.exponent));
    REQUIRE(d.regime == Regime::finite_variance);

    auto ig = tail_class(ScaleMixture::inverse_gamma(0.8, 1.0));
    REQUIRE(ig.exponent == 0.8);
    REQUIRE(ig.regime == Regime::infinite_variance);

    auto c = tail_class(
        ScaleMixture::contaminated(0.3, ScaleMixture::dirac(1.0), ScaleMixture::pareto(1.65)));
    REQUIRE(c.exponent == 1.65);
    REQUIRE(c.regime == Regime::finite_variance);

    REQUIRE(tail_class(ScaleMixture::pareto(1.0)).regime == Regime::marginal);
}

TEST_CASE("limit_sigma_tilde examples") {
    auto d = ScaleMixture::dirac(1.7);
    REQUIRE(limit_sigma_tilde(d, tail_class(d)).value == Catch::Approx(1.7 * 1.7).epsilon(1e-8));

    auto ig = ScaleMixture::inverse_gamma(2.0, 1.0);
    REQUIRE(std::abs(limit_sigma_tilde(ig, tail_class(ig)).value - 1.0) < 1e-4);

    auto ig3 = ScaleMixture::inverse_gamma(3.0, 4.0);
    REQUIRE(limit_sigma_tilde(ig3, tail_class(ig3)).value == Catch::Approx(2.0).epsilon(1e-6));

    auto p = ScaleMixture::pareto(0.5);
    auto tc = tail_class(p);
    const double h6 = sigma_tilde_term(p, tc, 1e6);
    const double h8 = sigma_tilde_term(p, tc, 1e8);
    const double h10 = sigma_tilde_term(p, tc, 1e10);
    REQUIRE(h6 > 0.0);
    REQUIRE(std::abs(h8 / h6 - 1.0) < 0.01);
    REQUIRE(std::abs(h10 / h6 - 1.0) < 0.01);
    // For Pareto, x^a E[s/(x+s)] -> a pi / sin(a pi) when a < 1.
    REQUIRE(limit_sigma_tilde(p, tc).value == Catch::Approx(std::numbers::pi / 2).epsilon(1e-5));

    // Marginal Pareto: E[s/(x+s)] = ln(1+x)/x, so the limit is 1.
    auto p1 = ScaleMixture::pareto(1.0);
    REQUIRE(limit_sigma_tilde(p1, tail_class(p1)).value == Catch::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("Stieltjes bounds and the Y identity on all built-in families") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> logv(std::log(1e-6), std::log(1e3));
    for (const auto& mix : builtin_families()) {
        double prev_y = 0.0;
        for (int i = 0; i < 25; ++i) {
            const double v = std::exp(logv(rng));
            const double x = 1.0 / v;
            const double s = stieltjes(mix, x);
            const double y = capital_Y(mix, v);
            INFO(mix.describe() << " v=" << v);
            REQUIRE(s > 0.0);
            REQUIRE(s < 1.0 / x);
            REQUIRE(std::abs(y + s / v - 1.0) < 1e-10);
            REQUIRE(y < 1.0);
        }
        for (double v = 1e-6; v <= 1e3; v *= 3.0) {
            const double y = capital_Y(mix, v);
            REQUIRE(y > prev_y);
            prev_y = y;
        }
    }
}

TEST_CASE("contaminated endpoints equal their components") {
    auto base = ScaleMixture::inverse_gamma(2.0, 1.0);
    auto tail = ScaleMixture::pareto(0.7);
    auto zero = ScaleMixture::contaminated(0.0, base, tail);
    auto one = ScaleMixture::contaminated(1.0, base, tail);
    for (const auto& [mix, ref] : {std::pair{zero, base}, std::pair{one, tail}}) {
        REQUIRE(moment(mix, 1) == moment(ref, 1));
        REQUIRE(moment(mix, 2) == moment(ref, 2));
        REQUIRE(stieltjes(mix, 0.7) == stieltjes(ref, 0.7));
        REQUIRE(capital_Y(mix, 2.0) == capital_Y(ref, 2.0));
        REQUIRE(tail_class(mix).exponent == tail_class(ref).exponent);
        std::mt19937_64 r1(5), r2(5);
        for (int i = 0; i < 100; ++i) REQUIRE(sample_sigma(mix, r1) == sample_sigma(ref, r2));
    }
}

TEST_CASE("finite second moment iff finite-variance regime") {
    for (double a : {0.3, 0.8, 1.0, 1.2, 2.0, 5.0}) {
        for (const auto& mix : {ScaleMixture::inverse_gamma(a, 1.3), ScaleMixture::pareto(a)}) {
            INFO(mix.describe());
            REQUIRE(std::isfinite(moment(mix, 2)) ==
                    (tail_class(mix).regime == Regime::finite_variance));
        }
    }
}

TEST_CASE("invalid parameters are rejected at construction") {
    REQUIRE_THROWS_AS(ScaleMixture::inverse_gamma(0.0, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(ScaleMixture::pareto(-1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(ScaleMixture::discrete({{1.0, 0.5}, {2.0, 0.4}}), std::invalid_argument);
    REQUIRE_THROWS_AS(ScaleMixture::discrete({{0.0, 1.0}}), std::invalid_argument);
    REQUIRE_THROWS_AS(ScaleMixture::contaminated(1.5, ScaleMixture::dirac(1), ScaleMixture::dirac(2)),
                      std::invalid_argument);
}
