#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "mest/channel.hpp"

using namespace mest;

namespace {

std::vector<NoiseModel> noise_models() {
    auto contam = ScaleMixture::contaminated(0.5, ScaleMixture::dirac(1.0),
                                             ScaleMixture::inverse_gamma(1.1, 0.1));
    return {NoiseModel::gaussian(1.0),
            NoiseModel::single(contam),
            NoiseModel::single(ScaleMixture::inverse_gamma(0.8, 1.0)),
            NoiseModel({{0.7, 1.0, ScaleMixture::dirac(0.5)}, {0.3, 2.5, ScaleMixture::pareto(1.5)}})};
}

}  // namespace

TEST_CASE("proximal_f examples") {
    REQUIRE(proximal_f(LossSpec::square(0.0), 1.0, 0.0, 1.0) == 0.5);
    REQUIRE(proximal_f(LossSpec::huber(1.0, 0.0), 10.0, 0.0, 1.0) == 1.0);
    REQUIRE(std::abs(proximal_f(LossSpec::huber(1e6, 0.0), 1.0, 0.0, 1.0) - 0.5) < 1e-9);
    REQUIRE(proximal_f(LossSpec::huber(kInf, 0.0), 3.0, 1.0, 3.0) == 0.5);
    // LAD: residual inside [-Vs, Vs] is absorbed exactly, otherwise f = sign(r).
    REQUIRE(proximal_f(LossSpec::lad(0.0), 0.5, 0.0, 2.0) == 0.25);
    REQUIRE(proximal_f(LossSpec::lad(0.0), -5.0, 0.0, 2.0) == -1.0);
}

TEST_CASE("prox_derivative examples and finite differences") {
    REQUIRE(prox_derivative(LossSpec::square(0.0), 3.0, -2.0, 1.0) == -0.5);
    REQUIRE(prox_derivative(LossSpec::huber(1.0, 0.0), 10.0, 0.0, 1.0) == 0.0);

    std::mt19937_64 rng(11);
    std::normal_distribution<double> gauss(0.0, 3.0);
    std::uniform_real_distribution<double> unif(0.0, 4.0);
    const double h = 1e-6;
    for (const auto& loss : {LossSpec::square(0.0), LossSpec::huber(0.7, 0.0), LossSpec::huber(2.0, 0.0),
                             LossSpec::lad(0.0)}) {
        int checked = 0;
        while (checked < 200) {
            const double y = gauss(rng), w = gauss(rng), vs = unif(rng);
            const double r = y - w;
            const double kink = loss.is_lad() ? vs : loss.delta * (1.0 + vs);
            if (std::abs(std::abs(r) - kink) < 1e-3) continue;
            const double fd =
                (proximal_f(loss, y, w + h, vs) - proximal_f(loss, y, w - h, vs)) / (2 * h);
            REQUIRE(std::abs(prox_derivative(loss, y, w, vs) - fd) < 1e-6);
            ++checked;
        }
    }
}

TEST_CASE("proximal optimality by random perturbation") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> gauss(0.0, 2.0);
    std::uniform_real_distribution<double> unif(0.0, 3.0);
    for (const auto& loss : {LossSpec::square(0.0), LossSpec::huber(0.3, 0.0), LossSpec::huber(1.5, 0.0),
                             LossSpec::lad(0.0)}) {
        for (int rep = 0; rep < 20; ++rep) {
            const double y = gauss(rng), w = gauss(rng), vs = unif(rng);
            const double f = proximal_f(loss, y, w, vs);
            auto g = [&](double u) { return vs * u * u / 2 + rho(loss, y - w - vs * u); };
            const double gf = g(f);
            std::normal_distribution<double> step(0.0, 0.5);
            for (int k = 0; k < 1000; ++k) {
                const double u = f + step(rng);
                REQUIRE(gf <= g(u) + 1e-12);
            }
        }
    }
}

TEST_CASE("Huber proximal magnitude is non-decreasing in delta") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> gauss(0.0, 4.0);
    std::uniform_real_distribution<double> unif(0.0, 3.0);
    for (int rep = 0; rep < 200; ++rep) {
        const double y = gauss(rng), w = gauss(rng), vs = unif(rng);
        double prev = 0.0;
        for (double delta = 1e-4; delta < 1e4; delta *= 1.5) {
            const double f = std::abs(proximal_f(LossSpec::huber(delta, 0.0), y, w, vs));
            REQUIRE(f >= prev - 1e-15);
            prev = f;
        }
        REQUIRE(prev == Catch::Approx(std::abs(proximal_f(LossSpec::square(0.0), y, w, vs))));
    }
}

TEST_CASE("z0 examples") {
    auto gauss = NoiseModel::gaussian(1.0);
    REQUIRE(z0(gauss, 0.3, 0.3, 0.0).z == Catch::Approx(1.0 / std::sqrt(2 * std::numbers::pi)));
    const auto v = z0(gauss, 1.2, 0.4, 0.5);
    REQUIRE(v.z == Catch::Approx(normal_pdf(0.8, 1.5)).epsilon(1e-14));
    REQUIRE(v.dz_dmu == Catch::Approx(0.8 / 1.5 * normal_pdf(0.8, 1.5)).epsilon(1e-14));
}

TEST_CASE("z0 is a non-negative density in y") {
    for (const auto& noise : noise_models()) {
        for (auto [mu, V] : {std::pair{0.0, 0.5}, std::pair{1.3, 0.0}, std::pair{-2.0, 2.0}}) {
            auto f = [&](double y) {
                const double z = z0(noise, y, mu, V).z;
                REQUIRE(z >= 0.0);
                return quad::Values<1>{z};
            };
            const double total = quad::integrate_line<1>(f, {mu - 40, mu - 3, mu, mu + 3, mu + 40},
                                                        -kInf, kInf, {}, 1e8)[0];
            REQUIRE(std::abs(total - 1.0) < 1e-8);
        }
    }
}

TEST_CASE("d z0 / d mu matches central differences") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> gauss(0.0, 1.5);
    std::uniform_real_distribution<double> unif(0.05, 2.0);
    const double h = 1e-5;
    for (const auto& noise : noise_models()) {
        for (int i = 0; i < 100; ++i) {
            const double y = gauss(rng), mu = gauss(rng), V = unif(rng);
            const double fd = (z0(noise, y, mu + h, V).z - z0(noise, y, mu - h, V).z) / (2 * h);
            REQUIRE(std::abs(z0(noise, y, mu, V).dz_dmu - fd) < 1e-7);
        }
    }
}

TEST_CASE("noise model moments") {
    auto m = NoiseModel({{0.5, 1.0, ScaleMixture::dirac(1.0)}, {0.5, 2.0, ScaleMixture::dirac(2.0)}});
    REQUIRE(m.second_moment() == 2.5);
    REQUIRE(m.mean_theta() == 1.5);
    REQUIRE(m.mean_theta_sq() == 2.5);
    REQUIRE(std::isinf(NoiseModel::single(ScaleMixture::inverse_gamma(0.8, 1.0)).second_moment()));
    REQUIRE_THROWS_AS(NoiseModel({{0.5, 1.0, ScaleMixture::dirac(1.0)}}), std::invalid_argument);
}
