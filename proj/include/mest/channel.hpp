#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "scale_mixture.hpp"

namespace mest {

/** \brief Square or Huber(delta) data term plus a ridge penalty lambda/2 |beta|^2.
 *  Huber with delta = 0 is LAD, delta = +inf is the square loss. */
struct LossSpec {
    enum class Kind { Square, Huber };
    Kind kind = Kind::Square;
    double delta = kInf;
    double lambda = 0.0;

    static LossSpec square(double lambda) { return make(Kind::Square, kInf, lambda); }
    static LossSpec huber(double delta, double lambda) { return make(Kind::Huber, delta, lambda); }
    static LossSpec lad(double lambda) { return make(Kind::Huber, 0.0, lambda); }

    bool is_square() const { return kind == Kind::Square || std::isinf(delta); }
    bool is_lad() const { return kind == Kind::Huber && delta == 0.0; }
    std::string name() const {
        if (is_lad()) return "lad";
        return kind == Kind::Square ? "square" : "huber";
    }

private:
    static LossSpec make(Kind k, double delta, double lambda) {
        if (!(delta >= 0.0)) throw std::invalid_argument("Huber delta must be >= 0");
        if (!(lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be >= 0");
        LossSpec l;
        l.kind = k;
        l.delta = delta;
        l.lambda = lambda;
        return l;
    }
};

inline double rho(const LossSpec& loss, double t) {
    const double a = std::abs(t);
    if (loss.is_square()) return 0.5 * t * t;
    if (loss.is_lad()) return a;
    return a <= loss.delta ? 0.5 * t * t : loss.delta * a - 0.5 * loss.delta * loss.delta;
}

inline double rho_prime(const LossSpec& loss, double t) {
    if (loss.is_square()) return t;
    if (loss.is_lad()) return t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0);
    return std::clamp(t, -loss.delta, loss.delta);
}

/** \brief Scalar proximal f minimising Vs u^2/2 + rho(y - omega - Vs u). */
inline double proximal_f(const LossSpec& loss, double y, double omega, double Vs) {
    const double r = y - omega;
    if (loss.is_square()) return r / (1.0 + Vs);
    if (loss.is_lad()) {
        const double den = std::max(std::abs(r), Vs);
        return den > 0.0 ? r / den : 0.0;
    }
    return r / std::max(std::abs(r) / loss.delta, 1.0 + Vs);
}

/** \brief d f / d omega; the kink takes the quadratic-branch value. */
inline double prox_derivative(const LossSpec& loss, double y, double omega, double Vs) {
    const double r = y - omega;
    if (loss.is_square()) return -1.0 / (1.0 + Vs);
    if (loss.is_lad()) return (Vs > 0.0 && std::abs(r) <= Vs) ? -1.0 / Vs : 0.0;
    return std::abs(r) <= loss.delta * (1.0 + Vs) ? -1.0 / (1.0 + Vs) : 0.0;
}

struct NoiseComponent {
    double weight;
    double theta;
    ScaleMixture scale;
};

/** \brief Label law y = theta tau + sigma_hat g with (theta, sigma_hat) drawn
 *  from a finite mixture of components. */
struct NoiseModel {
    std::vector<NoiseComponent> components;

    static NoiseModel single(ScaleMixture scale) { return NoiseModel({{1.0, 1.0, std::move(scale)}}); }
    static NoiseModel gaussian(double sigma_hat) { return single(ScaleMixture::dirac(sigma_hat)); }

    NoiseModel() = default;
    explicit NoiseModel(std::vector<NoiseComponent> comps) : components(std::move(comps)) {
        if (components.empty()) throw std::invalid_argument("noise model needs a component");
        double total = 0.0;
        for (const auto& c : components) {
            if (!(c.weight >= 0.0)) throw std::invalid_argument("noise weights must be >= 0");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("noise weights must sum to 1");
    }

    /** E[sigma_hat^2], +inf when any weighted component lacks it. */
    double second_moment() const {
        double acc = 0.0;
        for (const auto& c : components)
            if (c.weight > 0.0) acc += c.weight * moment(c.scale, 2);
        return acc;
    }
    double mean_theta() const {
        double acc = 0.0;
        for (const auto& c : components) acc += c.weight * c.theta;
        return acc;
    }
    double mean_theta_sq() const {
        double acc = 0.0;
        for (const auto& c : components) acc += c.weight * c.theta * c.theta;
        return acc;
    }
    bool unit_theta() const {
        for (const auto& c : components)
            if (c.weight > 0.0 && c.theta != 1.0) return false;
        return true;
    }
};

inline double normal_pdf(double x, double var) {
    return std::exp(-0.5 * x * x / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

struct Z0Value {
    double z;
    double dz_dmu;
};

/** \brief Teacher channel Z0(y, mu, V) = E[N(y; theta mu, theta^2 V + sigma_hat^2)] and d/dmu. */
inline Z0Value z0(const NoiseModel& noise, double y, double mu, double V) {
    if (!(V >= 0.0)) throw std::invalid_argument("z0 needs V >= 0");
    Z0Value out{0.0, 0.0};
    for (const auto& c : noise.components) {
        if (c.weight == 0.0) continue;
        const double th = c.theta;
        const double r = y - th * mu;
        auto vals = expect_n<2>(c.scale, [&](double sh) {
            const double var = th * th * V + sh * sh;
            if (var <= 0.0) return quad::Values<2>{kInf, 0.0};
            const double p = normal_pdf(r, var);
            return quad::Values<2>{p, th * r / var * p};
        });
        out.z += c.weight * vals[0];
        out.dz_dmu += c.weight * vals[1];
    }
    return out;
}

}  // namespace mest
