#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "errors.hpp"

namespace mest::quad {

template <std::size_t N>
using Values = std::array<double, N>;

struct Tolerance {
    double rel = 1e-10;
    double abs = 1e-12;
    int max_intervals = 4000;
    // Window extension stops once a new chunk carries less than this
    // fraction of the running L1 mass.
    double tail = 1e-13;
};

template <std::size_t N>
struct Estimate {
    Values<N> value{};
    Values<N> error{};
    Values<N> l1{};
};

namespace detail {

template <std::size_t N>
inline Values<N>& add_to(Values<N>& acc, const Values<N>& x, double w = 1.0) {
    for (std::size_t k = 0; k < N; ++k) acc[k] += w * x[k];
    return acc;
}

// One 21-point Kronrod panel with its embedded 10-point Gauss rule.
template <std::size_t N, class F>
Estimate<N> gk21(F& f, double a, double b) {
    using boost::math::quadrature::gauss;
    using boost::math::quadrature::gauss_kronrod;
    static const auto& xk = gauss_kronrod<double, 21>::abscissa();
    static const auto& wk = gauss_kronrod<double, 21>::weights();
    static const auto& wg = gauss<double, 10>::weights();

    const double c = 0.5 * (a + b);
    const double h = 0.5 * (b - a);
    Values<N> kron{}, gs{}, l1{};
    const Values<N> f0 = f(c);
    for (std::size_t k = 0; k < N; ++k) {
        kron[k] = wk[0] * f0[k];
        l1[k] = wk[0] * std::abs(f0[k]);
    }
    for (std::size_t i = 1; i < xk.size(); ++i) {
        const double dx = h * xk[i];
        const Values<N> fp = f(c + dx);
        const Values<N> fm = f(c - dx);
        for (std::size_t k = 0; k < N; ++k) {
            const double s = fp[k] + fm[k];
            kron[k] += wk[i] * s;
            l1[k] += wk[i] * (std::abs(fp[k]) + std::abs(fm[k]));
            if (i % 2 == 1) gs[k] += wg[(i - 1) / 2] * s;
        }
    }
    Estimate<N> e;
    for (std::size_t k = 0; k < N; ++k) {
        e.value[k] = h * kron[k];
        e.error[k] = std::abs(h * (kron[k] - gs[k]));
        e.l1[k] = std::abs(h) * l1[k];
        if (!std::isfinite(e.value[k]))
            throw QuadratureFailure("non-finite integrand on [" + std::to_string(a) + ", " +
                                    std::to_string(b) + "]");
    }
    return e;
}

}  // namespace detail

/** \brief Adaptive Gauss-Kronrod integration of a vector-valued integrand over
 *  the panels delimited by `breaks` (sorted, at least two entries). */
template <std::size_t N, class F>
Estimate<N> adaptive(F&& f, const std::vector<double>& breaks, const Tolerance& tol = {}) {
    struct Panel {
        double a, b;
        Estimate<N> est;
        double badness;
    };
    auto cmp = [](const Panel& x, const Panel& y) { return x.badness < y.badness; };
    std::priority_queue<Panel, std::vector<Panel>, decltype(cmp)> queue(cmp);

    Estimate<N> total;
    auto badness = [&](const Estimate<N>& e) {
        double worst = 0.0;
        for (std::size_t k = 0; k < N; ++k)
            worst = std::max(worst, e.error[k] / std::max(tol.rel * total.l1[k], tol.abs));
        return worst;
    };
    std::vector<Estimate<N>> first;
    for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
        if (!(breaks[i + 1] > breaks[i])) continue;
        first.push_back(detail::gk21<N>(f, breaks[i], breaks[i + 1]));
        detail::add_to(total.value, first.back().value);
        detail::add_to(total.error, first.back().error);
        detail::add_to(total.l1, first.back().l1);
    }
    for (std::size_t i = 0, j = 0; i + 1 < breaks.size(); ++i) {
        if (!(breaks[i + 1] > breaks[i])) continue;
        queue.push({breaks[i], breaks[i + 1], first[j], badness(first[j])});
        ++j;
    }

    auto converged = [&] {
        for (std::size_t k = 0; k < N; ++k)
            if (total.error[k] > std::max(tol.rel * total.l1[k], tol.abs)) return false;
        return true;
    };

    int panels = static_cast<int>(queue.size());
    while (!converged()) {
        if (queue.empty() || panels >= tol.max_intervals)
            throw QuadratureFailure("adaptive quadrature did not reach tolerance");
        Panel p = queue.top();
        queue.pop();
        const double mid = 0.5 * (p.a + p.b);
        if (!(mid > p.a && mid < p.b) || (p.b - p.a) < 1e-14 * std::max(1.0, std::abs(mid))) {
            // Panel cannot be split further; accept its contribution as is.
            detail::add_to(total.error, p.est.error, -1.0);
            continue;
        }
        Estimate<N> left = detail::gk21<N>(f, p.a, mid);
        Estimate<N> right = detail::gk21<N>(f, mid, p.b);
        detail::add_to(total.value, p.est.value, -1.0);
        detail::add_to(total.error, p.est.error, -1.0);
        detail::add_to(total.l1, p.est.l1, -1.0);
        for (const auto* e : {&left, &right}) {
            detail::add_to(total.value, e->value);
            detail::add_to(total.error, e->error);
            detail::add_to(total.l1, e->l1);
        }
        queue.push({p.a, mid, left, badness(left)});
        queue.push({mid, p.b, right, badness(right)});
        ++panels;
    }
    for (std::size_t k = 0; k < N; ++k) total.error[k] = std::max(total.error[k], 0.0);
    return total;
}

/** \brief Integral over [support_lo, support_hi] (either may be infinite).
 *
 *  Starts on the finite window given by `breaks` and keeps appending chunks of
 *  doubling width on each open side until a chunk's L1 mass falls below
 *  tol.tail of the running total. `limit` bounds how far the window may grow.
 */
template <std::size_t N, class F>
Values<N> integrate_line(F&& f, std::vector<double> breaks, double support_lo, double support_hi,
                         const Tolerance& tol = {}, double limit = 340.0) {
    for (double& x : breaks) x = std::clamp(x, support_lo, support_hi);
    std::sort(breaks.begin(), breaks.end());
    breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());
    if (breaks.size() < 2) return Values<N>{};

    Estimate<N> total = adaptive<N>(f, breaks, tol);
    auto negligible = [&](const Estimate<N>& chunk) {
        for (std::size_t k = 0; k < N; ++k)
            if (chunk.l1[k] > tol.tail * total.l1[k] && chunk.l1[k] > tol.abs * tol.tail)
                return false;
        return true;
    };
    auto extend = [&](double edge, double bound, double direction) {
        double width = std::max(1.0, 0.25 * (breaks.back() - breaks.front()));
        while (direction * (bound - edge) > 0) {
            if (std::abs(edge) >= limit)
                throw QuadratureFailure("integrand mass does not decay within the window");
            double next = edge + direction * width;
            if (direction * (next - bound) > 0) next = bound;
            next = std::clamp(next, -limit, limit);
            std::vector<double> chunk_breaks = direction > 0 ? std::vector<double>{edge, next}
                                                             : std::vector<double>{next, edge};
            Estimate<N> chunk = adaptive<N>(f, chunk_breaks, tol);
            detail::add_to(total.value, chunk.value);
            detail::add_to(total.l1, chunk.l1);
            edge = next;
            if (negligible(chunk)) break;
            width *= 2.0;
        }
    };
    extend(breaks.back(), support_hi, +1.0);
    extend(breaks.front(), support_lo, -1.0);
    return total.value;
}

/** \brief Probabilists' Gauss-Hermite rule: E[f(Z)], Z ~ N(0,1), is
 *  approximated by sum_i weights[i] * f(nodes[i]). */
struct HermiteRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

inline const HermiteRule& gauss_hermite(int n) {
    static std::mutex mutex;
    static std::map<int, std::unique_ptr<HermiteRule>> cache;
    std::lock_guard<std::mutex> lock(mutex);
    auto& slot = cache[n];
    if (!slot) {
        // Golub-Welsch on the Jacobi matrix of the monic Hermite recurrence.
        Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd sub(std::max(n - 1, 0));
        for (int k = 1; k < n; ++k) sub[k - 1] = std::sqrt(static_cast<double>(k));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
        solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
        auto rule = std::make_unique<HermiteRule>();
        rule->nodes.resize(n);
        rule->weights.resize(n);
        for (int i = 0; i < n; ++i) {
            rule->nodes[i] = solver.eigenvalues()[i];
            const double v0 = solver.eigenvectors()(0, i);
            rule->weights[i] = v0 * v0;
        }
        slot = std::move(rule);
    }
    return *slot;
}

}  // namespace mest::quad
