#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "state_evolution.hpp"

namespace mest {

struct Axis {
    bool free = false;
    double value = 0.0;  // used when not free
    double lo = 1e-4;
    double hi = 1e2;
};

struct OptimizeConfig {
    Axis lambda{true, 0.0, 1e-6, 1e2};
    Axis delta{false, kInf, 1e-4, 1e2};
    int grid_points = 25;     // per free axis, log spaced
    double golden_tol = 1e-4; // final bracket width in log10 units
    int coordinate_rounds = 12;
    SolverConfig solver;
};

struct LandscapePoint {
    double lambda;
    double delta;
    double eps_est;  // nan when the solve failed
    bool converged;
    FixedPointSolution solution;
};

struct OptimizeResult {
    LandscapePoint best;
    std::vector<LandscapePoint> local_minima;  // refined, sorted by eps_est
    std::vector<LandscapePoint> landscape;     // coarse grid, delta fastest
    std::vector<std::string> log;              // skipped points
};

namespace detail {

inline std::vector<double> log_grid(const Axis& a, int points) {
    if (!a.free) return {a.value};
    if (!(a.lo > 0.0 && a.hi > a.lo)) throw std::invalid_argument("optimizer bounds must satisfy 0 < lo < hi");
    if (points < 3) throw std::invalid_argument("optimizer grid needs at least 3 points");
    std::vector<double> g(points);
    const double l0 = std::log10(a.lo), l1 = std::log10(a.hi);
    for (int i = 0; i < points; ++i) g[i] = std::pow(10.0, l0 + (l1 - l0) * i / (points - 1));
    return g;
}

// strict total order: value, then smaller delta, then smaller lambda; failed points last
inline bool better(const LandscapePoint& a, const LandscapePoint& b) {
    const bool fa = std::isfinite(a.eps_est), fb = std::isfinite(b.eps_est);
    if (fa != fb) return fa;
    if (!fa) return false;
    const double tie = 1e-12 * std::max(std::abs(a.eps_est), std::abs(b.eps_est));
    if (std::abs(a.eps_est - b.eps_est) > tie) return a.eps_est < b.eps_est;
    if (a.delta != b.delta) return a.delta < b.delta;
    return a.lambda < b.lambda;
}

class Evaluator {
public:
    Evaluator(const ProblemSpec& base, const OptimizeConfig& cfg, std::vector<std::string>& log)
        : base_(base), cfg_(cfg), log_(log) {}

    LandscapePoint operator()(double lambda, double delta, const std::optional<OrderParams>& warm) {
        ProblemSpec spec = base_;
        spec.loss = std::isinf(delta) ? LossSpec::square(lambda) : LossSpec::huber(delta, lambda);
        SolverConfig sc = cfg_.solver;
        if (warm) sc.warm_start = warm;
        LandscapePoint p{lambda, delta, std::numeric_limits<double>::quiet_NaN(), false, {}};
        try {
            p.solution = solve(spec, sc);
            p.eps_est = p.solution.eps_est;
            p.converged = true;
        } catch (const FixedPointNotConverged& e) {
            // a cold start sometimes succeeds where the warm start wandered off
            if (warm) return (*this)(lambda, delta, std::nullopt);
            log_.push_back("skipped lambda=" + fmt(lambda) + " delta=" + fmt(delta) + ": " + e.what());
        } catch (const Error& e) {
            log_.push_back("skipped lambda=" + fmt(lambda) + " delta=" + fmt(delta) + ": " + e.what());
        }
        return p;
    }

private:
    static std::string fmt(double x) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", x);
        return buf;
    }
    const ProblemSpec& base_;
    const OptimizeConfig& cfg_;
    std::vector<std::string>& log_;
};

// golden-section search over log10 x in [a, b]; f returns the landscape point at x
inline LandscapePoint golden(const std::function<LandscapePoint(double)>& f, double a, double b, double tol,
                             LandscapePoint start) {
    const double r = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - r * (b - a), d = a + r * (b - a);
    LandscapePoint fc = f(c), fd = f(d);
    LandscapePoint best = start;
    for (const auto* p : {&fc, &fd})
        if (better(*p, best)) best = *p;
    while (b - a > tol) {
        if (better(fc, fd)) {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
            if (better(fc, best)) best = fc;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
            if (better(fd, best)) best = fd;
        }
    }
    return best;
}

}  // namespace detail

/** \brief Coarse log grid over the free hyperparameters (lambda and/or delta), then
 *  golden-section refinement around every grid local minimum. */
inline OptimizeResult optimize_hyperparams(const ProblemSpec& base, const OptimizeConfig& cfg = {}) {
    if (!cfg.lambda.free && !cfg.delta.free) throw std::invalid_argument("optimizer needs a free parameter");
    OptimizeResult res;
    detail::Evaluator eval(base, cfg, res.log);
    const auto lg = detail::log_grid(cfg.lambda, cfg.grid_points);
    const auto dg = detail::log_grid(cfg.delta, cfg.grid_points);
    const int nl = static_cast<int>(lg.size()), nd = static_cast<int>(dg.size());

    // descending lambda: large ridge converges fast and warm-starts the rest
    std::vector<LandscapePoint> grid(static_cast<std::size_t>(nl * nd));
    auto at = [&](int i, int j) -> LandscapePoint& { return grid[static_cast<std::size_t>(i * nd + j)]; };
    std::optional<OrderParams> row_warm;
    for (int i = nl - 1; i >= 0; --i) {
        std::optional<OrderParams> warm = row_warm;
        for (int j = nd - 1; j >= 0; --j) {
            at(i, j) = eval(lg[i], dg[j], warm);
            if (at(i, j).converged) {
                warm = at(i, j).solution.params;
                if (j == nd - 1) row_warm = warm;
            }
        }
    }
    res.landscape = grid;

    std::vector<std::pair<int, int>> minima;
    for (int i = 0; i < nl; ++i)
        for (int j = 0; j < nd; ++j) {
            const auto& p = at(i, j);
            if (!std::isfinite(p.eps_est)) continue;
            bool is_min = true;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    const int a = i + di, b = j + dj;
                    if ((di == 0 && dj == 0) || a < 0 || a >= nl || b < 0 || b >= nd) continue;
                    if (detail::better(at(a, b), p)) is_min = false;
                }
            if (is_min) minima.emplace_back(i, j);
        }
    if (minima.empty()) throw NotConverged("optimizer: no grid point converged", 0, kInf);

    for (auto [i, j] : minima) {
        LandscapePoint cur = at(i, j);
        const double llo = std::log10(lg[std::max(i - 1, 0)]), lhi = std::log10(lg[std::min(i + 1, nl - 1)]);
        const double dlo = std::log10(dg[std::max(j - 1, 0)]), dhi = std::log10(dg[std::min(j + 1, nd - 1)]);
        const int rounds = (nl > 1 && nd > 1) ? cfg.coordinate_rounds : 1;
        for (int r = 0; r < rounds; ++r) {
            const LandscapePoint before = cur;
            if (nd > 1) {
                const double lam = cur.lambda;
                const auto warm = cur.converged ? std::optional<OrderParams>(cur.solution.params) : std::nullopt;
                cur = detail::golden([&](double x) { return eval(lam, std::pow(10.0, x), warm); }, dlo, dhi,
                                     cfg.golden_tol, cur);
            }
            if (nl > 1) {
                const double del = cur.delta;
                const auto warm = cur.converged ? std::optional<OrderParams>(cur.solution.params) : std::nullopt;
                cur = detail::golden([&](double x) { return eval(std::pow(10.0, x), del, warm); }, llo, lhi,
                                     cfg.golden_tol, cur);
            }
            if (!(cur.eps_est < before.eps_est * (1.0 - 1e-9))) break;
        }
        res.local_minima.push_back(cur);
    }
    std::sort(res.local_minima.begin(), res.local_minima.end(), detail::better);
    res.best = res.local_minima.front();
    return res;
}

/** \brief Grid-local minima of eps_est along delta at fixed lambda (count and positions). */
inline std::vector<LandscapePoint> delta_local_minima(const std::vector<LandscapePoint>& landscape, double lambda) {
    std::vector<LandscapePoint> row;
    for (const auto& p : landscape)
        if (p.lambda == lambda) row.push_back(p);
    std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) { return a.delta < b.delta; });
    std::vector<LandscapePoint> out;
    for (std::size_t k = 0; k < row.size(); ++k) {
        if (!std::isfinite(row[k].eps_est)) continue;
        const bool left = k == 0 || !detail::better(row[k - 1], row[k]);
        const bool right = k + 1 == row.size() || !detail::better(row[k + 1], row[k]);
        if (left && right) out.push_back(row[k]);
    }
    return out;
}

}  // namespace mest
