#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "bayes_optimal.hpp"
#include "config.hpp"
#include "optimize.hpp"
#include "rates.hpp"
#include "simulation.hpp"
#include "state_evolution.hpp"

namespace mest {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Row {
    std::string mode;
    double alpha = kNaN, lambda = kNaN, delta = kNaN, eps_c = kNaN, eps_n = kNaN;
    double m = kNaN, q = kNaN, v = kNaN;
    double eps_est = kNaN, eps_gen = kNaN, eps_train = kNaN, angle = kNaN, eps_bo = kNaN;
    bool converged = false;
    long iters = 0;
    std::optional<std::uint64_t> seed;
    std::string source;
};

inline const char* kCsvHeader =
    "mode,alpha,lambda,delta,eps_c,eps_n,m,q,v,eps_est,eps_gen,eps_train,angle,eps_bo,converged,iters,seed,source";

/** Shortest text that reads back to the same double; inf/nan spelled out. */
inline std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[40];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) break;
    }
    return buf;
}

inline std::string format_row(const Row& r) {
    std::ostringstream os;
    auto f = [&](double x) { os << format_double(x) << ','; };
    os << r.mode << ',';
    for (double x : {r.alpha, r.lambda, r.delta, r.eps_c, r.eps_n, r.m, r.q, r.v, r.eps_est, r.eps_gen, r.eps_train,
                     r.angle, r.eps_bo})
        f(x);
    os << (r.converged ? 1 : 0) << ',' << r.iters << ',';
    if (r.seed) os << *r.seed;
    os << ',' << r.source;
    return os.str();
}

namespace detail {

// total order on doubles with nan last
inline int cmp(double a, double b) {
    const bool na = std::isnan(a), nb = std::isnan(b);
    if (na || nb) return na == nb ? 0 : (na ? 1 : -1);
    return a < b ? -1 : (a > b ? 1 : 0);
}

inline bool row_less(const Row& a, const Row& b) {
    if (a.mode != b.mode) return a.mode < b.mode;
    for (auto [x, y] : {std::pair{a.alpha, b.alpha}, {a.lambda, b.lambda}, {a.delta, b.delta}, {a.eps_c, b.eps_c},
                        {a.eps_n, b.eps_n}})
        if (int c = cmp(x, y)) return c < 0;
    if (a.source != b.source) return a.source < b.source;
    return a.seed.value_or(0) < b.seed.value_or(0);
}

}  // namespace detail

/** \brief One grid point of the experiment; lambda/delta may be nan when not applicable. */
struct GridPoint {
    double alpha, lambda, delta, eps_c, eps_n;
};

inline ScaleMixture covariate_law(const ExperimentConfig& c, double eps_c) {
    auto base = parse_law(c.covariates);
    if (!c.covariate_contamination) return base;
    return ScaleMixture::contaminated(eps_c, std::move(base), parse_law(c.covariates_tail));
}

inline NoiseModel noise_model(const ExperimentConfig& c, double eps_n) {
    auto scale = parse_law(c.noise);
    if (c.noise_contamination) scale = ScaleMixture::contaminated(eps_n, std::move(scale), parse_law(c.noise_tail));
    if (c.outlier_fraction == 0.0) return NoiseModel::single(std::move(scale));
    return NoiseModel({{1.0 - c.outlier_fraction, 1.0, scale}, {c.outlier_fraction, c.outlier_theta, scale}});
}

inline LossSpec loss_of(const ExperimentConfig& c, double lambda, double delta) {
    if (c.loss == "square") return LossSpec::square(lambda);
    if (c.loss == "lad") return LossSpec::lad(lambda);
    return LossSpec::huber(delta, lambda);
}

inline double delta_column(const ExperimentConfig& c, double delta) {
    if (c.loss == "square") return kInf;
    if (c.loss == "lad") return 0.0;
    return delta;
}

inline ProblemSpec problem_of(const ExperimentConfig& c, const GridPoint& g) {
    return ProblemSpec::single(g.alpha, covariate_law(c, g.eps_c), noise_model(c, g.eps_n),
                               loss_of(c, g.lambda, g.delta), c.beta_star_sq);
}

inline SolverConfig solver_of(const ExperimentConfig& c) {
    SolverConfig s;
    s.tol = c.tol;
    s.max_iters = c.max_iters;
    s.damping = c.damping;
    return s;
}

inline Row theory_row(const ExperimentConfig& c, const GridPoint& g, const FixedPointSolution& s, bool ok) {
    Row r;
    r.mode = to_string(c.mode);
    r.alpha = g.alpha;
    r.lambda = g.lambda;
    r.delta = delta_column(c, g.delta);
    r.eps_c = g.eps_c;
    r.eps_n = g.eps_n;
    r.m = s.params.m;
    r.q = s.params.q;
    r.v = s.params.v;
    r.eps_est = s.eps_est;
    r.eps_gen = s.eps_gen;
    r.eps_train = s.eps_train;
    r.angle = s.angle;
    r.converged = ok;
    r.iters = s.diagnostics.iterations;
    r.source = "theory";
    return r;
}

struct UnitResult {
    std::vector<Row> rows;
    std::vector<LandscapePoint> landscape;  // optimize mode
    std::vector<LandscapePoint> minima;
    bool failed = false;
    std::vector<std::string> messages;
};

namespace detail {

inline std::string describe(const GridPoint& g) {
    std::ostringstream os;
    os << "alpha=" << format_double(g.alpha) << " lambda=" << format_double(g.lambda)
       << " delta=" << format_double(g.delta) << " eps_c=" << format_double(g.eps_c)
       << " eps_n=" << format_double(g.eps_n);
    return os.str();
}

inline bool closed_form_applies(const ProblemSpec& p) {
    return p.loss.is_square() && p.K() == 1 && p.centered() && p.noise.unit_theta() &&
           (p.loss.lambda > 0.0 || p.alpha > 1.0);
}

// warm-started chain along alpha
inline UnitResult run_theory_chain(const ExperimentConfig& c, const std::vector<GridPoint>& chain) {
    UnitResult out;
    auto cfg = solver_of(c);
    for (const auto& g : chain) {
        const auto spec = problem_of(c, g);
        try {
            FixedPointSolution s;
            if (c.mode == Mode::Rates && closed_form_applies(spec)) {
                // beta^2 - 2m + q cancels at large alpha; the closed form keeps eps_est accurate
                s = stieltjes_form_solve(spec);
            } else {
                s = solve(spec, cfg);
                cfg.warm_start = s.params;
            }
            out.rows.push_back(theory_row(c, g, s, true));
        } catch (const FixedPointNotConverged& e) {
            out.rows.push_back(theory_row(c, g, e.partial, false));
            out.failed = true;
            out.messages.push_back(describe(g) + ": " + e.what());
            cfg.warm_start.reset();
        } catch (const std::exception& e) {
            FixedPointSolution empty;
            empty.params = {kNaN, kNaN, kNaN, {}};
            empty.eps_est = empty.eps_gen = empty.eps_train = empty.angle = kNaN;
            out.rows.push_back(theory_row(c, g, empty, false));
            out.failed = true;
            out.messages.push_back(describe(g) + ": " + e.what());
            cfg.warm_start.reset();
        }
    }
    return out;
}

inline UnitResult run_optimize(const ExperimentConfig& c, const GridPoint& g) {
    UnitResult out;
    OptimizeConfig oc;
    oc.lambda = {c.opt_lambda, g.lambda, c.lambda_lo, c.lambda_hi};
    // delta = inf selects the square loss and delta = 0 the LAD loss inside the optimizer
    oc.delta = {c.opt_delta, c.loss == "huber" ? g.delta : delta_column(c, g.delta), c.delta_lo, c.delta_hi};
    oc.grid_points = c.grid_points;
    oc.solver = solver_of(c);
    const ProblemSpec spec = problem_of(c, {g.alpha, 1.0, 1.0, g.eps_c, g.eps_n});
    try {
        auto res = optimize_hyperparams(spec, oc);
        GridPoint best = g;
        best.lambda = res.best.lambda;
        best.delta = res.best.delta;
        out.rows.push_back(theory_row(c, best, res.best.solution, true));
        out.rows.back().delta = res.best.delta;
        out.landscape = std::move(res.landscape);
        out.minima = std::move(res.local_minima);
        for (auto& m : res.log) out.messages.push_back(describe(g) + ": " + m);
    } catch (const std::exception& e) {
        Row r;
        r.mode = to_string(c.mode);
        r.alpha = g.alpha;
        r.eps_c = g.eps_c;
        r.eps_n = g.eps_n;
        r.source = "theory";
        out.rows.push_back(r);
        out.failed = true;
        out.messages.push_back(describe(g) + ": " + e.what());
    }
    return out;
}

inline UnitResult run_bayes(const ExperimentConfig& c, const GridPoint& g) {
    UnitResult out;
    Row r;
    r.mode = to_string(c.mode);
    r.alpha = g.alpha;
    r.eps_c = g.eps_c;
    r.eps_n = g.eps_n;
    r.source = "bayes";
    const auto law = covariate_law(c, g.eps_c);
    const auto noise = noise_model(c, g.eps_n);
    BOConfig bc;
    bc.tol = c.tol;
    try {
        BOSolution bo;
        bool ok = true;
        try {
            bo = solve_bo(g.alpha, c.beta_star_sq, law, noise, bc);
        } catch (const BONotConverged& e) {
            bo = e.partial;
            ok = false;
            out.failed = true;
            out.messages.push_back(describe(g) + ": " + e.what());
        }
        const auto base = bo_gen_baseline(bo, c.beta_star_sq, law, noise);
        r.m = r.q = bo.q;
        r.eps_est = base.eps_est;
        r.eps_gen = base.eps_gen;
        r.eps_bo = bo.eps_bo;
        r.angle = normalised_angle(bo.q, bo.q, c.beta_star_sq);
        r.iters = bo.diagnostics.iterations;
        r.converged = ok;
        if (!bo.diagnostics.note.empty()) out.messages.push_back(describe(g) + ": " + bo.diagnostics.note);
    } catch (const std::exception& e) {
        out.failed = true;
        out.messages.push_back(describe(g) + ": " + e.what());
    }
    out.rows.push_back(r);
    return out;
}

inline UnitResult run_simulation(const ExperimentConfig& c, const GridPoint& g, int k) {
    UnitResult out;
    Row r;
    r.mode = to_string(c.mode);
    r.alpha = g.alpha;
    r.lambda = g.lambda;
    r.delta = delta_column(c, g.delta);
    r.eps_c = g.eps_c;
    r.eps_n = g.eps_n;
    r.source = "simulation";
    r.seed = replica_seed(c.seed, static_cast<std::uint64_t>(k));
    DatasetSpec ds;
    ds.d = c.d;
    ds.n = std::max<long>(1, std::lround(g.alpha * static_cast<double>(c.d)));
    ds.beta_star_sq = c.beta_star_sq;
    ds.clusters = {SimCluster{1.0, {}, covariate_law(c, g.eps_c)}};
    ds.noise = noise_model(c, g.eps_n);
    ds.seed = *r.seed;
    try {
        const auto data = generate(ds);
        ErmResult e;
        try {
            e = erm_solve(data, loss_of(c, g.lambda, g.delta));
            r.converged = true;
        } catch (const ErmNotConverged& nc) {
            e = nc.partial;
            out.failed = true;
            out.messages.push_back(describe(g) + " seed " + std::to_string(*r.seed) + ": " + nc.what());
        }
        const double dd = static_cast<double>(c.d);
        r.m = e.beta.dot(data.teacher) / dd;
        r.q = e.beta.squaredNorm() / dd;
        r.eps_est = e.eps_est;
        r.eps_train = e.eps_train;
        r.angle = e.angle;
        r.iters = e.diagnostics.iterations;
    } catch (const std::exception& e) {
        out.failed = true;
        out.messages.push_back(describe(g) + ": " + e.what());
    }
    out.rows.push_back(r);
    return out;
}

struct Unit {
    enum class Kind { Chain, Optimize, Bayes, Simulation } kind;
    std::vector<GridPoint> points;  // a chain, or a single point
    int replica = 0;
};

inline std::vector<Unit> plan(const ExperimentConfig& c) {
    std::vector<double> alphas = c.alpha;
    std::sort(alphas.begin(), alphas.end());
    alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
    auto uniq = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    const bool no_delta = c.loss != "huber";
    const auto lambdas = (c.mode == Mode::Bayes || (c.mode == Mode::Optimize && c.opt_lambda))
                             ? std::vector<double>{kNaN}
                             : uniq(c.lambda);
    const auto deltas = (c.mode == Mode::Bayes || no_delta || (c.mode == Mode::Optimize && c.opt_delta))
                            ? std::vector<double>{kNaN}
                            : uniq(c.delta);
    const auto ec = uniq(c.eps_c), en = uniq(c.eps_n);

    std::vector<Unit> units;
    for (double l : lambdas)
        for (double d : deltas)
            for (double e1 : ec)
                for (double e2 : en) {
                    std::vector<GridPoint> chain;
                    for (double a : alphas) chain.push_back({a, l, d, e1, e2});
                    switch (c.mode) {
                        case Mode::Solve:
                        case Mode::Sweep:
                        case Mode::Rates: units.push_back({Unit::Kind::Chain, chain, 0}); break;
                        case Mode::Compare:
                            units.push_back({Unit::Kind::Chain, chain, 0});
                            [[fallthrough]];
                        case Mode::Simulate:
                            for (const auto& g : chain)
                                for (int k = 0; k < c.seeds; ++k) units.push_back({Unit::Kind::Simulation, {g}, k});
                            break;
                        case Mode::Optimize:
                            for (const auto& g : chain) units.push_back({Unit::Kind::Optimize, {g}, 0});
                            break;
                        case Mode::Bayes:
                            for (const auto& g : chain) units.push_back({Unit::Kind::Bayes, {g}, 0});
                            break;
                    }
                }
    return units;
}

inline UnitResult run_unit(const ExperimentConfig& c, const Unit& u) {
    switch (u.kind) {
        case Unit::Kind::Chain: return run_theory_chain(c, u.points);
        case Unit::Kind::Optimize: return run_optimize(c, u.points.front());
        case Unit::Kind::Bayes: return run_bayes(c, u.points.front());
        default: return run_simulation(c, u.points.front(), u.replica);
    }
}

inline std::string stem_of(const std::string& out) {
    const std::string ext = ".csv";
    if (out.size() > ext.size() && out.compare(out.size() - ext.size(), ext.size(), ext) == 0)
        return out.substr(0, out.size() - ext.size());
    return out;
}

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// ---- static SVG plots

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> pts;
    bool dots = false;
};

inline void write_svg(const std::string& path, const std::string& title, const std::string& xlabel,
                      const std::string& ylabel, const std::vector<Series>& series) {
    double x0 = kInf, x1 = -kInf, y0 = kInf, y1 = -kInf;
    for (const auto& s : series)
        for (auto [x, y] : s.pts) {
            if (!(x > 0.0 && y > 0.0 && std::isfinite(x) && std::isfinite(y))) continue;
            x0 = std::min(x0, std::log10(x));
            x1 = std::max(x1, std::log10(x));
            y0 = std::min(y0, std::log10(y));
            y1 = std::max(y1, std::log10(y));
        }
    if (!(x1 >= x0 && y1 >= y0)) throw std::runtime_error("nothing to plot");
    if (x1 - x0 < 1e-9) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-9) y0 -= 0.5, y1 += 0.5;
    const double W = 720, H = 480, L = 80, R = 200, T = 40, B = 60;
    auto px = [&](double x) { return L + (std::log10(x) - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (std::log10(y) - y0) / (y1 - y0) * (H - T - B); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << (W - R + L) / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int e = static_cast<int>(std::ceil(x0)); e <= static_cast<int>(std::floor(x1)); ++e) {
        const double x = px(std::pow(10.0, e));
        os << "<line x1=\"" << x << "\" y1=\"" << H - B << "\" x2=\"" << x << "\" y2=\"" << H - B + 5
           << "\" stroke=\"black\"/><text x=\"" << x << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">1e" << e
           << "</text>\n";
    }
    for (int e = static_cast<int>(std::ceil(y0)); e <= static_cast<int>(std::floor(y1)); ++e) {
        const double y = py(std::pow(10.0, e));
        os << "<line x1=\"" << L - 5 << "\" y1=\"" << y << "\" x2=\"" << L << "\" y2=\"" << y
           << "\" stroke=\"black\"/><text x=\"" << L - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">1e" << e
           << "</text>\n";
    }
    os << "<text x=\"" << (W - R + L) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"20\" y=\"" << (H - B + T) / 2 << "\" transform=\"rotate(-90 20 " << (H - B + T) / 2
       << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* col = colors[k % 8];
        std::ostringstream path_d;
        bool pen = false;
        for (auto [x, y] : s.pts) {
            if (!(x > 0.0 && y > 0.0 && std::isfinite(x) && std::isfinite(y))) {
                pen = false;
                continue;
            }
            if (s.dots) {
                os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << col << "\"/>\n";
            } else {
                path_d << (pen ? " L " : " M ") << px(x) << ' ' << py(y);
                pen = true;
            }
        }
        if (!s.dots) os << "<path d=\"" << path_d.str() << "\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\"/>\n";
        const double ly = T + 16 + 16 * static_cast<double>(k);
        os << "<text x=\"" << W - R + 12 << "\" y=\"" << ly << "\" fill=\"" << col << "\">" << s.label << "</text>\n";
    }
    os << "</svg>\n";
}

inline std::string series_label(const Row& r) {
    std::ostringstream os;
    os << r.source;
    if (!std::isnan(r.lambda)) os << " l=" << format_double(r.lambda);
    if (!std::isnan(r.delta) && !std::isinf(r.delta)) os << " d=" << format_double(r.delta);
    if (r.eps_c != 0.0) os << " ec=" << format_double(r.eps_c);
    if (r.eps_n != 0.0) os << " en=" << format_double(r.eps_n);
    return os.str();
}

inline void plot_alpha(const std::string& path, const std::vector<Row>& rows) {
    std::map<std::string, Series> by;
    std::map<std::string, std::map<double, std::vector<double>>> sims;
    for (const auto& r : rows) {
        const double y = r.source == "bayes" ? r.eps_bo : r.eps_est;
        if (r.source == "simulation") {
            sims[series_label(r)][r.alpha].push_back(y);
        } else {
            auto& s = by[series_label(r)];
            s.label = series_label(r);
            s.pts.emplace_back(r.alpha, y);
        }
    }
    std::vector<Series> all;
    for (auto& [k, s] : by) all.push_back(s);
    for (auto& [k, per_alpha] : sims) {
        Series s{k, {}, true};
        for (auto& [a, ys] : per_alpha) {
            double m = 0.0;
            for (double y : ys) m += y;
            s.pts.emplace_back(a, m / static_cast<double>(ys.size()));
        }
        all.push_back(s);
    }
    write_svg(path, "estimation error", "alpha", "eps_est", all);
}

inline void plot_delta(const std::string& path, const std::vector<std::pair<GridPoint, LandscapePoint>>& land) {
    // per alpha: min over lambda of eps_est at each delta
    std::map<double, std::map<double, double>> curve;
    for (const auto& [g, p] : land) {
        if (!std::isfinite(p.eps_est)) continue;
        auto& c = curve[g.alpha];
        auto it = c.find(p.delta);
        if (it == c.end() || p.eps_est < it->second) c[p.delta] = p.eps_est;
    }
    std::vector<Series> all;
    for (auto& [a, c] : curve) {
        Series s{"alpha=" + format_double(a), {}, false};
        for (auto [d, e] : c) s.pts.emplace_back(d, e);
        all.push_back(s);
    }
    write_svg(path, "landscape", "delta", "eps_est (min over lambda)", all);
}

}  // namespace detail

struct RunOutcome {
    int exit_code = 0;
    std::vector<Row> rows;  // sorted
    std::vector<std::string> files;
};

/** \brief Execute a validated config: run all grid points, write CSV (and side files). */
inline RunOutcome run(const ExperimentConfig& c, std::ostream& log) {
    validate(c);
    const auto units = detail::plan(c);
    std::vector<std::optional<UnitResult>> results(units.size());
    std::atomic<std::size_t> next{0};
    std::atomic<bool> abort{false};
    std::mutex log_mutex;

    auto worker = [&] {
        for (;;) {
            if (abort.load()) return;
            const std::size_t i = next.fetch_add(1);
            if (i >= units.size()) return;
            auto res = detail::run_unit(c, units[i]);
            {
                std::lock_guard<std::mutex> lock(log_mutex);
                for (const auto& m : res.messages) log << "warning: " << m << '\n';
            }
            if (res.failed && c.strict) abort.store(true);
            results[i] = std::move(res);
        }
    };
    const int nw = std::max(1, std::min<int>(c.workers, static_cast<int>(units.size())));
    std::vector<std::thread> pool;
    for (int k = 1; k < nw; ++k) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    RunOutcome out;
    bool failed = false;
    std::vector<std::pair<GridPoint, LandscapePoint>> land, minima;
    for (std::size_t i = 0; i < units.size(); ++i) {
        if (!results[i]) continue;
        failed |= results[i]->failed;
        for (auto& r : results[i]->rows) out.rows.push_back(r);
        for (auto& p : results[i]->landscape) land.emplace_back(units[i].points.front(), p);
        for (auto& p : results[i]->minima) minima.emplace_back(units[i].points.front(), p);
    }
    std::sort(out.rows.begin(), out.rows.end(), detail::row_less);

    {
        std::ofstream os(c.out);
        if (!os) throw std::runtime_error("cannot write " + c.out);
        if (!c.deterministic) os << "# mest run " << detail::utc_timestamp() << '\n';
        os << kCsvHeader << '\n';
        for (const auto& r : out.rows) os << format_row(r) << '\n';
        out.files.push_back(c.out);
    }
    const std::string stem = detail::stem_of(c.out);

    if (c.mode == Mode::Optimize) {
        const std::string path = stem + ".landscape.csv";
        std::ofstream os(path);
        os << "kind,alpha,eps_c,eps_n,lambda,delta,eps_est,converged\n";
        auto emit = [&](const char* kind, const auto& list) {
            std::vector<std::string> lines;
            for (const auto& [g, p] : list)
                lines.push_back(std::string(kind) + "," + format_double(g.alpha) + "," + format_double(g.eps_c) + "," +
                                format_double(g.eps_n) + "," + format_double(p.lambda) + "," +
                                format_double(p.delta) + "," + format_double(p.eps_est) + "," +
                                (p.converged ? "1" : "0"));
            for (const auto& l : lines) os << l << '\n';
        };
        emit("grid", land);
        emit("local_min", minima);
        out.files.push_back(path);
    }

    if (c.mode == Mode::Compare) {
        const std::string path = stem + ".compare.csv";
        std::ofstream os(path);
        os << "alpha,lambda,delta,eps_c,eps_n,theory,sim_mean,sim_se,seeds,within_3se\n";
        std::map<std::tuple<double, double, double, double, double>, std::vector<double>> sims;
        std::map<std::tuple<double, double, double, double, double>, double> theory;
        auto key = [](const Row& r) { return std::make_tuple(r.alpha, r.lambda, r.delta, r.eps_c, r.eps_n); };
        for (const auto& r : out.rows) {
            if (r.source == "simulation" && std::isfinite(r.eps_est)) sims[key(r)].push_back(r.eps_est);
            if (r.source == "theory") theory[key(r)] = r.eps_est;
        }
        for (const auto& [k, th] : theory) {
            const auto& v = sims[k];
            const double n = static_cast<double>(v.size());
            double mean = kNaN, se = kNaN;
            if (!v.empty()) {
                mean = 0.0;
                for (double x : v) mean += x;
                mean /= n;
                double ss = 0.0;
                for (double x : v) ss += (x - mean) * (x - mean);
                se = v.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : kNaN;
            }
            const bool ok = std::abs(mean - th) < 3.0 * se;
            os << format_double(std::get<0>(k)) << ',' << format_double(std::get<1>(k)) << ','
               << format_double(std::get<2>(k)) << ',' << format_double(std::get<3>(k)) << ','
               << format_double(std::get<4>(k)) << ',' << format_double(th) << ',' << format_double(mean) << ','
               << format_double(se) << ',' << v.size() << ',' << (ok ? 1 : 0) << '\n';
            if (!ok) log << "compare: alpha=" << format_double(std::get<0>(k)) << " theory " << format_double(th)
                         << " simulation " << format_double(mean) << " +- " << format_double(se) << " outside 3 SE\n";
        }
        out.files.push_back(path);
    }

    if (c.mode == Mode::Rates) {
        const std::string path = stem + ".rates.csv";
        std::ofstream os(path);
        os << "lambda,delta,eps_c,eps_n,regime,predicted_exponent,log_correction,coefficient,fitted_slope,"
              "intercept,residual,points,marginal_slope\n";
        std::map<std::tuple<double, double, double, double>, std::vector<std::pair<double, double>>> sweeps;
        for (const auto& r : out.rows)
            if (r.converged) sweeps[{r.lambda, r.delta, r.eps_c, r.eps_n}].emplace_back(r.alpha, r.eps_est);
        for (const auto& [k, sw] : sweeps) {
            const auto [l, d, e1, e2] = k;
            std::string regime = "nan", expo = "nan", logc = "nan", coef = "nan";
            try {
                const auto pr = predict_rate(covariate_law(c, e1), noise_model(c, e2));
                regime = to_string(pr.tail.regime);
                expo = format_double(pr.exponent);
                logc = pr.log_correction ? "1" : "0";
                coef = pr.coefficient_available ? format_double(pr.coefficient) : "nan";
            } catch (const std::exception& e) {
                log << "rates: no prediction: " << e.what() << '\n';
            }
            std::string slope = "nan", icpt = "nan", res = "nan", pts = "0", marg = "nan";
            try {
                const auto f = fit_rate(sw, c.window_lo, c.window_hi);
                slope = format_double(f.slope);
                icpt = format_double(f.intercept);
                res = format_double(f.residual);
                pts = std::to_string(f.points);
                if (logc == "1") marg = format_double(fit_marginal_rate(sw, std::max(c.window_lo, 1.0 + 1e-9), c.window_hi).slope);
            } catch (const std::exception& e) {
                log << "rates: fit failed: " << e.what() << '\n';
            }
            os << format_double(l) << ',' << format_double(d) << ',' << format_double(e1) << ',' << format_double(e2)
               << ',' << regime << ',' << expo << ',' << logc << ',' << coef << ',' << slope << ',' << icpt << ','
               << res << ',' << pts << ',' << marg << '\n';
        }
        out.files.push_back(path);
    }

    if (c.plot) {
        try {
            detail::plot_alpha(stem + ".svg", out.rows);
            out.files.push_back(stem + ".svg");
            if (c.mode == Mode::Optimize && c.opt_delta) {
                detail::plot_delta(stem + ".delta.svg", land);
                out.files.push_back(stem + ".delta.svg");
            }
        } catch (const std::exception& e) {
            log << "plot skipped: " << e.what() << '\n';
        }
    }

    if (failed && c.strict) out.exit_code = 3;
    return out;
}

}  // namespace mest
