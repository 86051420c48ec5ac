#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>

#include "channel.hpp"
#include "errors.hpp"
#include "scale_mixture.hpp"

namespace mest {

/** \brief Finite-d covariate cluster: x = mean + sigma z / sqrt(d). */
struct SimCluster {
    double weight = 1.0;
    Eigen::VectorXd mean;  // empty means zero
    ScaleMixture law = ScaleMixture::dirac(1.0);
};

struct DatasetSpec {
    long n = 1;
    long d = 1;
    double beta_star_sq = 1.0;
    Eigen::VectorXd teacher;  // empty: drawn N(0, beta_star_sq I_d)
    std::vector<SimCluster> clusters{SimCluster{}};
    NoiseModel noise = NoiseModel::gaussian(1.0);
    std::uint64_t seed = 0;

    void validate() const {
        if (n < 1 || d < 1) throw std::invalid_argument("dataset needs n, d >= 1");
        if (!(beta_star_sq > 0.0)) throw std::invalid_argument("beta_star_sq must be > 0");
        if (teacher.size() != 0 && teacher.size() != d) throw std::invalid_argument("teacher must have length d");
        if (clusters.empty()) throw std::invalid_argument("at least one cluster is required");
        double total = 0.0;
        for (const auto& c : clusters) {
            if (!(c.weight >= 0.0)) throw std::invalid_argument("cluster weights must be >= 0");
            if (c.mean.size() != 0 && c.mean.size() != d) throw std::invalid_argument("cluster mean must have length d");
            total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("cluster weights must sum to 1");
    }
};

struct Dataset {
    Eigen::MatrixXd X;  // n x d
    Eigen::VectorXd y;
    Eigen::VectorXd teacher;
    Eigen::VectorXd sigma, sigma_hat, theta;
    std::vector<int> cluster;       // per row
    std::vector<int> noise_source;  // component index per row
    std::uint64_t seed = 0;

    long n() const { return X.rows(); }
    long d() const { return X.cols(); }
};

/** splitmix64 finaliser */
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/** \brief Seed of replica k derived from the master seed. */
inline std::uint64_t replica_seed(std::uint64_t master, std::uint64_t k) { return mix64(mix64(master) ^ mix64(k + 1)); }

namespace detail {

template <class Rng>
std::size_t pick(const std::vector<double>& weights, Rng& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    for (std::size_t i = weights.size(); i-- > 0;)
        if (weights[i] > 0.0) return i;
    return 0;
}

}  // namespace detail

/** \brief Draw teacher, covariates and labels; reproducible from spec.seed. */
inline Dataset generate(const DatasetSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const long n = spec.n, d = spec.d;

    Dataset ds;
    ds.seed = spec.seed;
    if (spec.teacher.size() == d) {
        ds.teacher = spec.teacher;
    } else {
        ds.teacher.resize(d);
        const double sd = std::sqrt(spec.beta_star_sq);
        for (long j = 0; j < d; ++j) ds.teacher[j] = sd * gauss(rng);
    }

    std::vector<double> cw, nw;
    for (const auto& c : spec.clusters) cw.push_back(c.weight);
    for (const auto& c : spec.noise.components) nw.push_back(c.weight);

    ds.X.resize(n, d);
    ds.y.resize(n);
    ds.sigma.resize(n);
    ds.sigma_hat.resize(n);
    ds.theta.resize(n);
    ds.cluster.resize(n);
    ds.noise_source.resize(n);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (long i = 0; i < n; ++i) {
        const std::size_t c = detail::pick(cw, rng);
        const auto& cl = spec.clusters[c];
        const double s = sample_sigma(cl.law, rng);
        for (long j = 0; j < d; ++j) ds.X(i, j) = s * inv_sqrt_d * gauss(rng);
        if (cl.mean.size() == d) ds.X.row(i) += cl.mean.transpose();

        const std::size_t k = detail::pick(nw, rng);
        const auto& comp = spec.noise.components[k];
        const double sh = sample_sigma(comp.scale, rng);
        const double g = gauss(rng);
        ds.y[i] = comp.theta * ds.X.row(i).dot(ds.teacher) + sh * g;
        ds.sigma[i] = s;
        ds.sigma_hat[i] = sh;
        ds.theta[i] = comp.theta;
        ds.cluster[i] = static_cast<int>(c);
        ds.noise_source[i] = static_cast<int>(k);
    }
    return ds;
}

struct ErmDiagnostics {
    long iterations = 0;
    double residual = 0.0;  // optimality residual of the returned estimator
    bool converged = true;
    bool min_norm = false;
    std::vector<double> objective;  // per IRLS iteration
    std::string note;
};

struct ErmResult {
    Eigen::VectorXd beta;
    double eps_est = 0.0;
    double eps_train = 0.0;
    double angle = 0.0;
    ErmDiagnostics diagnostics;
};

class ErmNotConverged : public NotConverged {
public:
    explicit ErmNotConverged(ErmResult partial)
        : NotConverged("IRLS did not reach the gradient tolerance", partial.diagnostics.iterations,
                       partial.diagnostics.residual),
          partial(std::move(partial)) {}
    ErmResult partial;
};

struct Metrics {
    double eps_est;
    double eps_train;
    double angle;
};

/** \brief eps_est = |beta - beta_star|^2 / d, mean rho of the residuals, angle / pi. */
inline Metrics empirical_metrics(const Dataset& ds, const Eigen::VectorXd& beta, const LossSpec& loss) {
    if (beta.size() != ds.d()) throw std::invalid_argument("estimator length must equal d");
    Metrics m{};
    m.eps_est = (beta - ds.teacher).squaredNorm() / static_cast<double>(ds.d());
    const Eigen::VectorXd r = ds.y - ds.X * beta;
    double acc = 0.0;
    for (long i = 0; i < r.size(); ++i) acc += rho(loss, r[i]);
    m.eps_train = acc / static_cast<double>(ds.n());
    const double nb = beta.norm(), nt = ds.teacher.norm();
    if (nb == 0.0 || nt == 0.0) {
        m.angle = std::numeric_limits<double>::quiet_NaN();
    } else {
        m.angle = std::acos(std::clamp(beta.dot(ds.teacher) / (nb * nt), -1.0, 1.0)) / std::numbers::pi;
    }
    return m;
}

namespace detail {

inline Eigen::MatrixXd weighted_gram(const Eigen::MatrixXd& X, const Eigen::VectorXd* w, double lambda) {
    const long d = X.cols();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(d, d);
    if (w) {
        const Eigen::MatrixXd Xw = w->cwiseSqrt().asDiagonal() * X;
        G.selfadjointView<Eigen::Lower>().rankUpdate(Xw.transpose());
    } else {
        G.selfadjointView<Eigen::Lower>().rankUpdate(X.transpose());
    }
    G.diagonal().array() += lambda;
    return G.selfadjointView<Eigen::Lower>();
}

inline bool rank_deficient(const Eigen::MatrixXd& qr) {
    const auto diag = qr.diagonal().cwiseAbs();
    return diag.minCoeff() <= diag.maxCoeff() * static_cast<double>(std::max(qr.rows(), qr.cols())) *
                                  std::numeric_limits<double>::epsilon();
}

// Preconditioned CG for (X^T W X + lambda I) x = b from x0; false when it needs more than max_iters.
inline bool pcg(const Eigen::MatrixXd& X, const Eigen::VectorXd& w, double lambda, const Eigen::VectorXd& b,
                const Eigen::LLT<Eigen::MatrixXd>& pre, const Eigen::VectorXd& x0, Eigen::VectorXd& x, int max_iters) {
    auto apply = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
        return X.transpose() * w.cwiseProduct(X * v) + lambda * v;
    };
    const double stop = 1e-13 * b.norm();
    x = x0;
    Eigen::VectorXd r = b - apply(x);
    if (r.norm() <= stop) return true;
    Eigen::VectorXd z = pre.solve(r), p = z;
    double rz = r.dot(z);
    for (int k = 0; k < max_iters; ++k) {
        const Eigen::VectorXd Ap = apply(p);
        const double step = rz / p.dot(Ap);
        x += step * p;
        r -= step * Ap;
        if (r.norm() <= stop) return true;
        z = pre.solve(r);
        const double rz_new = r.dot(z);
        p = z + (rz_new / rz) * p;
        rz = rz_new;
    }
    return false;
}

// rho(r + dr) - rho(r) without forming rho(r) itself, which is huge for gross outliers
inline double huber_rho_change(double r, double dr, double delta) {
    const double rn = r + dr;
    const bool in = std::abs(r) <= delta, in_n = std::abs(rn) <= delta;
    if (in && in_n) return dr * (r + 0.5 * dr);
    if (!in && !in_n && (r > 0) == (rn > 0)) return r > 0 ? delta * dr : -delta * dr;
    const LossSpec loss = LossSpec::huber(delta, 0.0);
    return rho(loss, rn) - rho(loss, r);
}

inline ErmResult finish(const Dataset& ds, Eigen::VectorXd beta, const LossSpec& loss, ErmDiagnostics diag) {
    ErmResult r;
    const auto m = empirical_metrics(ds, beta, loss);
    r.beta = std::move(beta);
    r.eps_est = m.eps_est;
    r.eps_train = m.eps_train;
    r.angle = m.angle;
    r.diagnostics = std::move(diag);
    return r;
}

}  // namespace detail

/** \brief Exact ridge estimator argmin |y - X beta|^2 / 2 + lambda |beta|^2 / 2.
 *  lambda = 0 with n < d returns the minimum-norm interpolator (flagged). */
inline ErmResult ridge_solve(const Dataset& ds, double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be >= 0");
    const auto& X = ds.X;
    const auto& y = ds.y;
    const long n = ds.n(), d = ds.d();
    ErmDiagnostics diag;
    Eigen::VectorXd beta;
    const Eigen::VectorXd Xty = X.transpose() * y;

    if (lambda == 0.0 && n >= d) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(X);
        if (detail::rank_deficient(qr.matrixQR())) throw SingularSystem("design matrix is rank deficient and lambda = 0");
        beta = qr.solve(y);
    } else if (lambda == 0.0) {
        // minimum norm: X^T = Q R, beta = Q R^{-T} y
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(X.transpose());
        if (detail::rank_deficient(qr.matrixQR())) {
            beta = X.completeOrthogonalDecomposition().solve(y);
        } else {
            Eigen::VectorXd z = Eigen::VectorXd::Zero(d);
            z.head(n) = qr.matrixQR().topLeftCorner(n, n).triangularView<Eigen::Upper>().transpose().solve(y);
            beta = qr.householderQ() * z;
        }
        diag.min_norm = true;
        diag.note = "lambda = 0 with n < d: minimum-norm interpolator";
    } else if (n >= d) {
        Eigen::LLT<Eigen::MatrixXd> llt(detail::weighted_gram(X, nullptr, lambda));
        beta = llt.solve(Xty);
    } else {
        // dual form: beta = X^T (X X^T + lambda I)^{-1} y
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
        K.selfadjointView<Eigen::Lower>().rankUpdate(X);
        K.diagonal().array() += lambda;
        Eigen::LLT<Eigen::MatrixXd> llt(K.selfadjointView<Eigen::Lower>());
        beta = X.transpose() * llt.solve(y);
    }

    if (diag.min_norm) {
        diag.residual = (X * beta - y).norm();
    } else {
        diag.residual = (X.transpose() * (X * beta) + lambda * beta - Xty).norm();
    }
    return detail::finish(ds, std::move(beta), LossSpec::square(lambda), std::move(diag));
}

struct HuberOptions {
    long max_iters = 500;
    double grad_tol = 1e-8;  // relative to 1 + |X^T y|_inf
    double lad_fraction = 1e-6;  // delta = lad_fraction * median|y| when delta = 0
    int cg_iters = 25;           // before refactorising
    Eigen::VectorXd warm_start;
};

inline double huber_objective(const Eigen::VectorXd& r, const Eigen::VectorXd& beta, const LossSpec& loss) {
    double acc = 0.0;
    for (long i = 0; i < r.size(); ++i) acc += rho(loss, r[i]);
    return acc + 0.5 * loss.lambda * beta.squaredNorm();
}

/** \brief Huber(delta) + ridge estimator by iteratively reweighted least squares
 *  with weights min(1, delta/|r_i|). delta = 0 is LAD, run as a tiny delta with ridge lambda*delta. */
inline ErmResult huber_solve(const Dataset& ds, double lambda, double delta, const HuberOptions& opt = {}) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be >= 0");
    if (!(delta >= 0.0)) throw std::invalid_argument("Huber delta must be >= 0");
    const auto& X = ds.X;
    const auto& y = ds.y;
    const long n = ds.n(), d = ds.d();
    if (lambda == 0.0 && n < d) throw SingularSystem("Huber with lambda = 0 needs n >= d");

    ErmDiagnostics diag;
    double lam = lambda;
    if (delta == 0.0) {
        std::vector<double> a(y.data(), y.data() + n);
        for (double& v : a) v = std::abs(v);
        std::nth_element(a.begin(), a.begin() + n / 2, a.end());
        delta = opt.lad_fraction * a[n / 2];
        if (!(delta > 0.0)) throw std::invalid_argument("LAD needs labels that are not all zero");
        lam = lambda * delta;
        diag.note = "LAD run as Huber(delta = " + std::to_string(delta) + ") with ridge lambda*delta";
    }
    if (std::isinf(delta)) return ridge_solve(ds, lambda);
    const LossSpec loss = LossSpec::huber(delta, lam);

    const Eigen::VectorXd Xty = X.transpose() * y;
    const double gtol = opt.grad_tol * (1.0 + Xty.cwiseAbs().maxCoeff());

    Eigen::VectorXd beta;
    if (opt.warm_start.size() == d) {
        beta = opt.warm_start;
    } else if (lam > 0.0 || n >= d) {
        Eigen::LLT<Eigen::MatrixXd> llt(detail::weighted_gram(X, nullptr, std::max(lam, 1e-12)));
        beta = llt.solve(Xty);
    } else {
        beta = Eigen::VectorXd::Zero(d);
    }

    Eigen::VectorXd r = y - X * beta, w(n), psi(n);
    std::optional<Eigen::LLT<Eigen::MatrixXd>> pre;
    double obj = huber_objective(r, beta, loss);
    diag.objective.push_back(obj);
    diag.converged = false;
    for (long it = 0;; ++it) {
        for (long i = 0; i < n; ++i) {
            psi[i] = std::clamp(r[i], -delta, delta);
            w[i] = std::abs(r[i]) <= delta ? 1.0 : delta / std::abs(r[i]);
        }
        const Eigen::VectorXd grad = lam * beta - X.transpose() * psi;
        diag.residual = grad.cwiseAbs().maxCoeff();
        diag.iterations = it;
        if (diag.residual < gtol) {
            diag.converged = true;
            break;
        }
        if (it >= opt.max_iters) break;

        // weighted normal equations; the last factorisation preconditions CG until the weights drift
        const Eigen::VectorXd b = X.transpose() * w.cwiseProduct(y);
        Eigen::VectorXd next;
        if (!pre || !detail::pcg(X, w, lam, b, *pre, beta, next, opt.cg_iters)) {
            pre.emplace(detail::weighted_gram(X, &w, lam));
            if (pre->info() != Eigen::Success) throw SingularSystem("IRLS system is not positive definite");
            next = pre->solve(b);
        }
        const Eigen::VectorXd dr = X * (beta - next);
        double change = 0.5 * lam * (next - beta).dot(next + beta);
        for (long i = 0; i < n; ++i) change += detail::huber_rho_change(r[i], dr[i], delta);
        // the majorised step cannot increase the objective; rounding can, by a hair
        if (change > 0.0) {
            diag.iterations = it + 1;
            diag.note += diag.note.empty() ? "" : "; ";
            diag.note += "IRLS stalled at rounding level";
            break;
        }
        beta = std::move(next);
        r = y - X * beta;
        obj += change;
        diag.objective.push_back(obj);
    }
    auto res = detail::finish(ds, std::move(beta), loss, std::move(diag));
    if (!res.diagnostics.converged) throw ErmNotConverged(std::move(res));
    return res;
}

/** \brief Loss-generic entry point used by the runners. */
inline ErmResult erm_solve(const Dataset& ds, const LossSpec& loss, const HuberOptions& opt = {}) {
    if (loss.is_square()) return ridge_solve(ds, loss.lambda);
    return huber_solve(ds, loss.lambda, loss.delta, opt);
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated dataset file");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64(std::ostream& os, double x) { put_u64(os, std::bit_cast<std::uint64_t>(x)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace detail

/** \brief Layout: u64 n, u64 d, u64 seed, then X row-major, y, teacher; all little-endian,
 *  reals as IEEE-754 binary64. */
inline void dump_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path);
    detail::put_u64(os, static_cast<std::uint64_t>(ds.n()));
    detail::put_u64(os, static_cast<std::uint64_t>(ds.d()));
    detail::put_u64(os, ds.seed);
    for (long i = 0; i < ds.n(); ++i)
        for (long j = 0; j < ds.d(); ++j) detail::put_f64(os, ds.X(i, j));
    for (long i = 0; i < ds.n(); ++i) detail::put_f64(os, ds.y[i]);
    for (long j = 0; j < ds.d(); ++j) detail::put_f64(os, ds.teacher[j]);
    if (!os) throw std::runtime_error("write failed for " + path);
}

/** Loaded datasets carry no per-row scales. */
inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    const auto n = static_cast<long>(detail::get_u64(is));
    const auto d = static_cast<long>(detail::get_u64(is));
    Dataset ds;
    ds.seed = detail::get_u64(is);
    if (n < 1 || d < 1 || n > (1L << 40) / d) throw std::runtime_error("bad dataset header in " + path);
    ds.X.resize(n, d);
    ds.y.resize(n);
    ds.teacher.resize(d);
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < d; ++j) ds.X(i, j) = detail::get_f64(is);
    for (long i = 0; i < n; ++i) ds.y[i] = detail::get_f64(is);
    for (long j = 0; j < d; ++j) ds.teacher[j] = detail::get_f64(is);
    return ds;
}

}  // namespace mest
