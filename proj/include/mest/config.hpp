#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "channel.hpp"
#include "errors.hpp"
#include "scale_mixture.hpp"

namespace mest {

enum class Mode { Solve, Sweep, Optimize, Simulate, Compare, Bayes, Rates };

inline std::string to_string(Mode m) {
    switch (m) {
        case Mode::Solve: return "solve";
        case Mode::Sweep: return "sweep";
        case Mode::Optimize: return "optimize";
        case Mode::Simulate: return "simulate";
        case Mode::Compare: return "compare";
        case Mode::Bayes: return "bayes";
        default: return "rates";
    }
}

struct ExperimentConfig {
    Mode mode = Mode::Solve;
    std::uint64_t seed = 1;
    int workers = 1;
    std::string out = "results.csv";

    // grid axes; single values are one-point grids
    std::vector<double> alpha{2.0}, lambda{0.0}, delta{1.0}, eps_c{0.0}, eps_n{0.0};
    bool covariate_contamination = false;  // eps_c given
    bool noise_contamination = false;      // eps_n given
    double beta_star_sq = 1.0;
    std::string covariates = "dirac(1)", covariates_tail = "pareto(0.5)";
    std::string noise = "dirac(1)", noise_tail = "inverse_gamma(1.1,0.1)";
    double outlier_fraction = 0.0, outlier_theta = 1.0;
    std::string loss = "square";

    double tol = 1e-9;
    long max_iters = 100000;
    double damping = 0.5;

    bool opt_lambda = true, opt_delta = false;
    double lambda_lo = 1e-6, lambda_hi = 1e2, delta_lo = 1e-4, delta_hi = 1e2;
    int grid_points = 25;

    long d = 1000;
    int seeds = 20;

    double window_lo = 0.0, window_hi = kInf;

    bool plot = false, strict = false, deterministic = false;
};

// ---- scale law expressions: dirac(1), pareto(0.5), inverse_gamma(a,b),
//      contaminated(eps, base, tail), discrete(s1:w1, s2:w2)

namespace detail {

class LawParser {
public:
    explicit LawParser(std::string s) : s_(std::move(s)) {}

    ScaleMixture parse() {
        auto law = expr();
        skip();
        if (i_ != s_.size()) fail("trailing characters");
        return law;
    }

private:
    void skip() {
        while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw std::invalid_argument("bad law '" + s_ + "': " + what);
    }
    void expect(char c) {
        skip();
        if (i_ >= s_.size() || s_[i_] != c) fail(std::string("expected '") + c + "'");
        ++i_;
    }
    bool peek(char c) {
        skip();
        return i_ < s_.size() && s_[i_] == c;
    }
    std::string ident() {
        skip();
        const auto start = i_;
        while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_')) ++i_;
        if (start == i_) fail("expected a law name");
        return s_.substr(start, i_ - start);
    }
    double number() {
        skip();
        const char* begin = s_.c_str() + i_;
        char* end = nullptr;
        const double v = std::strtod(begin, &end);
        if (end == begin) fail("expected a number");
        i_ += static_cast<std::size_t>(end - begin);
        return v;
    }
    ScaleMixture expr() {
        std::string name = ident();
        for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        expect('(');
        ScaleMixture out = ScaleMixture::dirac(1.0);
        if (name == "dirac") {
            out = ScaleMixture::dirac(number());
        } else if (name == "pareto") {
            out = ScaleMixture::pareto(number());
        } else if (name == "inverse_gamma" || name == "ig") {
            const double a = number();
            expect(',');
            out = ScaleMixture::inverse_gamma(a, number());
        } else if (name == "contaminated") {
            const double eps = number();
            expect(',');
            auto base = expr();
            expect(',');
            out = ScaleMixture::contaminated(eps, std::move(base), expr());
        } else if (name == "discrete") {
            std::vector<std::pair<double, double>> atoms;
            do {
                const double s = number();
                expect(':');
                atoms.emplace_back(s, number());
            } while (peek(',') && (++i_, true));
            out = ScaleMixture::discrete(std::move(atoms));
        } else {
            fail("unknown law '" + name + "'");
        }
        expect(')');
        return out;
    }

    std::string s_;
    std::size_t i_ = 0;
};

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    if (s == "inf" || s == "+inf") return kInf;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ConfigError(key, "expected a number, got '" + raw + "'");
    return v;
}

inline long parse_long(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size()) throw ConfigError(key, "expected an integer, got '" + raw + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + raw + "'");
}

}  // namespace detail

inline ScaleMixture parse_law(const std::string& s) { return detail::LawParser(s).parse(); }

/** \brief "2", "0.5, 1, 2", "log(1e3, 1e5, 11)" or "lin(0, 1, 5)". */
inline std::vector<double> parse_grid(const std::string& key, const std::string& raw) {
    const std::string s = detail::trim(raw);
    std::vector<double> out;
    const bool is_log = s.rfind("log(", 0) == 0, is_lin = s.rfind("lin(", 0) == 0;
    if (is_log || is_lin) {
        if (s.back() != ')') throw ConfigError(key, "unterminated range '" + raw + "'");
        std::stringstream ss(s.substr(4, s.size() - 5));
        std::string a, b, c;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, c))
            throw ConfigError(key, "range needs (lo, hi, points)");
        const double lo = detail::parse_double(key, a), hi = detail::parse_double(key, b);
        const long n = detail::parse_long(key, c);
        if (n < 1) throw ConfigError(key, "range needs at least one point");
        if (is_log && !(lo > 0.0 && hi > 0.0)) throw ConfigError(key, "log range needs positive bounds");
        for (long i = 0; i < n; ++i) {
            const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
            out.push_back(is_log ? lo * std::pow(hi / lo, t) : lo + (hi - lo) * t);
        }
        // exact endpoints
        out.front() = lo;
        out.back() = hi;
    } else {
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(detail::parse_double(key, item));
    }
    if (out.empty()) throw ConfigError(key, "grid is empty");
    return out;
}

inline Mode parse_mode(const std::string& raw) {
    const std::string s = detail::trim(raw);
    for (Mode m : {Mode::Solve, Mode::Sweep, Mode::Optimize, Mode::Simulate, Mode::Compare, Mode::Bayes, Mode::Rates})
        if (to_string(m) == s) return m;
    throw ConfigError("run.mode", "unknown mode '" + raw + "'");
}

/** \brief Apply one "section.key = value" setting. */
inline void apply_setting(ExperimentConfig& c, const std::string& full_key, const std::string& value) {
    using namespace detail;
    const std::string& k = full_key;
    auto grid = [&](std::vector<double>& dst) { dst = parse_grid(k, value); };
    auto law = [&](std::string& dst) {
        try {
            parse_law(value);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(k, e.what());
        }
        dst = trim(value);
    };
    if (k == "run.mode") c.mode = parse_mode(value);
    else if (k == "run.seed") c.seed = static_cast<std::uint64_t>(parse_long(k, value));
    else if (k == "run.workers") c.workers = static_cast<int>(parse_long(k, value));
    else if (k == "run.out") c.out = trim(value);
    else if (k == "problem.alpha") grid(c.alpha);
    else if (k == "problem.lambda") grid(c.lambda);
    else if (k == "problem.delta") grid(c.delta);
    else if (k == "problem.eps_c") {
        grid(c.eps_c);
        c.covariate_contamination = true;
    } else if (k == "problem.eps_n") {
        grid(c.eps_n);
        c.noise_contamination = true;
    } else if (k == "problem.beta_star_sq") c.beta_star_sq = parse_double(k, value);
    else if (k == "problem.covariates") law(c.covariates);
    else if (k == "problem.covariates_tail") law(c.covariates_tail);
    else if (k == "problem.noise") law(c.noise);
    else if (k == "problem.noise_tail") law(c.noise_tail);
    else if (k == "problem.outlier_fraction") c.outlier_fraction = parse_double(k, value);
    else if (k == "problem.outlier_theta") c.outlier_theta = parse_double(k, value);
    else if (k == "problem.loss") {
        const std::string s = trim(value);
        if (s != "square" && s != "huber" && s != "lad") throw ConfigError(k, "loss must be square, huber or lad");
        c.loss = s;
    } else if (k == "solver.tol") c.tol = parse_double(k, value);
    else if (k == "solver.max_iters") c.max_iters = parse_long(k, value);
    else if (k == "solver.damping") c.damping = parse_double(k, value);
    else if (k == "optimize.free") {
        std::stringstream ss(value);
        std::string item;
        c.opt_lambda = c.opt_delta = false;
        while (std::getline(ss, item, ',')) {
            const std::string t = trim(item);
            if (t == "lambda") c.opt_lambda = true;
            else if (t == "delta") c.opt_delta = true;
            else throw ConfigError(k, "free parameters are lambda and/or delta");
        }
    } else if (k == "optimize.lambda_lo") c.lambda_lo = parse_double(k, value);
    else if (k == "optimize.lambda_hi") c.lambda_hi = parse_double(k, value);
    else if (k == "optimize.delta_lo") c.delta_lo = parse_double(k, value);
    else if (k == "optimize.delta_hi") c.delta_hi = parse_double(k, value);
    else if (k == "optimize.grid_points") c.grid_points = static_cast<int>(parse_long(k, value));
    else if (k == "simulate.d") c.d = parse_long(k, value);
    else if (k == "simulate.seeds") c.seeds = static_cast<int>(parse_long(k, value));
    else if (k == "rates.window_lo") c.window_lo = parse_double(k, value);
    else if (k == "rates.window_hi") c.window_hi = parse_double(k, value);
    else throw ConfigError(k, "unknown key");
}

/** \brief Cross-field checks; messages name the offending key. */
inline void validate(const ExperimentConfig& c) {
    auto each = [](const std::vector<double>& g, const char* key, auto pred, const char* msg) {
        for (double x : g)
            if (!pred(x)) throw ConfigError(key, msg);
    };
    const bool bayes = c.mode == Mode::Bayes;
    each(c.alpha, "problem.alpha", [&](double a) { return bayes ? a >= 0.0 : a > 0.0; }, "alpha must be > 0");
    each(c.lambda, "problem.lambda", [](double l) { return l >= 0.0; }, "lambda must be >= 0");
    each(c.delta, "problem.delta", [](double d) { return d >= 0.0; }, "delta must be >= 0");
    each(c.eps_c, "problem.eps_c", [](double e) { return e >= 0.0 && e <= 1.0; }, "eps_c must lie in [0, 1]");
    each(c.eps_n, "problem.eps_n", [](double e) { return e >= 0.0 && e <= 1.0; }, "eps_n must lie in [0, 1]");
    if (!(c.beta_star_sq > 0.0)) throw ConfigError("problem.beta_star_sq", "must be > 0");
    if (!(c.outlier_fraction >= 0.0 && c.outlier_fraction <= 1.0))
        throw ConfigError("problem.outlier_fraction", "must lie in [0, 1]");
    if (c.workers < 1) throw ConfigError("run.workers", "must be >= 1");
    if (c.out.empty()) throw ConfigError("run.out", "output path is empty");
    if (!(c.tol > 0.0)) throw ConfigError("solver.tol", "must be > 0");
    if (c.max_iters < 1) throw ConfigError("solver.max_iters", "must be >= 1");
    if (!(c.damping > 0.0 && c.damping <= 1.0)) throw ConfigError("solver.damping", "must lie in (0, 1]");
    if (c.mode == Mode::Solve) {
        for (auto [g, key] : {std::pair{&c.alpha, "problem.alpha"}, {&c.lambda, "problem.lambda"},
                              {&c.delta, "problem.delta"}, {&c.eps_c, "problem.eps_c"}, {&c.eps_n, "problem.eps_n"}})
            if (g->size() != 1) throw ConfigError(key, "solve mode takes single values; use sweep for grids");
    }
    if (c.mode == Mode::Optimize) {
        if (!c.opt_lambda && !c.opt_delta) throw ConfigError("optimize.free", "name lambda and/or delta");
        if (c.opt_delta && c.loss != "huber") throw ConfigError("optimize.free", "delta is free but the loss is not huber");
        if (!(c.lambda_lo > 0.0 && c.lambda_hi > c.lambda_lo))
            throw ConfigError("optimize.lambda_lo", "bounds must satisfy 0 < lo < hi");
        if (!(c.delta_lo > 0.0 && c.delta_hi > c.delta_lo))
            throw ConfigError("optimize.delta_lo", "bounds must satisfy 0 < lo < hi");
        if (c.grid_points < 3) throw ConfigError("optimize.grid_points", "must be >= 3");
    }
    if (c.mode == Mode::Simulate || c.mode == Mode::Compare) {
        if (c.d < 1) throw ConfigError("simulate.d", "must be >= 1");
        if (c.seeds < 1) throw ConfigError("simulate.seeds", "must be >= 1");
    }
    if (c.mode == Mode::Rates && c.alpha.size() < 5) throw ConfigError("problem.alpha", "rates mode needs >= 5 alpha values");
}

/** \brief Read an INI file ([run], [problem], [solver], [optimize], [simulate], [rates]). */
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    ExperimentConfig c;
    boost::property_tree::ptree pt;
    try {
        boost::property_tree::ini_parser::read_ini(path, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("", "cannot read config: " + std::string(e.what()));
    }
    for (const auto& [section, body] : pt) {
        if (body.empty()) throw ConfigError(section, "keys must live in a section");
        for (const auto& [key, value] : body) apply_setting(c, section + "." + key, value.data());
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError(o, "override must look like section.key=value");
        apply_setting(c, detail::trim(o.substr(0, eq)), o.substr(eq + 1));
    }
    validate(c);
    return c;
}

}  // namespace mest
