#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mest/bayes_optimal.hpp"
#include "mest/config.hpp"
#include "mest/optimize.hpp"
#include "mest/runner.hpp"

using namespace mest;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "mest_test_cli";
    fs::create_directories(dir);
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    os << text;
}

// rows of the CSV as column -> text maps, comment lines dropped
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
    std::ifstream is(p);
    std::string line;
    std::vector<std::string> header;
    std::vector<std::map<std::string, std::string>> rows;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        if (header.empty()) {
            header = cells;
            continue;
        }
        REQUIRE(cells.size() == header.size());
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < cells.size(); ++i) row[header[i]] = cells[i];
        rows.push_back(row);
    }
    return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& key) {
    return std::strtod(row.at(key).c_str(), nullptr);
}

int run_cli(const std::string& args) {
    const char* exe = std::getenv("MEST_CLI");
    if (!exe) FAIL("MEST_CLI is not set");
    const std::string cmd = std::string(exe) + " " + args + " 2>" + scratch("stderr.txt").string();
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

ExperimentConfig config_of(const std::string& text, const std::vector<std::string>& sets = {}) {
    const auto p = scratch("cfg.ini");
    write_file(p, text);
    return load_config(p.string(), sets);
}

ProblemSpec gaussian(double alpha, double lambda = 1.0) {
    return ProblemSpec::single(alpha, ScaleMixture::dirac(1.0), NoiseModel::gaussian(1.0), LossSpec::square(lambda));
}

NoiseModel label_contamination(double eps_n) {
    return NoiseModel::single(
        ScaleMixture::contaminated(eps_n, ScaleMixture::dirac(1.0), ScaleMixture::inverse_gamma(1.1, 0.1)));
}

}  // namespace

TEST_CASE("law expressions parse and print back", "[config]") {
    for (std::string s : {"dirac(1)", "pareto(0.5)", "inverse_gamma(1.1,0.1)",
                          "contaminated(0.25,dirac(1),pareto(0.8))", "discrete(0.5:0.25,2:0.75)"}) {
        const auto law = parse_law(s);
        CHECK(parse_law(law.describe()).describe() == law.describe());
    }
    CHECK(parse_law(" ig( 3 , 4 ) ").describe() == "inverse_gamma(3,4)");
    CHECK(moment(parse_law("dirac(2)"), 2) == 4.0);
    CHECK_THROWS_AS(parse_law("pareto(0.5"), std::invalid_argument);
    CHECK_THROWS_AS(parse_law("cauchy(1)"), std::invalid_argument);
    CHECK_THROWS_AS(parse_law("dirac(1) x"), std::invalid_argument);
}

TEST_CASE("grids: lists and ranges", "[config]") {
    CHECK(parse_grid("k", "2") == std::vector<double>{2.0});
    CHECK(parse_grid("k", "0.5, 1,2") == std::vector<double>{0.5, 1.0, 2.0});
    const auto g = parse_grid("k", "log(1e3, 1e5, 5)");
    REQUIRE(g.size() == 5);
    CHECK(g.front() == 1e3);
    CHECK(g.back() == 1e5);
    CHECK(g[2] == Catch::Approx(1e4).epsilon(1e-14));
    CHECK(parse_grid("k", "lin(0, 1, 5)") == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
    CHECK(parse_grid("k", "inf")[0] == kInf);
    CHECK_THROWS_AS(parse_grid("k", "log(0, 1, 3)"), ConfigError);
    CHECK_THROWS_AS(parse_grid("k", "1, x"), ConfigError);
}

TEST_CASE("config errors name the key", "[config]") {
    auto key_of = [](auto&& f) {
        try {
            f();
        } catch (const ConfigError& e) {
            return e.key;
        }
        return std::string("<none>");
    };
    CHECK(key_of([] { config_of("[problem]\nalhpa = 2\n"); }) == "problem.alhpa");
    CHECK(key_of([] { config_of("[problem]\nalpha = two\n"); }) == "problem.alpha");
    CHECK(key_of([] { config_of("[problem]\nalpha = -1\n"); }) == "problem.alpha");
    CHECK(key_of([] { config_of("[run]\nmode = fit\n"); }) == "run.mode");
    CHECK(key_of([] { config_of("[problem]\nalpha = 1, 2\n"); }) == "problem.alpha");  // solve needs one point
    CHECK(key_of([] { config_of("[problem]\nnoise = gauss(1)\n"); }) == "problem.noise");
    CHECK(key_of([] { config_of("[run]\nmode = optimize\n[optimize]\nfree = delta\n"); }) == "optimize.free");
    CHECK(key_of([] { config_of("[run]\nmode = optimize\n[optimize]\nlambda_lo = 0\n"); }) ==
          "optimize.lambda_lo");
    CHECK(key_of([] { config_of("[run]\nmode = rates\n[problem]\nalpha = 1, 2, 3\n"); }) == "problem.alpha");
    CHECK(key_of([] { config_of("[run]\nworkers = 0\n"); }) == "run.workers");
    CHECK(key_of([] { config_of("", {"problem.lambda"}); }) == "problem.lambda");
}

TEST_CASE("config file with overrides", "[config]") {
    const auto c = config_of(
        "[run]\nmode = sweep\nseed = 7\n[problem]\nalpha = log(1, 10, 3)\nloss = huber\ndelta = 0.5\n"
        "eps_n = 0, 0.5\nnoise_tail = ig(0.8, 1)\n[solver]\ntol = 1e-10\n",
        {"problem.lambda=0.1", "run.workers=3"});
    CHECK(c.mode == Mode::Sweep);
    CHECK(c.seed == 7);
    CHECK(c.alpha.size() == 3);
    CHECK(c.loss == "huber");
    CHECK(c.lambda == std::vector<double>{0.1});
    CHECK(c.workers == 3);
    CHECK(c.noise_contamination);
    CHECK_FALSE(c.covariate_contamination);
    CHECK(c.tol == 1e-10);
    CHECK(noise_model(c, 0.5).second_moment() == kInf);
}

TEST_CASE("doubles serialise exactly", "[runner]") {
    for (double x : {0.1, 1.0 / 3.0, 1e-300, 2.5e17, -7.0, 0.0})
        CHECK(std::strtod(format_double(x).c_str(), nullptr) == x);
    CHECK(format_double(kInf) == "inf");
    CHECK(format_double(-kInf) == "-inf");
    CHECK(format_double(kNaN) == "nan");
    CHECK(format_double(2.0) == "2");
}

TEST_CASE("optimizer: tuned ridge reaches the Bayes-optimal error", "[optimize]") {
    OptimizeConfig oc;  // lambda free in [1e-6, 1e2], square loss
    for (double alpha : {0.5, 2.0}) {
        const auto res = optimize_hyperparams(gaussian(alpha), oc);
        const auto bo = solve_bo(alpha, 1.0, ScaleMixture::dirac(1.0), NoiseModel::gaussian(1.0));
        CHECK(std::abs(res.best.eps_est - bo.eps_bo) < 1e-5);
        // the analytic optimum for Gaussian data is lambda = noise variance / signal
        CHECK(res.best.lambda == Catch::Approx(1.0).epsilon(1e-3));
        for (const auto& p : res.landscape) CHECK(res.best.eps_est <= p.eps_est);
    }
}

TEST_CASE("optimizer: without contamination delta runs to its upper bound", "[optimize]") {
    // lambda tuned jointly; at a fixed small lambda the delta = O(lambda) branch can win even here
    OptimizeConfig oc;
    oc.delta = {true, 1.0, 1e-4, 1e2};
    oc.grid_points = 13;
    auto spec = gaussian(2.0);
    spec.loss = LossSpec::huber(1.0, 1.0);
    const auto res = optimize_hyperparams(spec, oc);
    // profile: lambda re-optimised at each delta
    std::map<double, double> profile;
    for (double d : {1e-4, 1e-2, 0.3, 1.0, 3.0, 1e2}) {
        OptimizeConfig one;
        one.delta = {false, d};
        profile[d] = optimize_hyperparams(spec, one).best.eps_est;
    }
    double prev = kInf;
    for (auto [d, e] : profile) {
        CHECK(e <= prev * (1 + 1e-9));
        prev = e;
    }
    // delta* sits on the square-loss plateau that reaches the upper bound
    const auto bo = solve_bo(2.0, 1.0, ScaleMixture::dirac(1.0), NoiseModel::gaussian(1.0));
    CHECK(std::abs(res.best.eps_est - profile.rbegin()->second) < 1e-6);
    CHECK(std::abs(res.best.eps_est - bo.eps_bo) < 1e-5);
    CHECK(res.best.delta > 3.0);

    auto fixed = oc;
    fixed.lambda = {false, 1e-3};
    spec.loss = LossSpec::huber(1.0, 1e-3);
    const auto small = optimize_hyperparams(spec, fixed);
    CHECK(small.best.delta < 1e-2);
}

TEST_CASE("optimizer: two minima in delta and a jump of delta*", "[optimize]") {
    OptimizeConfig oc;
    oc.lambda = {false, 1e-3};
    oc.delta = {true, 1.0, 1e-4, 1e2};
    std::vector<double> best;
    std::size_t most = 0;
    for (double alpha : {0.5, 2.0, 5.0, 10.0, 20.0}) {
        const auto spec = ProblemSpec::single(alpha, ScaleMixture::dirac(1.0), label_contamination(0.5),
                                              LossSpec::huber(1.0, 1e-3));
        const auto res = optimize_hyperparams(spec, oc);
        most = std::max(most, delta_local_minima(res.landscape, 1e-3).size());
        best.push_back(res.best.delta);
        INFO("alpha " << alpha << " delta* " << res.best.delta);
        CHECK(res.local_minima.front().eps_est == res.best.eps_est);
    }
    CHECK(most >= 2);
    double jump = 0.0;
    for (std::size_t k = 1; k < best.size(); ++k) jump = std::max(jump, std::abs(std::log10(best[k] / best[k - 1])));
    CHECK(jump > 1.0);
    // small alpha prefers delta = O(lambda), large alpha delta = O(1)
    CHECK(best.front() < 1e-2);
    CHECK(best.back() > 1e-1);
}

TEST_CASE("optimizer ties favour smaller delta, then smaller lambda", "[optimize]") {
    LandscapePoint a{1.0, 0.5, 0.3, true, {}}, b{1.0, 2.0, 0.3, true, {}}, c{0.5, 0.5, 0.3, true, {}};
    CHECK(detail::better(a, b));
    CHECK_FALSE(detail::better(b, a));
    CHECK(detail::better(c, a));
    LandscapePoint failed{1.0, 0.1, kNaN, false, {}};
    CHECK(detail::better(b, failed));
    CHECK_FALSE(detail::better(failed, b));
}

TEST_CASE("cli: solve and bayes examples", "[cli]") {
    const auto out = scratch("solve.csv");
    write_file(scratch("solve.ini"), "[run]\nmode = solve\n[problem]\nalpha = 2\nlambda = 1e-10\n");
    REQUIRE(run_cli("run " + scratch("solve.ini").string() + " --deterministic --out " + out.string()) == 0);
    const auto text = slurp(out);
    CHECK(text.rfind(std::string(kCsvHeader) + "\n", 0) == 0);
    const auto rows = read_csv(out);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].at("source") == "theory");
    CHECK(rows[0].at("converged") == "1");
    CHECK(rows[0].at("delta") == "inf");
    CHECK(rows[0].at("eps_bo") == "nan");
    CHECK(num(rows[0], "eps_est") == Catch::Approx(1.0).epsilon(1e-8));

    write_file(scratch("bayes.ini"), "[run]\nmode = bayes\n[problem]\nalpha = 0, 1\nbeta_star_sq = 2\n");
    const auto bout = scratch("bayes.csv");
    REQUIRE(run_cli("run " + scratch("bayes.ini").string() + " --deterministic --out " + bout.string()) == 0);
    const auto brows = read_csv(bout);
    REQUIRE(brows.size() == 2);
    CHECK(num(brows[0], "alpha") == 0.0);
    CHECK(num(brows[0], "eps_bo") == 2.0);
    CHECK(brows[0].at("source") == "bayes");
    CHECK(num(brows[1], "eps_bo") < 2.0);
}

TEST_CASE("cli: compare mode agrees within 3 SE", "[cli]") {
    write_file(scratch("cmp.ini"),
               "[run]\nmode = compare\nseed = 11\n[problem]\nalpha = 2\nlambda = 1e-10\n"
               "[simulate]\nd = 1000\nseeds = 20\n");
    const auto out = scratch("cmp.csv");
    REQUIRE(run_cli("run " + scratch("cmp.ini").string() + " --deterministic --out " + out.string()) == 0);
    const auto rows = read_csv(out);
    int sims = 0, theory = 0;
    std::set<std::string> seeds;
    for (const auto& r : rows) {
        if (r.at("source") == "simulation") {
            ++sims;
            seeds.insert(r.at("seed"));
        }
        if (r.at("source") == "theory") ++theory;
    }
    CHECK(sims == 20);
    CHECK(seeds.size() == 20);
    CHECK(theory == 1);
    const auto cmp = read_csv(scratch("cmp.compare.csv"));
    REQUIRE(cmp.size() == 1);
    CHECK(cmp[0].at("within_3se") == "1");
    CHECK(num(cmp[0], "seeds") == 20);
}

TEST_CASE("cli: reruns are byte-identical and worker count does not matter", "[cli]") {
    const std::string cfg =
        "[run]\nmode = sweep\nseed = 3\n[problem]\nalpha = 0.5, 1, 2, 4\nlambda = 1e-3, 1e-1\nloss = huber\n"
        "delta = 0.5, 2\neps_n = 0, 0.5\n";
    write_file(scratch("sweep.ini"), cfg);
    const auto ini = scratch("sweep.ini").string();
    auto once = [&](const std::string& name, const std::string& extra) {
        REQUIRE(run_cli("run " + ini + " --deterministic --out " + scratch(name).string() + extra) == 0);
        return slurp(scratch(name));
    };
    const auto a = once("s1.csv", " --workers 1");
    const auto b = once("s2.csv", " --workers 1");
    const auto c = once("s3.csv", " --workers 3");
    CHECK(a == b);
    CHECK(a == c);
    const auto rows = read_csv(scratch("s1.csv"));
    CHECK(rows.size() == 4 * 2 * 2 * 2);

    // simulations too
    write_file(scratch("sim.ini"), "[run]\nmode = simulate\nseed = 5\n[problem]\nalpha = 0.5, 2\nloss = huber\n"
                                   "lambda = 0.01\ndelta = 1\n[simulate]\nd = 200\nseeds = 4\n");
    const auto sini = scratch("sim.ini").string();
    REQUIRE(run_cli("run " + sini + " --deterministic --workers 1 --out " + scratch("m1.csv").string()) == 0);
    REQUIRE(run_cli("run " + sini + " --deterministic --workers 4 --out " + scratch("m2.csv").string()) == 0);
    CHECK(slurp(scratch("m1.csv")) == slurp(scratch("m2.csv")));
    CHECK(read_csv(scratch("m1.csv")).size() == 8);

    // without --deterministic a timestamp comment leads the file
    REQUIRE(run_cli("run " + ini + " --out " + scratch("s4.csv").string()) == 0);
    const auto d = slurp(scratch("s4.csv"));
    CHECK(d.rfind("# ", 0) == 0);
    CHECK(d.substr(d.find('\n') + 1) == a);
}

TEST_CASE("cli: theory rows satisfy the estimation error identity", "[cli]") {
    for (std::string loss : {"square", "huber", "lad"}) {
        write_file(scratch("id.ini"), "[run]\nmode = sweep\n[problem]\nalpha = log(0.3, 30, 6)\nlambda = 1e-2, 1\n"
                                      "delta = 0.3\nbeta_star_sq = 1.7\nloss = " +
                                          loss + "\ncovariates = inverse_gamma(3, 2)\n");
        const auto out = scratch("id.csv");
        REQUIRE(run_cli("run " + scratch("id.ini").string() + " --deterministic --out " + out.string()) == 0);
        const auto rows = read_csv(out);
        CHECK(rows.size() == 12);
        for (const auto& r : rows) {
            CHECK(r.at("converged") == "1");
            CHECK(std::abs(num(r, "eps_est") - (1.7 - 2 * num(r, "m") + num(r, "q"))) < 1e-10);
        }
        if (loss == "lad") CHECK(num(rows[0], "delta") == 0.0);
    }
}

TEST_CASE("cli: optimize and rates side files", "[cli]") {
    write_file(scratch("opt.ini"), "[run]\nmode = optimize\n[problem]\nalpha = 1, 3\nloss = huber\nlambda = 1e-3\n"
                                   "eps_n = 0.5\n[optimize]\nfree = delta\ngrid_points = 13\n");
    const auto out = scratch("opt.csv");
    REQUIRE(run_cli("run " + scratch("opt.ini").string() + " --deterministic --plot --out " + out.string()) == 0);
    CHECK(read_csv(out).size() == 2);
    const auto land = read_csv(scratch("opt.landscape.csv"));
    int grid = 0;
    for (const auto& r : land) grid += r.at("kind") == "grid";
    CHECK(grid == 2 * 13);
    CHECK(fs::exists(scratch("opt.svg")));
    CHECK(fs::exists(scratch("opt.delta.svg")));

    write_file(scratch("rates.ini"), "[run]\nmode = rates\n[problem]\nalpha = log(1e3, 1e5, 9)\n"
                                     "covariates = pareto(0.8)\n");
    const auto rout = scratch("rates.csv");
    REQUIRE(run_cli("run " + scratch("rates.ini").string() + " --deterministic --out " + rout.string()) == 0);
    const auto rates = read_csv(scratch("rates.rates.csv"));
    REQUIRE(rates.size() == 1);
    CHECK(rates[0].at("regime") == "infinite_variance");
    CHECK(num(rates[0], "predicted_exponent") == -1.25);
    CHECK(std::abs(num(rates[0], "fitted_slope") + 1.25) < 0.05);
}

TEST_CASE("cli: exit codes", "[cli]") {
    write_file(scratch("bad.ini"), "[problem]\nalhpa = 2\n");
    CHECK(run_cli("run " + scratch("bad.ini").string()) == 2);
    CHECK(slurp(scratch("stderr.txt")).find("problem.alhpa") != std::string::npos);
    CHECK(run_cli("run " + scratch("bad.ini").string() + " --set problem.alpha=1") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("run /nonexistent/config.ini") == 2);

    // one iteration cannot converge: rows flushed with converged = 0, exit 3 only under --strict
    write_file(scratch("slow.ini"), "[run]\nmode = sweep\n[problem]\nalpha = 1, 2\nloss = huber\nlambda = 0.1\n"
                                    "[solver]\nmax_iters = 1\n");
    const auto out = scratch("slow.csv");
    CHECK(run_cli("run " + scratch("slow.ini").string() + " --deterministic --out " + out.string()) == 0);
    auto rows = read_csv(out);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) CHECK(r.at("converged") == "0");
    fs::remove(out);
    CHECK(run_cli("run " + scratch("slow.ini").string() + " --strict --deterministic --out " + out.string()) == 3);
    CHECK(fs::exists(out));
    CHECK(slurp(out).rfind(std::string(kCsvHeader), 0) == 0);
}
