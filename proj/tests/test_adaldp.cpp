#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedcctr/adaldp.hpp"

using namespace fedcctr;
using namespace fedcctr::dp;

namespace {

// Independent direct-formula oracle (naive ln/exp, no stabilized primitives).
double rdp_cost_oracle(double zeta, double theta, double sigma, double rho, bool maintext) {
    const double base = maintext ? theta * theta / (sigma * sigma) : 2.0 * zeta * theta * theta / (sigma * sigma);
    if (rho == 0.0) return 0.0;
    return std::log(1.0 + rho * rho * (std::exp((zeta - 1.0) * base) - 1.0)) / (zeta - 1.0);
}

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

// --- clipping ----------------------------------------------------------------

TEST_CASE("clip scales a norm-3 vector to norm 1") {
    std::vector<double> g = {3.0, 0.0, 0.0};
    auto c = clip_gradient(g, 1.0);
    CHECK(std::fabs(norm2(c) - 1.0) < 1e-12);
    CHECK(c[0] == doctest::Approx(1.0));
}

TEST_CASE("clip leaves in-norm and zero gradients unchanged") {
    std::vector<double> g = {0.3, -0.4};  // norm 0.5
    auto c = clip_gradient(g, 1.0);
    CHECK(c == g);
    std::vector<double> z = {0.0, 0.0, 0.0};
    CHECK(clip_gradient(z, 1.0) == z);
}

TEST_CASE("clipping is idempotent and always bounds the norm") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> g(8);
        for (double& v : g) v = rng.gaussian() * 5.0;
        const double theta = 0.1 + rng.uniform() * 3.0;
        auto c1 = clip_gradient(g, theta);
        CHECK(norm2(c1) <= theta * (1.0 + 1e-12));
        auto c2 = clip_gradient(c1, theta);
        CHECK(c1 == c2);
    }
}

// --- noise --------------------------------------------------------------------

TEST_CASE("sigma zero noise is the exact identity") {
    std::vector<double> g = {1.5, -2.5, 0.125};
    Rng rng(1);
    CHECK(add_noise(g, 0.0, rng) == g);
}

TEST_CASE("noise sample statistics match the target moments") {
    const int n = 100000;
    const double sigma = 0.7, center = 1.25;
    Rng rng(42);
    double sum = 0.0, sumsq = 0.0;
    std::vector<double> g = {center};
    for (int i = 0; i < n; ++i) {
        const double v = add_noise(g, sigma, rng)[0];
        sum += v;
        sumsq += (v - center) * (v - center);
    }
    const double mean = sum / n;
    const double var = sumsq / n;
    CHECK(std::fabs(mean - center) < 3.0 * sigma / std::sqrt(double(n)));
    CHECK(std::fabs(var - sigma * sigma) < 0.05 * sigma * sigma);
}

TEST_CASE("seeded noise is reproducible") {
    std::vector<double> g = {0.1, 0.2, 0.3, 0.4};
    Rng r1(7), r2(7);
    CHECK(add_noise(g, 1.3, r1) == add_noise(g, 1.3, r2));
}

// --- sigma schedule -------------------------------------------------------------

TEST_CASE("sigma decays by R per round") {
    auto s = PrivacyState::make(1.0, 1e-5, 2.0, 0.5, 2.0, 0.997, 0.01);
    decay_sigma(s);
    CHECK(s.sigma == doctest::Approx(1.994).epsilon(1e-12));
    CHECK(s.round == 1);

    auto c = PrivacyState::make(1.0, 1e-5, 2.0, 0.5, 2.0, 1.0, 0.01);
    for (int i = 0; i < 10; ++i) decay_sigma(c);
    CHECK(c.sigma == 2.0);
}

TEST_CASE("sigma schedule matches the closed form after many rounds") {
    auto s = PrivacyState::make(1.0, 1e-5, 2.0, 0.5, 2.0, 0.997, 0.01);
    for (int i = 0; i < 10000; ++i) decay_sigma(s);
    const double closed = 2.0 * std::pow(0.997, 10000);
    CHECK(std::fabs(s.sigma - closed) < 1e-12);
}

// --- RDP accounting --------------------------------------------------------------

TEST_CASE("rdp cost boundary identities") {
    CHECK(rdp_cost(2.0, 0.5, 1.0, 0.0) == 0.0);
    CHECK(rdp_cost_maintext(2.0, 0.5, 1.0, 0.0) == 0.0);
    // rho = 1: amplification vanishes algebraically
    CHECK(rdp_cost(2.0, 0.5, 1.0, 1.0) == gaussian_mechanism_rdp(2.0, 0.5, 1.0));
    CHECK(rdp_cost(3.0, 0.7, 1.3, 1.0) == gaussian_mechanism_rdp(3.0, 0.7, 1.3));
    CHECK(rdp_cost_maintext(2.0, 0.5, 1.0, 1.0) == 0.25);
}

TEST_CASE("appendix cost at the worked example") {
    CHECK(gaussian_mechanism_rdp(2.0, 0.5, 1.0) == 1.0);
    // frozen from the direct-evaluation oracle: ln(1 + 1e-4 (e - 1))
    CHECK(rdp_cost(2.0, 0.5, 1.0, 0.01) == doctest::Approx(1.7181342207464448e-4).epsilon(1e-12));
}

TEST_CASE("main-text cost at the worked example") {
    // frozen from the direct-evaluation oracle: ln(1 + 1e-4 (e^0.25 - 1))
    const double v = rdp_cost_maintext(2.0, 0.5, 1.0, 0.01);
    CHECK(v == doctest::Approx(2.8402138324254547e-5).epsilon(1e-12));
}

TEST_CASE("both formulas match the naive oracle on a grid") {
    const double zetas[] = {1.5, 2.0, 4.0, 8.0, 16.0};
    const double thetas[] = {0.1, 0.5, 1.0};
    const double sigmas[] = {0.5, 1.0, 2.0};
    const double rhos[] = {0.001, 0.01, 0.1, 0.5};
    for (double z : zetas)
        for (double th : thetas)
            for (double s : sigmas)
                for (double r : rhos) {
                    // stay inside the region where the naive oracle is evaluable
                    if ((z - 1.0) * 2.0 * z * th * th / (s * s) > 700.0) continue;
                    CHECK(std::fabs(rdp_cost(z, th, s, r) - rdp_cost_oracle(z, th, s, r, false)) < 1e-12);
                    CHECK(std::fabs(rdp_cost_maintext(z, th, s, r) - rdp_cost_oracle(z, th, s, r, true)) < 1e-12);
                }
}

TEST_CASE("main-text cost is below the appendix cost whenever 2*zeta > 1") {
    for (double z : {1.5, 2.0, 3.0, 8.0})
        for (double th : {0.25, 0.5, 1.0})
            for (double s : {0.7, 1.0, 2.0})
                for (double r : {0.01, 0.1, 0.9}) CHECK(rdp_cost_maintext(z, th, s, r) < rdp_cost(z, th, s, r));
}

TEST_CASE("rdp cost is monotone in rho and zeta, antitone in sigma") {
    const double zetas[] = {1.5, 2.0, 3.0, 6.0, 12.0};
    const double rhos[] = {0.001, 0.01, 0.05, 0.2, 0.8};
    const double sigmas[] = {0.5, 0.8, 1.3, 2.1};
    for (double z : zetas)
        for (double s : sigmas)
            for (size_t i = 0; i + 1 < 5; ++i)
                CHECK(rdp_cost(z, 0.5, s, rhos[i]) < rdp_cost(z, 0.5, s, rhos[i + 1]));
    for (double r : rhos)
        for (double s : sigmas)
            for (size_t i = 0; i + 1 < 5; ++i)
                CHECK(rdp_cost(zetas[i], 0.5, s, r) < rdp_cost(zetas[i + 1], 0.5, s, r));
    for (double z : zetas)
        for (double r : rhos)
            for (size_t i = 0; i + 1 < 4; ++i)
                CHECK(rdp_cost(z, 0.5, sigmas[i], r) > rdp_cost(z, 0.5, sigmas[i + 1], r));
}

TEST_CASE("large exponents fall back to log space instead of overflowing") {
    // (zeta-1) * eGM = 2*2*100/0.0001 >> 700
    const double v = rdp_cost(2.0, 10.0, 0.01, 0.1);
    CHECK(std::isfinite(v));
    const double x = 2.0 * 2.0 * 100.0 / 0.0001;
    CHECK(v == doctest::Approx((x + 2.0 * std::log(0.1)) / 1.0).epsilon(1e-12));
}

// --- RDP -> (eps, delta) conversion ----------------------------------------------

TEST_CASE("conversion identities") {
    CHECK(convert_rdp_to_dp(0.75, 3.0, 1.0) == 0.75);
    CHECK(convert_rdp_to_dp(1.0, 2.0, std::exp(-10.0)) == 11.0);
    CHECK(convert_rdp_to_dp(0.5, 2.0, 1e-5) == doctest::Approx(12.012925464970229).epsilon(1e-12));
}

// --- adaldp_step ------------------------------------------------------------------

TEST_CASE("unlimited budget with zero noise and infinite threshold passes the gradient through") {
    auto s = PrivacyState::make(kInf, 1e-5, 2.0, 1.0, 0.0, 0.997, 1.0);
    s.theta = kInf;
    Rng rng(3);
    std::vector<double> g = {0.5, -1.5, 2.5};
    auto res = adaldp_step(g, s, rng);
    REQUIRE(std::holds_alternative<std::vector<double>>(res));
    CHECK(std::get<std::vector<double>>(res) == g);
}

TEST_CASE("insufficient budget stops before releasing and the stop is absorbing") {
    // cost at round 0 with these params is ~1.7181e-4; a budget below that stops at once
    auto s = PrivacyState::make(1e-4, 1e-5, 2.0, 0.5, 1.0, 0.997, 0.01);
    Rng rng(4);
    std::vector<double> g = {1.0, 2.0};
    auto res = adaldp_step(g, s, rng);
    CHECK(std::holds_alternative<StopParticipation>(res));
    CHECK(s.stopped);
    CHECK(s.epsilon_remaining == 1e-4);  // stop does not charge
    for (int i = 0; i < 5; ++i) CHECK(std::holds_alternative<StopParticipation>(adaldp_step(g, s, rng)));
}

TEST_CASE("rounds until stop match the scalar budget simulation oracle") {
    const double eps0 = 1.0, sigma0 = 1.0, decay = 0.997, theta = 0.5, rho = 0.01, zeta = 2.0;

    int oracle_rounds = 0;
    {
        double eps = eps0, sigma = sigma0;
        while (true) {
            const double cost = rdp_cost_oracle(zeta, theta, sigma, rho, false);
            if (eps - cost <= 0.0) break;
            eps -= cost;
            sigma *= decay;
            ++oracle_rounds;
        }
    }
    REQUIRE(oracle_rounds > 0);

    auto s = PrivacyState::make(eps0, 1e-5, zeta, theta, sigma0, decay, rho);
    Rng rng(5);
    std::vector<double> g = {0.25, 0.25};
    int released = 0;
    for (int t = 0; t < oracle_rounds + 50; ++t) {
        auto res = adaldp_step(g, s, rng);
        if (std::holds_alternative<std::vector<double>>(res)) ++released;
    }
    CHECK(released == oracle_rounds);
    CHECK(s.stopped);
}

TEST_CASE("decrement-mode budget conservation") {
    auto s = PrivacyState::make(0.01, 1e-5, 2.0, 0.5, 0.8, 0.999, 0.05);
    Rng rng(6);
    std::vector<double> g = {1.0};
    double charged = 0.0;
    while (!s.stopped) {
        const size_t before = s.trace.size();
        auto res = adaldp_step(g, s, rng);
        if (std::holds_alternative<std::vector<double>>(res)) charged += s.trace[before].per_round_cost;
    }
    CHECK(std::fabs(charged - (s.epsilon0 - s.epsilon_remaining)) < 1e-12);
}

TEST_CASE("rdp-convert mode stops when the projected epsilon exceeds the budget") {
    auto s = PrivacyState::make(12.0, 1e-5, 2.0, 0.5, 1.0, 1.0, 0.1, BudgetMode::RdpConvert);
    Rng rng(7);
    std::vector<double> g = {1.0};

    const double fixed_cost = rdp_cost_oracle(2.0, 0.5, 1.0, 0.1, false);
    const double offset = -std::log(1e-5);
    int oracle_rounds = 0;
    double cum = 0.0;
    while (cum + fixed_cost + offset <= 12.0) {
        cum += fixed_cost;
        ++oracle_rounds;
    }
    REQUIRE(oracle_rounds > 0);

    int released = 0;
    for (int t = 0; t < oracle_rounds + 20; ++t)
        if (std::holds_alternative<std::vector<double>>(adaldp_step(g, s, rng))) ++released;
    CHECK(released == oracle_rounds);
    CHECK(s.cumulative_rdp == doctest::Approx(oracle_rounds * fixed_cost).epsilon(1e-10));
}

TEST_CASE("trace export writes the pinned column layout") {
    auto s = PrivacyState::make(1.0, 1e-5, 2.0, 0.5, 1.0, 0.997, 0.01);
    Rng rng(8);
    std::vector<double> g = {1.0, -1.0};
    for (int i = 0; i < 3; ++i) adaldp_step(g, s, rng);
    const auto path = std::filesystem::temp_directory_path() / "fedcctr_trace_test.csv";
    export_trace_csv(s, path.string());
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "round,sigma,per_round_cost,cumulative_rdp,epsilon_remaining,stopped");
    int lines = 0;
    std::string row;
    while (std::getline(in, row)) ++lines;
    CHECK(lines == 3);
    std::filesystem::remove(path);
}

TEST_CASE("zeta optimizer picks the order minimizing the converted epsilon") {
    const double candidates[] = {1.5, 2.0, 4.0, 8.0, 32.0};
    const double best = optimize_zeta(100, 1.0, 0.997, 0.5, 0.01, 1e-5, CostFormula::Appendix, candidates);
    double expect = candidates[0], expect_eps = kInf;
    for (double z : candidates) {
        double total = 0.0, sigma = 1.0;
        for (int t = 0; t < 100; ++t) {
            total += rdp_cost_oracle(z, 0.5, sigma, 0.01, false);
            sigma *= 0.997;
        }
        const double eps = total - std::log(1e-5) / (z - 1.0);
        if (eps < expect_eps) {
            expect_eps = eps;
            expect = z;
        }
    }
    CHECK(best == expect);
}

TEST_CASE("invalid accountant arguments are rejected") {
    CHECK_THROWS_AS(rdp_cost(1.0, 0.5, 1.0, 0.1), ConfigError);
    CHECK_THROWS_AS(rdp_cost(2.0, 0.5, 1.0, 1.5), ConfigError);
    CHECK_THROWS_AS(convert_rdp_to_dp(1.0, 2.0, 0.0), ConfigError);
    CHECK_THROWS_AS(clip_gradient(std::vector<double>{1.0}, 0.0), ConfigError);
    CHECK_THROWS_AS(PrivacyState::make(1.0, 1e-5, 2.0, 0.5, 1.0, 0.0, 0.01), ConfigError);
}
