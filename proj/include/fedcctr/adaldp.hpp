#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedcctr/errors.hpp"
#include "fedcctr/rng.hpp"

namespace fedcctr::dp {

constexpr double kInf = std::numeric_limits<double>::infinity();

// l2 clipping: g / max(1, ||g||/theta). Zero and in-norm gradients pass through.
// The 1e-12 relative guard keeps re-clipping bit-exact: a freshly clipped vector
// whose recomputed norm lands an ulp above theta is not rescaled again.
inline std::vector<double> clip_gradient(std::span<const double> g, double theta) {
    if (theta <= 0.0) throw ConfigError("clip threshold must be > 0");
    double sq = 0.0;
    for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    std::vector<double> out(g.begin(), g.end());
    if (norm > theta * (1.0 + 1e-12)) {
        const double denom = norm / theta;
        for (double& v : out) v /= denom;
    }
    return out;
}

// i.i.d. Gaussian perturbation per coordinate. sigma == 0 is the exact identity.
inline std::vector<double> add_noise(std::span<const double> g, double sigma, Rng& rng) {
    if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
    std::vector<double> out(g.begin(), g.end());
    if (sigma == 0.0) return out;
    for (double& v : out) v += sigma * rng.gaussian();
    return out;
}

// Gaussian-mechanism RDP for sensitivity 2*theta at order zeta: 2*zeta*theta^2/sigma^2
inline double gaussian_mechanism_rdp(double zeta, double theta, double sigma) {
    if (sigma <= 0.0) return kInf;
    return 2.0 * zeta * theta * theta / (sigma * sigma);
}

namespace detail {
// (1/(zeta-1)) * ln(1 + rho^2 * (e^x - 1)) evaluated stably; exact at the
// rho = 0 and rho = 1 boundaries.
inline double subsampled_rdp(double zeta, double rho, double x) {
    if (rho == 0.0) return 0.0;
    if (rho == 1.0) return x / (zeta - 1.0);
    if (std::isinf(x)) return kInf;
    if (x > 700.0) {
        // 1 + rho^2(e^x - 1) = rho^2 e^x + (1 - rho^2); switch to log space
        const double r2 = rho * rho;
        return (x + std::log(r2) + std::log1p((1.0 - r2) / r2 * std::exp(-x))) / (zeta - 1.0);
    }
    return std::log1p(rho * rho * std::expm1(x)) / (zeta - 1.0);
}

inline void check_rdp_args(double zeta, double sigma, double rho) {
    if (zeta <= 1.0) throw ConfigError("RDP order zeta must be > 1");
    if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("sampling ratio rho must be in [0,1]");
}
}  // namespace detail

// Canonical per-round cost: subsampled amplification applied to the
// sensitivity-2theta Gaussian mechanism.
inline double rdp_cost(double zeta, double theta, double sigma, double rho) {
    detail::check_rdp_args(zeta, sigma, rho);
    const double egm = gaussian_mechanism_rdp(zeta, theta, sigma);
    if (rho == 1.0) return egm;
    return detail::subsampled_rdp(zeta, rho, (zeta - 1.0) * egm);
}

// Main-text variant: exponent theta^2/sigma_t^2 in place of the Gaussian-mechanism
// epsilon. Kept selectable because the two disagree by more than a constant.
inline double rdp_cost_maintext(double zeta, double theta, double sigma, double rho) {
    detail::check_rdp_args(zeta, sigma, rho);
    if (sigma == 0.0) return rho == 0.0 ? 0.0 : kInf;
    const double base = theta * theta / (sigma * sigma);
    if (rho == 1.0) return base;
    return detail::subsampled_rdp(zeta, rho, (zeta - 1.0) * base);
}

// RDP -> (epsilon, delta)-DP: epsilon = rdp - ln(delta)/(zeta-1)
inline double convert_rdp_to_dp(double cumulative_rdp, double zeta, double delta) {
    if (zeta <= 1.0) throw ConfigError("RDP order zeta must be > 1");
    if (delta <= 0.0 || delta > 1.0) throw ConfigError("delta must be in (0,1]");
    return cumulative_rdp - std::log(delta) / (zeta - 1.0);
}

enum class BudgetMode { Decrement, RdpConvert };
enum class CostFormula { Appendix, MainText };

inline double per_round_cost(CostFormula f, double zeta, double theta, double sigma, double rho) {
    return f == CostFormula::Appendix ? rdp_cost(zeta, theta, sigma, rho)
                                      : rdp_cost_maintext(zeta, theta, sigma, rho);
}

struct TraceRow {
    int round = 0;
    double sigma = 0.0;
    double per_round_cost = 0.0;
    double cumulative_rdp = 0.0;
    double epsilon_remaining = 0.0;
    bool stopped = false;
};

struct StopParticipation {};

struct PrivacyState {
    double sigma0 = 1.0;
    double sigma = 1.0;       // sigma_t = sigma0 * decay^t
    double epsilon0 = 1.0;    // initial budget
    double epsilon_remaining = 1.0;
    double delta = 1e-5;
    double zeta = 2.0;        // RDP order
    double rho = 0.01;        // client sampling ratio
    double theta = 0.5;       // clipping threshold
    double decay = 0.997;     // R
    double cumulative_rdp = 0.0;
    BudgetMode mode = BudgetMode::Decrement;
    CostFormula formula = CostFormula::Appendix;
    int round = 0;
    bool stopped = false;
    std::vector<TraceRow> trace;

    static PrivacyState make(double eps0, double delta_, double zeta_, double theta_, double sigma0_, double decay_,
                             double rho_, BudgetMode mode_ = BudgetMode::Decrement,
                             CostFormula formula_ = CostFormula::Appendix) {
        if (zeta_ <= 1.0) throw ConfigError("zeta must be > 1");
        if (theta_ <= 0.0) throw ConfigError("theta must be > 0");
        if (sigma0_ < 0.0) throw ConfigError("sigma0 must be >= 0");
        if (decay_ <= 0.0 || decay_ > 1.0) throw ConfigError("decay R must be in (0,1]");
        if (rho_ <= 0.0 || rho_ > 1.0) throw ConfigError("rho must be in (0,1]");
        if (delta_ <= 0.0 || delta_ > 1.0) throw ConfigError("delta must be in (0,1]");
        PrivacyState s;
        s.sigma0 = s.sigma = sigma0_;
        s.epsilon0 = s.epsilon_remaining = eps0;
        s.delta = delta_;
        s.zeta = zeta_;
        s.theta = theta_;
        s.decay = decay_;
        s.rho = rho_;
        s.mode = mode_;
        s.formula = formula_;
        return s;
    }

    bool exhausted_at_init() const { return epsilon0 <= 0.0; }
};

inline void decay_sigma(PrivacyState& s) {
    s.sigma *= s.decay;
    s.round += 1;
}

using StepResult = std::variant<std::vector<double>, StopParticipation>;

// One protected round: budget check, clip, noise, account, decay. Once a stop
// is emitted the state is absorbing. The raw gradient never leaves this call
// when the budget would be exceeded.
inline StepResult adaldp_step(std::span<const double> g, PrivacyState& s, Rng& rng) {
    if (s.stopped) return StopParticipation{};

    const double cost = per_round_cost(s.formula, s.zeta, s.theta, s.sigma, s.rho);
    const bool unlimited = std::isinf(s.epsilon0);

    bool would_exceed = false;
    if (!unlimited) {
        if (s.mode == BudgetMode::Decrement) {
            would_exceed = (s.epsilon_remaining - cost) <= 0.0;
        } else {
            const double projected = convert_rdp_to_dp(s.cumulative_rdp + cost, s.zeta, s.delta);
            would_exceed = projected > s.epsilon0;
        }
    }

    if (would_exceed) {
        s.stopped = true;
        s.trace.push_back({s.round, s.sigma, cost, s.cumulative_rdp, s.epsilon_remaining, true});
        return StopParticipation{};
    }

    std::vector<double> noisy = add_noise(clip_gradient(g, s.theta), s.sigma, rng);

    if (!unlimited) {
        if (s.mode == BudgetMode::Decrement) {
            s.epsilon_remaining -= cost;
        } else {
            s.cumulative_rdp += cost;
        }
    } else {
        s.cumulative_rdp += cost;  // keeps the ledger honest even without a budget
    }
    s.trace.push_back({s.round, s.sigma, cost, s.cumulative_rdp, s.epsilon_remaining, false});
    decay_sigma(s);
    return noisy;
}

inline void export_trace_csv(const PrivacyState& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write trace " + path);
    out << "round,sigma,per_round_cost,cumulative_rdp,epsilon_remaining,stopped\n";
    char buf[256];
    for (const TraceRow& r : s.trace) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%d\n", r.round, r.sigma, r.per_round_cost,
                      r.cumulative_rdp, r.epsilon_remaining, r.stopped ? 1 : 0);
        out << buf;
    }
}

// Scans candidate RDP orders and returns the one minimizing the converted
// (epsilon, delta) guarantee after `rounds` steps of the sigma schedule.
inline double optimize_zeta(int rounds, double sigma0, double decay, double theta, double rho, double delta,
                            CostFormula formula = CostFormula::Appendix,
                            std::span<const double> candidates = {}) {
    static const std::vector<double> kDefault = [] {
        std::vector<double> v{1.5};
        for (int z = 2; z <= 64; ++z) v.push_back(double(z));
        return v;
    }();
    std::span<const double> zs = candidates.empty() ? std::span<const double>(kDefault) : candidates;
    double best_zeta = zs[0];
    double best_eps = kInf;
    for (double z : zs) {
        double total = 0.0;
        double sigma = sigma0;
        for (int t = 0; t < rounds; ++t) {
            total += per_round_cost(formula, z, theta, sigma, rho);
            sigma *= decay;
        }
        const double eps = convert_rdp_to_dp(total, z, delta);
        if (eps < best_eps) {
            best_eps = eps;
            best_zeta = z;
        }
    }
    return best_zeta;
}

}  // namespace fedcctr::dp
