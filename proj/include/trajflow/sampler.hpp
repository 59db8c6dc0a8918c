#pragma once

// ODE integration of a velocity field from t = 0 to a target time.
//
// `integrate` is adaptive Dormand-Prince 5(4) with FSAL. NFE accounting:
//
//   NFE = 0                                  if t_target == 0
//   NFE = 1 + 6 * (accepted + rejected)      otherwise
//
// The leading 1 is the initial stage k1 = f(0, x0). Every attempted step
// evaluates stages k2..k7; on acceptance k7 is reused as the next k1, and on
// rejection the old k1 is still valid at the unchanged (t, x).

#include <trajflow/errors.hpp>
#include <trajflow/tensor.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <string>
#include <utility>
#include <vector>

namespace trajflow {

/// Anything callable as field(x, t) -> Tensor with x's shape.
template <typename F>
concept VelocityFunction = requires(const F& f, const Tensor& x, double t) {
    { f(x, t) } -> std::convertible_to<Tensor>;
};

struct SolverConfig {
    double rtol = 1e-5;
    double atol = 1e-7;
    double h0 = 1e-2;
    std::size_t max_steps = 100000;
    double safety = 0.9;
    double min_scale = 0.2;
    double max_scale = 5.0;
    /// Times the integrator must land on exactly and never step across, e.g.
    /// the knots of a piecewise-polynomial field. Sorted ascending.
    std::vector<double> breakpoints;

    void validate() const {
        if (!(rtol > 0.0) || !(atol > 0.0)) {
            throw ContractError("solver: rtol and atol must be positive");
        }
        if (!(h0 > 0.0)) {
            throw ContractError("solver: initial step must be positive");
        }
        if (max_steps == 0) {
            throw ContractError("solver: max_steps must be positive");
        }
        if (!(safety > 0.0) || !(min_scale > 0.0) || !(max_scale >= 1.0) || min_scale > 1.0) {
            throw ContractError("solver: invalid step-control factors");
        }
        if (!std::is_sorted(breakpoints.begin(), breakpoints.end())) {
            throw ContractError("solver: breakpoints must be sorted ascending");
        }
    }
};

struct OdeSolution {
    Tensor state;
    double time = 0.0;
    std::size_t nfe = 0;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    /// (t, x) at the start point and after every accepted step.
    std::vector<std::pair<double, Tensor>> steps;
};

namespace detail {

// Dormand-Prince 5(4) tableau.
struct DormandPrince {
    static constexpr std::array<double, 7> c{0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
    static constexpr std::array<std::array<double, 6>, 7> a{{
        {},
        {1.0 / 5},
        {3.0 / 40, 9.0 / 40},
        {44.0 / 45, -56.0 / 15, 32.0 / 9},
        {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
        {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
        {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
    }};
    // 5th-order weights equal the last row of a; error = b5 - b4.
    static constexpr std::array<double, 7> e{71.0 / 57600, 0.0, -71.0 / 16695, 71.0 / 1920,
                                             -17253.0 / 339200, 22.0 / 525, -1.0 / 40};
};

template <typename F>
Tensor eval_field(const F& field, const Tensor& x, double t, std::size_t& nfe) {
    Tensor v = field(x, t);
    ++nfe;
    if (v.shape() != x.shape()) {
        throw DimensionError("integrate: field returned " + shape_str(v.shape()) + " for state " +
                             shape_str(x.shape()));
    }
    if (!v.all_finite()) {
        throw NumericError("integrate: velocity field returned a non-finite value at t=" + std::to_string(t));
    }
    return v;
}

inline void require_target(double t_target) {
    if (!(t_target >= 0.0 && t_target <= 1.0)) {
        throw ContractError("integrate: target time " + std::to_string(t_target) + " outside [0, 1]");
    }
}

}  // namespace detail

template <VelocityFunction F>
OdeSolution integrate(const F& field, const Tensor& x0, double t_target, const SolverConfig& cfg = {}) {
    using DP = detail::DormandPrince;
    cfg.validate();
    detail::require_target(t_target);

    OdeSolution sol;
    sol.state = x0;
    sol.steps.emplace_back(0.0, x0);
    if (t_target == 0.0) {
        return sol;
    }

    const std::size_t n = x0.size();
    double t = 0.0;
    Tensor x = x0;
    double h = std::min(cfg.h0, t_target);
    std::array<Tensor, 7> k;
    k[0] = detail::eval_field(field, x, t, sol.nfe);
    bool just_rejected = false;

    while (t < t_target) {
        if (sol.accepted + sol.rejected >= cfg.max_steps) {
            throw IntegrationError("integrate: exceeded max_steps=" + std::to_string(cfg.max_steps) +
                                   " at t=" + std::to_string(t));
        }
        // Clamp the step onto the next stop (breakpoint or target); also absorb
        // a sliver smaller than the float resolution of t.
        double stop = t_target;
        for (double b : cfg.breakpoints) {
            if (b > t && b < t_target) {
                stop = b;
                break;
            }
        }
        bool hits_stop = false;
        if (t + h >= stop || stop - (t + h) <= 1e-12 * std::max(1.0, stop)) {
            h = stop - t;
            hits_stop = true;
        }

        Tensor stage(x.shape());
        for (std::size_t s = 1; s < 7; ++s) {
            stage = x;
            for (std::size_t j = 0; j < s; ++j) {
                if (DP::a[s][j] != 0.0) {
                    stage.axpy(h * DP::a[s][j], k[j]);
                }
            }
            k[s] = detail::eval_field(field, stage, t + DP::c[s] * h, sol.nfe);
        }
        // The stage-7 input is the 5th-order solution.
        const Tensor& x_new = stage;

        double err_sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                e += DP::e[j] * k[j][i];
            }
            e *= h;
            const double sc = cfg.atol + cfg.rtol * std::max(std::abs(x[i]), std::abs(x_new[i]));
            err_sq += (e / sc) * (e / sc);
        }
        const double err = n > 0 ? std::sqrt(err_sq / static_cast<double>(n)) : 0.0;

        const double factor = err == 0.0
                                  ? cfg.max_scale
                                  : std::clamp(cfg.safety * std::pow(err, -0.2), cfg.min_scale, cfg.max_scale);
        if (err <= 1.0) {
            t = hits_stop ? stop : t + h;
            x = x_new;
            k[0] = k[6];
            ++sol.accepted;
            sol.steps.emplace_back(t, x);
            // No growth directly after a rejection.
            h *= just_rejected ? std::min(factor, 1.0) : factor;
            just_rejected = false;
        } else {
            ++sol.rejected;
            just_rejected = true;
            h *= std::min(factor, 1.0);
            if (t + h == t) {
                throw IntegrationError("integrate: step size underflow at t=" + std::to_string(t));
            }
        }
    }
    sol.state = std::move(x);
    sol.time = t;
    return sol;
}

/// Classical RK4 with n_steps uniform steps; NFE = 4 * n_steps.
template <VelocityFunction F>
OdeSolution integrate_fixed(const F& field, const Tensor& x0, double t_target, std::size_t n_steps) {
    detail::require_target(t_target);
    if (n_steps == 0) {
        throw ContractError("integrate_fixed: n_steps must be >= 1");
    }
    OdeSolution sol;
    sol.steps.emplace_back(0.0, x0);
    const double h = t_target / static_cast<double>(n_steps);
    Tensor x = x0;
    for (std::size_t i = 0; i < n_steps; ++i) {
        const double t = h * static_cast<double>(i);
        const Tensor k1 = detail::eval_field(field, x, t, sol.nfe);
        const Tensor k2 = detail::eval_field(field, Tensor(x).axpy(0.5 * h, k1), t + 0.5 * h, sol.nfe);
        const Tensor k3 = detail::eval_field(field, Tensor(x).axpy(0.5 * h, k2), t + 0.5 * h, sol.nfe);
        const Tensor k4 = detail::eval_field(field, Tensor(x).axpy(h, k3), t + h, sol.nfe);
        x.axpy(h / 6.0, k1).axpy(h / 3.0, k2).axpy(h / 3.0, k3).axpy(h / 6.0, k4);
        ++sol.accepted;
        sol.steps.emplace_back(i + 1 == n_steps ? t_target : t + h, x);
    }
    sol.state = std::move(x);
    sol.time = t_target;
    return sol;
}

struct NfeSample {
    double t_target;
    std::size_t nfe;
};

/// NFE of an adaptive integration from 0 to each target. Targets must be
/// sorted ascending.
template <VelocityFunction F>
std::vector<NfeSample> nfe_profile(const F& field, const Tensor& x0, const std::vector<double>& targets,
                                   const SolverConfig& cfg = {}) {
    if (!std::is_sorted(targets.begin(), targets.end())) {
        throw ContractError("nfe_profile: targets must be sorted ascending");
    }
    std::vector<NfeSample> out;
    out.reserve(targets.size());
    for (double t : targets) {
        out.push_back({t, integrate(field, x0, t, cfg).nfe});
    }
    return out;
}

}  // namespace trajflow
