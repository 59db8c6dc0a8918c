#pragma once

// Natural cubic spline trajectories through knot latents.
//
// On segment k (t in [t_k, t_{k+1})), with tau = t - t_k:
//
//   mu(t) = a_k tau^3 + b_k tau^2 + c_k tau + d_k
//
// Coefficients are tensors with the knot shape; every latent coordinate is an
// independent 1-D spline. Second derivatives M_k at the knots come from the
// usual tridiagonal system with M_0 = M_{m-1} = 0.

#include <trajflow/errors.hpp>
#include <trajflow/tensor.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace trajflow {

/// Ordered scale set S = {s_1 < ... < s_m} with the min-max map to t in [0,1].
class DegradationLevelSet {
public:
    DegradationLevelSet() = default;

    explicit DegradationLevelSet(std::vector<double> scales) : scales_(std::move(scales)) {
        if (scales_.size() < 2) {
            throw ContractError("degradation levels: need at least two scales");
        }
        for (std::size_t i = 0; i < scales_.size(); ++i) {
            if (!std::isfinite(scales_[i])) {
                throw ContractError("degradation levels: non-finite scale");
            }
            if (i > 0 && !(scales_[i] > scales_[i - 1])) {
                throw ContractError("degradation levels: scales must be strictly increasing");
            }
        }
    }

    const std::vector<double>& scales() const noexcept { return scales_; }
    std::size_t size() const noexcept { return scales_.size(); }
    double min() const { return scales_.front(); }
    double max() const { return scales_.back(); }

    /// Knot times t_k for every scale (t_1 = 0, t_m = 1 exactly).
    std::vector<double> times() const;

private:
    std::vector<double> scales_;
};

inline double normalize_scale(double s, const DegradationLevelSet& levels) {
    if (!(s >= levels.min() && s <= levels.max())) {
        throw ContractError("normalize_scale: scale " + std::to_string(s) + " outside [" +
                            std::to_string(levels.min()) + ", " + std::to_string(levels.max()) + "]");
    }
    if (s == levels.max()) {
        return 1.0;
    }
    return (s - levels.min()) / (levels.max() - levels.min());
}

inline double denormalize_time(double t, const DegradationLevelSet& levels) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw ContractError("denormalize_time: t=" + std::to_string(t) + " outside [0, 1]");
    }
    return levels.min() + t * (levels.max() - levels.min());
}

inline std::vector<double> DegradationLevelSet::times() const {
    std::vector<double> out;
    out.reserve(scales_.size());
    for (double s : scales_) {
        out.push_back(normalize_scale(s, *this));
    }
    return out;
}

/// Knot latents of one sample at normalized timestamps.
struct LatentTrajectory {
    std::vector<double> times;
    std::vector<Tensor> knots;

    /// Throws unless times are strictly increasing from exactly 0 to exactly 1
    /// and every knot has the same shape.
    void validate() const {
        if (times.size() < 2 || times.size() != knots.size()) {
            throw ContractError("trajectory: need m >= 2 knots with one time per knot");
        }
        if (times.front() != 0.0 || times.back() != 1.0) {
            throw ContractError("trajectory: knot times must start at 0 and end at 1");
        }
        for (std::size_t k = 1; k < times.size(); ++k) {
            if (!(times[k] > times[k - 1])) {
                throw ContractError("trajectory: knot times must be strictly increasing (duplicate or "
                                    "unordered time at index " + std::to_string(k) + ")");
            }
        }
        for (const Tensor& z : knots) {
            if (z.shape() != knots.front().shape()) {
                throw DimensionError("trajectory: knot shapes differ " + shape_str(z.shape()) + " vs " +
                                     shape_str(knots.front().shape()));
            }
        }
    }
};

enum class TrajectoryKind { NaturalCubic, PiecewiseLinear };

inline const char* to_string(TrajectoryKind kind) {
    return kind == TrajectoryKind::NaturalCubic ? "natural_cubic" : "piecewise_linear";
}

struct SplineCoefficients {
    TrajectoryKind kind = TrajectoryKind::NaturalCubic;
    std::vector<double> times;
    std::vector<Tensor> a, b, c, d;
    Tensor end;  // knot value at t_m, returned verbatim by order-0 evaluation at t = 1

    std::size_t segments() const noexcept { return a.size(); }
    const Shape& knot_shape() const { return d.front().shape(); }

    /// Segment containing t under the right-closed convention [t_k, t_{k+1});
    /// the final time belongs to the last segment.
    std::size_t segment_of(double t) const {
        if (!(t >= times.front() && t <= times.back())) {
            throw ContractError("spline: t=" + std::to_string(t) + " outside [" +
                                std::to_string(times.front()) + ", " + std::to_string(times.back()) + "]");
        }
        std::size_t k = 0;
        while (k + 1 < segments() && t >= times[k + 1]) {
            ++k;
        }
        return k;
    }

    /// Evaluate the polynomial of segment k at t (t may lie anywhere; used for
    /// one-sided limits at knots).
    Tensor evaluate_on_segment(std::size_t k, double t, int order) const {
        if (k >= segments()) {
            throw ContractError("spline: segment index out of range");
        }
        const double tau = t - times[k];
        const Tensor& ak = a[k];
        const Tensor& bk = b[k];
        const Tensor& ck = c[k];
        const Tensor& dk = d[k];
        Tensor out(ak.shape());
        for (std::size_t i = 0; i < out.size(); ++i) {
            switch (order) {
                case 0: out[i] = ((ak[i] * tau + bk[i]) * tau + ck[i]) * tau + dk[i]; break;
                case 1: out[i] = (3.0 * ak[i] * tau + 2.0 * bk[i]) * tau + ck[i]; break;
                case 2: out[i] = 6.0 * ak[i] * tau + 2.0 * bk[i]; break;
                case 3: out[i] = 6.0 * ak[i]; break;
                default: throw ContractError("spline: derivative order must be 0..3");
            }
        }
        return out;
    }
};

namespace detail {

inline void require_order(int order) {
    if (order < 0 || order > 3) {
        throw ContractError("spline: derivative order " + std::to_string(order) + " not in 0..3");
    }
}

inline std::vector<double> knot_spacing(const LatentTrajectory& traj) {
    std::vector<double> h(traj.times.size() - 1);
    for (std::size_t k = 0; k < h.size(); ++k) {
        h[k] = traj.times[k + 1] - traj.times[k];
    }
    return h;
}

}  // namespace detail

inline SplineCoefficients fit_spline(const LatentTrajectory& traj) {
    traj.validate();
    const std::size_t m = traj.times.size();
    const std::vector<double> h = detail::knot_spacing(traj);
    const Shape& shape = traj.knots.front().shape();

    // Second derivatives at the knots; natural boundary fixes both ends at 0.
    std::vector<Tensor> second(m, Tensor::zeros(shape));
    if (m > 2) {
        // Thomas algorithm over the interior unknowns 1..m-2. The matrix is the
        // same for every coordinate, so the sweep runs once on whole tensors.
        const std::size_t n = m - 2;
        std::vector<double> cprime(n);
        std::vector<Tensor> dprime(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = i + 1;
            const double sub = h[k - 1];
            const double diag = 2.0 * (h[k - 1] + h[k]);
            const double sup = h[k];
            Tensor rhs(shape);
            for (std::size_t j = 0; j < rhs.size(); ++j) {
                rhs[j] = 6.0 * ((traj.knots[k + 1][j] - traj.knots[k][j]) / h[k] -
                                (traj.knots[k][j] - traj.knots[k - 1][j]) / h[k - 1]);
            }
            if (i == 0) {
                cprime[i] = sup / diag;
                dprime[i] = rhs * (1.0 / diag);
            } else {
                const double denom = diag - sub * cprime[i - 1];
                cprime[i] = sup / denom;
                rhs.axpy(-sub, dprime[i - 1]);
                dprime[i] = rhs * (1.0 / denom);
            }
        }
        second[n] = dprime[n - 1];
        for (std::size_t i = n - 1; i-- > 0;) {
            second[i + 1] = dprime[i];
            second[i + 1].axpy(-cprime[i], second[i + 2]);
        }
    }

    SplineCoefficients out;
    out.kind = TrajectoryKind::NaturalCubic;
    out.times = traj.times;
    out.end = traj.knots.back();
    for (std::size_t k = 0; k + 1 < m; ++k) {
        Tensor ak(shape), bk(shape), ck(shape);
        for (std::size_t j = 0; j < ak.size(); ++j) {
            const double m0 = second[k][j];
            const double m1 = second[k + 1][j];
            ak[j] = (m1 - m0) / (6.0 * h[k]);
            bk[j] = 0.5 * m0;
            ck[j] = (traj.knots[k + 1][j] - traj.knots[k][j]) / h[k] - h[k] * (2.0 * m0 + m1) / 6.0;
        }
        out.a.push_back(std::move(ak));
        out.b.push_back(std::move(bk));
        out.c.push_back(std::move(ck));
        out.d.push_back(traj.knots[k]);
    }
    return out;
}

/// Straight segments between consecutive knots (a = b = 0). The first
/// derivative is piecewise constant and jumps at interior knots.
inline SplineCoefficients piecewise_linear_trajectory(const LatentTrajectory& traj) {
    traj.validate();
    const std::vector<double> h = detail::knot_spacing(traj);
    const Shape& shape = traj.knots.front().shape();
    SplineCoefficients out;
    out.kind = TrajectoryKind::PiecewiseLinear;
    out.times = traj.times;
    out.end = traj.knots.back();
    for (std::size_t k = 0; k < h.size(); ++k) {
        out.a.push_back(Tensor::zeros(shape));
        out.b.push_back(Tensor::zeros(shape));
        out.c.push_back((traj.knots[k + 1] - traj.knots[k]) * (1.0 / h[k]));
        out.d.push_back(traj.knots[k]);
    }
    return out;
}

inline SplineCoefficients fit_trajectory(const LatentTrajectory& traj, TrajectoryKind kind) {
    return kind == TrajectoryKind::NaturalCubic ? fit_spline(traj) : piecewise_linear_trajectory(traj);
}

/// mu_t and its derivatives up to order 3. Order 3 at an interior knot uses
/// the right segment's constant.
inline Tensor evaluate(const SplineCoefficients& coeffs, double t, int order = 0) {
    detail::require_order(order);
    const std::size_t k = coeffs.segment_of(t);
    if (order == 0 && t == coeffs.times.back()) {
        return coeffs.end;
    }
    return coeffs.evaluate_on_segment(k, t, order);
}

/// Spline fitted once, evaluated many times. Immutable after construction.
class SplinePath {
public:
    explicit SplinePath(const LatentTrajectory& traj, TrajectoryKind kind = TrajectoryKind::NaturalCubic)
        : coeffs_(fit_trajectory(traj, kind)) {}
    explicit SplinePath(SplineCoefficients coeffs) : coeffs_(std::move(coeffs)) {}

    const SplineCoefficients& coefficients() const noexcept { return coeffs_; }
    Tensor position(double t) const { return evaluate(coeffs_, t, 0); }
    Tensor velocity(double t) const { return evaluate(coeffs_, t, 1); }
    Tensor derivative(double t, int order) const { return evaluate(coeffs_, t, order); }

private:
    SplineCoefficients coeffs_;
};

/// Conditional velocity target mu'_t. Fits on every call; use SplinePath to
/// reuse coefficients across many t.
inline Tensor velocity_target(const LatentTrajectory& traj, double t) {
    return evaluate(fit_spline(traj), t, 1);
}

// ---------------------------------------------------------------------------
// Serialization: a.dgft b.dgft c.dgft d.dgft (segment-stacked, shape
// [m-1, knot dims...]), end.dgft (last knot) and spline.json.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor stack(const std::vector<Tensor>& parts) {
    Shape shape{parts.size()};
    const Shape& inner = parts.front().shape();
    shape.insert(shape.end(), inner.begin(), inner.end());
    std::vector<double> data;
    data.reserve(shape_numel(shape));
    for (const Tensor& p : parts) {
        data.insert(data.end(), p.data().begin(), p.data().end());
    }
    return Tensor(std::move(shape), std::move(data));
}

inline std::vector<Tensor> unstack(const Tensor& t, const Shape& inner) {
    const std::size_t n = t.dim(0);
    const std::size_t per = shape_numel(inner);
    if (per * n != t.size()) {
        throw IoError("spline: stacked tensor does not match knot dims");
    }
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.emplace_back(inner, std::vector<double>(t.data().begin() + i * per, t.data().begin() + (i + 1) * per));
    }
    return out;
}

}  // namespace detail

inline void save_spline(const std::filesystem::path& dir, const SplineCoefficients& coeffs) {
    std::filesystem::create_directories(dir);
    save_dgft(dir / "a.dgft", detail::stack(coeffs.a));
    save_dgft(dir / "b.dgft", detail::stack(coeffs.b));
    save_dgft(dir / "c.dgft", detail::stack(coeffs.c));
    save_dgft(dir / "d.dgft", detail::stack(coeffs.d));
    save_dgft(dir / "end.dgft", coeffs.end);
    nlohmann::json meta;
    meta["format"] = "trajflow.spline/1";
    meta["kind"] = to_string(coeffs.kind);
    meta["m"] = coeffs.times.size();
    meta["times"] = coeffs.times;
    meta["dims"] = coeffs.knot_shape();
    std::ofstream(dir / "spline.json") << meta.dump(2) << '\n';
}

inline SplineCoefficients load_spline(const std::filesystem::path& dir) {
    std::ifstream is(dir / "spline.json");
    if (!is) {
        throw IoError((dir / "spline.json").string() + ": cannot open");
    }
    nlohmann::json meta;
    try {
        is >> meta;
        SplineCoefficients out;
        out.kind = meta.at("kind").get<std::string>() == "piecewise_linear" ? TrajectoryKind::PiecewiseLinear
                                                                           : TrajectoryKind::NaturalCubic;
        out.times = meta.at("times").get<std::vector<double>>();
        const auto dims = meta.at("dims").get<Shape>();
        out.a = detail::unstack(load_dgft(dir / "a.dgft"), dims);
        out.b = detail::unstack(load_dgft(dir / "b.dgft"), dims);
        out.c = detail::unstack(load_dgft(dir / "c.dgft"), dims);
        out.d = detail::unstack(load_dgft(dir / "d.dgft"), dims);
        out.end = load_dgft(dir / "end.dgft");
        if (out.times.size() != meta.at("m").get<std::size_t>() || out.a.size() + 1 != out.times.size()) {
            throw IoError((dir / "spline.json").string() + ": segment count does not match m");
        }
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "spline.json").string() + ": " + e.what());
    }
}

}  // namespace trajflow
