#pragma once

// Latent flow matching: a velocity network v(x, t) regressed onto the
// derivative of per-scene latent splines, plus an image-space term on the
// latent extrapolated to the next degradation level and decoded.

#include <trajflow/autodiff.hpp>
#include <trajflow/checkpoint.hpp>
#include <trajflow/errors.hpp>
#include <trajflow/nn.hpp>
#include <trajflow/rae.hpp>
#include <trajflow/rng.hpp>
#include <trajflow/spline.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace trajflow {

/// Row i: sin(w_j t_i) for j < F, then cos(w_j t_i), with w_j = pi (j + 1).
inline Tensor time_embedding(std::span<const double> t, std::size_t frequencies) {
    Tensor out(Shape{t.size(), 2 * frequencies});
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t j = 0; j < frequencies; ++j) {
            const double w = std::numbers::pi * static_cast<double>(j + 1);
            out.at(i, j) = std::sin(w * t[i]);
            out.at(i, frequencies + j) = std::cos(w * t[i]);
        }
    }
    return out;
}

struct VelocityFieldConfig {
    std::size_t latent_dim = 16;
    std::size_t hidden = 128;
    std::size_t layers = 3;
    std::size_t frequencies = 8;
    std::uint64_t seed = 0;

    void validate() const {
        if (latent_dim == 0 || hidden == 0 || layers == 0 || frequencies == 0) {
            throw ContractError("velocity field: latent_dim, hidden, layers and frequencies must be positive");
        }
    }
};

/// MLP on concat(x, embed(t)). Evaluation does not modify the network, so a
/// trained field can be shared between threads.
class VelocityField {
public:
    VelocityField() = default;

    explicit VelocityField(VelocityFieldConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, 0xf1e1d));
        std::size_t prev = cfg_.latent_dim + 2 * cfg_.frequencies;
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            hidden_.emplace_back(prev, cfg_.hidden, rng);
            prev = cfg_.hidden;
        }
        out_ = Linear(prev, cfg_.latent_dim, rng);
    }

    const VelocityFieldConfig& config() const noexcept { return cfg_; }
    std::size_t latent_dim() const { return cfg_.latent_dim; }

    /// x: [B×d], one time per row.
    Var forward(const Var& x, std::span<const double> t) const {
        if (x.shape().size() != 2 || x.shape()[1] != cfg_.latent_dim || x.shape()[0] != t.size()) {
            throw DimensionError("velocity field: expected [" + std::to_string(t.size()) + "×" +
                                 std::to_string(cfg_.latent_dim) + "], got " + shape_str(x.shape()));
        }
        Var h = concat_cols(x, Var::constant(time_embedding(t, cfg_.frequencies)));
        for (const auto& layer : hidden_) {
            h = gelu(layer(h));
        }
        return out_(h);
    }

    Var operator()(const Var& x, std::span<const double> t) const { return forward(x, t); }

    /// Solver interface: any x holding d values; the result has x's shape.
    Tensor operator()(const Tensor& x, double t) const {
        if (x.size() != cfg_.latent_dim) {
            throw DimensionError("velocity field: state of shape " + shape_str(x.shape()) + " for latent dim " +
                                 std::to_string(cfg_.latent_dim));
        }
        const double ts[1] = {t};
        return forward(Var::constant(x.reshaped({1, cfg_.latent_dim})), ts).value().reshaped(x.shape());
    }

    NamedParams parameters() const {
        NamedParams out;
        for (std::size_t l = 0; l < hidden_.size(); ++l) {
            hidden_[l].collect("hidden" + std::to_string(l), out);
        }
        out_.collect("out", out);
        return out;
    }

    void save(const std::filesystem::path& dir) const {
        nlohmann::json meta;
        meta["format"] = "trajflow.lfm/1";
        meta["latent_dim"] = cfg_.latent_dim;
        meta["hidden"] = cfg_.hidden;
        meta["layers"] = cfg_.layers;
        meta["frequencies"] = cfg_.frequencies;
        meta["seed"] = cfg_.seed;
        save_checkpoint(dir, std::move(meta), parameters());
    }

    static VelocityField load(const std::filesystem::path& dir) {
        const auto meta = read_checkpoint_meta(dir, "trajflow.lfm/1");
        VelocityFieldConfig cfg;
        try {
            cfg.latent_dim = meta.at("latent_dim").get<std::size_t>();
            cfg.hidden = meta.at("hidden").get<std::size_t>();
            cfg.layers = meta.at("layers").get<std::size_t>();
            cfg.frequencies = meta.at("frequencies").get<std::size_t>();
            cfg.seed = meta.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError(dir.string() + ": " + e.what());
        }
        VelocityField field(cfg);
        NamedParams params = field.parameters();
        load_checkpoint_params(dir, meta, params);
        return field;
    }

private:
    VelocityFieldConfig cfg_;
    std::vector<Linear> hidden_;
    Linear out_;
};

/// Batched field: (x [B×d], t per row) -> Var [B×d]. Test doubles only need
/// to satisfy this.
template <typename F>
concept BatchVelocity = requires(const F& f, const Var& x, std::span<const double> t) {
    { f(x, t) } -> std::convertible_to<Var>;
};

// ---------------------------------------------------------------------------
// Conditional flow matching
// ---------------------------------------------------------------------------

/// Points on each trajectory's path and their path velocities.
struct TrainBatch {
    std::vector<double> t;
    Tensor x;       // [B×d], x_i = mu_i(t_i)
    Tensor target;  // [B×d], mu_i'(t_i)

    std::size_t size() const noexcept { return t.size(); }
};

inline TrainBatch make_batch(const std::vector<const SplineCoefficients*>& paths, const std::vector<double>& t) {
    if (paths.size() != t.size()) {
        throw DimensionError("make_batch: " + std::to_string(paths.size()) + " paths, " + std::to_string(t.size()) +
                             " times");
    }
    if (paths.empty()) {
        throw ContractError("make_batch: empty batch");
    }
    const std::size_t d = shape_numel(paths.front()->knot_shape());
    TrainBatch batch;
    batch.t = t;
    batch.x = Tensor(Shape{paths.size(), d});
    batch.target = Tensor(Shape{paths.size(), d});
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const Tensor x = evaluate(*paths[i], t[i], 0);
        const Tensor v = evaluate(*paths[i], t[i], 1);
        if (x.size() != d) {
            throw DimensionError("make_batch: trajectories have different latent sizes");
        }
        std::copy(x.data().begin(), x.data().end(), batch.x.data().begin() + i * d);
        std::copy(v.data().begin(), v.data().end(), batch.target.data().begin() + i * d);
    }
    return batch;
}

/// Mean over the batch of ||v(x_i, t_i) - mu_i'(t_i)||^2.
template <BatchVelocity F>
Var cfm_loss(const F& field, const TrainBatch& batch) {
    if (batch.size() == 0) {
        throw ContractError("cfm_loss: empty batch");
    }
    const Var v = field(Var::constant(batch.x), std::span<const double>(batch.t));
    // mse averages over B·d entries; rescale to a per-sample sum over dims.
    return scale(mse(v, Var::constant(batch.target)), static_cast<double>(batch.x.cols()));
}

// ---------------------------------------------------------------------------
// Extrapolation to the next level
// ---------------------------------------------------------------------------

enum class ExtrapolationMode { Taylor3, Linear };
enum class Projection { Next, Nearest };

inline const char* to_string(ExtrapolationMode m) { return m == ExtrapolationMode::Taylor3 ? "taylor3" : "linear"; }
inline const char* to_string(Projection p) { return p == Projection::Next ? "next" : "nearest"; }

/// Index of the knot that the latent at t is projected to. Next: the right end
/// of t's segment. Nearest: the closer end (ties go right).
inline std::size_t projection_knot(const SplineCoefficients& coeffs, double t, Projection proj = Projection::Next) {
    if (!(t < coeffs.times.back())) {
        throw ContractError("taylor_extrapolate: t=" + std::to_string(t) + " has no next degradation level");
    }
    const std::size_t k = coeffs.segment_of(t);
    if (proj == Projection::Nearest && t - coeffs.times[k] < coeffs.times[k + 1] - t) {
        return k;
    }
    return k + 1;
}

/// Batched extrapolation: row i is
///   z_i + v_i dt_i + z''_i dt_i^2 / 2 + z'''_i dt_i^3 / 6     (Taylor3)
///   z_i + v_i dt_i                                            (Linear)
/// with z, z'', z''' read off the spline at t_i (constants) and dt_i the gap to
/// the projection knot. Gradients flow into v_hat only.
inline Var taylor_extrapolate(const std::vector<const SplineCoefficients*>& paths, const std::vector<double>& t,
                              const Var& v_hat, ExtrapolationMode mode, Projection proj = Projection::Next) {
    if (paths.size() != t.size() || v_hat.shape().size() != 2 || v_hat.shape()[0] != t.size()) {
        throw DimensionError("taylor_extrapolate: batch mismatch, v_hat " + shape_str(v_hat.shape()));
    }
    const std::size_t B = t.size(), d = v_hat.shape()[1];
    std::vector<double> dt(B);
    Tensor base(Shape{B, d});
    for (std::size_t i = 0; i < B; ++i) {
        const SplineCoefficients& c = *paths[i];
        const std::size_t j = projection_knot(c, t[i], proj);
        dt[i] = c.times[j] - t[i];
        const std::size_t k = c.segment_of(t[i]);
        const Tensor z = c.evaluate_on_segment(k, t[i], 0);
        if (z.size() != d) {
            throw DimensionError("taylor_extrapolate: latent size " + std::to_string(z.size()) + " vs v_hat " +
                                 std::to_string(d));
        }
        Tensor row = z;
        if (mode == ExtrapolationMode::Taylor3) {
            row.axpy(0.5 * dt[i] * dt[i], c.evaluate_on_segment(k, t[i], 2));
            row.axpy(dt[i] * dt[i] * dt[i] / 6.0, c.evaluate_on_segment(k, t[i], 3));
        }
        std::copy(row.data().begin(), row.data().end(), base.data().begin() + i * d);
    }
    return add(Var::constant(std::move(base)), mul_rows(v_hat, dt));
}

/// Single-trajectory form; v_hat holds the d values of the velocity at t.
inline Tensor taylor_extrapolate(const SplineCoefficients& coeffs, double t, const Tensor& v_hat,
                                 ExtrapolationMode mode, Projection proj = Projection::Next) {
    const std::size_t d = v_hat.size();
    const Var out = taylor_extrapolate({&coeffs}, {t}, Var::constant(v_hat.reshaped({1, d})), mode, proj);
    return out.value().reshaped(coeffs.knot_shape());
}

// ---------------------------------------------------------------------------
// Image-space surrogate for the perceptual term
// ---------------------------------------------------------------------------

enum class PerceptualMetric { EdgeAware, Mse };

inline const char* to_string(PerceptualMetric m) { return m == PerceptualMetric::EdgeAware ? "edge" : "mse"; }

/// Pixel MSE, plus (EdgeAware) MSE between forward-difference image gradients.
inline Var image_surrogate(const Var& pixels, const Var& target, std::size_t height, std::size_t width,
                           PerceptualMetric metric) {
    const Var pix = mse(pixels, target);
    if (metric == PerceptualMetric::Mse) {
        return pix;
    }
    return add(pix, mse(image_gradients(pixels, height, width), image_gradients(target, height, width)));
}

/// Decodes z_hat [B×d] with the HR features of each row's scene and compares
/// against the target images [B×C·H·W]. The decoder must be frozen.
inline Var perceptual_loss(const RaeModel& decoder, const Var& z_hat, const std::vector<Var>& hr_features,
                           const Tensor& target, PerceptualMetric metric = PerceptualMetric::EdgeAware) {
    if (!decoder.frozen()) {
        throw ContractError("perceptual_loss: decoder must be frozen");
    }
    const auto& rc = decoder.config();
    if (metric == PerceptualMetric::EdgeAware && rc.channels != 1) {
        throw ContractError("perceptual_loss: edge-aware surrogate needs single-channel images");
    }
    const Var pixels = decoder.decode_raw(z_hat, hr_features);
    if (pixels.shape() != target.shape()) {
        throw DimensionError("perceptual_loss: decoded " + shape_str(pixels.shape()) + " vs target " +
                             shape_str(target.shape()));
    }
    return image_surrogate(pixels, Var::constant(target), rc.height, rc.width, metric);
}

inline constexpr double kDefaultLambda = 0.1;

inline Var total_loss(const Var& cfm, const Var& perc, double lambda = kDefaultLambda) {
    return add(cfm, scale(perc, lambda));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class PerceptualMode { None, Linear, Taylor3 };

inline const char* to_string(PerceptualMode m) {
    switch (m) {
        case PerceptualMode::None: return "none";
        case PerceptualMode::Linear: return "linear";
        case PerceptualMode::Taylor3: return "taylor3";
    }
    return "?";
}

/// One scene's path and, for the image term, its images at the knot levels and
/// the HR features used to decode.
struct LfmScene {
    SplineCoefficients path;
    std::vector<Tensor> level_images;  // 1×D rows aligned with path.times
    std::vector<Tensor> hr_features;   // 1×w rows, one per RAE level
};

struct LfmData {
    std::vector<LfmScene> scenes;
    const RaeModel* rae = nullptr;  // frozen; needed only for the image term
};

/// Encodes each scene's level images with the frozen RAE and fits its
/// trajectory. `images[s][k]` is scene s at level k (1×D rows), times are
/// the normalized level times.
inline LfmData encode_scenes(const RaeModel& rae, const std::vector<std::vector<Tensor>>& images,
                             const std::vector<double>& times, TrajectoryKind kind) {
    if (!rae.frozen()) {
        throw ContractError("encode_scenes: RAE must be frozen");
    }
    LfmData data;
    data.rae = &rae;
    for (const auto& levels : images) {
        if (levels.size() != times.size()) {
            throw DimensionError("encode_scenes: scene has " + std::to_string(levels.size()) + " levels, expected " +
                                 std::to_string(times.size()));
        }
        LatentTrajectory traj;
        traj.times = times;
        LfmScene scene;
        for (std::size_t k = 0; k < levels.size(); ++k) {
            const Encoding enc = rae.encode(Var::constant(levels[k]));
            traj.knots.push_back(enc.z.value().reshaped({rae.latent_dim()}));
            if (k == 0) {
                for (const Var& f : enc.features) {
                    scene.hr_features.push_back(f.value());
                }
            }
        }
        scene.path = fit_trajectory(traj, kind);
        scene.level_images = levels;
        data.scenes.push_back(std::move(scene));
    }
    return data;
}

struct LfmTrainConfig {
    std::size_t iters = 3000;
    double lr_max = 3e-3;
    double lr_min = 1e-5;
    double lambda = kDefaultLambda;
    PerceptualMode perceptual = PerceptualMode::Taylor3;
    Projection projection = Projection::Next;
    PerceptualMetric metric = PerceptualMetric::EdgeAware;
    double perceptual_delta = 1e-3;  // image-term t ~ U[0, 1 - delta]
    std::size_t batch = 0;           // scenes per step; 0 = every scene once
    std::uint64_t seed = 0;
};

struct LossRecord {
    double cfm = 0.0;
    double perceptual = 0.0;
    double total = 0.0;
};

struct LfmCurve {
    std::vector<LossRecord> rows;

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) {
            throw IoError(path.string() + ": cannot write loss curve");
        }
        os << "iter,cfm,perceptual,total\n";
        char buf[128];
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", i, rows[i].cfm, rows[i].perceptual,
                          rows[i].total);
            os << buf;
        }
    }
};

inline bool uses_image_term(const LfmTrainConfig& cfg) {
    return cfg.perceptual != PerceptualMode::None && cfg.lambda != 0.0;
}

/// One loss evaluation on the given scenes; exposed for gradient checks.
template <BatchVelocity F>
std::pair<Var, Var> lfm_losses(const F& field, const LfmData& data, const std::vector<std::size_t>& idx,
                               const std::vector<double>& t_cfm, const std::vector<double>& t_img,
                               const LfmTrainConfig& cfg) {
    std::vector<const SplineCoefficients*> paths;
    for (std::size_t i : idx) {
        paths.push_back(&data.scenes[i].path);
    }
    const Var cfm = cfm_loss(field, make_batch(paths, t_cfm));
    if (!uses_image_term(cfg)) {
        return {cfm, Var::constant(Tensor::scalar(0.0))};
    }
    if (data.rae == nullptr) {
        throw ContractError("train_lfm: the perceptual term needs a frozen RAE");
    }
    const std::size_t d = shape_numel(paths.front()->knot_shape());
    Tensor x(Shape{idx.size(), d});
    std::vector<const Tensor*> targets;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor z = evaluate(*paths[b], t_img[b], 0);
        std::copy(z.data().begin(), z.data().end(), x.data().begin() + b * d);
        targets.push_back(&data.scenes[idx[b]].level_images[projection_knot(*paths[b], t_img[b], cfg.projection)]);
    }
    const Var v_hat = field(Var::constant(std::move(x)), std::span<const double>(t_img));
    const ExtrapolationMode mode =
        cfg.perceptual == PerceptualMode::Taylor3 ? ExtrapolationMode::Taylor3 : ExtrapolationMode::Linear;
    const Var z_hat = taylor_extrapolate(paths, t_img, v_hat, mode, cfg.projection);
    std::vector<Var> feats;
    for (std::size_t l = 0; l < data.scenes.front().hr_features.size(); ++l) {
        std::vector<const Tensor*> rows;
        for (std::size_t i : idx) {
            rows.push_back(&data.scenes[i].hr_features[l]);
        }
        feats.push_back(Var::constant(stack_rows(rows)));
    }
    return {cfm, perceptual_loss(*data.rae, z_hat, feats, stack_rows(targets), cfg.metric)};
}

/// Adam + cosine decay; each step draws one CFM time and one image-term time
/// per scene.
inline LfmCurve train_lfm(VelocityField& field, const LfmData& data, const LfmTrainConfig& cfg) {
    if (data.scenes.empty()) {
        throw ContractError("train_lfm: empty dataset");
    }
    if (uses_image_term(cfg)) {
        if (data.rae == nullptr || !data.rae->frozen()) {
            throw ContractError("train_lfm: the perceptual term needs a frozen RAE");
        }
    }
    if (!(cfg.perceptual_delta > 0.0 && cfg.perceptual_delta < 1.0)) {
        throw ContractError("train_lfm: perceptual_delta must be in (0, 1)");
    }
    Rng rng(derive_seed(cfg.seed, 0x1f3));
    Adam opt(field.parameters());
    LfmCurve curve;
    curve.rows.reserve(cfg.iters);
    const std::size_t n = data.scenes.size();
    const std::size_t B = cfg.batch == 0 ? n : cfg.batch;
    const double t_max = data.scenes.front().path.times.back() - cfg.perceptual_delta;
    for (std::size_t it = 0; it < cfg.iters; ++it) {
        std::vector<std::size_t> idx(B);
        std::vector<double> t_cfm(B), t_img(B);
        for (std::size_t b = 0; b < B; ++b) {
            idx[b] = cfg.batch == 0 ? b : rng.below(n);
            t_cfm[b] = rng.uniform();
            t_img[b] = rng.uniform(0.0, t_max);
        }
        opt.zero_grad();
        const auto [cfm, perc] = lfm_losses(field, data, idx, t_cfm, t_img, cfg);
        const Var total = uses_image_term(cfg) ? total_loss(cfm, perc, cfg.lambda) : cfm;
        backward(total);
        opt.step(cosine_lr(it, cfg.iters, cfg.lr_max, cfg.lr_min));
        curve.rows.push_back({cfm.value().item(), perc.value().item(), total.value().item()});
    }
    return curve;
}

}  // namespace trajflow
