#pragma once

// Residual autoencoder on flattened images. The encoder's hidden activations
// of the HR pass are fed to the decoder through per-level skip projections,
// so the latent only has to carry what distinguishes a degraded image from
// its HR source.
//
//   encoder: x -> h1 -> h2 -> z        (GELU after hidden layers)
//   decoder: z -> g2 = gelu(W z + P2 h2_HR) -> g1 = gelu(W g2 + P1 h1_HR) -> x_hat

#include <trajflow/checkpoint.hpp>
#include <trajflow/degsim.hpp>
#include <trajflow/errors.hpp>
#include <trajflow/image.hpp>
#include <trajflow/nn.hpp>
#include <trajflow/rng.hpp>

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace trajflow {

struct RaeConfig {
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;
    std::vector<std::size_t> hidden{256, 128};  // one skip level per entry
    std::size_t latent_dim = 16;
    bool skips = true;
    bool linear = false;  // identity activations, for analytic toy models
    std::uint64_t seed = 0;

    std::size_t input_dim() const { return channels * height * width; }

    void validate() const {
        if (input_dim() == 0) {
            throw ContractError("rae: empty image shape");
        }
        if (latent_dim == 0 || latent_dim >= input_dim()) {
            throw ContractError("rae: latent_dim " + std::to_string(latent_dim) +
                                " must be in [1, C*H*W=" + std::to_string(input_dim()) + ")");
        }
        if (hidden.empty()) {
            throw ContractError("rae: need at least one hidden layer");
        }
        for (std::size_t w : hidden) {
            if (w == 0) {
                throw ContractError("rae: zero hidden width");
            }
        }
    }
};

/// Encoder output for a batch: latent [B×d_z] and per-level hidden features.
struct Encoding {
    Var z;
    std::vector<Var> features;  // features[l] is [B×hidden[l]]
};

class RaeModel {
public:
    RaeModel() = default;

    explicit RaeModel(RaeConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, 0xae));
        const std::size_t L = cfg_.hidden.size();
        std::size_t prev = cfg_.input_dim();
        for (std::size_t w : cfg_.hidden) {
            encoder_.emplace_back(prev, w, rng);
            prev = w;
        }
        to_latent_ = Linear(prev, cfg_.latent_dim, rng);

        prev = cfg_.latent_dim;
        for (std::size_t l = L; l-- > 0;) {
            decoder_.emplace_back(prev, cfg_.hidden[l], rng);
            if (cfg_.skips) {
                skips_.emplace_back(cfg_.hidden[l], cfg_.hidden[l], rng);
            }
            prev = cfg_.hidden[l];
        }
        to_pixels_ = Linear(prev, cfg_.input_dim(), rng);
    }

    const RaeConfig& config() const noexcept { return cfg_; }
    std::size_t levels() const { return cfg_.hidden.size(); }
    std::size_t latent_dim() const { return cfg_.latent_dim; }
    bool skips_enabled() const { return cfg_.skips; }

    /// x: [B×C·H·W] rows.
    Encoding encode(const Var& x) const {
        if (x.shape().size() != 2 || x.shape()[1] != cfg_.input_dim()) {
            throw DimensionError("rae encode: expected [B×" + std::to_string(cfg_.input_dim()) + "], got " +
                                 shape_str(x.shape()));
        }
        Encoding enc;
        Var h = x;
        for (const auto& layer : encoder_) {
            h = activate(layer(h));
            enc.features.push_back(h);
        }
        enc.z = to_latent_(h);
        return enc;
    }

    Encoding encode(const ImageTensor& image) const { return encode(Var::constant(image.as_row())); }

    /// Unclamped decoder output [B×C·H·W]; `hr_features` must come from encoding
    /// the HR image of each row's scene.
    Var decode_raw(const Var& z, const std::vector<Var>& hr_features) const {
        if (z.shape().size() != 2 || z.shape()[1] != cfg_.latent_dim) {
            throw DimensionError("rae decode: expected latent [B×" + std::to_string(cfg_.latent_dim) + "], got " +
                                 shape_str(z.shape()));
        }
        check_features(hr_features, z.shape()[0]);
        const std::size_t L = levels();
        Var g = z;
        for (std::size_t i = 0; i < L; ++i) {
            Var pre = decoder_[i](g);
            if (cfg_.skips) {
                pre = add(pre, skips_[i](hr_features[L - 1 - i]));
            }
            g = activate(pre);
        }
        return to_pixels_(g);
    }

    /// Decoded image rows clamped to [0, 1].
    Tensor decode(const Tensor& z, const std::vector<Var>& hr_features) const {
        Tensor out = decode_raw(Var::constant(z), hr_features).value();
        for (double& v : out.data()) {
            v = std::clamp(v, 0.0, 1.0);
        }
        return out;
    }

    ImageTensor decode_image(const Tensor& z, const std::vector<Var>& hr_features) const {
        const Tensor row = decode(z.reshaped({1, cfg_.latent_dim}), hr_features);
        return ImageTensor::from_row(row, cfg_.channels, cfg_.height, cfg_.width);
    }

    /// Zero features of the right shapes, for ablations.
    std::vector<Var> zero_features(std::size_t batch) const {
        std::vector<Var> out;
        for (std::size_t w : cfg_.hidden) {
            out.push_back(Var::constant(Tensor::zeros({batch, w})));
        }
        return out;
    }

    NamedParams parameters() const {
        NamedParams out;
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            encoder_[i].collect("enc" + std::to_string(i), out);
        }
        to_latent_.collect("to_latent", out);
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            decoder_[i].collect("dec" + std::to_string(i), out);
        }
        for (std::size_t i = 0; i < skips_.size(); ++i) {
            skips_[i].collect("skip" + std::to_string(i), out);
        }
        to_pixels_.collect("to_pixels", out);
        return out;
    }

    void freeze() {
        NamedParams params = parameters();
        for (auto& [name, p] : params) {
            p.set_requires_grad(false);
            p.zero_grad();
        }
        frozen_ = true;
    }

    bool frozen() const noexcept { return frozen_; }

    void save(const std::filesystem::path& dir) const {
        nlohmann::json meta;
        meta["format"] = "trajflow.rae/1";
        meta["channels"] = cfg_.channels;
        meta["height"] = cfg_.height;
        meta["width"] = cfg_.width;
        meta["hidden"] = cfg_.hidden;
        meta["latent_dim"] = cfg_.latent_dim;
        meta["skips"] = cfg_.skips;
        meta["linear"] = cfg_.linear;
        meta["seed"] = cfg_.seed;
        save_checkpoint(dir, std::move(meta), parameters());
    }

    static RaeModel load(const std::filesystem::path& dir) {
        const auto meta = read_checkpoint_meta(dir, "trajflow.rae/1");
        RaeConfig cfg;
        try {
            cfg.channels = meta.at("channels").get<std::size_t>();
            cfg.height = meta.at("height").get<std::size_t>();
            cfg.width = meta.at("width").get<std::size_t>();
            cfg.hidden = meta.at("hidden").get<std::vector<std::size_t>>();
            cfg.latent_dim = meta.at("latent_dim").get<std::size_t>();
            cfg.skips = meta.at("skips").get<bool>();
            cfg.linear = meta.value("linear", false);
            cfg.seed = meta.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError(dir.string() + ": " + e.what());
        }
        RaeModel model(cfg);
        NamedParams params = model.parameters();
        load_checkpoint_params(dir, meta, params);
        return model;
    }

private:
    Var activate(const Var& x) const { return cfg_.linear ? x : gelu(x); }

    void check_features(const std::vector<Var>& features, std::size_t batch) const {
        if (features.size() != levels()) {
            throw DimensionError("rae decode: expected " + std::to_string(levels()) + " feature levels, got " +
                                 std::to_string(features.size()));
        }
        for (std::size_t l = 0; l < levels(); ++l) {
            if (features[l].shape() != Shape{batch, cfg_.hidden[l]}) {
                throw DimensionError("rae decode: feature level " + std::to_string(l) + " has shape " +
                                     shape_str(features[l].shape()) + ", expected " +
                                     shape_str(Shape{batch, cfg_.hidden[l]}));
            }
        }
    }

    RaeConfig cfg_;
    std::vector<Linear> encoder_;
    Linear to_latent_;
    std::vector<Linear> decoder_;  // deepest level first
    std::vector<Linear> skips_;    // aligned with decoder_
    Linear to_pixels_;
    bool frozen_ = false;
};

/// Two-term reconstruction loss on paired batches (rows are images):
///   mse(D(E(I_hr); H_hr), I_hr) + mse(D(E(I_lr); H_hr), I_lr).
/// With hr_feature_grad = false the HR features are detached in the second
/// term, so only the first term trains the HR encoder pass through the skips.
inline std::pair<Var, Var> recon_terms(const RaeModel& model, const Tensor& hr, const Tensor& lr,
                                       bool hr_feature_grad = true) {
    if (hr.shape() != lr.shape()) {
        throw DimensionError("recon_loss: unpaired shapes " + shape_str(hr.shape()) + " vs " + shape_str(lr.shape()));
    }
    const Var x_hr = Var::constant(hr), x_lr = Var::constant(lr);
    const Encoding e_hr = model.encode(x_hr);
    const Var hr_term = mse(model.decode_raw(e_hr.z, e_hr.features), x_hr);

    std::vector<Var> feats = e_hr.features;
    if (!hr_feature_grad) {
        for (Var& f : feats) {
            f = detach(f);
        }
    }
    const Encoding e_lr = model.encode(x_lr);
    const Var lr_term = mse(model.decode_raw(e_lr.z, feats), x_lr);
    return {hr_term, lr_term};
}

inline Var recon_loss(const RaeModel& model, const Tensor& hr, const Tensor& lr, bool hr_feature_grad = true) {
    const auto [hr_term, lr_term] = recon_terms(model, hr, lr, hr_feature_grad);
    return add(hr_term, lr_term);
}

inline Var recon_loss(const RaeModel& model, const ImageTensor& hr, const ImageTensor& lr,
                      bool hr_feature_grad = true) {
    if (!hr.same_shape(lr)) {
        throw DimensionError("recon_loss: unpaired image shapes");
    }
    return recon_loss(model, hr.as_row(), lr.as_row(), hr_feature_grad);
}

/// Per-scene images at each training level, as 1×D rows; [scene][level] with
/// level 0 the HR image.
struct LevelImages {
    std::vector<double> scales;
    std::vector<std::vector<Tensor>> scenes;
};

/// Training-split images at the training scales (held-out scales excluded).
inline LevelImages training_images(const Dataset& ds, Split split = Split::Train) {
    LevelImages out;
    out.scales = ds.levels.scales();
    for (const DatasetScene* scene : ds.split(split)) {
        std::vector<Tensor> rows;
        for (double s : out.scales) {
            const auto it = scene->images.find(s);
            if (it == scene->images.end()) {
                throw IoError(ds.root.string() + ": scene " + std::to_string(scene->id) + " lacks scale " +
                              format_scale(s));
            }
            rows.push_back(it->second.as_row());
        }
        out.scenes.push_back(std::move(rows));
    }
    return out;
}

struct RaeTrainConfig {
    std::size_t iters = 3000;
    std::size_t batch = 32;
    double lr_max = 2e-3;
    double lr_min = 1e-5;
    bool hr_feature_grad = true;
    // Random flips/transposes applied identically to both images of a pair.
    // Isotropic blur with symmetric borders commutes with them, so augmented
    // pairs are exact pairs.
    bool augment = true;
    std::uint64_t seed = 0;
};

struct TrainCurve {
    std::vector<double> loss;

    std::vector<double> smoothed(double alpha = 0.05) const { return ema_smooth(loss, alpha); }
};

/// Stacks the selected rows into a [B×D] batch.
inline Tensor stack_rows(const std::vector<const Tensor*>& rows) {
    if (rows.empty()) {
        throw ContractError("stack_rows: empty batch");
    }
    const std::size_t d = rows.front()->size();
    Tensor out(Shape{rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i]->size() != d) {
            throw DimensionError("stack_rows: ragged rows");
        }
        std::copy(rows[i]->data().begin(), rows[i]->data().end(), out.data().begin() + i * d);
    }
    return out;
}

/// Adam + cosine decay. Each batch row pairs a random scene's HR image with
/// the same scene at a level drawn uniformly from the non-HR levels.
inline TrainCurve train_rae(RaeModel& model, const LevelImages& data, const RaeTrainConfig& cfg) {
    if (data.scenes.empty()) {
        throw ContractError("train_rae: empty dataset");
    }
    if (data.scales.size() < 2) {
        throw ContractError("train_rae: need at least one degraded level");
    }
    if (model.frozen()) {
        throw ContractError("train_rae: model is frozen");
    }
    if (cfg.batch == 0) {
        throw ContractError("train_rae: batch must be positive");
    }
    Rng rng(derive_seed(cfg.seed, 0x7a1e));
    Adam opt(model.parameters());
    const RaeConfig& rc = model.config();
    const bool square = rc.height == rc.width;
    TrainCurve curve;
    curve.loss.reserve(cfg.iters);
    for (std::size_t it = 0; it < cfg.iters; ++it) {
        std::vector<Tensor> hr_rows, lr_rows;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto& scene = data.scenes[rng.below(data.scenes.size())];
            const Tensor& hr = scene[0];
            const Tensor& lr = scene[1 + rng.below(data.scales.size() - 1)];
            if (cfg.augment) {
                const auto k = static_cast<unsigned>(rng.below(square ? 8 : 4));
                hr_rows.push_back(dihedral_row(hr, k, rc.channels, rc.height, rc.width));
                lr_rows.push_back(dihedral_row(lr, k, rc.channels, rc.height, rc.width));
            } else {
                hr_rows.push_back(hr);
                lr_rows.push_back(lr);
            }
        }
        std::vector<const Tensor*> hr, lr;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            hr.push_back(&hr_rows[b]);
            lr.push_back(&lr_rows[b]);
        }
        opt.zero_grad();
        const Var loss = recon_loss(model, stack_rows(hr), stack_rows(lr), cfg.hr_feature_grad);
        backward(loss);
        opt.step(cosine_lr(it, cfg.iters, cfg.lr_max, cfg.lr_min));
        curve.loss.push_back(loss.value().item());
    }
    return curve;
}

/// Mean clamped-decode MSE over every (scene, level) pair, decoding each
/// level's latent with its scene's HR features.
inline double reconstruction_mse(const RaeModel& model, const LevelImages& data) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& scene : data.scenes) {
        const Encoding hr = model.encode(Var::constant(scene[0]));
        for (const Tensor& img : scene) {
            const Tensor out = model.decode(model.encode(Var::constant(img)).z.value(), hr.features);
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double d = out[i] - img[i];
                total += d * d;
            }
            count += out.size();
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace trajflow
