#pragma once

// Synthetic paired multi-scale data: procedural 16×16 scenes, scale-indexed
// Gaussian blur, and the on-disk dataset layout
//
//   <root>/manifest.json
//   <root>/scene_<id>/s_<scale>.dgft

#include <trajflow/errors.hpp>
#include <trajflow/image.hpp>
#include <trajflow/rng.hpp>
#include <trajflow/spline.hpp>
#include <trajflow/tensor.hpp>

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

namespace trajflow {

enum class SceneType { Checker, Gradient, BlobMixture };

inline std::string to_string(SceneType type) {
    switch (type) {
        case SceneType::Checker: return "checker";
        case SceneType::Gradient: return "gradient";
        case SceneType::BlobMixture: return "blob-mixture";
    }
    return "?";
}

inline SceneType parse_scene_type(const std::string& name) {
    if (name == "checker") return SceneType::Checker;
    if (name == "gradient") return SceneType::Gradient;
    if (name == "blob-mixture") return SceneType::BlobMixture;
    throw ContractError("unknown scene type '" + name + "' (expected checker, gradient or blob-mixture)");
}

struct Scene {
    std::uint64_t seed = 0;
    SceneType type = SceneType::Checker;
    ImageTensor image;
};

inline constexpr std::size_t kSceneSize = 16;

/// Deterministic grayscale scene in [0, 1].
inline Scene render_scene(std::uint64_t seed, SceneType type, std::size_t height = kSceneSize,
                          std::size_t width = kSceneSize) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(type) + 1));
    ImageTensor img(1, height, width);
    switch (type) {
        case SceneType::Checker: {
            const std::size_t cell = 2 + rng.below(3);
            const std::size_t ox = rng.below(cell), oy = rng.below(cell);
            const double lo = rng.uniform(0.05, 0.35);
            const double hi = rng.uniform(0.65, 0.95);
            for (std::size_t y = 0; y < height; ++y) {
                for (std::size_t x = 0; x < width; ++x) {
                    const bool odd = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 1;
                    img.at(0, y, x) = odd ? hi : lo;
                }
            }
            break;
        }
        case SceneType::Gradient: {
            const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double amp = rng.uniform(0.5, 0.9);
            const double cx = 0.5 * static_cast<double>(width - 1), cy = 0.5 * static_cast<double>(height - 1);
            const double span = static_cast<double>(std::max(height, width));
            for (std::size_t y = 0; y < height; ++y) {
                for (std::size_t x = 0; x < width; ++x) {
                    const double u = ((x - cx) * std::cos(angle) + (y - cy) * std::sin(angle)) / span;
                    img.at(0, y, x) = std::clamp(0.5 + amp * u, 0.0, 1.0);
                }
            }
            break;
        }
        case SceneType::BlobMixture: {
            const std::size_t blobs = 3 + rng.below(4);
            std::vector<std::array<double, 4>> params;
            for (std::size_t b = 0; b < blobs; ++b) {
                params.push_back({rng.uniform(0.0, static_cast<double>(width)),
                                  rng.uniform(0.0, static_cast<double>(height)), rng.uniform(1.0, 3.0),
                                  rng.uniform(-0.45, 0.45)});
            }
            for (std::size_t y = 0; y < height; ++y) {
                for (std::size_t x = 0; x < width; ++x) {
                    double v = 0.5;
                    for (const auto& [bx, by, r, a] : params) {
                        const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
                        v += a * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
                    }
                    img.at(0, y, x) = std::clamp(v, 0.0, 1.0);
                }
            }
            break;
        }
    }
    return {seed, type, std::move(img)};
}

/// Gaussian blur whose width grows linearly with the scale: sigma = kappa (s - s1).
struct DegradationOp {
    double kappa = 0.6;
    double base_scale = 1.0;

    double sigma(double s) const { return kappa * (s - base_scale); }
    std::size_t radius(double s) const { return static_cast<std::size_t>(std::ceil(3.0 * sigma(s))); }
};

/// Normalized 1-D Gaussian taps for offsets -r..r.
inline std::vector<double> gaussian_kernel(double sigma, std::size_t radius) {
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(radius);
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (double& v : k) {
        v /= total;
    }
    return k;
}

/// Half-sample symmetric reflection of index i into [0, n): -1 -> 0, n -> n-1.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t m = i % period;
    if (m < 0) {
        m += period;
    }
    if (m >= static_cast<std::ptrdiff_t>(n)) {
        m = period - 1 - m;
    }
    return static_cast<std::size_t>(m);
}

/// Separable blur with reflect boundary. Same resolution as the input; the
/// base scale returns the input unchanged.
inline ImageTensor degrade(const ImageTensor& image, double s, const DegradationOp& op = {}) {
    if (!(s >= op.base_scale)) {
        throw ContractError("degrade: scale " + std::to_string(s) + " below base scale " +
                            std::to_string(op.base_scale));
    }
    const double sigma = op.sigma(s);
    if (sigma == 0.0) {
        return image;
    }
    const std::size_t r = op.radius(s);
    const std::vector<double> k = gaussian_kernel(sigma, r);
    const std::size_t C = image.channels(), H = image.height(), W = image.width();
    const auto ri = static_cast<std::ptrdiff_t>(r);

    ImageTensor tmp(C, H, W), out(C, H, W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (std::ptrdiff_t d = -ri; d <= ri; ++d) {
                    acc += k[static_cast<std::size_t>(d + ri)] *
                           image.at(c, y, reflect_index(static_cast<std::ptrdiff_t>(x) + d, W));
                }
                tmp.at(c, y, x) = acc;
            }
        }
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (std::ptrdiff_t d = -ri; d <= ri; ++d) {
                    acc += k[static_cast<std::size_t>(d + ri)] *
                           tmp.at(c, reflect_index(static_cast<std::ptrdiff_t>(y) + d, H), x);
                }
                out.at(c, y, x) = std::clamp(acc, 0.0, 1.0);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct DatasetConfig {
    std::size_t n_train = 64;
    std::size_t n_eval = 16;
    std::vector<double> train_scales{1.0, 2.0, 4.0};
    std::vector<double> holdout_scales{3.0};
    double kappa = 0.6;
    std::vector<SceneType> types{SceneType::Checker, SceneType::Gradient, SceneType::BlobMixture};
    std::uint64_t seed = 0;

    /// Throws ContractError on overlapping or out-of-range scale sets.
    DegradationLevelSet validate() const {
        DegradationLevelSet levels(train_scales);
        for (double h : holdout_scales) {
            if (std::find(train_scales.begin(), train_scales.end(), h) != train_scales.end()) {
                throw ContractError("dataset: held-out scale " + std::to_string(h) + " is also a training scale");
            }
            if (!(h >= levels.min() && h <= levels.max())) {
                throw ContractError("dataset: held-out scale " + std::to_string(h) + " outside training range");
            }
        }
        if (types.empty()) {
            throw ContractError("dataset: no scene types");
        }
        if (!(kappa > 0.0)) {
            throw ContractError("dataset: kappa must be positive");
        }
        return levels;
    }
};

/// Shortest round-trip decimal form, used in file names ("1", "2.5").
inline std::string format_scale(double s) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), s);
    return std::string(buf, res.ptr);
}

inline std::string scene_dir_name(std::size_t id) { return "scene_" + std::to_string(id); }
inline std::string scale_file_name(double s) { return "s_" + format_scale(s) + ".dgft"; }

enum class Split { Train, Eval };

struct DatasetScene {
    std::size_t id = 0;
    std::uint64_t seed = 0;
    SceneType type = SceneType::Checker;
    Split split = Split::Train;
    std::map<double, ImageTensor> images;  // every rendered scale
};

struct Dataset {
    std::filesystem::path root;
    DegradationLevelSet levels;
    std::vector<double> holdout_scales;
    double kappa = 0.6;
    std::vector<DatasetScene> scenes;

    std::vector<const DatasetScene*> split(Split which) const {
        std::vector<const DatasetScene*> out;
        for (const auto& s : scenes) {
            if (s.split == which) {
                out.push_back(&s);
            }
        }
        return out;
    }
};

inline std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t id) {
    return derive_seed(dataset_seed, 0x5ce0e000ULL + id);
}

/// Render every scene at every train and held-out scale and write the
/// dataset. Held-out images are flagged eval_only in the manifest.
inline nlohmann::json build_dataset(const std::filesystem::path& root, const DatasetConfig& cfg) {
    const DegradationLevelSet levels = cfg.validate();
    std::vector<double> all_scales = cfg.train_scales;
    all_scales.insert(all_scales.end(), cfg.holdout_scales.begin(), cfg.holdout_scales.end());
    std::sort(all_scales.begin(), all_scales.end());

    const DegradationOp op{cfg.kappa, levels.min()};
    std::filesystem::create_directories(root);

    nlohmann::json manifest;
    manifest["format"] = "trajflow.dataset/1";
    manifest["seed"] = cfg.seed;
    manifest["height"] = kSceneSize;
    manifest["width"] = kSceneSize;
    manifest["kappa"] = cfg.kappa;
    manifest["train_scales"] = cfg.train_scales;
    manifest["holdout_scales"] = cfg.holdout_scales;
    manifest["scenes"] = nlohmann::json::array();

    const std::size_t total = cfg.n_train + cfg.n_eval;
    for (std::size_t id = 0; id < total; ++id) {
        const std::uint64_t seed = scene_seed(cfg.seed, id);
        const SceneType type = cfg.types[id % cfg.types.size()];
        const Scene scene = render_scene(seed, type);
        const auto dir = root / scene_dir_name(id);
        std::filesystem::create_directories(dir);

        nlohmann::json entry;
        entry["id"] = id;
        entry["seed"] = seed;
        entry["type"] = to_string(type);
        entry["split"] = id < cfg.n_train ? "train" : "eval";
        entry["files"] = nlohmann::json::array();
        for (double s : all_scales) {
            const bool eval_only = std::find(cfg.holdout_scales.begin(), cfg.holdout_scales.end(), s) !=
                                   cfg.holdout_scales.end();
            save_dgft(dir / scale_file_name(s), degrade(scene.image, s, op).tensor());
            entry["files"].push_back({{"scale", s},
                                      {"path", scene_dir_name(id) + "/" + scale_file_name(s)},
                                      {"eval_only", eval_only}});
        }
        manifest["scenes"].push_back(std::move(entry));
    }
    std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
    return manifest;
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    const auto manifest_path = root / "manifest.json";
    std::ifstream is(manifest_path);
    if (!is) {
        throw IoError(manifest_path.string() + ": cannot open dataset manifest");
    }
    try {
        nlohmann::json manifest;
        is >> manifest;
        Dataset ds;
        ds.root = root;
        ds.levels = DegradationLevelSet(manifest.at("train_scales").get<std::vector<double>>());
        ds.holdout_scales = manifest.at("holdout_scales").get<std::vector<double>>();
        ds.kappa = manifest.at("kappa").get<double>();
        for (const auto& entry : manifest.at("scenes")) {
            DatasetScene scene;
            scene.id = entry.at("id").get<std::size_t>();
            scene.seed = entry.at("seed").get<std::uint64_t>();
            scene.type = parse_scene_type(entry.at("type").get<std::string>());
            scene.split = entry.at("split").get<std::string>() == "eval" ? Split::Eval : Split::Train;
            for (const auto& f : entry.at("files")) {
                const auto path = root / f.at("path").get<std::string>();
                if (!std::filesystem::exists(path)) {
                    throw IoError(path.string() + ": image listed in manifest is missing");
                }
                scene.images.emplace(f.at("scale").get<double>(), ImageTensor(load_dgft(path)));
            }
            ds.scenes.push_back(std::move(scene));
        }
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(manifest_path.string() + ": " + e.what());
    }
}

}  // namespace trajflow
