#pragma once

// Run configuration: one JSON document with sections data, rae, lfm,
// sampler and eval plus a mandatory top-level seed. Parsing is strict:
// unknown keys, wrong types and out-of-range values raise ConfigError
// naming the dotted key path.

#include <trajflow/degsim.hpp>
#include <trajflow/errors.hpp>
#include <trajflow/lfm.hpp>
#include <trajflow/rae.hpp>
#include <trajflow/sampler.hpp>
#include <trajflow/spline.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace trajflow {

struct EvalConfig {
    std::size_t grid_points = 21;  // uniform t grid on [0, 1]
    std::vector<double> t_grid;    // explicit grid; overrides grid_points when set

    std::vector<double> grid() const {
        if (!t_grid.empty() || grid_points == 0) return t_grid;
        if (grid_points == 1) return {0.0};
        std::vector<double> out;
        for (std::size_t i = 0; i < grid_points; ++i) {
            out.push_back(static_cast<double>(i) / static_cast<double>(grid_points - 1));
        }
        return out;
    }
};

struct RunConfig {
    std::uint64_t seed = 0;
    DatasetConfig data;
    RaeConfig rae;
    RaeTrainConfig rae_train;
    VelocityFieldConfig field;
    LfmTrainConfig lfm_train;
    TrajectoryKind trajectory = TrajectoryKind::NaturalCubic;
    SolverConfig sampler;
    EvalConfig eval;

    /// Pushes the top-level seed and the latent size into every component.
    void propagate() {
        data.seed = rae.seed = rae_train.seed = field.seed = lfm_train.seed = seed;
        field.latent_dim = rae.latent_dim;
    }
};

inline const char* trajectory_name(TrajectoryKind k) { return k == TrajectoryKind::NaturalCubic ? "spline" : "linear"; }

inline TrajectoryKind parse_trajectory(const std::string& key, const std::string& s) {
    if (s == "spline") return TrajectoryKind::NaturalCubic;
    if (s == "linear") return TrajectoryKind::PiecewiseLinear;
    throw ConfigError(key, "expected 'spline' or 'linear', got '" + s + "'");
}

inline PerceptualMode parse_perceptual(const std::string& key, const std::string& s) {
    if (s == "none") return PerceptualMode::None;
    if (s == "linear") return PerceptualMode::Linear;
    if (s == "taylor3") return PerceptualMode::Taylor3;
    throw ConfigError(key, "expected 'none', 'linear' or 'taylor3', got '" + s + "'");
}

inline Projection parse_projection(const std::string& key, const std::string& s) {
    if (s == "next") return Projection::Next;
    if (s == "nearest") return Projection::Nearest;
    throw ConfigError(key, "expected 'next' or 'nearest', got '" + s + "'");
}

inline PerceptualMetric parse_metric(const std::string& key, const std::string& s) {
    if (s == "edge") return PerceptualMetric::EdgeAware;
    if (s == "mse") return PerceptualMetric::Mse;
    throw ConfigError(key, "expected 'edge' or 'mse', got '" + s + "'");
}

namespace config_detail {

using nlohmann::json;

// Visits every key of one JSON object; keys without a handler are errors.
class Section {
public:
    Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
        if (!obj_.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "expected an object");
    }

    std::string key(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

    void on(const std::string& name, std::function<void(const json&, const std::string&)> fn) {
        handlers_[name] = std::move(fn);
    }

    void run() const {
        for (const auto& [name, value] : obj_.items()) {
            const auto it = handlers_.find(name);
            if (it == handlers_.end()) throw ConfigError(key(name), "unknown key");
            it->second(value, key(name));
        }
    }

private:
    const json& obj_;
    std::string prefix_;
    std::map<std::string, std::function<void(const json&, const std::string&)>> handlers_;
};

inline double number(const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key, "expected a number");
    return v.get<double>();
}

inline double positive(const json& v, const std::string& key) {
    const double x = number(v, key);
    if (!(x > 0.0)) throw ConfigError(key, "must be positive");
    return x;
}

inline double non_negative(const json& v, const std::string& key) {
    const double x = number(v, key);
    if (!(x >= 0.0)) throw ConfigError(key, "must be non-negative");
    return x;
}

inline std::uint64_t count(const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError(key, "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

inline std::size_t positive_count(const json& v, const std::string& key) {
    const auto n = count(v, key);
    if (n == 0) throw ConfigError(key, "must be at least 1");
    return n;
}

inline bool boolean(const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
    return v.get<bool>();
}

inline std::string string(const json& v, const std::string& key) {
    if (!v.is_string()) throw ConfigError(key, "expected a string");
    return v.get<std::string>();
}

inline std::vector<double> numbers(const json& v, const std::string& key) {
    if (!v.is_array()) throw ConfigError(key, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(number(v[i], key + "[" + std::to_string(i) + "]"));
    return out;
}

inline std::vector<std::size_t> widths(const json& v, const std::string& key) {
    if (!v.is_array() || v.empty()) throw ConfigError(key, "expected a nonempty array of layer widths");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(positive_count(v[i], key + "[" + std::to_string(i) + "]"));
    return out;
}

inline void parse_data(const json& j, const std::string& prefix, DatasetConfig& c) {
    Section s(j, prefix);
    s.on("n_train", [&](const json& v, const std::string& k) { c.n_train = positive_count(v, k); });
    s.on("n_eval", [&](const json& v, const std::string& k) { c.n_eval = positive_count(v, k); });
    s.on("train_scales", [&](const json& v, const std::string& k) { c.train_scales = numbers(v, k); });
    s.on("holdout_scales", [&](const json& v, const std::string& k) { c.holdout_scales = numbers(v, k); });
    s.on("kappa", [&](const json& v, const std::string& k) { c.kappa = positive(v, k); });
    s.on("types", [&](const json& v, const std::string& k) {
        if (!v.is_array() || v.empty()) throw ConfigError(k, "expected a nonempty array of scene types");
        c.types.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::string key = k + "[" + std::to_string(i) + "]";
            try {
                c.types.push_back(parse_scene_type(string(v[i], key)));
            } catch (const ContractError& e) {
                throw ConfigError(key, e.what());
            }
        }
    });
    s.run();
}

inline void parse_rae(const json& j, const std::string& prefix, RaeConfig& m, RaeTrainConfig& t) {
    Section s(j, prefix);
    s.on("hidden", [&](const json& v, const std::string& k) { m.hidden = widths(v, k); });
    s.on("latent_dim", [&](const json& v, const std::string& k) { m.latent_dim = positive_count(v, k); });
    s.on("skips", [&](const json& v, const std::string& k) { m.skips = boolean(v, k); });
    s.on("iters", [&](const json& v, const std::string& k) { t.iters = count(v, k); });
    s.on("batch", [&](const json& v, const std::string& k) { t.batch = positive_count(v, k); });
    s.on("lr_max", [&](const json& v, const std::string& k) { t.lr_max = non_negative(v, k); });
    s.on("lr_min", [&](const json& v, const std::string& k) { t.lr_min = non_negative(v, k); });
    s.on("hr_feature_grad", [&](const json& v, const std::string& k) { t.hr_feature_grad = boolean(v, k); });
    s.on("augment", [&](const json& v, const std::string& k) { t.augment = boolean(v, k); });
    s.run();
}

inline void parse_lfm(const json& j, const std::string& prefix, RunConfig& c) {
    Section s(j, prefix);
    auto& f = c.field;
    auto& t = c.lfm_train;
    s.on("hidden", [&](const json& v, const std::string& k) { f.hidden = positive_count(v, k); });
    s.on("layers", [&](const json& v, const std::string& k) { f.layers = positive_count(v, k); });
    s.on("frequencies", [&](const json& v, const std::string& k) { f.frequencies = positive_count(v, k); });
    s.on("iters", [&](const json& v, const std::string& k) { t.iters = count(v, k); });
    s.on("batch", [&](const json& v, const std::string& k) { t.batch = count(v, k); });
    s.on("lr_max", [&](const json& v, const std::string& k) { t.lr_max = non_negative(v, k); });
    s.on("lr_min", [&](const json& v, const std::string& k) { t.lr_min = non_negative(v, k); });
    s.on("lambda", [&](const json& v, const std::string& k) { t.lambda = non_negative(v, k); });
    s.on("perceptual", [&](const json& v, const std::string& k) { t.perceptual = parse_perceptual(k, string(v, k)); });
    s.on("projection", [&](const json& v, const std::string& k) { t.projection = parse_projection(k, string(v, k)); });
    s.on("metric", [&](const json& v, const std::string& k) { t.metric = parse_metric(k, string(v, k)); });
    s.on("perceptual_delta", [&](const json& v, const std::string& k) {
        t.perceptual_delta = positive(v, k);
        if (t.perceptual_delta >= 1.0) throw ConfigError(k, "must be below 1");
    });
    s.on("trajectory", [&](const json& v, const std::string& k) { c.trajectory = parse_trajectory(k, string(v, k)); });
    s.run();
}

inline void parse_sampler(const json& j, const std::string& prefix, SolverConfig& c) {
    Section s(j, prefix);
    s.on("rtol", [&](const json& v, const std::string& k) { c.rtol = positive(v, k); });
    s.on("atol", [&](const json& v, const std::string& k) { c.atol = positive(v, k); });
    s.on("h0", [&](const json& v, const std::string& k) { c.h0 = positive(v, k); });
    s.on("max_steps", [&](const json& v, const std::string& k) { c.max_steps = positive_count(v, k); });
    s.on("safety", [&](const json& v, const std::string& k) { c.safety = positive(v, k); });
    s.on("min_scale", [&](const json& v, const std::string& k) { c.min_scale = positive(v, k); });
    s.on("max_scale", [&](const json& v, const std::string& k) { c.max_scale = positive(v, k); });
    s.run();
}

inline void parse_eval(const json& j, const std::string& prefix, EvalConfig& c) {
    Section s(j, prefix);
    s.on("grid_points", [&](const json& v, const std::string& k) { c.grid_points = count(v, k); });
    s.on("t_grid", [&](const json& v, const std::string& k) {
        c.t_grid = numbers(v, k);
        for (double t : c.t_grid) {
            if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(k, "times must lie in [0, 1]");
        }
    });
    s.run();
}

}  // namespace config_detail

/// Cross-field checks that need the whole document.
inline void validate(const RunConfig& c) {
    std::optional<DegradationLevelSet> levels;
    try {
        levels.emplace(c.data.train_scales);
    } catch (const ContractError& e) {
        throw ConfigError("data.train_scales", e.what());
    }
    if (c.data.train_scales.front() < 1.0) throw ConfigError("data.train_scales", "scales must be at least 1");
    try {
        c.data.validate();
    } catch (const ContractError& e) {
        throw ConfigError("data.holdout_scales", e.what());
    }
    if (c.rae.latent_dim >= c.rae.input_dim()) {
        throw ConfigError("rae.latent_dim", "must be smaller than the image size " + std::to_string(c.rae.input_dim()));
    }
    if (c.rae_train.lr_min > c.rae_train.lr_max) throw ConfigError("rae.lr_min", "exceeds rae.lr_max");
    if (c.lfm_train.lr_min > c.lfm_train.lr_max) throw ConfigError("lfm.lr_min", "exceeds lfm.lr_max");
    if (c.lfm_train.batch > c.data.n_train) throw ConfigError("lfm.batch", "exceeds data.n_train");
    if (c.sampler.min_scale > c.sampler.max_scale) throw ConfigError("sampler.min_scale", "exceeds sampler.max_scale");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using namespace config_detail;
    RunConfig c;
    bool has_seed = false;
    Section s(j, "");
    s.on("seed", [&](const json& v, const std::string& k) {
        c.seed = count(v, k);
        has_seed = true;
    });
    s.on("data", [&](const json& v, const std::string& k) { parse_data(v, k, c.data); });
    s.on("rae", [&](const json& v, const std::string& k) { parse_rae(v, k, c.rae, c.rae_train); });
    s.on("lfm", [&](const json& v, const std::string& k) { parse_lfm(v, k, c); });
    s.on("sampler", [&](const json& v, const std::string& k) { parse_sampler(v, k, c.sampler); });
    s.on("eval", [&](const json& v, const std::string& k) { parse_eval(v, k, c.eval); });
    s.run();
    if (!has_seed) throw ConfigError("seed", "missing mandatory key");
    c.propagate();
    validate(c);
    return c;
}

inline nlohmann::json read_config_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path.string(), "cannot open config file");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string(), e.what());
    }
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_config_json(path)); }

/// The effective configuration with every default filled in.
inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json types = nlohmann::json::array();
    for (auto t : c.data.types) types.push_back(to_string(t));
    nlohmann::json j;
    j["seed"] = c.seed;
    j["data"] = {{"n_train", c.data.n_train},           {"n_eval", c.data.n_eval},
                 {"train_scales", c.data.train_scales}, {"holdout_scales", c.data.holdout_scales},
                 {"kappa", c.data.kappa},               {"types", types}};
    j["rae"] = {{"hidden", c.rae.hidden},
                {"latent_dim", c.rae.latent_dim},
                {"skips", c.rae.skips},
                {"iters", c.rae_train.iters},
                {"batch", c.rae_train.batch},
                {"lr_max", c.rae_train.lr_max},
                {"lr_min", c.rae_train.lr_min},
                {"hr_feature_grad", c.rae_train.hr_feature_grad},
                {"augment", c.rae_train.augment}};
    j["lfm"] = {{"hidden", c.field.hidden},
                {"layers", c.field.layers},
                {"frequencies", c.field.frequencies},
                {"iters", c.lfm_train.iters},
                {"batch", c.lfm_train.batch},
                {"lr_max", c.lfm_train.lr_max},
                {"lr_min", c.lfm_train.lr_min},
                {"lambda", c.lfm_train.lambda},
                {"perceptual", to_string(c.lfm_train.perceptual)},
                {"projection", to_string(c.lfm_train.projection)},
                {"metric", to_string(c.lfm_train.metric)},
                {"perceptual_delta", c.lfm_train.perceptual_delta},
                {"trajectory", trajectory_name(c.trajectory)}};
    j["sampler"] = {{"rtol", c.sampler.rtol},           {"atol", c.sampler.atol},
                    {"h0", c.sampler.h0},               {"max_steps", c.sampler.max_steps},
                    {"safety", c.sampler.safety},       {"min_scale", c.sampler.min_scale},
                    {"max_scale", c.sampler.max_scale}};
    j["eval"] = {{"grid_points", c.eval.grid_points}, {"t_grid", c.eval.t_grid}};
    return j;
}

inline void write_effective_config(const std::filesystem::path& dir, const RunConfig& c) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << to_json(c).dump(2) << '\n';
}

}  // namespace trajflow
