#pragma once

// Parameter checkpoints: a directory holding model.json plus one DGFT file
// per named parameter.

#include <trajflow/errors.hpp>
#include <trajflow/nn.hpp>
#include <trajflow/tensor.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace trajflow {

inline std::string param_file_name(const std::string& name) { return name + ".dgft"; }

/// Writes `meta` (with a "params" list appended) and every tensor in `params`.
inline void save_checkpoint(const std::filesystem::path& dir, nlohmann::json meta, const NamedParams& params) {
    std::filesystem::create_directories(dir);
    meta["params"] = nlohmann::json::array();
    for (const auto& [name, p] : params) {
        save_dgft(dir / param_file_name(name), p.value());
        meta["params"].push_back({{"name", name}, {"file", param_file_name(name)}, {"shape", p.shape()}});
    }
    std::ofstream(dir / "model.json") << meta.dump(2) << '\n';
}

inline nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir, const std::string& format) {
    const auto path = dir / "model.json";
    std::ifstream is(path);
    if (!is) {
        throw IoError(path.string() + ": cannot open checkpoint manifest");
    }
    nlohmann::json meta;
    try {
        is >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    if (meta.value("format", std::string()) != format) {
        throw IoError(path.string() + ": expected format '" + format + "'");
    }
    return meta;
}

/// Overwrites the values of `params` (already constructed with the right
/// architecture) from the checkpoint files. Names and shapes must match.
inline void load_checkpoint_params(const std::filesystem::path& dir, const nlohmann::json& meta,
                                   NamedParams& params) {
    const auto& listed = meta.at("params");
    if (listed.size() != params.size()) {
        throw IoError(dir.string() + ": checkpoint lists " + std::to_string(listed.size()) +
                      " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (listed[i].at("name").get<std::string>() != name) {
            throw IoError(dir.string() + ": parameter " + std::to_string(i) + " is '" +
                          listed[i].at("name").get<std::string>() + "', expected '" + name + "'");
        }
        const auto path = dir / listed[i].at("file").get<std::string>();
        Tensor t = load_dgft(path);
        if (t.shape() != p.shape()) {
            throw IoError(path.string() + ": shape " + shape_str(t.shape()) + ", expected " + shape_str(p.shape()));
        }
        p.mutable_value() = std::move(t);
    }
}

}  // namespace trajflow
