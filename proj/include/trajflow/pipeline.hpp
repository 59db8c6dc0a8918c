#pragma once

// Pipeline stages shared by the CLI and the acceptance suite: data
// generation, the two training stages, the evaluation sweep and ablations.

#include <trajflow/config.hpp>
#include <trajflow/degsim.hpp>
#include <trajflow/image.hpp>
#include <trajflow/lfm.hpp>
#include <trajflow/rae.hpp>
#include <trajflow/sampler.hpp>
#include <trajflow/spline.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <vector>

namespace trajflow {

namespace fs = std::filesystem;

inline constexpr const char* kEvalFormat = "trajflow.eval/1";

/// Worker count for parallel evaluation: TRAJFLOW_THREADS if set, else the
/// number of hardware threads.
inline std::size_t worker_threads() {
    if (const char* env = std::getenv("TRAJFLOW_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end == env || *end != '\0' || n < 1) {
            throw ConfigError("TRAJFLOW_THREADS", std::string("expected a positive integer, got '") + env + "'");
        }
        return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled by exactly one worker; callers store results by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }

private:
    using Clock = std::chrono::steady_clock;
    Clock::time_point start_ = Clock::now();
};

inline std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return buf;
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

inline Dataset stage_gen_data(const RunConfig& cfg, const fs::path& root) {
    build_dataset(root, cfg.data);
    return load_dataset(root);
}

inline void write_rae_curve(const fs::path& path, const TrainCurve& curve) {
    std::ofstream os(path);
    if (!os) throw IoError(path.string() + ": cannot write loss curve");
    os << "iter,loss\n";
    for (std::size_t i = 0; i < curve.loss.size(); ++i) os << i << ',' << fmt(curve.loss[i]) << '\n';
}

/// Trains, freezes and saves the RAE; the loss curve goes to <ckpt>/loss.csv.
inline RaeModel stage_train_rae(const RunConfig& cfg, const Dataset& ds, const fs::path& ckpt) {
    RaeModel model(cfg.rae);
    const TrainCurve curve = train_rae(model, training_images(ds), cfg.rae_train);
    model.freeze();
    model.save(ckpt);
    write_rae_curve(ckpt / "loss.csv", curve);
    return model;
}

/// Trajectory metadata stored next to the field so sampling can map scales.
inline void save_levels(const fs::path& ckpt, const DegradationLevelSet& levels, TrajectoryKind kind) {
    nlohmann::json j;
    j["train_scales"] = levels.scales();
    j["trajectory"] = trajectory_name(kind);
    std::ofstream(ckpt / "levels.json") << j.dump(2) << '\n';
}

inline DegradationLevelSet load_levels(const fs::path& ckpt) {
    const auto path = ckpt / "levels.json";
    std::ifstream is(path);
    if (!is) throw IoError(path.string() + ": cannot open level metadata");
    try {
        nlohmann::json j;
        is >> j;
        return DegradationLevelSet(j.at("train_scales").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

/// Fits the training trajectories with the frozen RAE, trains and saves the
/// field. Writes <ckpt>/loss.csv, <ckpt>/levels.json and one fitted
/// trajectory per training scene under <ckpt>/splines/.
inline VelocityField stage_train_lfm(const RunConfig& cfg, const RaeModel& rae, const Dataset& ds,
                                     const fs::path& ckpt) {
    const LevelImages images = training_images(ds);
    const LfmData data = encode_scenes(rae, images.scenes, ds.levels.times(), cfg.trajectory);
    VelocityField field(cfg.field);
    const LfmCurve curve = train_lfm(field, data, cfg.lfm_train);
    field.save(ckpt);
    curve.write_csv(ckpt / "loss.csv");
    save_levels(ckpt, ds.levels, cfg.trajectory);
    const auto train = ds.split(Split::Train);
    for (std::size_t i = 0; i < train.size(); ++i) {
        save_spline(ckpt / "splines" / scene_dir_name(train[i]->id), data.scenes[i].path);
    }
    return field;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalSample {
    std::size_t scene = 0;
    double t = 0.0;
    double scale = 0.0;
    double psnr = 0.0;
    std::size_t nfe = 0;
    double seconds = 0.0;
};

struct EvalSummary {
    double t = 0.0;
    double scale = 0.0;
    double psnr = 0.0;
    double nfe = 0.0;
};

/// Per-(scene, t, scale) samples plus aggregates: mean per (t, scale) on the
/// grid, argmax t per scale, the value at each reference scale's own mapped
/// time, and the mean NFE at every knot and held-out time.
struct EvalReport {
    std::vector<double> scales;
    std::vector<EvalSample> samples;
    std::vector<EvalSummary> means;
    std::vector<EvalSummary> argmax;
    std::vector<EvalSummary> mapped;
    std::vector<EvalSummary> nfe_profile;

    const EvalSummary& mean_at(double t, double scale) const {
        for (const auto& m : means) {
            if (m.t == t && m.scale == scale) return m;
        }
        throw ContractError("eval report: no mean row at t=" + fmt(t) + ", scale " + fmt(scale));
    }

    const EvalSummary& argmax_for(double scale) const {
        for (const auto& m : argmax) {
            if (m.scale == scale) return m;
        }
        throw ContractError("eval report: no argmax row for scale " + fmt(scale));
    }

    const EvalSummary& mapped_for(double scale) const {
        for (const auto& m : mapped) {
            if (m.scale == scale) return m;
        }
        throw ContractError("eval report: no mapped row for scale " + fmt(scale));
    }

    /// Deterministic CSV: every value is a pure function of the inputs.
    void write_csv(const fs::path& path) const {
        std::ofstream os(path);
        if (!os) throw IoError(path.string() + ": cannot write eval report");
        os << "kind,scene,t,scale,psnr,nfe\n";
        for (const auto& s : samples) {
            os << "sample," << s.scene << ',' << fmt(s.t) << ',' << fmt(s.scale) << ',' << fmt(s.psnr) << ','
               << s.nfe << '\n';
        }
        const auto agg = [&](const char* kind, const std::vector<EvalSummary>& rows) {
            for (const auto& r : rows) {
                os << kind << ",," << fmt(r.t) << ',' << fmt(r.scale) << ',' << fmt(r.psnr) << ',' << fmt(r.nfe)
                   << '\n';
            }
        };
        agg("mean", means);
        agg("argmax", argmax);
        agg("mapped", mapped);
        for (const auto& r : nfe_profile) os << "nfe,," << fmt(r.t) << ",,," << fmt(r.nfe) << '\n';
    }

    /// Wall times live in their own file so eval.csv stays reproducible.
    void write_timing_csv(const fs::path& path) const {
        std::ofstream os(path);
        if (!os) throw IoError(path.string() + ": cannot write timing log");
        os << "scene,t,seconds\n";
        for (const auto& s : samples) {
            if (s.scale != scales.front()) continue;
            os << s.scene << ',' << fmt(s.t) << ',' << fmt(s.seconds) << '\n';
        }
    }

    void write_summary(const fs::path& path) const {
        nlohmann::json j;
        j["format"] = kEvalFormat;
        j["scales"] = scales;
        const auto rows = [](const std::vector<EvalSummary>& v) {
            nlohmann::json a = nlohmann::json::array();
            for (const auto& r : v) a.push_back({{"t", r.t}, {"scale", r.scale}, {"psnr", r.psnr}, {"nfe", r.nfe}});
            return a;
        };
        j["argmax"] = rows(argmax);
        j["mapped"] = rows(mapped);
        j["nfe_profile"] = rows(nfe_profile);
        std::ofstream(path) << j.dump(2) << '\n';
    }
};

/// For every eval scene and grid time: encode HR, integrate to t, decode with
/// the HR features and score against each reference scale. Scenes run in
/// parallel; results are gathered in scene order.
template <VelocityFunction F>
EvalReport eval_sweep(const F& field, const RaeModel& rae, const Dataset& ds, const std::vector<double>& grid,
                      const std::vector<double>& scales, const SolverConfig& solver, std::size_t threads) {
    for (double t : grid) {
        if (!(t >= 0.0 && t <= 1.0)) throw ContractError("eval: grid time " + fmt(t) + " outside [0, 1]");
    }
    EvalReport report;
    report.scales = scales;
    if (grid.empty()) return report;
    const auto scenes = ds.split(Split::Eval);
    for (const DatasetScene* sc : scenes) {
        for (double s : scales) {
            if (!sc->images.count(s)) {
                throw IoError((ds.root / scene_dir_name(sc->id) / scale_file_name(s)).string() +
                              ": missing reference image");
            }
        }
    }
    std::vector<double> profile_times;
    for (double s : ds.levels.scales()) profile_times.push_back(normalize_scale(s, ds.levels));
    for (double s : scales) profile_times.push_back(normalize_scale(s, ds.levels));
    std::sort(profile_times.begin(), profile_times.end());
    profile_times.erase(std::unique(profile_times.begin(), profile_times.end()), profile_times.end());

    struct SceneResult {
        std::vector<EvalSample> samples;
        std::vector<double> mapped_psnr;
        std::vector<std::size_t> profile_nfe;
    };
    std::vector<SceneResult> results(scenes.size());
    parallel_for(scenes.size(), threads, [&](std::size_t i) {
        const DatasetScene& sc = *scenes[i];
        const Encoding hr = rae.encode(sc.images.at(ds.levels.min()));
        const Tensor x0 = hr.z.value().reshaped({rae.latent_dim()});
        const auto solve = [&](double t) { return integrate(field, x0, t, solver); };
        SceneResult& r = results[i];
        for (double t : grid) {
            const Stopwatch clock;
            const OdeSolution sol = solve(t);
            const ImageTensor out = rae.decode_image(sol.state, hr.features);
            const double seconds = clock.seconds();
            for (double s : scales) r.samples.push_back({sc.id, t, s, psnr(out, sc.images.at(s)), sol.nfe, seconds});
        }
        for (double s : scales) {
            const OdeSolution sol = solve(normalize_scale(s, ds.levels));
            r.mapped_psnr.push_back(psnr(rae.decode_image(sol.state, hr.features), sc.images.at(s)));
        }
        for (double t : profile_times) r.profile_nfe.push_back(solve(t).nfe);
    });

    for (const auto& r : results) report.samples.insert(report.samples.end(), r.samples.begin(), r.samples.end());
    if (scenes.empty()) return report;

    const double n = static_cast<double>(scenes.size());
    for (std::size_t g = 0; g < grid.size(); ++g) {
        for (std::size_t k = 0; k < scales.size(); ++k) {
            EvalSummary m{grid[g], scales[k], 0.0, 0.0};
            for (const auto& r : results) {
                m.psnr += r.samples[g * scales.size() + k].psnr;
                m.nfe += static_cast<double>(r.samples[g * scales.size() + k].nfe);
            }
            m.psnr /= n;
            m.nfe /= n;
            report.means.push_back(m);
        }
    }
    for (std::size_t k = 0; k < scales.size(); ++k) {
        const EvalSummary* best = nullptr;
        for (std::size_t g = 0; g < grid.size(); ++g) {
            const EvalSummary& m = report.means[g * scales.size() + k];
            if (best == nullptr || m.psnr > best->psnr) best = &m;
        }
        if (best) report.argmax.push_back(*best);
        EvalSummary mapped{normalize_scale(scales[k], ds.levels), scales[k], 0.0, 0.0};
        for (const auto& r : results) mapped.psnr += r.mapped_psnr[k];
        mapped.psnr /= n;
        report.mapped.push_back(mapped);
    }
    for (std::size_t p = 0; p < profile_times.size(); ++p) {
        EvalSummary row{profile_times[p], 0.0, 0.0, 0.0};
        for (const auto& r : results) row.nfe += static_cast<double>(r.profile_nfe[p]);
        row.nfe /= n;
        report.nfe_profile.push_back(row);
    }
    return report;
}

inline void write_eval(const fs::path& dir, const EvalReport& report) {
    fs::create_directories(dir);
    report.write_csv(dir / "eval.csv");
    report.write_timing_csv(dir / "eval_timing.csv");
    report.write_summary(dir / "eval.json");
}

// ---------------------------------------------------------------------------
// Whole pipeline and ablations
// ---------------------------------------------------------------------------

/// Prefixes failures with the stage that raised them.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what, bool config)
        : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)), config_(config) {}

    const std::string& stage() const noexcept { return stage_; }
    bool config_error() const noexcept { return config_; }

private:
    std::string stage_;
    bool config_;
};

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw StageError(stage, e.what(), true);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what(), false);
    }
}

inline void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

struct PipelineResult {
    EvalReport report;
    std::vector<std::pair<std::string, double>> stage_seconds;
};

/// gen-data, train-rae, train-lfm and eval into one directory. `rae_source`,
/// when given, is a finished RAE checkpoint trained with the same data and
/// RAE settings; it is copied instead of retrained.
inline PipelineResult run_pipeline(const RunConfig& cfg, const fs::path& out, const fs::path& rae_source = {}) {
    PipelineResult result;
    write_effective_config(out, cfg);
    Stopwatch clock;
    const auto lap = [&](const std::string& stage) {
        result.stage_seconds.emplace_back(stage, clock.seconds());
        clock = Stopwatch();
    };

    log_line("[gen-data] " + out.string());
    const Dataset ds = run_stage("gen-data", [&] { return stage_gen_data(cfg, out); });
    lap("gen-data");

    const RaeModel rae = run_stage("train-rae", [&] {
        if (!rae_source.empty()) {
            log_line("[train-rae] reusing " + rae_source.string());
            fs::remove_all(out / "rae.ckpt");
            fs::copy(rae_source, out / "rae.ckpt", fs::copy_options::recursive);
            RaeModel m = RaeModel::load(out / "rae.ckpt");
            m.freeze();
            return m;
        }
        log_line("[train-rae] " + std::to_string(cfg.rae_train.iters) + " iterations");
        return stage_train_rae(cfg, ds, out / "rae.ckpt");
    });
    lap("train-rae");

    log_line("[train-lfm] " + std::to_string(cfg.lfm_train.iters) + " iterations");
    const VelocityField field = run_stage("train-lfm", [&] { return stage_train_lfm(cfg, rae, ds, out / "lfm.ckpt"); });
    lap("train-lfm");

    log_line("[eval] " + std::to_string(cfg.eval.grid().size()) + " grid points");
    result.report = run_stage("eval", [&] {
        const EvalReport r = eval_sweep(field, rae, ds, cfg.eval.grid(), ds.holdout_scales, cfg.sampler,
                                        worker_threads());
        write_eval(out, r);
        return r;
    });
    lap("eval");

    std::ofstream os(out / "timing.csv");
    os << "stage,seconds\n";
    for (const auto& [stage, s] : result.stage_seconds) os << stage << ',' << fmt(s) << '\n';
    return result;
}

struct AblationArm {
    TrajectoryKind trajectory = TrajectoryKind::NaturalCubic;
    PerceptualMode perceptual = PerceptualMode::Taylor3;
    bool skips = true;

    std::string name() const {
        return std::string(trajectory_name(trajectory)) + "_" + to_string(perceptual) + "_" +
               (skips ? "skips" : "noskips");
    }

    void apply(RunConfig& cfg) const {
        cfg.trajectory = trajectory;
        cfg.lfm_train.perceptual = perceptual;
        cfg.rae.skips = skips;
    }
};

/// Parses "trajectory:perceptual:skips", e.g. "spline:taylor3:on".
inline AblationArm parse_arm(const std::string& spec) {
    const std::string key = "arm '" + spec + "'";
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = spec.find(':', start);
        parts.push_back(spec.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    if (parts.size() != 3) throw ConfigError(key, "expected trajectory:perceptual:skips");
    AblationArm arm;
    arm.trajectory = parse_trajectory(key, parts[0]);
    arm.perceptual = parse_perceptual(key, parts[1]);
    if (parts[2] != "on" && parts[2] != "off") throw ConfigError(key, "skips must be 'on' or 'off'");
    arm.skips = parts[2] == "on";
    return arm;
}

/// The configured arm plus one arm per toggled component.
inline std::vector<AblationArm> default_arms(const RunConfig& cfg) {
    AblationArm base{cfg.trajectory, cfg.lfm_train.perceptual, cfg.rae.skips};
    std::vector<AblationArm> arms{base};
    AblationArm a = base;
    a.trajectory = base.trajectory == TrajectoryKind::NaturalCubic ? TrajectoryKind::PiecewiseLinear
                                                                    : TrajectoryKind::NaturalCubic;
    arms.push_back(a);
    for (PerceptualMode m : {PerceptualMode::Taylor3, PerceptualMode::Linear, PerceptualMode::None}) {
        if (m == base.perceptual) continue;
        a = base;
        a.perceptual = m;
        arms.push_back(a);
    }
    a = base;
    a.skips = !base.skips;
    arms.push_back(a);
    return arms;
}

struct ArmResult {
    AblationArm arm;
    EvalReport report;
};

inline void write_ablation_csv(const fs::path& path, const std::vector<ArmResult>& results) {
    std::ofstream os(path);
    if (!os) throw IoError(path.string() + ": cannot write ablation report");
    os << "arm,trajectory,perceptual,skips,c1_discontinuous,metric,t,scale,value\n";
    for (const auto& [arm, r] : results) {
        const std::string prefix = arm.name() + "," + trajectory_name(arm.trajectory) + "," +
                                   to_string(arm.perceptual) + "," + (arm.skips ? "on" : "off") + "," +
                                   (arm.trajectory == TrajectoryKind::PiecewiseLinear ? "true" : "false") + ",";
        for (const auto& m : r.mapped) {
            os << prefix << "heldout_psnr," << fmt(m.t) << ',' << fmt(m.scale) << ',' << fmt(m.psnr) << '\n';
        }
        for (const auto& m : r.argmax) {
            os << prefix << "argmax_psnr," << fmt(m.t) << ',' << fmt(m.scale) << ',' << fmt(m.psnr) << '\n';
        }
        for (const auto& m : r.means) {
            if (m.t == 0.0 || m.t == 1.0) {
                os << prefix << "psnr," << fmt(m.t) << ',' << fmt(m.scale) << ',' << fmt(m.psnr) << '\n';
            }
        }
        for (const auto& m : r.nfe_profile) os << prefix << "nfe," << fmt(m.t) << ",," << fmt(m.nfe) << '\n';
    }
}

/// One pipeline per arm under <out>/<arm name>/ with a shared seed; arms with
/// identical RAE settings share one RAE training run.
inline std::vector<ArmResult> run_ablation(const RunConfig& base, const std::vector<AblationArm>& arms,
                                           const fs::path& out) {
    if (arms.empty()) throw ConfigError("arms", "no ablation arms");
    std::vector<ArmResult> results;
    std::map<std::string, fs::path> trained_rae;
    for (const auto& arm : arms) {
        RunConfig cfg = base;
        arm.apply(cfg);
        const fs::path dir = out / arm.name();
        log_line("[ablate] arm " + arm.name());
        const std::string rae_key = to_json(cfg)["rae"].dump() + to_json(cfg)["data"].dump();
        const auto it = trained_rae.find(rae_key);
        PipelineResult r = run_pipeline(cfg, dir, it == trained_rae.end() ? fs::path() : it->second);
        trained_rae.emplace(rae_key, dir / "rae.ckpt");
        results.push_back({arm, std::move(r.report)});
    }
    write_ablation_csv(out / "ablate.csv", results);
    return results;
}

}  // namespace trajflow
