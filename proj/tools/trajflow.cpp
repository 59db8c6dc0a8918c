// trajflow: command-line front end for data generation, the two training
// stages, sampling, evaluation and ablations.

#include <trajflow/config.hpp>
#include <trajflow/pipeline.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace trajflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

RunConfig config_or_default(const std::string& path, std::optional<std::uint64_t> seed) {
    nlohmann::json j = path.empty() ? nlohmann::json::object() : read_config_json(path);
    if (seed) j["seed"] = *seed;
    return parse_run_config(j);
}

void require_file(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError(path.string(), "no such file or directory");
}

RaeModel load_frozen_rae(const fs::path& ckpt) {
    require_file(ckpt);
    RaeModel m = RaeModel::load(ckpt);
    m.freeze();
    return m;
}

void append_sample_log(const fs::path& log, const std::string& input, double scale, double t, std::size_t nfe,
                       double seconds) {
    const bool fresh = !fs::exists(log);
    std::ofstream os(log, std::ios::app);
    if (!os) throw IoError(log.string() + ": cannot append sample log");
    if (fresh) os << "input,scale,t,nfe,seconds\n";
    os << input << ',' << (scale > 0.0 ? fmt(scale) : std::string()) << ',' << fmt(t) << ',' << nfe << ','
       << fmt(seconds) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent trajectory flow matching on synthetic multi-scale blur data"};
    app.require_subcommand(1);

    std::string config_path, out, data_dir, rae_ckpt, lfm_ckpt, input, spline_dir, log_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> scale, t_arg;
    std::vector<std::string> arm_specs;

    const auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Run configuration (JSON)");
        sub->add_option("--seed", seed, "Override the config seed");
    };

    auto* gen = app.add_subcommand("gen-data", "Render the synthetic multi-scale dataset");
    add_config(gen);
    gen->add_option("--out", out, "Dataset directory")->required();

    auto* train_rae_cmd = app.add_subcommand("train-rae", "Train the reconstruction autoencoder");
    add_config(train_rae_cmd);
    train_rae_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    train_rae_cmd->add_option("--out", out, "Checkpoint directory")->required();

    auto* train_lfm_cmd = app.add_subcommand("train-lfm", "Train the latent velocity field against a frozen RAE");
    add_config(train_lfm_cmd);
    train_lfm_cmd->add_option("--rae", rae_ckpt, "RAE checkpoint")->required();
    train_lfm_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    train_lfm_cmd->add_option("--out", out, "Checkpoint directory")->required();

    auto* sample = app.add_subcommand("sample", "Degrade one HR image to a target scale");
    sample->add_option("--lfm", lfm_ckpt, "Velocity field checkpoint");
    sample->add_option("--rae", rae_ckpt, "RAE checkpoint")->required();
    sample->add_option("--input", input, "HR image (DGFT, C×H×W)")->required();
    sample->add_option("--out", out, "Output image (DGFT)")->required();
    auto* scale_opt = sample->add_option("--scale", scale, "Target scale, mapped to t by the training levels");
    auto* t_opt = sample->add_option("--t", t_arg, "Target time in [0, 1]");
    scale_opt->excludes(t_opt);
    sample->add_option("--spline", spline_dir, "Follow a fitted trajectory instead of integrating the field");
    sample->add_option("--log", log_path, "NFE log (CSV, appended); default <out dir>/samples.csv");
    add_config(sample);

    auto* eval = app.add_subcommand("eval", "PSNR-vs-t sweep against held-out scales");
    add_config(eval);
    eval->add_option("--rae", rae_ckpt, "RAE checkpoint")->required();
    eval->add_option("--lfm", lfm_ckpt, "Velocity field checkpoint")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--out", out, "Report directory")->required();

    auto* pipeline = app.add_subcommand("pipeline", "gen-data, train-rae, train-lfm and eval in one directory");
    add_config(pipeline);
    pipeline->add_option("--out", out, "Artifact directory")->required();

    auto* ablate = app.add_subcommand("ablate", "One pipeline per ablation arm plus a merged report");
    add_config(ablate);
    ablate->add_option("--out", out, "Artifact directory")->required();
    ablate->add_option("--arm", arm_specs, "trajectory:perceptual:skips, e.g. linear:taylor3:on (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            write_effective_config(out, cfg);
            const Dataset ds = stage_gen_data(cfg, out);
            std::cout << "scenes " << ds.scenes.size() << '\n';
        } else if (train_rae_cmd->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            require_file(fs::path(data_dir) / "manifest.json");
            const Dataset ds = load_dataset(data_dir);
            write_effective_config(out, cfg);
            stage_train_rae(cfg, ds, out);
        } else if (train_lfm_cmd->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            require_file(fs::path(data_dir) / "manifest.json");
            const RaeModel rae = load_frozen_rae(rae_ckpt);
            const Dataset ds = load_dataset(data_dir);
            if (rae.latent_dim() != cfg.field.latent_dim) {
                throw ConfigError("rae.latent_dim", "config says " + std::to_string(cfg.field.latent_dim) +
                                                        ", checkpoint " + rae_ckpt + " has " +
                                                        std::to_string(rae.latent_dim()));
            }
            write_effective_config(out, cfg);
            stage_train_lfm(cfg, rae, ds, out);
        } else if (sample->parsed()) {
            if (!scale && !t_arg) throw ConfigError("--scale", "one of --scale or --t is required");
            if (lfm_ckpt.empty() == spline_dir.empty()) {
                throw ConfigError("--lfm", "give exactly one of --lfm or --spline");
            }
            const SolverConfig solver = config_path.empty() ? SolverConfig{} : load_run_config(config_path).sampler;
            require_file(input);
            const RaeModel rae = load_frozen_rae(rae_ckpt);
            const Tensor raw = load_dgft(input);
            if (raw.rank() != 3) throw ConfigError(input, "expected a C×H×W image, got " + shape_str(raw.shape()));
            const ImageTensor hr(raw);
            const Stopwatch clock;
            const Encoding enc = rae.encode(hr);
            const Tensor z0 = enc.z.value().reshaped({rae.latent_dim()});
            Tensor z;
            std::size_t nfe = 0;
            double t = t_arg.value_or(0.0);
            if (!spline_dir.empty()) {
                require_file(spline_dir);
                const SplineCoefficients path = load_spline(spline_dir);
                if (scale) {
                    throw ConfigError("--scale", "--spline needs --t (the trajectory carries no scale set)");
                }
                z = evaluate(path, t, 0);
            } else {
                require_file(lfm_ckpt);
                if (scale) {
                    const DegradationLevelSet levels = load_levels(lfm_ckpt);
                    if (!(*scale >= levels.min() && *scale <= levels.max())) {
                        throw ConfigError("--scale", "scale " + fmt(*scale) + " outside the trained range [" +
                                                         fmt(levels.min()) + ", " + fmt(levels.max()) + "]");
                    }
                    t = normalize_scale(*scale, levels);
                }
                if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("--t", "must lie in [0, 1]");
                const VelocityField field = VelocityField::load(lfm_ckpt);
                const OdeSolution sol = integrate(field, z0, t, solver);
                z = sol.state;
                nfe = sol.nfe;
            }
            const ImageTensor result = rae.decode_image(z, enc.features);
            const double seconds = clock.seconds();
            const fs::path out_path(out);
            if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
            save_dgft(out_path, result.tensor());
            std::printf("t=%s nfe=%zu seconds=%s\n", fmt(t).c_str(), nfe, fmt(seconds).c_str());
            const fs::path log = log_path.empty() ? out_path.parent_path() / "samples.csv" : fs::path(log_path);
            append_sample_log(log, input, scale.value_or(0.0), t, nfe, seconds);
        } else if (eval->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            require_file(fs::path(data_dir) / "manifest.json");
            require_file(lfm_ckpt);
            const RaeModel rae = load_frozen_rae(rae_ckpt);
            const VelocityField field = VelocityField::load(lfm_ckpt);
            const Dataset ds = load_dataset(data_dir);
            write_effective_config(out, cfg);
            const EvalReport r =
                eval_sweep(field, rae, ds, cfg.eval.grid(), ds.holdout_scales, cfg.sampler, worker_threads());
            write_eval(out, r);
            for (const auto& a : r.argmax) {
                std::printf("scale %s: argmax t=%s psnr=%s\n", fmt(a.scale).c_str(), fmt(a.t).c_str(),
                            fmt(a.psnr).c_str());
            }
        } else if (pipeline->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            worker_threads();
            const PipelineResult r = run_pipeline(cfg, out);
            for (const auto& a : r.report.argmax) {
                std::printf("scale %s: argmax t=%s psnr=%s\n", fmt(a.scale).c_str(), fmt(a.t).c_str(),
                            fmt(a.psnr).c_str());
            }
        } else if (ablate->parsed()) {
            const RunConfig cfg = config_or_default(config_path, seed);
            worker_threads();
            std::vector<AblationArm> arms;
            for (const auto& s : arm_specs) arms.push_back(parse_arm(s));
            if (arms.empty()) arms = default_arms(cfg);
            write_effective_config(out, cfg);
            const auto results = run_ablation(cfg, arms, out);
            for (const auto& [arm, r] : results) {
                std::printf("%s: heldout psnr=%s\n", arm.name().c_str(), fmt(r.mapped.front().psnr).c_str());
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.config_error() ? kExitConfig : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitOk;
}
