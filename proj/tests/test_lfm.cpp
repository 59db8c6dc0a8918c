#include "test_util.hpp"

#include <trajflow/lfm.hpp>
#include <trajflow/sampler.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace trajflow;
using trajflow::testing::finite_difference_check;
using trajflow::testing::random_tensor;
using trajflow::testing::toy_trajectories;
namespace fs = std::filesystem;

namespace {

LatentTrajectory random_trajectory(Rng& rng, std::size_t m, std::size_t dim) {
    LatentTrajectory traj;
    traj.times.push_back(0.0);
    for (std::size_t k = 1; k + 1 < m; ++k) {
        traj.times.push_back(static_cast<double>(k) / static_cast<double>(m - 1) + rng.uniform(-0.05, 0.05));
    }
    traj.times.push_back(1.0);
    for (std::size_t k = 0; k < m; ++k) traj.knots.push_back(random_tensor({dim}, rng));
    return traj;
}

RaeModel frozen_small_rae(std::uint64_t seed = 1) {
    RaeConfig cfg;
    cfg.height = 4;
    cfg.width = 4;
    cfg.hidden = {6, 5};
    cfg.latent_dim = 3;
    cfg.seed = seed;
    RaeModel m(cfg);
    m.freeze();
    return m;
}

VelocityField small_field(std::size_t dim, std::uint64_t seed = 0) {
    VelocityFieldConfig cfg;
    cfg.latent_dim = dim;
    cfg.hidden = 8;
    cfg.layers = 2;
    cfg.frequencies = 2;
    cfg.seed = seed;
    return VelocityField(cfg);
}

std::vector<Tensor> snapshot(const NamedParams& params) {
    std::vector<Tensor> out;
    for (const auto& [n, p] : params) out.push_back(p.value());
    return out;
}

LfmData toy_data(std::size_t n, std::uint64_t seed) {
    LfmData data;
    for (const auto& traj : toy_trajectories(n, seed)) data.scenes.push_back({fit_spline(traj), {}, {}});
    return data;
}

// Random 4×4 images at three levels for scenes encoded by a small frozen RAE.
LfmData image_data(const RaeModel& rae, Rng& rng, std::size_t scenes, TrajectoryKind kind) {
    std::vector<std::vector<Tensor>> images;
    for (std::size_t s = 0; s < scenes; ++s) {
        std::vector<Tensor> levels;
        for (int k = 0; k < 3; ++k) levels.push_back(random_tensor({1, 16}, rng, 0.0, 1.0));
        images.push_back(std::move(levels));
    }
    return encode_scenes(rae, images, {0.0, 1.0 / 3.0, 1.0}, kind);
}

}  // namespace

TEST(TimeEmbedding, InjectiveOnFineGrid) {
    std::vector<double> t;
    for (int i = 0; i <= 1000; ++i) t.push_back(i / 1000.0);
    const Tensor e = time_embedding(t, 8);
    ASSERT_EQ(e.shape(), (Shape{1001, 16}));
    double min_dist = 1e9;
    for (std::size_t i = 0; i < t.size(); ++i) {
        for (std::size_t j = i + 1; j < t.size(); ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < 16; ++c) d += std::pow(e.at(i, c) - e.at(j, c), 2);
            min_dist = std::min(min_dist, d);
        }
    }
    EXPECT_GT(min_dist, 0.0);
    EXPECT_NEAR(e.at(500, 0), std::sin(std::numbers::pi * 0.5), 1e-15);
    EXPECT_NEAR(e.at(250, 8 + 1), std::cos(2 * std::numbers::pi * 0.25), 1e-15);
}

TEST(VelocityField, ShapesAndDeterminism) {
    const VelocityField f(VelocityFieldConfig{});
    Rng rng(1);
    const Tensor x = random_tensor({16}, rng);
    const Tensor v = f(x, 0.3);
    EXPECT_EQ(v.shape(), x.shape());
    EXPECT_EQ(f(x, 0.3), v);
    EXPECT_NE(f(x, 0.31), v);
    const Tensor xb = random_tensor({5, 16}, rng);
    const std::vector<double> t(5, 0.2);
    EXPECT_EQ(f(Var::constant(xb), t).shape(), (Shape{5, 16}));
    EXPECT_THROW(f(random_tensor({15}, rng), 0.1), DimensionError);
    EXPECT_THROW(f(Var::constant(xb), std::vector<double>(4, 0.2)), DimensionError);
}

TEST(VelocityField, CheckpointRoundTrip) {
    const fs::path dir = fs::temp_directory_path() / "trajflow_lfm_ckpt";
    fs::remove_all(dir);
    const VelocityField f = small_field(3, 4);
    f.save(dir);
    const VelocityField g = VelocityField::load(dir);
    EXPECT_EQ(snapshot(g.parameters()), snapshot(f.parameters()));
    EXPECT_EQ(g.config().frequencies, 2u);
    EXPECT_THROW(RaeModel::load(dir), IoError);
    fs::remove_all(dir);
}

TEST(CfmLoss, ExactFieldGivesZero) {
    Rng rng(2);
    std::vector<SplineCoefficients> paths;
    for (int i = 0; i < 6; ++i) paths.push_back(fit_spline(random_trajectory(rng, 4, 5)));
    std::vector<const SplineCoefficients*> ptrs;
    std::vector<double> t;
    for (const auto& p : paths) {
        ptrs.push_back(&p);
        t.push_back(rng.uniform());
    }
    const TrainBatch batch = make_batch(ptrs, t);
    const auto exact = [&](const Var& x, std::span<const double> ts) {
        Tensor out(x.shape());
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const Tensor v = evaluate(*ptrs[i], ts[i], 1);
            for (std::size_t j = 0; j < v.size(); ++j) out.at(i, j) = v[j];
        }
        return Var::constant(out);
    };
    EXPECT_EQ(cfm_loss(exact, batch).value().item(), 0.0);
}

TEST(CfmLoss, ZeroFieldOnStraightPath) {
    Rng rng(3);
    std::vector<SplineCoefficients> paths;
    double expected = 0.0;
    for (int i = 0; i < 4; ++i) {
        LatentTrajectory traj{{0.0, 1.0}, {random_tensor({3}, rng), random_tensor({3}, rng)}};
        const Tensor c = traj.knots[1] - traj.knots[0];
        expected += c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
        paths.push_back(fit_spline(traj));
    }
    expected /= 4.0;
    std::vector<const SplineCoefficients*> ptrs;
    for (const auto& p : paths) ptrs.push_back(&p);
    const auto zero = [](const Var& x, std::span<const double>) { return Var::constant(Tensor::zeros(x.shape())); };
    EXPECT_NEAR(cfm_loss(zero, make_batch(ptrs, {0.1, 0.5, 0.7, 1.0})).value().item(), expected, 1e-14);
}

TEST(CfmLoss, LoopOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t dim = 1 + rng.below(6), B = 1 + rng.below(8);
        std::vector<SplineCoefficients> paths;
        std::vector<const SplineCoefficients*> ptrs;
        std::vector<double> t;
        for (std::size_t i = 0; i < B; ++i) paths.push_back(fit_spline(random_trajectory(rng, 2 + rng.below(5), dim)));
        for (std::size_t i = 0; i < B; ++i) {
            ptrs.push_back(&paths[i]);
            t.push_back(rng.uniform());
        }
        const VelocityField f = small_field(dim, trial);
        double expected = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            const Tensor x = evaluate(paths[i], t[i], 0);
            const Tensor v = f(x, t[i]);
            const Tensor target = evaluate(paths[i], t[i], 1);
            for (std::size_t j = 0; j < dim; ++j) expected += (v[j] - target[j]) * (v[j] - target[j]);
        }
        expected /= static_cast<double>(B);
        EXPECT_NEAR(cfm_loss(f, make_batch(ptrs, t)).value().item(), expected, 1e-12);
    }
}

TEST(CfmLoss, Errors) {
    const VelocityField f = small_field(2);
    EXPECT_THROW(cfm_loss(f, TrainBatch{}), ContractError);
    EXPECT_THROW(make_batch({}, {}), ContractError);
}

TEST(Taylor, ExactOnRandomTrajectories) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto traj = random_trajectory(rng, 2 + rng.below(7), 1 + rng.below(64));
        const SplineCoefficients c = fit_spline(traj);
        const double t = rng.uniform(0.0, 0.999);
        const std::size_t next = c.segment_of(t) + 1;
        const Tensor v = evaluate(c, t, 1);
        const Tensor z3 = taylor_extrapolate(c, t, v, ExtrapolationMode::Taylor3);
        EXPECT_LT(max_abs_diff(z3, traj.knots[next]), 1e-9);

        const std::size_t k = next - 1;
        double curvature = 0.0;
        for (std::size_t i = 0; i < c.a[k].size(); ++i) curvature += std::abs(c.a[k][i]) + std::abs(c.b[k][i]);
        if (curvature > 1e-6) {
            EXPECT_GT(max_abs_diff(taylor_extrapolate(c, t, v, ExtrapolationMode::Linear), traj.knots[next]), 0.0);
        }
    }
}

TEST(Taylor, ThreeKnotScalarExample) {
    // Natural spline through (0,0), (0.5,1), (1,0): on [0, 0.5] it is
    // S(t) = -4t^3 + 3t (second derivative -12 at the middle knot, 0 at t=0).
    const LatentTrajectory traj{{0.0, 0.5, 1.0}, {Tensor(Shape{1}, 0.0), Tensor(Shape{1}, 1.0), Tensor(Shape{1}, 0.0)}};
    const SplineCoefficients c = fit_spline(traj);
    const double t = 0.25;
    const double v = -12.0 * t * t + 3.0;
    const Tensor out = taylor_extrapolate(c, t, Tensor(Shape{1}, v), ExtrapolationMode::Taylor3);
    EXPECT_NEAR(out[0], 1.0, 1e-15);
    const Tensor lin = taylor_extrapolate(c, t, Tensor(Shape{1}, v), ExtrapolationMode::Linear);
    EXPECT_NEAR(lin[0], -4 * t * t * t + 3 * t + v * 0.25, 1e-15);
}

TEST(Taylor, NoNextLevelAtEnd) {
    Rng rng(6);
    const SplineCoefficients c = fit_spline(random_trajectory(rng, 3, 2));
    EXPECT_THROW(taylor_extrapolate(c, 1.0, Tensor::zeros({2}), ExtrapolationMode::Taylor3), ContractError);
}

TEST(Taylor, NearestProjection) {
    Rng rng(7);
    const auto traj = random_trajectory(rng, 4, 3);
    const SplineCoefficients c = fit_spline(traj);
    const double t = traj.times[1] + 0.01;  // just past a knot
    EXPECT_EQ(projection_knot(c, t, Projection::Next), 2u);
    EXPECT_EQ(projection_knot(c, t, Projection::Nearest), 1u);
    const Tensor v = evaluate(c, t, 1);
    EXPECT_LT(max_abs_diff(taylor_extrapolate(c, t, v, ExtrapolationMode::Taylor3, Projection::Nearest), traj.knots[1]),
              1e-12);
    const double late = traj.times[2] - 0.01;
    EXPECT_EQ(projection_knot(c, late, Projection::Nearest), 2u);
}

TEST(Taylor, GradientFlowsOnlyIntoVelocityScaledByGap) {
    Rng rng(8);
    std::vector<SplineCoefficients> paths;
    for (int i = 0; i < 3; ++i) paths.push_back(fit_spline(random_trajectory(rng, 3, 4)));
    const std::vector<const SplineCoefficients*> ptrs{&paths[0], &paths[1], &paths[2]};
    const std::vector<double> t{0.1, 0.4, 0.8};
    Var v = Var::parameter(random_tensor({3, 4}, rng));
    const Var z = taylor_extrapolate(ptrs, t, v, ExtrapolationMode::Taylor3);
    backward(sum(z));
    for (std::size_t i = 0; i < 3; ++i) {
        const double dt = paths[i].times[projection_knot(paths[i], t[i])] - t[i];
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(v.grad().at(i, j), dt, 1e-15);
    }
}

TEST(Perceptual, RequiresFrozenDecoder) {
    RaeConfig cfg;
    cfg.height = cfg.width = 4;
    cfg.hidden = {6, 5};
    cfg.latent_dim = 3;
    const RaeModel live(cfg);
    const auto enc = live.encode(Var::constant(Tensor::zeros({1, 16})));
    EXPECT_THROW(perceptual_loss(live, enc.z, enc.features, Tensor::zeros({1, 16})), ContractError);
}

TEST(Perceptual, ExactDecodeIsZeroAndMseModeMatches) {
    const RaeModel rae = frozen_small_rae();
    Rng rng(9);
    const auto enc = rae.encode(Var::constant(random_tensor({2, 16}, rng, 0.0, 1.0)));
    const Tensor decoded = rae.decode_raw(enc.z, enc.features).value();
    EXPECT_EQ(perceptual_loss(rae, enc.z, enc.features, decoded).value().item(), 0.0);
    const Tensor target = random_tensor({2, 16}, rng, 0.0, 1.0);
    EXPECT_EQ(perceptual_loss(rae, enc.z, enc.features, target, PerceptualMetric::Mse).value().item(),
              mse(Var::constant(decoded), Var::constant(target)).value().item());
}

TEST(Perceptual, EdgeAwareDirectEvaluation) {
    const ImageTensor sharp = render_scene(4, SceneType::Checker).image;
    const ImageTensor blurred = degrade(sharp, 2.5);
    const double value = image_surrogate(Var::constant(blurred.as_row()), Var::constant(sharp.as_row()), 16, 16,
                                         PerceptualMetric::EdgeAware)
                             .value()
                             .item();
    double pix = 0.0, grad = 0.0;
    std::size_t n_grad = 0;
    for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
            pix += std::pow(blurred.at(0, y, x) - sharp.at(0, y, x), 2);
            if (x + 1 < 16) {
                const double a = blurred.at(0, y, x + 1) - blurred.at(0, y, x);
                const double b = sharp.at(0, y, x + 1) - sharp.at(0, y, x);
                grad += (a - b) * (a - b);
                ++n_grad;
            }
            if (y + 1 < 16) {
                const double a = blurred.at(0, y + 1, x) - blurred.at(0, y, x);
                const double b = sharp.at(0, y + 1, x) - sharp.at(0, y, x);
                grad += (a - b) * (a - b);
                ++n_grad;
            }
        }
    }
    EXPECT_NEAR(value, pix / 256.0 + grad / static_cast<double>(n_grad), 1e-12);
    EXPECT_GT(value, 0.0);
    EXPECT_EQ(image_surrogate(Var::constant(sharp.as_row()), Var::constant(sharp.as_row()), 16, 16,
                              PerceptualMetric::EdgeAware)
                  .value()
                  .item(),
              0.0);
}

TEST(TotalLoss, Examples) {
    const Var cfm = Var::constant(Tensor::scalar(1.0));
    const Var perc = Var::constant(Tensor::scalar(2.0));
    EXPECT_NEAR(total_loss(cfm, perc).value().item(), 1.2, 1e-15);
    EXPECT_EQ(total_loss(cfm, perc, 0.0).value().item(), 1.0);
}

TEST(TotalLoss, GradientIsLinear) {
    Rng rng(10);
    Var w = Var::parameter(random_tensor({2, 2}, rng));
    const Var x = Var::constant(random_tensor({3, 2}, rng));
    const auto cfm = [&] { return mean(mul(matmul(x, w), matmul(x, w))); };
    const auto perc = [&] { return sum(gelu(matmul(x, w))); };
    backward(cfm());
    const Tensor g1 = w.grad();
    w.zero_grad();
    backward(perc());
    const Tensor g2 = w.grad();
    w.zero_grad();
    backward(total_loss(cfm(), perc(), 0.1));
    EXPECT_LT(max_abs_diff(w.grad(), g1 + g2 * 0.1), 1e-14);
}

TEST(LfmLosses, FullGraphGradientCheck) {
    const RaeModel rae = frozen_small_rae(2);
    Rng rng(11);
    for (int trial = 0; trial < 4; ++trial) {
        const LfmData data = image_data(rae, rng, 3, TrajectoryKind::NaturalCubic);
        const VelocityField f = small_field(3, trial);
        LfmTrainConfig cfg;
        cfg.perceptual = trial % 2 ? PerceptualMode::Linear : PerceptualMode::Taylor3;
        const std::vector<std::size_t> idx{0, 1, 2};
        const std::vector<double> tc{rng.uniform(), rng.uniform(), rng.uniform()};
        const std::vector<double> ti{rng.uniform(0, 0.99), rng.uniform(0, 0.99), rng.uniform(0, 0.99)};
        std::vector<Var> ps;
        for (const auto& [n, p] : f.parameters()) ps.push_back(p);
        const auto res = finite_difference_check(ps, [&] {
            const auto [c, p] = lfm_losses(f, data, idx, tc, ti, cfg);
            return total_loss(c, p, 0.1);
        });
        EXPECT_LT(res.max_rel_error, 1e-4);
    }
}

TEST(LfmLosses, PerceptualGradientReachesVelocityTimesGap) {
    const RaeModel rae = frozen_small_rae(3);
    Rng rng(12);
    const LfmData data = image_data(rae, rng, 2, TrajectoryKind::NaturalCubic);
    std::vector<const SplineCoefficients*> paths{&data.scenes[0].path, &data.scenes[1].path};
    const std::vector<double> t{0.2, 0.6};
    const Tensor target = stack_rows({&data.scenes[0].level_images[1], &data.scenes[1].level_images[2]});
    std::vector<Var> feats;
    for (std::size_t l = 0; l < 2; ++l) {
        feats.push_back(Var::constant(stack_rows({&data.scenes[0].hr_features[l], &data.scenes[1].hr_features[l]})));
    }
    Var v = Var::parameter(random_tensor({2, 3}, rng));
    backward(perceptual_loss(rae, taylor_extrapolate(paths, t, v, ExtrapolationMode::Taylor3), feats, target));
    const Tensor gv = v.grad();

    Var z = Var::parameter(taylor_extrapolate(paths, t, Var::constant(v.value()), ExtrapolationMode::Taylor3).value());
    backward(perceptual_loss(rae, z, feats, target));
    const double dt[2] = {1.0 / 3.0 - 0.2, 1.0 - 0.6};
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(gv.at(i, j), dt[i] * z.grad().at(i, j), 1e-14);
}

TEST(TrainLfm, ZeroLearningRateKeepsParameters) {
    VelocityField f = small_field(2);
    const auto before = snapshot(f.parameters());
    LfmTrainConfig cfg;
    cfg.iters = 1;
    cfg.lr_max = cfg.lr_min = 0.0;
    cfg.perceptual = PerceptualMode::None;
    train_lfm(f, toy_data(5, 1), cfg);
    EXPECT_EQ(snapshot(f.parameters()), before);
}

TEST(TrainLfm, DeterministicAndLambdaMatters) {
    const RaeModel rae = frozen_small_rae(4);
    Rng rng(13);
    const LfmData data = image_data(rae, rng, 4, TrajectoryKind::NaturalCubic);
    LfmTrainConfig cfg;
    cfg.iters = 20;
    VelocityField a = small_field(3), b = small_field(3), c = small_field(3);
    const auto ca = train_lfm(a, data, cfg);
    const auto cb = train_lfm(b, data, cfg);
    EXPECT_EQ(snapshot(a.parameters()), snapshot(b.parameters()));
    ASSERT_EQ(ca.rows.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(ca.rows[i].total, cb.rows[i].total);
    cfg.lambda = 0.0;
    train_lfm(c, data, cfg);
    EXPECT_NE(snapshot(a.parameters()), snapshot(c.parameters()));
}

TEST(TrainLfm, Errors) {
    VelocityField f = small_field(3);
    EXPECT_THROW(train_lfm(f, LfmData{}, {}), ContractError);
    LfmTrainConfig cfg;
    cfg.iters = 1;
    EXPECT_THROW(train_lfm(f, toy_data(3, 1), cfg), ContractError);  // image term without an RAE
    RaeConfig rc;
    rc.height = rc.width = 4;
    rc.hidden = {6, 5};
    rc.latent_dim = 3;
    const RaeModel live(rc);
    EXPECT_THROW(encode_scenes(live, {}, {0.0, 1.0}, TrajectoryKind::NaturalCubic), ContractError);
}

TEST(TrainLfm, CsvCurve) {
    VelocityField f = small_field(2);
    LfmTrainConfig cfg;
    cfg.iters = 3;
    cfg.perceptual = PerceptualMode::None;
    const auto curve = train_lfm(f, toy_data(4, 2), cfg);
    const fs::path path = fs::temp_directory_path() / "trajflow_lfm_curve.csv";
    curve.write_csv(path);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "iter,cfm,perceptual,total");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 3);
    fs::remove(path);
}

TEST(TrainLfm, ToyConvergence) {
    const LfmData data = toy_data(20, 5);
    VelocityFieldConfig vc;
    vc.latent_dim = 2;
    VelocityField f(vc);
    LfmTrainConfig cfg;
    cfg.iters = 3000;
    cfg.perceptual = PerceptualMode::None;
    const auto curve = train_lfm(f, data, cfg);
    EXPECT_LT(curve.rows[2000].total, 0.5 * curve.rows[0].total);

    double err = 0.0;
    std::size_t count = 0;
    for (const auto& s : data.scenes) {
        for (int j = 0; j <= 100; ++j) {
            const double t = j / 100.0;
            err += l2_norm(f(evaluate(s.path, t, 0), t) - evaluate(s.path, t, 1));
            ++count;
        }
    }
    EXPECT_LT(err / static_cast<double>(count), 0.05);

    for (const auto& s : data.scenes) {
        const auto prof = nfe_profile(f, evaluate(s.path, 0.0, 0), {1.0 / 3.0, 1.0});
        EXPECT_GE(prof[1].nfe, prof[0].nfe);
        const auto sol = integrate(f, evaluate(s.path, 0.0, 0), 1.0);
        EXPECT_LT(l2_norm(sol.state - evaluate(s.path, 1.0, 0)), 0.05);
    }
}
