#pragma once

#include <trajflow/autodiff.hpp>
#include <trajflow/rng.hpp>

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace trajflow {

using NamedParams = std::vector<std::pair<std::string, Var>>;

/// Fully-connected layer, y = x W + b with W [in×out] and b [1×out].
struct Linear {
    Var weight;
    Var bias;

    Linear() = default;

    Linear(std::size_t in, std::size_t out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        Tensor w(Shape{in, out});
        for (double& v : w.data()) {
            v = rng.uniform(-bound, bound);
        }
        weight = Var::parameter(std::move(w));
        bias = Var::parameter(Tensor::zeros(Shape{1, out}));
    }

    std::size_t in_features() const { return weight.shape()[0]; }
    std::size_t out_features() const { return weight.shape()[1]; }

    Var operator()(const Var& x) const { return add_bias(matmul(x, weight), bias); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Cosine annealing from lr_max at iteration 0 to lr_min at the last iteration.
inline double cosine_lr(std::size_t iter, std::size_t total, double lr_max, double lr_min) {
    if (total <= 1) {
        return lr_max;
    }
    const double progress = static_cast<double>(iter) / static_cast<double>(total - 1);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are indexed by parameter order,
/// so the same NamedParams must be passed on every step.
class Adam {
public:
    explicit Adam(NamedParams params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& [name, p] : params_) {
            m_.push_back(Tensor::zeros(p.shape()));
            v_.push_back(Tensor::zeros(p.shape()));
        }
    }

    const NamedParams& params() const noexcept { return params_; }

    void zero_grad() {
        for (auto& [name, p] : params_) {
            p.zero_grad();
        }
    }

    /// One update with learning rate `lr`. lr == 0 leaves parameters untouched.
    void step(double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var& p = params_[i].second;
            if (p.node().grad.empty()) {
                continue;
            }
            const Tensor& g = p.node().grad;
            Tensor& w = p.mutable_value();
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                if (lr != 0.0) {
                    w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
                }
            }
        }
    }

private:
    NamedParams params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

/// Exponential moving average, for smoothed loss curves.
inline std::vector<double> ema_smooth(const std::vector<double>& xs, double alpha = 0.05) {
    std::vector<double> out;
    out.reserve(xs.size());
    double acc = xs.empty() ? 0.0 : xs.front();
    for (double x : xs) {
        acc = (1.0 - alpha) * acc + alpha * x;
        out.push_back(acc);
    }
    return out;
}

}  // namespace trajflow
