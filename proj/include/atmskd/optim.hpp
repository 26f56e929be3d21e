#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "atmskd/errors.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adaptive-moment optimizer with decoupled weight decay: the decay is
/// applied directly to the parameters, never through the gradient.
class AdamW {
  public:
    AdamW(std::vector<Tensor> params, AdamWConfig config)
        : params_(std::move(params)), config_(config) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].data().size(), 0.0);
            v_[i].assign(params_[i].data().size(), 0.0);
        }
    }

    void set_lr(double lr) { config_.lr = lr; }
    double lr() const { return config_.lr; }
    std::int64_t step_count() const { return t_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad())
                throw UsageError("adamw: parameter " + std::to_string(i) +
                                 " has no gradient; run backward() before step()");
            const std::vector<double>& g = p.grad();
            double* w = p.ptr();
            for (std::size_t j = 0; j < g.size(); ++j) {
                if (config_.weight_decay != 0.0) w[j] -= config_.lr * config_.weight_decay * w[j];
                m_[i][j] = config_.beta1 * m_[i][j] + (1.0 - config_.beta1) * g[j];
                v_[i][j] = config_.beta2 * v_[i][j] + (1.0 - config_.beta2) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                w[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
            }
        }
    }

  private:
    std::vector<Tensor> params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t t_ = 0;
};

/// Cosine annealing with warm restarts, evaluated per epoch. Cycle k has
/// length T_0 * T_mult^k and the rate resets to lr_base at each boundary.
struct WarmRestartSchedule {
    double lr_base = 1e-3;
    double eta_min = 1e-5;
    int T_0 = 10;
    int T_mult = 2;
};

inline double lr_at(const WarmRestartSchedule& s, int epoch) {
    if (epoch < 0) throw ParameterError("lr_at: epoch must be >= 0");
    if (s.T_0 < 1 || s.T_mult < 1) throw ParameterError("lr_at: T_0 and T_mult must be >= 1");
    int t = epoch;
    int cycle_len = s.T_0;
    while (t >= cycle_len) {
        t -= cycle_len;
        cycle_len *= s.T_mult;
    }
    return s.eta_min + (s.lr_base - s.eta_min) *
                           (1.0 + std::cos(M_PI * static_cast<double>(t) / cycle_len)) / 2.0;
}

/// Scales gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_grad_global_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.grad()) g *= scale;
        }
    }
    return norm;
}

}  // namespace atmskd
