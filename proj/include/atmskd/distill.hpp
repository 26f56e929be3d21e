#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "atmskd/augment.hpp"
#include "atmskd/data.hpp"
#include "atmskd/eval.hpp"
#include "atmskd/net.hpp"
#include "atmskd/optim.hpp"
#include "atmskd/ops.hpp"

namespace atmskd {

/// The scheduler's evolving temperature with its capacity/gap/progress inputs.
/// Bounded by [t_min, t_init] at all times and fully determined by
/// (epoch, gap history, config).
struct TemperatureState {
    double t_init = 4.5;
    double t_min = 3.0;
    double current = 4.5;
    int epoch = 0;
    int total_epochs = 1;
    double gap = 0.0;   // teacher val acc - student val acc, percentage points
    double kappa = 0.5; // gap gain per 100 points
};

struct TempScheduleConfig {
    std::optional<double> t_init_override;
    double t_min = 3.0;
    double kappa = 0.5;
};

/// Capacity-aware initialization: compact (0.75x) students start hotter than
/// standard (1.0x) and enhanced (1.25x) ones; every width anneals toward the
/// shared floor of 3.0. Unknown widths need an explicit override.
inline TemperatureState init_temperature(double width_multiplier, int total_epochs,
                                         const TempScheduleConfig& config = {}) {
    if (total_epochs < 1) throw ParameterError("init_temperature: total_epochs must be >= 1");
    TemperatureState state;
    state.t_min = config.t_min;
    state.kappa = config.kappa;
    state.total_epochs = total_epochs;
    if (config.t_init_override) {
        state.t_init = *config.t_init_override;
    } else if (std::abs(width_multiplier - 0.75) < 1e-9) {
        state.t_init = 6.0;
    } else if (std::abs(width_multiplier - 1.0) < 1e-9) {
        state.t_init = 4.5;
    } else if (std::abs(width_multiplier - 1.25) < 1e-9) {
        state.t_init = 4.3;
    } else {
        throw ConfigError("init_temperature: no default for width " + std::to_string(width_multiplier) +
                          "; set kd.t_init explicitly");
    }
    if (state.t_init < state.t_min)
        throw ConfigError("init_temperature: t_init " + std::to_string(state.t_init) +
                          " below t_min " + std::to_string(state.t_min));
    state.current = state.t_init;
    return state;
}

/// Cosine decay from t_init to t_min over the epoch budget, multiplicatively
/// boosted while the student trails the teacher, then clamped back into
/// [t_min, t_init]. Non-increasing in epoch for fixed gap; non-decreasing in
/// gap for fixed epoch.
inline double step_temperature(TemperatureState& state, int epoch, double gap) {
    if (epoch < 0 || epoch >= state.total_epochs)
        throw UsageError("step_temperature: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(state.total_epochs) + ")");
    const double base =
        state.t_min + (state.t_init - state.t_min) *
                          (1.0 + std::cos(M_PI * static_cast<double>(epoch) / state.total_epochs)) / 2.0;
    const double modulated = base * (1.0 + state.kappa * std::max(0.0, gap) / 100.0);
    state.epoch = epoch;
    state.gap = gap;
    state.current = std::clamp(modulated, state.t_min, state.t_init);
    return state.current;
}

/// Loss weights: alpha scales the softened-distribution term, beta the hard
/// mixed-label term (alpha + beta = 1), gamma the L2 penalty.
struct KDLossConfig {
    double alpha = 0.7;
    double beta = 0.3;
    double gamma = 1e-5;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
            throw ConfigError("kd loss: alpha, beta, gamma must be non-negative");
        if (std::abs(alpha + beta - 1.0) > 1e-12)
            throw ConfigError("kd loss: alpha + beta must equal 1, got " +
                              std::to_string(alpha + beta));
    }
};

/// alpha * tau^2 * KL(softened student || softened teacher)
///   + beta * (lam * CE(z_S, y_a) + (1-lam) * CE(z_S, y_b))
///   + gamma * sum of squared parameters.
/// Teacher logits carry no gradient; the graph reaches student logits and
/// the regularized parameters only. teacher_logits may be null when alpha == 0.
inline Tensor kd_loss(const Tensor& student_logits, const Tensor* teacher_logits,
                      const MixedBatch& targets, double tau, const KDLossConfig& config,
                      const std::vector<Tensor>& l2_params, double label_smoothing = 0.0) {
    config.validate();
    if (!(tau > 0.0)) throw ParameterError("kd_loss: tau must be > 0");
    if (config.alpha > 0.0 && !teacher_logits)
        throw UsageError("kd_loss: alpha > 0 requires teacher logits");

    Tensor total = Tensor::zeros({1});
    if (config.alpha > 0.0) {
        if (teacher_logits->requires_grad())
            throw UsageError("kd_loss: teacher logits must not require grad");
        Tensor soft_student = log_softmax_temp(student_logits, tau);
        Tensor soft_teacher = softmax_temp(*teacher_logits, tau);
        total = add(total, scale(kl_div(soft_student, soft_teacher), config.alpha * tau * tau));
    }
    if (config.beta > 0.0) {
        Tensor hard = scale(cross_entropy(student_logits, targets.targets_a, label_smoothing),
                            targets.lam);
        if (targets.lam < 1.0)
            hard = add(hard, scale(cross_entropy(student_logits, targets.targets_b, label_smoothing),
                                   1.0 - targets.lam));
        total = add(total, scale(hard, config.beta));
    }
    if (config.gamma > 0.0) {
        Tensor reg = Tensor::zeros({1});
        for (const Tensor& p : l2_params) reg = add(reg, sum_squares(p));
        total = add(total, scale(reg, config.gamma));
    }
    return total;
}

enum class AccProbe {
    plain,       // validation accuracy; invariant in tau since argmax is
    calibrated,  // retrain the classifier head for one epoch at each tau
};

struct TempSensitivityRow {
    double tau = 0.0;
    double entropy = 0.0;       // mean softened-prediction entropy, nats
    double accuracy_pct = 0.0;  // validation accuracy, percent
    double score = 0.0;         // entropy * accuracy fraction
};

struct TempSensitivityResult {
    double tau_star = 0.0;
    std::vector<TempSensitivityRow> table;
};

namespace detail {

inline double mean_softened_entropy(const Tensor& logits, double tau) {
    const int n = logits.dim(0), C = logits.dim(1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.ptr() + static_cast<std::int64_t>(i) * C;
        double mx = row[0] / tau;
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c] / tau);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(row[c] / tau - mx);
        for (int c = 0; c < C; ++c) {
            const double p = std::exp(row[c] / tau - mx) / sum;
            if (p > 0.0) total -= p * std::log(p);
        }
    }
    return total / n;
}

inline double calibrated_probe_accuracy(Network& student, const Dataset& val, double tau,
                                        std::uint64_t seed) {
    Network probe = student.clone();
    probe.set_frozen(true);
    probe.classifier().weight.set_requires_grad(true);
    probe.classifier().bias.set_requires_grad(true);
    AdamW opt({probe.classifier().weight, probe.classifier().bias}, AdamWConfig{1e-3});
    RngStream rng(seed);
    for (const Batch& batch : batches(val, 32, true, rng)) {
        Tensor logits = probe.forward(batch.images, Mode::eval);
        Tensor loss = cross_entropy(scale(logits, 1.0 / tau), batch.targets);
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    return evaluate_accuracy(probe, val);
}

}  // namespace detail

/// Sweep a temperature grid on a trained student: per tau, the mean entropy
/// of the softened predictions and a validation accuracy probe; the winner
/// maximizes entropy * accuracy, first maximum on ties. The default probe is
/// plain accuracy (tau cancels in the argmax), which makes the sweep cheap
/// and deterministic; the calibrated probe retrains the classifier head at
/// each tau before measuring.
inline TempSensitivityResult temperature_sensitivity(Network& student, const Dataset& validation,
                                                     const std::vector<double>& tau_grid,
                                                     AccProbe probe = AccProbe::plain,
                                                     std::uint64_t probe_seed = 0) {
    if (tau_grid.empty()) throw ParameterError("temperature_sensitivity: empty tau grid");
    if (validation.samples.empty())
        throw ValidationError("temperature_sensitivity: empty validation set");
    for (double tau : tau_grid)
        if (!(tau > 0.0)) throw ParameterError("temperature_sensitivity: tau must be > 0");

    Tensor logits = dataset_logits(student, validation);
    const double plain_acc = accuracy_percent_from_logits(logits, validation);

    TempSensitivityResult result;
    for (std::size_t i = 0; i < tau_grid.size(); ++i) {
        TempSensitivityRow row;
        row.tau = tau_grid[i];
        row.entropy = detail::mean_softened_entropy(logits, row.tau);
        row.accuracy_pct = probe == AccProbe::plain
                               ? plain_acc
                               : detail::calibrated_probe_accuracy(student, validation, row.tau,
                                                                   probe_seed + i);
        row.score = row.entropy * row.accuracy_pct / 100.0;
        result.table.push_back(row);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < result.table.size(); ++i)
        if (result.table[i].score > result.table[best].score) best = i;
    result.tau_star = result.table[best].tau;
    return result;
}

/// Expand "min:max:step" bounds into an inclusive grid.
inline std::vector<double> tau_grid_from_range(double tau_min, double tau_max, double step) {
    if (!(tau_min > 0.0) || step <= 0.0 || tau_max < tau_min)
        throw ParameterError("tau grid: need 0 < min <= max and step > 0");
    std::vector<double> grid;
    for (double t = tau_min; t <= tau_max + 1e-9; t += step) grid.push_back(t);
    return grid;
}

}  // namespace atmskd
