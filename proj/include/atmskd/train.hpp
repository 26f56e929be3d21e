#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "atmskd/augment.hpp"
#include "atmskd/checkpoint.hpp"
#include "atmskd/data.hpp"
#include "atmskd/distill.hpp"
#include "atmskd/eval.hpp"
#include "atmskd/net.hpp"
#include "atmskd/optim.hpp"

namespace atmskd {

enum class TrainMode { teacher, direct, distill, distill_fixed };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::teacher: return "teacher";
        case TrainMode::direct: return "direct";
        case TrainMode::distill: return "distill";
        case TrainMode::distill_fixed: return "distill-fixed";
    }
    return "?";
}

struct TrainConfig {
    TrainMode mode = TrainMode::distill;
    int epochs = 80;
    int batch_size = 32;
    double lr = 2e-3;
    double weight_decay = 0.0;       // decoupled, applied by the optimizer
    double label_smoothing = 0.0;
    std::uint64_t seed = 42;
    int schedule_T0 = 10;
    int schedule_Tmult = 2;
    double eta_min_ratio = 0.01;     // eta_min = lr * ratio
    KDLossConfig kd;                 // alpha/beta/gamma
    TempScheduleConfig temp;
    double tau_fixed = 4.0;          // distill_fixed only
    AugmentConfig augment;
    bool augment_enabled = true;
    double grad_clip_norm = 5.0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double tau = 0.0;
    double lr = 0.0;
    double train_seconds = 0.0;
    double val_seconds = 0.0;
    int clipped_batches = 0;
};

struct TrainReport {
    TrainMode mode = TrainMode::direct;
    double width_multiplier = 0.0;
    std::uint64_t seed = 0;
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_accuracy = 0.0;
    double teacher_val_accuracy = 0.0;  // distillation runs only
    int total_clipped_batches = 0;
};

struct TrainOutcome {
    Network best_net;
    CheckpointMeta meta;
    TrainReport report;
};

namespace detail {

/// Teacher predictions for un-augmented batches are cached per sample index;
/// an eval forward is pure, so cached and fresh logits are bit-identical.
class TeacherLogitCache {
  public:
    TeacherLogitCache(Network& teacher, std::int64_t dataset_size)
        : teacher_(teacher), rows_(static_cast<std::size_t>(dataset_size)) {}

    Tensor logits_for(const Batch& batch) {
        bool all_cached = true;
        for (int idx : batch.indices)
            all_cached = all_cached && !rows_[static_cast<std::size_t>(idx)].empty();
        if (!all_cached) {
            NoGradGuard guard;
            Tensor fresh = teacher_.forward(batch.images, Mode::eval);
            const int C = fresh.dim(1);
            for (std::size_t i = 0; i < batch.indices.size(); ++i) {
                auto& row = rows_[static_cast<std::size_t>(batch.indices[i])];
                row.assign(fresh.ptr() + static_cast<std::int64_t>(i) * C,
                           fresh.ptr() + static_cast<std::int64_t>(i + 1) * C);
            }
            return fresh;
        }
        const int C = static_cast<int>(rows_[static_cast<std::size_t>(batch.indices[0])].size());
        std::vector<double> data(batch.indices.size() * static_cast<std::size_t>(C));
        for (std::size_t i = 0; i < batch.indices.size(); ++i) {
            const auto& row = rows_[static_cast<std::size_t>(batch.indices[i])];
            std::copy(row.begin(), row.end(), data.begin() + static_cast<std::ptrdiff_t>(i) * C);
        }
        return Tensor::from_data({static_cast<int>(batch.indices.size()), C}, std::move(data));
    }

    Tensor logits_for_images(const Tensor& images) {
        NoGradGuard guard;
        return teacher_.forward(images, Mode::eval);
    }

  private:
    Network& teacher_;
    std::vector<std::vector<double>> rows_;
};

inline double batch_accuracy_percent(const Tensor& logits, const Tensor& onehot_targets) {
    const int N = logits.dim(0), C = logits.dim(1);
    int correct = 0;
    for (int n = 0; n < N; ++n) {
        const int pred = argmax_row(logits.ptr() + static_cast<std::int64_t>(n) * C, C);
        if (onehot_targets.data()[static_cast<std::size_t>(n) * C + static_cast<std::size_t>(pred)] == 1.0)
            ++correct;
    }
    return 100.0 * correct / N;
}

struct ValStats {
    double loss = 0.0;
    double acc = 0.0;
};

inline ValStats validate(Network& net, const Dataset& val, int batch_size) {
    NoGradGuard guard;
    RngStream unused(0);
    double loss_sum = 0.0;
    std::int64_t correct = 0, total = 0;
    for (const Batch& b : batches(val, batch_size, false, unused)) {
        Tensor logits = net.forward(b.images, Mode::eval);
        loss_sum += cross_entropy(logits, b.targets).item() * b.images.dim(0);
        const int N = logits.dim(0), C = logits.dim(1);
        for (int n = 0; n < N; ++n) {
            const int pred = argmax_row(logits.ptr() + static_cast<std::int64_t>(n) * C, C);
            if (b.targets.data()[static_cast<std::size_t>(n) * C + static_cast<std::size_t>(pred)] == 1.0)
                ++correct;
        }
        total += N;
    }
    return {loss_sum / static_cast<double>(total), 100.0 * static_cast<double>(correct) / static_cast<double>(total)};
}

/// One loop serves all four modes; the mode only selects which loss terms and
/// temperature rule apply, so "direct" is literally "distill with alpha=0".
inline TrainOutcome run_training(Network student, Network* teacher, const Dataset& train_ds,
                                 const Dataset& val_ds, const TrainConfig& cfg) {
    if (train_ds.samples.empty() || val_ds.samples.empty())
        throw ValidationError("train: empty train or validation split");
    if (cfg.epochs < 1) throw ParameterError("train: epochs must be >= 1");
    cfg.kd.validate();

    const bool uses_teacher = teacher != nullptr && cfg.kd.alpha > 0.0;
    if (teacher) {
        if (teacher->spec().num_classes != student.spec().num_classes)
            throw ModelMismatchError("train: teacher has " +
                                     std::to_string(teacher->spec().num_classes) +
                                     " classes, student has " +
                                     std::to_string(student.spec().num_classes));
        teacher->set_frozen(true);
    }

    TrainReport report;
    report.mode = cfg.mode;
    report.width_multiplier = student.spec().width_multiplier;
    report.seed = cfg.seed;

    std::optional<TemperatureState> temp;
    if (cfg.mode == TrainMode::distill)
        temp = init_temperature(student.spec().width_multiplier, cfg.epochs, cfg.temp);

    RngStream root(cfg.seed);
    RngStream shuffle_rng = root.fork(1);
    RngStream augment_rng = root.fork(2);
    RngStream dropout_rng = root.fork(3);

    std::vector<Tensor> params;
    student.visit_parameters([&](const std::string&, Tensor& t) { params.push_back(t); });
    AdamW opt(params, AdamWConfig{cfg.lr, cfg.weight_decay});
    const WarmRestartSchedule schedule{cfg.lr, cfg.lr * cfg.eta_min_ratio, cfg.schedule_T0,
                                       cfg.schedule_Tmult};

    std::optional<TeacherLogitCache> cache;
    if (uses_teacher) cache.emplace(*teacher, train_ds.size());
    if (uses_teacher) report.teacher_val_accuracy = evaluate_accuracy(*teacher, val_ds);

    std::optional<Network> best;
    CheckpointMeta best_meta;
    best_meta.seed = cfg.seed;
    double gap = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at(schedule, epoch);
        opt.set_lr(rec.lr);
        if (cfg.mode == TrainMode::distill)
            rec.tau = step_temperature(*temp, epoch, gap);
        else if (cfg.mode == TrainMode::distill_fixed)
            rec.tau = cfg.tau_fixed;

        double loss_sum = 0.0, acc_sum = 0.0;
        std::int64_t seen = 0;
        for (const Batch& batch : batches(train_ds, cfg.batch_size, true, shuffle_rng)) {
            MixedBatch mixed = cfg.augment_enabled
                                   ? apply_policy(batch.images, batch.targets, cfg.augment, augment_rng)
                                   : passthrough_batch(batch.images, batch.targets);

            std::optional<Tensor> teacher_logits;
            if (uses_teacher)
                teacher_logits = mixed.method == MixMethod::none
                                     ? cache->logits_for(batch)
                                     : cache->logits_for_images(mixed.images);

            Tensor logits = student.forward(mixed.images, Mode::train, &dropout_rng);
            Tensor loss = kd_loss(logits, teacher_logits ? &*teacher_logits : nullptr, mixed,
                                  rec.tau > 0.0 ? rec.tau : 1.0, cfg.kd, params,
                                  cfg.label_smoothing);

            opt.zero_grad();
            loss.backward();
            if (clip_grad_global_norm(params, cfg.grad_clip_norm) > cfg.grad_clip_norm)
                ++rec.clipped_batches;
            opt.step();

            const int n = batch.images.dim(0);
            loss_sum += loss.item() * n;
            acc_sum += batch_accuracy_percent(logits, batch.targets) * n / 100.0;
            seen += n;
        }
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.train_acc = 100.0 * acc_sum / static_cast<double>(seen);
        const auto t1 = std::chrono::steady_clock::now();
        rec.train_seconds = std::chrono::duration<double>(t1 - t0).count();

        const ValStats val = validate(student, val_ds, cfg.batch_size);
        rec.val_loss = val.loss;
        rec.val_acc = val.acc;
        rec.val_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
        if (uses_teacher) gap = report.teacher_val_accuracy - val.acc;

        report.total_clipped_batches += rec.clipped_batches;
        report.epochs.push_back(rec);

        if (rec.val_acc > report.best_val_accuracy || report.best_epoch < 0) {
            report.best_epoch = epoch;
            report.best_val_accuracy = rec.val_acc;
            best = student.clone();
            best_meta.epoch = epoch;
            best_meta.best_val_accuracy = rec.val_acc;
        }
    }
    return TrainOutcome{std::move(*best), best_meta, std::move(report)};
}

}  // namespace detail

/// Teacher preparation: supervised training with label smoothing 0.1 and
/// decoupled weight decay; best-validation weights are the teacher.
inline TrainOutcome train_teacher(const Dataset& train_ds, const Dataset& val_ds, TrainConfig cfg) {
    cfg.mode = TrainMode::teacher;
    cfg.kd = KDLossConfig{0.0, 1.0, 0.0};
    Network teacher = build_teacher(train_ds.num_classes(), train_ds.image_size, cfg.seed);
    return detail::run_training(std::move(teacher), nullptr, train_ds, val_ds, cfg);
}

/// Adaptive-temperature mixed-sample distillation of a width-scaled student
/// from a frozen teacher.
inline TrainOutcome distill_student(Network& teacher, double student_width, const Dataset& train_ds,
                                    const Dataset& val_ds, TrainConfig cfg) {
    cfg.mode = TrainMode::distill;
    Network student =
        build_student(student_width, train_ds.num_classes(), train_ds.image_size, cfg.seed);
    return detail::run_training(std::move(student), &teacher, train_ds, val_ds, cfg);
}

/// Baseline arm: the same loop with alpha = 0 (hard labels only), no teacher
/// and no temperature.
inline TrainOutcome direct_train_student(double student_width, const Dataset& train_ds,
                                         const Dataset& val_ds, TrainConfig cfg) {
    cfg.mode = TrainMode::direct;
    cfg.kd.alpha = 0.0;
    cfg.kd.beta = 1.0;
    Network student =
        build_student(student_width, train_ds.num_classes(), train_ds.image_size, cfg.seed);
    return detail::run_training(std::move(student), nullptr, train_ds, val_ds, cfg);
}

/// Fixed-temperature comparator: constant tau, no augmentation policy.
inline TrainOutcome fixed_temp_distill(Network& teacher, double student_width,
                                       const Dataset& train_ds, const Dataset& val_ds,
                                       TrainConfig cfg) {
    if (!(cfg.tau_fixed > 0.0)) throw ParameterError("fixed_temp_distill: tau must be > 0");
    cfg.mode = TrainMode::distill_fixed;
    cfg.augment_enabled = false;
    Network student =
        build_student(student_width, train_ds.num_classes(), train_ds.image_size, cfg.seed);
    return detail::run_training(std::move(student), &teacher, train_ds, val_ds, cfg);
}

/// Per-epoch CSV: two rows per epoch (train and val splits). Wall-clock
/// seconds can be excluded for run-to-run comparisons.
inline std::string epoch_csv_string(const TrainReport& report, bool include_seconds = true) {
    std::string out = include_seconds ? "epoch,split,loss,acc,tau,lr,seconds\n"
                                      : "epoch,split,loss,acc,tau,lr\n";
    char buf[256];
    for (const EpochRecord& r : report.epochs) {
        for (int split = 0; split < 2; ++split) {
            const char* name = split == 0 ? "train" : "val";
            const double loss = split == 0 ? r.train_loss : r.val_loss;
            const double acc = split == 0 ? r.train_acc : r.val_acc;
            const double secs = split == 0 ? r.train_seconds : r.val_seconds;
            if (include_seconds)
                std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g,%.17g,%.3f\n", r.epoch, name,
                              loss, acc, r.tau, r.lr, secs);
            else
                std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g,%.17g\n", r.epoch, name, loss,
                              acc, r.tau, r.lr);
            out += buf;
        }
    }
    return out;
}

inline void write_epoch_csv(const TrainReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("train: cannot write '" + path + "'");
    os << epoch_csv_string(report);
    if (!os.flush()) throw IoError("train: write to '" + path + "' failed");
}

inline nlohmann::json train_report_to_json(const TrainReport& report) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const EpochRecord& r : report.epochs)
        epochs.push_back({{"epoch", r.epoch},
                          {"train_loss", r.train_loss},
                          {"train_acc", r.train_acc},
                          {"val_loss", r.val_loss},
                          {"val_acc", r.val_acc},
                          {"tau", r.tau},
                          {"lr", r.lr},
                          {"train_seconds", r.train_seconds},
                          {"val_seconds", r.val_seconds},
                          {"clipped_batches", r.clipped_batches}});
    return nlohmann::json{{"mode", to_string(report.mode)},
                          {"width_multiplier", report.width_multiplier},
                          {"seed", report.seed},
                          {"best_epoch", report.best_epoch},
                          {"best_val_accuracy", report.best_val_accuracy},
                          {"teacher_val_accuracy", report.teacher_val_accuracy},
                          {"total_clipped_batches", report.total_clipped_batches},
                          {"epochs", epochs}};
}

}  // namespace atmskd
