#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "atmskd/errors.hpp"
#include "atmskd/rng.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

enum class MixMethod { none, mixup, cutmix };

inline const char* to_string(MixMethod m) {
    switch (m) {
        case MixMethod::none: return "none";
        case MixMethod::mixup: return "mixup";
        case MixMethod::cutmix: return "cutmix";
    }
    return "?";
}

/// An augmented batch plus the (lambda, paired-label) bookkeeping the mixed
/// loss needs. method == none implies lam == 1 and targets_b == targets_a.
struct MixedBatch {
    Tensor images;     // NCHW
    Tensor targets_a;  // N x C
    Tensor targets_b;  // N x C
    double lam = 1.0;
    MixMethod method = MixMethod::none;

    Tensor mixed_targets() const {
        std::vector<double> data(targets_a.data().size());
        for (std::size_t i = 0; i < data.size(); ++i)
            data[i] = lam * targets_a.data()[i] + (1.0 - lam) * targets_b.data()[i];
        return Tensor::from_data(targets_a.shape(), std::move(data));
    }
};

struct AugmentConfig {
    double p_trigger = 0.5;
    double alpha_mixup = 0.2;
    double alpha_cutmix = 1.0;
};

/// Symmetric Beta(alpha, alpha) draw via two Gamma variates.
inline double sample_beta(double alpha, RngStream& rng) {
    if (!(alpha > 0.0))
        throw ParameterError("sample_beta: alpha must be > 0, got " + std::to_string(alpha));
    return rng.beta(alpha, alpha);
}

inline MixedBatch passthrough_batch(const Tensor& images, const Tensor& targets) {
    return MixedBatch{images, targets, targets, 1.0, MixMethod::none};
}

namespace detail {

inline Tensor permute_rows(const Tensor& targets, const std::vector<int>& perm) {
    const int N = targets.dim(0), C = targets.dim(1);
    std::vector<double> data(targets.data().size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            data[static_cast<std::size_t>(n) * C + static_cast<std::size_t>(c)] =
                targets.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(n)]) * C +
                               static_cast<std::size_t>(c)];
    return Tensor::from_data(targets.shape(), std::move(data));
}

}  // namespace detail

/// Deterministic mixup core: x~ = lam*x_i + (1-lam)*x_perm(i), labels paired
/// the same way. Exposed so tests can pin lambda and the pairing.
inline MixedBatch mixup_with(const Tensor& images, const Tensor& targets, double lam,
                             const std::vector<int>& perm) {
    const int N = images.dim(0);
    const std::int64_t stride = images.numel() / N;
    std::vector<double> data(images.data().size());
    const double* x = images.ptr();
    for (int n = 0; n < N; ++n) {
        const double* xi = x + n * stride;
        const double* xj = x + static_cast<std::int64_t>(perm[static_cast<std::size_t>(n)]) * stride;
        double* dst = data.data() + n * stride;
        for (std::int64_t i = 0; i < stride; ++i) dst[i] = lam * xi[i] + (1.0 - lam) * xj[i];
    }
    MixedBatch out;
    out.images = Tensor::from_data(images.shape(), std::move(data));
    out.targets_a = targets;
    out.targets_b = detail::permute_rows(targets, perm);
    out.lam = lam;
    out.method = MixMethod::mixup;
    return out;
}

/// Convex image/label combination with lambda ~ Beta(alpha, alpha) and a
/// uniformly random partner permutation. Batches of one pass through.
inline MixedBatch mixup(const Tensor& images, const Tensor& targets, double alpha, RngStream& rng) {
    detail::require(images.rank() == 4, "mixup: images must be NCHW, got " + shape_str(images.shape()));
    if (images.dim(0) < 2) return passthrough_batch(images, targets);
    const double lam = sample_beta(alpha, rng);
    return mixup_with(images, targets, lam, rng.permutation(images.dim(0)));
}

/// Deterministic cutmix core: a rect of the raw-lambda area fraction centered
/// at (cy, cx), clipped to bounds; the stored lam is recomputed from the
/// clipped integer patch area.
inline MixedBatch cutmix_with(const Tensor& images, const Tensor& targets, double lam_raw, int cy,
                              int cx, const std::vector<int>& perm) {
    const int N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const double cut = std::sqrt(1.0 - lam_raw);
    const int rh = static_cast<int>(H * cut);
    const int rw = static_cast<int>(W * cut);
    const int y1 = std::max(0, cy - rh / 2);
    const int y2 = std::min(H, cy - rh / 2 + rh);
    const int x1 = std::max(0, cx - rw / 2);
    const int x2 = std::min(W, cx - rw / 2 + rw);
    const std::int64_t area = static_cast<std::int64_t>(std::max(0, y2 - y1)) * std::max(0, x2 - x1);
    if (area == 0) return passthrough_batch(images, targets);

    std::vector<double> data = images.data();
    const double* x = images.ptr();
    const std::int64_t stride = static_cast<std::int64_t>(C) * H * W;
    for (int n = 0; n < N; ++n) {
        const double* src = x + static_cast<std::int64_t>(perm[static_cast<std::size_t>(n)]) * stride;
        double* dst = data.data() + n * stride;
        for (int c = 0; c < C; ++c)
            for (int y = y1; y < y2; ++y) {
                const std::int64_t row = (static_cast<std::int64_t>(c) * H + y) * W;
                for (int xx = x1; xx < x2; ++xx) dst[row + xx] = src[row + xx];
            }
    }
    MixedBatch out;
    out.images = Tensor::from_data(images.shape(), std::move(data));
    out.targets_a = targets;
    out.targets_b = detail::permute_rows(targets, perm);
    out.lam = 1.0 - static_cast<double>(area) / (static_cast<double>(H) * W);
    out.method = MixMethod::cutmix;
    return out;
}

/// Patch paste from a random partner; label weight equals the surviving area
/// ratio exactly. Degenerate patches fall back to method none.
inline MixedBatch cutmix(const Tensor& images, const Tensor& targets, double alpha, RngStream& rng) {
    detail::require(images.rank() == 4, "cutmix: images must be NCHW, got " + shape_str(images.shape()));
    const int N = images.dim(0), H = images.dim(2), W = images.dim(3);
    if (N < 2 || H < 2 || W < 2) return passthrough_batch(images, targets);
    const double lam_raw = sample_beta(alpha, rng);
    const int cy = static_cast<int>(rng.uniform_int(0, H - 1));
    const int cx = static_cast<int>(rng.uniform_int(0, W - 1));
    return cutmix_with(images, targets, lam_raw, cy, cx, rng.permutation(N));
}

/// Per-batch policy: fires with probability p_trigger; when it fires, mixup
/// or cutmix is chosen with equal probability, never both.
inline MixedBatch apply_policy(const Tensor& images, const Tensor& targets,
                               const AugmentConfig& config, RngStream& rng) {
    if (config.p_trigger < 0.0 || config.p_trigger > 1.0)
        throw ParameterError("apply_policy: p_trigger must lie in [0, 1]");
    if (!rng.bernoulli(config.p_trigger)) return passthrough_batch(images, targets);
    if (rng.bernoulli(0.5)) return mixup(images, targets, config.alpha_mixup, rng);
    return cutmix(images, targets, config.alpha_cutmix, rng);
}

}  // namespace atmskd
