#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "atmskd/errors.hpp"
#include "atmskd/rng.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

/// Channel statistics used for input normalization (the usual ImageNet values).
inline constexpr std::array<double, 3> kChannelMean{0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kChannelStd{0.229, 0.224, 0.225};

struct Sample {
    Tensor image;  // CHW, normalized
    int label = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    std::string provenance;  // "synthetic" or "folder"
    int image_size = 0;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
};

/// (x - mean) / std per channel, in place.
inline void normalize_image(Tensor& chw) {
    detail::require(chw.rank() == 3 && chw.dim(0) == 3,
                    "normalize_image: expected (3,H,W), got " + shape_str(chw.shape()));
    const std::int64_t plane = static_cast<std::int64_t>(chw.dim(1)) * chw.dim(2);
    double* p = chw.ptr();
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < plane; ++i)
            p[c * plane + i] = (p[c * plane + i] - kChannelMean[static_cast<std::size_t>(c)]) /
                               kChannelStd[static_cast<std::size_t>(c)];
}

inline void denormalize_image(Tensor& chw) {
    const std::int64_t plane = static_cast<std::int64_t>(chw.dim(1)) * chw.dim(2);
    double* p = chw.ptr();
    for (int c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < plane; ++i)
            p[c * plane + i] = std::clamp(p[c * plane + i] * kChannelStd[static_cast<std::size_t>(c)] +
                                              kChannelMean[static_cast<std::size_t>(c)],
                                          0.0, 1.0);
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
    h = h - std::floor(h);  // wrap to [0,1)
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

/// Bilinear value noise from a coarse uniform grid.
struct ValueNoise {
    int grid;
    std::vector<double> values;  // (grid+1)^2

    ValueNoise(int g, RngStream& rng) : grid(g), values(static_cast<std::size_t>((g + 1) * (g + 1))) {
        for (auto& v : values) v = rng.uniform();
    }

    double at(double u, double v) const {  // u, v in [0,1]
        const double gu = u * grid, gv = v * grid;
        const int i0 = std::min(static_cast<int>(gu), grid - 1);
        const int j0 = std::min(static_cast<int>(gv), grid - 1);
        const double fu = gu - i0, fv = gv - j0;
        auto g = [&](int i, int j) { return values[static_cast<std::size_t>(i * (grid + 1) + j)]; };
        return (1 - fu) * ((1 - fv) * g(i0, j0) + fv * g(i0, j0 + 1)) +
               fu * ((1 - fv) * g(i0 + 1, j0) + fv * g(i0 + 1, j0 + 1));
    }
};

/// One scene: textured cluttered background plus either a small filled disc
/// (immature, cool hue) or a large annulus (mature, warm hue). Speckles take
/// hues from the full wheel so image-level color statistics stay weak evidence.
inline Tensor render_synthetic_scene(int label, int size, RngStream& rng) {
    const double S = static_cast<double>(size);
    std::vector<double> img(static_cast<std::size_t>(3) * size * size);
    const std::int64_t plane = static_cast<std::int64_t>(size) * size;
    auto px = [&](int c, int y, int x) -> double& {
        return img[static_cast<std::size_t>(c * plane + static_cast<std::int64_t>(y) * size + x)];
    };

    // Background: base color modulated by low-frequency noise.
    const double base[3] = {rng.uniform(0.15, 0.8), rng.uniform(0.15, 0.8), rng.uniform(0.15, 0.8)};
    const double tex_amp = rng.uniform(0.10, 0.35);
    ValueNoise noise(5, rng);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double t = (noise.at(y / (S - 1), x / (S - 1)) - 0.5) * 2.0 * tex_amp;
            for (int c = 0; c < 3; ++c) px(c, y, x) = std::clamp(base[c] + t, 0.0, 1.0);
        }

    // Out-of-focus background blobs drawn mostly from the OPPOSITE class's
    // palette: they balance the image-level warm/cool pixel mass between the
    // classes, so global color statistics carry little evidence and the
    // decision has to come from the in-focus object shape.
    const int n_blobs = static_cast<int>(rng.uniform_int(2, 4));
    for (int i = 0; i < n_blobs; ++i) {
        const double bcx = rng.uniform(0.0, S - 1.0);
        const double bcy = rng.uniform(0.0, S - 1.0);
        const double br = rng.uniform(0.10, 0.20) * S;
        const double aspect = rng.uniform(0.55, 1.0);
        const double angle = rng.uniform(0.0, M_PI);
        double bhue;
        if (rng.uniform() < 0.7)
            bhue = label == 0 ? rng.uniform(-0.06, 0.16) : rng.uniform(0.24, 0.60);
        else
            bhue = rng.uniform();
        double rgb[3];
        hsv_to_rgb(bhue, rng.uniform(0.4, 0.9), rng.uniform(0.4, 0.9), rgb);
        const double alpha_max = rng.uniform(0.55, 0.9);
        const double ca = std::cos(angle), sa = std::sin(angle);
        const int y0 = std::max(0, static_cast<int>(bcy - br - 1)), y1 = std::min(size - 1, static_cast<int>(bcy + br + 1));
        const int x0 = std::max(0, static_cast<int>(bcx - br - 1)), x1 = std::min(size - 1, static_cast<int>(bcx + br + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dy = y - bcy, dx = x - bcx;
                const double u = (ca * dx + sa * dy);
                const double v = (-sa * dx + ca * dy) / aspect;
                const double d = std::hypot(u, v) / br;
                if (d >= 1.0) continue;
                const double cov = alpha_max * std::clamp((1.0 - d) / 0.45, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) px(c, y, x) = (1 - cov) * px(c, y, x) + cov * rgb[c];
            }
    }

    // Clutter speckles, denser for the immature class, hues unrestricted.
    const int n_speckles =
        static_cast<int>(label == 0 ? rng.uniform_int(8, 13) : rng.uniform_int(6, 11));
    for (int i = 0; i < n_speckles; ++i) {
        const double cx = rng.uniform(0.0, S - 1.0);
        const double cy = rng.uniform(0.0, S - 1.0);
        const double r = rng.uniform(0.015, 0.05) * S;
        double rgb[3];
        hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.95), rgb);
        const int y0 = std::max(0, static_cast<int>(cy - r - 1)), y1 = std::min(size - 1, static_cast<int>(cy + r + 1));
        const int x0 = std::max(0, static_cast<int>(cx - r - 1)), x1 = std::min(size - 1, static_cast<int>(cx + r + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double d = std::hypot(y - cy, x - cx);
                const double cov = std::clamp(r - d + 0.5, 0.0, 1.0);
                if (cov <= 0.0) continue;
                for (int c = 0; c < 3; ++c) px(c, y, x) = (1 - cov) * px(c, y, x) + cov * rgb[c];
            }
    }

    // Foreground object.
    double outer, inner = 0.0, hue;
    if (label == 0) {
        outer = rng.uniform(0.09, 0.16) * S;   // small filled disc
        hue = rng.uniform(0.24, 0.60);         // cool: yellow-green through blue
    } else {
        outer = rng.uniform(0.18, 0.28) * S;   // large open annulus
        inner = rng.uniform(0.45, 0.62) * outer;
        hue = rng.uniform(-0.06, 0.16);        // warm: magenta-red through yellow
    }
    const double sat = rng.uniform(0.5, 0.95);
    const double val = rng.uniform(0.55, 0.95);
    const double margin = outer + 1.0;
    const double cy = rng.uniform(margin, S - 1.0 - margin);
    const double cx = rng.uniform(margin, S - 1.0 - margin);
    double rgb[3];
    hsv_to_rgb(hue, sat, val, rgb);
    const int y0 = std::max(0, static_cast<int>(cy - outer - 1)), y1 = std::min(size - 1, static_cast<int>(cy + outer + 1));
    const int x0 = std::max(0, static_cast<int>(cx - outer - 1)), x1 = std::min(size - 1, static_cast<int>(cx + outer + 1));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d = std::hypot(y - cy, x - cx);
            double cov;
            if (label == 0) {
                cov = std::clamp(outer - d + 0.5, 0.0, 1.0);
            } else {
                cov = std::clamp(std::min(outer - d, d - inner) + 0.5, 0.0, 1.0);
            }
            if (cov <= 0.0) continue;
            const double shade = 0.82 + 0.18 * (1.0 - d / (outer + 1.0));
            for (int c = 0; c < 3; ++c)
                px(c, y, x) = (1 - cov) * px(c, y, x) + cov * std::clamp(rgb[c] * shade, 0.0, 1.0);
        }

    // Illumination: one global gain plus mild per-channel white-balance drift.
    const double gain = rng.uniform(0.55, 1.35);
    for (int c = 0; c < 3; ++c) {
        const double cg = gain * rng.uniform(0.85, 1.15);
        for (std::int64_t i = 0; i < plane; ++i)
            img[static_cast<std::size_t>(c * plane + i)] =
                std::clamp(img[static_cast<std::size_t>(c * plane + i)] * cg, 0.0, 1.0);
    }
    return Tensor::from_data({3, size, size}, std::move(img));
}

}  // namespace detail

/// Two-class synthetic scenes ("immature" discs vs "mature" annuli) with
/// randomized position, scale, illumination and background clutter. Each
/// sample draws from its own seeded substream, so the dataset is
/// bit-identical for a given (n_per_class, image_size, seed).
inline Dataset generate_synthetic(int n_per_class, int image_size, std::uint64_t seed) {
    if (image_size < 32)
        throw ParameterError("generate_synthetic: image_size must be >= 32, got " +
                             std::to_string(image_size));
    if (n_per_class < 1) throw ParameterError("generate_synthetic: n_per_class must be >= 1");
    Dataset ds;
    ds.class_names = {"immature", "mature"};
    ds.provenance = "synthetic";
    ds.image_size = image_size;
    RngStream root(seed);
    for (int label = 0; label < 2; ++label) {
        for (int i = 0; i < n_per_class; ++i) {
            RngStream srng = root.fork(static_cast<std::uint64_t>(label) * 1000003ULL +
                                       static_cast<std::uint64_t>(i));
            Tensor img = detail::render_synthetic_scene(label, image_size, srng);
            normalize_image(img);
            ds.samples.push_back({std::move(img), label});
        }
    }
    return ds;
}

struct SplitSpec {
    double train_fraction = 0.70;
    double val_fraction_of_train = 0.20;
    std::uint64_t seed = 42;
};

struct SplitResult {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Stratified three-way split. Shuffling is driven solely by spec.seed; the
/// partitions are disjoint and cover the dataset, per-class sizes within one
/// sample of the exact fractions.
inline SplitResult split(const Dataset& ds, const SplitSpec& spec) {
    if (ds.samples.empty()) throw ValidationError("split: dataset is empty");
    SplitResult out;
    for (Dataset* part : {&out.train, &out.val, &out.test}) {
        part->class_names = ds.class_names;
        part->provenance = ds.provenance;
        part->image_size = ds.image_size;
    }
    RngStream rng(spec.seed);
    for (int c = 0; c < ds.num_classes(); ++c) {
        std::vector<int> idx;
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            if (ds.samples[i].label == c) idx.push_back(static_cast<int>(i));
        if (idx.size() < 3)
            throw ValidationError("split: class '" + ds.class_names[static_cast<std::size_t>(c)] +
                                  "' has fewer than 3 samples");
        std::vector<int> perm = rng.permutation(static_cast<int>(idx.size()));
        const int n_train_total = static_cast<int>(std::lround(static_cast<double>(idx.size()) * spec.train_fraction));
        const int n_val = static_cast<int>(std::lround(n_train_total * spec.val_fraction_of_train));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Sample& s = ds.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(perm[k])])];
            if (static_cast<int>(k) < n_train_total - n_val)
                out.train.samples.push_back(s);
            else if (static_cast<int>(k) < n_train_total)
                out.val.samples.push_back(s);
            else
                out.test.samples.push_back(s);
        }
    }
    return out;
}

inline Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    std::vector<double> data(labels.size() * static_cast<std::size_t>(num_classes), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw ValidationError("one_hot: label " + std::to_string(labels[i]) + " out of range");
        data[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return Tensor::from_data({static_cast<int>(labels.size()), num_classes}, std::move(data));
}

struct Batch {
    Tensor images;             // NCHW
    Tensor targets;            // N x C one-hot
    std::vector<int> indices;  // positions in the source dataset
};

/// Deterministic batching; a fresh permutation is drawn from `rng` per call
/// when shuffling, and the last partial batch is kept.
inline std::vector<Batch> batches(const Dataset& ds, int batch_size, bool shuffle, RngStream& rng) {
    if (batch_size < 1) throw ParameterError("batches: batch_size must be >= 1");
    const int n = static_cast<int>(ds.samples.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    if (shuffle) order = rng.permutation(n);

    std::vector<Batch> out;
    const int C = ds.num_classes();
    for (int start = 0; start < n; start += batch_size) {
        const int count = std::min(batch_size, n - start);
        const Shape img_shape = ds.samples[0].image.shape();
        std::vector<double> data(static_cast<std::size_t>(count) * static_cast<std::size_t>(shape_numel(img_shape)));
        std::vector<int> labels(static_cast<std::size_t>(count));
        std::vector<int> indices(static_cast<std::size_t>(count));
        const std::int64_t stride = shape_numel(img_shape);
        for (int i = 0; i < count; ++i) {
            const int src = order[static_cast<std::size_t>(start + i)];
            const auto& s = ds.samples[static_cast<std::size_t>(src)];
            std::copy(s.image.data().begin(), s.image.data().end(),
                      data.begin() + static_cast<std::ptrdiff_t>(i * stride));
            labels[static_cast<std::size_t>(i)] = s.label;
            indices[static_cast<std::size_t>(i)] = src;
        }
        Batch b;
        b.images = Tensor::from_data({count, img_shape[0], img_shape[1], img_shape[2]}, std::move(data));
        b.targets = one_hot(labels, C);
        b.indices = std::move(indices);
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace atmskd
