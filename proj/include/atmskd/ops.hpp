#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "atmskd/errors.hpp"
#include "atmskd/rng.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

enum class Mode { train, eval };

namespace detail {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

/// Scatter one sample's patches into its column block of a batch-wide
/// (C*k*k) x (N*OH*OW) matrix whose rows have length `row_stride`.
inline void im2col_strided(const double* x, int C, int H, int W, int k, int stride, int pad, int OH,
                           int OW, double* col, std::int64_t row_stride) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                double* row = col + (static_cast<std::int64_t>(c) * k * k + ki * k + kj) * row_stride;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill(row + static_cast<std::int64_t>(oh) * OW,
                                  row + static_cast<std::int64_t>(oh + 1) * OW, 0.0);
                        continue;
                    }
                    const double* xrow = x + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        row[static_cast<std::int64_t>(oh) * OW + ow] =
                            (iw >= 0 && iw < W) ? xrow[iw] : 0.0;
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col_strided: accumulate one sample's column block back into
/// its input gradient.
inline void col2im_add_strided(const double* col, std::int64_t row_stride, int C, int H, int W,
                               int k, int stride, int pad, int OH, int OW, double* dx) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const double* row =
                    col + (static_cast<std::int64_t>(c) * k * k + ki * k + kj) * row_stride;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    double* dxrow = dx + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dxrow[iw] += row[static_cast<std::int64_t>(oh) * OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2D convolution, NCHW input, OIkk weight, optional per-channel bias.
/// Output spatial size follows floor((H + 2*pad - k)/stride) + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride,
                     int padding) {
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    if (padding < 0) throw ParameterError("conv2d: padding must be >= 0");
    detail::require(input.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(input.shape()));
    detail::require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
                    "conv2d: weight must be OIkk with square kernel, got " + shape_str(weight.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int O = weight.dim(0), I = weight.dim(1), k = weight.dim(2);
    if (C != I)
        throw DimensionError("conv2d: input channels " + shape_str(input.shape()) +
                             " do not match weight " + shape_str(weight.shape()));
    if (k > H + 2 * padding || k > W + 2 * padding)
        throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) +
                             " does not fit padded input " + shape_str(input.shape()));
    if (bias) detail::require(bias->rank() == 1 && bias->dim(0) == O,
                              "conv2d: bias must have shape (O), got " + shape_str(bias->shape()));

    const int OH = (H + 2 * padding - k) / stride + 1;
    const int OW = (W + 2 * padding - k) / stride + 1;
    const std::int64_t in_plane = static_cast<std::int64_t>(C) * H * W;
    const std::int64_t out_plane = static_cast<std::int64_t>(O) * OH * OW;
    const std::int64_t cols = static_cast<std::int64_t>(OH) * OW;
    const std::int64_t kk = static_cast<std::int64_t>(C) * k * k;
    const std::int64_t all_cols = static_cast<std::int64_t>(N) * cols;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    // Patches from the whole batch go into one (C*k*k) x (N*OH*OW) matrix so
    // each conv is a single large GEMM; the result is scattered back to NCHW.
    std::vector<double> out(static_cast<std::size_t>(N) * out_plane);
    detail::MapCM wmat(weight.ptr(), O, kk);
    {
        std::vector<double> colbuf(pointwise ? 0 : static_cast<std::size_t>(kk * all_cols));
        std::vector<double> ybuf(static_cast<std::size_t>(O) * all_cols);
        if (!pointwise)
            for (int n = 0; n < N; ++n)
                detail::im2col_strided(input.ptr() + n * in_plane, C, H, W, k, stride, padding, OH, OW,
                                       colbuf.data() + n * cols, all_cols);
        const double* col = pointwise ? input.ptr() : colbuf.data();
        detail::MapM y(ybuf.data(), O, all_cols);
        if (pointwise) {
            // NCHW with k=1,s=1,p=0: each sample is already a (C x HW) block.
            for (int n = 0; n < N; ++n) {
                detail::MapM yn(out.data() + n * out_plane, O, cols);
                yn.noalias() = wmat * detail::MapCM(col + n * in_plane, kk, cols);
            }
        } else {
            y.noalias() = wmat * detail::MapCM(col, kk, all_cols);
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    std::copy(ybuf.data() + o * all_cols + n * cols,
                              ybuf.data() + o * all_cols + (n + 1) * cols,
                              out.data() + n * out_plane + o * cols);
        }
        if (bias) {
            const double* b = bias->ptr();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) {
                    double* dst = out.data() + n * out_plane + o * cols;
                    for (std::int64_t i = 0; i < cols; ++i) dst[i] += b[o];
                }
        }
    }

    std::vector<Tensor> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias != nullptr;
    auto backward = [=](detail::TensorNode& node) {
        const auto& in = *node.parents[0];
        const auto& w = *node.parents[1];
        detail::MapCM wm(w.data.data(), O, kk);

        // Gather dY into the (O x N*OH*OW) layout used by the forward GEMM.
        std::vector<double> dybuf(static_cast<std::size_t>(O) * all_cols);
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o)
                std::copy(node.grad.data() + n * out_plane + o * cols,
                          node.grad.data() + n * out_plane + (o + 1) * cols,
                          dybuf.data() + o * all_cols + n * cols);
        detail::MapCM dy(dybuf.data(), O, all_cols);

        std::vector<double> colbuf;
        if (!pointwise && (w.requires_grad || in.requires_grad)) {
            colbuf.resize(static_cast<std::size_t>(kk * all_cols));
            for (int n = 0; n < N; ++n)
                detail::im2col_strided(in.data.data() + n * in_plane, C, H, W, k, stride, padding, OH,
                                       OW, colbuf.data() + n * cols, all_cols);
        }
        if (w.requires_grad) {
            detail::MapM dw(node.parents[1]->ensure_grad().data(), O, kk);
            if (pointwise) {
                for (int n = 0; n < N; ++n)
                    dw.noalias() += detail::MapCM(dybuf.data(), O, all_cols)
                                        .middleCols(n * cols, cols) *
                                    detail::MapCM(in.data.data() + n * in_plane, kk, cols).transpose();
            } else {
                dw.noalias() += dy * detail::MapCM(colbuf.data(), kk, all_cols).transpose();
            }
        }
        if (in.requires_grad) {
            if (pointwise) {
                for (int n = 0; n < N; ++n) {
                    detail::MapM dxm(node.parents[0]->ensure_grad().data() + n * in_plane, kk, cols);
                    dxm.noalias() +=
                        wm.transpose() * detail::MapCM(dybuf.data(), O, all_cols).middleCols(n * cols, cols);
                }
            } else {
                std::vector<double> colgrad(static_cast<std::size_t>(kk * all_cols));
                detail::MapM cg(colgrad.data(), kk, all_cols);
                cg.noalias() = wm.transpose() * dy;
                for (int n = 0; n < N; ++n)
                    detail::col2im_add_strided(colgrad.data() + n * cols, all_cols, C, H, W, k, stride,
                                               padding, OH, OW,
                                               node.parents[0]->ensure_grad().data() + n * in_plane);
            }
        }
        if (has_bias && node.parents[2]->requires_grad) {
            double* db = node.parents[2]->ensure_grad().data();
            for (int o = 0; o < O; ++o) db[o] += dy.row(o).sum();
        }
    };
    return detail::make_result({N, O, OH, OW}, std::move(out), "conv2d", std::move(inputs),
                               std::move(backward));
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
                     int padding) {
    return conv2d(input, weight, &bias, stride, padding);
}

/// Max pooling without padding; gradient goes to the first maximal element
/// of each window in row-major order.
inline Tensor maxpool2d(const Tensor& input, int k, int stride) {
    if (k < 1 || stride < 1) throw ParameterError("maxpool2d: k and stride must be >= 1");
    detail::require(input.rank() == 4, "maxpool2d: input must be NCHW, got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (k > H || k > W)
        throw DimensionError("maxpool2d: window " + std::to_string(k) + "x" + std::to_string(k) +
                             " larger than input " + shape_str(input.shape()));
    const int OH = (H - k) / stride + 1;
    const int OW = (W - k) / stride + 1;
    const std::int64_t out_n = static_cast<std::int64_t>(N) * C * OH * OW;

    std::vector<double> out(static_cast<std::size_t>(out_n));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out_n));
    const double* x = input.ptr();
    std::int64_t oi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh) {
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int ki = 0; ki < k; ++ki) {
                        const std::int64_t row = base + static_cast<std::int64_t>(oh * stride + ki) * W;
                        for (int kj = 0; kj < k; ++kj) {
                            const double v = x[row + ow * stride + kj];
                            if (v > best) {
                                best = v;
                                best_idx = row + ow * stride + kj;
                            }
                        }
                    }
                    out[static_cast<std::size_t>(oi)] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }

    auto backward = [argmax, out_n](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dx = node.parents[0]->ensure_grad().data();
        const double* dy = node.grad.data();
        for (std::int64_t i = 0; i < out_n; ++i) dx[(*argmax)[static_cast<std::size_t>(i)]] += dy[i];
    };
    return detail::make_result({N, C, OH, OW}, std::move(out), "maxpool2d", {input},
                               std::move(backward));
}

/// Mean over the spatial dimensions, output NC11.
inline Tensor global_avg_pool(const Tensor& input) {
    detail::require(input.rank() == 4, "global_avg_pool: input must be NCHW, got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    detail::require(H >= 1 && W >= 1, "global_avg_pool: empty spatial extent " + shape_str(input.shape()));
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    std::vector<double> out(static_cast<std::size_t>(N) * C);
    const double* x = input.ptr();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        double s = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) s += x[nc * plane + i];
        out[static_cast<std::size_t>(nc)] = s / static_cast<double>(plane);
    }
    auto backward = [N, C, plane](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dx = node.parents[0]->ensure_grad().data();
        const double* dy = node.grad.data();
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc)
            for (std::int64_t i = 0; i < plane; ++i) dx[nc * plane + i] += dy[nc] * inv;
    };
    return detail::make_result({N, C, 1, 1}, std::move(out), "global_avg_pool", {input},
                               std::move(backward));
}

/// Per-channel running statistics for batchnorm2d. Not part of the autograd
/// graph; updated as a side effect of train-mode forward passes.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    bool initialized = false;

    explicit BatchNormState(int channels = 0)
        : running_mean(static_cast<std::size_t>(channels), 0.0),
          running_var(static_cast<std::size_t>(channels), 1.0) {}
};

/// Batch normalization over NCHW. Train mode normalizes with biased batch
/// statistics and updates the running buffers with the unbiased variance;
/// eval mode uses the running buffers.
inline Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                          BatchNormState& state, Mode mode, double momentum = 0.1,
                          double eps = 1e-5) {
    detail::require(input.rank() == 4, "batchnorm2d: input must be NCHW, got " + shape_str(input.shape()));
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    detail::require(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
                    "batchnorm2d: gamma/beta must have shape (C)=" + std::to_string(C));
    if (static_cast<int>(state.running_mean.size()) != C)
        throw ConfigError("batchnorm2d: state has " + std::to_string(state.running_mean.size()) +
                          " channels, input has " + std::to_string(C));
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    const std::int64_t count = static_cast<std::int64_t>(N) * plane;

    auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
    const double* x = input.ptr();

    if (mode == Mode::train) {
        if (count < 2) throw ValidationError("batchnorm2d: train mode needs at least 2 values per channel");
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sumsq = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* p = x + (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sumsq += p[i] * p[i];
                }
            }
            const double m = sum / static_cast<double>(count);
            double v = sumsq / static_cast<double>(count) - m * m;
            if (v < 0.0) v = 0.0;  // guard fp cancellation
            (*mean)[static_cast<std::size_t>(c)] = m;
            (*invstd)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(v + eps);
            const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
            state.running_mean[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_mean[static_cast<std::size_t>(c)] + momentum * m;
            state.running_var[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * state.running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
        }
        state.initialized = true;
    } else {
        if (!state.initialized)
            throw ConfigError("batchnorm2d: eval mode before any train-mode update or checkpoint load");
        for (int c = 0; c < C; ++c) {
            (*mean)[static_cast<std::size_t>(c)] = state.running_mean[static_cast<std::size_t>(c)];
            (*invstd)[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(state.running_var[static_cast<std::size_t>(c)] + eps);
        }
    }

    std::vector<double> out(input.data().size());
    const double* g = gamma.ptr();
    const double* b = beta.ptr();
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
            const double m = (*mean)[static_cast<std::size_t>(c)];
            const double is = (*invstd)[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < plane; ++i)
                out[static_cast<std::size_t>(base + i)] = (x[base + i] - m) * is * g[c] + b[c];
        }
    }

    const bool batch_stats = (mode == Mode::train);
    auto backward = [=](detail::TensorNode& node) {
        auto& in = *node.parents[0];
        auto& gam = *node.parents[1];
        auto& bet = *node.parents[2];
        const double* xv = in.data.data();
        const double* dy = node.grad.data();
        const double* gv = gam.data.data();
        for (int c = 0; c < C; ++c) {
            const double m = (*mean)[static_cast<std::size_t>(c)];
            const double is = (*invstd)[static_cast<std::size_t>(c)];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < N; ++n) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum_dy += dy[base + i];
                    sum_dy_xhat += dy[base + i] * (xv[base + i] - m) * is;
                }
            }
            if (gam.requires_grad) gam.ensure_grad()[static_cast<std::size_t>(c)] += sum_dy_xhat;
            if (bet.requires_grad) bet.ensure_grad()[static_cast<std::size_t>(c)] += sum_dy;
            if (in.requires_grad) {
                double* dx = in.ensure_grad().data();
                if (batch_stats) {
                    const double scale = gv[c] * is / static_cast<double>(count);
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const double xhat = (xv[base + i] - m) * is;
                            dx[base + i] += scale * (static_cast<double>(count) * dy[base + i] - sum_dy -
                                                     xhat * sum_dy_xhat);
                        }
                    }
                } else {
                    const double scale = gv[c] * is;
                    for (int n = 0; n < N; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) dx[base + i] += scale * dy[base + i];
                    }
                }
            }
        }
    };
    return detail::make_result(input.shape(), std::move(out), "batchnorm2d", {input, gamma, beta},
                               std::move(backward));
}

inline Tensor relu(const Tensor& input) {
    std::vector<double> out(input.data().size());
    const double* x = input.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    auto backward = [](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dx = node.parents[0]->ensure_grad().data();
        const double* xv = node.parents[0]->data.data();
        const double* dy = node.grad.data();
        for (std::size_t i = 0; i < node.data.size(); ++i)
            if (xv[i] > 0.0) dx[i] += dy[i];
    };
    return detail::make_result(input.shape(), std::move(out), "relu", {input}, std::move(backward));
}

/// Channel dropout: whole (n, c) feature maps are zeroed with probability
/// `rate` in train mode, survivors rescaled by 1/(1-rate). Identity in eval
/// mode and for rate 0 (no rng draws consumed in either case).
inline Tensor dropout_spatial(const Tensor& input, double rate, Mode mode, RngStream* rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ParameterError("dropout_spatial: rate must lie in [0, 1), got " + std::to_string(rate));
    detail::require(input.rank() == 4, "dropout_spatial: input must be NCHW, got " + shape_str(input.shape()));
    if (mode == Mode::eval || rate == 0.0) return input;
    if (!rng) throw UsageError("dropout_spatial: train mode with rate > 0 requires an rng stream");

    const int N = input.dim(0), C = input.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(input.dim(2)) * input.dim(3);
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * C);
    for (auto& m : *mask) m = rng->bernoulli(rate) ? 0.0 : keep_scale;

    std::vector<double> out(input.data().size());
    const double* x = input.ptr();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
        const double m = (*mask)[static_cast<std::size_t>(nc)];
        for (std::int64_t i = 0; i < plane; ++i) out[static_cast<std::size_t>(nc * plane + i)] = x[nc * plane + i] * m;
    }
    auto backward = [mask, plane](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dx = node.parents[0]->ensure_grad().data();
        const double* dy = node.grad.data();
        for (std::size_t nc = 0; nc < mask->size(); ++nc) {
            const double m = (*mask)[nc];
            for (std::int64_t i = 0; i < plane; ++i)
                dx[static_cast<std::int64_t>(nc) * plane + i] += dy[static_cast<std::int64_t>(nc) * plane + i] * m;
        }
    };
    return detail::make_result(input.shape(), std::move(out), "dropout_spatial", {input},
                               std::move(backward));
}

/// Affine map: (N, F) x (F, K) + (K).
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    detail::require(input.rank() == 2 && weight.rank() == 2 && bias.rank() == 1,
                    "linear: expected input (N,F), weight (F,K), bias (K)");
    const int N = input.dim(0), F = input.dim(1), K = weight.dim(1);
    if (weight.dim(0) != F || bias.dim(0) != K)
        throw DimensionError("linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                             shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));

    std::vector<double> out(static_cast<std::size_t>(N) * K);
    detail::MapM y(out.data(), N, K);
    y.noalias() = detail::MapCM(input.ptr(), N, F) * detail::MapCM(weight.ptr(), F, K);
    const double* b = bias.ptr();
    for (int n = 0; n < N; ++n)
        for (int kcol = 0; kcol < K; ++kcol) out[static_cast<std::size_t>(n) * K + kcol] += b[kcol];

    auto backward = [N, F, K](detail::TensorNode& node) {
        detail::MapCM dy(node.grad.data(), N, K);
        auto& in = *node.parents[0];
        auto& w = *node.parents[1];
        auto& bs = *node.parents[2];
        if (in.requires_grad) {
            detail::MapM dx(in.ensure_grad().data(), N, F);
            dx.noalias() += dy * detail::MapCM(w.data.data(), F, K).transpose();
        }
        if (w.requires_grad) {
            detail::MapM dw(w.ensure_grad().data(), F, K);
            dw.noalias() += detail::MapCM(in.data.data(), N, F).transpose() * dy;
        }
        if (bs.requires_grad) {
            double* db = bs.ensure_grad().data();
            for (int n = 0; n < N; ++n)
                for (int kcol = 0; kcol < K; ++kcol) db[kcol] += node.grad[static_cast<std::size_t>(n) * K + kcol];
        }
    };
    return detail::make_result({N, K}, std::move(out), "linear", {input, weight, bias},
                               std::move(backward));
}

namespace detail {

inline void check_tau(double tau, const char* op) {
    if (!(tau > 0.0)) throw ParameterError(std::string(op) + ": tau must be > 0, got " + std::to_string(tau));
}

}  // namespace detail

/// Temperature-scaled softmax over rows, max-subtracted for overflow safety.
inline Tensor softmax_temp(const Tensor& logits, double tau) {
    detail::check_tau(tau, "softmax_temp");
    detail::require(logits.rank() == 2, "softmax_temp: logits must be (N,C), got " + shape_str(logits.shape()));
    const int N = logits.dim(0), C = logits.dim(1);
    std::vector<double> out(logits.data().size());
    const double* z = logits.ptr();
    for (int n = 0; n < N; ++n) {
        const double* row = z + static_cast<std::int64_t>(n) * C;
        double* prow = out.data() + static_cast<std::int64_t>(n) * C;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) mx = std::max(mx, row[c] / tau);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            prow[c] = std::exp(row[c] / tau - mx);
            sum += prow[c];
        }
        for (int c = 0; c < C; ++c) prow[c] /= sum;
    }
    auto backward = [N, C, tau](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dz = node.parents[0]->ensure_grad().data();
        const double* p = node.data.data();
        const double* dy = node.grad.data();
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = static_cast<std::int64_t>(n) * C;
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += dy[base + c] * p[base + c];
            for (int c = 0; c < C; ++c) dz[base + c] += p[base + c] * (dy[base + c] - dot) / tau;
        }
    };
    return detail::make_result(logits.shape(), std::move(out), "softmax_temp", {logits},
                               std::move(backward));
}

inline Tensor log_softmax_temp(const Tensor& logits, double tau) {
    detail::check_tau(tau, "log_softmax_temp");
    detail::require(logits.rank() == 2,
                    "log_softmax_temp: logits must be (N,C), got " + shape_str(logits.shape()));
    const int N = logits.dim(0), C = logits.dim(1);
    std::vector<double> out(logits.data().size());
    const double* z = logits.ptr();
    for (int n = 0; n < N; ++n) {
        const double* row = z + static_cast<std::int64_t>(n) * C;
        double* lrow = out.data() + static_cast<std::int64_t>(n) * C;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) mx = std::max(mx, row[c] / tau);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(row[c] / tau - mx);
        const double lse = mx + std::log(sum);
        for (int c = 0; c < C; ++c) lrow[c] = row[c] / tau - lse;
    }
    auto backward = [N, C, tau](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dz = node.parents[0]->ensure_grad().data();
        const double* ls = node.data.data();
        const double* dy = node.grad.data();
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = static_cast<std::int64_t>(n) * C;
            double sum_dy = 0.0;
            for (int c = 0; c < C; ++c) sum_dy += dy[base + c];
            for (int c = 0; c < C; ++c)
                dz[base + c] += (dy[base + c] - std::exp(ls[base + c]) * sum_dy) / tau;
        }
    };
    return detail::make_result(logits.shape(), std::move(out), "log_softmax_temp", {logits},
                               std::move(backward));
}

/// Batch-mean cross entropy against a target distribution, with optional
/// label smoothing folded into the target.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& target_dist,
                            double label_smoothing = 0.0) {
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ParameterError("cross_entropy: label_smoothing must lie in [0, 1)");
    detail::require(logits.rank() == 2 && target_dist.rank() == 2,
                    "cross_entropy: logits and targets must be (N,C)");
    if (logits.shape() != target_dist.shape())
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                             shape_str(target_dist.shape()));
    if (target_dist.requires_grad())
        throw UsageError("cross_entropy: differentiable targets are not supported");
    const int N = logits.dim(0), C = logits.dim(1);
    const double* t = target_dist.ptr();
    for (int n = 0; n < N; ++n) {
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += t[static_cast<std::int64_t>(n) * C + c];
        if (std::abs(s - 1.0) > 1e-6)
            throw ValidationError("cross_entropy: target row " + std::to_string(n) + " sums to " +
                                  std::to_string(s) + ", expected 1");
    }

    const double eps = label_smoothing;
    const double* z = logits.ptr();
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* row = z + static_cast<std::int64_t>(n) * C;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
        const double lse = mx + std::log(sum);
        for (int c = 0; c < C; ++c) {
            const double smoothed = (1.0 - eps) * t[static_cast<std::int64_t>(n) * C + c] + eps / C;
            loss -= smoothed * (row[c] - lse);
        }
    }
    loss /= static_cast<double>(N);

    auto backward = [N, C, eps](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        auto& in = *node.parents[0];
        const double* z = in.data.data();
        const double* t = node.parents[1]->data.data();
        double* dz = in.ensure_grad().data();
        const double g = node.grad[0] / static_cast<double>(N);
        for (int n = 0; n < N; ++n) {
            const double* row = z + static_cast<std::int64_t>(n) * C;
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < C; ++c) mx = std::max(mx, row[c]);
            double sum = 0.0;
            for (int c = 0; c < C; ++c) sum += std::exp(row[c] - mx);
            for (int c = 0; c < C; ++c) {
                const double p = std::exp(row[c] - mx) / sum;
                const double smoothed = (1.0 - eps) * t[static_cast<std::int64_t>(n) * C + c] + eps / C;
                dz[static_cast<std::int64_t>(n) * C + c] += g * (p - smoothed);
            }
        }
    };
    return detail::make_result({1}, {loss}, "cross_entropy", {logits, target_dist},
                               std::move(backward));
}

/// Batch-mean KL(p_teacher || p_student) given the student's log-probabilities.
inline Tensor kl_div(const Tensor& log_p_student, const Tensor& p_teacher) {
    detail::require(log_p_student.rank() == 2 && p_teacher.rank() == 2,
                    "kl_div: inputs must be (N,C)");
    if (log_p_student.shape() != p_teacher.shape())
        throw DimensionError("kl_div: student " + shape_str(log_p_student.shape()) + " vs teacher " +
                             shape_str(p_teacher.shape()));
    if (p_teacher.requires_grad())
        throw UsageError("kl_div: teacher distribution must not require grad");
    const int N = log_p_student.dim(0), C = log_p_student.dim(1);
    const double* p = p_teacher.ptr();
    const double* ls = log_p_student.ptr();
    for (int n = 0; n < N; ++n) {
        double psum = 0.0, esum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double v = p[static_cast<std::int64_t>(n) * C + c];
            if (v < -1e-12)
                throw ValidationError("kl_div: teacher row " + std::to_string(n) + " has negative mass");
            psum += v;
            esum += std::exp(ls[static_cast<std::int64_t>(n) * C + c]);
        }
        if (std::abs(psum - 1.0) > 1e-6)
            throw ValidationError("kl_div: teacher row " + std::to_string(n) + " sums to " +
                                  std::to_string(psum));
        if (std::abs(esum - 1.0) > 1e-6)
            throw ValidationError("kl_div: student log-probabilities in row " + std::to_string(n) +
                                  " exponentiate to " + std::to_string(esum) + ", expected 1");
    }

    double loss = 0.0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * C; ++i) {
        const double pv = p[i];
        if (pv > 0.0) loss += pv * (std::log(pv) - ls[i]);
    }
    loss /= static_cast<double>(N);
    // The analytic value is >= 0; rounding can leave a tiny negative residue.
    if (loss < 0.0 && loss > -1e-12) loss = 0.0;

    auto backward = [N, C](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dls = node.parents[0]->ensure_grad().data();
        const double* pt = node.parents[1]->data.data();
        const double g = node.grad[0] / static_cast<double>(N);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * C; ++i) dls[i] -= g * pt[i];
    };
    return detail::make_result({1}, {loss}, "kl_div", {log_p_student, p_teacher},
                               std::move(backward));
}

/// Elementwise sum of two same-shape tensors.
inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    const double* ap = a.ptr();
    const double* bp = b.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] + bp[i];
    auto backward = [](detail::TensorNode& node) {
        for (int pi = 0; pi < 2; ++pi) {
            auto& parent = *node.parents[static_cast<std::size_t>(pi)];
            if (!parent.requires_grad) continue;
            double* dst = parent.ensure_grad().data();
            for (std::size_t i = 0; i < node.data.size(); ++i) dst[i] += node.grad[i];
        }
    };
    return detail::make_result(a.shape(), std::move(out), "add", {a, b}, std::move(backward));
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().size());
    const double* ap = a.ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] * factor;
    auto backward = [factor](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dst = node.parents[0]->ensure_grad().data();
        for (std::size_t i = 0; i < node.data.size(); ++i) dst[i] += node.grad[i] * factor;
    };
    return detail::make_result(a.shape(), std::move(out), "scale", {a}, std::move(backward));
}

/// Sum of squared entries, as a scalar tensor.
inline Tensor sum_squares(const Tensor& a) {
    double s = 0.0;
    const double* ap = a.ptr();
    for (std::size_t i = 0; i < a.data().size(); ++i) s += ap[i] * ap[i];
    auto backward = [](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        auto& parent = *node.parents[0];
        double* dst = parent.ensure_grad().data();
        const double g = node.grad[0];
        for (std::size_t i = 0; i < parent.data.size(); ++i) dst[i] += 2.0 * parent.data[i] * g;
    };
    return detail::make_result({1}, {s}, "sum_squares", {a}, std::move(backward));
}

/// Flatten NC11 (or any shape) to (N, rest) without copying semantics beyond
/// the data copy; gradient is reshaped back.
inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(new_shape));
    std::vector<double> out = a.data();
    auto backward = [](detail::TensorNode& node) {
        if (!node.parents[0]->requires_grad) return;
        double* dst = node.parents[0]->ensure_grad().data();
        for (std::size_t i = 0; i < node.data.size(); ++i) dst[i] += node.grad[i];
    };
    return detail::make_result(std::move(new_shape), std::move(out), "reshape", {a},
                               std::move(backward));
}

}  // namespace atmskd
