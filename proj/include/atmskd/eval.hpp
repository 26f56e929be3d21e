#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

#include "atmskd/data.hpp"
#include "atmskd/net.hpp"

namespace atmskd {

/// Worker cap from ATMSKD_THREADS; defaults to 1 so runs are reproducible
/// without any environment setup. Evaluation splits by sample, so results
/// are bit-identical for any worker count.
inline int worker_threads() {
    if (const char* env = std::getenv("ATMSKD_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return std::min(n, 16);
    }
    return 1;
}

/// Eval-mode logits for a whole dataset, (N, num_classes), no graph recorded.
inline Tensor dataset_logits(Network& net, const Dataset& ds, int batch_size = 64) {
    const int n = static_cast<int>(ds.samples.size());
    const int C = ds.num_classes();
    std::vector<double> logits(static_cast<std::size_t>(n) * C);

    auto run_range = [&](int lo, int hi) {
        NoGradGuard guard;
        for (int start = lo; start < hi; start += batch_size) {
            const int count = std::min(batch_size, hi - start);
            const Shape img_shape = ds.samples[0].image.shape();
            const std::int64_t stride = shape_numel(img_shape);
            std::vector<double> data(static_cast<std::size_t>(count * stride));
            for (int i = 0; i < count; ++i) {
                const auto& img = ds.samples[static_cast<std::size_t>(start + i)].image;
                std::copy(img.data().begin(), img.data().end(),
                          data.begin() + static_cast<std::ptrdiff_t>(i * stride));
            }
            Tensor x = Tensor::from_data({count, img_shape[0], img_shape[1], img_shape[2]},
                                         std::move(data));
            Tensor out = net.forward(x, Mode::eval);
            std::copy(out.data().begin(), out.data().end(),
                      logits.begin() + static_cast<std::ptrdiff_t>(static_cast<std::int64_t>(start) * C));
        }
    };

    const int workers = std::min(worker_threads(), std::max(1, n));
    if (workers == 1) {
        run_range(0, n);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const int lo = w * chunk;
            const int hi = std::min(n, lo + chunk);
            if (lo < hi) pool.emplace_back(run_range, lo, hi);
        }
        for (auto& t : pool) t.join();
    }
    return Tensor::from_data({n, C}, std::move(logits));
}

/// Argmax with first-maximum tie-break.
inline int argmax_row(const double* row, int C) {
    int best = 0;
    for (int c = 1; c < C; ++c)
        if (row[c] > row[best]) best = c;
    return best;
}

inline double accuracy_percent_from_logits(const Tensor& logits, const Dataset& ds) {
    const int n = logits.dim(0), C = logits.dim(1);
    std::int64_t correct = 0;
    for (int i = 0; i < n; ++i)
        if (argmax_row(logits.ptr() + static_cast<std::int64_t>(i) * C, C) ==
            ds.samples[static_cast<std::size_t>(i)].label)
            ++correct;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

inline double evaluate_accuracy(Network& net, const Dataset& ds, int batch_size = 64) {
    if (ds.samples.empty()) throw ValidationError("evaluate_accuracy: dataset is empty");
    return accuracy_percent_from_logits(dataset_logits(net, ds, batch_size), ds);
}

}  // namespace atmskd
