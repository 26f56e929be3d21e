#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "atmskd/ops.hpp"
#include "atmskd/rng.hpp"
#include "atmskd/tensor.hpp"

namespace atmskd {

/// One bottleneck residual block: 1x1 reduce to out/2, 3x3 at stride s,
/// 1x1 expand to out, with batchnorm throughout and spatial dropout before
/// the residual add.
struct BlockSpec {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    double dropout_rate = 0.0;

    bool needs_projection() const { return in_channels != out_channels || stride != 1; }

    void validate() const {
        if (out_channels % 2 != 0)
            throw ConfigError("block: out_channels must be even, got " + std::to_string(out_channels));
        if (in_channels < 1 || out_channels < 2)
            throw ConfigError("block: channel counts must be positive");
        if (stride != 1 && stride != 2)
            throw ConfigError("block: stride must be 1 or 2, got " + std::to_string(stride));
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("block: dropout_rate must lie in [0, 1)");
    }
};

/// Declarative architecture description. Channel counts are the base values;
/// effective widths come from scaled_channels().
struct ModelSpec {
    double width_multiplier = 1.0;
    int stem_channels_base = 32;
    std::array<int, 4> stage_channels_base{64, 128, 256, 512};
    std::array<int, 4> blocks_per_stage{2, 2, 2, 2};
    int num_classes = 2;
    int input_size = 224;
    double dropout_rate = 0.1;

    /// base * width rounded to the nearest multiple of 8, floor 8. Keeps the
    /// bottleneck mid-width (out/2) integral across multipliers.
    int scaled_channels(int base) const {
        const long rounded = std::lround(base * width_multiplier / 8.0) * 8;
        return static_cast<int>(std::max(8L, rounded));
    }

    bool operator==(const ModelSpec&) const = default;
};

namespace layers {

inline Tensor kaiming_conv_weight(int out_ch, int in_ch, int k, RngStream& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
    std::vector<double> data(static_cast<std::size_t>(out_ch) * in_ch * k * k);
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from_data({out_ch, in_ch, k, k}, std::move(data), true);
}

struct Conv2d {
    Tensor weight;
    std::optional<Tensor> bias;
    int stride = 1;
    int padding = 0;

    Conv2d(int in_ch, int out_ch, int k, int stride_, int padding_, bool with_bias, RngStream& rng)
        : weight(kaiming_conv_weight(out_ch, in_ch, k, rng)), stride(stride_), padding(padding_) {
        if (with_bias) bias = Tensor::zeros({out_ch}, true);
    }

    Tensor forward(const Tensor& x) const {
        return conv2d(x, weight, bias ? &*bias : nullptr, stride, padding);
    }
};

struct BatchNorm2d {
    Tensor gamma;
    Tensor beta;
    BatchNormState state;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNorm2d(int channels)
        : gamma(Tensor::full({channels}, 1.0, true)), beta(Tensor::zeros({channels}, true)),
          state(channels) {}

    Tensor forward(const Tensor& x, Mode mode) {
        return batchnorm2d(x, gamma, beta, state, mode, momentum, eps);
    }
};

struct Linear {
    Tensor weight;
    Tensor bias;

    Linear(int in_features, int out_features, RngStream& rng)
        : weight([&] {
              const double stddev = std::sqrt(2.0 / static_cast<double>(in_features));
              std::vector<double> data(static_cast<std::size_t>(in_features) * out_features);
              for (auto& v : data) v = rng.normal(0.0, stddev);
              return Tensor::from_data({in_features, out_features}, std::move(data), true);
          }()),
          bias(Tensor::zeros({out_features}, true)) {}

    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
};

}  // namespace layers

struct ResidualBlock {
    BlockSpec spec;
    layers::Conv2d reduce;      // 1x1, in -> out/2
    layers::BatchNorm2d bn1;
    layers::Conv2d spatial;     // 3x3 stride s, out/2 -> out/2
    layers::BatchNorm2d bn2;
    layers::Conv2d expand;      // 1x1, out/2 -> out
    layers::BatchNorm2d bn3;
    std::optional<layers::Conv2d> proj;
    std::optional<layers::BatchNorm2d> proj_bn;

    ResidualBlock(const BlockSpec& s, RngStream& rng)
        : spec((s.validate(), s)),
          reduce(s.in_channels, s.out_channels / 2, 1, 1, 0, false, rng),
          bn1(s.out_channels / 2),
          spatial(s.out_channels / 2, s.out_channels / 2, 3, s.stride, 1, false, rng),
          bn2(s.out_channels / 2),
          expand(s.out_channels / 2, s.out_channels, 1, 1, 0, false, rng),
          bn3(s.out_channels) {
        if (s.needs_projection()) {
            proj.emplace(s.in_channels, s.out_channels, 1, s.stride, 0, false, rng);
            proj_bn.emplace(s.out_channels);
        }
    }

    Tensor shortcut(const Tensor& x, Mode mode) {
        if (!proj) return x;
        return proj_bn->forward(proj->forward(x), mode);
    }

    Tensor forward(const Tensor& x, Mode mode, RngStream* rng) {
        Tensor h = relu(bn1.forward(reduce.forward(x), mode));
        h = relu(bn2.forward(spatial.forward(h), mode));
        h = bn3.forward(expand.forward(h), mode);
        h = dropout_spatial(h, spec.dropout_rate, mode, rng);
        return relu(add(h, shortcut(x, mode)));
    }
};

/// The instantiated network: stem, four residual stages, global average
/// pooling and a single linear classifier.
class Network {
  public:
    Network(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
        validate_input_size(spec_);
        RngStream rng = RngStream(init_seed).fork(0x6e6574);  // independent of training streams
        const int stem_ch = spec_.scaled_channels(spec_.stem_channels_base);
        stem_.emplace(3, stem_ch, 3, 2, 1, false, rng);
        stem_bn_.emplace(stem_ch);
        int in_ch = stem_ch;
        for (int s = 0; s < 4; ++s) {
            stages_.emplace_back();
            const int out_ch = spec_.scaled_channels(spec_.stage_channels_base[static_cast<std::size_t>(s)]);
            for (int b = 0; b < spec_.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
                BlockSpec bs{in_ch, out_ch, (b == 0 && s > 0) ? 2 : 1, spec_.dropout_rate};
                stages_.back().emplace_back(bs, rng);
                in_ch = out_ch;
            }
        }
        classifier_.emplace(in_ch, spec_.num_classes, rng);
    }

    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    const ModelSpec& spec() const { return spec_; }

    Tensor forward(const Tensor& x, Mode mode, RngStream* rng = nullptr) {
        detail::require(x.rank() == 4 && x.dim(1) == 3,
                        "network: input must be (N,3,H,W), got " + shape_str(x.shape()));
        Tensor h = relu(stem_bn_->forward(stem_->forward(x), mode));
        h = maxpool2d(h, 3, 2);
        for (auto& stage : stages_)
            for (auto& block : stage) h = block.forward(h, mode, rng);
        h = global_avg_pool(h);
        h = reshape(h, {h.dim(0), h.dim(1)});
        return classifier_->forward(h);
    }

    /// Deterministic traversal of every trainable parameter.
    void visit_parameters(const std::function<void(const std::string&, Tensor&)>& cb) {
        cb("stem.conv.weight", stem_->weight);
        cb("stem.bn.gamma", stem_bn_->gamma);
        cb("stem.bn.beta", stem_bn_->beta);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                const std::string prefix =
                    "stage" + std::to_string(s + 1) + ".block" + std::to_string(b) + ".";
                auto& blk = stages_[s][b];
                cb(prefix + "reduce.weight", blk.reduce.weight);
                cb(prefix + "bn1.gamma", blk.bn1.gamma);
                cb(prefix + "bn1.beta", blk.bn1.beta);
                cb(prefix + "spatial.weight", blk.spatial.weight);
                cb(prefix + "bn2.gamma", blk.bn2.gamma);
                cb(prefix + "bn2.beta", blk.bn2.beta);
                cb(prefix + "expand.weight", blk.expand.weight);
                cb(prefix + "bn3.gamma", blk.bn3.gamma);
                cb(prefix + "bn3.beta", blk.bn3.beta);
                if (blk.proj) {
                    cb(prefix + "proj.weight", blk.proj->weight);
                    cb(prefix + "proj_bn.gamma", blk.proj_bn->gamma);
                    cb(prefix + "proj_bn.beta", blk.proj_bn->beta);
                }
            }
        }
        cb("classifier.weight", classifier_->weight);
        cb("classifier.bias", classifier_->bias);
    }

    /// Batchnorm running statistics, in the same traversal order.
    void visit_bn_states(const std::function<void(const std::string&, BatchNormState&)>& cb) {
        cb("stem.bn", stem_bn_->state);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                const std::string prefix =
                    "stage" + std::to_string(s + 1) + ".block" + std::to_string(b) + ".";
                auto& blk = stages_[s][b];
                cb(prefix + "bn1", blk.bn1.state);
                cb(prefix + "bn2", blk.bn2.state);
                cb(prefix + "bn3", blk.bn3.state);
                if (blk.proj_bn) cb(prefix + "proj_bn", blk.proj_bn->state);
            }
        }
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        visit_parameters([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
        return out;
    }

    void set_frozen(bool frozen) {
        visit_parameters([&](const std::string&, Tensor& t) { t.set_requires_grad(!frozen); });
    }

    void zero_grad() {
        visit_parameters([](const std::string&, Tensor& t) { t.zero_grad(); });
    }

    /// Deep copy: fresh storage, same values and running statistics.
    Network clone() {
        Network other(spec_, 0);
        auto params = named_parameters();
        std::size_t i = 0;
        other.visit_parameters([&](const std::string& name, Tensor& t) {
            if (params[i].first != name) throw UsageError("clone: traversal order diverged");
            t.data() = params[i].second.data();
            t.set_requires_grad(params[i].second.requires_grad());
            ++i;
        });
        std::vector<BatchNormState*> states;
        visit_bn_states([&](const std::string&, BatchNormState& st) { states.push_back(&st); });
        std::size_t j = 0;
        other.visit_bn_states([&](const std::string&, BatchNormState& st) { st = *states[j++]; });
        return other;
    }

    ResidualBlock& block(int stage, int index) {
        return stages_.at(static_cast<std::size_t>(stage - 1)).at(static_cast<std::size_t>(index));
    }

    layers::Linear& classifier() { return *classifier_; }

    static void validate_input_size(const ModelSpec& spec) {
        int h = spec.input_size;
        if (h < 1) throw ConfigError("network: input_size must be positive");
        h = (h + 2 - 3) / 2 + 1;  // stem conv, k3 s2 p1
        if (h < 3)
            throw ConfigError("network: input_size " + std::to_string(spec.input_size) +
                              " too small to survive 5 downsamplings");
        h = (h - 3) / 2 + 1;  // maxpool k3 s2
        for (int s = 1; s < 4; ++s) h = (h + 2 - 3) / 2 + 1;
        if (h < 1)
            throw ConfigError("network: input_size " + std::to_string(spec.input_size) +
                              " too small to survive 5 downsamplings");
    }

  private:
    ModelSpec spec_;
    // optionals defer construction until the ctor body has validated the spec.
    std::optional<layers::Conv2d> stem_;
    std::optional<layers::BatchNorm2d> stem_bn_;
    std::vector<std::vector<ResidualBlock>> stages_;
    std::optional<layers::Linear> classifier_;
};

inline std::int64_t count_parameters(Network& net) {
    std::int64_t n = 0;
    net.visit_parameters([&](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
}

inline ModelSpec student_spec(double width, int num_classes, int input_size) {
    ModelSpec spec;
    spec.width_multiplier = width;
    spec.num_classes = num_classes;
    spec.input_size = input_size;
    return spec;
}

/// Student family: width multipliers 0.75 / 1.0 / 1.25 in the paper's
/// configurations; other widths are allowed for tests and teachers.
inline Network build_student(double width, int num_classes, int input_size,
                             std::uint64_t init_seed) {
    if (width <= 0.0) throw ConfigError("build_student: width must be positive");
    return Network(student_spec(width, num_classes, input_size), init_seed);
}

/// Teacher: the same residual family at width 2.0 with three blocks per
/// stage; strictly more parameters than the enhanced (1.25x) student.
inline Network build_teacher(int num_classes, int input_size, std::uint64_t init_seed) {
    ModelSpec spec = student_spec(2.0, num_classes, input_size);
    spec.blocks_per_stage = {3, 3, 3, 3};
    return Network(spec, init_seed);
}

}  // namespace atmskd
