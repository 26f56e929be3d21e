#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "atmskd/checkpoint.hpp"
#include "atmskd/gradcheck.hpp"
#include "atmskd/net.hpp"
#include "testutil.hpp"

using namespace atmskd;
using testutil::random_tensor;

namespace {

// Layer-by-layer analytic count of the bottleneck family, independent of the
// library's traversal.
std::int64_t param_count_oracle(const ModelSpec& spec) {
    auto ch = [&](int base) { return spec.scaled_channels(base); };
    std::int64_t total = 0;
    const int stem = ch(spec.stem_channels_base);
    total += 3LL * 3 * 3 * stem + 2 * stem;  // stem conv + bn
    int in = stem;
    for (int s = 0; s < 4; ++s) {
        const int out = ch(spec.stage_channels_base[static_cast<std::size_t>(s)]);
        for (int b = 0; b < spec.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
            const int mid = out / 2;
            total += static_cast<std::int64_t>(in) * mid + 2 * mid;        // reduce + bn1
            total += 9LL * mid * mid + 2 * mid;                            // spatial + bn2
            total += static_cast<std::int64_t>(mid) * out + 2 * out;       // expand + bn3
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            if (in != out || stride != 1) total += static_cast<std::int64_t>(in) * out + 2 * out;
            in = out;
        }
    }
    total += static_cast<std::int64_t>(in) * spec.num_classes + spec.num_classes;
    return total;
}

Tensor fixed_batch(int n, int size, std::uint64_t seed) {
    RngStream rng(seed);
    return random_tensor({n, 3, size, size}, rng, -1.0, 1.0);
}

void warm_bn(Network& net, int size, std::uint64_t seed) {
    RngStream rng(seed);
    Tensor x = fixed_batch(2, size, seed);
    net.forward(x, Mode::train, &rng);
}

}  // namespace

TEST(ResidualBlock, IdentityShortcutPreservesShape) {
    RngStream rng(1);
    ResidualBlock block(BlockSpec{64, 64, 1, 0.0}, rng);
    EXPECT_FALSE(block.spec.needs_projection());
    Tensor x = random_tensor({2, 64, 8, 8}, rng);
    Tensor y = block.forward(x, Mode::train, nullptr);
    EXPECT_EQ(y.shape(), x.shape());
}

TEST(ResidualBlock, ProjectionShortcutHalvesSpatialDims) {
    RngStream rng(2);
    ResidualBlock block(BlockSpec{64, 128, 2, 0.0}, rng);
    EXPECT_TRUE(block.spec.needs_projection());
    Tensor x = random_tensor({2, 64, 8, 8}, rng);
    Tensor y = block.forward(x, Mode::train, nullptr);
    EXPECT_EQ(y.shape(), (Shape{2, 128, 4, 4}));
}

TEST(ResidualBlock, ZeroedFinalGammaReducesToShortcut) {
    RngStream rng(3);
    for (BlockSpec spec : {BlockSpec{32, 32, 1, 0.0}, BlockSpec{32, 64, 2, 0.0}}) {
        ResidualBlock block(spec, rng);
        Tensor x = random_tensor({2, 32, 6, 6}, rng);
        // With gamma3 = 0 and beta3 = 0 the main path vanishes and the block
        // must act as ReLU(shortcut(x)).
        std::fill(block.bn3.gamma.data().begin(), block.bn3.gamma.data().end(), 0.0);
        Tensor y = block.forward(x, Mode::train, nullptr);
        Tensor expected = relu(block.shortcut(x, Mode::train));
        ASSERT_EQ(y.shape(), expected.shape());
        for (std::size_t i = 0; i < y.data().size(); ++i)
            EXPECT_NEAR(y.data()[i], expected.data()[i], 1e-12);
    }
}

TEST(ResidualBlock, OutputShapeFormulaHoldsOnGrid) {
    RngStream rng(4);
    for (int in_ch : {8, 16})
        for (int out_ch : {8, 16, 32})
            for (int stride : {1, 2}) {
                ResidualBlock block(BlockSpec{in_ch, out_ch, stride, 0.0}, rng);
                Tensor x = random_tensor({1, in_ch, 9, 9}, rng);
                Tensor y = block.forward(x, Mode::train, nullptr);
                const int expect_hw = stride == 1 ? 9 : (9 + 2 - 3) / 2 + 1;
                EXPECT_EQ(y.shape(), (Shape{1, out_ch, expect_hw, expect_hw}));
            }
}

TEST(ResidualBlock, OddOutChannelsRejected) {
    RngStream rng(5);
    EXPECT_THROW(ResidualBlock(BlockSpec{8, 9, 1, 0.0}, rng), ConfigError);
}

TEST(ModelZoo, StandardWidthParameterCountNearPaperValue) {
    Network net = build_student(1.0, 2, 224, 7);
    const std::int64_t count = count_parameters(net);
    EXPECT_EQ(count, param_count_oracle(net.spec()));
    EXPECT_GE(count, 2'000'000);
    EXPECT_LE(count, 2'800'000);
}

TEST(ModelZoo, WidthScalingIsRoughlyQuadratic) {
    Network compact = build_student(0.75, 2, 224, 7);
    Network standard = build_student(1.0, 2, 224, 7);
    Network enhanced = build_student(1.25, 2, 224, 7);
    const double c = static_cast<double>(count_parameters(compact));
    const double s = static_cast<double>(count_parameters(standard));
    const double e = static_cast<double>(count_parameters(enhanced));
    EXPECT_NEAR(c / s, 0.5625, 0.08);
    EXPECT_NEAR(e / s, 1.5625, 0.15625);  // +-10% of the quadratic ratio
}

TEST(ModelZoo, ForwardShapeContract) {
    for (double width : {0.75, 1.0}) {
        Network net = build_student(width, 2, 64, 11);
        RngStream rng(11);
        Tensor x = fixed_batch(3, 64, 13);
        Tensor logits = net.forward(x, Mode::train, &rng);
        EXPECT_EQ(logits.shape(), (Shape{3, 2}));
    }
}

TEST(ModelZoo, TeacherIsStrictlyLargerThanEnhancedStudent) {
    Network teacher = build_teacher(2, 64, 3);
    Network enhanced = build_student(1.25, 2, 64, 3);
    EXPECT_GT(count_parameters(teacher), count_parameters(enhanced));
    Tensor x = fixed_batch(4, 64, 17);
    RngStream rng(17);
    Tensor logits = teacher.forward(x, Mode::train, &rng);
    EXPECT_EQ(logits.shape(), (Shape{4, 2}));
}

TEST(ModelZoo, TooSmallInputRejected) {
    EXPECT_THROW(build_student(1.0, 2, 4, 1), ConfigError);
}

TEST(ModelZoo, EvalForwardIsPure) {
    Network net = build_student(0.75, 2, 32, 19);
    warm_bn(net, 32, 19);
    Tensor x = fixed_batch(2, 32, 23);
    Tensor a = net.forward(x, Mode::eval);
    Tensor b = net.forward(x, Mode::eval);
    EXPECT_EQ(a.data(), b.data());
}

TEST(ModelZoo, CountParametersSmallExamples) {
    RngStream rng(29);
    layers::Linear lin(10, 5, rng);
    EXPECT_EQ(lin.weight.numel() + lin.bias.numel(), 55);
    layers::Conv2d conv(3, 8, 3, 1, 1, true, rng);
    EXPECT_EQ(conv.weight.numel() + conv.bias->numel(), 224);
}

TEST(Checkpoint, RoundTripIsExactAfterFirstQuantization) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "atmskd_ckpt_test";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.atms").string();
    const std::string p2 = (dir / "b.atms").string();

    Network net = build_student(0.75, 2, 32, 31);
    warm_bn(net, 32, 31);
    CheckpointMeta meta{12, 96.5, 42};
    save_checkpoint(net, meta, p1);

    LoadedCheckpoint first = load_checkpoint(p1);
    EXPECT_EQ(first.meta.epoch, 12);
    EXPECT_DOUBLE_EQ(first.meta.best_val_accuracy, 96.5);
    EXPECT_EQ(first.meta.seed, 42u);
    EXPECT_EQ(first.net.spec(), net.spec());

    save_checkpoint(first.net, first.meta, p2);
    LoadedCheckpoint second = load_checkpoint(p2);

    // The format stores f32: the first save rounds, after which values are
    // exactly representable and every further round-trip is bit-identical.
    auto pa = first.net.named_parameters();
    auto pb = second.net.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.data(), pb[i].second.data());

    Tensor x = fixed_batch(2, 32, 37);
    Tensor ya = first.net.forward(x, Mode::eval);
    Tensor yb = second.net.forward(x, Mode::eval);
    EXPECT_EQ(ya.data(), yb.data());

    // Identical bytes on re-save.
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    fs::remove_all(dir);
}

TEST(Checkpoint, DistinctErrorCodes) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "atmskd_ckpt_err";
    fs::create_directories(dir);

    {
        std::ofstream os(dir / "bad_magic.atms", std::ios::binary);
        os << "NOPE extra bytes";
    }
    try {
        load_checkpoint((dir / "bad_magic.atms").string());
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.code(), CheckpointError::Code::bad_magic);
    }

    Network net = build_student(0.75, 2, 32, 41);
    warm_bn(net, 32, 41);
    const std::string good = (dir / "good.atms").string();
    save_checkpoint(net, CheckpointMeta{}, good);

    {
        std::ifstream is(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        bytes[4] = 9;  // bump the version field
        std::ofstream os(dir / "bad_version.atms", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
        load_checkpoint((dir / "bad_version.atms").string());
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.code(), CheckpointError::Code::version_mismatch);
    }

    {
        std::ifstream is(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() / 2);
        std::ofstream os(dir / "truncated.atms", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
        load_checkpoint((dir / "truncated.atms").string());
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_EQ(e.code(), CheckpointError::Code::truncated);
    }
    fs::remove_all(dir);
}

TEST(GradCheck, FullResidualBlockComposition) {
    RngStream rng(43);
    ResidualBlock block(BlockSpec{8, 16, 2, 0.0}, rng);
    Tensor x = random_tensor({2, 8, 6, 6}, rng);
    Tensor target = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
    layers::Linear head(16, 2, rng);

    // Swap the probe tensor in for the block's weight so gradients land on it.
    auto loss_through_block = [&](const Tensor& w) {
        Tensor saved = block.spatial.weight;
        block.spatial.weight = w;
        Tensor h = block.forward(x, Mode::train, nullptr);
        Tensor flat = reshape(global_avg_pool(h), {2, 16});
        Tensor out = cross_entropy(head.forward(flat), target);
        block.spatial.weight = saved;
        return out;
    };
    // Gradients flow through reduce/spatial/expand/proj and all batchnorms.
    const double err = finite_diff_check(loss_through_block, block.spatial.weight.detach(), 1e-5, 60, 5);
    EXPECT_LT(err, 1e-4);
}
