#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "delta/attention.hpp"
#include "delta/binary_io.hpp"
#include "delta/errors.hpp"
#include "oracles.hpp"

namespace delta {
namespace {

namespace fs = std::filesystem;
using oracle::random_tensor;

ModelSpec toy_spec(std::size_t filters, std::size_t k = 3) {
    ModelSpec spec;
    spec.in_channels = 1;
    spec.in_height = 5;
    spec.in_width = 5;
    spec.layers = {LayerSpec::conv(filters, 3, 1, 0, true), LayerSpec::relu(), LayerSpec::global_avg_pool(),
                   LayerSpec::linear(k)};
    return spec;
}

// Small reference-style model and a target task it was not trained for.
struct TransferCase {
    Dataset target;
    AugmentSpec view;
    ConvNetModel transferred;
};

TransferCase make_case(std::size_t per_class = 4) {
    auto [source, target] = make_synthetic_transfer_pair({.seed = 21, .source_classes = 4, .target_classes = 3,
                                                          .per_class = per_class, .size = 12});
    TransferCase s{target, AugmentSpec{.crop = 10, .mirror = false, .mean = target.channel_mean()}, {}};
    s.transferred = replace_head(build_model(reference_model_spec(3, 10, 4), 5), 3, 6);
    return s;
}

// Zeroes filter j of conv layer `layer` in a fresh copy and runs a plain forward.
double rebuilt_ablation_loss(const ConvNetModel& model, const Image& view, Label label, std::size_t layer,
                             std::size_t j) {
    ConvNetModel copy = model.clone();
    auto& w = copy.param(param_name(layer, "weight"));
    const std::size_t per = w.numel() / w.dim(0);
    for (std::size_t k = 0; k < per; ++k) w.data()[j * per + k] = 0.0;
    copy.param(param_name(layer, "bias")).data()[j] = 0.0;
    NoGradGuard no_grad;
    const Label y[1] = {label};
    return per_sample_cross_entropy(copy.forward(stack_images(std::span<const Image>(&view, 1))), y)[0];
}

double clean_loss(const ConvNetModel& model, const Image& view, Label label) {
    NoGradGuard no_grad;
    const Label y[1] = {label};
    return per_sample_cross_entropy(model.forward(stack_images(std::span<const Image>(&view, 1))), y)[0];
}

TEST(AttentionFromGaps, ClosedForms) {
    const std::vector<double> equal(7, 0.3);
    for (double w : attention_from_gaps(equal)) EXPECT_NEAR(w, 1.0 / 7.0, 1e-12);
    const std::vector<double> two{std::log(3.0), 0.0};
    const auto w = attention_from_gaps(two);
    EXPECT_NEAR(w[0], 0.75, 1e-12);
    EXPECT_NEAR(w[1], 0.25, 1e-12);
}

TEST(AttentionFromGaps, ShiftInvarianceAndMonotonicity) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> g(9), shifted(9);
        const double c = u(rng) * 10.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = u(rng);
            shifted[i] = g[i] + c;
        }
        const auto a = attention_from_gaps(g), b = attention_from_gaps(shifted);
        double total = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            EXPECT_NEAR(a[i], b[i], 1e-12);
            EXPECT_GE(a[i], 0.0);
            total += a[i];
            for (std::size_t j = 0; j < g.size(); ++j)
                if (g[i] > g[j]) EXPECT_GT(a[i], a[j]);
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(TrainFeHead, ZeroEpochsIsIdentity) {
    auto s = make_case();
    const auto out = train_fe_head(s.transferred, s.target, {.epochs = 0, .view = s.view});
    EXPECT_EQ(out.fingerprint(), s.transferred.fingerprint());
}

TEST(TrainFeHead, FreezesEverythingButTheHead) {
    auto s = make_case();
    const auto out = train_fe_head(s.transferred, s.target, {.epochs = 5, .lr = 0.1, .batch_size = 4, .seed = 2,
                                                             .view = s.view});
    for (const auto& src : out.source()) EXPECT_EQ(out.param(src.name).values(), src.value.values()) << src.name;
    bool head_moved = false;
    for (const auto& name : out.head_names())
        head_moved |= out.param(name).values() != s.transferred.param(name).values();
    EXPECT_TRUE(head_moved);
    // The input model is untouched.
    for (const auto& src : s.transferred.source())
        EXPECT_EQ(s.transferred.param(src.name).values(), src.value.values());
}

TEST(TrainFeHead, LossDecreasesOnSeparableTask) {
    // Two classes that differ only in the sign of a constant image: separable by GAP features.
    std::vector<Sample> samples;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 0.2);
    for (std::uint64_t i = 0; i < 20; ++i) {
        Image im{1, 5, 5, std::vector<double>(25)};
        const double level = i % 2 ? 1.0 : -1.0;
        for (auto& v : im.pixels) v = level + u(rng);
        samples.push_back({im, static_cast<Label>(i % 2), i});
    }
    const Dataset data(samples, 2, Split::Train);
    const auto model = replace_head(build_model(toy_spec(4), 3), 2, 4);
    std::vector<double> losses;
    train_fe_head(model, data, {.epochs = 10, .lr = 0.05, .seed = 1}, &losses);
    ASSERT_EQ(losses.size(), 10u);
    for (std::size_t e = 1; e < losses.size(); ++e) EXPECT_LT(losses[e], losses[e - 1]) << "epoch " << e;
}

TEST(AblateFilterLoss, CachedPathMatchesRebuiltModelBitwise) {
    auto s = make_case(7);  // 21 samples
    const auto fe = train_fe_head(s.transferred, s.target, {.epochs = 3, .lr = 0.1, .view = s.view});
    const auto views = eval_views(s.target, s.view);
    for (std::size_t i = 0; i < 20; ++i) {
        for (auto tap : fe.tap_layers()) {
            for (std::size_t j : {std::size_t{0}, std::size_t{5}, std::size_t{15}}) {
                EXPECT_EQ(ablate_filter_loss(fe, views[i], s.target[i].label, tap, j),
                          rebuilt_ablation_loss(fe, views[i], s.target[i].label, tap, j))
                    << "sample " << i << " tap " << tap << " filter " << j;
            }
        }
    }
    // Batched evaluation gives the same per-sample values.
    std::vector<Label> labels;
    for (std::size_t i = 0; i < 20; ++i) labels.push_back(s.target[i].label);
    const auto batch = ablate_filter_loss(fe, stack_images(std::span<const Image>(views).first(20)), labels, 6, 3);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(batch[i], rebuilt_ablation_loss(fe, views[i], labels[i], 6, 3));
}

TEST(AblateFilterLoss, DeadFilterIsNoOp) {
    auto model = replace_head(build_model(toy_spec(3), 7), 3, 8);
    // Filter 1 can never fire on non-negative input.
    auto& w = model.param("layer0.weight");
    for (std::size_t k = 9; k < 18; ++k) w.data()[k] = -std::abs(w.data()[k]);
    model.param("layer0.bias").data()[1] = -0.5;
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({1, 1, 5, 5}, rng, 0.0, 1.0);
    const Image view{1, 5, 5, x.values()};
    EXPECT_EQ(ablate_filter_loss(model, view, 2, 0, 1), clean_loss(model, view, 2));
    EXPECT_NE(ablate_filter_loss(model, view, 2, 0, 0), clean_loss(model, view, 2));
}

TEST(AblateFilterLoss, RemovingTheOnlyFilterLeavesHeadBias) {
    auto model = replace_head(build_model(toy_spec(1), 9), 3, 10);
    model.param("layer3.bias").values() = {0.2, -0.1, 0.4};
    std::mt19937_64 rng(2);
    const Image view{1, 5, 5, random_tensor({1, 1, 5, 5}, rng).values()};
    const Tensor bias_logits = Tensor::from_data({1, 3}, {0.2, -0.1, 0.4});
    const Label y[1] = {1};
    EXPECT_EQ(ablate_filter_loss(model, view, 1, 0, 0), per_sample_cross_entropy(bias_logits, y)[0]);
}

TEST(AblateFilterLoss, OutOfRangeFilter) {
    auto model = replace_head(build_model(toy_spec(2), 1), 3, 2);
    const Image view{1, 5, 5, std::vector<double>(25, 0.5)};
    EXPECT_THROW(ablate_filter_loss(model, view, 0, 0, 2), IndexError);
    EXPECT_THROW(ablate_filter_loss(model, view, 0, 1, 0), ConfigError);
}

TEST(AttentionWeights, TwoFilterToyMatchesRebuildOracle) {
    auto model = replace_head(build_model(toy_spec(2, 2), 11), 2, 12);
    model.param("layer0.weight").values() = {0.5, -0.2, 0.1, 0.3, 0.8, -0.4, 0.0, 0.2, 0.6,
                                             -0.3, 0.7, 0.2, 0.1, -0.5, 0.9, 0.4, 0.0, -0.1};
    model.param("layer0.bias").values() = {0.05, 0.1};
    model.param("layer3.weight").values() = {1.5, -0.7, -1.2, 0.9};
    model.param("layer3.bias").values() = {0.1, -0.1};
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const Image view{1, 5, 5, random_tensor({1, 1, 5, 5}, rng, 0.0, 1.0).values()};
        const Label y = trial % 2;
        const double base = clean_loss(model, view, y);
        const double g0 = rebuilt_ablation_loss(model, view, y, 0, 0) - base;
        const double g1 = rebuilt_ablation_loss(model, view, y, 0, 1) - base;
        // two-way softmax written out
        const double w0 = 1.0 / (1.0 + std::exp(g1 - g0));
        const auto w = attention_weights(model, view, y, 0);
        ASSERT_EQ(w.size(), 2u);
        EXPECT_NEAR(w[0], w0, 1e-12);
        EXPECT_NEAR(w[1], 1.0 - w0, 1e-12);
        if (g0 > g1) EXPECT_GT(w[0], w[1]);
    }
}

class TableTest : public ::testing::Test {
protected:
    void SetUp() override {
        s = make_case(4);  // 12 samples
        fe = train_fe_head(s.transferred, s.target, {.epochs = 3, .lr = 0.1, .view = s.view});
        dir = fs::temp_directory_path() / "delta_attention_test";
        fs::remove_all(dir);
    }
    TransferCase s;
    ConvNetModel fe;
    fs::path dir;
};

TEST_F(TableTest, RowsAreSoftmaxAndMatchSingleCalls) {
    const auto taps = fe.tap_layers();
    const auto table = build_attention_table(fe, s.target, taps, {.view = s.view, .chunk = 5});
    ASSERT_EQ(table.rows(), s.target.size());
    const auto views = eval_views(s.target, s.view);
    for (std::size_t i = 0; i < 10; ++i) {
        for (auto tap : taps) {
            const auto row = table.row(s.target[i].id, tap);
            double total = 0.0;
            for (double w : row) {
                EXPECT_GE(w, 0.0);
                total += w;
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
            const auto single = attention_weights(fe, views[i], s.target[i].label, tap);
            EXPECT_EQ(std::vector<double>(row.begin(), row.end()), single) << "sample " << i << " tap " << tap;
        }
    }
}

TEST_F(TableTest, DeterministicAndIndependentOfThreadsAndChunks) {
    const auto taps = fe.tap_layers();
    const auto before = fe.fingerprint();
    const auto a = build_attention_table(fe, s.target, taps, {.view = s.view});
    const auto b = build_attention_table(fe, s.target, taps, {.view = s.view, .chunk = 1, .threads = 3});
    EXPECT_EQ(serialize_attention(a), serialize_attention(b));
    EXPECT_EQ(fe.fingerprint(), before);
    EXPECT_EQ(a.metadata().dataset_hash, s.target.hash());
    EXPECT_EQ(a.metadata().fe_head_hash, before);
}

TEST_F(TableTest, CacheIsReusedWhenKeysMatchAndRebuiltOtherwise) {
    const auto taps = fe.tap_layers();
    const AttentionOptions opts{.view = s.view, .cache = dir / "att.datt"};
    const auto fresh = build_attention_table(fe, s.target, taps, opts);
    ASSERT_TRUE(fs::exists(*opts.cache));
    EXPECT_EQ(load_attention(*opts.cache), fresh);

    // A cache with matching keys is trusted as-is.
    auto w = fresh.weights();
    w[0] = 0.123;
    save_attention(AttentionTable(fresh.metadata(), fresh.taps(), fresh.filters(), fresh.sample_ids(), w), *opts.cache);
    EXPECT_EQ(build_attention_table(fe, s.target, taps, opts).weights()[0], 0.123);

    // Stale checkpoint hash: recomputed and rewritten.
    auto meta = fresh.metadata();
    meta.fe_head_hash ^= 1;
    save_attention(AttentionTable(meta, fresh.taps(), fresh.filters(), fresh.sample_ids(), w), *opts.cache);
    EXPECT_EQ(build_attention_table(fe, s.target, taps, opts), fresh);
    EXPECT_EQ(load_attention(*opts.cache), fresh);

    // Garbage on disk is also just a miss.
    write_file_bytes(*opts.cache, std::vector<std::uint8_t>{1, 2, 3});
    EXPECT_EQ(build_attention_table(fe, s.target, taps, opts), fresh);
}

TEST_F(TableTest, CacheRoundTripAndMalformedBytes) {
    const auto table = build_attention_table(fe, s.target, fe.tap_layers(), {.view = s.view});
    const auto bytes = serialize_attention(table);
    EXPECT_EQ(serialize_attention(parse_attention(bytes)), bytes);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(parse_attention(truncated), ParseError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        parse_attention(bad_magic);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    EXPECT_THROW(table.row(999, 6), IndexError);
    EXPECT_THROW(table.row(s.target[0].id, 0), IndexError);
}

TEST_F(TableTest, InvalidTapIsConfigError) {
    EXPECT_THROW(build_attention_table(fe, s.target, {1}, {.view = s.view}), ConfigError);
    EXPECT_THROW(build_attention_table(fe, s.target, {}, {.view = s.view}), ConfigError);
}

}  // namespace
}  // namespace delta
