#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "delta/errors.hpp"
#include "delta/grad_check.hpp"
#include "delta/regularizers.hpp"
#include "oracles.hpp"

namespace delta {
namespace {

using oracle::random_tensor;

// conv(filters, 3x3, tapped) -> relu -> gap -> linear(k) on C x size x size.
ModelSpec one_conv_spec(std::size_t channels, std::size_t size, std::size_t filters, std::size_t k) {
    ModelSpec spec;
    spec.in_channels = channels;
    spec.in_height = size;
    spec.in_width = size;
    spec.layers = {LayerSpec::conv(filters, 3, 1, 0, true), LayerSpec::relu(), LayerSpec::global_avg_pool(),
                   LayerSpec::linear(k)};
    return spec;
}

ModelSpec two_conv_spec() {
    ModelSpec spec;
    spec.in_channels = 2;
    spec.in_height = 6;
    spec.in_width = 6;
    spec.layers = {LayerSpec::conv(3, 3, 1, 1, true), LayerSpec::relu(), LayerSpec::conv(4, 3, 1, 0, true),
                   LayerSpec::relu(), LayerSpec::global_avg_pool(), LayerSpec::linear(3)};
    return spec;
}

ConvNetModel transferred(const ModelSpec& spec, std::size_t k, std::uint64_t seed) {
    return replace_head(build_model(spec, seed), k, seed + 1);
}

void perturb(ConvNetModel& model, double scale, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : model.parameters())
        for (auto& v : p.value.data()) v += n(rng);
}

void zero_head(ConvNetModel& model) {
    for (auto& p : model.parameters())
        if (model.is_head(p.name))
            for (auto& v : p.value.data()) v = 0.0;
}

std::vector<std::uint64_t> iota_ids(std::size_t n, std::uint64_t first = 0) {
    std::vector<std::uint64_t> ids(n);
    std::iota(ids.begin(), ids.end(), first);
    return ids;
}

// Random softmax rows for every tap of `model`.
AttentionTable random_table(const ConvNetModel& model, const std::vector<std::uint64_t>& ids, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    std::vector<std::size_t> taps = model.tap_layers(), filters;
    for (auto t : taps) filters.push_back(model.spec().layers[t].out_channels);
    std::vector<double> w;
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (auto n : filters) {
            std::vector<double> logits(n);
            for (auto& v : logits) v = u(rng);
            auto row = softmax(logits);
            w.insert(w.end(), row.begin(), row.end());
        }
    return AttentionTable({}, taps, filters, ids, w);
}

double flat_sum_half_squares(const ConvNetModel& model, bool head_only) {
    double acc = 0.0;
    for (const auto& p : model.parameters()) {
        if (head_only && !model.is_head(p.name)) continue;
        for (double v : p.value.data()) acc += v * v;
    }
    return 0.5 * acc;
}

TEST(L2Penalty, ZeroParametersGiveZero) {
    auto model = build_model(one_conv_spec(1, 4, 2, 2), 1);
    for (auto& p : model.parameters())
        for (auto& v : p.value.data()) v = 0.0;
    EXPECT_EQ(l2_penalty(model).item(), 0.0);
}

TEST(L2Penalty, SingleVector) {
    ModelSpec spec;
    spec.in_channels = 1;
    spec.in_height = 1;
    spec.in_width = 1;
    spec.layers = {LayerSpec::linear(2)};
    auto model = build_model(spec, 1);
    model.param("layer0.weight").values() = {3.0, 4.0};
    model.param("layer0.bias").values() = {0.0, 0.0};
    EXPECT_EQ(l2_penalty(model).item(), 12.5);
}

TEST(L2Penalty, MatchesFlatSum) {
    auto model = build_model(two_conv_spec(), 5);
    EXPECT_NEAR(l2_penalty(model).item(), flat_sum_half_squares(model, false), 1e-12);
}

TEST(L2SpPenalty, ZeroAtStartingPointWithZeroHead) {
    auto model = transferred(two_conv_spec(), 3, 2);
    zero_head(model);
    EXPECT_EQ(l2_sp_penalty(model).item(), 0.0);
    EXPECT_EQ(l2_sp_shared_penalty(model).item(), 0.0);
}

TEST(L2SpPenalty, HeadOnesGiveOne) {
    auto model = transferred(one_conv_spec(1, 4, 1, 2), 2, 3);
    model.param("layer3.weight").values() = {1.0, 1.0};
    model.param("layer3.bias").values() = {0.0, 0.0};
    EXPECT_EQ(l2_sp_penalty(model).item(), 1.0);
}

TEST(L2SpPenalty, RandomPerturbationIsHalfSquaredDelta) {
    auto model = transferred(two_conv_spec(), 3, 4);
    zero_head(model);
    std::vector<std::vector<double>> before;
    for (const auto& p : model.parameters()) before.push_back(p.value.values());
    perturb(model, 0.05, 9);
    double expected = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& now = model.parameters()[i].value.values();
        for (std::size_t k = 0; k < now.size(); ++k) {
            // head starts at zero, so its delta is its value
            const double d = now[k] - before[i][k];
            expected += d * d;
        }
    }
    EXPECT_NEAR(l2_sp_penalty(model).item(), 0.5 * expected, 1e-12);
}

TEST(L2SpPenalty, NeedsSnapshot) {
    auto model = build_model(two_conv_spec(), 1);
    EXPECT_THROW(l2_sp_penalty(model), ContractError);
}

TEST(PrivatePenalty, Cases) {
    auto model = transferred(one_conv_spec(1, 4, 1, 2), 2, 3);
    zero_head(model);
    EXPECT_EQ(private_penalty(model).item(), 0.0);
    model.param("layer3.weight").values() = {2.0, 0.0};
    EXPECT_EQ(private_penalty(model).item(), 2.0);
    perturb(model, 0.3, 11);
    EXPECT_NEAR(private_penalty(model).item(), flat_sum_half_squares(model, true), 1e-12);
}

TEST(BehavioralPenalty, ZeroAtStartingPoint) {
    auto model = transferred(two_conv_spec(), 3, 6);
    std::mt19937_64 rng(1);
    const auto ids = iota_ids(4);
    const auto table = random_table(model, ids, 2);
    const Tensor x = random_tensor({4, 2, 6, 6}, rng);
    EXPECT_EQ(behavioral_penalty(model, x, ids, &table).item(), 0.0);
    EXPECT_EQ(behavioral_penalty(model, x, ids, nullptr).item(), 0.0);
}

// Two forwards run by hand with the loop oracle: relu(conv(x)) under ω and ω*.
TEST(BehavioralPenalty, TwoFilterToyMatchesTwoPassOracle) {
    auto model = transferred(one_conv_spec(1, 4, 2, 2), 2, 7);
    model.param("layer0.weight").values() = {0.5, -0.25, 0.0, 1.0, 0.5, 0.0, -0.5, 0.25, 0.75,
                                             -1.0, 0.5, 0.25, 0.0, 1.0, -0.25, 0.5, 0.0, 0.5};
    model.param("layer0.bias").values() = {0.1, -0.2};
    const Tensor x = Tensor::from_data({2, 1, 4, 4}, {0.1, 0.9, 0.3, 0.4, 0.5, 0.2, 0.7, 0.8, 0.6, 1.0, 0.0, 0.3,
                                                      0.2, 0.4, 0.6, 0.8, 1.0, 0.5, 0.25, 0.0, 0.3, 0.6, 0.9, 0.2,
                                                      0.4, 0.1, 0.7, 0.5, 0.8, 0.35, 0.15, 0.65});
    const std::vector<std::uint64_t> ids{10, 11};
    const AttentionTable table({}, {0}, {2}, ids, {0.75, 0.25, 0.4, 0.6});

    auto maps = [&](const Tensor& w, const Tensor& b) {
        auto out = oracle::naive_conv2d(x, w, b, 1, 0);
        for (auto& v : out) v = std::max(v, 0.0);
        return out;  // (2, 2, 2, 2)
    };
    // ω was overwritten above; ω* keeps the values drawn at build time.
    const auto moved = maps(model.param("layer0.weight"), model.param("layer0.bias"));
    const auto source = maps(model.source_param("layer0.weight"), model.source_param("layer0.bias"));

    const double w[2][2] = {{0.75, 0.25}, {0.4, 0.6}};
    double expected = 0.0;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                const double d = moved[(i * 2 + j) * 4 + k] - source[(i * 2 + j) * 4 + k];
                d2 += d * d;
            }
            expected += w[i][j] * d2;
        }
    EXPECT_GT(expected, 0.0);
    EXPECT_NEAR(behavioral_penalty(model, x, ids, &table).item(), expected, 1e-12);
}

TEST(BehavioralPenalty, UniformWeightsGiveMeanDistance) {
    auto model = transferred(two_conv_spec(), 3, 8);
    perturb(model, 0.1, 3);
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor({3, 2, 6, 6}, rng);
    const auto ids = iota_ids(3);
    const auto tgt = model.forward_with_taps(x).feature_maps;
    const auto src = model.source_feature_maps(x);
    double expected = 0.0;
    for (auto layer : model.tap_layers()) {
        const std::size_t n = tgt.filters(layer);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const auto a = tgt.vector(layer, i, j), b = src.vector(layer, i, j);
                double d2 = 0.0;
                for (std::size_t k = 0; k < a.size(); ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
                expected += d2 / static_cast<double>(n);
            }
    }
    EXPECT_NEAR(behavioral_penalty(model, x, ids, nullptr).item(), expected, 1e-12);
}

TEST(BehavioralPenalty, LinearInWeights) {
    auto model = transferred(two_conv_spec(), 3, 9);
    perturb(model, 0.1, 5);
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor({3, 2, 6, 6}, rng);
    const auto ids = iota_ids(3, 100);
    const auto table = random_table(model, ids, 7);
    auto scaled = [&](double c) {
        auto w = table.weights();
        for (auto& v : w) v *= c;
        return AttentionTable({}, table.taps(), table.filters(), ids, w);
    };
    const double base = behavioral_penalty(model, x, ids, &table).item();
    const auto four = scaled(4.0), three = scaled(3.0);
    EXPECT_GT(base, 0.0);
    EXPECT_EQ(behavioral_penalty(model, x, ids, &four).item(), 4.0 * base);
    EXPECT_NEAR(behavioral_penalty(model, x, ids, &three).item(), 3.0 * base, 1e-12 * base);
}

TEST(BehavioralPenalty, OneFilterReducesToPlainDistance) {
    auto model = transferred(one_conv_spec(2, 5, 1, 2), 2, 10);
    perturb(model, 0.2, 1);
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor({1, 2, 5, 5}, rng);
    const auto ids = iota_ids(1);
    const auto tgt = model.forward_with_taps(x).feature_maps;
    const auto src = model.source_feature_maps(x);
    const auto a = tgt.vector(0, 0, 0), b = src.vector(0, 0, 0);
    double expected = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) expected += (a[k] - b[k]) * (a[k] - b[k]);
    const RegularizerConfig cfg{RegularizerKind::DELTA_NO_ATT, 1.0, 0.0};
    const Label y[1] = {0};
    const auto terms = evaluate_objective(model, x, y, ids, cfg);
    EXPECT_NEAR(behavioral_penalty(model, x, ids, nullptr).item(), expected, 1e-12);
    EXPECT_NEAR(terms.penalty, expected, 1e-12);
}

TEST(BehavioralPenalty, AreaNormalizationDividesEachTap) {
    auto model = transferred(one_conv_spec(1, 6, 2, 2), 2, 12);
    perturb(model, 0.2, 2);
    std::mt19937_64 rng(3);
    const Tensor x = random_tensor({2, 1, 6, 6}, rng);
    const auto ids = iota_ids(2);
    const double raw = behavioral_penalty(model, x, ids, nullptr).item();
    EXPECT_NEAR(behavioral_penalty(model, x, ids, nullptr, true).item(), raw / 16.0, 1e-14);
}

TEST(BehavioralPenalty, MissingEntryIsLookupError) {
    auto model = transferred(two_conv_spec(), 3, 13);
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng);
    const auto table = random_table(model, {0, 1}, 1);
    const std::vector<std::uint64_t> ids{0, 5};
    EXPECT_THROW(behavioral_penalty(model, x, ids, &table), IndexError);
}

TEST(BehavioralPenalty, GradCheckOnTwoConvNet) {
    auto model = transferred(two_conv_spec(), 3, 14);
    perturb(model, 0.1, 4);
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng);
    const auto ids = iota_ids(2);
    const auto table = random_table(model, ids, 6);
    std::vector<Tensor> params;
    for (auto& p : model.parameters()) params.push_back(p.value);
    const auto r = grad_check([&] { return behavioral_penalty(model, x, ids, &table); }, params);
    EXPECT_LT(r.max_relative_error, 1e-4);
    EXPECT_GT(r.checked, 0u);
}

TEST(TotalObjective, SwitchedOffEqualsCrossEntropy) {
    auto model = transferred(two_conv_spec(), 3, 15);
    perturb(model, 0.1, 6);
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({4, 2, 6, 6}, rng);
    const std::vector<Label> y{0, 2, 1, 2};
    const auto ids = iota_ids(4);
    const auto table = random_table(model, ids, 8);
    const double ce = softmax_cross_entropy(model.forward(x), y).item();
    for (auto kind : {RegularizerKind::L2, RegularizerKind::L2SP, RegularizerKind::L2FE, RegularizerKind::DELTA,
                      RegularizerKind::DELTA_NO_ATT}) {
        const RegularizerConfig cfg{kind, 0.0, 0.0};
        EXPECT_NEAR(total_objective(model, x, y, ids, cfg, &table).item(), ce, 1e-12) << to_string(kind);
    }
}

TEST(TotalObjective, DeltaAtStartingPointIsEmpiricalLoss) {
    auto model = transferred(two_conv_spec(), 3, 16);
    zero_head(model);
    std::mt19937_64 rng(8);
    const Tensor x = random_tensor({4, 2, 6, 6}, rng);
    const std::vector<Label> y{1, 0, 2, 2};
    const auto ids = iota_ids(4);
    const auto table = random_table(model, ids, 9);
    const RegularizerConfig cfg{RegularizerKind::DELTA, 0.7, 0.01};
    const auto terms = evaluate_objective(model, x, y, ids, cfg, &table);
    EXPECT_EQ(terms.total.item(), softmax_cross_entropy(model.forward(x), y).item());
    EXPECT_EQ(terms.penalty, 0.0);
}

TEST(TotalObjective, TermByTermOracle) {
    auto model = transferred(two_conv_spec(), 3, 17);
    perturb(model, 0.1, 7);
    std::mt19937_64 rng(9);
    const Tensor x = random_tensor({4, 2, 6, 6}, rng);
    const std::vector<Label> y{2, 0, 1, 1};
    const auto ids = iota_ids(4);
    const auto table = random_table(model, ids, 10);
    const double ce = softmax_cross_entropy(model.forward(x), y).item();
    const double l2 = flat_sum_half_squares(model, false), head = flat_sum_half_squares(model, true);
    double shared = 0.0;
    for (const auto& s : model.source()) {
        const auto& now = model.param(s.name).values();
        for (std::size_t k = 0; k < now.size(); ++k) shared += 0.5 * std::pow(now[k] - s.value.values()[k], 2);
    }
    const double beh = behavioral_penalty(model, x, ids, &table).item();
    const double uni = behavioral_penalty(model, x, ids, nullptr).item();
    const double a = 0.37, b = 0.019;
    auto total = [&](RegularizerKind kind) {
        return total_objective(model, x, y, ids, {kind, a, b}, &table).item();
    };
    EXPECT_NEAR(total(RegularizerKind::L2), ce + a * l2, 1e-12);
    EXPECT_NEAR(total(RegularizerKind::L2SP), ce + a * shared + b * head, 1e-12);
    EXPECT_NEAR(total(RegularizerKind::L2FE), ce, 1e-12);
    EXPECT_NEAR(total(RegularizerKind::DELTA), ce + a * beh + b * head, 1e-12);
    EXPECT_NEAR(total(RegularizerKind::DELTA_NO_ATT), ce + a * uni + b * head, 1e-12);
}

TEST(TotalObjective, ContractAndConfigErrors) {
    auto model = transferred(two_conv_spec(), 3, 18);
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng);
    const std::vector<Label> y{0, 1};
    const auto ids = iota_ids(2);
    EXPECT_THROW(total_objective(model, x, y, ids, {RegularizerKind::DELTA, 0.1, 0.01}), ContractError);
    EXPECT_THROW(total_objective(model, x, y, ids, {RegularizerKind::L2, -1.0, 0.0}), ConfigError);
    EXPECT_THROW(total_objective(model, x, y, ids, {RegularizerKind::L2SP, 0.1, NAN}), ConfigError);
    EXPECT_NO_THROW(total_objective(model, x, y, ids, {RegularizerKind::DELTA_NO_ATT, 0.1, 0.01}));
}

TEST(TotalObjective, GradientReachesEveryParameter) {
    auto model = transferred(two_conv_spec(), 3, 19);
    perturb(model, 0.1, 8);
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng);
    const std::vector<Label> y{0, 1};
    const auto ids = iota_ids(2);
    const auto table = random_table(model, ids, 3);
    total_objective(model, x, y, ids, {RegularizerKind::DELTA, 0.5, 0.01}, &table).backward();
    for (const auto& p : model.parameters()) EXPECT_TRUE(p.value.has_grad()) << p.name;
}

TEST(RegularizerKind, StringRoundTrip) {
    for (auto kind : {RegularizerKind::L2, RegularizerKind::L2SP, RegularizerKind::L2FE, RegularizerKind::DELTA,
                      RegularizerKind::DELTA_NO_ATT}) {
        EXPECT_EQ(regularizer_kind_from_string(to_string(kind)), kind);
    }
    EXPECT_EQ(regularizer_kind_from_string("delta-no-att"), RegularizerKind::DELTA_NO_ATT);
    EXPECT_EQ(regularizer_kind_from_string("l2sp"), RegularizerKind::L2SP);
    EXPECT_THROW(regularizer_kind_from_string("l1"), ConfigError);
}

}  // namespace
}  // namespace delta
