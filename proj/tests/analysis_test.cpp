#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "delta/binary_io.hpp"
#include "delta/checkpoint.hpp"
#include "delta/errors.hpp"
#include "delta/experiment.hpp"
#include "oracles.hpp"

namespace delta {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TEST(NormalizeMap, DirectFormula) {
    const auto out = normalize_activation_map(Tensor::from_data({2, 2}, {0, 5, 10, 5}));
    EXPECT_EQ(out.shape(), (Shape{2, 2}));
    EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{0, 0.5, 1, 0.5}));
}

TEST(NormalizeMap, ConstantMapBecomesZeros) {
    const auto out = normalize_activation_map(Tensor::from_data({2, 3}, std::vector<double>(6, 3.25)));
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(NormalizeMap, RandomMapsSpanUnitIntervalAndAreIdempotent) {
    std::mt19937_64 rng(3);
    for (std::size_t trial = 0; trial < 20; ++trial) {
        const auto map = oracle::random_tensor({3 + trial % 4, 2 + trial % 5}, rng, -7.0, 11.0);
        const auto once = normalize_activation_map(map);
        const auto [lo, hi] = std::minmax_element(once.data().begin(), once.data().end());
        EXPECT_EQ(*lo, 0.0);
        EXPECT_EQ(*hi, 1.0);
        const auto twice = normalize_activation_map(once);
        for (std::size_t i = 0; i < once.numel(); ++i) EXPECT_NEAR(twice.data()[i], once.data()[i], 1e-12);
    }
}

TEST(NormalizeMap, RejectsNon2d) {
    EXPECT_THROW(normalize_activation_map(Tensor::zeros({1, 2, 2})), ShapeError);
}

ModelSpec two_conv_spec() {
    ModelSpec spec;
    spec.in_channels = 2;
    spec.in_height = 6;
    spec.in_width = 6;
    spec.layers = {LayerSpec::conv(3, 3, 1, 0, true), LayerSpec::relu(),  LayerSpec::conv(4, 3, 1, 0, true),
                   LayerSpec::relu(),                  LayerSpec::global_avg_pool(), LayerSpec::linear(2)};
    return spec;
}

void perturb(ConvNetModel& m, const std::string& name, std::size_t offset, const std::vector<double>& v,
             double sign = 1.0) {
    auto d = m.param(name).data();
    for (std::size_t i = 0; i < v.size(); ++i) d[offset + i] += sign * v[i];
}

TEST(Distance, IdenticalModelsAreAllZero) {
    const auto m = build_model(two_conv_spec(), 1);
    const auto report = param_distance_report(m, m.clone());
    ASSERT_EQ(report.filters.size(), 7u);
    for (const auto& f : report.filters) EXPECT_EQ(f.distance, 0.0);
}

TEST(Distance, OneFilterPerturbedHasDistanceNormOfPerturbation) {
    const auto before = build_model(two_conv_spec(), 1);
    auto after = before.clone();
    // filter 2 of layer 2: slice of 3 input channels * 3 * 3 = 27 values
    std::vector<double> v(27, 0.0);
    v[0] = 3.0;
    v[26] = 4.0;
    perturb(after, "layer2.weight", 2 * 27, v);
    const auto report = param_distance_report(before, after);
    for (const auto& f : report.filters) {
        if (f.layer == 2 && f.filter == 2) {
            EXPECT_NEAR(f.distance, 5.0, 1e-12);
        } else {
            EXPECT_EQ(f.distance, 0.0) << f.layer << "/" << f.filter;
        }
    }
}

TEST(Distance, RandomPerturbationMatchesFlatNormOracleAndIsSignSymmetric) {
    const auto before = build_model(two_conv_spec(), 2);
    auto plus = before.clone(), minus = before.clone();
    std::mt19937_64 rng(9);
    std::vector<std::vector<double>> expected;  // per layer, per filter
    for (std::size_t layer : {0u, 2u}) {
        const std::string name = param_name(layer, "weight");
        const auto& w = before.param(name);
        const std::size_t per = w.numel() / w.dim(0);
        for (std::size_t j = 0; j < w.dim(0); ++j) {
            const auto v = oracle::random_tensor({per}, rng);
            std::vector<double> vv(v.data().begin(), v.data().end());
            perturb(plus, name, j * per, vv, 1.0);
            perturb(minus, name, j * per, vv, -1.0);
            long double sq = 0;
            for (double x : vv) sq += static_cast<long double>(x) * x;
            expected.push_back({static_cast<double>(std::sqrt(sq))});
        }
    }
    const auto rp = param_distance_report(before, plus);
    const auto rm = param_distance_report(before, minus);
    ASSERT_EQ(rp.filters.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        EXPECT_NEAR(rp.filters[i].distance, expected[i][0], 1e-12);
        EXPECT_NEAR(rp.filters[i].distance, rm.filters[i].distance, 1e-12);
    }
}

TEST(Distance, GroupsUseLabelsAndSortDescending) {
    const auto before = build_model(two_conv_spec(), 3);
    auto after = before.clone();
    std::mt19937_64 rng(5);
    for (auto& p : after.parameters()) {
        for (auto& x : p.value.data()) x += std::uniform_real_distribution<double>(-1, 1)(rng);
    }
    const auto report = param_distance_report(before, after, {{2, "late"}});
    ASSERT_EQ(report.groups.size(), 2u);
    ASSERT_EQ(report.groups.at("layer0").size(), 3u);
    ASSERT_EQ(report.groups.at("late").size(), 4u);
    for (const auto& [_, values] : report.groups) EXPECT_TRUE(std::is_sorted(values.rbegin(), values.rend()));
    for (const auto& f : report.filters) EXPECT_EQ(f.group, f.layer == 2 ? "late" : "layer0");
}

TEST(Distance, LayoutMismatchIsContractError) {
    auto other = two_conv_spec();
    other.layers[2].out_channels = 5;
    EXPECT_THROW(param_distance_report(build_model(two_conv_spec(), 1), build_model(other, 1)), ContractError);
    auto fewer = two_conv_spec();
    fewer.layers.erase(fewer.layers.begin() + 2, fewer.layers.begin() + 4);
    EXPECT_THROW(param_distance_report(build_model(two_conv_spec(), 1), build_model(fewer, 1)), ContractError);
}

TEST(Distance, SparStartIsZeroFromSnapshot) {
    const auto spar = replace_head(build_model(two_conv_spec(), 1), 3, 8);
    for (const auto& f : param_distance_report(spar).filters) EXPECT_EQ(f.distance, 0.0);
}

TEST(Distance, LargerFractionCountsStrictlyLarger) {
    DistanceReport a, b;
    const double da[] = {1, 2, 3, 4}, db[] = {0.5, 2, 4, 1};
    for (std::size_t i = 0; i < 4; ++i) {
        a.filters.push_back({0, i, "g", da[i]});
        b.filters.push_back({0, i, "g", db[i]});
    }
    EXPECT_DOUBLE_EQ(larger_distance_fraction(a, b), 0.5);
    b.filters.pop_back();
    EXPECT_THROW(larger_distance_fraction(a, b), ContractError);
}

TEST(Distance, CsvHasOneRowPerFilterAndReparses) {
    const auto before = build_model(two_conv_spec(), 4);
    auto after = before.clone();
    perturb(after, "layer0.weight", 0, {0.1, -0.2, 0.3});
    const auto report = param_distance_report(before, after);
    std::istringstream in(format_distance_csv(report));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "layer,filter,group,distance");
    std::size_t i = 0;
    while (std::getline(in, line)) {
        std::stringstream ls(line);
        std::string layer, filter, group, dist;
        std::getline(ls, layer, ',');
        std::getline(ls, filter, ',');
        std::getline(ls, group, ',');
        std::getline(ls, dist, ',');
        ASSERT_LT(i, report.filters.size());
        EXPECT_EQ(std::stoul(layer), report.filters[i].layer);
        EXPECT_EQ(std::stoul(filter), report.filters[i].filter);
        EXPECT_EQ(group, report.filters[i].group);
        EXPECT_EQ(std::stod(dist), report.filters[i].distance);
        ++i;
    }
    EXPECT_EQ(i, report.filters.size());
}

TEST(ActivationMaps, OneNormalizedGridPerFilter) {
    const auto m = build_model(two_conv_spec(), 6);
    std::mt19937_64 rng(1);
    Image img{2, 6, 6, {}};
    for (int i = 0; i < 72; ++i) img.pixels.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
    std::istringstream in(activation_maps_csv(m, img, 2));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "filter,y,x,value");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const double v = std::stod(line.substr(line.rfind(',') + 1));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        ++rows;
    }
    EXPECT_EQ(rows, 4u * 2 * 2);
    EXPECT_THROW(activation_maps_csv(m, img, 1), std::exception);
}

TEST(MeanStd, SampleStandardDeviation) {
    const auto [m, s] = mean_std({1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(m, 2.5);
    EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
    EXPECT_EQ(mean_std({0.7}).second, 0.0);
    EXPECT_THROW(mean_std({}), ContractError);
}

TEST(Convergence, FirstIterationReachingFractionOfMeanCurve) {
    auto curve = [](std::vector<double> acc) {
        std::vector<MetricsRow> log;
        for (std::size_t i = 0; i < acc.size(); ++i) log.push_back({(i + 1) * 10, 0, 0.1, 0, 0, acc[i]});
        return log;
    };
    // mean curve 0.2, 0.5, 0.8, 0.9 -> target 0.81 first reached at the final row
    EXPECT_EQ(iterations_to_fraction({curve({0.2, 0.4, 0.8, 0.9}), curve({0.2, 0.6, 0.8, 0.9})}, 0.9), 40u);
    EXPECT_EQ(iterations_to_fraction({curve({0.2, 0.85, 0.9, 0.9})}, 0.9), 20u);
    EXPECT_THROW(iterations_to_fraction({curve({0.1, 0.2}), curve({0.1})}, 0.9), ContractError);
}

TEST(PixelBaseline, SeparableByBrightness) {
    std::vector<Sample> s;
    for (std::size_t i = 0; i < 20; ++i) {
        Image img{1, 2, 2, std::vector<double>(4, i % 2 ? 0.9 : 0.1)};
        s.push_back({img, static_cast<Label>(i % 2), i});
    }
    const Dataset d(s, 2, Split::Train);
    EXPECT_EQ(pixel_linear_baseline(d, d, 200, 0.5), 1.0);
}

TEST(SummaryJson, RoundTripsAndRejectsGarbage) {
    ExperimentSummary s;
    s.kind = RegularizerKind::L2SP;
    s.alpha = 0.1 + 0.2;
    s.beta = 1e-3;
    s.seeds = {3, 4};
    s.final_acc = {0.1 / 3, 2.0 / 3};
    std::tie(s.mean_acc, s.std_acc) = mean_std(s.final_acc);
    s.train_hash = 0xfedcba9876543210ull;
    s.test_hash = 1;
    s.source_hash = 0;
    const auto back = parse_summary_json(format_summary_json(s));
    EXPECT_EQ(back.kind, s.kind);
    EXPECT_EQ(back.alpha, s.alpha);
    EXPECT_EQ(back.final_acc, s.final_acc);
    EXPECT_EQ(back.mean_acc, s.mean_acc);
    EXPECT_EQ(back.std_acc, s.std_acc);
    EXPECT_EQ(back.train_hash, s.train_hash);
    EXPECT_EQ(format_summary_json(back), format_summary_json(s));
    EXPECT_THROW(parse_summary_json("{}"), ValidationError);
    EXPECT_THROW(parse_summary_json("not json"), ValidationError);
}

TEST(ExperimentConfigJson, RoundTripResolvesPathsAndRejectsUnknownKeys) {
    const auto c = experiment_config_from_json(
        R"({"source_checkpoint": "src.ckpt", "train_data": "/abs/t.dimg", "kind": "l2sp", "alpha": 0.5,
            "alpha_candidates": [0.1, 1], "schedule": {"kind": "exponential", "factor": 0.93},
            "augment": {"crop": 8, "mirror": false, "mean": [0.5]}, "seeds": [1, 2], "out_dir": "o",
            "fe_head": {"epochs": 7}})",
        "/base");
    EXPECT_EQ(c.source_checkpoint, fs::path("/base/src.ckpt"));
    EXPECT_EQ(c.train_data, fs::path("/abs/t.dimg"));
    EXPECT_EQ(c.out_dir, fs::path("/base/o"));
    EXPECT_EQ(c.regularizer.kind, RegularizerKind::L2SP);
    EXPECT_EQ(c.regularizer.alpha, 0.5);
    EXPECT_EQ(c.alpha_candidates, (std::vector<double>{0.1, 1}));
    EXPECT_EQ(c.schedule.kind, ScheduleKind::ExponentialLR);
    EXPECT_EQ(c.augment.crop, 8u);
    EXPECT_FALSE(c.augment.mirror);
    EXPECT_FALSE(c.mean_from_train);
    EXPECT_EQ(c.fe_epochs, 7u);
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
    const auto back = experiment_config_from_json(experiment_config_to_json(c));
    EXPECT_EQ(experiment_config_to_json(back), experiment_config_to_json(c));
    EXPECT_THROW(experiment_config_from_json(R"({"alhpa": 1})"), ConfigError);
    EXPECT_THROW(experiment_config_from_json(R"({"kind": "bogus"})"), ConfigError);
    EXPECT_THROW(experiment_config_from_json("[1"), ConfigError);
}

TEST(ExperimentConfigJson, ValidationChecksPathsAndSeeds) {
    ExperimentConfig c;
    c.source_checkpoint = "/nonexistent/x.ckpt";
    c.train_data = "/nonexistent/t.dimg";
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Manifest, RoundTrips) {
    Manifest m;
    m.status = "failed";
    m.stages = {{"load", "done"}, {"attention", "failed"}};
    m.error = "boom";
    m.files = {"config.json"};
    const auto back = parse_manifest(format_manifest(m));
    EXPECT_EQ(back.status, m.status);
    EXPECT_EQ(back.stages.size(), 2u);
    EXPECT_EQ(back.stages[1].status, "failed");
    EXPECT_EQ(back.error, "boom");
    EXPECT_EQ(back.files, m.files);
}

// End-to-end runs on a tiny transfer task; the pretrained source is built once.
class ExperimentTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        root_ = fs::temp_directory_path() / ("delta_experiment_test_" + std::to_string(::getpid()));
        fs::remove_all(root_);
        fs::create_directories(root_);
        SyntheticSpec spec{.seed = 4, .source_classes = 4, .target_classes = 3, .per_class = 10, .size = 10};
        auto [source, target] = make_synthetic_transfer_pair(spec);
        spec.sample_stream = 1;
        auto [source2, test] = make_synthetic_transfer_pair(spec);
        save_dataset(target, root_ / "train.dimg");
        save_dataset(test, root_ / "test.dimg");
        save_dataset(source2, root_ / "other.dimg");
        TrainConfig pc;
        pc.regularizer = {RegularizerKind::L2, 1e-4, 0.0};
        pc.schedule.base_lr = 0.05;
        pc.iterations = 60;
        pc.log_every = 60;
        pc.augment.crop = 8;
        pc.augment.mean = source.channel_mean();
        save_checkpoint(train(build_model(reference_model_spec(3, 8, 4), 1), source, nullptr, pc).model,
                        root_ / "source.ckpt");
    }
    static void TearDownTestSuite() { fs::remove_all(root_); }

    static ExperimentConfig config(RegularizerKind kind, const std::string& out) {
        ExperimentConfig c;
        c.source_checkpoint = root_ / "source.ckpt";
        c.train_data = root_ / "train.dimg";
        c.test_data = root_ / "test.dimg";
        c.regularizer = {kind, 1e-3, 1e-2, false};
        c.iterations = 12;
        c.batch_size = 8;
        c.log_every = 4;
        c.augment.crop = 8;
        c.fe_epochs = 5;
        c.seeds = {0, 1};
        c.out_dir = root_ / out;
        return c;
    }

    static inline fs::path root_;
};

TEST_F(ExperimentTest, WritesPerSeedOutputsAndConsistentSummary) {
    const auto c = config(RegularizerKind::DELTA, "delta");
    const auto s = run_experiment(c);
    ASSERT_EQ(s.seeds, c.seeds);
    std::vector<double> final_acc;
    for (auto seed : c.seeds) {
        const auto log = read_metrics_csv(c.out_dir / "metrics" / ("seed_" + std::to_string(seed) + ".csv"));
        ASSERT_EQ(log.size(), 3u);
        EXPECT_EQ(log.back().iteration, 12u);
        final_acc.push_back(log.back().test_acc);
        EXPECT_TRUE(fs::exists(c.out_dir / "checkpoints" / ("seed_" + std::to_string(seed) + ".ckpt")));
    }
    const auto from_disk = parse_summary_json(slurp(c.out_dir / "summary.json"));
    const auto [mean, sd] = mean_std(final_acc);
    EXPECT_EQ(from_disk.final_acc, final_acc);
    EXPECT_EQ(from_disk.mean_acc, mean);
    EXPECT_EQ(from_disk.std_acc, sd);
    EXPECT_EQ(from_disk.train_hash, load_dataset(c.train_data).hash());
    const auto manifest = read_manifest(c.out_dir);
    EXPECT_EQ(manifest.status, "complete");
    for (const auto& f : manifest.files) EXPECT_TRUE(fs::exists(c.out_dir / f)) << f;
    for (const auto& st : manifest.stages) EXPECT_NE(st.status, "running");
}

TEST_F(ExperimentTest, RerunIsByteIdentical) {
    auto a = config(RegularizerKind::DELTA, "rerun_a");
    auto b = config(RegularizerKind::DELTA, "rerun_b");
    a.alpha_candidates = b.alpha_candidates = {0.0, 1e-3};
    a.cv_folds = b.cv_folds = 2;
    run_experiment(a);
    run_experiment(b);
    for (const char* f : {"summary.json", "cv.json", "metrics/seed_0.csv", "metrics/seed_1.csv",
                          "checkpoints/seed_0.ckpt", "checkpoints/seed_1.ckpt"}) {
        EXPECT_EQ(slurp(a.out_dir / f), slurp(b.out_dir / f)) << f;
    }
}

TEST_F(ExperimentTest, AttentionCacheIsWrittenAndReused) {
    auto c = config(RegularizerKind::DELTA, "cached");
    c.seeds = {0};
    c.attention_cache = root_ / "att.datt";
    const auto first = run_experiment(c);
    ASSERT_TRUE(fs::exists(c.attention_cache));
    const auto bytes = slurp(c.attention_cache);
    const auto second = run_experiment(c);
    EXPECT_EQ(slurp(c.attention_cache), bytes);
    EXPECT_EQ(first.final_acc, second.final_acc);
}

TEST_F(ExperimentTest, FailureLeavesManifestMarkingTheStage) {
    fs::create_directories(root_ / "broken");
    write_file_bytes(root_ / "broken/source.ckpt", std::vector<std::uint8_t>{'D', 'L', 'T', 'A', 9});
    auto c = config(RegularizerKind::L2, "failed_run");
    c.source_checkpoint = root_ / "broken/source.ckpt";
    EXPECT_THROW(run_experiment(c), ParseError);
    const auto m = read_manifest(c.out_dir);
    EXPECT_EQ(m.status, "failed");
    ASSERT_FALSE(m.stages.empty());
    EXPECT_EQ(m.stages.back().name, "load");
    EXPECT_EQ(m.stages.back().status, "failed");
    EXPECT_FALSE(m.error.empty());
    EXPECT_FALSE(fs::exists(c.out_dir / "summary.json"));
}

TEST_F(ExperimentTest, CompareBuildsTableAndDistanceFraction) {
    std::vector<fs::path> dirs;
    for (auto kind : {RegularizerKind::L2, RegularizerKind::L2SP, RegularizerKind::DELTA}) {
        auto c = config(kind, "cmp_" + to_string(kind));
        run_experiment(c);
        dirs.push_back(c.out_dir);
    }
    const auto cmp = compare_methods(dirs);
    ASSERT_EQ(cmp.rows.size(), 3u);
    EXPECT_EQ(cmp.rows[0].method, to_string(RegularizerKind::L2));
    for (std::size_t i = 0; i < 3; ++i) {
        const auto s = parse_summary_json(slurp(dirs[i] / "summary.json"));
        EXPECT_EQ(cmp.rows[i].mean_acc, s.mean_acc);
        EXPECT_EQ(cmp.rows[i].seeds, 2u);
        EXPECT_TRUE(std::isfinite(cmp.rows[i].mean_acc));
    }
    ASSERT_TRUE(cmp.delta_vs_l2sp_larger_fraction.has_value());
    EXPECT_GE(*cmp.delta_vs_l2sp_larger_fraction, 0.0);
    EXPECT_LE(*cmp.delta_vs_l2sp_larger_fraction, 1.0);
    const auto rows = parse_comparison_csv(format_comparison_csv(cmp));
    ASSERT_EQ(rows.size(), cmp.rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].method, cmp.rows[i].method);
        EXPECT_EQ(rows[i].mean_acc, cmp.rows[i].mean_acc);
        EXPECT_EQ(rows[i].std_acc, cmp.rows[i].std_acc);
    }
    EXPECT_THROW(parse_comparison_csv("method,mean\n"), ParseError);
    EXPECT_THROW(parse_comparison_csv("method,mean_acc,std_acc,seeds\nL2,x,0,1\n"), ParseError);

    auto other = config(RegularizerKind::L2FE, "cmp_other_data");
    other.train_data = root_ / "other.dimg";
    other.test_data = root_ / "other.dimg";
    run_experiment(other);
    EXPECT_THROW(compare_methods({dirs[0], other.out_dir}), ValidationError);
    EXPECT_THROW(compare_methods({dirs[0], dirs[0]}), ValidationError);
}

}  // namespace
}  // namespace delta
