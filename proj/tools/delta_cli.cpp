#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "delta/analysis.hpp"
#include "delta/attention.hpp"
#include "delta/checkpoint.hpp"
#include "delta/errors.hpp"
#include "delta/experiment.hpp"
#include "delta/trainer.hpp"

using namespace delta;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

AugmentSpec view_spec(const Dataset& data, std::size_t crop, bool mirror) {
    AugmentSpec a;
    a.crop = crop;
    a.mirror = mirror;
    a.mean = data.channel_mean();
    return a;
}

StageGrouping parse_grouping(const std::vector<std::string>& entries) {
    StageGrouping g;
    for (const auto& e : entries) {
        const auto eq = e.find('=');
        if (eq == std::string::npos) throw ConfigError("group must look like <layer>=<label>, got '" + e + "'");
        g[std::stoul(e.substr(0, eq))] = e.substr(eq + 1);
    }
    return g;
}

// Flags mirroring ExperimentConfig; values given on the command line override the --config file.
struct ExperimentFlags {
    std::string config, source, train, test, attention, kind, schedule_kind;
    double alpha = -1, beta = -1, base_lr = -1, factor = -1, momentum = -1;
    std::vector<double> alpha_candidates;
    std::size_t step = 0, iterations = 0, batch = 0, log_every = 0, crop = 0, folds = 0, fe_epochs = 0;
    std::vector<std::size_t> taps;
    std::vector<std::uint64_t> seeds;
    bool ten_crop = false, no_mirror = false, normalize_by_area = false;

    void add(CLI::App* app) {
        app->add_option("--config", config, "JSON experiment config");
        app->add_option("--source", source, "source checkpoint");
        app->add_option("--train", train, "training data (DIMG file or class directory)");
        app->add_option("--test", test, "test data");
        app->add_option("--attention-cache", attention, "DATT cache file");
        app->add_option("--kind", kind, "l2 | l2sp | l2fe | delta | delta_no_att");
        app->add_option("--alpha", alpha);
        app->add_option("--beta", beta);
        app->add_option("--alpha-candidates", alpha_candidates)->delimiter(',');
        app->add_option("--cv-folds", folds);
        app->add_option("--schedule", schedule_kind, "step | exponential");
        app->add_option("--lr", base_lr);
        app->add_option("--lr-factor", factor);
        app->add_option("--lr-step", step);
        app->add_option("--momentum", momentum);
        app->add_option("--iterations", iterations);
        app->add_option("--batch-size", batch);
        app->add_option("--log-every", log_every);
        app->add_option("--crop", crop);
        app->add_flag("--no-mirror", no_mirror);
        app->add_flag("--ten-crop", ten_crop);
        app->add_flag("--normalize-by-area", normalize_by_area);
        app->add_option("--taps", taps)->delimiter(',');
        app->add_option("--fe-epochs", fe_epochs);
        app->add_option("--seeds", seeds, "seeds, comma separated")->delimiter(',');
    }

    ExperimentConfig resolve(std::uint64_t* seed, const std::string& out_dir) const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_experiment_config(config);
        if (!source.empty()) c.source_checkpoint = source;
        if (!train.empty()) c.train_data = train;
        if (!test.empty()) c.test_data = test;
        if (!attention.empty()) c.attention_cache = attention;
        if (!kind.empty()) c.regularizer.kind = regularizer_kind_from_string(kind);
        if (alpha >= 0) c.regularizer.alpha = alpha;
        if (beta >= 0) c.regularizer.beta = beta;
        if (normalize_by_area) c.regularizer.normalize_by_area = true;
        if (!alpha_candidates.empty()) c.alpha_candidates = alpha_candidates;
        if (folds) c.cv_folds = folds;
        if (!schedule_kind.empty()) c.schedule.kind = schedule_kind_from_string(schedule_kind);
        if (base_lr >= 0) c.schedule.base_lr = base_lr;
        if (factor >= 0) c.schedule.factor = factor;
        if (step) c.schedule.step = step;
        if (momentum >= 0) c.momentum = momentum;
        if (iterations) c.iterations = iterations;
        if (batch) c.batch_size = batch;
        if (log_every) c.log_every = log_every;
        if (crop) c.augment.crop = crop;
        if (no_mirror) c.augment.mirror = false;
        if (ten_crop) c.ten_crop = true;
        if (!taps.empty()) c.taps = taps;
        if (fe_epochs) c.fe_epochs = fe_epochs;
        if (!seeds.empty()) c.seeds = seeds;
        if (seed) {
            c.seeds = {*seed};
            c.fe_seed = *seed;
        }
        if (!out_dir.empty()) c.out_dir = out_dir;
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transfer-learning fine-tuning with feature-map regularization under supervised attention"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string out_dir;
    auto universal = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "random seed");
        sub->add_option("--out-dir", out_dir, "output directory");
    };

    // make-synthetic
    auto* synth = app.add_subcommand("make-synthetic", "write the synthetic source/target transfer pair as DIMG files");
    SyntheticSpec sspec;
    std::size_t test_per_class = 40;
    synth->add_option("--source-classes", sspec.source_classes);
    synth->add_option("--target-classes", sspec.target_classes);
    synth->add_option("--per-class", sspec.per_class);
    synth->add_option("--target-per-class", sspec.target_per_class);
    synth->add_option("--test-per-class", test_per_class);
    synth->add_option("--size", sspec.size);
    synth->add_option("--noise", sspec.noise);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train a network from scratch on the source task");
    std::string pre_data, pre_test, pre_spec;
    std::size_t pre_crop = 16, pre_iters = 3000, pre_batch = 16;
    double pre_lr = 0.05, pre_wd = 5e-4;
    pre->add_option("--data", pre_data)->required();
    pre->add_option("--test", pre_test);
    pre->add_option("--model-spec", pre_spec, "JSON model spec; default is the reference network");
    pre->add_option("--crop", pre_crop);
    pre->add_option("--iterations", pre_iters);
    pre->add_option("--batch-size", pre_batch);
    pre->add_option("--lr", pre_lr);
    pre->add_option("--weight-decay", pre_wd);

    // train-fe-head
    auto* fe = app.add_subcommand("train-fe-head", "train a new head on the frozen source features");
    std::string fe_source, fe_data;
    std::size_t fe_crop = 16;
    FeHeadOptions fe_opts;
    fe_opts.epochs = 100;
    fe->add_option("--source", fe_source)->required();
    fe->add_option("--data", fe_data)->required();
    fe->add_option("--crop", fe_crop);
    fe->add_option("--epochs", fe_opts.epochs);
    fe->add_option("--lr", fe_opts.lr);

    // build-attention
    auto* att = app.add_subcommand("build-attention", "compute per-sample filter attention from an FE-head model");
    std::string att_model, att_data;
    std::size_t att_crop = 16, att_threads = 1;
    std::vector<std::size_t> att_taps;
    att->add_option("--fe-model", att_model)->required();
    att->add_option("--data", att_data)->required();
    att->add_option("--crop", att_crop);
    att->add_option("--threads", att_threads);
    att->add_option("--taps", att_taps)->delimiter(',');

    // finetune / cross-validate
    auto* ft = app.add_subcommand("finetune", "fine-tune from the source over one or more seeds");
    ExperimentFlags ft_flags;
    ft_flags.add(ft);
    auto* cv = app.add_subcommand("cross-validate", "choose alpha by stratified k-fold cross-validation");
    ExperimentFlags cv_flags;
    cv_flags.add(cv);

    // analyze-distances
    auto* dist = app.add_subcommand("analyze-distances", "per-filter distance of the weights from their start");
    std::string dist_before, dist_after;
    std::vector<std::string> dist_groups;
    dist->add_option("--before", dist_before, "starting checkpoint; default is the snapshot stored in --after");
    dist->add_option("--after", dist_after)->required();
    dist->add_option("--group", dist_groups, "<layer>=<label>, repeatable");

    // compare
    auto* cmp = app.add_subcommand("compare", "tabulate completed runs of several methods");
    std::vector<std::string> cmp_runs, cmp_groups;
    cmp->add_option("runs", cmp_runs, "run directories")->required();
    cmp->add_option("--group", cmp_groups, "<layer>=<label>, repeatable");

    // activation-maps
    auto* maps = app.add_subcommand("activation-maps", "normalized activation grids of one sample");
    std::string maps_model, maps_data;
    std::size_t maps_index = 0, maps_tap = 0, maps_crop = 16;
    maps->add_option("--model", maps_model)->required();
    maps->add_option("--data", maps_data)->required();
    maps->add_option("--index", maps_index);
    maps->add_option("--tap", maps_tap)->required();
    maps->add_option("--crop", maps_crop);

    // study
    auto* study = app.add_subcommand("study", "the whole synthetic comparison of all five methods");
    StudyConfig sc;
    std::size_t study_seeds = sc.seeds.size();
    study->add_option("--iterations", sc.iterations);
    study->add_option("--pretrain-iterations", sc.pretrain_iterations);
    study->add_option("--num-seeds", study_seeds);
    study->add_option("--alpha-candidates", sc.alpha_candidates)->delimiter(',');

    universal(synth);
    universal(pre);
    universal(fe);
    universal(att);
    universal(ft);
    universal(cv);
    universal(dist);
    universal(cmp);
    universal(maps);
    universal(study);
    std::map<CLI::App*, std::string> default_out{{synth, "data"},     {pre, "source"},  {fe, "fe_head"},
                                                 {att, "attention"},  {ft, "finetune"}, {cv, "cv"},
                                                 {dist, "distances"}, {cmp, "comparison"}, {maps, "maps"},
                                                 {study, "study"}};

    CLI11_PARSE(app, argc, argv);
    CLI::App* sub = app.get_subcommands().front();
    const bool seed_given = sub->count("--seed") > 0;
    if (out_dir.empty()) out_dir = default_out.at(sub);
    const fs::path out(out_dir);

    try {
        if (sub == synth) {
            sspec.seed = seed;
            auto [src, tgt] = make_synthetic_transfer_pair(sspec);
            SyntheticSpec tspec = sspec;
            tspec.sample_stream = 1;
            tspec.per_class = tspec.target_per_class = test_per_class;
            auto [src_test, tgt_test] = make_synthetic_transfer_pair(tspec);
            fs::create_directories(out);
            save_dataset(src, out / "source_train.dimg");
            save_dataset(src_test, out / "source_test.dimg");
            save_dataset(tgt, out / "target_train.dimg");
            save_dataset(tgt_test, out / "target_test.dimg");
            std::printf("wrote %zu/%zu source and %zu/%zu target samples to %s\n", src.size(), src_test.size(),
                        tgt.size(), tgt_test.size(), out.c_str());
        } else if (sub == pre) {
            const Dataset data = load_dataset(pre_data);
            std::optional<Dataset> test;
            if (!pre_test.empty()) test = load_dataset(pre_test, Split::Test);
            ModelSpec spec;
            if (pre_spec.empty()) {
                spec = reference_model_spec(data.channels(), pre_crop, data.num_classes());
            } else {
                std::ifstream in(pre_spec);
                if (!in) throw ConfigError("cannot open " + pre_spec);
                spec = model_spec_from_json(std::string(std::istreambuf_iterator<char>(in), {}));
            }
            TrainConfig tc;
            tc.regularizer = {RegularizerKind::L2, pre_wd, 0.0};
            tc.schedule = {ScheduleKind::StepLR, pre_lr, 0.1, std::max<std::size_t>(1, pre_iters * 2 / 3)};
            tc.iterations = pre_iters;
            tc.batch_size = pre_batch;
            tc.log_every = std::max<std::size_t>(1, pre_iters / 10);
            tc.seed = seed;
            tc.augment = view_spec(data, pre_crop, true);
            const auto result = train(build_model(spec, seed), data, test ? &*test : nullptr, tc);
            fs::create_directories(out);
            save_checkpoint(result.model, out / "source.ckpt");
            write_metrics_csv(result.log, out / "metrics.csv");
            std::printf("final train loss %.4f test acc %.4f\n", result.log.back().train_loss,
                        result.log.back().test_acc);
        } else if (sub == fe) {
            const Dataset data = load_dataset(fe_data);
            fe_opts.seed = seed;
            fe_opts.view = view_spec(data, fe_crop, false);
            std::vector<double> losses;
            const auto model =
                train_fe_head(spar_init(load_checkpoint(fe_source), data.num_classes(), seed), data, fe_opts, &losses);
            fs::create_directories(out);
            save_checkpoint(model, out / "fe_head.ckpt");
            std::string csv = "epoch,loss\n";
            for (std::size_t e = 0; e < losses.size(); ++e) {
                csv += std::to_string(e + 1) + "," + format_real(losses[e]) + "\n";
            }
            write_text(out / "losses.csv", csv);
            std::printf("final loss %.4f train acc %.4f\n", losses.empty() ? 0.0 : losses.back(),
                        evaluate(model, data, fe_opts.view));
        } else if (sub == att) {
            const auto model = load_checkpoint(att_model);
            const Dataset data = load_dataset(att_data);
            AttentionOptions opts;
            opts.view = view_spec(data, att_crop, false);
            opts.threads = att_threads;
            opts.cache = out / "attention.datt";
            const auto table =
                build_attention_table(model, data, att_taps.empty() ? model.tap_layers() : att_taps, opts);
            std::printf("attention for %zu samples over %zu taps in %s\n", table.rows(), table.taps().size(),
                        opts.cache->c_str());
        } else if (sub == ft) {
            const auto c = ft_flags.resolve(seed_given ? &seed : nullptr, sub->count("--out-dir") ? out_dir : "");
            const auto s = run_experiment(c);
            std::printf("%s alpha %g: mean acc %.4f std %.4f over %zu seeds\n", to_string(s.kind).c_str(), s.alpha,
                        s.mean_acc, s.std_acc, s.seeds.size());
        } else if (sub == cv) {
            const auto c = cv_flags.resolve(seed_given ? &seed : nullptr, sub->count("--out-dir") ? out_dir : "");
            const auto r = run_cross_validation(c);
            for (std::size_t i = 0; i < r.alphas.size(); ++i) {
                std::printf("alpha %g: mean validation acc %.4f\n", r.alphas[i], r.mean_accuracy[i]);
            }
            std::printf("best alpha %g\n", r.best_alpha);
        } else if (sub == dist) {
            const auto after = load_checkpoint(dist_after);
            const auto grouping = parse_grouping(dist_groups);
            const auto report = dist_before.empty() ? param_distance_report(after, grouping)
                                                    : param_distance_report(load_checkpoint(dist_before), after, grouping);
            write_text(out / "distances.csv", format_distance_csv(report));
            for (const auto& [group, values] : report.groups) {
                std::printf("%s: %zu filters, largest %.6g, smallest %.6g\n", group.c_str(), values.size(),
                            values.front(), values.back());
            }
        } else if (sub == cmp) {
            const auto c = compare_methods({cmp_runs.begin(), cmp_runs.end()}, parse_grouping(cmp_groups));
            write_text(out / "comparison.csv", format_comparison_csv(c));
            write_text(out / "comparison.json", format_comparison_json(c));
            for (const auto& r : c.rows) {
                std::printf("%-13s %.4f +- %.4f (%zu seeds)\n", r.method.c_str(), r.mean_acc, r.std_acc, r.seeds);
            }
            if (c.delta_vs_l2sp_larger_fraction) {
                std::printf("filters farther from the start under DELTA than L2SP: %.3f\n",
                            *c.delta_vs_l2sp_larger_fraction);
            }
        } else if (sub == maps) {
            const auto model = load_checkpoint(maps_model);
            const Dataset data = load_dataset(maps_data);
            if (maps_index >= data.size()) throw IndexError("sample index out of range");
            const Image view = eval_view(data[maps_index].image, view_spec(data, maps_crop, false));
            write_text(out / ("activation_maps_" + std::to_string(maps_index) + "_tap" + std::to_string(maps_tap) + ".csv"),
                       activation_maps_csv(model, view, maps_tap));
        } else if (sub == study) {
            sc.out_dir = out;
            sc.data.seed = seed_given ? seed : sc.data.seed;
            sc.seeds.clear();
            for (std::size_t s = 0; s < study_seeds; ++s) sc.seeds.push_back(s);
            const auto r = run_study(sc);
            std::printf("source test acc %.4f, raw-pixel linear baseline %.4f\n", r.source_test_acc,
                        r.pixel_linear_acc);
            for (std::size_t m = 0; m < r.summaries.size(); ++m) {
                const auto& s = r.summaries[m];
                std::printf("%-13s alpha %-7g %.4f +- %.4f  90%% of final at iteration %zu\n", to_string(s.kind).c_str(),
                            s.alpha, s.mean_acc, s.std_acc, iterations_to_fraction(r.logs[m], 0.9));
            }
            if (r.comparison.delta_vs_l2sp_larger_fraction) {
                std::printf("filters farther from the start under DELTA than L2SP: %.3f\n",
                            *r.comparison.delta_vs_l2sp_larger_fraction);
            }
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
