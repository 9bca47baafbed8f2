#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "delta/analysis.hpp"
#include "delta/attention.hpp"
#include "delta/trainer.hpp"

namespace delta {

/// One fine-tuning method run over several seeds.
///
/// JSON schema (every key optional unless marked):
///   source_checkpoint  string  (required) DLTA checkpoint of the pretrained source
///   train_data         string  (required) DIMG file or class directory tree
///   test_data          string  evaluation set; without it test_acc is NaN
///   attention_cache    string  DATT file reused or rewritten for DELTA
///   kind               string  l2 | l2sp | l2fe | delta | delta_no_att
///   alpha, beta        number
///   alpha_candidates   [number] chosen by stratified cross-validation when non-empty
///   cv_folds           int
///   normalize_by_area  bool
///   schedule           {kind: step|exponential, base_lr, factor, step}
///   momentum, iterations, batch_size, log_every
///   augment            {resize_shorter, crop, mirror, mean}; mean absent = training-split mean
///   ten_crop           bool
///   taps               [int]  conv layers to regularize; empty keeps the checkpoint's taps
///   fe_head            {epochs, lr, seed}
///   seeds              [int]  (non-empty)
///   out_dir            string
/// Relative paths are resolved against the directory of the config file.
struct ExperimentConfig {
    std::filesystem::path source_checkpoint;
    std::filesystem::path train_data;
    std::filesystem::path test_data;
    std::filesystem::path attention_cache;
    RegularizerConfig regularizer;
    std::vector<double> alpha_candidates;
    std::size_t cv_folds = 5;
    ScheduleSpec schedule;
    double momentum = 0.9;
    std::size_t iterations = 1500;
    std::size_t batch_size = 16;
    std::size_t log_every = 50;
    AugmentSpec augment;
    bool mean_from_train = true;  // ignore augment.mean and use the training-split channel mean
    bool ten_crop = false;
    std::vector<std::size_t> taps;
    std::size_t fe_epochs = 100;
    double fe_lr = 0.1;
    std::uint64_t fe_seed = 0;
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path out_dir = "out";
};

/// Throws ConfigError for an invalid field or a referenced path that does not exist.
void validate(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const std::string& text, const std::filesystem::path& base_dir = {});
std::string experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Lowercase 16-digit hexadecimal.
std::string hex64(std::uint64_t value);

struct ExperimentSummary {
    RegularizerKind kind = RegularizerKind::DELTA;
    double alpha = 0.0;
    double beta = 0.0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> final_acc;  // per seed
    double mean_acc = 0.0;
    double std_acc = 0.0;           // sample standard deviation, 0 for one seed
    std::uint64_t train_hash = 0;
    std::uint64_t test_hash = 0;
    std::uint64_t source_hash = 0;
};

/// Mean and sample standard deviation (n - 1 denominator; 0 for fewer than two values).
std::pair<double, double> mean_std(const std::vector<double>& values);

std::string format_summary_json(const ExperimentSummary& summary);
ExperimentSummary parse_summary_json(const std::string& text);

/// Writes into `out_dir`:
///   metrics/seed_<s>.csv, checkpoints/seed_<s>.ckpt, cv.json (when alpha is cross-validated),
///   summary.json and MANIFEST. MANIFEST is rewritten after every stage; on failure it is
///   left with status "failed", the failing stage and the error, and the error is rethrown.
/// Output contains no timestamps, so identical configs produce identical bytes.
ExperimentSummary run_experiment(const ExperimentConfig& config);

/// Chooses alpha over `alpha_candidates` only and writes out_dir/cv.json.
CrossValidation run_cross_validation(const ExperimentConfig& config);

struct ManifestStage {
    std::string name;
    std::string status;  // done | running | failed | skipped
};

struct Manifest {
    std::string status = "running";  // running | complete | failed
    std::vector<ManifestStage> stages;
    std::string error;
    std::vector<std::string> files;  // relative to the run directory
};

std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text);
Manifest read_manifest(const std::filesystem::path& run_dir);

struct ComparisonRow {
    std::string method;
    double mean_acc = 0.0;
    double std_acc = 0.0;
    std::size_t seeds = 0;
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    /// Fraction of conv filters farther from ω* under DELTA than under L2SP, pooled over
    /// the seeds both runs share. Empty unless both methods are present.
    std::optional<double> delta_vs_l2sp_larger_fraction;
};

/// Reads summary.json (and, for DELTA and L2SP, the per-seed checkpoints) of completed
/// runs. Throws ValidationError when the runs disagree on dataset or source hashes or seeds.
Comparison compare_methods(const std::vector<std::filesystem::path>& run_dirs, const StageGrouping& grouping = {});

/// `method,mean_acc,std_acc,seeds`
std::string format_comparison_csv(const Comparison& comparison);
std::vector<ComparisonRow> parse_comparison_csv(const std::string& text);
std::string format_comparison_json(const Comparison& comparison);

/// First logged iteration at which the seed-averaged test accuracy curve reaches
/// `fraction` of its final value. All logs must share the same logging iterations.
std::size_t iterations_to_fraction(const std::vector<std::vector<MetricsRow>>& logs, double fraction);

/// Whole-pipeline desk study on the synthetic transfer pair.
struct StudyConfig {
    SyntheticSpec data{.seed = 1, .source_classes = 8, .target_classes = 5, .per_class = 60,
                       .target_per_class = 30, .size = 18};
    std::size_t test_per_class = 40;
    std::size_t crop = 16;
    std::size_t pretrain_iterations = 3000;
    double pretrain_lr = 0.05;
    double pretrain_weight_decay = 5e-4;
    std::uint64_t pretrain_seed = 7;
    std::size_t iterations = 600;
    double base_lr = 0.01;
    double beta = 0.01;
    std::vector<double> alpha_candidates{1e-4, 1e-3, 1e-2};
    std::size_t cv_folds = 5;
    std::size_t log_every = 30;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::vector<RegularizerKind> methods{RegularizerKind::L2, RegularizerKind::L2SP, RegularizerKind::DELTA,
                                         RegularizerKind::DELTA_NO_ATT, RegularizerKind::L2FE};
    std::filesystem::path out_dir = "study";
};

struct StudyResult {
    double source_test_acc = 0.0;
    double pixel_linear_acc = 0.0;  // linear classifier on raw target pixels
    std::vector<ExperimentSummary> summaries;        // in `methods` order
    std::vector<std::vector<std::vector<MetricsRow>>> logs;  // [method][seed]
    Comparison comparison;
};

/// Generates data, pretrains the source, runs every method (alpha cross-validated
/// when the method uses it) and compares. Layout under out_dir: data/, source/,
/// runs/<kind>/, comparison.csv, comparison.json, study.json.
StudyResult run_study(const StudyConfig& config);

/// Multinomial logistic regression on flattened pixels, trained with full-batch
/// gradient descent; returns test accuracy.
double pixel_linear_baseline(const Dataset& train_set, const Dataset& test_set, std::size_t epochs = 500,
                             double lr = 0.5);

}  // namespace delta
