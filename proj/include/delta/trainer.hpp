#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "delta/attention_table.hpp"
#include "delta/data.hpp"
#include "delta/model.hpp"
#include "delta/regularizers.hpp"

namespace delta {

/// Classic (heavy-ball) momentum: v <- mu v + g, w <- w - lr v.
struct OptimizerState {
    std::vector<std::vector<double>> velocity;  // one buffer per model parameter, same order
    std::vector<bool> frozen;                   // parameters skipped entirely
    double momentum = 0.9;
    double lr = 0.01;
    std::size_t iteration = 0;
};

OptimizerState make_optimizer(const ConvNetModel& model, double momentum, double lr,
                              std::vector<bool> frozen = {});

/// One update from the gradients currently stored on the model parameters.
/// Throws ContractError when a trainable parameter has no gradient.
void sgd_momentum_step(OptimizerState& state, ConvNetModel& model);

enum class ScheduleKind { StepLR, ExponentialLR };

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::StepLR;
    double base_lr = 0.01;
    double factor = 0.1;     // StepLR decay, or ExponentialLR per-epoch factor
    std::size_t step = 1000; // StepLR only
};

void validate(const ScheduleSpec& spec);
/// StepLR: base * factor^floor(iteration / step). ExponentialLR: base * factor^epoch.
double schedule_lr(const ScheduleSpec& spec, std::size_t iteration, std::size_t epoch);
std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct TrainConfig {
    RegularizerConfig regularizer;
    ScheduleSpec schedule;
    double momentum = 0.9;
    std::size_t iterations = 1500;
    std::size_t batch_size = 16;
    std::size_t log_every = 50;
    std::uint64_t seed = 0;
    AugmentSpec augment;  // training views; evaluation uses the same resize/crop/mean
    bool ten_crop_eval = false;
};

struct MetricsRow {
    std::size_t iteration = 0;  // completed iterations
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;    // mean objective over the logging interval
    double train_acc = 0.0;     // mean batch accuracy over the logging interval
    double test_acc = 0.0;
    bool operator==(const MetricsRow&) const = default;
};

struct TrainResult {
    ConvNetModel model;
    std::vector<MetricsRow> log;
};

/// The SPAR start: ω* snapshot, shared weights copied, new head for `num_classes`.
ConvNetModel spar_init(const ConvNetModel& source, std::size_t num_classes, std::uint64_t seed);

/// Minibatch SGD on the configured objective. Batches are drawn without
/// replacement from a per-epoch shuffle; an epoch is floor(iteration * batch / n).
/// With kind L2FE only head parameters move. Deterministic in `config.seed`.
/// A non-finite loss aborts with NumericError carrying a state dump.
TrainResult train(ConvNetModel model, const Dataset& train_set, const Dataset* test_set, const TrainConfig& config,
                  const AttentionTable* attention = nullptr);

/// SPAR-initializes from `source` and trains on `train_set`.
TrainResult fine_tune(const ConvNetModel& source, const Dataset& train_set, const Dataset* test_set,
                      const TrainConfig& config, const AttentionTable* attention = nullptr);

/// Top-1 accuracy in [0, 1]; ten-crop averages the softmax of the 10 views.
double evaluate(const ConvNetModel& model, const Dataset& data, const AugmentSpec& view, bool ten_crop = false);

/// Index of the largest value; ties go to the first.
std::size_t argmax(std::span<const double> values);

/// Stratified split: class members are shuffled with `seed` and dealt round-robin.
/// Throws ConfigError when some class has fewer than `folds` samples.
std::vector<std::vector<std::size_t>> stratified_folds(const Dataset& data, std::size_t folds, std::uint64_t seed);

struct CrossValidation {
    double best_alpha = 0.0;
    std::vector<double> alphas;          // ascending
    std::vector<double> mean_accuracy;   // per alpha
    std::vector<std::vector<double>> fold_accuracy;  // [alpha][fold]
};

/// Picks the alpha with the highest mean validation accuracy over stratified
/// folds; ties go to the smallest alpha. A single candidate is returned without training.
CrossValidation cross_validate_alpha(const ConvNetModel& source, const Dataset& data, std::vector<double> alphas,
                                     const TrainConfig& config, const AttentionTable* attention = nullptr,
                                     std::size_t folds = 5);

/// Header `iteration,epoch,lr,train_loss,train_acc,test_acc`, reals printed with %.17g.
std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// Decimal text of a double that parses back to the same bits ("%.17g").
std::string format_real(double value);

}  // namespace delta
