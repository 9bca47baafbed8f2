#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "delta/attention_table.hpp"
#include "delta/data.hpp"
#include "delta/model.hpp"

namespace delta {

struct FeHeadOptions {
    std::size_t epochs = 30;
    double lr = 0.1;
    std::size_t batch_size = 0;  // 0 trains on the whole set each step
    std::uint64_t seed = 0;
    AugmentSpec view;            // deterministic view (center crop, mean) fed to the frozen extractor
};

/// Trains only the head of `model` (which must carry a source snapshot) with
/// plain SGD on cross-entropy; every other parameter stays bitwise equal to ω*.
/// Head inputs are computed once since the extractor is frozen. When
/// `epoch_losses` is given it receives the full-set training loss after each epoch.
ConvNetModel train_fe_head(const ConvNetModel& model, const Dataset& data, const FeHeadOptions& options,
                           std::vector<double>* epoch_losses = nullptr);

/// Per-sample cross-entropy of `images` (B, C, H, W) with filter `filter` of
/// conv layer `tap` removed. Activations entering `tap` are computed once and
/// reused; the result is bitwise equal to a full forward with the zeroed filter.
std::vector<double> ablate_filter_loss(const ConvNetModel& fe_model, const Tensor& images,
                                       std::span<const Label> labels, std::size_t tap, std::size_t filter);
double ablate_filter_loss(const ConvNetModel& fe_model, const Image& view, Label label, std::size_t tap,
                          std::size_t filter);

/// softmax over filters of (ablated loss − baseline loss).
std::vector<double> attention_from_gaps(std::span<const double> gaps);
std::vector<double> attention_weights(const ConvNetModel& fe_model, const Image& view, Label label, std::size_t tap);

struct AttentionOptions {
    AugmentSpec view;
    std::size_t chunk = 64;   // samples per ablation batch
    std::size_t threads = 1;  // chunks are independent; output does not depend on this
    std::optional<std::filesystem::path> cache;
};

/// FNV-1a over the names and values of ω*.
std::uint64_t source_fingerprint(const ConvNetModel& model);

/// Attention rows for every sample of `data`. With `options.cache` set, a
/// cache file whose hashes, taps and sample ids match is reused; anything else
/// is recomputed and the file rewritten.
AttentionTable build_attention_table(const ConvNetModel& fe_model, const Dataset& data,
                                     const std::vector<std::size_t>& taps, const AttentionOptions& options);

}  // namespace delta
