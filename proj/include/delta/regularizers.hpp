#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "delta/attention_table.hpp"
#include "delta/model.hpp"
#include "delta/ops.hpp"
#include "delta/tensor.hpp"

namespace delta {

enum class RegularizerKind { L2, L2SP, L2FE, DELTA, DELTA_NO_ATT };

std::string to_string(RegularizerKind kind);
/// Accepts the enumerator spelling ("DELTA_NO_ATT") or its lowercase, dashed form ("delta-no-att").
RegularizerKind regularizer_kind_from_string(const std::string& name);

struct RegularizerConfig {
    RegularizerKind kind = RegularizerKind::DELTA;
    double alpha = 0.01;
    double beta = 0.01;
    /// Divide each feature-map distance by its spatial area. Off by default.
    bool normalize_by_area = false;
};

/// Throws ConfigError for negative or non-finite coefficients.
void validate(const RegularizerConfig& config);

/// ½ Σ ‖ω_k‖² over every parameter.
Tensor l2_penalty(const ConvNetModel& model);
/// ½ Σ ‖ω_k − ω*_k‖² over the parameters present in ω*.
Tensor l2_sp_shared_penalty(const ConvNetModel& model);
/// ½ Σ ‖ω_h‖² over the head (parameters absent from ω*).
Tensor private_penalty(const ConvNetModel& model);
/// Shared part plus head part.
Tensor l2_sp_penalty(const ConvNetModel& model);

/// Per-sample filter weights for one tap, laid out as [b * N + j]. A null
/// table gives the uniform 1/N weighting.
std::vector<double> gather_attention(const AttentionTable* attention, std::span<const std::uint64_t> sample_ids,
                                     std::size_t tap, std::size_t filters);

/// Σ_i Σ_taps Σ_j W_j(x_i) ‖FM_j(ω, x_i) − FM_j(ω*, x_i)‖² from precomputed
/// target and source feature maps (the source side is treated as constant).
Tensor behavioral_penalty(const FeatureMapSet& target, const FeatureMapSet& source,
                          std::span<const std::uint64_t> sample_ids, const AttentionTable* attention,
                          bool normalize_by_area = false);
/// Runs both forwards. A null table means uniform weights.
Tensor behavioral_penalty(const ConvNetModel& model, const Tensor& images, std::span<const std::uint64_t> sample_ids,
                          const AttentionTable* attention, bool normalize_by_area = false);

struct ObjectiveTerms {
    Tensor total;
    Tensor logits;
    double empirical = 0.0;
    double penalty = 0.0;  // the coefficient-weighted regularization part
};

/// Cross-entropy plus the penalty selected by `config.kind`. Terms whose
/// coefficient is zero are not evaluated.
ObjectiveTerms evaluate_objective(const ConvNetModel& model, const Tensor& images, std::span<const Label> labels,
                                  std::span<const std::uint64_t> sample_ids, const RegularizerConfig& config,
                                  const AttentionTable* attention = nullptr);

Tensor total_objective(const ConvNetModel& model, const Tensor& images, std::span<const Label> labels,
                       std::span<const std::uint64_t> sample_ids, const RegularizerConfig& config,
                       const AttentionTable* attention = nullptr);

}  // namespace delta
