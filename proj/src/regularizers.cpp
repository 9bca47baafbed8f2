#include "delta/regularizers.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "delta/errors.hpp"

namespace delta {

namespace {

// Sum of a list of scalars; an empty list is a constant zero.
Tensor sum_terms(const std::vector<Tensor>& terms) {
    if (terms.empty()) return Tensor::scalar(0.0);
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

}  // namespace

std::string to_string(RegularizerKind kind) {
    switch (kind) {
        case RegularizerKind::L2: return "L2";
        case RegularizerKind::L2SP: return "L2SP";
        case RegularizerKind::L2FE: return "L2FE";
        case RegularizerKind::DELTA: return "DELTA";
        case RegularizerKind::DELTA_NO_ATT: return "DELTA_NO_ATT";
    }
    return "?";
}

RegularizerKind regularizer_kind_from_string(const std::string& name) {
    std::string key;
    for (char c : name) key += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (auto k : {RegularizerKind::L2, RegularizerKind::L2SP, RegularizerKind::L2FE, RegularizerKind::DELTA,
                   RegularizerKind::DELTA_NO_ATT}) {
        if (to_string(k) == key) return k;
    }
    if (key == "L2_SP") return RegularizerKind::L2SP;
    if (key == "L2_FE") return RegularizerKind::L2FE;
    throw ConfigError("unknown regularizer kind '" + name + "'");
}

void validate(const RegularizerConfig& config) {
    if (!std::isfinite(config.alpha) || config.alpha < 0.0) throw ConfigError("alpha must be finite and >= 0");
    if (!std::isfinite(config.beta) || config.beta < 0.0) throw ConfigError("beta must be finite and >= 0");
}

Tensor l2_penalty(const ConvNetModel& model) {
    std::vector<Tensor> terms;
    for (const auto& p : model.parameters()) terms.push_back(sum_squares(p.value));
    return scale(sum_terms(terms), 0.5);
}

Tensor l2_sp_shared_penalty(const ConvNetModel& model) {
    std::vector<Tensor> terms;
    for (const auto& ref : model.source()) {
        terms.push_back(squared_distance(model.param(ref.name), ref.value));
    }
    return scale(sum_terms(terms), 0.5);
}

Tensor private_penalty(const ConvNetModel& model) {
    std::vector<Tensor> terms;
    for (const auto& p : model.parameters()) {
        if (model.is_head(p.name)) terms.push_back(sum_squares(p.value));
    }
    return scale(sum_terms(terms), 0.5);
}

Tensor l2_sp_penalty(const ConvNetModel& model) { return add(l2_sp_shared_penalty(model), private_penalty(model)); }

std::vector<double> gather_attention(const AttentionTable* attention, std::span<const std::uint64_t> sample_ids,
                                     std::size_t tap, std::size_t filters) {
    std::vector<double> w(sample_ids.size() * filters, 1.0 / static_cast<double>(filters));
    if (!attention) return w;
    for (std::size_t b = 0; b < sample_ids.size(); ++b) {
        const auto row = attention->row(sample_ids[b], tap);
        if (row.size() != filters) {
            throw ContractError("attention row for layer " + std::to_string(tap) + " has " +
                                std::to_string(row.size()) + " weights, the tap has " + std::to_string(filters) +
                                " filters");
        }
        std::copy(row.begin(), row.end(), w.begin() + static_cast<std::ptrdiff_t>(b * filters));
    }
    return w;
}

Tensor behavioral_penalty(const FeatureMapSet& target, const FeatureMapSet& source,
                          std::span<const std::uint64_t> sample_ids, const AttentionTable* attention,
                          bool normalize_by_area) {
    if (sample_ids.size() != target.samples()) {
        throw ShapeError("behavioral_penalty: " + std::to_string(sample_ids.size()) + " sample ids for a batch of " +
                         std::to_string(target.samples()));
    }
    std::vector<Tensor> terms;
    for (const auto& tap : target.taps()) {
        const std::size_t n = target.filters(tap.layer);
        const auto weights = gather_attention(attention, sample_ids, tap.layer, n);
        const double area_scale =
            normalize_by_area ? 1.0 / static_cast<double>(target.vector_length(tap.layer)) : 1.0;
        terms.push_back(weighted_channel_sq_distance(tap.activation, source.activation(tap.layer), weights, area_scale));
    }
    return sum_terms(terms);
}

Tensor behavioral_penalty(const ConvNetModel& model, const Tensor& images, std::span<const std::uint64_t> sample_ids,
                          const AttentionTable* attention, bool normalize_by_area) {
    const auto target = model.forward_with_taps(images);
    const auto source = model.source_feature_maps(images);
    return behavioral_penalty(target.feature_maps, source, sample_ids, attention, normalize_by_area);
}

ObjectiveTerms evaluate_objective(const ConvNetModel& model, const Tensor& images, std::span<const Label> labels,
                                  std::span<const std::uint64_t> sample_ids, const RegularizerConfig& config,
                                  const AttentionTable* attention) {
    validate(config);
    const bool uses_behavior =
        config.kind == RegularizerKind::DELTA || config.kind == RegularizerKind::DELTA_NO_ATT;
    if (config.kind == RegularizerKind::DELTA && !attention) {
        throw ContractError("DELTA objective needs an attention table");
    }

    ObjectiveTerms out;
    std::vector<Tensor> penalties;
    if (uses_behavior && config.alpha != 0.0) {
        auto fwd = model.forward_with_taps(images);
        const auto source = model.source_feature_maps(images);
        const AttentionTable* table = config.kind == RegularizerKind::DELTA ? attention : nullptr;
        penalties.push_back(scale(
            behavioral_penalty(fwd.feature_maps, source, sample_ids, table, config.normalize_by_area), config.alpha));
        out.logits = fwd.logits;
    } else {
        out.logits = model.forward(images);
    }
    const Tensor ce = softmax_cross_entropy(out.logits, labels);
    out.empirical = ce.item();

    switch (config.kind) {
        case RegularizerKind::L2:
            if (config.alpha != 0.0) penalties.push_back(scale(l2_penalty(model), config.alpha));
            break;
        case RegularizerKind::L2SP:
            if (config.alpha != 0.0) penalties.push_back(scale(l2_sp_shared_penalty(model), config.alpha));
            if (config.beta != 0.0) penalties.push_back(scale(private_penalty(model), config.beta));
            break;
        case RegularizerKind::DELTA:
        case RegularizerKind::DELTA_NO_ATT:
            if (config.beta != 0.0) penalties.push_back(scale(private_penalty(model), config.beta));
            break;
        case RegularizerKind::L2FE:
            break;
    }
    if (penalties.empty()) {
        out.total = ce;
    } else {
        const Tensor reg = sum_terms(penalties);
        out.penalty = reg.item();
        out.total = add(ce, reg);
    }
    return out;
}

Tensor total_objective(const ConvNetModel& model, const Tensor& images, std::span<const Label> labels,
                       std::span<const std::uint64_t> sample_ids, const RegularizerConfig& config,
                       const AttentionTable* attention) {
    return evaluate_objective(model, images, labels, sample_ids, config, attention).total;
}

}  // namespace delta
