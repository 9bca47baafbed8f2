#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "delta/ops.hpp"
#include "delta/tensor.hpp"

namespace delta {

enum class LayerKind { Conv, Relu, MaxPool, GlobalAvgPool, Linear };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// One layer of a sequential network. Only the fields relevant to `kind` are read.
///
/// `tap` marks a conv layer whose post-ReLU output is a regularized feature
/// map; the layer immediately after a tapped conv must be a ReLU.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t out_channels = 0;  // conv
    std::size_t kernel = 3;        // conv
    std::size_t stride = 1;        // conv
    std::size_t padding = 0;       // conv
    std::size_t pool_size = 2;     // maxpool
    std::size_t pool_stride = 2;   // maxpool
    std::size_t out_features = 0;  // linear
    bool tap = false;

    static LayerSpec conv(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0, bool tap = false);
    static LayerSpec relu();
    static LayerSpec max_pool(std::size_t size = 2, std::size_t stride = 2);
    static LayerSpec global_avg_pool();
    static LayerSpec linear(std::size_t out_features);

    bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
    std::size_t in_channels = 1;
    std::size_t in_height = 0;
    std::size_t in_width = 0;
    std::vector<LayerSpec> layers;

    bool operator==(const ModelSpec&) const = default;
};

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

/// Desk-scale reference network: three 3x3 convs (tapping the second and third),
/// max pooling after the first two, global average pooling and a linear classifier.
ModelSpec reference_model_spec(std::size_t channels, std::size_t size, std::size_t num_classes);

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Zeroes filter `filter` of conv layer `layer`: its outgoing weight slice and its bias.
struct FilterAblation {
    std::size_t layer = 0;
    std::size_t filter = 0;
};

/// Post-ReLU activations of the tapped conv layers for one batch.
///
/// FM_j of sample i at a tap is channel j of the (B, N, h, w) activation,
/// flattened row-major to a vector of length h*w.
class FeatureMapSet {
public:
    struct Tap {
        std::size_t layer;
        Tensor activation;
    };

    FeatureMapSet() = default;
    explicit FeatureMapSet(std::vector<Tap> taps) : taps_(std::move(taps)) {}

    const std::vector<Tap>& taps() const { return taps_; }
    const Tensor& activation(std::size_t layer) const;
    std::size_t filters(std::size_t layer) const { return activation(layer).dim(1); }
    std::size_t vector_length(std::size_t layer) const;
    std::size_t samples() const;

    /// Read-only view of FM_j for `sample` at `layer`.
    std::span<const double> vector(std::size_t layer, std::size_t sample, std::size_t filter) const;
    /// The same vector as a differentiable tensor.
    Tensor feature_map(std::size_t layer, std::size_t sample, std::size_t filter) const;

private:
    std::vector<Tap> taps_;
};

struct ForwardResult {
    Tensor logits;
    FeatureMapSet feature_maps;
};

/// Sequential CNN with a parameter store ω, an optional frozen source
/// snapshot ω* and a head descriptor (the parameters of the final linear layer).
///
/// Copies share parameter tensors; use `clone()` for an independent model. The
/// snapshot is immutable and shared between clones.
class ConvNetModel {
public:
    ConvNetModel() = default;

    const ModelSpec& spec() const { return spec_; }
    std::vector<NamedTensor>& parameters() { return params_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    bool has_param(const std::string& name) const;

    /// Names of the parameters that have no counterpart in ω*.
    const std::set<std::string>& head_names() const { return head_; }
    bool is_head(const std::string& name) const { return head_.count(name) > 0; }

    bool has_source() const { return source_ != nullptr; }
    /// ω*: every non-head parameter as it was at transfer time.
    const std::vector<NamedTensor>& source() const;
    const Tensor& source_param(const std::string& name) const;

    std::size_t num_classes() const;
    std::size_t head_layer() const;
    std::vector<std::size_t> tap_layers() const;
    /// Re-declares which conv layers are tapped.
    void set_taps(const std::vector<std::size_t>& conv_layers);
    /// Per-sample (C, H, W) or (F) output shape of each layer.
    const std::vector<Shape>& layer_shapes() const { return layer_shapes_; }

    ConvNetModel clone() const;

    Tensor forward(const Tensor& batch, const FilterAblation* ablation = nullptr) const;
    ForwardResult forward_with_taps(const Tensor& batch) const;
    /// Tap activations under ω* (no graph); runs only as far as the last tap.
    FeatureMapSet source_feature_maps(const Tensor& batch) const;

    /// Input of every layer for `batch` (element i feeds layer i), without graph.
    std::vector<Tensor> layer_inputs(const Tensor& batch) const;
    /// Runs layers [first, end) starting from `activation`, the input of layer `first`.
    Tensor forward_from(const Tensor& activation, std::size_t first, const FilterAblation* ablation = nullptr) const;

    /// FNV-1a over spec and parameter values (head flags and snapshot included).
    std::uint64_t fingerprint() const;

    friend ConvNetModel build_model(const ModelSpec& spec, std::uint64_t seed);
    friend ConvNetModel replace_head(const ConvNetModel& model, std::size_t num_classes, std::uint64_t seed);
    friend std::vector<std::uint8_t> serialize_checkpoint(const ConvNetModel& model);
    friend ConvNetModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);

private:
    Tensor run(const Tensor& input, std::size_t first, std::size_t end, bool use_source,
               const FilterAblation* ablation, std::vector<FeatureMapSet::Tap>* taps) const;
    void validate_and_index();

    ModelSpec spec_;
    std::vector<NamedTensor> params_;
    std::set<std::string> head_;
    std::shared_ptr<const std::vector<NamedTensor>> source_;
    std::vector<Shape> layer_shapes_;
};

/// Validates the layer chain and draws He-scaled normal weights (std sqrt(2 / fan_in)),
/// zero biases. Deterministic in `seed`.
ConvNetModel build_model(const ModelSpec& spec, std::uint64_t seed);

/// Snapshots the current non-head parameters as ω*, resizes the final linear
/// layer to `num_classes` and re-initializes it. Throws ConfigError for fewer than 2 classes.
ConvNetModel replace_head(const ConvNetModel& model, std::size_t num_classes, std::uint64_t seed);

std::string param_name(std::size_t layer, const char* kind);

}  // namespace delta
