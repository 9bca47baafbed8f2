#include "delta/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "delta/checkpoint.hpp"
#include "delta/errors.hpp"
#include "json.hpp"

namespace delta {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::GlobalAvgPool: return "global-avg-pool";
        case LayerKind::Linear: return "linear";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (auto kind : {LayerKind::Conv, LayerKind::Relu, LayerKind::MaxPool, LayerKind::GlobalAvgPool,
                      LayerKind::Linear}) {
        if (to_string(kind) == name) return kind;
    }
    throw ConfigError("unknown layer kind \"" + name + "\"");
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding,
                          bool tap) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.tap = tap;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::max_pool(std::size_t size, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.pool_size = size;
    s.pool_stride = stride;
    return s;
}

LayerSpec LayerSpec::global_avg_pool() {
    LayerSpec s;
    s.kind = LayerKind::GlobalAvgPool;
    return s;
}

LayerSpec LayerSpec::linear(std::size_t out_features) {
    LayerSpec s;
    s.kind = LayerKind::Linear;
    s.out_features = out_features;
    return s;
}

std::string model_spec_to_json(const ModelSpec& spec) {
    nlohmann::json j;
    j["input"] = {spec.in_channels, spec.in_height, spec.in_width};
    j["layers"] = nlohmann::json::array();
    for (const auto& l : spec.layers) {
        nlohmann::json lj{{"kind", to_string(l.kind)}};
        switch (l.kind) {
            case LayerKind::Conv:
                lj["out_channels"] = l.out_channels;
                lj["kernel"] = l.kernel;
                lj["stride"] = l.stride;
                lj["padding"] = l.padding;
                lj["tap"] = l.tap;
                break;
            case LayerKind::MaxPool:
                lj["size"] = l.pool_size;
                lj["stride"] = l.pool_stride;
                break;
            case LayerKind::Linear: lj["out_features"] = l.out_features; break;
            default: break;
        }
        j["layers"].push_back(std::move(lj));
    }
    return j.dump();
}

ModelSpec model_spec_from_json(const std::string& text) {
    ModelSpec spec;
    try {
        const auto j = nlohmann::json::parse(text);
        const auto& in = j.at("input");
        spec.in_channels = in.at(0).get<std::size_t>();
        spec.in_height = in.at(1).get<std::size_t>();
        spec.in_width = in.at(2).get<std::size_t>();
        for (const auto& lj : j.at("layers")) {
            LayerSpec l;
            l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
            switch (l.kind) {
                case LayerKind::Conv:
                    l.out_channels = lj.at("out_channels").get<std::size_t>();
                    l.kernel = lj.value("kernel", std::size_t{3});
                    l.stride = lj.value("stride", std::size_t{1});
                    l.padding = lj.value("padding", std::size_t{0});
                    l.tap = lj.value("tap", false);
                    break;
                case LayerKind::MaxPool:
                    l.pool_size = lj.value("size", std::size_t{2});
                    l.pool_stride = lj.value("stride", std::size_t{2});
                    break;
                case LayerKind::Linear: l.out_features = lj.at("out_features").get<std::size_t>(); break;
                default: break;
            }
            spec.layers.push_back(l);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid model spec: ") + e.what());
    }
    return spec;
}

ModelSpec reference_model_spec(std::size_t channels, std::size_t size, std::size_t num_classes) {
    ModelSpec spec;
    spec.in_channels = channels;
    spec.in_height = size;
    spec.in_width = size;
    spec.layers = {
        LayerSpec::conv(8, 3, 1, 1),
        LayerSpec::relu(),
        LayerSpec::max_pool(),
        LayerSpec::conv(16, 3, 1, 1, true),
        LayerSpec::relu(),
        LayerSpec::max_pool(),
        LayerSpec::conv(16, 3, 1, 1, true),
        LayerSpec::relu(),
        LayerSpec::global_avg_pool(),
        LayerSpec::linear(num_classes),
    };
    return spec;
}

std::string param_name(std::size_t layer, const char* kind) {
    return "layer" + std::to_string(layer) + "." + kind;
}

// --- FeatureMapSet ---------------------------------------------------------

const Tensor& FeatureMapSet::activation(std::size_t layer) const {
    for (const auto& t : taps_) {
        if (t.layer == layer) return t.activation;
    }
    throw IndexError("no feature maps recorded for layer " + std::to_string(layer));
}

std::size_t FeatureMapSet::vector_length(std::size_t layer) const {
    const auto& a = activation(layer);
    return a.dim(2) * a.dim(3);
}

std::size_t FeatureMapSet::samples() const { return taps_.empty() ? 0 : taps_.front().activation.dim(0); }

std::span<const double> FeatureMapSet::vector(std::size_t layer, std::size_t sample, std::size_t filter) const {
    const auto& a = activation(layer);
    if (sample >= a.dim(0) || filter >= a.dim(1)) {
        throw IndexError("feature map (" + std::to_string(sample) + ", " + std::to_string(filter) +
                         ") out of range at layer " + std::to_string(layer));
    }
    const std::size_t area = a.dim(2) * a.dim(3);
    return a.data().subspan((sample * a.dim(1) + filter) * area, area);
}

Tensor FeatureMapSet::feature_map(std::size_t layer, std::size_t sample, std::size_t filter) const {
    return select_feature_map(activation(layer), sample, filter);
}

// --- ConvNetModel ----------------------------------------------------------

Tensor& ConvNetModel::param(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw IndexError("no parameter named " + name);
}

const Tensor& ConvNetModel::param(const std::string& name) const {
    return const_cast<ConvNetModel*>(this)->param(name);
}

bool ConvNetModel::has_param(const std::string& name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const auto& p) { return p.name == name; });
}

const std::vector<NamedTensor>& ConvNetModel::source() const {
    if (!source_) throw ContractError("model has no source snapshot; call replace_head first");
    return *source_;
}

const Tensor& ConvNetModel::source_param(const std::string& name) const {
    for (const auto& p : source()) {
        if (p.name == name) return p.value;
    }
    throw IndexError("no source parameter named " + name);
}

std::size_t ConvNetModel::head_layer() const {
    for (std::size_t l = spec_.layers.size(); l-- > 0;) {
        if (spec_.layers[l].kind == LayerKind::Linear) return l;
    }
    throw ConfigError("model has no linear classifier");
}

std::size_t ConvNetModel::num_classes() const { return spec_.layers[head_layer()].out_features; }

std::vector<std::size_t> ConvNetModel::tap_layers() const {
    std::vector<std::size_t> taps;
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
        if (spec_.layers[l].tap) taps.push_back(l);
    }
    return taps;
}

void ConvNetModel::set_taps(const std::vector<std::size_t>& conv_layers) {
    ModelSpec spec = spec_;
    for (auto& l : spec.layers) l.tap = false;
    for (auto l : conv_layers) {
        if (l >= spec.layers.size()) throw ConfigError("tap layer " + std::to_string(l) + " out of range");
        spec.layers[l].tap = true;
    }
    std::swap(spec_, spec);
    try {
        validate_and_index();
    } catch (...) {
        std::swap(spec_, spec);
        throw;
    }
}

void ConvNetModel::validate_and_index() {
    if (spec_.in_channels == 0 || spec_.in_height == 0 || spec_.in_width == 0) {
        throw ConfigError("model input extents must be positive");
    }
    if (spec_.layers.empty() || spec_.layers.back().kind != LayerKind::Linear) {
        throw ConfigError("model spec must end in a linear classifier");
    }
    layer_shapes_.clear();
    Shape shape{spec_.in_channels, spec_.in_height, spec_.in_width};
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
        const auto& layer = spec_.layers[l];
        const std::string where = "layer " + std::to_string(l) + " (" + to_string(layer.kind) + ")";
        if (layer.tap && layer.kind != LayerKind::Conv) throw ConfigError(where + ": taps are only allowed on conv layers");
        switch (layer.kind) {
            case LayerKind::Conv:
                if (shape.size() != 3) throw ConfigError(where + ": expects a (C, H, W) input");
                if (layer.out_channels == 0 || layer.kernel == 0) throw ConfigError(where + ": empty kernel");
                if (layer.tap && (l + 1 >= spec_.layers.size() || spec_.layers[l + 1].kind != LayerKind::Relu)) {
                    throw ConfigError(where + ": a tapped conv must be followed by relu");
                }
                try {
                    shape = {layer.out_channels, conv_output_extent(shape[1], layer.kernel, layer.stride, layer.padding),
                             conv_output_extent(shape[2], layer.kernel, layer.stride, layer.padding)};
                } catch (const ConfigError& e) {
                    throw ConfigError(where + ": " + e.what());
                }
                break;
            case LayerKind::Relu: break;
            case LayerKind::MaxPool:
                if (shape.size() != 3) throw ConfigError(where + ": expects a (C, H, W) input");
                if (layer.pool_size == 0 || layer.pool_stride == 0 || shape[1] < layer.pool_size ||
                    shape[2] < layer.pool_size) {
                    throw ConfigError(where + ": window does not fit " + shape_str(shape));
                }
                shape = {shape[0], (shape[1] - layer.pool_size) / layer.pool_stride + 1,
                         (shape[2] - layer.pool_size) / layer.pool_stride + 1};
                break;
            case LayerKind::GlobalAvgPool:
                if (shape.size() != 3) throw ConfigError(where + ": expects a (C, H, W) input");
                shape = {shape[0]};
                break;
            case LayerKind::Linear:
                if (layer.out_features == 0) throw ConfigError(where + ": needs out_features > 0");
                shape = {layer.out_features};
                break;
        }
        layer_shapes_.push_back(shape);
    }
    if (spec_.layers.back().out_features < 2) throw ConfigError("classifier needs at least 2 classes");
}

namespace {

void he_fill(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : t.data()) v = dist(rng);
}

std::size_t layer_fan_in(const ModelSpec& spec, const std::vector<Shape>& shapes, std::size_t layer) {
    const Shape input = layer == 0 ? Shape{spec.in_channels, spec.in_height, spec.in_width} : shapes[layer - 1];
    if (spec.layers[layer].kind == LayerKind::Conv) {
        return input[0] * spec.layers[layer].kernel * spec.layers[layer].kernel;
    }
    return shape_numel(input);
}

}  // namespace

ConvNetModel build_model(const ModelSpec& spec, std::uint64_t seed) {
    ConvNetModel model;
    model.spec_ = spec;
    model.validate_and_index();
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
        const auto& layer = spec.layers[l];
        const std::size_t fan_in = layer_fan_in(spec, model.layer_shapes_, l);
        Shape wshape;
        if (layer.kind == LayerKind::Conv) {
            wshape = {layer.out_channels, l == 0 ? spec.in_channels : model.layer_shapes_[l - 1][0], layer.kernel,
                      layer.kernel};
        } else if (layer.kind == LayerKind::Linear) {
            wshape = {layer.out_features, fan_in};
        } else {
            continue;
        }
        Tensor w = Tensor::zeros(wshape, true);
        he_fill(w, fan_in, rng);
        model.params_.push_back({param_name(l, "weight"), w});
        model.params_.push_back({param_name(l, "bias"), Tensor::zeros({wshape[0]}, true)});
    }
    const std::size_t head = model.head_layer();
    model.head_ = {param_name(head, "weight"), param_name(head, "bias")};
    return model;
}

ConvNetModel replace_head(const ConvNetModel& model, std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("replace_head: target task needs at least 2 classes");
    ConvNetModel out = model.clone();
    auto snapshot = std::make_shared<std::vector<NamedTensor>>();
    for (const auto& p : model.params_) {
        if (!model.is_head(p.name)) snapshot->push_back({p.name, p.value.clone()});
    }
    out.source_ = std::move(snapshot);

    const std::size_t head = out.head_layer();
    out.spec_.layers[head].out_features = num_classes;
    out.validate_and_index();
    const std::size_t fan_in = layer_fan_in(out.spec_, out.layer_shapes_, head);
    std::mt19937_64 rng(seed);
    Tensor w = Tensor::zeros({num_classes, fan_in}, true);
    he_fill(w, fan_in, rng);
    out.param(param_name(head, "weight")) = w;
    out.param(param_name(head, "bias")) = Tensor::zeros({num_classes}, true);
    out.head_ = {param_name(head, "weight"), param_name(head, "bias")};
    return out;
}

ConvNetModel ConvNetModel::clone() const {
    ConvNetModel out;
    out.spec_ = spec_;
    out.head_ = head_;
    out.source_ = source_;
    out.layer_shapes_ = layer_shapes_;
    for (const auto& p : params_) {
        Tensor copy = p.value.clone();
        copy.set_requires_grad(p.value.requires_grad());
        out.params_.push_back({p.name, copy});
    }
    return out;
}

namespace {

ConvKernel ablated_kernel(const Tensor& weight, const Tensor& bias, std::size_t filter, std::size_t stride,
                          std::size_t padding) {
    if (filter >= weight.dim(0)) {
        throw IndexError("filter " + std::to_string(filter) + " out of range for conv with " +
                         std::to_string(weight.dim(0)) + " filters");
    }
    Tensor w = weight.clone();
    Tensor b = bias.clone();
    const std::size_t slice = w.numel() / w.dim(0);
    std::fill_n(w.data().begin() + static_cast<std::ptrdiff_t>(filter * slice), slice, 0.0);
    b.data()[filter] = 0.0;
    return ConvKernel{w, b, stride, padding};
}

void check_batch(const ModelSpec& spec, const Tensor& batch) {
    const Shape want{spec.in_channels, spec.in_height, spec.in_width};
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != want) {
        throw ShapeError("batch shape " + shape_str(batch.shape()) + " does not match model input (B, " +
                         std::to_string(want[0]) + ", " + std::to_string(want[1]) + ", " + std::to_string(want[2]) +
                         ")");
    }
}

}  // namespace

Tensor ConvNetModel::run(const Tensor& input, std::size_t first, std::size_t end, bool use_source,
                         const FilterAblation* ablation, std::vector<FeatureMapSet::Tap>* taps) const {
    if (ablation) {
        if (ablation->layer >= spec_.layers.size() || spec_.layers[ablation->layer].kind != LayerKind::Conv) {
            throw IndexError("ablation target layer " + std::to_string(ablation->layer) + " is not a conv layer");
        }
        if (ablation->filter >= spec_.layers[ablation->layer].out_channels) {
            throw IndexError("filter " + std::to_string(ablation->filter) + " out of range for layer " +
                             std::to_string(ablation->layer));
        }
    }
    auto weight_of = [&](std::size_t l) -> const Tensor& {
        const auto name = param_name(l, "weight");
        return use_source && !is_head(name) ? source_param(name) : param(name);
    };
    auto bias_of = [&](std::size_t l) -> const Tensor& {
        const auto name = param_name(l, "bias");
        return use_source && !is_head(name) ? source_param(name) : param(name);
    };

    Tensor x = input;
    for (std::size_t l = first; l < end; ++l) {
        const auto& layer = spec_.layers[l];
        switch (layer.kind) {
            case LayerKind::Conv: {
                if (ablation && ablation->layer == l) {
                    x = conv2d(x, ablated_kernel(weight_of(l), bias_of(l), ablation->filter, layer.stride,
                                                 layer.padding));
                } else {
                    x = conv2d(x, ConvKernel{weight_of(l), bias_of(l), layer.stride, layer.padding});
                }
                break;
            }
            case LayerKind::Relu:
                x = relu(x);
                if (taps && l > 0 && spec_.layers[l - 1].tap) taps->push_back({l - 1, x});
                break;
            case LayerKind::MaxPool: x = max_pool2d(x, layer.pool_size, layer.pool_stride); break;
            case LayerKind::GlobalAvgPool: x = global_avg_pool(x); break;
            case LayerKind::Linear:
                if (x.rank() != 2) x = flatten(x);
                x = linear(x, weight_of(l), bias_of(l));
                break;
        }
    }
    return x;
}

Tensor ConvNetModel::forward(const Tensor& batch, const FilterAblation* ablation) const {
    check_batch(spec_, batch);
    return run(batch, 0, spec_.layers.size(), false, ablation, nullptr);
}

ForwardResult ConvNetModel::forward_with_taps(const Tensor& batch) const {
    check_batch(spec_, batch);
    std::vector<FeatureMapSet::Tap> taps;
    Tensor logits = run(batch, 0, spec_.layers.size(), false, nullptr, &taps);
    return {logits, FeatureMapSet(std::move(taps))};
}

FeatureMapSet ConvNetModel::source_feature_maps(const Tensor& batch) const {
    check_batch(spec_, batch);
    if (!source_) throw ContractError("source feature maps need a source snapshot");
    const auto taps_at = tap_layers();
    if (taps_at.empty()) return {};
    NoGradGuard no_grad;
    std::vector<FeatureMapSet::Tap> taps;
    run(batch, 0, taps_at.back() + 2, true, nullptr, &taps);
    return FeatureMapSet(std::move(taps));
}

std::vector<Tensor> ConvNetModel::layer_inputs(const Tensor& batch) const {
    check_batch(spec_, batch);
    NoGradGuard no_grad;
    std::vector<Tensor> inputs{batch};
    for (std::size_t l = 0; l + 1 < spec_.layers.size(); ++l) {
        inputs.push_back(run(inputs.back(), l, l + 1, false, nullptr, nullptr));
    }
    return inputs;
}

Tensor ConvNetModel::forward_from(const Tensor& activation, std::size_t first, const FilterAblation* ablation) const {
    if (first >= spec_.layers.size()) throw IndexError("forward_from: layer " + std::to_string(first) + " out of range");
    return run(activation, first, spec_.layers.size(), false, ablation, nullptr);
}

std::uint64_t ConvNetModel::fingerprint() const {
    const auto bytes = serialize_checkpoint(*this);
    return fnv1a(bytes);
}

}  // namespace delta
