#include "delta/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "delta/errors.hpp"
#include "delta/trainer.hpp"

namespace delta {

Tensor normalize_activation_map(const Tensor& map) {
    if (map.rank() != 2) throw ShapeError("activation map must be 2-D, got " + shape_str(map.shape()));
    const auto v = map.data();
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double min = *lo, range = *hi - *lo;
    std::vector<double> out(v.size(), 0.0);
    if (range > 0.0) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - min) / range;
    }
    return Tensor::from_data(map.shape(), std::move(out));
}

namespace {

using WeightLookup = std::function<const Tensor&(const std::string&)>;

DistanceReport distances(const ConvNetModel& layout, const WeightLookup& before, const WeightLookup& after,
                         const StageGrouping& grouping) {
    DistanceReport report;
    const auto& layers = layout.spec().layers;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].kind != LayerKind::Conv) continue;
        const std::string name = param_name(l, "weight");
        const Tensor& a = before(name);
        const Tensor& b = after(name);
        if (a.shape() != b.shape()) {
            throw ContractError("layout mismatch at " + name + ": " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
        }
        const auto it = grouping.find(l);
        const std::string group = it != grouping.end() ? it->second : "layer" + std::to_string(l);
        const std::size_t filters = a.dim(0), per = a.numel() / filters;
        for (std::size_t j = 0; j < filters; ++j) {
            double sq = 0.0;
            for (std::size_t k = 0; k < per; ++k) {
                const double d = b.data()[j * per + k] - a.data()[j * per + k];
                sq += d * d;
            }
            report.filters.push_back({l, j, group, std::sqrt(sq)});
            report.groups[group].push_back(std::sqrt(sq));
        }
    }
    for (auto& [_, values] : report.groups) std::sort(values.begin(), values.end(), std::greater<>());
    return report;
}

}  // namespace

DistanceReport param_distance_report(const ConvNetModel& before, const ConvNetModel& after,
                                     const StageGrouping& grouping) {
    if (before.spec().layers.size() != after.spec().layers.size()) {
        throw ContractError("models have different layer counts");
    }
    for (std::size_t l = 0; l < before.spec().layers.size(); ++l) {
        if (before.spec().layers[l].kind != after.spec().layers[l].kind) {
            throw ContractError("models differ in the kind of layer " + std::to_string(l));
        }
    }
    return distances(
        before, [&](const std::string& n) -> const Tensor& { return before.param(n); },
        [&](const std::string& n) -> const Tensor& { return after.param(n); }, grouping);
}

DistanceReport param_distance_report(const ConvNetModel& tuned, const StageGrouping& grouping) {
    return distances(
        tuned, [&](const std::string& n) -> const Tensor& { return tuned.source_param(n); },
        [&](const std::string& n) -> const Tensor& { return tuned.param(n); }, grouping);
}

double larger_distance_fraction(const DistanceReport& a, const DistanceReport& b) {
    if (a.filters.size() != b.filters.size() || a.filters.empty()) {
        throw ContractError("distance reports cover different filters");
    }
    std::size_t larger = 0;
    for (std::size_t i = 0; i < a.filters.size(); ++i) {
        if (a.filters[i].layer != b.filters[i].layer || a.filters[i].filter != b.filters[i].filter) {
            throw ContractError("distance reports cover different filters");
        }
        larger += a.filters[i].distance > b.filters[i].distance;
    }
    return static_cast<double>(larger) / static_cast<double>(a.filters.size());
}

std::string format_distance_csv(const DistanceReport& report) {
    std::string out = "layer,filter,group,distance\n";
    for (const auto& f : report.filters) {
        out += std::to_string(f.layer) + "," + std::to_string(f.filter) + "," + f.group + "," +
               format_real(f.distance) + "\n";
    }
    return out;
}

std::string activation_maps_csv(const ConvNetModel& model, const Image& view, std::size_t tap) {
    NoGradGuard no_grad;
    const Tensor x = stack_images(std::span<const Image>(&view, 1));
    const auto maps = model.forward_with_taps(x).feature_maps;
    const Tensor& act = maps.activation(tap);
    const std::size_t h = act.dim(2), w = act.dim(3);
    std::string out = "filter,y,x,value\n";
    for (std::size_t j = 0; j < act.dim(1); ++j) {
        const auto v = maps.vector(tap, 0, j);
        const Tensor norm = normalize_activation_map(Tensor::from_data({h, w}, {v.begin(), v.end()}));
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xi = 0; xi < w; ++xi) {
                out += std::to_string(j) + "," + std::to_string(y) + "," + std::to_string(xi) + "," +
                       format_real(norm.data()[y * w + xi]) + "\n";
            }
    }
    return out;
}

}  // namespace delta
