#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "delta/data.hpp"
#include "delta/model.hpp"
#include "delta/tensor.hpp"

namespace delta {

/// (a - min) / (max - min) over the whole 2-D map; a constant map becomes all zeros.
Tensor normalize_activation_map(const Tensor& map);

/// Stage label per conv layer index. Layers without an entry are labelled "layer<idx>".
using StageGrouping = std::map<std::size_t, std::string>;

struct FilterDistance {
    std::size_t layer = 0;
    std::size_t filter = 0;
    std::string group;
    double distance = 0.0;
};

struct DistanceReport {
    std::vector<FilterDistance> filters;                 // layer-major, filter order
    std::map<std::string, std::vector<double>> groups;   // each sorted descending
};

/// Euclidean distance between the flattened weight slices of every conv filter
/// of `before` and `after`. Throws ContractError when the layouts differ.
DistanceReport param_distance_report(const ConvNetModel& before, const ConvNetModel& after,
                                     const StageGrouping& grouping = {});
/// Same, measured from the model's own ω* snapshot.
DistanceReport param_distance_report(const ConvNetModel& tuned, const StageGrouping& grouping = {});

/// Fraction of filters whose distance in `a` exceeds the distance of the same filter in `b`.
double larger_distance_fraction(const DistanceReport& a, const DistanceReport& b);

/// `layer,filter,group,distance` rows.
std::string format_distance_csv(const DistanceReport& report);

/// Normalized activation map of every filter at `tap` for one (already prepared) view,
/// as CSV rows `filter,y,x,value`.
std::string activation_maps_csv(const ConvNetModel& model, const Image& view, std::size_t tap);

}  // namespace delta
