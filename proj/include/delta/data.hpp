#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "delta/ops.hpp"
#include "delta/tensor.hpp"

namespace delta {

/// C x H x W image, row-major per channel.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;

    double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

struct Sample {
    Image image;
    Label label = 0;
    std::uint64_t id = 0;  // position in the originally loaded dataset; stable across subsets
};

enum class Split { Train, Test };

class Dataset {
public:
    Dataset() = default;
    Dataset(std::vector<Sample> samples, std::size_t num_classes, Split split);

    const std::vector<Sample>& samples() const { return samples_; }
    const Sample& operator[](std::size_t i) const { return samples_[i]; }
    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    std::size_t num_classes() const { return num_classes_; }
    Split split() const { return split_; }
    /// FNV-1a over the DIMG encoding: covers class count, labels, extents and pixels.
    std::uint64_t hash() const { return hash_; }

    std::size_t channels() const;
    std::size_t height() const;
    std::size_t width() const;
    std::vector<std::size_t> class_counts() const;
    std::vector<double> channel_mean() const;

    /// Samples at `indices`, keeping their ids.
    Dataset subset(std::span<const std::size_t> indices) const;

private:
    std::vector<Sample> samples_;
    std::size_t num_classes_ = 0;
    Split split_ = Split::Train;
    std::uint64_t hash_ = 0;
};

// DIMG container, little-endian:
//   "DIMG"  u32 version(=1)  u32 num_classes  u32 sample_count
//   per sample: u32 label, u32 C, u32 H, u32 W, f64 pixels[C*H*W]
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(std::span<const std::uint8_t> bytes, Split split = Split::Train);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

/// Loads a DIMG file, or a directory tree root/<class>/<sample>.dimg in which each
/// file holds exactly one sample. Class directories and files are visited in
/// lexicographic order; the i-th class directory is label i and the label stored
/// in each file must agree (ValidationError otherwise).
Dataset load_dataset(const std::filesystem::path& path, Split split = Split::Train);

/// Parameters of the procedural transfer task.
///
/// Every class is a pair of oriented Gabor textures drawn from one shared
/// primitive bank; source and target classes use disjoint pairs, so the two
/// tasks share low-level statistics but not labels. `seed` fixes the class
/// definitions, `sample_stream` selects an independent set of draws from the
/// same classes (use a different stream for a test split).
struct SyntheticSpec {
    std::uint64_t seed = 1;
    std::uint64_t sample_stream = 0;
    std::size_t source_classes = 8;
    std::size_t target_classes = 5;
    std::size_t per_class = 20;
    std::size_t target_per_class = 0;  // 0 means per_class
    std::size_t size = 18;
    std::size_t channels = 3;
    double noise = 0.08;
};

std::pair<Dataset, Dataset> make_synthetic_transfer_pair(const SyntheticSpec& spec);

struct AugmentSpec {
    std::optional<std::size_t> resize_shorter;
    std::size_t crop = 0;
    bool mirror = true;
    std::vector<double> mean;  // per channel; empty means no subtraction
};

/// Bilinear resize with half-pixel centers (edge-clamped).
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
/// Scales so that the shorter edge equals `shorter`, keeping the aspect ratio (rounded).
Image resize_shorter_edge(const Image& image, std::size_t shorter);
Image crop_image(const Image& image, std::size_t top, std::size_t left, std::size_t height, std::size_t width);
Image center_crop(const Image& image, std::size_t size);
Image mirror_horizontal(const Image& image);
Image subtract_mean(const Image& image, std::span<const double> mean);

/// Optional resize, uniform random crop, mirror with probability 1/2, mean subtraction.
Image augment(const Image& image, const AugmentSpec& spec, std::mt19937_64& rng);
/// Deterministic evaluation view: optional resize, center crop (skipped when crop is 0), mean subtraction.
Image eval_view(const Image& image, const AugmentSpec& spec);
std::vector<Image> eval_views(const Dataset& data, const AugmentSpec& spec);
/// Corners (top-left, top-right, bottom-left, bottom-right), center, then the mirror of each.
std::array<Image, 10> ten_crop(const Image& image, std::size_t crop);
/// ten_crop applied after the optional resize, each crop mean-subtracted.
std::array<Image, 10> ten_crop_views(const Image& image, const AugmentSpec& spec);

/// Stacks equally sized images into a (B, C, H, W) tensor.
Tensor stack_images(std::span<const Image> images);

}  // namespace delta
