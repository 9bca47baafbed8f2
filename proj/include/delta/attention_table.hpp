#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

namespace delta {

/// Per-sample, per-filter attention weights, frozen before fine-tuning.
///
/// Each row belongs to one training sample (by id) and concatenates one
/// softmax-normalized block of `filters[t]` weights per tap `taps[t]`.
class AttentionTable {
public:
    struct Metadata {
        std::uint64_t dataset_hash = 0;
        std::uint64_t source_hash = 0;   // fingerprint of the pretrained source model
        std::uint64_t fe_head_hash = 0;  // fingerprint of the frozen-feature model used for ablation
        bool operator==(const Metadata&) const = default;
    };

    AttentionTable() = default;
    AttentionTable(Metadata meta, std::vector<std::size_t> taps, std::vector<std::size_t> filters,
                   std::vector<std::uint64_t> sample_ids, std::vector<double> weights);

    const Metadata& metadata() const { return meta_; }
    const std::vector<std::size_t>& taps() const { return taps_; }
    const std::vector<std::size_t>& filters() const { return filters_; }
    const std::vector<std::uint64_t>& sample_ids() const { return ids_; }
    const std::vector<double>& weights() const { return weights_; }
    std::size_t row_width() const { return row_width_; }
    std::size_t rows() const { return ids_.size(); }

    bool contains(std::uint64_t sample_id) const { return index_.count(sample_id) > 0; }
    /// Weights of `sample_id` at tap layer `tap`. Throws IndexError when absent.
    std::span<const double> row(std::uint64_t sample_id, std::size_t tap) const;

    bool operator==(const AttentionTable& other) const;

private:
    Metadata meta_;
    std::vector<std::size_t> taps_;
    std::vector<std::size_t> filters_;
    std::vector<std::size_t> offsets_;
    std::vector<std::uint64_t> ids_;
    std::vector<double> weights_;
    std::size_t row_width_ = 0;
    std::unordered_map<std::uint64_t, std::size_t> index_;
};

// Attention cache, little-endian:
//   "DATT"  u32 version(=1)
//   u64 dataset_hash  u64 source_hash  u64 fe_head_hash
//   u32 n_taps, then per tap: u32 layer, u32 filters
//   u64 n_samples, then per sample: u64 id, f64 weights[sum of filters]
inline constexpr std::uint32_t kAttentionVersion = 1;

std::vector<std::uint8_t> serialize_attention(const AttentionTable& table);
AttentionTable parse_attention(std::span<const std::uint8_t> bytes);
void save_attention(const AttentionTable& table, const std::filesystem::path& path);
AttentionTable load_attention(const std::filesystem::path& path);

}  // namespace delta
