#include "delta/attention_table.hpp"

#include <numeric>
#include <string>

#include "delta/binary_io.hpp"
#include "delta/errors.hpp"

namespace delta {

AttentionTable::AttentionTable(Metadata meta, std::vector<std::size_t> taps, std::vector<std::size_t> filters,
                               std::vector<std::uint64_t> sample_ids, std::vector<double> weights)
    : meta_(meta), taps_(std::move(taps)), filters_(std::move(filters)), ids_(std::move(sample_ids)),
      weights_(std::move(weights)) {
    if (taps_.size() != filters_.size()) throw ValidationError("attention table: taps and filter counts differ");
    for (auto n : filters_) {
        offsets_.push_back(row_width_);
        row_width_ += n;
    }
    if (weights_.size() != ids_.size() * row_width_) {
        throw ValidationError("attention table: weight count does not match rows x width");
    }
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!index_.emplace(ids_[i], i).second) {
            throw ValidationError("attention table: duplicate sample id " + std::to_string(ids_[i]));
        }
    }
}

std::span<const double> AttentionTable::row(std::uint64_t sample_id, std::size_t tap) const {
    const auto it = index_.find(sample_id);
    if (it == index_.end()) throw IndexError("attention table has no entry for sample " + std::to_string(sample_id));
    for (std::size_t t = 0; t < taps_.size(); ++t) {
        if (taps_[t] == tap) {
            return std::span<const double>(weights_).subspan(it->second * row_width_ + offsets_[t], filters_[t]);
        }
    }
    throw IndexError("attention table has no tap at layer " + std::to_string(tap));
}

bool AttentionTable::operator==(const AttentionTable& other) const {
    return meta_ == other.meta_ && taps_ == other.taps_ && filters_ == other.filters_ && ids_ == other.ids_ &&
           weights_ == other.weights_;
}

std::vector<std::uint8_t> serialize_attention(const AttentionTable& table) {
    ByteWriter w;
    w.put_magic("DATT");
    w.put<std::uint32_t>(kAttentionVersion);
    w.put<std::uint64_t>(table.metadata().dataset_hash);
    w.put<std::uint64_t>(table.metadata().source_hash);
    w.put<std::uint64_t>(table.metadata().fe_head_hash);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(table.taps().size()));
    for (std::size_t t = 0; t < table.taps().size(); ++t) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(table.taps()[t]));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(table.filters()[t]));
    }
    w.put<std::uint64_t>(table.rows());
    for (std::size_t i = 0; i < table.rows(); ++i) {
        w.put<std::uint64_t>(table.sample_ids()[i]);
        w.put_doubles(std::span<const double>(table.weights()).subspan(i * table.row_width(), table.row_width()));
    }
    return w.release();
}

AttentionTable parse_attention(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("DATT");
    const auto version_at = r.offset();
    if (r.get<std::uint32_t>("version") != kAttentionVersion) {
        throw ParseError("unsupported attention cache version", version_at);
    }
    AttentionTable::Metadata meta;
    meta.dataset_hash = r.get<std::uint64_t>("dataset hash");
    meta.source_hash = r.get<std::uint64_t>("source hash");
    meta.fe_head_hash = r.get<std::uint64_t>("fe head hash");
    const auto n_taps = r.get<std::uint32_t>("tap count");
    std::vector<std::size_t> taps, filters;
    for (std::uint32_t t = 0; t < n_taps; ++t) {
        taps.push_back(r.get<std::uint32_t>("tap layer"));
        filters.push_back(r.get<std::uint32_t>("tap filters"));
    }
    const std::size_t width = std::accumulate(filters.begin(), filters.end(), std::size_t{0});
    const auto rows = r.get<std::uint64_t>("row count");
    if (rows > r.remaining() / (sizeof(std::uint64_t) + width * sizeof(double))) {
        throw ParseError("row count exceeds payload", r.offset());
    }
    std::vector<std::uint64_t> ids;
    std::vector<double> weights;
    weights.reserve(rows * width);
    for (std::uint64_t i = 0; i < rows; ++i) {
        ids.push_back(r.get<std::uint64_t>("sample id"));
        auto row = r.get_doubles(width, "weight row");
        weights.insert(weights.end(), row.begin(), row.end());
    }
    r.expect_end();
    return AttentionTable(meta, std::move(taps), std::move(filters), std::move(ids), std::move(weights));
}

void save_attention(const AttentionTable& table, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_attention(table));
}

AttentionTable load_attention(const std::filesystem::path& path) { return parse_attention(read_file_bytes(path)); }

}  // namespace delta
