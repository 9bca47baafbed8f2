#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "delta/errors.hpp"

namespace delta {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

/// FNV-1a, 64-bit.
class Fnv1a {
public:
    void update(const void* bytes, std::size_t size) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    template <typename T>
    void update_value(const T& value) {
        update(&value, sizeof(T));
    }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

/// Little-endian append-only buffer.
class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        const auto offset = buffer_.size();
        buffer_.resize(offset + sizeof(T));
        std::memcpy(buffer_.data() + offset, &value, sizeof(T));
    }
    void put_bytes(const void* data, std::size_t size) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buffer_.insert(buffer_.end(), p, p + size);
    }
    void put_magic(std::string_view magic) { put_bytes(magic.data(), magic.size()); }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    void put_doubles(std::span<const double> values) { put_bytes(values.data(), values.size_bytes()); }

    const std::vector<std::uint8_t>& bytes() const { return buffer_; }
    std::vector<std::uint8_t> release() { return std::move(buffer_); }

private:
    std::vector<std::uint8_t> buffer_;
};

/// Bounds-checked reader; every failure reports the offending offset.
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        require(sizeof(T), what);
        T value;
        std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }
    void expect_magic(std::string_view magic) {
        require(magic.size(), "magic");
        if (std::memcmp(bytes_.data() + offset_, magic.data(), magic.size()) != 0) {
            throw ParseError("bad magic, expected \"" + std::string(magic) + "\"", offset_);
        }
        offset_ += magic.size();
    }
    std::string get_string(const char* what) {
        const auto size = get<std::uint32_t>(what);
        require(size, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), size);
        offset_ += size;
        return s;
    }
    std::vector<double> get_doubles(std::size_t count, const char* what) {
        if (count > remaining() / sizeof(double)) {
            throw ParseError(std::string("truncated ") + what, offset_);
        }
        std::vector<double> values(count);
        std::memcpy(values.data(), bytes_.data() + offset_, count * sizeof(double));
        offset_ += count * sizeof(double);
        return values;
    }
    void expect_end() const {
        if (offset_ != bytes_.size()) throw ParseError("trailing bytes", offset_);
    }

    std::size_t offset() const { return offset_; }
    std::size_t remaining() const { return bytes_.size() - offset_; }

private:
    void require(std::size_t size, const char* what) const {
        if (size > remaining()) throw ParseError(std::string("truncated ") + what, offset_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace delta
