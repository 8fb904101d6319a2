#ifndef SYMBOLKIT_DETAIL_BINARY_HPP
#define SYMBOLKIT_DETAIL_BINARY_HPP

#include "../error.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace symbolkit::detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), as used by zlib and PNG.
class Crc32 {
public:
    void update(const void* data, std::size_t size) {
        const auto* p = static_cast<const unsigned char*>(data);
        std::uint32_t c = state_;
        for (std::size_t i = 0; i < size; ++i) {
            c = table()[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
        }
        state_ = c;
    }

    std::uint32_t value() const { return state_ ^ 0xFFFFFFFFu; }

    static std::uint32_t of(const void* data, std::size_t size) {
        Crc32 crc;
        crc.update(data, size);
        return crc.value();
    }

private:
    static const std::array<std::uint32_t, 256>& table() {
        static const auto t = [] {
            std::array<std::uint32_t, 256> out{};
            for (std::uint32_t n = 0; n < 256; ++n) {
                std::uint32_t c = n;
                for (int k = 0; k < 8; ++k) {
                    c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
                }
                out[n] = c;
            }
            return out;
        }();
        return t;
    }

    std::uint32_t state_ = 0xFFFFFFFFu;
};

template <typename T>
T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return value;
    }
}

/// Appends little-endian encodings of trivially copyable scalars to a byte buffer.
class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        const T le = byteswap_if_big(value);
        const auto* p = reinterpret_cast<const unsigned char*>(&le);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }

    template <typename T>
    void put_array(std::span<const T> values) {
        if constexpr (std::endian::native == std::endian::little) {
            const auto* p = reinterpret_cast<const unsigned char*>(values.data());
            bytes_.insert(bytes_.end(), p, p + values.size_bytes());
        } else {
            for (const T& v : values) {
                put(v);
            }
        }
    }

    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const std::vector<unsigned char>& bytes() const { return bytes_; }
    std::vector<unsigned char>& bytes() { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
public:
    ByteReader(std::span<const unsigned char> bytes, std::string what)
        : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get() {
        require(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return byteswap_if_big(value);
    }

    template <typename T>
    std::vector<T> get_array(std::size_t count) {
        if (count > remaining() / sizeof(T)) {
            throw FormatError(what_ + ": truncated (need " + std::to_string(count * sizeof(T)) +
                              " bytes, have " + std::to_string(remaining()) + ")");
        }
        std::vector<T> out(count);
        std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
        pos_ += count * sizeof(T);
        if constexpr (std::endian::native == std::endian::big) {
            for (auto& v : out) {
                v = byteswap_if_big(v);
            }
        }
        return out;
    }

    std::string get_string(std::size_t size) {
        require(size);
        std::string out(reinterpret_cast<const char*>(bytes_.data() + pos_), size);
        pos_ += size;
        return out;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    void require(std::size_t n) const {
        if (n > remaining()) {
            throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes, have " +
                              std::to_string(remaining()) + ")");
        }
    }

    std::span<const unsigned char> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> out(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size))) {
        throw FormatError("cannot read " + path.string());
    }
    return out;
}

inline std::string read_text(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("write failed for " + path.string());
    }
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
    write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

/// Little-endian float32 blob helpers.
inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
    ByteWriter w;
    w.put_array(values);
    write_file(path, w.bytes());
}

inline std::vector<float> read_f32(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() % sizeof(float) != 0) {
        throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of 4");
    }
    ByteReader r(bytes, path.string());
    return r.get_array<float>(bytes.size() / sizeof(float));
}

inline void write_i32(const std::filesystem::path& path, std::span<const std::int32_t> values) {
    ByteWriter w;
    w.put_array(values);
    write_file(path, w.bytes());
}

inline std::vector<std::int32_t> read_i32(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() % sizeof(std::int32_t) != 0) {
        throw FormatError(path.string() + ": size is not a multiple of 4");
    }
    ByteReader r(bytes, path.string());
    return r.get_array<std::int32_t>(bytes.size() / sizeof(std::int32_t));
}

/// 64-bit FNV-1a, used for content addressing (not for integrity).
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

} // namespace symbolkit::detail

#endif
