#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mael {

// Byte strings are carried in std::string, the usual idiom for bencoded data.
using bytes = std::string;
using bytes_view = std::string_view;

// Base for every error raised by the library. Each module instantiates it with
// its own code enum so callers can switch on the failure kind.
template <class Code>
class coded_error : public std::runtime_error {
public:
    coded_error(Code code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

using sha1_digest = std::array<std::uint8_t, 20>;

sha1_digest sha1(bytes_view data);
bytes sha1_bytes(bytes_view data);

std::string to_hex(bytes_view data, bool upper = true);
// Accepts either case. Returns nullopt on odd length or a non-hex character.
std::optional<bytes> from_hex(std::string_view hex);

// RFC 4648 base32 (the alphabet magnet links use); case-insensitive, no padding.
std::optional<bytes> from_base32(std::string_view text);
std::string to_base32(bytes_view data);

std::string percent_decode(std::string_view in);
std::string percent_encode(std::string_view in);

}  // namespace mael

namespace mael {

// 20-byte identifiers (infohashes, DHT node ids). The tag keeps the two
// domains from mixing while sharing the representation.
template <class Tag>
struct id20 {
    std::array<std::uint8_t, 20> data{};

    static id20 from_bytes(bytes_view raw)
    {
        if (raw.size() != 20) throw std::invalid_argument("id20 requires exactly 20 bytes");
        id20 out;
        for (std::size_t i = 0; i < 20; ++i) out.data[i] = static_cast<std::uint8_t>(raw[i]);
        return out;
    }

    static std::optional<id20> from_hex(std::string_view hex)
    {
        auto raw = mael::from_hex(hex);
        if (!raw || raw->size() != 20) return std::nullopt;
        return from_bytes(*raw);
    }

    bytes to_bytes() const { return bytes(reinterpret_cast<const char*>(data.data()), data.size()); }
    std::string hex() const { return to_hex(to_bytes()); }

    friend auto operator<=>(const id20&, const id20&) = default;
};

struct infohash_tag {};
using infohash = id20<infohash_tag>;

}  // namespace mael
