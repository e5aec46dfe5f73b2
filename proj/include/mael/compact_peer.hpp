#pragma once

#include "mael/common.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>

namespace mael::dht {

enum class peer_errc { wrong_length, invalid_peer };
using peer_error = coded_error<peer_errc>;

// IPv4 address and port; 6 bytes on the wire, port big-endian.
struct compact_peer {
    std::array<std::uint8_t, 4> ip{};
    std::uint16_t port = 0;

    static constexpr std::size_t wire_size = 6;

    bytes encode() const;
    static compact_peer decode(bytes_view raw);

    std::uint32_t ip_u32() const;
    static compact_peer from_u32(std::uint32_t ip, std::uint16_t port);

    std::string to_string() const;  // "a.b.c.d:port"
    static std::optional<compact_peer> parse(std::string_view text);

    friend auto operator<=>(const compact_peer&, const compact_peer&) = default;
};

}  // namespace mael::dht
