#pragma once

#include "mael/bencode.hpp"
#include "mael/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mael::torrent {

enum class errc {
    malformed_input,
    missing_field,
    bad_pieces,
    empty_input,
    bad_piece_length,
    not_magnet,
    bad_infohash,
    missing_xt,
};

using error = coded_error<errc>;

inline constexpr std::int64_t default_piece_length = 16 * 1024;
inline constexpr std::int64_t min_piece_length = 16 * 1024;
inline constexpr std::int64_t max_piece_length = 4 * 1024 * 1024;

struct file_entry {
    std::vector<std::string> path;
    std::int64_t length = 0;

    std::string joined() const;  // components joined with '/'
    friend bool operator==(const file_entry&, const file_entry&) = default;
};

struct info_dict {
    std::string name;
    std::int64_t piece_length = 0;
    bytes pieces;  // concatenated 20-byte SHA-1 digests
    // Multi-file layout; empty for single-file torrents.
    std::vector<file_entry> files;
    // Single-file layout; set iff `files` is empty.
    std::optional<std::int64_t> length;
    // Info keys this parser does not interpret, kept verbatim.
    bencode::dict extra;

    bool single_file() const { return length.has_value(); }
    std::int64_t total_length() const;
    std::size_t piece_count() const { return pieces.size() / 20; }
    bytes_view piece_hash(std::size_t index) const;
    std::int64_t piece_size(std::size_t index) const;
    // Uniform view: single-file torrents yield one entry whose path is {name}.
    std::vector<file_entry> file_list() const;

    bencode::value to_bencode() const;

    friend bool operator==(const info_dict&, const info_dict&) = default;
};

struct torrent_meta {
    info_dict info;
    std::vector<std::string> trackers;
    std::optional<std::int64_t> creation_date;
    infohash hash;
    // The info dictionary exactly as stored; `hash` is SHA-1 of these bytes.
    bytes info_bytes;
    // Top-level keys this parser does not interpret.
    bencode::dict extra;
    // Canonicality violations seen while parsing (third-party writers).
    std::vector<bencode::violation> violations;

    friend bool operator==(const torrent_meta& a, const torrent_meta& b)
    {
        return a.info == b.info && a.trackers == b.trackers && a.creation_date == b.creation_date &&
               a.hash == b.hash && a.info_bytes == b.info_bytes && a.extra == b.extra;
    }
};

torrent_meta parse_torrent(bytes_view input);
// Parses a bare info dictionary (as fetched during magnet resolution).
info_dict parse_info(bytes_view info_bytes);
bytes encode_torrent(const torrent_meta& meta);

// Builds a torrent over `files` (relative path -> content). Files are laid out
// in lexicographic path order. A lone top-level file without an explicit
// name becomes a single-file torrent; everything else is multi-file.
torrent_meta build_torrent(const std::map<std::string, bytes>& files,
                           std::int64_t piece_length = default_piece_length,
                           std::vector<std::string> trackers = {},
                           std::optional<std::string> name = std::nullopt);

// Concatenation of every file in layout order.
bytes concatenate(const info_dict& info, const std::map<std::string, bytes>& files);

struct magnet {
    infohash hash;
    std::optional<std::string> display_name;
    std::vector<std::string> trackers;

    std::string to_uri() const;
    friend bool operator==(const magnet&, const magnet&) = default;
};

magnet parse_magnet(std::string_view uri);

}  // namespace mael::torrent
