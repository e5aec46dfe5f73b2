#pragma once

#include "mael/common.hpp"
#include "mael/torrent.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mael::bundle {

enum class errc {
    empty_tree,
    missing_entry,
    bad_path,
    malformed_manifest,
    unknown_alias,
    bad_authority,
    path_escape,
    not_bittorrent_url,
    member_incomplete,
    mount_collision,
};
using error = coded_error<errc>;

std::string to_string(errc e);

using file_tree = std::map<std::string, bytes>;

// Reserved path of the manifest inside the base torrent.
inline constexpr std::string_view manifest_path = ".bundle";

struct website {
    file_tree tree;
    std::string entry = "index.html";
};

// Relative, '/'-separated, no empty, "." or ".." components.
bool valid_path(std::string_view path);
void validate(const website& site);

struct member {
    infohash hash;
    std::string prefix;  // "" for the base torrent
    friend bool operator==(const member&, const member&) = default;
};

// The base torrent carries the encoded manifest, so its own hash cannot
// appear inside it: on disk only the split members are listed and the base
// is implied. In memory members[0] is always the base with prefix "".
struct manifest {
    std::string name;
    std::int64_t version = 1;
    std::string entry = "index.html";
    std::vector<member> members;

    const member& base() const { return members.front(); }
    friend bool operator==(const manifest&, const manifest&) = default;
};

// Encodes everything but the base member.
bytes encode_manifest(const manifest& m);
// `base` is the infohash of the torrent the manifest was read from.
manifest decode_manifest(bytes_view raw, const infohash& base);

struct publish_mode {
    // nullopt: single torrent. Otherwise files larger than this many bytes
    // get their own torrent.
    std::optional<std::int64_t> split_threshold;
};

struct publish_options {
    std::string name = "site";
    std::int64_t version = 1;
    std::int64_t piece_length = torrent::default_piece_length;
    std::vector<std::string> trackers;
};

struct published {
    manifest man;
    std::vector<torrent::torrent_meta> torrents;  // base first, then split members in path order
    // Torrent-relative content of each torrent (single-file torrents are
    // keyed by their name).
    std::map<infohash, file_tree> contents;
};

published publish(const website& site, publish_mode mode = {}, const publish_options& opts = {});

// Cuts a torrent's concatenated content back into its files.
file_tree split_content(const torrent::info_dict& info, bytes_view data);

// Mounts member contents at their prefixes and drops the manifest file.
// Throws member_incomplete (naming the infohash) or mount_collision.
file_tree assemble(const manifest& m, const std::map<infohash, std::pair<torrent::info_dict, file_tree>>& members);

struct site_url {
    infohash hash;
    std::string path;
    friend bool operator==(const site_url&, const site_url&) = default;
};

using alias_map = std::map<std::string, infohash>;

// bittorrent://<40 hex | alias>[/path]; "" or "/" maps to `entry`, and a
// trailing slash to that directory's index.html.
site_url resolve_url(std::string_view url, const alias_map& aliases, std::string_view entry = "index.html");
// Normalizes a site-relative path the same way; throws path_escape on "..".
std::string normalize_path(std::string_view path, std::string_view entry = "index.html");

bytes save_aliases(const alias_map& aliases);
alias_map load_aliases(bytes_view raw);

// Deterministic fixture site: `files` files totalling `total_bytes`, with an
// index.html that links every other file.
website generate_demo_site(std::uint64_t seed, std::size_t files = 12, std::int64_t total_bytes = 1 << 20);

}  // namespace mael::bundle
