#pragma once

#include "mael/bundle.hpp"
#include "mael/common.hpp"
#include "mael/compact_peer.hpp"
#include "mael/dht.hpp"
#include "mael/store.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

// Offline, read-only analysis of profile directories and machine trees.
// Nothing here writes below the examined root.
namespace mael::forensics {

namespace fs = std::filesystem;

enum class errc { not_a_directory, no_matching_torrent };
using error = coded_error<errc>;

enum class event_kind { torrent_first_processed, piece_cached, settings_changed, dht_snapshot };
std::string to_string(event_kind k);

struct timeline_event {
    std::int64_t timestamp = 0;  // raw seconds from the artifact
    event_kind kind = event_kind::torrent_first_processed;
    std::string subject;  // infohash hex or file name
    std::string source;   // artifact path relative to the root
    std::string detail;
};

struct anomaly {
    std::string path;
    std::string what;
};

struct dht_record {
    std::string path;
    std::optional<dht::node_id> id;
    std::vector<dht::compact_peer> peers;
    std::vector<dht::node_id> node_ids;  // 26-byte stride only
    std::size_t stride = 6;
    std::optional<std::int64_t> declared_count;
    std::int64_t mtime = 0;
};

struct torrent_record {
    infohash hash;
    std::string name;
    std::vector<std::pair<std::string, std::int64_t>> files;
    std::int64_t total_length = 0;
    std::int64_t piece_length = 0;
    std::size_t pieces = 0;
    std::vector<std::string> trackers;
    std::optional<std::string> torrent_path;
    std::optional<std::string> resume_path;
    // From the resume file, when present.
    std::optional<std::size_t> have;
    std::optional<double> completeness;
    std::optional<std::int64_t> created_at;
    std::optional<std::int64_t> updated_at;
    std::optional<std::int64_t> uploaded;
    std::optional<std::int64_t> downloaded;
    std::optional<bool> publisher;
    std::optional<std::int64_t> torrent_mtime;
};

struct cache_record {
    std::string dir;  // relative to the root
    std::optional<infohash> hash;
    std::string name;
    std::vector<std::size_t> pieces;  // present on disk
    std::size_t verified = 0;         // matching the torrent's piece hashes
    std::int64_t bytes = 0;
    bool has_torrent = false;
    std::optional<std::int64_t> first_cached;
    std::optional<std::int64_t> last_cached;
};

struct settings_record {
    std::string path;
    store::settings values;
    std::vector<std::string> non_default;
    std::vector<std::string> unknown_keys;
};

struct report {
    std::string root;
    std::optional<dht_record> dht;
    std::vector<torrent_record> torrents;  // by infohash
    std::vector<cache_record> cache;       // by directory name
    std::optional<settings_record> settings;
    bundle::alias_map aliases;
    std::vector<timeline_event> timeline;
    std::vector<anomaly> anomalies;
    std::vector<std::string> notes;
};

// Throws error(not_a_directory). Damaged artifacts become anomalies.
report inspect(const fs::path& root);

std::string to_json(const report& r);  // schema "mael.forensics/1"
std::string to_text(const report& r);
std::string utc(std::int64_t seconds);  // "2015-04-10T00:00:00Z"

// --- reconstruction ------------------------------------------------------

struct byte_range {
    std::int64_t begin = 0;
    std::int64_t end = 0;  // exclusive
    friend bool operator==(const byte_range&, const byte_range&) = default;
};

struct reconstructed_file {
    std::string path;
    std::int64_t length = 0;
    bytes data;                   // gaps are zero bytes, never guessed content
    std::vector<byte_range> gaps;  // file-relative
    bool complete() const { return gaps.empty(); }
};

struct raw_piece {
    std::size_t index = 0;
    std::string sha1_hex;
    bytes data;
};

struct reconstruction {
    infohash hash;
    bool from_torrent = false;
    std::string name;
    std::vector<bool> pieces;  // verified pieces, when the torrent is known
    std::vector<reconstructed_file> files;
    std::vector<raw_piece> raw;  // only without a torrent
    bool complete() const;
};

// Rebuilds a torrent's files from `root`/cache. Without a matching .torrent
// the raw pieces are exported instead; throws no_matching_torrent when
// neither the torrent nor any cached piece exists.
reconstruction reconstruct(const fs::path& root, const infohash& h);

// Assembled website rooted at base torrent `h` when every member is fully
// cached.
std::optional<bundle::file_tree> recover_site(const fs::path& root, const infohash& h);

// Writes files (sparse over gaps) plus gaps.json, or pieces/<i>.piece plus
// pieces.json for a raw export.
void write_reconstruction(const reconstruction& r, const fs::path& out);
std::string reconstruction_json(const reconstruction& r);  // schema "mael.reconstruction/1"

// --- remnants ------------------------------------------------------------

enum class uninstall_mode { history_kept, history_removed, unknown, no_evidence };
std::string to_string(uninstall_mode m);

struct recovered_site {
    infohash hash;
    std::string name;
    std::size_t files = 0;
    bool complete = false;
};

struct user_remnants {
    std::string user;
    bool local_present = false;      // AppData/Local/Maelstrom
    bool user_data_present = false;  // .../User Data
    bool application_present = false;
    bool roaming_present = false;  // AppData/Roaming/BitTorrent Maelstrom
    std::optional<report> profile;
    std::vector<recovered_site> sites;
};

struct remnant_report {
    std::string root;
    uninstall_mode mode = uninstall_mode::no_evidence;
    bool registry_present = false;
    std::vector<std::string> survived;  // relative paths of surviving install locations
    std::vector<user_remnants> users;
};

// Inference: User Data and Roaming both present -> history_kept; Roaming
// only -> history_removed; neither -> no_evidence; anything else unknown.
remnant_report detect_remnants(const fs::path& machine_root);
std::string to_json(const remnant_report& r);  // schema "mael.remnants/1"
std::string to_text(const remnant_report& r);

}  // namespace mael::forensics
