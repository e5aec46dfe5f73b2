#pragma once

#include "mael/bencode.hpp"
#include "mael/common.hpp"
#include "mael/torrent.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mael::store {

namespace fs = std::filesystem;

enum class errc {
    malformed_input,
    bitfield_length_mismatch,
    hash_mismatch,
    index_out_of_range,
    piece_size_mismatch,
    invalid_settings,
    profile_locked,
    io_error,
};
using error = coded_error<errc>;

inline constexpr std::int64_t GiB = std::int64_t{1} << 30;
inline constexpr std::int64_t default_cache_size = 5 * GiB;
inline constexpr std::int64_t cache_warning_threshold = 100 * GiB;

struct settings_warning {
    std::string code;  // e.g. "cache_size_over_limit"
    std::int64_t value = 0;
    std::int64_t at = 0;
    friend bool operator==(const settings_warning&, const settings_warning&) = default;
};

struct settings {
    std::int64_t cache_size_bytes = default_cache_size;
    // nullopt means unlimited. Stored on disk in thousandths.
    std::optional<double> share_ratio_limit = 1.0;
    std::optional<std::int64_t> upload_rate;    // bytes/s
    std::optional<std::int64_t> download_rate;  // bytes/s
    std::optional<std::int64_t> transfer_cap;   // bytes
    std::uint16_t port = 0;
    // Recorded only; proxying is not implemented.
    std::optional<std::string> proxy;
    bool send_stats = true;
    bool background_seed = true;

    // Usage statistics.
    std::int64_t uploaded_total = 0;
    std::int64_t downloaded_total = 0;
    std::int64_t session_count = 0;

    std::int64_t modified_at = 0;
    std::vector<settings_warning> warnings;
    bencode::dict extra;  // keys written by someone else

    // Records a warning when the new size is above the 100 GiB recommendation.
    void set_cache_size(std::int64_t bytes, std::int64_t now);
    void validate() const;  // throws error(invalid_settings)

    friend bool operator==(const settings&, const settings&) = default;
};

// Installation-time port: uniform in [20000, 65000] from the given seed.
std::uint16_t pick_port(std::uint64_t seed);

bytes save_settings(const settings& s);
settings load_settings(bytes_view raw);
// Missing file yields the defaults.
settings load_settings(const std::optional<bytes>& raw);

struct resume_file {
    infohash hash;
    std::vector<bool> bitfield;
    std::int64_t created_at = 0;
    std::int64_t updated_at = 0;
    std::int64_t uploaded = 0;
    std::int64_t downloaded = 0;
    bool publisher = false;  // this node created the torrent

    std::size_t have_count() const;
    bool complete() const;
    double completeness() const;  // 1.0 for zero-piece torrents
    std::string bitfield_string() const;

    // Throws error(bitfield_length_mismatch) when the torrent disagrees.
    void check_against(const torrent::info_dict& info) const;

    friend bool operator==(const resume_file&, const resume_file&) = default;
};

resume_file new_resume(const infohash& h, std::size_t piece_count, std::int64_t now);
bytes save_resume(const resume_file& r);
resume_file load_resume(bytes_view raw);

struct cache_entry {
    std::string torrent_name;
    infohash hash;
    std::map<std::size_t, bytes> pieces;  // verified pieces only
    std::int64_t total_bytes = 0;
    std::int64_t last_access = 0;
    bool active = false;

    bool complete(const torrent::info_dict& info) const { return pieces.size() == info.piece_count(); }
};

// "<name>_<HEX>", with path separators in the name replaced.
std::string cache_dir_name(std::string_view torrent_name, const infohash& h);
// Inverse of cache_dir_name; nullopt when the suffix is not "_<40 hex>".
std::optional<std::pair<std::string, infohash>> parse_cache_dir_name(std::string_view dir);

// Verifies `data` against the piece hash and stores it, marking the resume
// bitfield and refreshing last_access. Throws index_out_of_range,
// piece_size_mismatch or hash_mismatch; nothing is modified on failure.
void put_piece(cache_entry& entry, resume_file& resume, const torrent::info_dict& info, std::size_t index,
               bytes data, std::int64_t now);

struct eviction_candidate {
    infohash hash;
    std::int64_t bytes = 0;
    std::int64_t last_access = 0;
    bool complete = true;
    bool active = false;
};

struct eviction_result {
    std::vector<infohash> removed;  // in eviction order
    std::int64_t remaining_bytes = 0;
    // Still over budget with nothing left to evict; the cache is allowed to
    // exceed its size in that case.
    bool cannot_satisfy = false;
};

// LRU: removes complete, inactive entries oldest-access first (ties by
// infohash) until the total fits in the cache size.
eviction_result evict(const settings& s, const std::vector<eviction_candidate>& cache);

struct integrity_problem {
    fs::path path;
    std::string what;
};

// The Roaming store: torrents, resume files, dht.dat, settings.dat, cache/.
class profile {
public:
    explicit profile(fs::path root);
    ~profile();
    profile(const profile&) = delete;
    profile& operator=(const profile&) = delete;

    const fs::path& root() const { return root_; }
    fs::path torrent_path(const infohash& h) const { return root_ / (h.hex() + ".torrent"); }
    fs::path resume_path(const infohash& h) const { return root_ / (h.hex() + ".resume"); }
    fs::path dht_path() const { return root_ / "dht.dat"; }
    fs::path settings_path() const { return root_ / "settings.dat"; }
    fs::path aliases_path() const { return root_ / "aliases.dat"; }
    fs::path cache_root() const { return root_ / "cache"; }
    fs::path cache_dir(std::string_view name, const infohash& h) const { return cache_root() / cache_dir_name(name, h); }
    fs::path trusted_dir() const { return root_ / "trusted"; }

    // Single writer per profile (flock on node.lock). Throws profile_locked.
    void lock();
    void unlock();
    bool locked() const { return lock_fd_ >= 0; }

    void save_torrent(const torrent::torrent_meta& meta, std::int64_t now);
    std::optional<torrent::torrent_meta> load_torrent(const infohash& h) const;
    std::vector<infohash> torrents() const;

    // created_at is taken from the file already on disk, if any.
    resume_file save_resume(resume_file r);
    std::optional<resume_file> load_resume(const infohash& h) const;

    settings load_settings() const;
    void save_settings(const settings& s);

    void save_dht(bytes_view raw, std::int64_t now);
    std::optional<bytes> load_dht() const;

    void store_piece(std::string_view name, const infohash& h, std::size_t index, bytes_view data, std::int64_t now);
    std::optional<bytes> load_piece(std::string_view name, const infohash& h, std::size_t index) const;
    std::vector<std::size_t> cached_pieces(std::string_view name, const infohash& h) const;
    void remove_cache(std::string_view name, const infohash& h);

    // Rebuilds a cache entry from disk, dropping pieces that fail their hash.
    cache_entry load_cache_entry(const torrent::torrent_meta& meta) const;

    // Full scan: every cached piece against its torrent, every resume against
    // its torrent.
    std::vector<integrity_problem> verify() const;

private:
    fs::path root_;
    int lock_fd_ = -1;
};

std::optional<bytes> read_file(const fs::path& p);
void write_file(const fs::path& p, bytes_view data);
// Sets a file's modification time (seconds since the epoch).
void set_mtime(const fs::path& p, std::int64_t seconds);
std::int64_t get_mtime(const fs::path& p);

// Windows-like machine tree used for install, uninstall and remnant fixtures.
struct machine_layout {
    fs::path root;
    std::string user = "user";
    std::string version = "1.0.0";

    fs::path app_data() const { return root / "Users" / user / "AppData"; }
    fs::path local_dir() const { return app_data() / "Local" / "Maelstrom"; }
    fs::path application_dir() const { return local_dir() / "Application" / version; }
    fs::path user_data_dir() const { return local_dir() / "User Data" / "Default"; }
    fs::path roaming_dir() const { return app_data() / "Roaming" / "BitTorrent Maelstrom"; }
    // Stand-in for the registry keys the installer writes.
    fs::path registry_manifest() const { return root / "Registry" / "HKCU" / "Software" / "BitTorrent Maelstrom.keys"; }
};

void install(const machine_layout& m, std::int64_t now);

enum class uninstall_mode { keep_history, remove_history };
// Removes the Application tree and registry keys; remove_history also
// removes the whole Local/Maelstrom tree. Roaming is left untouched.
void uninstall(const machine_layout& m, uninstall_mode mode);

}  // namespace mael::store
