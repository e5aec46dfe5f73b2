#pragma once

#include "mael/bundle.hpp"
#include "mael/dht.hpp"
#include "mael/store.hpp"
#include "mael/swarm.hpp"
#include "mael/torrent.hpp"
#include "mael/transport.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mael::gateway {

namespace fs = std::filesystem;
using dht::compact_peer;

enum class phase { resolving, discovering, fetching_metadata, transferring, assembling, ready, failed };
std::string to_string(phase p);

enum class failure { none, bad_url, no_peers, metadata_hash_mismatch, member_incomplete, timeout };
std::string to_string(failure f);

// One entry per pipeline step, in the order the steps happened.
struct step_event {
    std::int64_t at_ms = 0;
    // resolve, discover, fetch_metadata, transfer, manifest, assemble,
    // scripts_skipped, share, ready, failed
    std::string step;
    std::string detail;
};

struct load_job {
    std::uint64_t id = 0;
    std::string url;
    infohash hash;
    std::string path;
    phase ph = phase::resolving;
    failure cause = failure::none;
    std::string detail;
    std::size_t pieces_done = 0;
    std::size_t pieces_total = 0;
    std::int64_t started_at = 0;  // wall seconds
    std::int64_t started_ms = 0;
    std::int64_t finished_ms = -1;
    bool cache_hit = false;
    std::vector<step_event> log;
    std::vector<infohash> announced;

    bool terminal() const { return ph == phase::ready || ph == phase::failed; }
};

struct http_response {
    int status = 200;
    std::vector<std::pair<std::string, std::string>> headers;
    std::string body;

    std::optional<std::string> header(std::string_view name) const;
};

std::string content_type_for(std::string_view path);

struct node_config {
    std::string name = "node";
    compact_peer endpoint;
    std::optional<fs::path> profile_root;  // none: nothing is persisted
    std::optional<dht::node_id> id;        // default: dht.dat id, else derived from name
    std::vector<compact_peer> bootstrap;
    dht::dht_config dht;
    swarm::engine_config swarm;
    std::optional<store::settings> settings;  // replaces the profile's settings.dat
    std::int64_t tick_ms = 250;
    std::int64_t load_timeout_ms = 30000;
    std::int64_t rediscover_ms = 5000;
    std::int64_t announce_interval_ms = 15 * 60 * 1000;
};

// A node: DHT participant, piece store and swarm peer over one endpoint,
// plus the page-load pipeline. Single-threaded; everything runs from the
// network's handlers and timers.
class node {
public:
    node(transport::network& net, node_config cfg);
    ~node();
    node(const node&) = delete;
    node& operator=(const node&) = delete;

    // Loads the profile, binds the endpoint and bootstraps. Throws
    // store::error(profile_locked) when another node holds the profile.
    void start();
    // Unbinds; with `persist` writes dht.dat, resume files and settings.
    void stop(bool persist = true);
    bool running() const { return running_; }

    // The HTTP front end went away. With background_seed the node keeps
    // participating; without it the node shuts down.
    void close_gateway();
    bool gateway_open() const { return gateway_open_; }

    bundle::published publish(const bundle::website& site, bundle::publish_mode mode = {},
                              const bundle::publish_options& opts = {});

    // Starts (or joins) the load for a magnet or bittorrent:// URL.
    std::uint64_t load_site(const std::string& url);
    const load_job* job(std::uint64_t id) const;
    const load_job* job_for(const infohash& h) const;
    std::vector<const load_job*> jobs() const;

    // Assembled site rooted at `h`, when every member is complete.
    std::optional<bundle::file_tree> site(const infohash& h);
    std::vector<infohash> served() const;

    http_response handle_http(std::string_view method, std::string_view target);
    std::string status_json();

    void register_alias(const std::string& name, const infohash& h);
    const bundle::alias_map& aliases() const { return aliases_; }

    const node_config& config() const { return cfg_; }
    const compact_peer& endpoint() const { return endpoint_; }
    dht::dht_node& dht() { return *dht_; }
    swarm::engine& swarm() { return *swarm_; }
    const store::settings& settings() const { return settings_; }
    void update_settings(const store::settings& s);
    transport::network& net() { return net_; }
    store::profile* profile() { return profile_.get(); }

    // Sends DHT messages produced outside handle (e.g. by a crawler).
    void send_dht(const std::vector<dht::outgoing>& out);
    bytes dht_dat() const;
    bool bootstrapped() const { return bootstrapped_; }

    // Called for every datagram after the node has handled it.
    using observer = std::function<void(const compact_peer& from, bytes_view payload)>;
    void set_datagram_observer(observer o) { observer_ = std::move(o); }

private:
    struct held_torrent {
        torrent::torrent_meta meta;
        store::cache_entry cache;
        store::resume_file resume;
    };
    struct target {
        infohash hash;
        bool root = false;
        std::vector<compact_peer> peers;
        std::set<compact_peer> seen;
        std::set<compact_peer> bad;
        bool lookup_inflight = false;
        std::int64_t last_lookup = -1;
        bool fetching = false;
        std::int64_t last_fetch = -1;
        bool have_meta = false;
        bool complete = false;
    };
    struct job_state {
        load_job job;
        std::vector<std::string> trackers;
        std::map<infohash, target> targets;
        std::optional<bundle::manifest> man;
        std::int64_t last_progress = 0;
        bool saw_peers = false;
        bool saw_mismatch = false;
    };
    struct site_record {
        bundle::manifest man;
        bundle::file_tree tree;
    };

    void on_datagram(const compact_peer& from, bytes_view payload);
    void schedule_tick();
    void on_tick();
    void send_swarm(const std::vector<swarm::outgoing>& out);

    void load_profile();
    void persist();
    void persist_resume(held_torrent& t);
    held_torrent& hold(const torrent::torrent_meta& meta, bool publisher);
    void adopt(held_torrent t);
    std::vector<compact_peer> candidates(const target& t) const;
    bool serving(const infohash& h) const;
    bool accept_piece(const infohash& h, std::size_t index, bytes data);
    std::optional<bytes> read_piece(const infohash& h, std::size_t index);
    std::optional<bundle::file_tree> content(const infohash& h);
    void announce_all();

    void step(std::uint64_t id);
    void step_target(job_state& js, target& t);
    void on_peers(std::uint64_t id, const infohash& h, const dht::lookup_result& r);
    void on_metadata(std::uint64_t id, const infohash& h, const swarm::metadata_result& r);
    void on_target_complete(job_state& js, target& t);
    void finish_job(job_state& js);
    void fail_job(job_state& js, failure cause, std::string detail);
    void log_step(job_state& js, const std::string& step, std::string detail = {});
    void set_phase(job_state& js, phase p);
    void evict_if_needed();

    transport::network& net_;
    node_config cfg_;
    compact_peer endpoint_;
    std::unique_ptr<store::profile> profile_;
    std::unique_ptr<dht::dht_node> dht_;
    std::unique_ptr<swarm::engine> swarm_;
    store::settings settings_;
    bundle::alias_map aliases_;
    std::map<infohash, held_torrent> held_;
    std::map<infohash, site_record> sites_;
    std::map<std::uint64_t, job_state> jobs_;
    std::map<infohash, std::uint64_t> by_hash_;  // latest job per root infohash
    std::uint64_t next_job_ = 1;
    std::optional<transport::timer_id> tick_timer_;
    std::int64_t last_announce_ = 0;
    bool running_ = false;
    bool gateway_open_ = true;
    bool bootstrapped_ = false;
    observer observer_;
};

// Writes a published site into a profile: torrents, complete resume files
// marked as published here, and every piece in the cache.
bundle::published publish_to_profile(store::profile& p, const bundle::website& site, bundle::publish_mode mode,
                                     const bundle::publish_options& opts, std::int64_t now);

// Every regular file under `dir`, keyed by '/'-separated relative path.
bundle::website read_site_directory(const fs::path& dir);

// Loopback UDP daemon with an HTTP front end on 127.0.0.1:http_port.
struct daemon_options {
    fs::path profile;
    std::uint16_t udp_port = 0;  // 0: the port from settings.dat
    std::uint16_t http_port = 8945;
    bool http = true;
    std::vector<compact_peer> bootstrap;
    std::vector<std::string> publish_dirs;
    std::optional<store::settings> settings;  // replaces settings.dat, usage stats kept
};

// Runs until `stop` becomes true; returns the process exit code.
int run_daemon(const daemon_options& opts, std::atomic<bool>& stop);

}  // namespace mael::gateway
