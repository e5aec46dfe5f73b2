#pragma once

#include "mael/common.hpp"
#include "mael/compact_peer.hpp"
#include "mael/store.hpp"
#include "mael/torrent.hpp"

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

namespace mael::swarm {

using dht::compact_peer;

enum class errc { malformed_input, no_peers, metadata_hash_mismatch, timeout };
using error = coded_error<errc>;

std::string to_string(errc e);

// --- wire ----------------------------------------------------------------

enum class msg_type { handshake, bitfield, metadata_request, metadata_data, request, piece, reject };

struct wire_message {
    msg_type type = msg_type::handshake;
    infohash hash;
    bytes peer_id;               // handshake
    std::vector<bool> bitfield;  // bitfield
    std::int64_t index = 0;      // piece index, or metadata chunk
    std::int64_t offset = 0;     // byte offset of `data` (piece-relative or into the info dict)
    std::int64_t total = 0;      // metadata size in metadata_data
    bytes data;
    std::string reason;  // reject: ratio, cap, throttled, missing, unknown_torrent
    std::int64_t retry_after_ms = 0;

    friend bool operator==(const wire_message&, const wire_message&) = default;
};

bytes encode(const wire_message& m);
wire_message decode(bytes_view raw);  // throws error(malformed_input)
// True when the payload is a swarm datagram (dictionary with "m").
bool is_swarm(bytes_view raw);

// MSB-first, as in BitTorrent bitfield messages.
bytes pack_bitfield(const std::vector<bool>& bits);
std::vector<bool> unpack_bitfield(bytes_view packed, std::size_t count);

// --- policy --------------------------------------------------------------

struct transfer_stats {
    std::int64_t uploaded = 0;
    std::int64_t downloaded = 0;
    // uploaded / downloaded; nullopt (no limit applies yet) when nothing has
    // been downloaded.
    std::optional<double> ratio() const;
    friend bool operator==(const transfer_stats&, const transfer_stats&) = default;
};

// Bucket of `rate` bytes refilled once per whole second of clock time. A
// single grant may overdraw the bucket; further grants wait for a refill.
class token_bucket {
public:
    explicit token_bucket(std::optional<std::int64_t> rate = std::nullopt);
    void set_rate(std::optional<std::int64_t> rate);
    // nullopt when admitted, else milliseconds until the next useful refill.
    std::optional<std::int64_t> admit(std::int64_t bytes, std::int64_t now_ms);
    std::optional<std::int64_t> rate() const { return rate_; }

private:
    void refill(std::int64_t now_ms);
    std::optional<std::int64_t> rate_;
    std::int64_t tokens_ = 0;
    std::int64_t second_ = 0;
};

enum class refusal { ratio_exceeded, cap_exceeded, throttled };
std::string to_string(refusal r);

struct serve_decision {
    bool ok = true;
    refusal why = refusal::ratio_exceeded;
    std::int64_t retry_after_ms = 0;
};

struct node_totals {
    std::int64_t uploaded = 0;
    std::int64_t downloaded = 0;
};

// Decides whether `length` bytes of a locally verified piece may be sent.
// On success stats.uploaded and totals.uploaded grow by `length`.
serve_decision serve_piece(std::int64_t length, transfer_stats& stats, node_totals& totals,
                           const store::settings& s, bool publisher, token_bucket& bucket, std::int64_t now_ms);

enum class piece_policy { sequential, rarest_first };

// availability[i] = number of known peers holding piece i (rarest_first).
std::optional<std::size_t> next_request(const std::vector<bool>& have, const std::vector<bool>& peer_has,
                                        const std::set<std::size_t>& inflight, piece_policy policy,
                                        const std::vector<std::size_t>& availability = {});

// --- engine --------------------------------------------------------------

struct outgoing {
    compact_peer to;
    bytes payload;
};

struct engine_config {
    std::size_t pipeline_depth = 4;
    std::size_t block_size = 1024;
    std::size_t metadata_chunk = 16 * 1024;
    std::int64_t request_timeout_ms = 2000;
    std::int64_t rehandshake_ms = 1000;
    std::size_t max_sessions = 50;
    piece_policy policy = piece_policy::sequential;
};

struct metadata_result {
    bool ok = false;
    errc why = errc::no_peers;
    bytes info_bytes;
    std::vector<compact_peer> mismatched;  // peers whose metadata failed the hash
};

// Per-node piece exchange. Single owner; every entry point takes the time.
class engine {
public:
    using piece_reader = std::function<std::optional<bytes>(const infohash&, std::size_t)>;
    // Returns true when the piece verified and was stored.
    using piece_sink = std::function<bool(const infohash&, std::size_t, bytes)>;
    using metadata_callback = std::function<void(const metadata_result&)>;

    engine(compact_peer self, bytes peer_id, engine_config cfg = {});

    const compact_peer& self() const { return self_; }
    const engine_config& config() const { return cfg_; }
    void set_settings(const store::settings& s);
    const store::settings& settings() const { return settings_; }
    void set_piece_reader(piece_reader r) { reader_ = std::move(r); }
    void set_piece_sink(piece_sink s) { sink_ = std::move(s); }

    void add_torrent(const torrent::torrent_meta& meta, std::vector<bool> have, bool publisher,
                     transfer_stats stats = {});
    void remove_torrent(const infohash& h);
    bool has_torrent(const infohash& h) const { return torrents_.count(h) != 0; }
    std::vector<infohash> torrents() const;
    const std::vector<bool>& have(const infohash& h) const;
    bool complete(const infohash& h) const;
    const transfer_stats& stats(const infohash& h) const;
    const node_totals& totals() const { return totals_; }
    void set_totals(node_totals t) { totals_ = t; }
    bool publisher(const infohash& h) const;

    std::vector<outgoing> fetch_metadata(const infohash& h, const std::vector<compact_peer>& peers,
                                         std::int64_t now, metadata_callback done);
    bool fetching_metadata(const infohash& h) const { return metadata_.count(h) != 0; }

    // The torrent must have been added. Peers can be added later.
    std::vector<outgoing> start_download(const infohash& h, const std::vector<compact_peer>& peers,
                                         std::int64_t now);
    std::vector<outgoing> add_peers(const infohash& h, const std::vector<compact_peer>& peers, std::int64_t now);
    void stop_download(const infohash& h);
    bool downloading(const infohash& h) const;
    std::size_t session_count(const infohash& h) const;
    std::int64_t last_progress(const infohash& h) const;

    std::vector<outgoing> handle(const compact_peer& from, bytes_view raw, std::int64_t now);
    std::vector<outgoing> tick(std::int64_t now);

private:
    struct session {
        std::vector<bool> theirs;
        bool handshaked = false;
        std::int64_t hs_sent_at = 0;
        std::size_t inflight = 0;
        std::int64_t choked_until = 0;
    };
    struct inflight_piece {
        compact_peer peer;
        bytes buf;
        std::vector<bool> blocks;
        std::size_t received = 0;
        std::int64_t last_activity = 0;
    };
    struct torrent_state {
        torrent::torrent_meta meta;
        std::vector<bool> have;
        bool publisher = false;
        transfer_stats stats;
        bool downloading = false;
        std::map<compact_peer, session> sessions;
        std::map<std::size_t, inflight_piece> inflight;
        std::set<compact_peer> banned;
        std::int64_t last_progress = 0;
    };
    struct metadata_job {
        std::vector<compact_peer> peers;
        std::size_t next = 0;
        std::optional<compact_peer> current;
        std::int64_t total = -1;
        bytes buf;
        std::vector<bool> blocks;
        std::size_t received = 0;
        std::int64_t last_activity = 0;
        metadata_result result;
        metadata_callback done;
    };

    void send(const compact_peer& to, const wire_message& m);
    std::vector<outgoing> flush();

    void serve_handshake(const compact_peer& from, const wire_message& m);
    void serve_metadata(const compact_peer& from, const wire_message& m);
    void serve_request(const compact_peer& from, const wire_message& m, std::int64_t now);

    void on_bitfield(const compact_peer& from, const wire_message& m, std::int64_t now);
    void on_piece(const compact_peer& from, const wire_message& m, std::int64_t now);
    void on_reject(const compact_peer& from, const wire_message& m, std::int64_t now);
    void on_metadata(const compact_peer& from, const wire_message& m, std::int64_t now);

    void fill_requests(const infohash& h, torrent_state& t, std::int64_t now);
    void release(torrent_state& t, std::size_t index);
    void drop_session(torrent_state& t, const compact_peer& peer);

    void metadata_next_peer(const infohash& h, std::int64_t now);
    void metadata_finish(const infohash& h);

    compact_peer self_;
    bytes peer_id_;
    engine_config cfg_;
    store::settings settings_;
    token_bucket up_bucket_;
    token_bucket down_bucket_;
    node_totals totals_;
    piece_reader reader_;
    piece_sink sink_;
    std::map<infohash, torrent_state> torrents_;
    std::map<infohash, metadata_job> metadata_;
    std::vector<outgoing> out_;
};

}  // namespace mael::swarm
