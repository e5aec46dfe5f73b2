#pragma once

#include "mael/common.hpp"
#include "mael/compact_peer.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <vector>

namespace mael::dht {

struct node_id_tag {};
using node_id = id20<node_id_tag>;

inline node_id as_node_id(const infohash& h) { return node_id{h.data}; }

// 160-bit unsigned integer, big-endian. Lexicographic order is numeric order.
using distance = std::array<std::uint8_t, 20>;

distance xor_distance(const node_id& a, const node_id& b);
// Number of leading bits a and b share (160 when equal).
int common_prefix_length(const node_id& a, const node_id& b);

enum class errc {
    malformed_input,
    bad_id_length,
    peers_blob_not_multiple_of_6,
    bootstrap_timeout,
};
using error = coded_error<errc>;

enum class node_state { good, questionable, bad };

struct node_entry {
    node_id id;
    compact_peer peer;
    std::int64_t last_seen = 0;  // ms
    int failed_queries = 0;

    static constexpr std::size_t wire_size = 26;
    bytes encode() const;  // id ++ compact peer
    static node_entry decode(bytes_view raw);

    node_state state(std::int64_t now, std::int64_t good_window_ms = 15 * 60 * 1000) const;
};

bytes encode_nodes(const std::vector<node_entry>& entries);
std::vector<node_entry> decode_nodes(bytes_view blob);

class routing_table {
public:
    explicit routing_table(node_id own, std::size_t k = 8);

    const node_id& own_id() const { return own_; }
    std::size_t k() const { return k_; }

    // Inserts a new entry or refreshes an existing one. Returns false when the
    // entry was rejected (own id, or a full bucket that cannot split and holds
    // no bad entry to replace).
    bool insert(const node_id& id, const compact_peer& peer, std::int64_t now);
    void mark_failed(const node_id& id);
    bool remove(const node_id& id);
    const node_entry* find(const node_id& id) const;

    std::vector<node_entry> closest(const node_id& target, std::size_t count) const;
    std::vector<node_entry> entries() const;
    std::size_t size() const;

    std::size_t bucket_count() const { return buckets_.size(); }
    std::size_t bucket_index(const node_id& id) const;
    // Inclusive lower / exclusive upper bound on XOR distance to own id.
    std::pair<distance, std::optional<distance>> bucket_range(std::size_t index) const;
    const std::vector<node_entry>& bucket_entries(std::size_t index) const { return buckets_[index].nodes; }
    std::int64_t bucket_last_changed(std::size_t index) const { return buckets_[index].last_changed; }
    void touch_bucket(std::size_t index, std::int64_t now) { buckets_[index].last_changed = now; }

    // Full scan: every entry inside its bucket's distance range, no duplicate
    // ids, no bucket over k. Returns a description of the first violation.
    std::optional<std::string> check_invariants() const;

    friend bool operator==(const routing_table& a, const routing_table& b);

private:
    struct bucket {
        std::vector<node_entry> nodes;
        std::int64_t last_changed = 0;
    };

    void split_last();

    node_id own_;
    std::size_t k_;
    std::vector<bucket> buckets_;
};

enum class msg_kind { ping, find_nodes, get_peers, announce_peer, unknown_query, response, error };

struct message {
    msg_kind kind = msg_kind::ping;
    bytes transaction_id;
    node_id sender;
    std::string query_name;  // wire name for queries (kept for unknown kinds)
    std::optional<node_id> target;
    std::optional<infohash> info_hash;
    std::optional<bytes> token;
    std::optional<std::uint16_t> port;
    bytes nodes;                       // concatenated 26-byte entries
    std::vector<compact_peer> values;  // peers for get_peers responses
    std::int64_t error_code = 0;
    std::string error_message;

    bool is_query() const { return kind != msg_kind::response && kind != msg_kind::error; }
    friend bool operator==(const message&, const message&) = default;
};

bytes encode_message(const message& m);
// Throws error(malformed_input) on anything that is not a KRPC message.
message decode_message(bytes_view raw);
// True when the payload looks like a KRPC datagram (dictionary with "y").
bool is_krpc(bytes_view raw);

struct dht_config {
    std::size_t k = 8;
    std::size_t alpha = 3;
    std::int64_t query_timeout_ms = 2000;
    int bootstrap_attempts = 3;
    std::int64_t peer_ttl_ms = 30 * 60 * 1000;
    std::int64_t token_rotation_ms = 5 * 60 * 1000;
    std::int64_t refresh_interval_ms = 15 * 60 * 1000;
    std::size_t max_values = 100;
};

struct outgoing {
    compact_peer to;
    message msg;
    friend bool operator==(const outgoing&, const outgoing&) = default;
};

struct lookup_result {
    node_id target;
    std::vector<node_entry> closest;  // responders, nearest first
    std::vector<compact_peer> peers;  // get_peers values, first-seen order
    std::map<node_id, bytes> tokens;  // responder -> announce token
    std::size_t queries_sent = 0;
};

struct bootstrap_result {
    bool ok = false;
    std::size_t table_size = 0;
};

// Single-owner DHT state machine. Every input carries the current time; no
// clock or RNG is read internally, so equal inputs give equal outputs.
class dht_node {
public:
    using lookup_callback = std::function<void(const lookup_result&)>;
    using bootstrap_callback = std::function<void(const bootstrap_result&)>;
    using announce_observer = std::function<void(const infohash&, const compact_peer&, std::int64_t now)>;

    dht_node(node_id id, compact_peer self, bytes secret, dht_config cfg = {});

    const node_id& id() const { return table_.own_id(); }
    const compact_peer& self() const { return self_; }
    const dht_config& config() const { return cfg_; }
    const routing_table& table() const { return table_; }
    routing_table& table() { return table_; }

    std::vector<outgoing> handle_message(const compact_peer& from, const message& msg, std::int64_t now);
    // Expires transactions and stored peers; issues bucket refreshes.
    std::vector<outgoing> tick(std::int64_t now);

    std::vector<outgoing> bootstrap(const std::vector<compact_peer>& routers, std::int64_t now,
                                    bootstrap_callback done = {});
    std::vector<outgoing> find_node(const node_id& target, std::int64_t now, lookup_callback done,
                                    std::vector<node_entry> seeds = {});
    std::vector<outgoing> get_peers(const infohash& hash, std::int64_t now, lookup_callback done,
                                    std::vector<node_entry> seeds = {});
    // get_peers lookup followed by announce_peer to the closest responders.
    std::vector<outgoing> announce(const infohash& hash, std::uint16_t port, std::int64_t now,
                                   std::function<void(std::size_t acknowledged)> done = {});
    // Sends a ping; used to revive entries loaded from dht.dat.
    std::vector<outgoing> ping(const compact_peer& to, std::int64_t now);

    std::vector<compact_peer> stored_peers(const infohash& hash, std::int64_t now) const;
    std::size_t pending_transactions() const { return transactions_.size(); }
    std::size_t active_lookups() const { return lookups_.size(); }
    bool bootstrapping() const { return boot_.has_value(); }

    void set_announce_observer(announce_observer obs) { on_announce_ = std::move(obs); }
    // Content this node serves itself; it lists its own endpoint first in
    // get_peers values for these hashes.
    using local_content = std::function<bool(const infohash&)>;
    void set_local_content(local_content f) { local_ = std::move(f); }

    bytes make_token(const compact_peer& requester, std::int64_t now) const;
    bool valid_token(const compact_peer& requester, bytes_view token, std::int64_t now) const;

private:
    enum class purpose { lookup, bootstrap, announce, ping };

    struct transaction {
        bytes tid;
        compact_peer to;
        std::optional<node_id> to_id;
        msg_kind kind;
        std::int64_t sent_at;
        purpose why;
        std::uint64_t owner = 0;  // lookup or announce id
    };

    struct candidate {
        explicit candidate(node_entry e) : entry(std::move(e)) {}
        node_entry entry;
        enum class status { fresh, inflight, responded, failed } st = status::fresh;
        bytes token;
    };

    struct lookup {
        std::uint64_t id;
        msg_kind kind;  // find_nodes or get_peers
        node_id target;
        std::map<distance, candidate> candidates;
        std::vector<compact_peer> peers;
        std::set<compact_peer> peer_set;
        std::size_t inflight = 0;
        std::size_t queries_sent = 0;
        lookup_callback done;
    };

    struct bootstrap_state {
        std::vector<compact_peer> routers;
        int attempts = 0;
        bool answered = false;
        std::size_t inflight = 0;
        bootstrap_callback done;
    };

    struct announce_state {
        std::size_t pending = 0;
        std::size_t acked = 0;
        std::function<void(std::size_t)> done;
    };

    message make_query(msg_kind kind);
    std::vector<outgoing> flush(std::vector<outgoing> out);
    outgoing send_query(const compact_peer& to, std::optional<node_id> to_id, message q, std::int64_t now,
                        purpose why, std::uint64_t owner);
    std::vector<outgoing> handle_query(const compact_peer& from, const message& msg, std::int64_t now);
    std::vector<outgoing> handle_reply(const compact_peer& from, const message& msg, std::int64_t now);

    std::vector<outgoing> start_lookup(msg_kind kind, const node_id& target, std::int64_t now,
                                       lookup_callback done, std::vector<node_entry> seeds);
    std::vector<outgoing> advance_lookup(std::uint64_t id, std::int64_t now);
    std::vector<outgoing> bootstrap_send(std::int64_t now);
    void bootstrap_finish(bool ok);
    void on_query_failed(const transaction& t, std::int64_t now, std::vector<outgoing>& out);

    bytes token_for_epoch(const compact_peer& requester, std::int64_t epoch) const;

    routing_table table_;
    compact_peer self_;
    bytes secret_;
    dht_config cfg_;
    std::uint32_t next_tid_ = 0;
    std::uint64_t next_owner_ = 1;
    std::map<bytes, transaction> transactions_;
    std::map<std::uint64_t, lookup> lookups_;
    std::map<std::uint64_t, announce_state> announces_;
    std::optional<bootstrap_state> boot_;
    // infohash -> peer -> expiry (ms)
    std::map<infohash, std::map<compact_peer, std::int64_t>> storage_;
    announce_observer on_announce_;
    local_content local_;
    // Messages produced inside completion callbacks; returned by the next
    // public call.
    std::vector<outgoing> queued_;
    std::int64_t now_ = 0;
};

// dht.dat: d2:id20:<id>5:nodesi<count>e5:peers<count*6 bytes>e
struct dht_dat {
    node_id id;
    std::vector<compact_peer> peers;
    friend bool operator==(const dht_dat&, const dht_dat&) = default;
};

bytes save_dht_dat(const dht_dat& dat);
bytes save_dht_dat(const dht_node& node);
dht_dat load_dht_dat(bytes_view raw);

}  // namespace mael::dht
