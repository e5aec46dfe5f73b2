#include "mael/dht.hpp"

#include "mael/bencode.hpp"

#include <algorithm>
#include <charconv>

namespace mael::dht {

// ---------------------------------------------------------------- compact peer

bytes compact_peer::encode() const
{
    bytes out(wire_size, '\0');
    for (std::size_t i = 0; i < 4; ++i) out[i] = static_cast<char>(ip[i]);
    out[4] = static_cast<char>(port >> 8);
    out[5] = static_cast<char>(port & 0xff);
    return out;
}

compact_peer compact_peer::decode(bytes_view raw)
{
    if (raw.size() != wire_size)
        throw peer_error(peer_errc::wrong_length, "compact peer must be 6 bytes, got " + std::to_string(raw.size()));
    compact_peer p;
    for (std::size_t i = 0; i < 4; ++i) p.ip[i] = static_cast<std::uint8_t>(raw[i]);
    p.port = static_cast<std::uint16_t>((static_cast<std::uint8_t>(raw[4]) << 8) | static_cast<std::uint8_t>(raw[5]));
    return p;
}

std::uint32_t compact_peer::ip_u32() const
{
    return (std::uint32_t{ip[0]} << 24) | (std::uint32_t{ip[1]} << 16) | (std::uint32_t{ip[2]} << 8) | ip[3];
}

compact_peer compact_peer::from_u32(std::uint32_t addr, std::uint16_t port)
{
    compact_peer p;
    p.ip = {static_cast<std::uint8_t>(addr >> 24), static_cast<std::uint8_t>(addr >> 16),
            static_cast<std::uint8_t>(addr >> 8), static_cast<std::uint8_t>(addr)};
    p.port = port;
    return p;
}

std::string compact_peer::to_string() const
{
    return std::to_string(ip[0]) + "." + std::to_string(ip[1]) + "." + std::to_string(ip[2]) + "." +
           std::to_string(ip[3]) + ":" + std::to_string(port);
}

std::optional<compact_peer> compact_peer::parse(std::string_view text)
{
    compact_peer p;
    const char* cur = text.data();
    const char* end = text.data() + text.size();
    for (int i = 0; i < 4; ++i) {
        unsigned v = 0;
        auto [next, ec] = std::from_chars(cur, end, v);
        if (ec != std::errc{} || v > 255 || next == end) return std::nullopt;
        p.ip[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v);
        if (*next != (i == 3 ? ':' : '.')) return std::nullopt;
        cur = next + 1;
    }
    unsigned port = 0;
    auto [next, ec] = std::from_chars(cur, end, port);
    if (ec != std::errc{} || next != end || port == 0 || port > 65535) return std::nullopt;
    p.port = static_cast<std::uint16_t>(port);
    return p;
}

// ---------------------------------------------------------------- distance

distance xor_distance(const node_id& a, const node_id& b)
{
    distance d{};
    for (std::size_t i = 0; i < 20; ++i) d[i] = a.data[i] ^ b.data[i];
    return d;
}

int common_prefix_length(const node_id& a, const node_id& b)
{
    for (std::size_t i = 0; i < 20; ++i) {
        std::uint8_t x = a.data[i] ^ b.data[i];
        if (x != 0) {
            int bit = 0;
            while ((x & 0x80) == 0) {
                x = static_cast<std::uint8_t>(x << 1);
                ++bit;
            }
            return static_cast<int>(i) * 8 + bit;
        }
    }
    return 160;
}

namespace {

// 2^exponent as a big-endian 160-bit value; exponent in [0, 159].
distance power_of_two(int exponent)
{
    distance d{};
    d[static_cast<std::size_t>(19 - exponent / 8)] = static_cast<std::uint8_t>(1u << (exponent % 8));
    return d;
}

}  // namespace

// ---------------------------------------------------------------- node entry

bytes node_entry::encode() const { return id.to_bytes() + peer.encode(); }

node_entry node_entry::decode(bytes_view raw)
{
    if (raw.size() != wire_size)
        throw peer_error(peer_errc::wrong_length, "node entry must be 26 bytes, got " + std::to_string(raw.size()));
    node_entry e;
    e.id = node_id::from_bytes(raw.substr(0, 20));
    e.peer = compact_peer::decode(raw.substr(20));
    return e;
}

node_state node_entry::state(std::int64_t now, std::int64_t good_window_ms) const
{
    if (failed_queries >= 2) return node_state::bad;
    if (now - last_seen <= good_window_ms) return node_state::good;
    return node_state::questionable;
}

bytes encode_nodes(const std::vector<node_entry>& entries)
{
    bytes out;
    out.reserve(entries.size() * node_entry::wire_size);
    for (const auto& e : entries) out += e.encode();
    return out;
}

std::vector<node_entry> decode_nodes(bytes_view blob)
{
    if (blob.size() % node_entry::wire_size != 0)
        throw peer_error(peer_errc::wrong_length, "nodes blob is not a multiple of 26 bytes");
    std::vector<node_entry> out;
    for (std::size_t off = 0; off < blob.size(); off += node_entry::wire_size)
        out.push_back(node_entry::decode(blob.substr(off, node_entry::wire_size)));
    return out;
}

// ---------------------------------------------------------------- routing table

routing_table::routing_table(node_id own, std::size_t k) : own_(own), k_(k), buckets_(1) {}

std::size_t routing_table::bucket_index(const node_id& id) const
{
    auto cpl = static_cast<std::size_t>(common_prefix_length(own_, id));
    return std::min(cpl, buckets_.size() - 1);
}

void routing_table::split_last()
{
    std::size_t old_last = buckets_.size() - 1;
    buckets_.emplace_back();
    auto& from = buckets_[old_last].nodes;
    auto& to = buckets_.back().nodes;
    auto it = std::stable_partition(from.begin(), from.end(), [&](const node_entry& e) {
        return static_cast<std::size_t>(common_prefix_length(own_, e.id)) == old_last;
    });
    to.assign(it, from.end());
    from.erase(it, from.end());
    buckets_.back().last_changed = buckets_[old_last].last_changed;
}

bool routing_table::insert(const node_id& id, const compact_peer& peer, std::int64_t now)
{
    if (id == own_) return false;
    while (true) {
        std::size_t b = bucket_index(id);
        auto& nodes = buckets_[b].nodes;
        auto existing = std::find_if(nodes.begin(), nodes.end(), [&](const node_entry& e) { return e.id == id; });
        if (existing != nodes.end()) {
            existing->peer = peer;
            existing->last_seen = now;
            existing->failed_queries = 0;
            buckets_[b].last_changed = now;
            return true;
        }
        if (nodes.size() < k_) {
            nodes.push_back(node_entry{id, peer, now, 0});
            buckets_[b].last_changed = now;
            return true;
        }
        if (b == buckets_.size() - 1 && buckets_.size() < 160) {
            split_last();
            continue;
        }
        auto bad = std::find_if(nodes.begin(), nodes.end(),
                                [&](const node_entry& e) { return e.state(now) == node_state::bad; });
        if (bad != nodes.end()) {
            *bad = node_entry{id, peer, now, 0};
            buckets_[b].last_changed = now;
            return true;
        }
        return false;
    }
}

void routing_table::mark_failed(const node_id& id)
{
    auto& nodes = buckets_[bucket_index(id)].nodes;
    for (auto& e : nodes)
        if (e.id == id) ++e.failed_queries;
}

bool routing_table::remove(const node_id& id)
{
    auto& nodes = buckets_[bucket_index(id)].nodes;
    auto it = std::find_if(nodes.begin(), nodes.end(), [&](const node_entry& e) { return e.id == id; });
    if (it == nodes.end()) return false;
    nodes.erase(it);
    return true;
}

const node_entry* routing_table::find(const node_id& id) const
{
    const auto& nodes = buckets_[bucket_index(id)].nodes;
    auto it = std::find_if(nodes.begin(), nodes.end(), [&](const node_entry& e) { return e.id == id; });
    return it == nodes.end() ? nullptr : &*it;
}

std::vector<node_entry> routing_table::closest(const node_id& target, std::size_t count) const
{
    std::vector<std::pair<distance, const node_entry*>> scored;
    for (const auto& b : buckets_)
        for (const auto& e : b.nodes) scored.emplace_back(xor_distance(e.id, target), &e);
    std::size_t n = std::min(count, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<node_entry> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(*scored[i].second);
    return out;
}

std::vector<node_entry> routing_table::entries() const
{
    std::vector<node_entry> out;
    for (const auto& b : buckets_) out.insert(out.end(), b.nodes.begin(), b.nodes.end());
    return out;
}

std::size_t routing_table::size() const
{
    std::size_t n = 0;
    for (const auto& b : buckets_) n += b.nodes.size();
    return n;
}

std::pair<distance, std::optional<distance>> routing_table::bucket_range(std::size_t index) const
{
    std::optional<distance> upper;
    if (index > 0) upper = power_of_two(160 - static_cast<int>(index));
    if (index + 1 < buckets_.size()) return {power_of_two(159 - static_cast<int>(index)), upper};
    return {distance{}, upper};
}

std::optional<std::string> routing_table::check_invariants() const
{
    std::set<node_id> seen;
    for (std::size_t i = 0; i < buckets_.size(); ++i) {
        const auto& nodes = buckets_[i].nodes;
        if (nodes.size() > k_) return "bucket " + std::to_string(i) + " holds more than k entries";
        auto [lower, upper] = bucket_range(i);
        for (const auto& e : nodes) {
            auto d = xor_distance(e.id, own_);
            if (d < lower || (upper && !(d < *upper)))
                return "entry " + e.id.hex() + " outside range of bucket " + std::to_string(i);
            if (!seen.insert(e.id).second) return "duplicate entry " + e.id.hex();
        }
    }
    return std::nullopt;
}

bool operator==(const routing_table& a, const routing_table& b)
{
    if (a.own_ != b.own_ || a.k_ != b.k_ || a.buckets_.size() != b.buckets_.size()) return false;
    for (std::size_t i = 0; i < a.buckets_.size(); ++i) {
        const auto& x = a.buckets_[i];
        const auto& y = b.buckets_[i];
        if (x.last_changed != y.last_changed || x.nodes.size() != y.nodes.size()) return false;
        for (std::size_t j = 0; j < x.nodes.size(); ++j) {
            const auto& p = x.nodes[j];
            const auto& q = y.nodes[j];
            if (p.id != q.id || p.peer != q.peer || p.last_seen != q.last_seen || p.failed_queries != q.failed_queries)
                return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------- KRPC codec

namespace {

const char* query_wire_name(msg_kind k)
{
    switch (k) {
    case msg_kind::ping: return "ping";
    case msg_kind::find_nodes: return "find_nodes";
    case msg_kind::get_peers: return "get_peers";
    case msg_kind::announce_peer: return "announce_peer";
    default: return "";
    }
}

msg_kind query_kind(const std::string& name)
{
    if (name == "ping") return msg_kind::ping;
    // "find_node" is the BEP005 spelling; both are accepted.
    if (name == "find_nodes" || name == "find_node") return msg_kind::find_nodes;
    if (name == "get_peers") return msg_kind::get_peers;
    if (name == "announce_peer") return msg_kind::announce_peer;
    return msg_kind::unknown_query;
}

[[noreturn]] void malformed(const std::string& what) { throw error(errc::malformed_input, what); }

const bencode::value* opt_string(const bencode::value& d, const char* key)
{
    const auto* v = d.find(key);
    if (v && !v->is_string()) malformed(std::string("'") + key + "' is not a string");
    return v;
}

}  // namespace

bool is_krpc(bytes_view raw)
{
    try {
        auto v = bencode::decode(raw);
        return v.find("y") != nullptr;
    } catch (const bencode::error&) {
        return false;
    }
}

bytes encode_message(const message& m)
{
    bencode::dict top;
    top["t"] = bencode::value(m.transaction_id);
    if (m.kind == msg_kind::error) {
        top["y"] = "e";
        top["e"] = bencode::value(bencode::list{bencode::value(m.error_code), bencode::value(m.error_message)});
        return bencode::encode(bencode::value(std::move(top)));
    }
    bencode::dict body;
    body["id"] = bencode::value(m.sender.to_bytes());
    if (m.kind == msg_kind::response) {
        top["y"] = "r";
        if (!m.nodes.empty()) body["nodes"] = bencode::value(m.nodes);
        if (!m.values.empty()) {
            bencode::list vals;
            for (const auto& p : m.values) vals.emplace_back(p.encode());
            body["values"] = bencode::value(std::move(vals));
        }
        if (m.token) body["token"] = bencode::value(*m.token);
        top["r"] = bencode::value(std::move(body));
    } else {
        top["y"] = "q";
        top["q"] = bencode::value(m.kind == msg_kind::unknown_query ? m.query_name
                                                                    : std::string(query_wire_name(m.kind)));
        if (m.target) body["target"] = bencode::value(m.target->to_bytes());
        if (m.info_hash) body["info_hash"] = bencode::value(m.info_hash->to_bytes());
        if (m.port) body["port"] = bencode::value(std::int64_t{*m.port});
        if (m.token) body["token"] = bencode::value(*m.token);
        top["a"] = bencode::value(std::move(body));
    }
    return bencode::encode(bencode::value(std::move(top)));
}

message decode_message(bytes_view raw)
{
    bencode::value root;
    try {
        root = bencode::decode(raw);
    } catch (const bencode::error& e) {
        malformed(e.what());
    }
    if (!root.is_dict()) malformed("KRPC message is not a dictionary");
    message m;
    const auto* t = opt_string(root, "t");
    const auto* y = opt_string(root, "y");
    if (!t || !y) malformed("KRPC message lacks 't' or 'y'");
    m.transaction_id = t->as_string();
    const auto& type = y->as_string();

    auto read_id = [&](const bencode::value& body) {
        const auto* id = opt_string(body, "id");
        if (!id || id->as_string().size() != 20) malformed("KRPC body lacks a 20-byte 'id'");
        m.sender = node_id::from_bytes(id->as_string());
    };

    if (type == "e") {
        m.kind = msg_kind::error;
        const auto* e = root.find("e");
        if (e && e->is_list() && e->as_list().size() >= 2 && e->as_list()[0].is_int() &&
            e->as_list()[1].is_string()) {
            m.error_code = e->as_list()[0].as_int();
            m.error_message = e->as_list()[1].as_string();
        }
        return m;
    }
    if (type == "r") {
        m.kind = msg_kind::response;
        const auto* r = root.find("r");
        if (!r || !r->is_dict()) malformed("response lacks 'r'");
        read_id(*r);
        if (const auto* nodes = opt_string(*r, "nodes")) {
            if (nodes->as_string().size() % node_entry::wire_size != 0)
                malformed("'nodes' is not a multiple of 26 bytes");
            m.nodes = nodes->as_string();
        }
        if (const auto* values = r->find("values")) {
            if (!values->is_list()) malformed("'values' is not a list");
            for (const auto& v : values->as_list()) {
                if (!v.is_string() || v.as_string().size() != compact_peer::wire_size)
                    malformed("peer value is not 6 bytes");
                m.values.push_back(compact_peer::decode(v.as_string()));
            }
        }
        if (const auto* token = opt_string(*r, "token")) m.token = token->as_string();
        return m;
    }
    if (type == "q") {
        const auto* q = opt_string(root, "q");
        const auto* a = root.find("a");
        if (!q || !a || !a->is_dict()) malformed("query lacks 'q' or 'a'");
        m.query_name = q->as_string();
        m.kind = query_kind(m.query_name);
        read_id(*a);
        if (const auto* target = opt_string(*a, "target"); target && target->as_string().size() == 20)
            m.target = node_id::from_bytes(target->as_string());
        if (const auto* ih = opt_string(*a, "info_hash"); ih && ih->as_string().size() == 20)
            m.info_hash = infohash::from_bytes(ih->as_string());
        if (const auto* port = a->find("port"); port && port->is_int() && port->as_int() > 0 &&
                                                 port->as_int() <= 65535)
            m.port = static_cast<std::uint16_t>(port->as_int());
        if (const auto* token = opt_string(*a, "token")) m.token = token->as_string();
        return m;
    }
    malformed("unknown KRPC message type '" + type + "'");
}

// ---------------------------------------------------------------- node

dht_node::dht_node(node_id id, compact_peer self, bytes secret, dht_config cfg)
    : table_(id, cfg.k), self_(self), secret_(std::move(secret)), cfg_(cfg)
{
}

bytes dht_node::token_for_epoch(const compact_peer& requester, std::int64_t epoch) const
{
    bytes input = secret_;
    for (int shift = 56; shift >= 0; shift -= 8) input.push_back(static_cast<char>((epoch >> shift) & 0xff));
    for (auto b : requester.ip) input.push_back(static_cast<char>(b));
    return sha1_bytes(input).substr(0, 8);
}

bytes dht_node::make_token(const compact_peer& requester, std::int64_t now) const
{
    return token_for_epoch(requester, now / cfg_.token_rotation_ms);
}

bool dht_node::valid_token(const compact_peer& requester, bytes_view token, std::int64_t now) const
{
    std::int64_t epoch = now / cfg_.token_rotation_ms;
    return token == token_for_epoch(requester, epoch) || token == token_for_epoch(requester, epoch - 1);
}

message dht_node::make_query(msg_kind kind)
{
    message q;
    q.kind = kind;
    q.query_name = query_wire_name(kind);
    q.sender = id();
    std::uint32_t n = next_tid_++;
    q.transaction_id = bytes{static_cast<char>((n >> 8) & 0xff), static_cast<char>(n & 0xff)};
    // Skip ids still in flight after wraparound.
    while (transactions_.count(q.transaction_id)) {
        n = next_tid_++;
        q.transaction_id = bytes{static_cast<char>((n >> 8) & 0xff), static_cast<char>(n & 0xff)};
    }
    return q;
}

outgoing dht_node::send_query(const compact_peer& to, std::optional<node_id> to_id, message q, std::int64_t now,
                              purpose why, std::uint64_t owner)
{
    transactions_[q.transaction_id] = transaction{q.transaction_id, to, to_id, q.kind, now, why, owner};
    return outgoing{to, std::move(q)};
}

std::vector<outgoing> dht_node::handle_message(const compact_peer& from, const message& msg, std::int64_t now)
{
    now_ = now;
    auto out = msg.is_query() ? handle_query(from, msg, now) : handle_reply(from, msg, now);
    return flush(std::move(out));
}

std::vector<outgoing> dht_node::handle_query(const compact_peer& from, const message& msg, std::int64_t now)
{
    auto error_reply = [&](std::int64_t code, std::string text) {
        message e;
        e.kind = msg_kind::error;
        e.transaction_id = msg.transaction_id;
        e.error_code = code;
        e.error_message = std::move(text);
        return std::vector<outgoing>{outgoing{from, std::move(e)}};
    };

    switch (msg.kind) {
    case msg_kind::unknown_query: return error_reply(204, "Method Unknown");
    case msg_kind::find_nodes:
        if (!msg.target) return error_reply(203, "find_nodes requires a 20-byte target");
        break;
    case msg_kind::get_peers:
        if (!msg.info_hash) return error_reply(203, "get_peers requires a 20-byte info_hash");
        break;
    case msg_kind::announce_peer:
        if (!msg.info_hash || !msg.port || !msg.token) return error_reply(203, "announce_peer missing arguments");
        if (!valid_token(from, *msg.token, now)) return error_reply(203, "bad token");
        break;
    default: break;
    }

    table_.insert(msg.sender, from, now);

    message r;
    r.kind = msg_kind::response;
    r.transaction_id = msg.transaction_id;
    r.sender = id();
    switch (msg.kind) {
    case msg_kind::find_nodes: r.nodes = encode_nodes(table_.closest(*msg.target, cfg_.k)); break;
    case msg_kind::get_peers: {
        r.token = make_token(from, now);
        r.values = stored_peers(*msg.info_hash, now);
        if (local_ && local_(*msg.info_hash)) {
            std::erase(r.values, self_);
            r.values.insert(r.values.begin(), self_);
        }
        if (r.values.size() > cfg_.max_values) r.values.resize(cfg_.max_values);
        if (r.values.empty()) r.nodes = encode_nodes(table_.closest(as_node_id(*msg.info_hash), cfg_.k));
        break;
    }
    case msg_kind::announce_peer: {
        compact_peer announced = from;
        announced.port = *msg.port;
        storage_[*msg.info_hash][announced] = now + cfg_.peer_ttl_ms;
        if (on_announce_) on_announce_(*msg.info_hash, announced, now);
        break;
    }
    default: break;
    }
    return {outgoing{from, std::move(r)}};
}

std::vector<outgoing> dht_node::handle_reply(const compact_peer& from, const message& msg, std::int64_t now)
{
    std::vector<outgoing> out;
    auto it = transactions_.find(msg.transaction_id);
    if (it == transactions_.end() || it->second.to != from) return out;
    transaction t = it->second;
    transactions_.erase(it);

    if (msg.kind == msg_kind::error) {
        // An error reply proves liveness but carries no routing data.
        switch (t.why) {
        case purpose::lookup:
            if (auto lk = lookups_.find(t.owner); lk != lookups_.end()) {
                if (t.to_id) {
                    auto c = lk->second.candidates.find(xor_distance(*t.to_id, lk->second.target));
                    if (c != lk->second.candidates.end()) c->second.st = candidate::status::failed;
                }
                --lk->second.inflight;
                auto more = advance_lookup(t.owner, now);
                out.insert(out.end(), more.begin(), more.end());
            }
            break;
        case purpose::announce:
            if (auto an = announces_.find(t.owner); an != announces_.end()) {
                if (--an->second.pending == 0) {
                    auto done = std::move(an->second.done);
                    std::size_t acked = an->second.acked;
                    announces_.erase(an);
                    if (done) done(acked);
                }
            }
            break;
        case purpose::bootstrap:
            on_query_failed(t, now, out);
            break;
        case purpose::ping: break;
        }
        return out;
    }

    table_.insert(msg.sender, from, now);

    std::vector<node_entry> learned;
    if (!msg.nodes.empty()) {
        try {
            learned = decode_nodes(msg.nodes);
        } catch (const peer_error&) {
            learned.clear();
        }
    }

    switch (t.why) {
    case purpose::bootstrap: {
        if (!boot_) break;
        --boot_->inflight;
        if (boot_->answered) break;
        boot_->answered = true;
        node_entry router{msg.sender, from, now, 0};
        learned.push_back(router);
        auto more = find_node(id(), now, [this](const lookup_result&) { bootstrap_finish(true); }, learned);
        out.insert(out.end(), more.begin(), more.end());
        break;
    }
    case purpose::lookup: {
        auto lk = lookups_.find(t.owner);
        if (lk == lookups_.end()) break;
        auto& l = lk->second;
        --l.inflight;
        auto d = xor_distance(msg.sender, l.target);
        auto cit = l.candidates.find(d);
        if (cit == l.candidates.end()) {
            cit = l.candidates.emplace(d, candidate{node_entry{msg.sender, from, now, 0}}).first;
        }
        cit->second.st = candidate::status::responded;
        if (msg.token) cit->second.token = *msg.token;
        for (const auto& e : learned) {
            if (e.id == id()) continue;
            l.candidates.try_emplace(xor_distance(e.id, l.target), candidate{e});
        }
        for (const auto& p : msg.values) {
            if (l.peer_set.insert(p).second) l.peers.push_back(p);
        }
        auto more = advance_lookup(t.owner, now);
        out.insert(out.end(), more.begin(), more.end());
        break;
    }
    case purpose::announce: {
        auto an = announces_.find(t.owner);
        if (an == announces_.end()) break;
        ++an->second.acked;
        if (--an->second.pending == 0) {
            auto done = std::move(an->second.done);
            std::size_t acked = an->second.acked;
            announces_.erase(an);
            if (done) done(acked);
        }
        break;
    }
    case purpose::ping: break;
    }
    return out;
}

void dht_node::on_query_failed(const transaction& t, std::int64_t now, std::vector<outgoing>& out)
{
    if (t.to_id) table_.mark_failed(*t.to_id);
    switch (t.why) {
    case purpose::bootstrap:
        if (!boot_) break;
        --boot_->inflight;
        if (!boot_->answered && boot_->inflight == 0) {
            if (boot_->attempts < cfg_.bootstrap_attempts) {
                auto more = bootstrap_send(now);
                out.insert(out.end(), more.begin(), more.end());
            } else {
                bootstrap_finish(false);
            }
        }
        break;
    case purpose::lookup: {
        auto lk = lookups_.find(t.owner);
        if (lk == lookups_.end()) break;
        --lk->second.inflight;
        if (t.to_id) {
            auto cit = lk->second.candidates.find(xor_distance(*t.to_id, lk->second.target));
            if (cit != lk->second.candidates.end()) cit->second.st = candidate::status::failed;
        }
        auto more = advance_lookup(t.owner, now);
        out.insert(out.end(), more.begin(), more.end());
        break;
    }
    case purpose::announce: {
        auto an = announces_.find(t.owner);
        if (an == announces_.end()) break;
        if (--an->second.pending == 0) {
            auto done = std::move(an->second.done);
            std::size_t acked = an->second.acked;
            announces_.erase(an);
            if (done) done(acked);
        }
        break;
    }
    case purpose::ping: break;
    }
}

std::vector<outgoing> dht_node::tick(std::int64_t now)
{
    std::vector<outgoing> out;
    now_ = now;

    std::vector<transaction> expired;
    for (auto it = transactions_.begin(); it != transactions_.end();) {
        if (now - it->second.sent_at >= cfg_.query_timeout_ms) {
            expired.push_back(it->second);
            it = transactions_.erase(it);
        } else {
            ++it;
        }
    }
    for (const auto& t : expired) on_query_failed(t, now, out);

    for (auto it = storage_.begin(); it != storage_.end();) {
        auto& peers = it->second;
        std::erase_if(peers, [now](const auto& kv) { return kv.second <= now; });
        it = peers.empty() ? storage_.erase(it) : std::next(it);
    }

    if (!boot_ && table_.size() > 0) {
        for (std::size_t b = 0; b < table_.bucket_count(); ++b) {
            if (now - table_.bucket_last_changed(b) < cfg_.refresh_interval_ms) continue;
            table_.touch_bucket(b, now);
            // Refresh target: shares exactly b prefix bits with our id (or
            // more, for the last bucket), remaining bits pseudo-random.
            bytes seed = id().to_bytes();
            for (int shift = 56; shift >= 0; shift -= 8) seed.push_back(static_cast<char>((now >> shift) & 0xff));
            seed.push_back(static_cast<char>(b));
            auto noise = sha1(seed);
            node_id target = id();
            bool last = b + 1 == table_.bucket_count();
            std::size_t from_bit = last ? b : b + 1;
            for (std::size_t bit = from_bit; bit < 160; ++bit) {
                std::uint8_t mask = static_cast<std::uint8_t>(0x80u >> (bit % 8));
                target.data[bit / 8] = static_cast<std::uint8_t>((target.data[bit / 8] & ~mask) | (noise[bit / 8] & mask));
            }
            if (!last) target.data[b / 8] ^= static_cast<std::uint8_t>(0x80u >> (b % 8));
            auto more = find_node(target, now, {});
            out.insert(out.end(), more.begin(), more.end());
        }
    }
    return flush(std::move(out));
}

std::vector<outgoing> dht_node::bootstrap(const std::vector<compact_peer>& routers, std::int64_t now,
                                          bootstrap_callback done)
{
    now_ = now;
    boot_ = bootstrap_state{routers, 0, false, 0, std::move(done)};
    if (routers.empty()) {
        bootstrap_finish(false);
        return flush({});
    }
    return flush(bootstrap_send(now));
}

std::vector<outgoing> dht_node::bootstrap_send(std::int64_t now)
{
    std::vector<outgoing> out;
    ++boot_->attempts;
    for (const auto& r : boot_->routers) {
        auto q = make_query(msg_kind::find_nodes);
        q.target = id();
        out.push_back(send_query(r, std::nullopt, std::move(q), now, purpose::bootstrap, 0));
        ++boot_->inflight;
    }
    return out;
}

void dht_node::bootstrap_finish(bool ok)
{
    if (!boot_) return;
    auto done = std::move(boot_->done);
    boot_.reset();
    if (done) done(bootstrap_result{ok, table_.size()});
}

std::vector<outgoing> dht_node::find_node(const node_id& target, std::int64_t now, lookup_callback done,
                                          std::vector<node_entry> seeds)
{
    now_ = now;
    return flush(start_lookup(msg_kind::find_nodes, target, now, std::move(done), std::move(seeds)));
}

std::vector<outgoing> dht_node::get_peers(const infohash& hash, std::int64_t now, lookup_callback done,
                                          std::vector<node_entry> seeds)
{
    now_ = now;
    return flush(start_lookup(msg_kind::get_peers, as_node_id(hash), now, std::move(done), std::move(seeds)));
}

std::vector<outgoing> dht_node::start_lookup(msg_kind kind, const node_id& target, std::int64_t now,
                                             lookup_callback done, std::vector<node_entry> seeds)
{
    std::uint64_t lid = next_owner_++;
    lookup l;
    l.id = lid;
    l.kind = kind;
    l.target = target;
    l.done = std::move(done);
    if (seeds.empty()) seeds = table_.closest(target, cfg_.k);
    for (const auto& s : seeds) {
        if (s.id == id()) continue;
        l.candidates.try_emplace(xor_distance(s.id, target), candidate{s});
    }
    lookups_.emplace(lid, std::move(l));
    return advance_lookup(lid, now);
}

std::vector<outgoing> dht_node::advance_lookup(std::uint64_t lid, std::int64_t now)
{
    std::vector<outgoing> out;
    auto it = lookups_.find(lid);
    if (it == lookups_.end()) return out;
    auto& l = it->second;

    std::size_t considered = 0;
    for (auto& [d, c] : l.candidates) {
        if (c.st == candidate::status::failed) continue;
        if (considered++ >= cfg_.k) break;
        if (c.st != candidate::status::fresh) continue;
        if (l.inflight >= cfg_.alpha) break;
        auto q = make_query(l.kind);
        if (l.kind == msg_kind::find_nodes) q.target = l.target;
        else q.info_hash = infohash{l.target.data};
        out.push_back(send_query(c.entry.peer, c.entry.id, std::move(q), now, purpose::lookup, lid));
        c.st = candidate::status::inflight;
        ++l.inflight;
        ++l.queries_sent;
    }

    if (l.inflight == 0) {
        lookup finished = std::move(l);
        lookups_.erase(it);
        lookup_result r;
        r.target = finished.target;
        r.peers = std::move(finished.peers);
        r.queries_sent = finished.queries_sent;
        for (const auto& [d, c] : finished.candidates) {
            if (c.st != candidate::status::responded) continue;
            if (r.closest.size() >= cfg_.k) break;
            r.closest.push_back(c.entry);
            if (!c.token.empty()) r.tokens[c.entry.id] = c.token;
        }
        if (finished.done) finished.done(r);
    }
    return out;
}

std::vector<outgoing> dht_node::announce(const infohash& hash, std::uint16_t port, std::int64_t now,
                                         std::function<void(std::size_t)> done)
{
    now_ = now;
    std::uint64_t aid = next_owner_++;
    announces_[aid] = announce_state{0, 0, std::move(done)};
    auto out = get_peers(hash, now, [this, aid, hash, port](const lookup_result& r) {
        auto an = announces_.find(aid);
        if (an == announces_.end()) return;
        for (const auto& e : r.closest) {
            auto tok = r.tokens.find(e.id);
            if (tok == r.tokens.end()) continue;
            auto q = make_query(msg_kind::announce_peer);
            q.info_hash = hash;
            q.port = port;
            q.token = tok->second;
            queued_.push_back(send_query(e.peer, e.id, std::move(q), now_, purpose::announce, aid));
            ++an->second.pending;
        }
        if (an->second.pending == 0) {
            auto cb = std::move(an->second.done);
            announces_.erase(an);
            if (cb) cb(0);
        }
    });
    return flush(std::move(out));
}

std::vector<outgoing> dht_node::ping(const compact_peer& to, std::int64_t now)
{
    now_ = now;
    auto q = make_query(msg_kind::ping);
    return flush({send_query(to, std::nullopt, std::move(q), now, purpose::ping, 0)});
}

std::vector<outgoing> dht_node::flush(std::vector<outgoing> out)
{
    if (!queued_.empty()) {
        out.insert(out.end(), std::make_move_iterator(queued_.begin()), std::make_move_iterator(queued_.end()));
        queued_.clear();
    }
    return out;
}

std::vector<compact_peer> dht_node::stored_peers(const infohash& hash, std::int64_t now) const
{
    std::vector<compact_peer> out;
    auto it = storage_.find(hash);
    if (it == storage_.end()) return out;
    for (const auto& [peer, expiry] : it->second)
        if (expiry > now) out.push_back(peer);
    return out;
}

// ---------------------------------------------------------------- dht.dat

bytes save_dht_dat(const dht_dat& dat)
{
    bytes peers;
    for (const auto& p : dat.peers) peers += p.encode();
    bencode::dict d;
    d["id"] = bencode::value(dat.id.to_bytes());
    d["nodes"] = bencode::value(static_cast<std::int64_t>(dat.peers.size()));
    d["peers"] = bencode::value(std::move(peers));
    return bencode::encode(bencode::value(std::move(d)));
}

bytes save_dht_dat(const dht_node& node)
{
    dht_dat dat;
    dat.id = node.id();
    for (const auto& e : node.table().entries()) dat.peers.push_back(e.peer);
    return save_dht_dat(dat);
}

dht_dat load_dht_dat(bytes_view raw)
{
    bencode::value root;
    try {
        root = bencode::decode(raw);
    } catch (const bencode::error& e) {
        throw error(errc::malformed_input, std::string("dht.dat: ") + e.what());
    }
    const auto* id = root.find("id");
    const auto* peers = root.find("peers");
    if (!id || !id->is_string() || !peers || !peers->is_string())
        throw error(errc::malformed_input, "dht.dat lacks 'id' or 'peers'");
    if (id->as_string().size() != 20)
        throw error(errc::bad_id_length, "dht.dat id is " + std::to_string(id->as_string().size()) + " bytes");
    const auto& blob = peers->as_string();
    if (blob.size() % compact_peer::wire_size != 0)
        throw error(errc::peers_blob_not_multiple_of_6, "dht.dat peers blob is " + std::to_string(blob.size()) + " bytes");
    dht_dat dat;
    dat.id = node_id::from_bytes(id->as_string());
    for (std::size_t off = 0; off < blob.size(); off += compact_peer::wire_size)
        dat.peers.push_back(compact_peer::decode(bytes_view(blob).substr(off, compact_peer::wire_size)));
    return dat;
}

}  // namespace mael::dht
