#include "mael/swarm.hpp"

#include "mael/bencode.hpp"

#include <algorithm>
#include <cmath>

namespace mael::swarm {

std::string to_string(errc e)
{
    switch (e) {
    case errc::malformed_input: return "MalformedInput";
    case errc::no_peers: return "NoPeers";
    case errc::metadata_hash_mismatch: return "MetadataHashMismatch";
    case errc::timeout: return "Timeout";
    }
    return "Unknown";
}

std::string to_string(refusal r)
{
    switch (r) {
    case refusal::ratio_exceeded: return "ratio";
    case refusal::cap_exceeded: return "cap";
    case refusal::throttled: return "throttled";
    }
    return "unknown";
}

// --- wire ----------------------------------------------------------------

namespace {

const char* type_name(msg_type t)
{
    switch (t) {
    case msg_type::handshake: return "hs";
    case msg_type::bitfield: return "bf";
    case msg_type::metadata_request: return "mreq";
    case msg_type::metadata_data: return "md";
    case msg_type::request: return "req";
    case msg_type::piece: return "pc";
    case msg_type::reject: return "rej";
    }
    return "?";
}

std::optional<msg_type> type_from(std::string_view s)
{
    for (auto t : {msg_type::handshake, msg_type::bitfield, msg_type::metadata_request, msg_type::metadata_data,
                   msg_type::request, msg_type::piece, msg_type::reject})
        if (s == type_name(t)) return t;
    return std::nullopt;
}

std::int64_t need_int(const bencode::value& d, const char* key)
{
    const auto* v = d.find(key);
    if (!v || !v->is_int()) throw error(errc::malformed_input, std::string("swarm message lacks integer '") + key + "'");
    return v->as_int();
}

const bytes& need_str(const bencode::value& d, const char* key)
{
    const auto* v = d.find(key);
    if (!v || !v->is_string()) throw error(errc::malformed_input, std::string("swarm message lacks string '") + key + "'");
    return v->as_string();
}

}  // namespace

bytes pack_bitfield(const std::vector<bool>& bits)
{
    bytes out((bits.size() + 7) / 8, '\0');
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) out[i / 8] = static_cast<char>(static_cast<unsigned char>(out[i / 8]) | (0x80u >> (i % 8)));
    return out;
}

std::vector<bool> unpack_bitfield(bytes_view packed, std::size_t count)
{
    if (packed.size() != (count + 7) / 8) throw error(errc::malformed_input, "bitfield length does not match piece count");
    std::vector<bool> out(count);
    for (std::size_t i = 0; i < count; ++i)
        out[i] = (static_cast<unsigned char>(packed[i / 8]) & (0x80u >> (i % 8))) != 0;
    return out;
}

bytes encode(const wire_message& m)
{
    bencode::dict d;
    d["m"] = bencode::value(type_name(m.type));
    d["ih"] = bencode::value(m.hash.to_bytes());
    switch (m.type) {
    case msg_type::handshake:
        d["pid"] = bencode::value(m.peer_id);
        break;
    case msg_type::bitfield:
        d["bf"] = bencode::value(pack_bitfield(m.bitfield));
        d["n"] = bencode::value(static_cast<std::int64_t>(m.bitfield.size()));
        break;
    case msg_type::metadata_request:
    case msg_type::request:
        d["i"] = bencode::value(m.index);
        break;
    case msg_type::metadata_data:
        d["i"] = bencode::value(m.index);
        d["o"] = bencode::value(m.offset);
        d["t"] = bencode::value(m.total);
        d["d"] = bencode::value(m.data);
        break;
    case msg_type::piece:
        d["i"] = bencode::value(m.index);
        d["o"] = bencode::value(m.offset);
        d["d"] = bencode::value(m.data);
        break;
    case msg_type::reject:
        d["i"] = bencode::value(m.index);
        d["r"] = bencode::value(m.reason);
        d["ra"] = bencode::value(m.retry_after_ms);
        break;
    }
    return bencode::encode(bencode::value(std::move(d)));
}

wire_message decode(bytes_view raw)
{
    bencode::value v;
    try {
        v = bencode::decode(raw);
    } catch (const bencode::error& e) {
        throw error(errc::malformed_input, e.what());
    }
    if (!v.is_dict()) throw error(errc::malformed_input, "swarm message is not a dictionary");
    wire_message m;
    auto t = type_from(need_str(v, "m"));
    if (!t) throw error(errc::malformed_input, "unknown swarm message type");
    m.type = *t;
    const auto& ih = need_str(v, "ih");
    if (ih.size() != 20) throw error(errc::malformed_input, "infohash is not 20 bytes");
    m.hash = infohash::from_bytes(ih);
    switch (m.type) {
    case msg_type::handshake:
        m.peer_id = need_str(v, "pid");
        break;
    case msg_type::bitfield: {
        auto n = need_int(v, "n");
        if (n < 0 || n > (1 << 24)) throw error(errc::malformed_input, "bad piece count");
        m.bitfield = unpack_bitfield(need_str(v, "bf"), static_cast<std::size_t>(n));
        break;
    }
    case msg_type::metadata_request:
    case msg_type::request:
        m.index = need_int(v, "i");
        break;
    case msg_type::metadata_data:
        m.index = need_int(v, "i");
        m.offset = need_int(v, "o");
        m.total = need_int(v, "t");
        m.data = need_str(v, "d");
        break;
    case msg_type::piece:
        m.index = need_int(v, "i");
        m.offset = need_int(v, "o");
        m.data = need_str(v, "d");
        break;
    case msg_type::reject:
        m.index = need_int(v, "i");
        m.reason = need_str(v, "r");
        m.retry_after_ms = need_int(v, "ra");
        break;
    }
    if (m.index < 0 || m.offset < 0 || m.total < 0 || m.retry_after_ms < 0)
        throw error(errc::malformed_input, "negative field in swarm message");
    return m;
}

bool is_swarm(bytes_view raw)
{
    try {
        return bencode::dict_value_span(raw, "m").has_value();
    } catch (const bencode::error&) {
        return false;
    }
}

// --- policy --------------------------------------------------------------

std::optional<double> transfer_stats::ratio() const
{
    if (downloaded == 0) return std::nullopt;
    return static_cast<double>(uploaded) / static_cast<double>(downloaded);
}

token_bucket::token_bucket(std::optional<std::int64_t> rate) { set_rate(rate); }

void token_bucket::set_rate(std::optional<std::int64_t> rate)
{
    rate_ = rate;
    tokens_ = rate ? *rate : 0;
}

void token_bucket::refill(std::int64_t now_ms)
{
    auto sec = now_ms / 1000;
    if (sec <= second_) return;
    tokens_ = std::min(*rate_, tokens_ + *rate_ * (sec - second_));
    second_ = sec;
}

std::optional<std::int64_t> token_bucket::admit(std::int64_t bytes, std::int64_t now_ms)
{
    if (!rate_) return std::nullopt;
    refill(now_ms);
    if (tokens_ > 0) {
        tokens_ -= bytes;
        return std::nullopt;
    }
    if (*rate_ == 0) return 1000;
    // Whole seconds until the debt is paid back.
    auto seconds = (-tokens_) / *rate_ + 1;
    return (second_ + seconds) * 1000 - now_ms;
}

serve_decision serve_piece(std::int64_t length, transfer_stats& stats, node_totals& totals,
                           const store::settings& s, bool publisher, token_bucket& bucket, std::int64_t now_ms)
{
    if (s.share_ratio_limit) {
        double limit = *s.share_ratio_limit;
        // Zero means no upload at all; otherwise only the publisher is exempt.
        bool refuse = limit == 0.0 ||
                      (!publisher && static_cast<double>(stats.uploaded) >= limit * static_cast<double>(stats.downloaded));
        if (refuse) return {false, refusal::ratio_exceeded, 5000};
    }
    if (s.transfer_cap && totals.uploaded + totals.downloaded + length > *s.transfer_cap)
        return {false, refusal::cap_exceeded, 60000};
    if (auto wait = bucket.admit(length, now_ms)) return {false, refusal::throttled, *wait};
    stats.uploaded += length;
    totals.uploaded += length;
    return {};
}

std::optional<std::size_t> next_request(const std::vector<bool>& have, const std::vector<bool>& peer_has,
                                        const std::set<std::size_t>& inflight, piece_policy policy,
                                        const std::vector<std::size_t>& availability)
{
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < have.size(); ++i) {
        if (have[i] || i >= peer_has.size() || !peer_has[i] || inflight.count(i)) continue;
        if (policy == piece_policy::sequential) return i;
        auto avail = i < availability.size() ? availability[i] : 0;
        if (!best || avail < availability[*best]) best = i;
    }
    return best;
}

// --- engine --------------------------------------------------------------

engine::engine(compact_peer self, bytes peer_id, engine_config cfg)
    : self_(self), peer_id_(std::move(peer_id)), cfg_(cfg)
{
}

void engine::set_settings(const store::settings& s)
{
    settings_ = s;
    up_bucket_.set_rate(s.upload_rate);
    down_bucket_.set_rate(s.download_rate);
}

void engine::add_torrent(const torrent::torrent_meta& meta, std::vector<bool> have, bool publisher,
                         transfer_stats stats)
{
    auto& t = torrents_[meta.hash];
    t.meta = meta;
    have.resize(meta.info.piece_count(), false);
    t.have = std::move(have);
    t.publisher = publisher;
    t.stats = stats;
}

void engine::remove_torrent(const infohash& h) { torrents_.erase(h); }

std::vector<infohash> engine::torrents() const
{
    std::vector<infohash> out;
    for (const auto& [h, t] : torrents_) out.push_back(h);
    return out;
}

const std::vector<bool>& engine::have(const infohash& h) const { return torrents_.at(h).have; }

bool engine::complete(const infohash& h) const
{
    auto it = torrents_.find(h);
    if (it == torrents_.end()) return false;
    return std::all_of(it->second.have.begin(), it->second.have.end(), [](bool b) { return b; });
}

const transfer_stats& engine::stats(const infohash& h) const { return torrents_.at(h).stats; }
bool engine::publisher(const infohash& h) const { return torrents_.at(h).publisher; }

bool engine::downloading(const infohash& h) const
{
    auto it = torrents_.find(h);
    return it != torrents_.end() && it->second.downloading;
}

std::size_t engine::session_count(const infohash& h) const
{
    auto it = torrents_.find(h);
    return it == torrents_.end() ? 0 : it->second.sessions.size();
}

std::int64_t engine::last_progress(const infohash& h) const
{
    auto it = torrents_.find(h);
    return it == torrents_.end() ? 0 : it->second.last_progress;
}

void engine::send(const compact_peer& to, const wire_message& m)
{
    out_.push_back(outgoing{to, encode(m)});
}

std::vector<outgoing> engine::flush() { return std::exchange(out_, {}); }

// Metadata ---------------------------------------------------------------

std::vector<outgoing> engine::fetch_metadata(const infohash& h, const std::vector<compact_peer>& peers,
                                             std::int64_t now, metadata_callback done)
{
    auto& job = metadata_[h];
    job = metadata_job{};
    for (const auto& p : peers)
        if (p != self_ && std::find(job.peers.begin(), job.peers.end(), p) == job.peers.end()) job.peers.push_back(p);
    job.done = std::move(done);
    metadata_next_peer(h, now);
    return flush();
}

void engine::metadata_next_peer(const infohash& h, std::int64_t now)
{
    auto& job = metadata_.at(h);
    if (job.next >= job.peers.size()) {
        job.result.ok = false;
        if (!job.result.mismatched.empty()) job.result.why = errc::metadata_hash_mismatch;
        else job.result.why = job.peers.empty() ? errc::no_peers : errc::timeout;
        metadata_finish(h);
        return;
    }
    job.current = job.peers[job.next++];
    job.total = -1;
    job.buf.clear();
    job.blocks.clear();
    job.received = 0;
    job.last_activity = now;
    wire_message m;
    m.type = msg_type::metadata_request;
    m.hash = h;
    m.index = 0;
    send(*job.current, m);
}

void engine::metadata_finish(const infohash& h)
{
    auto node = metadata_.extract(h);
    if (node.mapped().done) node.mapped().done(node.mapped().result);
}

void engine::on_metadata(const compact_peer& from, const wire_message& m, std::int64_t now)
{
    auto it = metadata_.find(m.hash);
    if (it == metadata_.end() || it->second.current != from) return;
    auto& job = it->second;
    constexpr std::int64_t max_metadata = 16 << 20;
    if (job.total < 0) {
        if (m.total <= 0 || m.total > max_metadata) {
            job.result.mismatched.push_back(from);
            metadata_next_peer(m.hash, now);
            return;
        }
        job.total = m.total;
        job.buf.assign(static_cast<std::size_t>(m.total), '\0');
        job.blocks.assign((static_cast<std::size_t>(m.total) + cfg_.block_size - 1) / cfg_.block_size, false);
        auto chunks = (static_cast<std::size_t>(m.total) + cfg_.metadata_chunk - 1) / cfg_.metadata_chunk;
        for (std::size_t c = 1; c < chunks; ++c) {
            wire_message req;
            req.type = msg_type::metadata_request;
            req.hash = m.hash;
            req.index = static_cast<std::int64_t>(c);
            send(from, req);
        }
    }
    if (m.total != job.total || m.offset % static_cast<std::int64_t>(cfg_.block_size) != 0 ||
        m.offset + static_cast<std::int64_t>(m.data.size()) > job.total)
        return;
    auto block = static_cast<std::size_t>(m.offset) / cfg_.block_size;
    job.last_activity = now;
    if (job.blocks[block]) return;
    job.blocks[block] = true;
    ++job.received;
    std::copy(m.data.begin(), m.data.end(), job.buf.begin() + m.offset);
    if (job.received < job.blocks.size()) return;

    if (sha1_bytes(job.buf) == m.hash.to_bytes()) {
        job.result.ok = true;
        job.result.info_bytes = std::move(job.buf);
        metadata_finish(m.hash);
    } else {
        job.result.mismatched.push_back(from);
        metadata_next_peer(m.hash, now);
    }
}

void engine::serve_metadata(const compact_peer& from, const wire_message& m)
{
    auto it = torrents_.find(m.hash);
    if (it == torrents_.end()) {
        wire_message rej;
        rej.type = msg_type::reject;
        rej.hash = m.hash;
        rej.index = m.index;
        rej.reason = "unknown_torrent";
        send(from, rej);
        return;
    }
    const auto& info = it->second.meta.info_bytes;
    auto start = static_cast<std::size_t>(m.index) * cfg_.metadata_chunk;
    if (start >= info.size()) return;
    auto end = std::min(info.size(), start + cfg_.metadata_chunk);
    for (auto off = start; off < end; off += cfg_.block_size) {
        wire_message md;
        md.type = msg_type::metadata_data;
        md.hash = m.hash;
        md.index = m.index;
        md.offset = static_cast<std::int64_t>(off);
        md.total = static_cast<std::int64_t>(info.size());
        md.data = info.substr(off, std::min(cfg_.block_size, end - off));
        send(from, md);
    }
}

// Download ---------------------------------------------------------------

std::vector<outgoing> engine::start_download(const infohash& h, const std::vector<compact_peer>& peers,
                                             std::int64_t now)
{
    auto& t = torrents_.at(h);
    t.downloading = !complete(h);
    t.last_progress = now;
    return add_peers(h, peers, now);
}

std::vector<outgoing> engine::add_peers(const infohash& h, const std::vector<compact_peer>& peers, std::int64_t now)
{
    auto it = torrents_.find(h);
    if (it == torrents_.end() || !it->second.downloading) return flush();
    auto& t = it->second;
    for (const auto& p : peers) {
        if (p == self_ || t.banned.count(p) || t.sessions.count(p)) continue;
        if (t.sessions.size() >= cfg_.max_sessions) break;
        auto& s = t.sessions[p];
        s.hs_sent_at = now;
        wire_message hs;
        hs.type = msg_type::handshake;
        hs.hash = h;
        hs.peer_id = peer_id_;
        send(p, hs);
    }
    return flush();
}

void engine::stop_download(const infohash& h)
{
    auto it = torrents_.find(h);
    if (it == torrents_.end()) return;
    it->second.downloading = false;
    it->second.sessions.clear();
    it->second.inflight.clear();
}

void engine::on_bitfield(const compact_peer& from, const wire_message& m, std::int64_t now)
{
    auto it = torrents_.find(m.hash);
    if (it == torrents_.end()) return;
    auto& t = it->second;
    auto s = t.sessions.find(from);
    if (s == t.sessions.end() || m.bitfield.size() != t.have.size()) return;
    s->second.theirs = m.bitfield;
    s->second.handshaked = true;
    fill_requests(m.hash, t, now);
}

void engine::fill_requests(const infohash& h, torrent_state& t, std::int64_t now)
{
    if (!t.downloading) return;
    if (std::all_of(t.have.begin(), t.have.end(), [](bool b) { return b; })) {
        t.downloading = false;
        t.sessions.clear();
        t.inflight.clear();
        return;
    }
    std::vector<std::size_t> availability;
    if (cfg_.policy == piece_policy::rarest_first) {
        availability.assign(t.have.size(), 0);
        for (const auto& [p, s] : t.sessions)
            for (std::size_t i = 0; i < s.theirs.size() && i < availability.size(); ++i) availability[i] += s.theirs[i];
    }
    for (auto& [peer, s] : t.sessions) {
        if (!s.handshaked || s.choked_until > now) continue;
        while (s.inflight < cfg_.pipeline_depth) {
            std::set<std::size_t> busy;
            for (const auto& [i, p] : t.inflight) busy.insert(i);
            auto idx = next_request(t.have, s.theirs, busy, cfg_.policy, availability);
            if (!idx) break;
            auto len = t.meta.info.piece_size(*idx);
            if (down_bucket_.admit(len, now)) return;  // tick retries once tokens return
            inflight_piece ip;
            ip.peer = peer;
            ip.buf.assign(static_cast<std::size_t>(len), '\0');
            ip.blocks.assign((static_cast<std::size_t>(len) + cfg_.block_size - 1) / cfg_.block_size, false);
            ip.last_activity = now;
            t.inflight.emplace(*idx, std::move(ip));
            ++s.inflight;
            wire_message req;
            req.type = msg_type::request;
            req.hash = h;
            req.index = static_cast<std::int64_t>(*idx);
            send(peer, req);
        }
    }
}

void engine::release(torrent_state& t, std::size_t index)
{
    auto it = t.inflight.find(index);
    if (it == t.inflight.end()) return;
    if (auto s = t.sessions.find(it->second.peer); s != t.sessions.end() && s->second.inflight > 0)
        --s->second.inflight;
    t.inflight.erase(it);
}

void engine::drop_session(torrent_state& t, const compact_peer& peer)
{
    std::vector<std::size_t> mine;
    for (const auto& [i, p] : t.inflight)
        if (p.peer == peer) mine.push_back(i);
    for (auto i : mine) release(t, i);
    t.sessions.erase(peer);
}

void engine::on_piece(const compact_peer& from, const wire_message& m, std::int64_t now)
{
    auto it = torrents_.find(m.hash);
    if (it == torrents_.end()) return;
    auto& t = it->second;
    auto index = static_cast<std::size_t>(m.index);
    auto ip = t.inflight.find(index);
    if (ip == t.inflight.end() || ip->second.peer != from) return;
    auto& p = ip->second;
    if (m.offset % static_cast<std::int64_t>(cfg_.block_size) != 0 ||
        static_cast<std::size_t>(m.offset) + m.data.size() > p.buf.size())
        return;
    auto block = static_cast<std::size_t>(m.offset) / cfg_.block_size;
    p.last_activity = now;
    if (p.blocks[block]) return;
    p.blocks[block] = true;
    ++p.received;
    std::copy(m.data.begin(), m.data.end(), p.buf.begin() + m.offset);
    if (p.received < p.blocks.size()) return;

    bytes data = std::move(p.buf);
    release(t, index);
    auto len = static_cast<std::int64_t>(data.size());
    bool ok = sink_ ? sink_(m.hash, index, std::move(data)) : false;
    if (ok) {
        t.have[index] = true;
        t.stats.downloaded += len;
        totals_.downloaded += len;
        t.last_progress = now;
    } else {
        // Hash mismatch: penalize the source.
        t.banned.insert(from);
        drop_session(t, from);
    }
    fill_requests(m.hash, t, now);
}

void engine::on_reject(const compact_peer& from, const wire_message& m, std::int64_t now)
{
    if (auto mj = metadata_.find(m.hash); mj != metadata_.end() && mj->second.current == from) {
        metadata_next_peer(m.hash, now);
        return;
    }
    auto it = torrents_.find(m.hash);
    if (it == torrents_.end()) return;
    auto& t = it->second;
    auto s = t.sessions.find(from);
    if (s == t.sessions.end()) return;
    if (m.reason == "unknown_torrent") {
        drop_session(t, from);
        return;
    }
    auto ip = t.inflight.find(static_cast<std::size_t>(m.index));
    if (ip != t.inflight.end() && ip->second.peer == from) release(t, static_cast<std::size_t>(m.index));
    if (m.reason == "missing" && static_cast<std::size_t>(m.index) < s->second.theirs.size())
        s->second.theirs[static_cast<std::size_t>(m.index)] = false;
    else
        s->second.choked_until = now + std::max<std::int64_t>(m.retry_after_ms, 1);
    fill_requests(m.hash, t, now);
}

// Serving ----------------------------------------------------------------

void engine::serve_handshake(const compact_peer& from, const wire_message& m)
{
    auto it = torrents_.find(m.hash);
    wire_message reply;
    reply.hash = m.hash;
    if (it == torrents_.end()) {
        reply.type = msg_type::reject;
        reply.reason = "unknown_torrent";
    } else {
        reply.type = msg_type::bitfield;
        reply.bitfield = it->second.have;
    }
    send(from, reply);
}

void engine::serve_request(const compact_peer& from, const wire_message& m, std::int64_t now)
{
    wire_message rej;
    rej.type = msg_type::reject;
    rej.hash = m.hash;
    rej.index = m.index;
    auto it = torrents_.find(m.hash);
    if (it == torrents_.end()) {
        rej.reason = "unknown_torrent";
        send(from, rej);
        return;
    }
    auto& t = it->second;
    auto index = static_cast<std::size_t>(m.index);
    std::optional<bytes> data;
    if (index < t.have.size() && t.have[index] && reader_) data = reader_(m.hash, index);
    if (!data) {
        rej.reason = "missing";
        rej.retry_after_ms = 1000;
        send(from, rej);
        return;
    }
    auto decision = serve_piece(static_cast<std::int64_t>(data->size()), t.stats, totals_, settings_, t.publisher,
                                up_bucket_, now);
    if (!decision.ok) {
        rej.reason = to_string(decision.why);
        rej.retry_after_ms = decision.retry_after_ms;
        send(from, rej);
        return;
    }
    for (std::size_t off = 0; off < data->size(); off += cfg_.block_size) {
        wire_message pc;
        pc.type = msg_type::piece;
        pc.hash = m.hash;
        pc.index = m.index;
        pc.offset = static_cast<std::int64_t>(off);
        pc.data = data->substr(off, cfg_.block_size);
        send(from, pc);
    }
}

std::vector<outgoing> engine::handle(const compact_peer& from, bytes_view raw, std::int64_t now)
{
    wire_message m;
    try {
        m = decode(raw);
    } catch (const error&) {
        return {};
    }
    switch (m.type) {
    case msg_type::handshake: serve_handshake(from, m); break;
    case msg_type::metadata_request: serve_metadata(from, m); break;
    case msg_type::request: serve_request(from, m, now); break;
    case msg_type::bitfield: on_bitfield(from, m, now); break;
    case msg_type::metadata_data: on_metadata(from, m, now); break;
    case msg_type::piece: on_piece(from, m, now); break;
    case msg_type::reject: on_reject(from, m, now); break;
    }
    return flush();
}

std::vector<outgoing> engine::tick(std::int64_t now)
{
    std::vector<infohash> stalled;
    for (const auto& [h, job] : metadata_)
        if (job.current && now - job.last_activity >= cfg_.request_timeout_ms) stalled.push_back(h);
    for (const auto& h : stalled) metadata_next_peer(h, now);

    for (auto& [h, t] : torrents_) {
        if (!t.downloading) continue;
        std::vector<std::size_t> expired;
        for (const auto& [i, p] : t.inflight)
            if (now - p.last_activity >= cfg_.request_timeout_ms) expired.push_back(i);
        for (auto i : expired) release(t, i);
        // Re-handshake peers that have not answered or had nothing we need;
        // they may have gained pieces since.
        for (auto& [peer, s] : t.sessions) {
            bool useful = false;
            for (std::size_t i = 0; s.handshaked && i < t.have.size() && !useful; ++i)
                useful = !t.have[i] && i < s.theirs.size() && s.theirs[i];
            if (!useful && now - s.hs_sent_at >= cfg_.rehandshake_ms) {
                s.hs_sent_at = now;
                wire_message hs;
                hs.type = msg_type::handshake;
                hs.hash = h;
                hs.peer_id = peer_id_;
                send(peer, hs);
            }
        }
        fill_requests(h, t, now);
    }
    return flush();
}

}  // namespace mael::swarm
