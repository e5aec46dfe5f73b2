#include "mael/forensics.hpp"

#include "mael/bencode.hpp"
#include "mael/torrent.hpp"

#include <json.hpp>

#include <algorithm>
#include <ctime>
#include <fcntl.h>
#include <sstream>
#include <unistd.h>

namespace mael::forensics {

using json = nlohmann::ordered_json;

std::string to_string(event_kind k)
{
    switch (k) {
    case event_kind::torrent_first_processed: return "torrent_first_processed";
    case event_kind::piece_cached: return "piece_cached";
    case event_kind::settings_changed: return "settings_changed";
    case event_kind::dht_snapshot: return "dht_snapshot";
    }
    return "unknown";
}

std::string to_string(uninstall_mode m)
{
    switch (m) {
    case uninstall_mode::history_kept: return "history_kept";
    case uninstall_mode::history_removed: return "history_removed";
    case uninstall_mode::unknown: return "unknown";
    case uninstall_mode::no_evidence: return "no_evidence";
    }
    return "unknown";
}

std::string utc(std::int64_t seconds)
{
    std::time_t t = static_cast<std::time_t>(seconds);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

namespace {

std::vector<fs::directory_entry> sorted_entries(const fs::path& dir)
{
    std::vector<fs::directory_entry> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) out.push_back(e);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path() < b.path(); });
    return out;
}

std::string rel(const fs::path& p, const fs::path& root) { return fs::relative(p, root).generic_string(); }

std::string upper(std::string s)
{
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

dht_record read_dht(const fs::path& path, const fs::path& root, report& r)
{
    dht_record d;
    d.path = rel(path, root);
    d.mtime = store::get_mtime(path);
    auto raw = store::read_file(path);
    if (!raw) {
        r.anomalies.push_back({d.path, "unreadable"});
        return d;
    }
    bencode::decode_result dec;
    try {
        dec = bencode::decode(*raw, bencode::decode_options{true});
    } catch (const bencode::error& e) {
        r.anomalies.push_back({d.path, std::string("malformed bencode: ") + e.what()});
        return d;
    }
    for (const auto& v : dec.violations)
        r.anomalies.push_back({d.path, "non-canonical bencode at byte " + std::to_string(v.offset) + ": " + v.what});
    const auto& root_v = dec.root;
    if (const auto* id = root_v.find("id"); id && id->is_string() && id->as_string().size() == 20)
        d.id = dht::node_id::from_bytes(id->as_string());
    else
        r.anomalies.push_back({d.path, "missing or malformed 20-byte id"});
    if (const auto* n = root_v.find("nodes"); n && n->is_int()) d.declared_count = n->as_int();
    const auto* peers = root_v.find("peers");
    if (!peers || !peers->is_string()) {
        r.anomalies.push_back({d.path, "missing peers blob"});
        return d;
    }
    const auto& blob = peers->as_string();
    std::size_t stride = 0;
    if (d.declared_count && *d.declared_count > 0) {
        auto n = static_cast<std::size_t>(*d.declared_count);
        if (blob.size() == n * dht::node_entry::wire_size) stride = dht::node_entry::wire_size;
        else if (blob.size() == n * dht::compact_peer::wire_size) stride = dht::compact_peer::wire_size;
        else r.anomalies.push_back({d.path, "peers blob of " + std::to_string(blob.size()) + " bytes disagrees with nodes count " + std::to_string(n)});
    }
    if (stride == 0) {
        bool fits26 = blob.size() % 26 == 0, fits6 = blob.size() % 6 == 0;
        if (fits26) stride = 26;
        else if (fits6) stride = 6;
        if (fits26 && fits6 && !blob.empty())
            r.anomalies.push_back({d.path, "stride ambiguity: " + std::to_string(blob.size()) + " bytes fit both 26- and 6-byte entries; read as 26"});
    }
    if (stride == 0) {
        r.anomalies.push_back({d.path, "peers blob of " + std::to_string(blob.size()) + " bytes fits neither 26- nor 6-byte entries"});
        stride = 6;
    }
    d.stride = stride;
    r.notes.push_back(d.path + ": " + std::to_string(stride) + "-byte entries");
    for (std::size_t off = 0; off + stride <= blob.size(); off += stride) {
        auto entry = bytes_view(blob).substr(off, stride);
        if (stride == 26) d.node_ids.push_back(dht::node_id::from_bytes(entry.substr(0, 20)));
        d.peers.push_back(dht::compact_peer::decode(entry.substr(stride - 6)));
    }
    return d;
}

settings_record read_settings(const fs::path& path, const fs::path& root, report& r)
{
    settings_record s;
    s.path = rel(path, root);
    auto raw = store::read_file(path);
    if (!raw) {
        r.anomalies.push_back({s.path, "unreadable"});
        return s;
    }
    try {
        auto dec = bencode::decode(*raw, bencode::decode_options{true});
        for (const auto& v : dec.violations)
            r.anomalies.push_back({s.path, "non-canonical bencode at byte " + std::to_string(v.offset) + ": " + v.what});
    } catch (const bencode::error&) {
    }
    try {
        s.values = store::load_settings(bytes_view(*raw));
    } catch (const std::exception& e) {
        r.anomalies.push_back({s.path, std::string("unparseable settings: ") + e.what()});
        return s;
    }
    store::settings d;
    const auto& v = s.values;
    if (v.cache_size_bytes != d.cache_size_bytes) s.non_default.push_back("cache_size");
    if (v.share_ratio_limit != d.share_ratio_limit) s.non_default.push_back("share_ratio_limit");
    if (v.upload_rate) s.non_default.push_back("upload_rate");
    if (v.download_rate) s.non_default.push_back("download_rate");
    if (v.transfer_cap) s.non_default.push_back("transfer_cap");
    if (v.proxy) s.non_default.push_back("proxy");
    if (v.send_stats != d.send_stats) s.non_default.push_back("send_stats");
    if (v.background_seed != d.background_seed) s.non_default.push_back("background_seed");
    for (const auto& [k, val] : v.extra) s.unknown_keys.push_back(k);
    return s;
}

struct piece_file {
    std::size_t index;
    fs::path path;
};

std::vector<piece_file> piece_files(const fs::path& dir)
{
    std::vector<piece_file> out;
    for (const auto& e : sorted_entries(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".piece") continue;
        auto stem = e.path().stem().string();
        if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char c) { return std::isdigit(c); }))
            continue;
        out.push_back({static_cast<std::size_t>(std::stoull(stem)), e.path()});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    return out;
}

std::optional<torrent::torrent_meta> find_torrent(const fs::path& root, const infohash& h)
{
    auto direct = root / (h.hex() + ".torrent");
    if (auto raw = store::read_file(direct)) try {
            auto m = torrent::parse_torrent(*raw);
            if (m.hash == h) return m;
        } catch (const std::exception&) {
        }
    for (const auto& e : sorted_entries(root)) {
        if (!e.is_regular_file() || e.path().extension() != ".torrent" || e.path() == direct) continue;
        if (auto raw = store::read_file(e.path())) try {
                auto m = torrent::parse_torrent(*raw);
                if (m.hash == h) return m;
            } catch (const std::exception&) {
            }
    }
    return std::nullopt;
}

std::optional<fs::path> find_cache_dir(const fs::path& root, const infohash& h)
{
    for (const auto& e : sorted_entries(root / "cache")) {
        if (!e.is_directory()) continue;
        if (auto parsed = store::parse_cache_dir_name(e.path().filename().string()); parsed && parsed->second == h)
            return e.path();
    }
    return std::nullopt;
}

int kind_rank(event_kind k) { return static_cast<int>(k); }

}  // namespace

report inspect(const fs::path& root)
{
    if (!fs::is_directory(root)) throw error(errc::not_a_directory, root.string() + " is not a directory");
    report r;
    r.root = root.string();

    std::map<infohash, torrent_record> torrents;
    auto record_for = [&](const infohash& h) -> torrent_record& {
        auto& t = torrents[h];
        t.hash = h;
        return t;
    };

    for (const auto& e : sorted_entries(root)) {
        if (!e.is_regular_file()) continue;
        auto path = e.path();
        auto name = path.filename().string();
        auto rp = rel(path, root);
        auto ext = path.extension().string();
        if (name == "dht.dat") {
            r.dht = read_dht(path, root, r);
        } else if (name == "settings.dat") {
            r.settings = read_settings(path, root, r);
        } else if (name == "aliases.dat") {
            if (auto raw = store::read_file(path)) try {
                    r.aliases = bundle::load_aliases(*raw);
                } catch (const std::exception& ex) {
                    r.anomalies.push_back({rp, std::string("unparseable aliases: ") + ex.what()});
                }
        } else if (ext == ".torrent") {
            auto raw = store::read_file(path);
            torrent::torrent_meta m;
            try {
                m = torrent::parse_torrent(raw ? *raw : bytes{});
            } catch (const std::exception& ex) {
                r.anomalies.push_back({rp, std::string("unparseable torrent: ") + ex.what()});
                continue;
            }
            for (const auto& v : m.violations)
                r.anomalies.push_back({rp, "non-canonical bencode at byte " + std::to_string(v.offset) + ": " + v.what});
            if (upper(path.stem().string()) != m.hash.hex())
                r.anomalies.push_back({rp, "file name does not match infohash " + m.hash.hex()});
            auto& t = record_for(m.hash);
            if (t.torrent_path) {
                r.anomalies.push_back({rp, "duplicate torrent for " + m.hash.hex() + " (also " + *t.torrent_path + ")"});
                continue;
            }
            t.name = m.info.name;
            for (const auto& f : m.info.file_list()) t.files.emplace_back(f.joined(), f.length);
            t.total_length = m.info.total_length();
            t.piece_length = m.info.piece_length;
            t.pieces = m.info.piece_count();
            t.trackers = m.trackers;
            t.torrent_path = rp;
            t.torrent_mtime = store::get_mtime(path);
        } else if (ext == ".resume") {
            auto raw = store::read_file(path);
            store::resume_file res;
            try {
                res = store::load_resume(raw ? *raw : bytes{});
            } catch (const std::exception& ex) {
                r.anomalies.push_back({rp, std::string("unparseable resume file: ") + ex.what()});
                continue;
            }
            if (upper(path.stem().string()) != res.hash.hex())
                r.anomalies.push_back({rp, "file name does not match infohash " + res.hash.hex()});
            auto& t = record_for(res.hash);
            if (t.resume_path) {
                r.anomalies.push_back({rp, "duplicate resume for " + res.hash.hex() + " (also " + *t.resume_path + ")"});
                continue;
            }
            t.resume_path = rp;
            t.have = res.have_count();
            t.completeness = res.completeness();
            t.created_at = res.created_at;
            t.updated_at = res.updated_at;
            t.uploaded = res.uploaded;
            t.downloaded = res.downloaded;
            t.publisher = res.publisher;
            t.pieces = std::max(t.pieces, res.bitfield.size());
        }
    }

    for (auto& [h, t] : torrents) {
        if (!t.torrent_path) r.anomalies.push_back({*t.resume_path, "resume without a matching torrent"});
        if (t.torrent_path && t.resume_path && t.have && t.pieces != 0) {
            // Bitfield length was checked against the torrent when written;
            // a disagreement here means the pair was tampered with.
            auto raw = store::read_file(root / *t.resume_path);
            if (raw) try {
                    if (store::load_resume(*raw).bitfield.size() != t.pieces)
                        r.anomalies.push_back({*t.resume_path, "bitfield length disagrees with the torrent's piece count"});
                } catch (const std::exception&) {
                }
        }
    }

    if (fs::is_directory(root / "cache")) {
        for (const auto& e : sorted_entries(root / "cache")) {
            auto rp = rel(e.path(), root);
            if (!e.is_directory()) {
                r.anomalies.push_back({rp, "unexpected file in cache"});
                continue;
            }
            cache_record c;
            c.dir = rp;
            auto parsed = store::parse_cache_dir_name(e.path().filename().string());
            if (parsed) {
                c.name = parsed->first;
                c.hash = parsed->second;
            } else {
                c.name = e.path().filename().string();
                r.anomalies.push_back({rp, "cache directory name lacks an infohash suffix"});
            }
            std::optional<torrent::torrent_meta> meta;
            if (c.hash && torrents.count(*c.hash) && torrents.at(*c.hash).torrent_path)
                meta = find_torrent(root, *c.hash);
            c.has_torrent = meta.has_value();
            for (const auto& pf : piece_files(e.path())) {
                c.pieces.push_back(pf.index);
                auto data = store::read_file(pf.path);
                if (!data) continue;
                c.bytes += static_cast<std::int64_t>(data->size());
                auto mt = store::get_mtime(pf.path);
                c.first_cached = c.first_cached ? std::min(*c.first_cached, mt) : mt;
                c.last_cached = c.last_cached ? std::max(*c.last_cached, mt) : mt;
                if (meta) {
                    if (pf.index < meta->info.piece_count() && sha1_bytes(*data) == meta->info.piece_hash(pf.index))
                        ++c.verified;
                    else
                        r.anomalies.push_back({rel(pf.path, root), "piece fails its hash"});
                }
            }
            if (!meta && c.hash) r.anomalies.push_back({rp, "cache entry without a matching torrent"});
            r.cache.push_back(std::move(c));
        }
    }

    for (auto& [h, t] : torrents) r.torrents.push_back(t);

    // Timeline.
    for (const auto& t : r.torrents) {
        if (t.created_at)
            r.timeline.push_back({*t.created_at, event_kind::torrent_first_processed, t.hash.hex(), *t.resume_path,
                                  "resume created_at"});
        else if (t.torrent_mtime)
            r.timeline.push_back({*t.torrent_mtime, event_kind::torrent_first_processed, t.hash.hex(), *t.torrent_path,
                                  "torrent mtime (no resume file)"});
    }
    for (const auto& c : r.cache)
        if (c.first_cached)
            r.timeline.push_back({*c.first_cached, event_kind::piece_cached, c.hash ? c.hash->hex() : c.name, c.dir,
                                  std::to_string(c.pieces.size()) + " pieces, last at " + utc(*c.last_cached)});
    if (r.settings && r.settings->values.modified_at > 0)
        r.timeline.push_back({r.settings->values.modified_at, event_kind::settings_changed, "settings.dat",
                              r.settings->path, "modified_at"});
    if (r.dht)
        r.timeline.push_back({r.dht->mtime, event_kind::dht_snapshot, r.dht->id ? r.dht->id->hex() : "dht.dat",
                              r.dht->path, std::to_string(r.dht->peers.size()) + " peers (file mtime)"});
    std::stable_sort(r.timeline.begin(), r.timeline.end(), [](const auto& a, const auto& b) {
        return std::forward_as_tuple(a.timestamp, kind_rank(a.kind), a.subject, a.source) <
               std::forward_as_tuple(b.timestamp, kind_rank(b.kind), b.subject, b.source);
    });
    return r;
}

// ------------------------------------------------------------------ output

namespace {

json opt(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

json report_json(const report& r)
{
    json doc;
    doc["schema"] = "mael.forensics/1";
    doc["root"] = r.root;
    if (r.dht) {
        json d;
        d["path"] = r.dht->path;
        d["node_id"] = r.dht->id ? json(r.dht->id->hex()) : json(nullptr);
        d["stride"] = r.dht->stride;
        d["declared_count"] = opt(r.dht->declared_count);
        d["mtime"] = r.dht->mtime;
        d["mtime_utc"] = utc(r.dht->mtime);
        json peers = json::array();
        for (const auto& p : r.dht->peers) peers.push_back(p.to_string());
        d["peers"] = peers;
        json ids = json::array();
        for (const auto& id : r.dht->node_ids) ids.push_back(id.hex());
        d["node_ids"] = ids;
        doc["dht"] = d;
    } else {
        doc["dht"] = nullptr;
    }
    json ts = json::array();
    for (const auto& t : r.torrents) {
        json e;
        e["infohash"] = t.hash.hex();
        e["name"] = t.name;
        json files = json::array();
        for (const auto& [p, len] : t.files) files.push_back(json{{"path", p}, {"length", len}});
        e["files"] = files;
        e["total_length"] = t.total_length;
        e["piece_length"] = t.piece_length;
        e["pieces"] = t.pieces;
        e["trackers"] = t.trackers;
        e["torrent_path"] = t.torrent_path ? json(*t.torrent_path) : json(nullptr);
        e["resume_path"] = t.resume_path ? json(*t.resume_path) : json(nullptr);
        e["have"] = t.have ? json(*t.have) : json(nullptr);
        e["completeness"] = t.completeness ? json(*t.completeness) : json(nullptr);
        e["created_at"] = opt(t.created_at);
        e["created_at_utc"] = t.created_at ? json(utc(*t.created_at)) : json(nullptr);
        e["updated_at"] = opt(t.updated_at);
        e["uploaded"] = opt(t.uploaded);
        e["downloaded"] = opt(t.downloaded);
        e["publisher"] = t.publisher ? json(*t.publisher) : json(nullptr);
        ts.push_back(e);
    }
    doc["torrents"] = ts;
    json cache = json::array();
    for (const auto& c : r.cache) {
        json e;
        e["dir"] = c.dir;
        e["infohash"] = c.hash ? json(c.hash->hex()) : json(nullptr);
        e["name"] = c.name;
        e["pieces"] = c.pieces;
        e["verified"] = c.verified;
        e["bytes"] = c.bytes;
        e["has_torrent"] = c.has_torrent;
        cache.push_back(e);
    }
    doc["cache"] = cache;
    if (r.settings) {
        const auto& v = r.settings->values;
        json s;
        s["path"] = r.settings->path;
        s["cache_size"] = v.cache_size_bytes;
        s["share_ratio_limit"] = v.share_ratio_limit ? json(*v.share_ratio_limit) : json(nullptr);
        s["upload_rate"] = opt(v.upload_rate);
        s["download_rate"] = opt(v.download_rate);
        s["transfer_cap"] = opt(v.transfer_cap);
        s["port"] = v.port;
        s["proxy"] = v.proxy ? json(*v.proxy) : json(nullptr);
        s["send_stats"] = v.send_stats;
        s["background_seed"] = v.background_seed;
        s["uploaded_total"] = v.uploaded_total;
        s["downloaded_total"] = v.downloaded_total;
        s["session_count"] = v.session_count;
        s["modified_at"] = v.modified_at;
        json w = json::array();
        for (const auto& x : v.warnings) w.push_back(json{{"code", x.code}, {"value", x.value}, {"at", x.at}});
        s["warnings"] = w;
        s["non_default"] = r.settings->non_default;
        s["unknown_keys"] = r.settings->unknown_keys;
        doc["settings"] = s;
    } else {
        doc["settings"] = nullptr;
    }
    json aliases = json::object();
    for (const auto& [k, h] : r.aliases) aliases[k] = h.hex();
    doc["aliases"] = aliases;
    json tl = json::array();
    for (const auto& e : r.timeline)
        tl.push_back(json{{"timestamp", e.timestamp},
                          {"utc", utc(e.timestamp)},
                          {"kind", to_string(e.kind)},
                          {"subject", e.subject},
                          {"source", e.source},
                          {"detail", e.detail}});
    doc["timeline"] = tl;
    json an = json::array();
    for (const auto& a : r.anomalies) an.push_back(json{{"path", a.path}, {"what", a.what}});
    doc["anomalies"] = an;
    doc["notes"] = r.notes;
    return doc;
}

}  // namespace

std::string to_json(const report& r) { return report_json(r).dump(2) + "\n"; }

std::string to_text(const report& r)
{
    std::ostringstream o;
    o << "profile " << r.root << "\n";
    if (r.dht) {
        o << "node id  " << (r.dht->id ? r.dht->id->hex() : "(unreadable)") << "\n";
        o << "peers    " << r.dht->peers.size() << " (" << r.dht->stride << "-byte entries)\n";
        for (const auto& p : r.dht->peers) o << "  " << p.to_string() << "\n";
    } else {
        o << "node id  (no dht.dat)\n";
    }
    o << "torrents " << r.torrents.size() << "\n";
    for (const auto& t : r.torrents) {
        o << "  " << t.hash.hex() << "  " << (t.name.empty() ? "(no torrent)" : t.name);
        if (t.completeness) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%.1f%%", *t.completeness * 100.0);
            o << "  " << buf;
        }
        if (t.created_at) o << "  created " << utc(*t.created_at);
        if (t.publisher && *t.publisher) o << "  publisher";
        o << "\n";
        for (const auto& [p, len] : t.files) o << "      " << p << " (" << len << " bytes)\n";
    }
    o << "cache    " << r.cache.size() << "\n";
    for (const auto& c : r.cache)
        o << "  " << c.dir << "  " << c.pieces.size() << " pieces, " << c.verified << " verified, " << c.bytes
          << " bytes\n";
    if (r.settings) {
        o << "settings " << r.settings->path << "\n";
        o << "  cache_size " << r.settings->values.cache_size_bytes << "\n";
        for (const auto& k : r.settings->non_default) o << "  non-default " << k << "\n";
        for (const auto& k : r.settings->unknown_keys) o << "  unknown key " << k << "\n";
        for (const auto& w : r.settings->values.warnings) o << "  warning " << w.code << " " << w.value << "\n";
    }
    o << "timeline\n";
    for (const auto& e : r.timeline)
        o << "  " << utc(e.timestamp) << " (" << e.timestamp << ")  " << to_string(e.kind) << "  " << e.subject << "  ["
          << e.source << "]\n";
    o << "anomalies " << r.anomalies.size() << "\n";
    for (const auto& a : r.anomalies) o << "  " << a.path << ": " << a.what << "\n";
    for (const auto& n : r.notes) o << "note " << n << "\n";
    return o.str();
}

// ----------------------------------------------------------- reconstruction

bool reconstruction::complete() const
{
    return from_torrent && std::all_of(pieces.begin(), pieces.end(), [](bool b) { return b; });
}

reconstruction reconstruct(const fs::path& root, const infohash& h)
{
    if (!fs::is_directory(root)) throw error(errc::not_a_directory, root.string() + " is not a directory");
    reconstruction out;
    out.hash = h;
    auto meta = find_torrent(root, h);
    auto dir = fs::is_directory(root / "cache") ? find_cache_dir(root, h) : std::nullopt;
    if (!meta && !dir) throw error(errc::no_matching_torrent, "no torrent or cache entry for " + h.hex());

    std::vector<piece_file> files = dir ? piece_files(*dir) : std::vector<piece_file>{};
    if (!meta) {
        out.name = dir ? store::parse_cache_dir_name(dir->filename().string())->first : "";
        for (const auto& pf : files) {
            auto data = store::read_file(pf.path);
            if (!data) continue;
            out.raw.push_back({pf.index, to_hex(sha1_bytes(*data)), std::move(*data)});
        }
        return out;
    }

    out.from_torrent = true;
    out.name = meta->info.name;
    const auto& info = meta->info;
    auto n = info.piece_count();
    auto pl = info.piece_length;
    out.pieces.assign(n, false);
    bytes content(static_cast<std::size_t>(info.total_length()), '\0');
    for (const auto& pf : files) {
        if (pf.index >= n) continue;
        auto data = store::read_file(pf.path);
        if (!data || static_cast<std::int64_t>(data->size()) != info.piece_size(pf.index) ||
            sha1_bytes(*data) != info.piece_hash(pf.index))
            continue;
        std::copy(data->begin(), data->end(), content.begin() + static_cast<std::ptrdiff_t>(pf.index * pl));
        out.pieces[pf.index] = true;
    }

    std::int64_t off = 0;
    for (const auto& f : info.file_list()) {
        reconstructed_file rf;
        rf.path = f.joined();
        rf.length = f.length;
        rf.data = content.substr(static_cast<std::size_t>(off), static_cast<std::size_t>(f.length));
        // Missing pieces clipped to this file, merged into ranges.
        for (std::int64_t pos = off; pos < off + f.length;) {
            auto idx = static_cast<std::size_t>(pos / pl);
            auto piece_end = std::min<std::int64_t>((static_cast<std::int64_t>(idx) + 1) * pl, off + f.length);
            if (!out.pieces[idx]) {
                byte_range g{pos - off, piece_end - off};
                if (!rf.gaps.empty() && rf.gaps.back().end == g.begin) rf.gaps.back().end = g.end;
                else rf.gaps.push_back(g);
            }
            pos = piece_end;
        }
        out.files.push_back(std::move(rf));
        off += f.length;
    }
    return out;
}

std::optional<bundle::file_tree> recover_site(const fs::path& root, const infohash& h)
{
    auto to_tree = [](const reconstruction& r) {
        bundle::file_tree t;
        for (const auto& f : r.files) t.emplace(f.path, f.data);
        return t;
    };
    reconstruction base;
    try {
        base = reconstruct(root, h);
    } catch (const error&) {
        return std::nullopt;
    }
    if (!base.complete()) return std::nullopt;
    auto meta = find_torrent(root, h);
    auto tree = to_tree(base);
    bundle::manifest man;
    auto mf = tree.find(std::string(bundle::manifest_path));
    try {
        if (mf != tree.end()) {
            man = bundle::decode_manifest(mf->second, h);
        } else {
            man.name = base.name;
            man.members.push_back({h, ""});
        }
        std::map<infohash, std::pair<torrent::info_dict, bundle::file_tree>> members;
        members.emplace(h, std::make_pair(meta->info, std::move(tree)));
        for (std::size_t i = 1; i < man.members.size(); ++i) {
            const auto& mh = man.members[i].hash;
            auto r = reconstruct(root, mh);
            if (!r.complete()) return std::nullopt;
            members.emplace(mh, std::make_pair(find_torrent(root, mh)->info, to_tree(r)));
        }
        return bundle::assemble(man, members);
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::string reconstruction_json(const reconstruction& r)
{
    json doc;
    doc["schema"] = "mael.reconstruction/1";
    doc["infohash"] = r.hash.hex();
    doc["name"] = r.name;
    doc["from_torrent"] = r.from_torrent;
    json pieces = json::array();
    for (bool b : r.pieces) pieces.push_back(b);
    doc["pieces"] = pieces;
    json files = json::array();
    for (const auto& f : r.files) {
        json gaps = json::array();
        for (const auto& g : f.gaps) gaps.push_back(json{{"begin", g.begin}, {"end", g.end}});
        files.push_back(json{{"path", f.path}, {"length", f.length}, {"complete", f.complete()}, {"gaps", gaps}});
    }
    doc["files"] = files;
    json raw = json::array();
    for (const auto& p : r.raw)
        raw.push_back(json{{"index", p.index}, {"sha1", p.sha1_hex}, {"length", p.data.size()}});
    doc["raw_pieces"] = raw;
    return doc.dump(2) + "\n";
}

void write_reconstruction(const reconstruction& r, const fs::path& out)
{
    fs::create_directories(out);
    if (!r.from_torrent) {
        fs::create_directories(out / "pieces");
        for (const auto& p : r.raw) store::write_file(out / "pieces" / (std::to_string(p.index) + ".piece"), p.data);
        store::write_file(out / "pieces.json", reconstruction_json(r));
        return;
    }
    for (const auto& f : r.files) {
        if (!bundle::valid_path(f.path)) throw error(errc::no_matching_torrent, "refusing unsafe path " + f.path);
        auto p = out / fs::path(f.path);
        fs::create_directories(p.parent_path());
        if (f.gaps.empty()) {
            store::write_file(p, f.data);
            continue;
        }
        // Known ranges only; gaps stay holes in a sparse file.
        int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd < 0) throw store::error(store::errc::io_error, "cannot create " + p.string());
        std::int64_t pos = 0;
        auto write_range = [&](std::int64_t b, std::int64_t e) {
            while (b < e) {
                auto n = ::pwrite(fd, f.data.data() + b, static_cast<std::size_t>(e - b), b);
                if (n <= 0) break;
                b += n;
            }
        };
        for (const auto& g : f.gaps) {
            write_range(pos, g.begin);
            pos = g.end;
        }
        write_range(pos, f.length);
        if (::ftruncate(fd, f.length) != 0) {
            ::close(fd);
            throw store::error(store::errc::io_error, "cannot size " + p.string());
        }
        ::close(fd);
    }
    store::write_file(out / "gaps.json", reconstruction_json(r));
}

// ---------------------------------------------------------------- remnants

remnant_report detect_remnants(const fs::path& machine_root)
{
    remnant_report out;
    out.root = machine_root.string();
    if (!fs::is_directory(machine_root)) return out;
    store::machine_layout probe{machine_root};
    out.registry_present = fs::exists(probe.registry_manifest());
    if (out.registry_present) out.survived.push_back(rel(probe.registry_manifest(), machine_root));

    bool any_kept = false, any_removed = false, any_odd = false;
    auto users_dir = machine_root / "Users";
    for (const auto& e : sorted_entries(users_dir)) {
        if (!e.is_directory()) continue;
        store::machine_layout m{machine_root, e.path().filename().string()};
        user_remnants u;
        u.user = m.user;
        u.local_present = fs::is_directory(m.local_dir());
        u.user_data_present = fs::is_directory(m.local_dir() / "User Data");
        u.application_present = fs::is_directory(m.local_dir() / "Application");
        u.roaming_present = fs::is_directory(m.roaming_dir());
        if (!u.local_present && !u.roaming_present) continue;
        for (const auto& p : {m.local_dir() / "Application", m.local_dir() / "User Data", m.roaming_dir()})
            if (fs::is_directory(p)) out.survived.push_back(rel(p, machine_root));
        if (u.roaming_present) {
            u.profile = inspect(m.roaming_dir());
            for (const auto& t : u.profile->torrents) {
                bool is_base = std::any_of(t.files.begin(), t.files.end(),
                                           [](const auto& f) { return f.first == bundle::manifest_path; });
                if (!is_base) continue;
                auto site = recover_site(m.roaming_dir(), t.hash);
                u.sites.push_back({t.hash, t.name, site ? site->size() : 0, site.has_value()});
            }
        }
        if (u.user_data_present && u.roaming_present) any_kept = true;
        else if (u.roaming_present) any_removed = true;
        else any_odd = true;
        out.users.push_back(std::move(u));
    }
    if (out.users.empty()) out.mode = uninstall_mode::no_evidence;
    else if (any_odd || (any_kept && any_removed)) out.mode = uninstall_mode::unknown;
    else out.mode = any_kept ? uninstall_mode::history_kept : uninstall_mode::history_removed;
    return out;
}

std::string to_json(const remnant_report& r)
{
    json doc;
    doc["schema"] = "mael.remnants/1";
    doc["root"] = r.root;
    doc["mode"] = to_string(r.mode);
    doc["registry_present"] = r.registry_present;
    doc["survived"] = r.survived;
    json users = json::array();
    for (const auto& u : r.users) {
        json e;
        e["user"] = u.user;
        e["local_present"] = u.local_present;
        e["user_data_present"] = u.user_data_present;
        e["application_present"] = u.application_present;
        e["roaming_present"] = u.roaming_present;
        e["profile"] = u.profile ? report_json(*u.profile) : json(nullptr);
        json sites = json::array();
        for (const auto& s : u.sites)
            sites.push_back(json{{"infohash", s.hash.hex()}, {"name", s.name}, {"files", s.files}, {"complete", s.complete}});
        e["sites"] = sites;
        users.push_back(e);
    }
    doc["users"] = users;
    return doc.dump(2) + "\n";
}

std::string to_text(const remnant_report& r)
{
    std::ostringstream o;
    o << "machine " << r.root << "\n";
    o << "mode    " << to_string(r.mode) << "\n";
    o << "registry keys " << (r.registry_present ? "present" : "absent") << "\n";
    for (const auto& s : r.survived) o << "survived " << s << "\n";
    for (const auto& u : r.users) {
        o << "user " << u.user << ": user data " << (u.user_data_present ? "present" : "absent") << ", roaming "
          << (u.roaming_present ? "present" : "absent") << "\n";
        if (u.profile) {
            o << "  torrents " << u.profile->torrents.size();
            if (u.profile->dht) o << ", peers " << u.profile->dht->peers.size();
            o << "\n";
        }
        for (const auto& s : u.sites)
            o << "  site " << s.hash.hex() << " " << s.name << ": " << (s.complete ? "recoverable" : "incomplete") << ", "
              << s.files << " files\n";
    }
    return o.str();
}

}  // namespace mael::forensics
