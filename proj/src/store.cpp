#include "mael/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace mael::store {

// --- settings ------------------------------------------------------------

void settings::set_cache_size(std::int64_t bytes, std::int64_t now)
{
    cache_size_bytes = bytes;
    modified_at = now;
    if (bytes > cache_warning_threshold) warnings.push_back({"cache_size_over_limit", bytes, now});
}

void settings::validate() const
{
    if (cache_size_bytes <= 0) throw error(errc::invalid_settings, "cache size must be positive");
    if (share_ratio_limit && !(*share_ratio_limit >= 0.0))
        throw error(errc::invalid_settings, "share ratio limit must be non-negative");
    for (auto* rate : {&upload_rate, &download_rate, &transfer_cap})
        if (*rate && **rate < 0) throw error(errc::invalid_settings, "rates and caps must be non-negative");
}

std::uint16_t pick_port(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return static_cast<std::uint16_t>(20000 + rng() % 45001);
}

namespace {

constexpr std::int64_t unlimited = -1;

std::int64_t opt_int(const std::optional<std::int64_t>& v) { return v ? *v : unlimited; }

std::optional<std::int64_t> int_opt(std::int64_t v)
{
    if (v < 0) return std::nullopt;
    return v;
}

bencode::decode_result lenient(bytes_view raw, const char* what)
{
    bencode::decode_options opts;
    opts.lenient = true;
    try {
        auto r = bencode::decode(raw, opts);
        if (!r.root.is_dict()) throw error(errc::malformed_input, std::string(what) + " is not a dictionary");
        return r;
    } catch (const bencode::error& e) {
        throw error(errc::malformed_input, std::string(what) + ": " + e.what());
    }
}

std::int64_t get_int(const bencode::value& d, const char* key, std::int64_t fallback)
{
    const auto* v = d.find(key);
    if (!v) return fallback;
    if (!v->is_int()) throw error(errc::malformed_input, std::string("'") + key + "' is not an integer");
    return v->as_int();
}

const std::vector<std::string> settings_keys = {
    "background_seed", "cache_size", "download_rate", "modified_at", "port", "proxy", "send_stats",
    "share_ratio_milli", "stats", "transfer_cap", "upload_rate", "warnings",
};

}  // namespace

bytes save_settings(const settings& s)
{
    bencode::dict d = s.extra;
    d["background_seed"] = bencode::value(s.background_seed ? 1 : 0);
    d["cache_size"] = bencode::value(s.cache_size_bytes);
    d["download_rate"] = bencode::value(opt_int(s.download_rate));
    d["modified_at"] = bencode::value(s.modified_at);
    d["port"] = bencode::value(static_cast<std::int64_t>(s.port));
    if (s.proxy) d["proxy"] = bencode::value(*s.proxy);
    d["send_stats"] = bencode::value(s.send_stats ? 1 : 0);
    d["share_ratio_milli"] =
        bencode::value(s.share_ratio_limit ? static_cast<std::int64_t>(std::llround(*s.share_ratio_limit * 1000))
                                           : unlimited);
    d["stats"] = bencode::value(bencode::dict{
        {"downloaded", bencode::value(s.downloaded_total)},
        {"sessions", bencode::value(s.session_count)},
        {"uploaded", bencode::value(s.uploaded_total)},
    });
    d["transfer_cap"] = bencode::value(opt_int(s.transfer_cap));
    d["upload_rate"] = bencode::value(opt_int(s.upload_rate));
    bencode::list warnings;
    for (const auto& w : s.warnings)
        warnings.emplace_back(bencode::dict{
            {"at", bencode::value(w.at)}, {"code", bencode::value(w.code)}, {"value", bencode::value(w.value)}});
    d["warnings"] = bencode::value(std::move(warnings));
    return bencode::encode(bencode::value(std::move(d)));
}

settings load_settings(bytes_view raw)
{
    auto root = lenient(raw, "settings.dat").root;
    settings s;
    s.background_seed = get_int(root, "background_seed", 1) != 0;
    s.cache_size_bytes = get_int(root, "cache_size", default_cache_size);
    s.download_rate = int_opt(get_int(root, "download_rate", unlimited));
    s.modified_at = get_int(root, "modified_at", 0);
    auto port = get_int(root, "port", 0);
    if (port < 0 || port > 65535) throw error(errc::malformed_input, "port out of range");
    s.port = static_cast<std::uint16_t>(port);
    if (const auto* p = root.find("proxy"); p && p->is_string()) s.proxy = p->as_string();
    s.send_stats = get_int(root, "send_stats", 1) != 0;
    auto milli = get_int(root, "share_ratio_milli", 1000);
    if (milli < 0) s.share_ratio_limit = std::nullopt;
    else s.share_ratio_limit = static_cast<double>(milli) / 1000.0;
    if (const auto* st = root.find("stats"); st && st->is_dict()) {
        s.downloaded_total = get_int(*st, "downloaded", 0);
        s.uploaded_total = get_int(*st, "uploaded", 0);
        s.session_count = get_int(*st, "sessions", 0);
    }
    s.transfer_cap = int_opt(get_int(root, "transfer_cap", unlimited));
    s.upload_rate = int_opt(get_int(root, "upload_rate", unlimited));
    if (const auto* w = root.find("warnings"); w && w->is_list()) {
        for (const auto& item : w->as_list()) {
            if (!item.is_dict()) continue;
            settings_warning sw;
            if (const auto* c = item.find("code"); c && c->is_string()) sw.code = c->as_string();
            sw.value = get_int(item, "value", 0);
            sw.at = get_int(item, "at", 0);
            s.warnings.push_back(std::move(sw));
        }
    }
    for (const auto& [k, v] : root.as_dict())
        if (std::find(settings_keys.begin(), settings_keys.end(), k) == settings_keys.end()) s.extra.emplace(k, v);
    return s;
}

settings load_settings(const std::optional<bytes>& raw)
{
    if (!raw) return settings{};
    return load_settings(bytes_view(*raw));
}

// --- resume --------------------------------------------------------------

std::size_t resume_file::have_count() const
{
    return static_cast<std::size_t>(std::count(bitfield.begin(), bitfield.end(), true));
}

bool resume_file::complete() const { return have_count() == bitfield.size(); }

double resume_file::completeness() const
{
    if (bitfield.empty()) return 1.0;
    return static_cast<double>(have_count()) / static_cast<double>(bitfield.size());
}

std::string resume_file::bitfield_string() const
{
    std::string s;
    for (bool b : bitfield) s.push_back(b ? '1' : '0');
    return s;
}

void resume_file::check_against(const torrent::info_dict& info) const
{
    if (bitfield.size() != info.piece_count())
        throw error(errc::bitfield_length_mismatch, "resume bitfield has " + std::to_string(bitfield.size()) +
                                                        " entries, torrent has " +
                                                        std::to_string(info.piece_count()) + " pieces");
}

resume_file new_resume(const infohash& h, std::size_t piece_count, std::int64_t now)
{
    resume_file r;
    r.hash = h;
    r.bitfield.assign(piece_count, false);
    r.created_at = now;
    r.updated_at = now;
    return r;
}

bytes save_resume(const resume_file& r)
{
    bencode::dict d{
        {"bitfield", bencode::value(r.bitfield_string())},
        {"created_at", bencode::value(r.created_at)},
        {"downloaded", bencode::value(r.downloaded)},
        {"info-hash", bencode::value(r.hash.to_bytes())},
        {"publisher", bencode::value(r.publisher ? 1 : 0)},
        {"updated_at", bencode::value(r.updated_at)},
        {"uploaded", bencode::value(r.uploaded)},
    };
    return bencode::encode(bencode::value(std::move(d)));
}

resume_file load_resume(bytes_view raw)
{
    auto root = lenient(raw, "resume file").root;
    resume_file r;
    const auto* h = root.find("info-hash");
    if (!h || !h->is_string() || h->as_string().size() != 20)
        throw error(errc::malformed_input, "resume file lacks a 20-byte info-hash");
    r.hash = infohash::from_bytes(h->as_string());
    const auto* bf = root.find("bitfield");
    if (!bf || !bf->is_string()) throw error(errc::malformed_input, "resume file lacks a bitfield");
    for (char c : bf->as_string()) {
        if (c != '0' && c != '1') throw error(errc::malformed_input, "bitfield holds a character other than 0/1");
        r.bitfield.push_back(c == '1');
    }
    r.created_at = get_int(root, "created_at", 0);
    r.updated_at = get_int(root, "updated_at", r.created_at);
    r.uploaded = get_int(root, "uploaded", 0);
    r.downloaded = get_int(root, "downloaded", 0);
    r.publisher = get_int(root, "publisher", 0) != 0;
    return r;
}

// --- cache ---------------------------------------------------------------

std::string cache_dir_name(std::string_view torrent_name, const infohash& h)
{
    std::string name(torrent_name);
    for (char& c : name)
        if (c == '/' || c == '\\') c = '_';
    return name + "_" + h.hex();
}

std::optional<std::pair<std::string, infohash>> parse_cache_dir_name(std::string_view dir)
{
    if (dir.size() < 41 || dir[dir.size() - 41] != '_') return std::nullopt;
    auto h = infohash::from_hex(dir.substr(dir.size() - 40));
    if (!h) return std::nullopt;
    return std::pair{std::string(dir.substr(0, dir.size() - 41)), *h};
}

void put_piece(cache_entry& entry, resume_file& resume, const torrent::info_dict& info, std::size_t index,
               bytes data, std::int64_t now)
{
    if (index >= info.piece_count())
        throw error(errc::index_out_of_range, "piece " + std::to_string(index) + " of " +
                                                  std::to_string(info.piece_count()));
    auto expected = info.piece_size(index);
    if (static_cast<std::int64_t>(data.size()) != expected)
        throw error(errc::piece_size_mismatch, "piece " + std::to_string(index) + " is " +
                                                   std::to_string(data.size()) + " bytes, expected " +
                                                   std::to_string(expected));
    resume.check_against(info);
    if (sha1_bytes(data) != info.piece_hash(index))
        throw error(errc::hash_mismatch, "piece " + std::to_string(index) + " fails its SHA-1 check");

    auto [it, inserted] = entry.pieces.insert_or_assign(index, std::move(data));
    if (inserted) entry.total_bytes += static_cast<std::int64_t>(it->second.size());
    entry.last_access = now;
    resume.bitfield[index] = true;
    resume.updated_at = std::max(resume.updated_at, now);
}

eviction_result evict(const settings& s, const std::vector<eviction_candidate>& cache)
{
    eviction_result out;
    for (const auto& c : cache) out.remaining_bytes += c.bytes;
    if (out.remaining_bytes <= s.cache_size_bytes) return out;

    std::vector<const eviction_candidate*> order;
    for (const auto& c : cache)
        if (c.complete && !c.active) order.push_back(&c);
    std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
        return a->last_access != b->last_access ? a->last_access < b->last_access : a->hash < b->hash;
    });
    for (const auto* c : order) {
        if (out.remaining_bytes <= s.cache_size_bytes) break;
        out.removed.push_back(c->hash);
        out.remaining_bytes -= c->bytes;
    }
    out.cannot_satisfy = out.remaining_bytes > s.cache_size_bytes;
    return out;
}

// --- files ---------------------------------------------------------------

std::optional<bytes> read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, bytes_view data)
{
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    auto tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw error(errc::io_error, "cannot write " + p.string());
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw error(errc::io_error, "short write to " + p.string());
    }
    fs::rename(tmp, p, ec);
    if (ec) throw error(errc::io_error, "cannot rename onto " + p.string() + ": " + ec.message());
}

void set_mtime(const fs::path& p, std::int64_t seconds)
{
    timespec ts[2];
    ts[0].tv_sec = ts[1].tv_sec = static_cast<time_t>(seconds);
    ts[0].tv_nsec = ts[1].tv_nsec = 0;
    ::utimensat(AT_FDCWD, p.c_str(), ts, 0);
}

std::int64_t get_mtime(const fs::path& p)
{
    struct stat st{};
    if (::stat(p.c_str(), &st) != 0) return 0;
    return static_cast<std::int64_t>(st.st_mtim.tv_sec);
}

// --- profile -------------------------------------------------------------

profile::profile(fs::path root) : root_(std::move(root))
{
    std::error_code ec;
    fs::create_directories(cache_root(), ec);
    fs::create_directories(trusted_dir(), ec);
    if (ec) throw error(errc::io_error, "cannot create profile at " + root_.string() + ": " + ec.message());
    auto crt = trusted_dir() / "bittorrent.crt";
    if (!fs::exists(crt)) write_file(crt, "");
}

profile::~profile() { unlock(); }

void profile::lock()
{
    if (lock_fd_ >= 0) return;
    auto path = root_ / "node.lock";
    int fd = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd < 0) throw error(errc::io_error, "cannot open " + path.string());
    if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd);
        throw error(errc::profile_locked, "profile " + root_.string() + " is in use by another node");
    }
    lock_fd_ = fd;
}

void profile::unlock()
{
    if (lock_fd_ < 0) return;
    std::error_code ec;
    fs::remove(root_ / "node.lock", ec);
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
    lock_fd_ = -1;
}

void profile::save_torrent(const torrent::torrent_meta& meta, std::int64_t now)
{
    auto p = torrent_path(meta.hash);
    write_file(p, torrent::encode_torrent(meta));
    set_mtime(p, now);
}

std::optional<torrent::torrent_meta> profile::load_torrent(const infohash& h) const
{
    auto raw = read_file(torrent_path(h));
    if (!raw) return std::nullopt;
    return torrent::parse_torrent(*raw);
}

std::vector<infohash> profile::torrents() const
{
    std::vector<infohash> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(root_, ec)) {
        if (e.path().extension() != ".torrent") continue;
        if (auto h = infohash::from_hex(e.path().stem().string())) out.push_back(*h);
    }
    std::sort(out.begin(), out.end());
    return out;
}

resume_file profile::save_resume(resume_file r)
{
    if (auto existing = load_resume(r.hash)) r.created_at = existing->created_at;
    r.updated_at = std::max(r.updated_at, r.created_at);
    auto p = resume_path(r.hash);
    write_file(p, store::save_resume(r));
    set_mtime(p, r.updated_at);
    return r;
}

std::optional<resume_file> profile::load_resume(const infohash& h) const
{
    auto raw = read_file(resume_path(h));
    if (!raw) return std::nullopt;
    return store::load_resume(*raw);
}

settings profile::load_settings() const
{
    return store::load_settings(read_file(settings_path()));
}

void profile::save_settings(const settings& s)
{
    s.validate();
    write_file(settings_path(), store::save_settings(s));
    if (s.modified_at > 0) set_mtime(settings_path(), s.modified_at);
}

void profile::save_dht(bytes_view raw, std::int64_t now)
{
    write_file(dht_path(), raw);
    set_mtime(dht_path(), now);
}

std::optional<bytes> profile::load_dht() const { return read_file(dht_path()); }

void profile::store_piece(std::string_view name, const infohash& h, std::size_t index, bytes_view data,
                          std::int64_t now)
{
    auto p = cache_dir(name, h) / (std::to_string(index) + ".piece");
    write_file(p, data);
    set_mtime(p, now);
}

std::optional<bytes> profile::load_piece(std::string_view name, const infohash& h, std::size_t index) const
{
    return read_file(cache_dir(name, h) / (std::to_string(index) + ".piece"));
}

std::vector<std::size_t> profile::cached_pieces(std::string_view name, const infohash& h) const
{
    std::vector<std::size_t> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(cache_dir(name, h), ec)) {
        if (e.path().extension() != ".piece") continue;
        auto stem = e.path().stem().string();
        if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) continue;
        out.push_back(static_cast<std::size_t>(std::stoull(stem)));
    }
    std::sort(out.begin(), out.end());
    return out;
}

void profile::remove_cache(std::string_view name, const infohash& h)
{
    std::error_code ec;
    fs::remove_all(cache_dir(name, h), ec);
}

cache_entry profile::load_cache_entry(const torrent::torrent_meta& meta) const
{
    cache_entry e;
    e.torrent_name = meta.info.name;
    e.hash = meta.hash;
    for (auto i : cached_pieces(meta.info.name, meta.hash)) {
        if (i >= meta.info.piece_count()) continue;
        auto data = load_piece(meta.info.name, meta.hash, i);
        if (!data || sha1_bytes(*data) != meta.info.piece_hash(i)) continue;
        e.total_bytes += static_cast<std::int64_t>(data->size());
        e.last_access = std::max(e.last_access, get_mtime(cache_dir(meta.info.name, meta.hash) /
                                                          (std::to_string(i) + ".piece")));
        e.pieces.emplace(i, std::move(*data));
    }
    return e;
}

std::vector<integrity_problem> profile::verify() const
{
    std::vector<integrity_problem> out;
    std::map<infohash, torrent::torrent_meta> metas;
    for (const auto& h : torrents()) {
        try {
            auto meta = load_torrent(h);
            if (meta->hash != h) out.push_back({torrent_path(h), "file name does not match infohash " + meta->hash.hex()});
            metas.emplace(h, std::move(*meta));
        } catch (const std::exception& e) {
            out.push_back({torrent_path(h), e.what()});
        }
    }
    for (const auto& [h, meta] : metas) {
        try {
            if (auto r = load_resume(h)) r->check_against(meta.info);
        } catch (const std::exception& e) {
            out.push_back({resume_path(h), e.what()});
        }
        for (auto i : cached_pieces(meta.info.name, h)) {
            auto p = cache_dir(meta.info.name, h) / (std::to_string(i) + ".piece");
            auto data = read_file(p);
            if (i >= meta.info.piece_count()) out.push_back({p, "piece index out of range"});
            else if (!data || sha1_bytes(*data) != meta.info.piece_hash(i)) out.push_back({p, "piece fails its SHA-1 check"});
        }
    }
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(cache_root(), ec)) {
        auto parsed = parse_cache_dir_name(e.path().filename().string());
        if (!parsed) out.push_back({e.path(), "cache directory name lacks an infohash suffix"});
        else if (!metas.count(parsed->second)) out.push_back({e.path(), "no matching torrent"});
    }
    return out;
}

// --- machine -------------------------------------------------------------

void install(const machine_layout& m, std::int64_t now)
{
    write_file(m.application_dir() / "maelstrom.exe", "placeholder\n");
    write_file(m.application_dir() / "VERSION", m.version + "\n");
    write_file(m.user_data_dir() / "History", "");
    write_file(m.user_data_dir() / "Local Storage" / "placeholder", "");
    profile p(m.roaming_dir());
    std::string keys = "HKCU\\Software\\BitTorrent Maelstrom\n"
                       "  InstallDir = " + m.application_dir().string() + "\n"
                       "  Version = " + m.version + "\n"
                       "  InstalledAt = " + std::to_string(now) + "\n";
    write_file(m.registry_manifest(), keys);
}

void uninstall(const machine_layout& m, uninstall_mode mode)
{
    std::error_code ec;
    if (mode == uninstall_mode::remove_history) {
        fs::remove_all(m.local_dir(), ec);
    } else {
        fs::remove_all(m.local_dir() / "Application", ec);
    }
    fs::remove(m.registry_manifest(), ec);
}

}  // namespace mael::store
