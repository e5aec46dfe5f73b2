#include "mael/gateway.hpp"

#include <json.hpp>

#include <algorithm>
#include <sstream>

namespace mael::gateway {

using json = nlohmann::ordered_json;

std::string to_string(phase p)
{
    switch (p) {
    case phase::resolving: return "resolving";
    case phase::discovering: return "discovering";
    case phase::fetching_metadata: return "fetching_metadata";
    case phase::transferring: return "transferring";
    case phase::assembling: return "assembling";
    case phase::ready: return "ready";
    case phase::failed: return "failed";
    }
    return "unknown";
}

std::string to_string(failure f)
{
    switch (f) {
    case failure::none: return "None";
    case failure::bad_url: return "BadUrl";
    case failure::no_peers: return "NoPeers";
    case failure::metadata_hash_mismatch: return "MetadataHashMismatch";
    case failure::member_incomplete: return "MemberIncomplete";
    case failure::timeout: return "Timeout";
    }
    return "Unknown";
}

std::optional<std::string> http_response::header(std::string_view name) const
{
    auto lower = [](std::string_view s) {
        std::string out(s);
        for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return out;
    };
    for (const auto& [k, v] : headers)
        if (lower(k) == lower(name)) return v;
    return std::nullopt;
}

std::string content_type_for(std::string_view path)
{
    static const std::map<std::string, std::string, std::less<>> types = {
        {"css", "text/css; charset=utf-8"},
        {"gif", "image/gif"},
        {"htm", "text/html; charset=utf-8"},
        {"html", "text/html; charset=utf-8"},
        {"ico", "image/x-icon"},
        {"jpeg", "image/jpeg"},
        {"jpg", "image/jpeg"},
        {"js", "application/javascript"},
        {"json", "application/json"},
        {"mp3", "audio/mpeg"},
        {"mp4", "video/mp4"},
        {"pdf", "application/pdf"},
        {"png", "image/png"},
        {"svg", "image/svg+xml"},
        {"txt", "text/plain; charset=utf-8"},
        {"webm", "video/webm"},
        {"woff", "font/woff"},
        {"woff2", "font/woff2"},
        {"xml", "application/xml"},
    };
    auto slash = path.rfind('/');
    auto leaf = slash == std::string_view::npos ? path : path.substr(slash + 1);
    auto dot = leaf.rfind('.');
    if (dot == std::string_view::npos) return "application/octet-stream";
    std::string ext(leaf.substr(dot + 1));
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    auto it = types.find(ext);
    return it == types.end() ? "application/octet-stream" : it->second;
}

namespace {

dht::node_id derived_id(const std::string& name) { return dht::node_id::from_bytes(sha1_bytes("mael-node:" + name)); }

std::uint64_t seed_from(const std::string& name)
{
    auto d = sha1(name);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | d[static_cast<std::size_t>(i)];
    return v;
}

void write_published_torrent(store::profile& p, const torrent::torrent_meta& meta, const bundle::file_tree& files,
                             std::int64_t now)
{
    p.save_torrent(meta, now);
    auto data = torrent::concatenate(meta.info, files);
    auto pl = static_cast<std::size_t>(meta.info.piece_length);
    for (std::size_t i = 0; i < meta.info.piece_count(); ++i)
        p.store_piece(meta.info.name, meta.hash, i, bytes_view(data).substr(i * pl, pl), now);
    auto r = store::new_resume(meta.hash, meta.info.piece_count(), now);
    r.bitfield.assign(r.bitfield.size(), true);
    r.publisher = true;
    p.save_resume(r);
}

}  // namespace

bundle::published publish_to_profile(store::profile& p, const bundle::website& site, bundle::publish_mode mode,
                                     const bundle::publish_options& opts, std::int64_t now)
{
    auto pub = bundle::publish(site, mode, opts);
    for (const auto& meta : pub.torrents) write_published_torrent(p, meta, pub.contents.at(meta.hash), now);
    return pub;
}

bundle::website read_site_directory(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw store::error(store::errc::io_error, dir.string() + " is not a directory");
    bundle::website site;
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        auto rel = fs::relative(f, dir).generic_string();
        auto data = store::read_file(f);
        if (!data) throw store::error(store::errc::io_error, "cannot read " + f.string());
        site.tree.emplace(rel, std::move(*data));
    }
    return site;
}

// ------------------------------------------------------------------ node

node::node(transport::network& net, node_config cfg) : net_(net), cfg_(std::move(cfg)), endpoint_(cfg_.endpoint) {}

node::~node()
{
    try {
        stop(true);
    } catch (...) {
    }
}

void node::start()
{
    if (running_) return;
    auto now = net_.now();
    if (cfg_.profile_root) {
        profile_ = std::make_unique<store::profile>(*cfg_.profile_root);
        profile_->lock();
    } else {
        profile_.reset();
    }

    std::optional<store::settings> on_disk;
    if (profile_ && fs::exists(profile_->settings_path())) on_disk = profile_->load_settings();
    if (cfg_.settings) {
        settings_ = *cfg_.settings;
        if (on_disk) {
            settings_.uploaded_total = on_disk->uploaded_total;
            settings_.downloaded_total = on_disk->downloaded_total;
            settings_.session_count = on_disk->session_count;
        }
    } else if (on_disk) {
        settings_ = *on_disk;
    } else {
        settings_ = store::settings{};
        settings_.port = store::pick_port(seed_from(cfg_.name));
    }
    if (settings_.port == 0) settings_.port = on_disk && on_disk->port ? on_disk->port : store::pick_port(seed_from(cfg_.name));
    ++settings_.session_count;

    std::optional<dht::dht_dat> dat;
    if (profile_)
        if (auto raw = profile_->load_dht()) try {
                dat = dht::load_dht_dat(*raw);
            } catch (const dht::error&) {
            }
    auto id = cfg_.id ? *cfg_.id : dat ? dat->id : derived_id(cfg_.name);

    try {
        // Port 0 means the port recorded in settings.
        auto bind = cfg_.endpoint;
        if (bind.port == 0) bind.port = settings_.port;
        endpoint_ = net_.attach(bind, [this](const compact_peer& from, bytes_view p) { on_datagram(from, p); });
    } catch (...) {
        if (profile_) profile_->unlock();
        throw;
    }
    dht_ = std::make_unique<dht::dht_node>(id, endpoint_, sha1_bytes("secret:" + id.hex()), cfg_.dht);
    dht_->set_local_content([this](const infohash& h) { return serving(h); });
    swarm_ = std::make_unique<swarm::engine>(endpoint_, sha1_bytes("peer:" + id.to_bytes()), cfg_.swarm);
    swarm_->set_settings(settings_);
    swarm_->set_totals({settings_.uploaded_total, settings_.downloaded_total});
    swarm_->set_piece_reader([this](const infohash& h, std::size_t i) { return read_piece(h, i); });
    swarm_->set_piece_sink([this](const infohash& h, std::size_t i, bytes d) { return accept_piece(h, i, std::move(d)); });

    // Without a profile the in-memory state is all there is; keep it across
    // restarts.
    if (profile_) {
        held_.clear();
        sites_.clear();
        aliases_.clear();
    } else {
        for (auto& [h, t] : held_) {
            auto have = t.resume.bitfield;
            swarm_->add_torrent(t.meta, have, t.resume.publisher, {t.resume.uploaded, t.resume.downloaded});
        }
    }
    running_ = true;
    gateway_open_ = true;
    bootstrapped_ = false;
    if (profile_) {
        load_profile();
        profile_->save_settings(settings_);
    }

    if (dat)
        for (const auto& p : dat->peers)
            if (p != endpoint_) send_dht(dht_->ping(p, now));
    if (!cfg_.bootstrap.empty()) {
        send_dht(dht_->bootstrap(cfg_.bootstrap, now, [this](const dht::bootstrap_result& r) {
            bootstrapped_ = r.ok;
            if (r.ok) announce_all();
        }));
    }
    last_announce_ = now;
    schedule_tick();
}

void node::stop(bool persist_state)
{
    if (!running_) return;
    if (tick_timer_) net_.cancel(*tick_timer_);
    tick_timer_.reset();
    if (persist_state) persist();
    running_ = false;
    net_.detach(endpoint_);
    if (profile_) profile_->unlock();
}

void node::close_gateway()
{
    gateway_open_ = false;
    if (!settings_.background_seed) stop(true);
}

void node::update_settings(const store::settings& s)
{
    s.validate();
    settings_ = s;
    settings_.modified_at = net_.wall_seconds();
    if (swarm_) swarm_->set_settings(settings_);
    if (profile_ && running_) profile_->save_settings(settings_);
    if (running_) evict_if_needed();
}

void node::register_alias(const std::string& name, const infohash& h)
{
    std::string lower = name;
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    aliases_[lower] = h;
    if (profile_ && running_) store::write_file(profile_->aliases_path(), bundle::save_aliases(aliases_));
}

bytes node::dht_dat() const { return dht::save_dht_dat(*dht_); }

// ------------------------------------------------------------ persistence

void node::load_profile()
{
    auto wall = net_.wall_seconds();
    if (auto raw = store::read_file(profile_->aliases_path())) try {
            aliases_ = bundle::load_aliases(*raw);
        } catch (const std::exception&) {
        }
    for (const auto& h : profile_->torrents()) {
        std::optional<torrent::torrent_meta> meta;
        try {
            meta = profile_->load_torrent(h);
        } catch (const std::exception&) {
            continue;
        }
        if (!meta) continue;
        held_torrent t;
        t.meta = *meta;
        t.cache = profile_->load_cache_entry(*meta);
        std::optional<store::resume_file> r;
        try {
            r = profile_->load_resume(h);
        } catch (const std::exception&) {
        }
        t.resume = r ? *r : store::new_resume(h, meta->info.piece_count(), wall);
        if (t.resume.bitfield.size() != meta->info.piece_count()) t.resume.bitfield.assign(meta->info.piece_count(), false);
        // A bit counts only when the piece is actually on disk and verifies.
        for (std::size_t i = 0; i < t.resume.bitfield.size(); ++i)
            t.resume.bitfield[i] = t.resume.bitfield[i] && t.cache.pieces.count(i) != 0;
        adopt(std::move(t));
    }
    for (const auto& [h, t] : held_)
        if (std::ranges::any_of(t.meta.info.file_list(), [](const auto& f) { return f.joined() == bundle::manifest_path; }))
            site(h);
}

void node::persist()
{
    for (auto& [h, t] : held_) persist_resume(t);
    settings_.uploaded_total = swarm_->totals().uploaded;
    settings_.downloaded_total = swarm_->totals().downloaded;
    if (!profile_) return;
    profile_->save_dht(dht_dat(), net_.wall_seconds());
    profile_->save_settings(settings_);
}

void node::persist_resume(held_torrent& t)
{
    if (swarm_ && swarm_->has_torrent(t.meta.hash)) {
        t.resume.uploaded = swarm_->stats(t.meta.hash).uploaded;
        t.resume.downloaded = swarm_->stats(t.meta.hash).downloaded;
    }
    t.resume.updated_at = std::max(t.resume.updated_at, net_.wall_seconds());
    if (profile_) t.resume = profile_->save_resume(t.resume);
}

void node::adopt(held_torrent t)
{
    auto h = t.meta.hash;
    std::vector<bool> have(t.meta.info.piece_count(), false);
    for (const auto& [i, data] : t.cache.pieces)
        if (i < have.size()) have[i] = true;
    swarm_->add_torrent(t.meta, have, t.resume.publisher, {t.resume.uploaded, t.resume.downloaded});
    held_[h] = std::move(t);
}

node::held_torrent& node::hold(const torrent::torrent_meta& meta, bool publisher)
{
    auto it = held_.find(meta.hash);
    if (it != held_.end()) return it->second;
    auto wall = net_.wall_seconds();
    held_torrent t;
    t.meta = meta;
    t.cache.torrent_name = meta.info.name;
    t.cache.hash = meta.hash;
    t.cache.last_access = wall;
    t.resume = store::new_resume(meta.hash, meta.info.piece_count(), wall);
    t.resume.publisher = publisher;
    if (profile_) {
        profile_->save_torrent(meta, wall);
        t.resume = profile_->save_resume(t.resume);
    }
    adopt(std::move(t));
    return held_.at(meta.hash);
}

bool node::accept_piece(const infohash& h, std::size_t index, bytes data)
{
    auto it = held_.find(h);
    if (it == held_.end()) return false;
    auto& t = it->second;
    auto wall = net_.wall_seconds();
    bytes copy = profile_ ? data : bytes{};
    try {
        store::put_piece(t.cache, t.resume, t.meta.info, index, std::move(data), wall);
    } catch (const store::error&) {
        return false;
    }
    if (profile_) {
        profile_->store_piece(t.meta.info.name, h, index, copy, wall);
        persist_resume(t);
    }
    return true;
}

std::optional<bytes> node::read_piece(const infohash& h, std::size_t index)
{
    auto it = held_.find(h);
    if (it == held_.end()) return std::nullopt;
    auto p = it->second.cache.pieces.find(index);
    if (p == it->second.cache.pieces.end()) return std::nullopt;
    return p->second;
}

std::optional<bundle::file_tree> node::content(const infohash& h)
{
    auto it = held_.find(h);
    if (it == held_.end()) return std::nullopt;
    const auto& t = it->second;
    if (!t.cache.complete(t.meta.info)) return std::nullopt;
    bytes data;
    data.reserve(static_cast<std::size_t>(t.meta.info.total_length()));
    for (const auto& [i, piece] : t.cache.pieces) data += piece;
    return bundle::split_content(t.meta.info, data);
}

bool node::serving(const infohash& h) const
{
    return running_ && held_.count(h) != 0 && swarm_->complete(h);
}

void node::evict_if_needed()
{
    std::set<infohash> busy;
    for (const auto& [id, js] : jobs_)
        if (!js.job.terminal())
            for (const auto& [h, t] : js.targets) busy.insert(h);
    std::vector<store::eviction_candidate> cands;
    for (const auto& [h, t] : held_)
        cands.push_back({h, t.cache.total_bytes, t.cache.last_access, swarm_->complete(h),
                         busy.count(h) != 0 || t.resume.publisher || swarm_->downloading(h)});
    auto r = store::evict(settings_, cands);
    for (const auto& h : r.removed) {
        auto& t = held_.at(h);
        if (profile_) profile_->remove_cache(t.meta.info.name, h);
        t.cache.pieces.clear();
        t.cache.total_bytes = 0;
        t.resume.bitfield.assign(t.resume.bitfield.size(), false);
        swarm_->add_torrent(t.meta, t.resume.bitfield, t.resume.publisher, swarm_->stats(h));
        persist_resume(t);
        for (auto s = sites_.begin(); s != sites_.end();)
            s = std::ranges::any_of(s->second.man.members, [&](const auto& m) { return m.hash == h; }) ? sites_.erase(s)
                                                                                                     : std::next(s);
    }
}

// ------------------------------------------------------------- networking

void node::schedule_tick()
{
    tick_timer_ = net_.schedule(cfg_.tick_ms, [this] {
        tick_timer_.reset();
        on_tick();
    });
}

void node::on_tick()
{
    if (!running_) return;
    auto now = net_.now();
    send_dht(dht_->tick(now));
    send_swarm(swarm_->tick(now));
    std::vector<std::uint64_t> active;
    for (const auto& [id, js] : jobs_)
        if (!js.job.terminal()) active.push_back(id);
    for (auto id : active) step(id);
    if (running_ && now - last_announce_ >= cfg_.announce_interval_ms) announce_all();
    if (running_) schedule_tick();
}

void node::on_datagram(const compact_peer& from, bytes_view payload)
{
    if (!running_) return;
    auto now = net_.now();
    if (dht::is_krpc(payload)) {
        try {
            auto msg = dht::decode_message(payload);
            send_dht(dht_->handle_message(from, msg, now));
        } catch (const dht::error&) {
        }
    } else if (swarm::is_swarm(payload)) {
        send_swarm(swarm_->handle(from, payload, now));
    }
    if (observer_) observer_(from, payload);
}

void node::send_dht(const std::vector<dht::outgoing>& out)
{
    for (const auto& o : out) {
        if (!running_) return;
        try {
            net_.send(endpoint_, o.to, dht::encode_message(o.msg));
        } catch (const transport::error&) {
        }
    }
}

void node::send_swarm(const std::vector<swarm::outgoing>& out)
{
    for (const auto& o : out) {
        if (!running_) return;
        try {
            net_.send(endpoint_, o.to, o.payload);
        } catch (const transport::error&) {
        }
    }
}

void node::announce_all()
{
    if (!running_) return;
    auto now = net_.now();
    last_announce_ = now;
    for (const auto& [h, t] : held_)
        if (!t.cache.pieces.empty()) send_dht(dht_->announce(h, endpoint_.port, now));
}

// ---------------------------------------------------------------- publish

bundle::published node::publish(const bundle::website& site, bundle::publish_mode mode,
                                 const bundle::publish_options& opts)
{
    auto wall = net_.wall_seconds();
    auto pub = bundle::publish(site, mode, opts);
    for (const auto& meta : pub.torrents) {
        const auto& files = pub.contents.at(meta.hash);
        if (profile_) write_published_torrent(*profile_, meta, files, wall);
        held_torrent t;
        t.meta = meta;
        t.cache.torrent_name = meta.info.name;
        t.cache.hash = meta.hash;
        t.cache.last_access = wall;
        auto data = torrent::concatenate(meta.info, files);
        auto pl = static_cast<std::size_t>(meta.info.piece_length);
        for (std::size_t i = 0; i < meta.info.piece_count(); ++i) {
            t.cache.pieces.emplace(i, data.substr(i * pl, pl));
            t.cache.total_bytes += static_cast<std::int64_t>(std::min(pl, data.size() - i * pl));
        }
        if (profile_) {
            t.resume = *profile_->load_resume(meta.hash);
        } else {
            t.resume = store::new_resume(meta.hash, meta.info.piece_count(), wall);
            t.resume.bitfield.assign(t.resume.bitfield.size(), true);
            t.resume.publisher = true;
        }
        if (auto old = held_.find(meta.hash); old != held_.end() && swarm_) {
            t.resume.uploaded = swarm_->stats(meta.hash).uploaded;
            t.resume.downloaded = swarm_->stats(meta.hash).downloaded;
        }
        if (swarm_) {
            adopt(std::move(t));
        } else {
            held_[meta.hash] = std::move(t);
        }
    }
    auto tree = site.tree;
    sites_[pub.man.base().hash] = site_record{pub.man, std::move(tree)};
    if (running_) {
        auto now = net_.now();
        for (const auto& meta : pub.torrents) send_dht(dht_->announce(meta.hash, endpoint_.port, now));
    }
    return pub;
}

// -------------------------------------------------------------- page load

std::optional<bundle::file_tree> node::site(const infohash& h)
{
    if (auto it = sites_.find(h); it != sites_.end()) return it->second.tree;
    auto base = content(h);
    if (!base) return std::nullopt;
    bundle::manifest man;
    auto mf = base->find(std::string(bundle::manifest_path));
    try {
        if (mf != base->end()) {
            man = bundle::decode_manifest(mf->second, h);
        } else {
            man.name = held_.at(h).meta.info.name;
            man.members.push_back({h, ""});
        }
        std::map<infohash, std::pair<torrent::info_dict, bundle::file_tree>> members;
        members.emplace(h, std::make_pair(held_.at(h).meta.info, std::move(*base)));
        for (std::size_t i = 1; i < man.members.size(); ++i) {
            auto c = content(man.members[i].hash);
            if (!c) return std::nullopt;
            members.emplace(man.members[i].hash, std::make_pair(held_.at(man.members[i].hash).meta.info, std::move(*c)));
        }
        auto tree = bundle::assemble(man, members);
        sites_[h] = site_record{man, tree};
        return tree;
    } catch (const bundle::error&) {
        return std::nullopt;
    }
}

std::vector<infohash> node::served() const
{
    std::vector<infohash> out;
    for (const auto& [h, s] : sites_) out.push_back(h);
    return out;
}

const load_job* node::job(std::uint64_t id) const
{
    auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : &it->second.job;
}

const load_job* node::job_for(const infohash& h) const
{
    auto it = by_hash_.find(h);
    return it == by_hash_.end() ? nullptr : job(it->second);
}

std::vector<const load_job*> node::jobs() const
{
    std::vector<const load_job*> out;
    for (const auto& [id, js] : jobs_) out.push_back(&js.job);
    return out;
}

void node::log_step(job_state& js, const std::string& step, std::string detail)
{
    js.job.log.push_back({net_.now(), step, std::move(detail)});
}

void node::set_phase(job_state& js, phase p)
{
    if (static_cast<int>(p) > static_cast<int>(js.job.ph)) js.job.ph = p;
}

std::uint64_t node::load_site(const std::string& url)
{
    auto now = net_.now();
    job_state js;
    js.job.id = next_job_++;
    js.job.url = url;
    js.job.started_at = net_.wall_seconds();
    js.job.started_ms = now;
    js.last_progress = now;

    bool bad = false;
    std::string why;
    try {
        if (url.rfind("magnet:", 0) == 0) {
            auto m = torrent::parse_magnet(url);
            js.job.hash = m.hash;
            js.trackers = m.trackers;
            js.job.path = "index.html";
        } else {
            auto u = bundle::resolve_url(url, aliases_);
            js.job.hash = u.hash;
            js.job.path = u.path;
        }
    } catch (const std::exception& e) {
        bad = true;
        why = e.what();
    }

    if (!bad)
        if (auto existing = by_hash_.find(js.job.hash); existing != by_hash_.end()) {
            auto& prev = jobs_.at(existing->second);
            if (!prev.job.terminal()) return prev.job.id;
        }

    auto id = js.job.id;
    auto& st = jobs_.emplace(id, std::move(js)).first->second;
    if (bad) {
        log_step(st, "resolve", why);
        fail_job(st, failure::bad_url, why);
        return id;
    }
    by_hash_[st.job.hash] = id;
    log_step(st, "resolve", st.job.hash.hex());

    if (site(st.job.hash)) {
        // Everything is local: no network traffic at all.
        st.job.cache_hit = true;
        st.man = sites_.at(st.job.hash).man;
        for (const auto& m : st.man->members) {
            auto& t = st.targets[m.hash];
            t.hash = m.hash;
            t.root = m.hash == st.job.hash;
            t.have_meta = t.complete = true;
        }
        set_phase(st, phase::discovering);
        log_step(st, "discover", "skipped: cached");
        set_phase(st, phase::fetching_metadata);
        log_step(st, "fetch_metadata", "skipped: cached");
        set_phase(st, phase::transferring);
        log_step(st, "transfer", "skipped: cached");
        log_step(st, "manifest", std::to_string(st.man->members.size()) + " members");
        finish_job(st);
        return id;
    }

    auto& root = st.targets[st.job.hash];
    root.hash = st.job.hash;
    root.root = true;
    set_phase(st, phase::discovering);
    log_step(st, "discover");
    if (running_) step(id);
    return id;
}

std::vector<compact_peer> node::candidates(const target& t) const
{
    std::vector<compact_peer> out;
    for (const auto& p : t.peers)
        if (!t.bad.count(p) && p != endpoint_) out.push_back(p);
    return out;
}

void node::step(std::uint64_t id)
{
    auto it = jobs_.find(id);
    if (it == jobs_.end() || it->second.job.terminal() || !running_) return;
    auto& js = it->second;
    std::vector<infohash> hashes;
    for (const auto& [h, t] : js.targets) hashes.push_back(h);
    for (const auto& h : hashes) {
        if (js.job.terminal()) return;
        step_target(js, js.targets.at(h));
    }
    if (js.job.terminal()) return;

    std::size_t done = 0, total = 0;
    bool all = js.man.has_value();
    for (auto& [h, t] : js.targets) {
        if (t.have_meta && swarm_->has_torrent(h)) {
            const auto& have = swarm_->have(h);
            total += have.size();
            done += static_cast<std::size_t>(std::count(have.begin(), have.end(), true));
            js.last_progress = std::max(js.last_progress, swarm_->last_progress(h));
        }
        if (!t.complete) all = false;
    }
    js.job.pieces_done = done;
    js.job.pieces_total = total;
    if (all) {
        finish_job(js);
        return;
    }

    auto now = net_.now();
    if (now - js.last_progress >= cfg_.load_timeout_ms) {
        auto& root = js.targets.at(js.job.hash);
        if (!js.saw_peers)
            fail_job(js, failure::no_peers, "no peers found for " + js.job.hash.hex());
        else if (!root.have_meta && js.saw_mismatch)
            fail_job(js, failure::metadata_hash_mismatch, "metadata from every peer failed the infohash check");
        else
            fail_job(js, failure::timeout, "no progress for " + std::to_string(cfg_.load_timeout_ms) + " ms");
    }
}

void node::step_target(job_state& js, target& t)
{
    if (t.complete) return;
    auto now = net_.now();
    auto id = js.job.id;
    auto h = t.hash;

    for (const auto& p : dht_->stored_peers(h, now))
        if (p != endpoint_ && t.seen.insert(p).second) {
            t.peers.push_back(p);
            js.saw_peers = true;
            js.last_progress = now;
        }

    if (!t.lookup_inflight && (t.last_lookup < 0 || now - t.last_lookup >= cfg_.rediscover_ms)) {
        t.lookup_inflight = true;
        t.last_lookup = now;
        send_dht(dht_->get_peers(h, now, [this, id, h](const dht::lookup_result& r) { on_peers(id, h, r); }));
        if (js.job.terminal() || t.complete) return;
    }

    if (!t.have_meta && held_.count(h)) {
        t.have_meta = true;
        if (t.root) {
            set_phase(js, phase::fetching_metadata);
            log_step(js, "fetch_metadata", "skipped: torrent cached");
        }
    }

    if (!t.have_meta) {
        auto cands = candidates(t);
        if (!t.fetching && !cands.empty() && (t.last_fetch < 0 || now - t.last_fetch >= cfg_.rediscover_ms)) {
            t.fetching = true;
            t.last_fetch = now;
            if (t.root) {
                set_phase(js, phase::fetching_metadata);
                log_step(js, "fetch_metadata", std::to_string(cands.size()) + " peers");
            }
            send_swarm(swarm_->fetch_metadata(
                h, cands, now, [this, id, h](const swarm::metadata_result& r) { on_metadata(id, h, r); }));
        }
        return;
    }

    if (swarm_->complete(h)) {
        on_target_complete(js, t);
        return;
    }
    if (!swarm_->downloading(h)) {
        if (t.root) {
            set_phase(js, phase::transferring);
            log_step(js, "transfer", h.hex());
        }
        send_swarm(swarm_->start_download(h, candidates(t), now));
    }
}

void node::on_peers(std::uint64_t id, const infohash& h, const dht::lookup_result& r)
{
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return;
    auto& js = it->second;
    auto tt = js.targets.find(h);
    if (tt == js.targets.end()) return;
    auto& t = tt->second;
    t.lookup_inflight = false;
    if (js.job.terminal()) return;
    auto now = net_.now();
    std::vector<compact_peer> fresh;
    for (const auto& p : r.peers)
        if (p != endpoint_ && t.seen.insert(p).second) {
            t.peers.push_back(p);
            fresh.push_back(p);
        }
    if (fresh.empty()) return;
    js.saw_peers = true;
    js.last_progress = now;
    if (t.have_meta && swarm_->downloading(h)) send_swarm(swarm_->add_peers(h, fresh, now));
}

void node::on_metadata(std::uint64_t id, const infohash& h, const swarm::metadata_result& r)
{
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return;
    auto& js = it->second;
    auto tt = js.targets.find(h);
    if (tt == js.targets.end()) return;
    auto& t = tt->second;
    t.fetching = false;
    for (const auto& p : r.mismatched) {
        t.bad.insert(p);
        js.saw_mismatch = true;
    }
    if (!r.ok || js.job.terminal() || t.have_meta) return;

    torrent::torrent_meta meta;
    try {
        meta.info = torrent::parse_info(r.info_bytes);
    } catch (const torrent::error&) {
        js.saw_mismatch = true;
        return;
    }
    meta.info_bytes = r.info_bytes;
    meta.hash = h;
    if (t.root) meta.trackers = js.trackers;
    hold(meta, false);
    t.have_meta = true;
    js.last_progress = net_.now();
    step_target(js, t);
}

void node::on_target_complete(job_state& js, target& t)
{
    if (t.complete) return;
    t.complete = true;
    js.last_progress = net_.now();
    swarm_->stop_download(t.hash);
    if (!t.root) return;

    auto base = content(t.hash);
    bundle::manifest man;
    try {
        auto mf = base ? base->find(std::string(bundle::manifest_path)) : bundle::file_tree::iterator{};
        if (base && mf != base->end()) {
            man = bundle::decode_manifest(mf->second, t.hash);
        } else {
            man.name = held_.at(t.hash).meta.info.name;
            man.members.push_back({t.hash, ""});
        }
    } catch (const bundle::error& e) {
        fail_job(js, failure::member_incomplete, e.what());
        return;
    }
    js.man = man;
    log_step(js, "manifest", std::to_string(man.members.size()) + " members");
    for (std::size_t i = 1; i < man.members.size(); ++i) {
        auto& m = js.targets[man.members[i].hash];
        m.hash = man.members[i].hash;
    }
    for (std::size_t i = 1; i < man.members.size(); ++i) {
        if (js.job.terminal()) return;
        step_target(js, js.targets.at(man.members[i].hash));
    }
}

void node::finish_job(job_state& js)
{
    if (js.job.terminal()) return;
    auto h = js.job.hash;
    set_phase(js, phase::assembling);
    auto tree = site(h);
    if (!tree) {
        log_step(js, "assemble", "incomplete");
        fail_job(js, failure::member_incomplete, "site " + h.hex() + " could not be assembled");
        return;
    }
    log_step(js, "assemble", std::to_string(tree->size()) + " files");
    log_step(js, "scripts_skipped");
    if (js.job.cache_hit) {
        log_step(js, "share", "already shared");
    } else {
        auto now = net_.now();
        for (const auto& m : js.man->members) {
            send_dht(dht_->announce(m.hash, endpoint_.port, now));
            js.job.announced.push_back(m.hash);
        }
        log_step(js, "share", std::to_string(js.job.announced.size()) + " announced");
    }
    std::size_t total = 0;
    for (const auto& m : js.man->members) total += held_.at(m.hash).meta.info.piece_count();
    js.job.pieces_done = js.job.pieces_total = total;
    set_phase(js, phase::ready);
    js.job.finished_ms = net_.now();
    log_step(js, "ready");
    evict_if_needed();
}

void node::fail_job(job_state& js, failure cause, std::string detail)
{
    js.job.cause = cause;
    js.job.detail = detail;
    js.job.ph = phase::failed;
    js.job.finished_ms = net_.now();
    log_step(js, "failed", to_string(cause) + ": " + detail);
    for (const auto& [h, t] : js.targets)
        if (swarm_ && !t.complete) swarm_->stop_download(h);
}

// ------------------------------------------------------------------- http

namespace {

http_response json_response(int status, const json& body)
{
    http_response r;
    r.status = status;
    r.headers.emplace_back("Content-Type", "application/json");
    r.body = body.dump(2) + "\n";
    return r;
}

http_response error_response(int status, const std::string& code, const std::string& message)
{
    return json_response(status, json{{"error", code}, {"message", message}});
}

std::optional<std::string> query_param(std::string_view query, std::string_view key)
{
    std::istringstream in{std::string(query)};
    std::string part;
    while (std::getline(in, part, '&')) {
        auto eq = part.find('=');
        if (part.substr(0, eq) != key) continue;
        std::string v = eq == std::string::npos ? std::string{} : part.substr(eq + 1);
        std::replace(v.begin(), v.end(), '+', ' ');
        return percent_decode(v);
    }
    return std::nullopt;
}

json optional_int(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

http_response node::handle_http(std::string_view method, std::string_view target)
{
    if (method != "GET" && method != "HEAD") {
        auto r = error_response(405, "MethodNotAllowed", "only GET is supported");
        r.headers.emplace_back("Allow", "GET, HEAD");
        return r;
    }
    auto q = target.find('?');
    auto path = target.substr(0, q);
    auto query = q == std::string_view::npos ? std::string_view{} : target.substr(q + 1);

    if (path == "/status") {
        http_response r;
        r.headers.emplace_back("Content-Type", "application/json");
        r.body = status_json();
        return r;
    }

    if (path == "/magnet") {
        auto uri = query_param(query, "uri");
        if (!uri) return error_response(400, "BadRequest", "missing uri parameter");
        torrent::magnet m;
        try {
            m = torrent::parse_magnet(*uri);
        } catch (const torrent::error& e) {
            return error_response(400, "BadRequest", e.what());
        }
        load_site(*uri);
        http_response r;
        r.status = 302;
        r.headers.emplace_back("Location", "/btih/" + m.hash.hex() + "/");
        return r;
    }

    constexpr std::string_view prefix = "/btih/";
    if (path.substr(0, prefix.size()) != prefix) return error_response(404, "NotFound", "no such endpoint");
    auto rest = path.substr(prefix.size());
    auto slash = rest.find('/');
    auto hex = rest.substr(0, slash);
    auto h = infohash::from_hex(hex);
    if (!h || hex.size() != 40) return error_response(400, "BadRequest", "expected a 40-hex infohash");
    std::string sub(slash == std::string_view::npos ? std::string_view{} : rest.substr(slash));

    std::string entry = "index.html";
    if (auto s = sites_.find(*h); s != sites_.end()) entry = s->second.man.entry;
    std::string file;
    try {
        file = bundle::normalize_path(sub, entry);
    } catch (const bundle::error& e) {
        if (e.code() == bundle::errc::path_escape) return error_response(403, "PathEscape", e.what());
        return error_response(400, "BadRequest", e.what());
    }

    if (auto tree = site(*h)) {
        auto f = tree->find(file);
        if (f == tree->end()) return error_response(404, "NotFound", file + " is not part of the site");
        http_response r;
        r.headers.emplace_back("Content-Type", content_type_for(file));
        r.headers.emplace_back("ETag", "\"" + h->hex() + "\"");
        r.body = f->second;
        return r;
    }

    const load_job* j = job_for(*h);
    if (!j || (j->ph == phase::ready)) j = job(load_site("bittorrent://" + h->hex() + "/" + file));
    if (j->ph == phase::failed) return error_response(404, to_string(j->cause), j->detail);
    if (j->ph == phase::ready) return handle_http(method, target);
    auto r = json_response(503, json{{"infohash", h->hex()},
                                     {"job", j->id},
                                     {"phase", to_string(j->ph)},
                                     {"pieces_done", j->pieces_done},
                                     {"pieces_total", j->pieces_total}});
    r.headers.emplace_back("Retry-After", "1");
    return r;
}

std::string node::status_json()
{
    json doc;
    doc["schema"] = "mael.status/1";
    json n;
    n["name"] = cfg_.name;
    n["endpoint"] = endpoint_.to_string();
    n["id"] = dht_ ? json(dht_->id().hex()) : json(nullptr);
    n["running"] = running_;
    n["gateway_open"] = gateway_open_;
    n["bootstrapped"] = bootstrapped_;
    n["routing_table_size"] = dht_ ? dht_->table().size() : 0;
    doc["node"] = n;

    json served_list = json::array();
    for (const auto& h : served()) served_list.push_back(h.hex());
    doc["served"] = served_list;

    json torrents = json::array();
    for (const auto& [h, t] : held_) {
        json e;
        e["infohash"] = h.hex();
        e["name"] = t.meta.info.name;
        e["pieces"] = t.meta.info.piece_count();
        e["have"] = t.cache.pieces.size();
        bool complete = swarm_ ? swarm_->complete(h) : t.cache.complete(t.meta.info);
        e["complete"] = complete;
        e["served"] = running_ && complete;
        e["publisher"] = t.resume.publisher;
        e["peers"] = swarm_ ? swarm_->session_count(h) : 0;
        auto st = swarm_ && swarm_->has_torrent(h) ? swarm_->stats(h) : swarm::transfer_stats{};
        e["uploaded"] = st.uploaded;
        e["downloaded"] = st.downloaded;
        auto ratio = st.ratio();
        e["ratio"] = ratio ? json(*ratio) : json(nullptr);
        torrents.push_back(e);
    }
    doc["torrents"] = torrents;

    json jobs_list = json::array();
    for (const auto& [id, js] : jobs_) {
        const auto& j = js.job;
        json e;
        e["id"] = j.id;
        e["url"] = j.url;
        e["infohash"] = j.hash.hex();
        e["phase"] = to_string(j.ph);
        e["cause"] = j.cause == failure::none ? json(nullptr) : json(to_string(j.cause));
        e["detail"] = j.detail;
        e["pieces_done"] = j.pieces_done;
        e["pieces_total"] = j.pieces_total;
        e["started_at"] = j.started_at;
        e["cache_hit"] = j.cache_hit;
        json log = json::array();
        for (const auto& s : j.log) log.push_back(json{{"at_ms", s.at_ms}, {"step", s.step}, {"detail", s.detail}});
        e["log"] = log;
        jobs_list.push_back(e);
    }
    doc["jobs"] = jobs_list;

    json s;
    s["cache_size"] = settings_.cache_size_bytes;
    s["share_ratio_limit"] = settings_.share_ratio_limit ? json(*settings_.share_ratio_limit) : json(nullptr);
    s["upload_rate"] = optional_int(settings_.upload_rate);
    s["download_rate"] = optional_int(settings_.download_rate);
    s["transfer_cap"] = optional_int(settings_.transfer_cap);
    s["port"] = settings_.port;
    s["background_seed"] = settings_.background_seed;
    s["send_stats"] = settings_.send_stats;
    doc["settings"] = s;

    auto totals = swarm_ ? swarm_->totals() : swarm::node_totals{settings_.uploaded_total, settings_.downloaded_total};
    doc["totals"] = json{{"uploaded", totals.uploaded}, {"downloaded", totals.downloaded}};
    return doc.dump(2) + "\n";
}

}  // namespace mael::gateway
