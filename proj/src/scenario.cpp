#include "mael/scenario.hpp"

#include "mael/swarm.hpp"

#include <json.hpp>
#include <toml.hpp>

#include <cstdio>
#include <sstream>

namespace mael::scenario {

using json = nlohmann::ordered_json;

std::string to_string(action_kind k)
{
    switch (k) {
    case action_kind::publish: return "publish";
    case action_kind::load: return "load";
    case action_kind::stop: return "stop";
    case action_kind::start: return "start";
    case action_kind::stop_gateway: return "stop_gateway";
    case action_kind::monitor: return "monitor";
    case action_kind::settings: return "settings";
    }
    return "unknown";
}

namespace {

template <class T>
T get(const toml::table& t, std::string_view key, T fallback)
{
    if (auto v = t[key].value<T>()) return *v;
    return fallback;
}

std::int64_t non_negative(const toml::table& t, std::string_view key, std::int64_t fallback)
{
    auto v = get<std::int64_t>(t, key, fallback);
    if (v < 0) throw error(errc::bad_scenario, std::string(key) + " must not be negative");
    return v;
}

std::vector<std::size_t> index_list(const toml::table& t, std::string_view key)
{
    std::vector<std::size_t> out;
    if (auto v = t[key].value<std::int64_t>()) {
        out.push_back(static_cast<std::size_t>(*v));
    } else if (auto arr = t[key].as_array()) {
        for (const auto& e : *arr) {
            auto i = e.value<std::int64_t>();
            if (!i || *i < 0) throw error(errc::bad_scenario, std::string(key) + " must hold node indices");
            out.push_back(static_cast<std::size_t>(*i));
        }
    }
    return out;
}

std::optional<action_kind> parse_kind(std::string_view s)
{
    for (auto k : {action_kind::publish, action_kind::load, action_kind::stop, action_kind::start,
                   action_kind::stop_gateway, action_kind::monitor, action_kind::settings})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

std::string node_name(std::size_t i)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "node%02zu", i);
    return buf;
}

dht::compact_peer node_endpoint(std::size_t i)
{
    return dht::compact_peer::from_u32((10u << 24) | static_cast<std::uint32_t>(i / 250) << 8 |
                                           static_cast<std::uint32_t>(i % 250 + 1),
                                       6881);
}

std::string stamp(std::int64_t ms)
{
    char buf[24];
    std::snprintf(buf, sizeof buf, "%09lld", static_cast<long long>(ms));
    return buf;
}

}  // namespace

scenario parse(std::string_view text)
{
    toml::table root;
    try {
        root = toml::parse(text);
    } catch (const toml::parse_error& e) {
        throw error(errc::bad_scenario, std::string("TOML: ") + std::string(e.description()));
    }
    scenario s;
    s.name = get<std::string>(root, "name", s.name);
    s.until_ms = non_negative(root, "until_ms", s.until_ms);
    if (auto net = root["network"].as_table()) {
        s.network.seed = static_cast<std::uint64_t>(get<std::int64_t>(*net, "seed", 1));
        s.network.latency_min_ms = non_negative(*net, "latency_min_ms", s.network.latency_min_ms);
        s.network.latency_max_ms = non_negative(*net, "latency_max_ms", s.network.latency_max_ms);
        s.network.loss_probability = get<double>(*net, "loss", 0.0);
        s.network.max_datagram = static_cast<std::size_t>(non_negative(*net, "max_datagram", 1472));
        s.nodes = static_cast<std::size_t>(non_negative(*net, "nodes", static_cast<std::int64_t>(s.nodes)));
        s.tick_ms = non_negative(*net, "tick_ms", s.tick_ms);
        s.load_timeout_ms = non_negative(*net, "load_timeout_ms", s.load_timeout_ms);
        s.start_spacing_ms = non_negative(*net, "start_spacing_ms", s.start_spacing_ms);
        if (net->contains("bootstrap")) s.bootstrap = index_list(*net, "bootstrap");
    }
    try {
        s.network.validate();
    } catch (const transport::error& e) {
        throw error(errc::bad_scenario, e.what());
    }
    if (s.nodes == 0) throw error(errc::bad_scenario, "a scenario needs at least one node");
    if (s.tick_ms <= 0) throw error(errc::bad_scenario, "tick_ms must be positive");
    for (auto b : s.bootstrap)
        if (b >= s.nodes) throw error(errc::bad_scenario, "bootstrap index " + std::to_string(b) + " out of range");

    if (auto sites = root["site"].as_array()) {
        for (const auto& e : *sites) {
            const auto* t = e.as_table();
            if (!t) throw error(errc::bad_scenario, "[[site]] entries must be tables");
            site_spec sp;
            sp.name = get<std::string>(*t, "name", "");
            if (sp.name.empty()) throw error(errc::bad_scenario, "[[site]] needs a name");
            sp.seed = static_cast<std::uint64_t>(get<std::int64_t>(*t, "seed", 1));
            sp.files = static_cast<std::size_t>(non_negative(*t, "files", 12));
            sp.bytes = non_negative(*t, "bytes", 1 << 20);
            sp.piece_length = non_negative(*t, "piece_length", torrent::default_piece_length);
            if (t->contains("split_threshold")) sp.split_threshold = non_negative(*t, "split_threshold", 0);
            for (const auto& other : s.sites)
                if (other.name == sp.name) throw error(errc::bad_scenario, "duplicate site " + sp.name);
            s.sites.push_back(sp);
        }
    }

    if (auto actions = root["action"].as_array()) {
        for (const auto& e : *actions) {
            const auto* t = e.as_table();
            if (!t) throw error(errc::bad_scenario, "[[action]] entries must be tables");
            action a;
            a.at_ms = non_negative(*t, "at_ms", 0);
            auto kind = get<std::string>(*t, "kind", "");
            auto k = parse_kind(kind);
            if (!k) throw error(errc::bad_scenario, "unknown action kind '" + kind + "'");
            a.kind = *k;
            a.nodes = index_list(*t, "node");
            auto more = index_list(*t, "nodes");
            a.nodes.insert(a.nodes.end(), more.begin(), more.end());
            if (a.nodes.empty()) throw error(errc::bad_scenario, kind + " action needs node or nodes");
            for (auto n : a.nodes)
                if (n >= s.nodes) throw error(errc::bad_scenario, "node index " + std::to_string(n) + " out of range");
            a.site = get<std::string>(*t, "site", "");
            bool needs_site = a.kind == action_kind::publish || a.kind == action_kind::load || a.kind == action_kind::monitor;
            if (needs_site && std::none_of(s.sites.begin(), s.sites.end(), [&](const auto& sp) { return sp.name == a.site; }))
                throw error(errc::bad_scenario, kind + " action names unknown site '" + a.site + "'");
            a.duration_ms = non_negative(*t, "duration_ms", a.duration_ms);
            a.interval_ms = non_negative(*t, "interval_ms", a.interval_ms);
            if (auto v = (*t)["share_ratio_limit"].value<double>()) a.share_ratio_limit = *v;
            if (auto v = (*t)["background_seed"].value<bool>()) a.background_seed = *v;
            s.actions.push_back(a);
        }
    }
    std::stable_sort(s.actions.begin(), s.actions.end(), [](const auto& a, const auto& b) { return a.at_ms < b.at_ms; });
    return s;
}

scenario load(const fs::path& file)
{
    auto raw = store::read_file(file);
    if (!raw) throw error(errc::bad_scenario, "cannot read " + file.string());
    return parse(*raw);
}

// ------------------------------------------------------------------ runner

namespace {

struct published_site {
    infohash hash;
    std::string magnet;
    std::vector<infohash> members;
};

struct active_monitor {
    monitor_run run;
    std::unique_ptr<monitor::crawler> crawler;
    infohash target;
    std::int64_t ends = 0;
};

class runner {
public:
    runner(const scenario& s, const options& o) : s_(s), opts_(o), net_(sim_cfg(s, o)) {}

    result go();

private:
    static transport::sim_config sim_cfg(const scenario& s, const options& o)
    {
        auto c = s.network;
        if (o.seed) c.seed = *o.seed;
        return c;
    }

    void line(const std::string& text) { out_ << "t=" << stamp(net_.now()) << " " << text << "\n"; }
    void perform(const action& a);
    void sample_truth();

    const scenario& s_;
    options opts_;
    transport::sim_network net_;
    std::vector<std::unique_ptr<gateway::node>> nodes_;
    std::map<std::string, published_site> published_;
    std::vector<std::pair<std::size_t, std::uint64_t>> loads_;
    std::vector<std::unique_ptr<active_monitor>> monitors_;
    std::ostringstream out_;
    std::ostringstream trace_;
    bytes digest_input_;
    std::uint64_t datagrams_ = 0;
    std::uint64_t dropped_ = 0;
};

void runner::perform(const action& a)
{
    for (auto i : a.nodes) {
        auto& n = *nodes_[i];
        auto name = node_name(i);
        switch (a.kind) {
        case action_kind::publish: {
            const auto& sp = *std::find_if(s_.sites.begin(), s_.sites.end(), [&](const auto& x) { return x.name == a.site; });
            auto site = bundle::generate_demo_site(sp.seed, sp.files, sp.bytes);
            bundle::publish_options po;
            po.name = sp.name;
            po.piece_length = sp.piece_length;
            auto pub = n.publish(site, bundle::publish_mode{sp.split_threshold}, po);
            published_site ps;
            ps.hash = pub.man.base().hash;
            torrent::magnet m;
            m.hash = ps.hash;
            m.display_name = sp.name;
            ps.magnet = m.to_uri();
            for (const auto& mem : pub.man.members) ps.members.push_back(mem.hash);
            published_[sp.name] = ps;
            line(name + " publish " + sp.name + " " + ps.hash.hex() + " members " + std::to_string(ps.members.size()));
            break;
        }
        case action_kind::load: {
            auto it = published_.find(a.site);
            if (it == published_.end()) {
                line(name + " load " + a.site + " skipped: not published yet");
                break;
            }
            if (!n.running()) {
                line(name + " load " + a.site + " skipped: node stopped");
                break;
            }
            auto id = n.load_site(it->second.magnet);
            loads_.emplace_back(i, id);
            line(name + " load " + a.site + " job " + std::to_string(id));
            break;
        }
        case action_kind::stop:
            n.stop(true);
            line(name + " stop");
            break;
        case action_kind::start:
            n.start();
            line(name + " start " + n.endpoint().to_string());
            break;
        case action_kind::stop_gateway:
            n.close_gateway();
            line(name + " stop_gateway " + (n.running() ? "seeding" : "stopped"));
            break;
        case action_kind::settings: {
            auto st = n.settings();
            if (a.share_ratio_limit)
                st.share_ratio_limit = *a.share_ratio_limit < 0 ? std::nullopt : std::optional<double>(*a.share_ratio_limit);
            if (a.background_seed) st.background_seed = *a.background_seed;
            n.update_settings(st);
            line(name + " settings");
            break;
        }
        case action_kind::monitor: {
            auto it = published_.find(a.site);
            if (it == published_.end()) {
                line(name + " monitor " + a.site + " skipped: not published yet");
                break;
            }
            auto m = std::make_unique<active_monitor>();
            m->run.node = i;
            m->run.site = a.site;
            m->target = it->second.hash;
            m->ends = net_.now() + a.duration_ms;
            monitor::crawl_config cc;
            cc.duration_ms = a.duration_ms;
            cc.interval_ms = a.interval_ms;
            cc.seed = net_.config().seed ^ i;
            m->crawler = std::make_unique<monitor::crawler>(n, m->target, cc);
            auto* run = &m->run;
            m->crawler->set_record_sink([run](const std::string& l) { run->jsonl.push_back(l); });
            try {
                m->crawler->start();
                line(name + " monitor " + a.site + " for " + std::to_string(a.duration_ms) + " ms");
            } catch (const monitor::error& e) {
                line(name + " monitor " + a.site + " failed: " + e.what());
                break;
            }
            monitors_.push_back(std::move(m));
            sample_truth();
            break;
        }
        }
    }
}

void runner::sample_truth()
{
    auto now = net_.now();
    bool any = false;
    for (auto& m : monitors_) {
        if (m->crawler->done() || now > m->ends) continue;
        any = true;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& n = *nodes_[i];
            if (i == m->run.node || !n.running()) continue;
            if (n.swarm().has_torrent(m->target) && n.swarm().complete(m->target)) m->run.ground_truth.insert(n.endpoint());
        }
    }
    if (any) net_.schedule(1000, [this] { sample_truth(); });
}

result runner::go()
{
    net_.set_send_observer([this](const transport::delivery_record& r, bytes_view payload) {
        ++datagrams_;
        if (r.dropped) ++dropped_;
        digest_input_ += std::to_string(r.seq) + " " + std::to_string(r.sent_at) + " " + std::to_string(r.deliver_at) +
                         " " + r.from.to_string() + " " + r.to.to_string() + " " + std::to_string(r.size) +
                         (r.dropped ? " x " : " . ") + sha1_bytes(payload) + "\n";
        std::string kind = "other";
        bool swarm_msg = false, request = false;
        if (dht::is_krpc(payload)) {
            kind = "dht";
        } else if (swarm::is_swarm(payload)) {
            swarm_msg = true;
            try {
                auto m = swarm::decode(payload);
                request = m.type == swarm::msg_type::request;
                kind = request ? "swarm:req" : "swarm";
            } catch (const swarm::error&) {
                kind = "swarm:bad";
            }
        }
        for (auto& m : monitors_) {
            if (m->crawler->done() || r.from != nodes_[m->run.node]->endpoint()) continue;
            if (swarm_msg) ++m->run.swarm_messages_sent;
            if (request) ++m->run.swarm_requests_sent;
            if (kind == "dht") ++m->run.dht_messages_sent;
        }
        if (opts_.trace)
            trace_ << "t=" << stamp(r.sent_at) << " datagram " << r.seq << " " << r.from.to_string() << " -> "
                   << r.to.to_string() << " " << r.size << "B " << kind << (r.dropped ? " dropped" : "") << "\n";
    });

    for (std::size_t i = 0; i < s_.nodes; ++i) {
        gateway::node_config c;
        c.name = node_name(i);
        c.endpoint = node_endpoint(i);
        for (auto b : s_.bootstrap)
            if (b != i) c.bootstrap.push_back(node_endpoint(b));
        if (opts_.profiles) c.profile_root = *opts_.profiles / c.name;
        c.tick_ms = s_.tick_ms;
        c.load_timeout_ms = s_.load_timeout_ms;
        nodes_.push_back(std::make_unique<gateway::node>(net_, c));
    }
    out_ << "scenario " << s_.name << " seed " << net_.config().seed << " nodes " << s_.nodes << "\n";
    for (std::size_t i = 0; i < s_.nodes; ++i) {
        net_.schedule(static_cast<std::int64_t>(i) * s_.start_spacing_ms, [this, i] {
            nodes_[i]->start();
            line(node_name(i) + " start " + nodes_[i]->endpoint().to_string());
        });
    }
    for (const auto& a : s_.actions) net_.schedule(a.at_ms, [this, a] { perform(a); });
    net_.run_until(s_.until_ms);

    result res;
    for (auto& m : monitors_) {
        m->crawler->stop();
        m->run.log = m->crawler->log();
    }

    out_ << "-- jobs\n";
    for (const auto& [i, id] : loads_) {
        const auto* j = nodes_[i]->job(id);
        out_ << node_name(i) << " job " << id << " " << gateway::to_string(j->ph);
        if (j->ph == gateway::phase::failed) out_ << " " << gateway::to_string(j->cause);
        out_ << " pieces " << j->pieces_done << "/" << j->pieces_total << "\n";
        for (const auto& e : j->log)
            out_ << "  t=" << stamp(e.at_ms) << " " << e.step << (e.detail.empty() ? "" : " " + e.detail) << "\n";
    }
    out_ << "-- nodes\n";
    json nodes = json::array();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        auto& n = *nodes_[i];
        auto served = n.served();
        auto totals = n.swarm().totals();
        out_ << node_name(i) << " " << n.endpoint().to_string() << " " << (n.running() ? "running" : "stopped")
             << " table " << n.dht().table().size() << " torrents " << n.swarm().torrents().size() << " served "
             << served.size() << " up " << totals.uploaded << " down " << totals.downloaded << "\n";
        json sv = json::array();
        for (const auto& h : served) sv.push_back(h.hex());
        nodes.push_back(json{{"name", node_name(i)},
                             {"endpoint", n.endpoint().to_string()},
                             {"running", n.running()},
                             {"table_size", n.dht().table().size()},
                             {"served", sv},
                             {"uploaded", totals.uploaded},
                             {"downloaded", totals.downloaded}});
        const gateway::load_job* last = nullptr;
        for (const auto* j : n.jobs()) last = j;
        res.final_jobs.push_back(last ? std::optional<gateway::load_job>(*last) : std::nullopt);
    }
    json mons = json::array();
    if (!monitors_.empty()) out_ << "-- monitors\n";
    for (auto& m : monitors_) {
        std::size_t covered = 0;
        for (const auto& p : m->run.ground_truth) covered += m->run.log.observations.count(p);
        auto st = monitor::report(m->run.log);
        out_ << node_name(m->run.node) << " monitor " << m->run.site << " polls " << m->run.log.polls.size()
             << " unique " << st.unique_peers << " truth " << m->run.ground_truth.size() << " covered " << covered
             << " swarm_sent " << m->run.swarm_messages_sent << " requests " << m->run.swarm_requests_sent << "\n";
        mons.push_back(json{{"node", node_name(m->run.node)},
                            {"site", m->run.site},
                            {"unique_peers", st.unique_peers},
                            {"ground_truth", m->run.ground_truth.size()},
                            {"covered", covered},
                            {"swarm_messages_sent", m->run.swarm_messages_sent},
                            {"swarm_requests_sent", m->run.swarm_requests_sent},
                            {"dht_messages_sent", m->run.dht_messages_sent},
                            {"report", json::parse(monitor::to_json(m->run.log, st))}});
        res.monitors.push_back(m->run);
    }

    res.trace_digest = to_hex(sha1_bytes(digest_input_), false);
    res.datagrams = datagrams_;
    res.dropped = dropped_;
    out_ << "-- network\n";
    out_ << "datagrams " << datagrams_ << " dropped " << dropped_ << " events " << net_.events_processed() << "\n";
    out_ << "trace " << res.trace_digest << "\n";
    res.transcript = out_.str();
    if (opts_.trace) res.transcript += "-- trace\n" + trace_.str();

    json jobs = json::array();
    for (const auto& [i, id] : loads_) {
        const auto* j = nodes_[i]->job(id);
        json log = json::array();
        for (const auto& e : j->log) log.push_back(json{{"at_ms", e.at_ms}, {"step", e.step}, {"detail", e.detail}});
        jobs.push_back(json{{"node", node_name(i)},
                            {"id", id},
                            {"infohash", j->hash.hex()},
                            {"phase", gateway::to_string(j->ph)},
                            {"cause", j->cause == gateway::failure::none ? json(nullptr) : json(gateway::to_string(j->cause))},
                            {"pieces_done", j->pieces_done},
                            {"pieces_total", j->pieces_total},
                            {"log", log}});
    }
    json doc{{"schema", "mael.scenario/1"},
             {"name", s_.name},
             {"seed", net_.config().seed},
             {"until_ms", s_.until_ms},
             {"nodes", nodes},
             {"jobs", jobs},
             {"monitors", mons},
             {"network", json{{"datagrams", datagrams_}, {"dropped", dropped_}, {"events", net_.events_processed()}}},
             {"trace_digest", res.trace_digest}};
    res.report_json = doc.dump(2) + "\n";

    monitors_.clear();
    for (auto& n : nodes_) n->stop(true);
    return res;
}

}  // namespace

result run(const scenario& s, const options& opts)
{
    runner r(s, opts);
    return r.go();
}

}  // namespace mael::scenario
