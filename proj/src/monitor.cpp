#include "mael/monitor.hpp"

#include <json.hpp>

#include <algorithm>
#include <sstream>

namespace mael::monitor {

using json = nlohmann::ordered_json;

std::string to_string(source s) { return s == source::announce ? "announce" : "get_peers"; }

void crawl_config::validate() const
{
    if (duration_ms <= 0) throw error(errc::bad_config, "duration must be positive");
    if (interval_ms <= 0) throw error(errc::bad_config, "interval must be positive");
    if (regions == 0 || fanout == 0) throw error(errc::bad_config, "regions and fanout must be positive");
}

namespace {

// Shared by the live crawler and the JSONL reader so both count alike.
void upsert(observation_log& log, std::map<compact_peer, std::size_t>& last_poll, const compact_peer& p, source src,
            std::int64_t at, std::size_t poll_index, bool& is_new)
{
    auto [it, inserted] = log.observations.try_emplace(p);
    auto& o = it->second;
    is_new = inserted;
    if (inserted) {
        o.peer = p;
        o.first_seen = o.last_seen = at;
        o.first_source = src;
    }
    o.first_seen = std::min(o.first_seen, at);
    o.last_seen = std::max(o.last_seen, at);
    if (src == source::announce) {
        ++o.count;
        return;
    }
    auto lp = last_poll.find(p);
    if (lp == last_poll.end() || lp->second != poll_index) {
        ++o.count;
        last_poll[p] = poll_index;
    }
}

json poll_json(const poll_record& p, std::size_t index)
{
    return json{{"type", "poll"},          {"index", index},         {"at", p.at},
                {"lookups", p.lookups},    {"completed", p.completed}, {"queries", p.queries},
                {"peers_seen", p.peers_seen}, {"new_peers", p.new_peers}};
}

}  // namespace

crawler::crawler(gateway::node& n, const infohash& target, crawl_config cfg)
    : node_(n), cfg_(cfg), rng_(cfg.seed), alive_(std::make_shared<bool>(true))
{
    cfg_.validate();
    log_.target = target;
    log_.interval_ms = cfg_.interval_ms;
    log_.duration_ms = cfg_.duration_ms;
}

crawler::~crawler()
{
    *alive_ = false;
    if (timer_ && node_.running()) node_.net().cancel(*timer_);
    if (started_ && node_.running()) node_.dht().set_announce_observer({});
}

void crawler::emit(const std::string& line)
{
    if (sink_) sink_(line);
}

void crawler::start()
{
    if (started_) return;
    if (!node_.running() || node_.dht().table().size() == 0)
        throw error(errc::not_bootstrapped, "the node has no routing table entries");
    started_ = true;
    auto& net = node_.net();
    log_.started = net.now();
    log_.started_at = net.wall_seconds();
    emit(json{{"type", "start"},
              {"target", log_.target.hex()},
              {"interval_ms", cfg_.interval_ms},
              {"duration_ms", cfg_.duration_ms},
              {"regions", cfg_.regions},
              {"fanout", cfg_.fanout},
              {"started", log_.started},
              {"started_at", log_.started_at}}
             .dump());
    std::weak_ptr<bool> alive = alive_;
    node_.dht().set_announce_observer([this, alive](const infohash& h, const compact_peer& p, std::int64_t now) {
        if (alive.expired() || finished_ || h != log_.target) return;
        sighting(p, source::announce, now, per_poll_.empty() ? 0 : per_poll_.size() - 1);
    });
    poll();
}

void crawler::stop()
{
    if (finished_ || !started_) return;
    finished_ = true;
    auto& net = node_.net();
    if (timer_) net.cancel(*timer_);
    timer_.reset();
    if (!log_.polls.empty()) emit(poll_json(log_.polls.back(), log_.polls.size() - 1).dump());
    log_.ended = net.now();
    emit(json{{"type", "end"}, {"ended", log_.ended}, {"unique_peers", log_.observations.size()}}.dump());
    if (node_.running()) node_.dht().set_announce_observer({});
}

void crawler::sighting(const compact_peer& p, source src, std::int64_t now, std::size_t poll_index)
{
    bool is_new = false;
    upsert(log_, last_poll_seen_, p, src, now, poll_index, is_new);
    if (src == source::get_peers && poll_index < per_poll_.size() && per_poll_[poll_index].insert(p).second) {
        auto& rec = log_.polls[poll_index];
        rec.peers_seen = per_poll_[poll_index].size();
        if (is_new) ++rec.new_peers;
    }
    emit(json{{"type", "sighting"}, {"peer", p.to_string()}, {"at", now}, {"source", to_string(src)}, {"poll", poll_index}}
             .dump());
}

void crawler::poll()
{
    timer_.reset();
    if (finished_) return;
    auto& net = node_.net();
    auto now = net.now();
    if (now - log_.started >= cfg_.duration_ms || !node_.running()) {
        stop();
        return;
    }
    if (!log_.polls.empty()) emit(poll_json(log_.polls.back(), log_.polls.size() - 1).dump());

    auto index = log_.polls.size();
    log_.polls.push_back({now, 0, 0, 0, 0, 0});
    per_poll_.emplace_back();

    auto& table = node_.dht().table();
    std::weak_ptr<bool> alive = alive_;
    for (std::size_t r = 0; r < cfg_.regions; ++r) {
        // A random point in id space; its nearest entries seed the lookup.
        bytes raw(20, '\0');
        for (auto& c : raw) c = static_cast<char>(rng_() & 0xff);
        auto seeds = table.closest(dht::node_id::from_bytes(raw), cfg_.fanout);
        ++log_.polls[index].lookups;
        auto out = node_.dht().get_peers(
            log_.target, now,
            [this, alive, index](const dht::lookup_result& res) {
                if (alive.expired() || finished_) return;
                auto& rec = log_.polls[index];
                ++rec.completed;
                rec.queries += res.queries_sent;
                auto at = node_.net().now();
                for (const auto& p : res.peers)
                    if (p != node_.endpoint()) sighting(p, source::get_peers, at, index);
            },
            seeds);
        node_.send_dht(out);
    }
    timer_ = net.schedule(cfg_.interval_ms, [this, alive] {
        if (!alive.expired()) poll();
    });
    // The final poll closes the crawl exactly at the deadline.
    auto end = log_.started + cfg_.duration_ms;
    if (now + cfg_.interval_ms > end) {
        net.cancel(*timer_);
        timer_ = net.schedule(end - now, [this, alive] {
            if (!alive.expired()) poll();
        });
    }
}

observation_log crawl(transport::network& net, gateway::node& n, const infohash& target, crawl_config cfg,
                      crawler::record_sink sink)
{
    crawler c(n, target, cfg);
    c.set_record_sink(std::move(sink));
    c.start();
    net.run_until([&] { return c.done(); }, net.now() + cfg.duration_ms + cfg.interval_ms, 100);
    c.stop();
    return c.log();
}

statistics report(const observation_log& log)
{
    statistics s;
    s.unique_peers = log.observations.size();
    std::int64_t sum = 0;
    for (const auto& [p, o] : log.observations) {
        s.total_sightings += o.count;
        ++s.sightings_histogram[o.count];
        auto d = o.last_seen - o.first_seen;
        s.presence_ms.emplace_back(p, d);
        sum += d;
        s.max_presence_ms = std::max(s.max_presence_ms, d);
    }
    if (s.unique_peers) s.mean_presence_ms = static_cast<double>(sum) / static_cast<double>(s.unique_peers);
    for (const auto& p : log.polls) s.swarm_size.emplace_back(p.at, p.peers_seen);
    return s;
}

std::string to_json(const observation_log& log, const statistics& s)
{
    json doc;
    doc["schema"] = "mael.monitor/1";
    doc["target"] = log.target.hex();
    doc["interval_ms"] = log.interval_ms;
    doc["duration_ms"] = log.duration_ms;
    doc["started"] = log.started;
    doc["ended"] = log.ended;
    doc["started_at"] = log.started_at;
    doc["peer_identity"] = "ip:port";
    json obs = json::array();
    for (const auto& [p, o] : log.observations)
        obs.push_back(json{{"peer", p.to_string()},
                           {"first_seen", o.first_seen},
                           {"last_seen", o.last_seen},
                           {"count", o.count},
                           {"source", to_string(o.first_source)}});
    doc["observations"] = obs;
    json st;
    st["unique_peers"] = s.unique_peers;
    st["total_sightings"] = s.total_sightings;
    json hist = json::array();
    for (const auto& [count, peers] : s.sightings_histogram) hist.push_back(json{{"sightings", count}, {"peers", peers}});
    st["sightings_histogram"] = hist;
    json pres = json::array();
    for (const auto& [p, d] : s.presence_ms) pres.push_back(json{{"peer", p.to_string()}, {"presence_ms", d}});
    st["presence"] = pres;
    st["mean_presence_ms"] = s.mean_presence_ms;
    st["max_presence_ms"] = s.max_presence_ms;
    json series = json::array();
    for (const auto& [at, n] : s.swarm_size) series.push_back(json{{"at", at}, {"peers", n}});
    st["swarm_size"] = series;
    doc["statistics"] = st;
    return doc.dump(2) + "\n";
}

std::string to_text(const observation_log& log, const statistics& s)
{
    std::ostringstream o;
    o << "target " << log.target.hex() << "\n";
    o << "window " << log.started << " .. " << log.ended << " ms, poll every " << log.interval_ms << " ms, "
      << log.polls.size() << " polls\n";
    o << "unique peers " << s.unique_peers << " (identity is ip:port)\n";
    o << "sightings " << s.total_sightings << "\n";
    for (const auto& [count, peers] : s.sightings_histogram) o << "  seen " << count << "x: " << peers << " peers\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", s.mean_presence_ms);
    o << "presence mean " << buf << " ms, max " << s.max_presence_ms << " ms\n";
    for (const auto& [p, d] : s.presence_ms) o << "  " << p.to_string() << "  " << d << " ms\n";
    o << "swarm size\n";
    for (const auto& [at, n] : s.swarm_size) o << "  " << at << "  " << n << "\n";
    return o.str();
}

observation_log read_jsonl(std::string_view text)
{
    observation_log log;
    std::map<compact_peer, std::size_t> last_poll;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
            auto type = j.at("type").get<std::string>();
            if (type == "start") {
                auto h = infohash::from_hex(j.at("target").get<std::string>());
                if (!h) throw error(errc::malformed_log, "bad target");
                log.target = *h;
                log.interval_ms = j.at("interval_ms").get<std::int64_t>();
                log.duration_ms = j.at("duration_ms").get<std::int64_t>();
                log.started = j.at("started").get<std::int64_t>();
                log.started_at = j.at("started_at").get<std::int64_t>();
            } else if (type == "sighting") {
                auto p = compact_peer::parse(j.at("peer").get<std::string>());
                if (!p) throw error(errc::malformed_log, "bad peer");
                auto src = j.at("source").get<std::string>() == "announce" ? source::announce : source::get_peers;
                bool is_new = false;
                upsert(log, last_poll, *p, src, j.at("at").get<std::int64_t>(), j.at("poll").get<std::size_t>(), is_new);
            } else if (type == "poll") {
                auto index = j.at("index").get<std::size_t>();
                if (log.polls.size() <= index) log.polls.resize(index + 1);
                auto& p = log.polls[index];
                p.at = j.at("at").get<std::int64_t>();
                p.lookups = j.at("lookups").get<std::size_t>();
                p.completed = j.at("completed").get<std::size_t>();
                p.queries = j.at("queries").get<std::size_t>();
                p.peers_seen = j.at("peers_seen").get<std::size_t>();
                p.new_peers = j.at("new_peers").get<std::size_t>();
            } else if (type == "end") {
                log.ended = j.at("ended").get<std::int64_t>();
            }
        } catch (const json::exception& e) {
            throw error(errc::malformed_log, "line " + std::to_string(n) + ": " + e.what());
        }
    }
    return log;
}

}  // namespace mael::monitor
