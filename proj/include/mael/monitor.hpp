#pragma once

#include "mael/common.hpp"
#include "mael/gateway.hpp"
#include "mael/transport.hpp"

#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

// DHT crawler that records who serves an infohash over time.
namespace mael::monitor {

using dht::compact_peer;

enum class errc { not_bootstrapped, bad_config, malformed_log };
using error = coded_error<errc>;

enum class source { get_peers, announce };
std::string to_string(source s);

struct observation {
    compact_peer peer;
    std::int64_t first_seen = 0;  // ms
    std::int64_t last_seen = 0;
    std::uint64_t count = 0;  // polls (or witnessed announces) that saw the peer
    source first_source = source::get_peers;
};

struct poll_record {
    std::int64_t at = 0;
    std::size_t lookups = 0;
    std::size_t completed = 0;  // lookups that finished before the next poll
    std::size_t queries = 0;
    std::size_t peers_seen = 0;  // distinct peers sighted in this poll
    std::size_t new_peers = 0;
};

struct observation_log {
    infohash target;
    std::int64_t interval_ms = 0;
    std::int64_t duration_ms = 0;
    std::int64_t started = 0;
    std::int64_t ended = -1;
    std::int64_t started_at = 0;  // wall seconds
    std::map<compact_peer, observation> observations;
    std::vector<poll_record> polls;
};

struct crawl_config {
    std::int64_t duration_ms = 10 * 60 * 1000;
    std::int64_t interval_ms = 30 * 1000;
    std::size_t regions = 4;  // lookups per poll, each seeded from a random table region
    std::size_t fanout = 3;   // seeds per lookup
    std::uint64_t seed = 1;
    void validate() const;  // throws error(bad_config)
};

// Runs on a started node. Every interval it issues `regions` get_peers
// lookups toward the target and upserts every returned peer; announces the
// node witnesses are recorded too. Only DHT messages are sent.
class crawler {
public:
    using record_sink = std::function<void(const std::string& jsonl_line)>;

    crawler(gateway::node& n, const infohash& target, crawl_config cfg);
    ~crawler();
    crawler(const crawler&) = delete;
    crawler& operator=(const crawler&) = delete;

    // Throws error(not_bootstrapped) when the routing table is empty.
    void start();
    void stop();
    bool done() const { return finished_; }
    const observation_log& log() const { return log_; }
    // Receives one JSON line per appended record.
    void set_record_sink(record_sink s) { sink_ = std::move(s); }

private:
    void poll();
    void sighting(const compact_peer& p, source src, std::int64_t now, std::size_t poll_index);
    void emit(const std::string& line);

    gateway::node& node_;
    crawl_config cfg_;
    observation_log log_;
    std::mt19937_64 rng_;
    std::optional<transport::timer_id> timer_;
    std::map<compact_peer, std::size_t> last_poll_seen_;  // last poll that counted the peer
    std::vector<std::set<compact_peer>> per_poll_;
    std::shared_ptr<bool> alive_;
    bool finished_ = false;
    bool started_ = false;
    record_sink sink_;
};

// Drives `net` until the crawl finishes.
observation_log crawl(transport::network& net, gateway::node& n, const infohash& target, crawl_config cfg,
                      crawler::record_sink sink = {});

struct statistics {
    std::size_t unique_peers = 0;
    std::uint64_t total_sightings = 0;
    std::map<std::uint64_t, std::size_t> sightings_histogram;  // count -> peers
    std::vector<std::pair<compact_peer, std::int64_t>> presence_ms;  // last - first, by peer
    double mean_presence_ms = 0;
    std::int64_t max_presence_ms = 0;
    std::vector<std::pair<std::int64_t, std::size_t>> swarm_size;  // poll time -> peers seen
};

statistics report(const observation_log& log);
std::string to_json(const observation_log& log, const statistics& s);  // schema "mael.monitor/1"
std::string to_text(const observation_log& log, const statistics& s);

// Rebuilds a log from the JSONL records a crawler emitted.
observation_log read_jsonl(std::string_view text);

}  // namespace mael::monitor
