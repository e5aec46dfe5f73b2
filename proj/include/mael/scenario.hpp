#pragma once

#include "mael/bundle.hpp"
#include "mael/gateway.hpp"
#include "mael/monitor.hpp"
#include "mael/transport.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

// Declarative simulator runs: a network, some sites and a timed action list.
namespace mael::scenario {

namespace fs = std::filesystem;

enum class errc { bad_scenario };
using error = coded_error<errc>;

struct site_spec {
    std::string name;
    std::uint64_t seed = 1;
    std::size_t files = 12;
    std::int64_t bytes = 1 << 20;
    std::optional<std::int64_t> split_threshold;
    std::int64_t piece_length = torrent::default_piece_length;
};

enum class action_kind { publish, load, stop, start, stop_gateway, monitor, settings };
std::string to_string(action_kind k);

struct action {
    std::int64_t at_ms = 0;
    action_kind kind = action_kind::load;
    std::vector<std::size_t> nodes;
    std::string site;
    std::int64_t duration_ms = 10 * 60 * 1000;  // monitor
    std::int64_t interval_ms = 30 * 1000;       // monitor
    std::optional<double> share_ratio_limit;     // settings; negative means unlimited
    std::optional<bool> background_seed;         // settings
};

struct scenario {
    std::string name = "scenario";
    transport::sim_config network;
    std::size_t nodes = 2;
    std::int64_t tick_ms = 250;
    std::int64_t load_timeout_ms = 30000;
    std::int64_t start_spacing_ms = 0;  // node i starts at i * spacing
    std::vector<std::size_t> bootstrap = {0};
    std::vector<site_spec> sites;
    std::vector<action> actions;
    std::int64_t until_ms = 60000;
};

scenario parse(std::string_view toml_text);  // throws error(bad_scenario)
scenario load(const fs::path& file);

struct options {
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> profiles;  // per-node profile directories under here
    bool trace = false;                // one transcript line per datagram
};

struct monitor_run {
    std::size_t node = 0;
    std::string site;
    monitor::observation_log log;
    std::vector<std::string> jsonl;
    std::set<dht::compact_peer> ground_truth;  // serving at some point during the crawl
    std::uint64_t swarm_messages_sent = 0;     // by the monitor's endpoint
    std::uint64_t swarm_requests_sent = 0;
    std::uint64_t dht_messages_sent = 0;
};

struct result {
    std::string transcript;
    std::string report_json;  // schema "mael.scenario/1"
    std::string trace_digest;  // SHA-1 over every datagram event, hex
    std::uint64_t datagrams = 0;
    std::uint64_t dropped = 0;
    std::vector<monitor_run> monitors;
    std::vector<std::optional<gateway::load_job>> final_jobs;  // last job per node
};

result run(const scenario& s, const options& opts = {});

}  // namespace mael::scenario
