#include "mael/cli.hpp"

#include "mael/forensics.hpp"
#include "mael/gateway.hpp"
#include "mael/monitor.hpp"
#include "mael/scenario.hpp"

#include <CLI11.hpp>
#include <toml.hpp>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <unistd.h>

namespace mael::cli {

namespace fs = std::filesystem;
using dht::compact_peer;

namespace {

constexpr const char* profile_env = "MAEL_PROFILE";

struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class level { error, info, debug };

// Values from --config; command-line flags win over these.
struct file_config {
    std::optional<std::string> profile;
    std::optional<std::uint16_t> udp_port;
    std::optional<std::uint16_t> http_port;
    std::vector<std::string> bootstrap;
    std::optional<std::string> log_level;
    toml::table settings;
};

file_config read_config(const std::string& path)
{
    file_config c;
    toml::table t;
    try {
        t = toml::parse_file(path);
    } catch (const toml::parse_error& e) {
        throw failure("config " + path + ": " + std::string(e.description()));
    }
    if (auto v = t["profile"].value<std::string>()) c.profile = *v;
    if (auto v = t["udp_port"].value<std::int64_t>()) c.udp_port = static_cast<std::uint16_t>(*v);
    if (auto v = t["http_port"].value<std::int64_t>()) c.http_port = static_cast<std::uint16_t>(*v);
    if (auto v = t["log_level"].value<std::string>()) c.log_level = *v;
    if (auto arr = t["bootstrap"].as_array())
        for (const auto& e : *arr)
            if (auto s = e.value<std::string>()) c.bootstrap.push_back(*s);
    if (auto s = t["settings"].as_table()) c.settings = *s;
    return c;
}

// "90", "90s", "250ms", "10m", "1h" -> milliseconds. Bare numbers are seconds.
std::int64_t parse_duration(const std::string& text)
{
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw usage_error("bad duration '" + text + "'");
    }
    auto unit = text.substr(used);
    double scale = 0;
    if (unit.empty() || unit == "s") scale = 1000;
    else if (unit == "ms") scale = 1;
    else if (unit == "m" || unit == "min") scale = 60000;
    else if (unit == "h") scale = 3600000;
    if (scale == 0 || v <= 0) throw usage_error("bad duration '" + text + "'");
    return static_cast<std::int64_t>(v * scale);
}

std::vector<compact_peer> parse_peers(const std::vector<std::string>& list)
{
    std::vector<compact_peer> out;
    for (const auto& s : list) {
        auto p = compact_peer::parse(s);
        if (!p) throw usage_error("bad endpoint '" + s + "', expected a.b.c.d:port");
        out.push_back(*p);
    }
    return out;
}

infohash parse_target(const std::string& text)
{
    if (auto h = infohash::from_hex(text)) return *h;
    try {
        return torrent::parse_magnet(text).hash;
    } catch (const std::exception&) {
        throw usage_error("expected a 40-hex infohash or a magnet URI, got '" + text + "'");
    }
}

store::settings apply_settings(store::settings s, const toml::table& t)
{
    for (const auto& [k, v] : t) {
        auto key = std::string(k.str());
        if (key == "cache_size_bytes") {
            if (auto n = v.value<std::int64_t>()) s.set_cache_size(*n, std::time(nullptr));
        } else if (key == "share_ratio_limit") {
            auto r = v.value<double>();
            if (!r) throw failure("settings.share_ratio_limit must be a number");
            s.share_ratio_limit = *r < 0 ? std::nullopt : std::optional<double>(*r);
        } else if (key == "upload_rate" || key == "download_rate" || key == "transfer_cap") {
            auto n = v.value<std::int64_t>();
            if (!n) throw failure("settings." + key + " must be an integer");
            std::optional<std::int64_t> val = *n < 0 ? std::nullopt : std::optional<std::int64_t>(*n);
            if (key == "upload_rate") s.upload_rate = val;
            else if (key == "download_rate") s.download_rate = val;
            else s.transfer_cap = val;
        } else if (key == "background_seed") {
            if (auto b = v.value<bool>()) s.background_seed = *b;
        } else if (key == "send_stats") {
            if (auto b = v.value<bool>()) s.send_stats = *b;
        } else {
            throw failure("unknown settings key '" + key + "'");
        }
    }
    try {
        s.validate();
    } catch (const store::error& e) {
        throw failure(e.what());
    }
    return s;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw failure("cannot write " + p.string());
    f << text;
    if (!f) throw failure("cannot write " + p.string());
}

void write_tree(const bundle::file_tree& tree, const fs::path& out)
{
    for (const auto& [path, data] : tree) {
        if (!bundle::valid_path(path)) throw failure("refusing unsafe path " + path);
        auto dest = out / fs::path(path);
        fs::create_directories(dest.parent_path());
        store::write_file(dest, data);
    }
}

std::atomic<bool> interrupted{false};

extern "C" void on_signal(int) { interrupted = true; }

class app_runner {
public:
    app_runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}
    int run(int argc, const char* const* argv);

private:
    void log(level l, const std::string& msg)
    {
        if (l <= level_) err_ << msg << "\n";
    }
    fs::path profile_path(bool required);
    std::vector<compact_peer> bootstrap();
    std::optional<store::settings> settings_for(const std::optional<fs::path>& profile);

    int publish();
    int serve();
    int fetch();
    int inspect();
    int remnants();
    int reconstruct();
    int monitor();
    int sim();

    std::ostream& out_;
    std::ostream& err_;
    level level_ = level::info;
    file_config cfg_;

    // options
    std::string config_path, log_level;
    std::string profile;
    std::vector<std::string> boot;
    std::optional<std::uint16_t> udp_port, http_port;
    std::string site_dir, name, out_dir, root, json_out, hash_text, target, duration = "10m", interval = "30s",
                                                                        log_file, scenario_file, profiles_dir, timeout = "60s";
    std::optional<std::int64_t> split_threshold;
    std::int64_t piece_length = torrent::default_piece_length;
    std::vector<std::string> publish_dirs;
    bool no_http = false, trace = false;
    std::optional<std::uint64_t> seed;
};

fs::path app_runner::profile_path(bool required)
{
    if (!profile.empty()) return profile;
    if (const char* env = std::getenv(profile_env); env && *env) return env;
    if (cfg_.profile) return *cfg_.profile;
    if (required) throw usage_error("no profile: pass --profile, set " + std::string(profile_env) + " or use --config");
    return {};
}

std::vector<compact_peer> app_runner::bootstrap()
{
    return parse_peers(boot.empty() ? cfg_.bootstrap : boot);
}

std::optional<store::settings> app_runner::settings_for(const std::optional<fs::path>& prof)
{
    if (cfg_.settings.empty()) return std::nullopt;
    store::settings base;
    if (prof)
        if (auto raw = store::read_file(*prof / "settings.dat")) try {
                base = store::load_settings(bytes_view(*raw));
            } catch (const store::error& e) {
                throw failure(e.what());
            }
    return apply_settings(base, cfg_.settings);
}

int app_runner::publish()
{
    bundle::website site;
    try {
        site = gateway::read_site_directory(site_dir);
    } catch (const store::error& e) {
        throw failure(e.what());
    }
    if (site.tree.empty()) throw failure(site_dir + " holds no files");
    bundle::publish_options po;
    po.name = name.empty() ? fs::path(site_dir).lexically_normal().filename().string() : name;
    if (po.name.empty() || po.name == "." || po.name == "..") po.name = "site";
    po.piece_length = piece_length;
    store::profile p(out_dir.empty() ? profile_path(true) : fs::path(out_dir));
    p.lock();
    auto pub = gateway::publish_to_profile(p, site, bundle::publish_mode{split_threshold}, po, std::time(nullptr));
    p.unlock();
    torrent::magnet m;
    m.hash = pub.man.base().hash;
    m.display_name = po.name;
    out_ << m.to_uri() << "\n" << m.hash.hex() << "\n";
    log(level::info, "published " + std::to_string(site.tree.size()) + " files in " + std::to_string(pub.torrents.size()) +
                         " torrent(s) to " + p.root().string());
    return 0;
}

int app_runner::serve()
{
    gateway::daemon_options o;
    o.profile = profile_path(true);
    o.udp_port = udp_port ? *udp_port : cfg_.udp_port.value_or(0);
    o.http_port = http_port ? *http_port : cfg_.http_port.value_or(8945);
    o.http = !no_http;
    o.bootstrap = bootstrap();
    o.publish_dirs = publish_dirs;
    o.settings = settings_for(o.profile);
    interrupted = false;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    auto code = gateway::run_daemon(o, interrupted);
    std::signal(SIGINT, SIG_DFL);
    std::signal(SIGTERM, SIG_DFL);
    return code;
}

int app_runner::fetch()
{
    auto boot_peers = bootstrap();
    if (boot_peers.empty()) throw usage_error("fetch needs at least one --bootstrap endpoint");
    auto prof = profile_path(false);
    transport::udp_network net;
    gateway::node_config c;
    c.name = prof.empty() ? "fetch:" + std::to_string(::getpid()) : "cli:" + fs::absolute(prof).string();
    if (!prof.empty()) c.profile_root = prof;
    c.endpoint = compact_peer::from_u32(0x7f000001, udp_port ? *udp_port : cfg_.udp_port.value_or(0));
    c.bootstrap = boot_peers;
    c.load_timeout_ms = parse_duration(timeout);
    c.settings = settings_for(prof.empty() ? std::nullopt : std::optional<fs::path>(prof));
    gateway::node n(net, c);
    n.start();
    auto id = n.load_site(target);
    interrupted = false;
    std::signal(SIGINT, on_signal);
    net.run_until([&] { return interrupted || n.job(id)->terminal(); }, net.now() + c.load_timeout_ms + 5000);
    std::signal(SIGINT, SIG_DFL);
    const auto* j = n.job(id);
    for (const auto& e : j->log) log(level::debug, e.step + (e.detail.empty() ? "" : " " + e.detail));
    if (j->ph != gateway::phase::ready) {
        n.stop(true);
        throw failure("load " + gateway::to_string(j->ph) +
                      (j->ph == gateway::phase::failed ? ": " + gateway::to_string(j->cause) : std::string()) +
                      (j->detail.empty() ? "" : " (" + j->detail + ")"));
    }
    auto tree = n.site(j->hash);
    n.stop(true);
    if (!tree) throw failure("site assembled but no longer cached");
    if (!out_dir.empty()) write_tree(*tree, out_dir);
    out_ << j->hash.hex() << " " << tree->size() << " files\n";
    return 0;
}

int app_runner::inspect()
{
    auto r = forensics::inspect(root);
    if (!json_out.empty()) write_text(json_out, forensics::to_json(r));
    out_ << forensics::to_text(r);
    return 0;
}

int app_runner::remnants()
{
    auto r = forensics::detect_remnants(root);
    if (!json_out.empty()) write_text(json_out, forensics::to_json(r));
    out_ << forensics::to_text(r);
    return 0;
}

int app_runner::reconstruct()
{
    auto h = infohash::from_hex(hash_text);
    if (!h) throw usage_error("--infohash needs 40 hex characters");
    auto r = forensics::reconstruct(root, *h);
    forensics::write_reconstruction(r, out_dir);
    if (!json_out.empty()) write_text(json_out, forensics::reconstruction_json(r));
    std::size_t gaps = 0;
    for (const auto& f : r.files) gaps += f.gaps.size();
    out_ << r.hash.hex() << " " << (r.from_torrent ? std::to_string(r.files.size()) + " files" : std::to_string(r.raw.size()) + " raw pieces")
         << (r.complete() ? " complete" : " incomplete, " + std::to_string(gaps) + " gaps") << "\n";
    return 0;
}

int app_runner::monitor()
{
    auto h = parse_target(target);
    monitor::crawl_config cc;
    cc.duration_ms = parse_duration(duration);
    cc.interval_ms = parse_duration(interval);
    cc.seed = static_cast<std::uint64_t>(std::time(nullptr));
    try {
        cc.validate();
    } catch (const monitor::error& e) {
        throw usage_error(e.what());
    }
    auto boot_peers = bootstrap();
    if (boot_peers.empty()) throw usage_error("monitor needs at least one --bootstrap endpoint");
    auto prof = profile_path(false);

    std::ofstream jsonl;
    if (!log_file.empty()) {
        jsonl.open(log_file, std::ios::app);
        if (!jsonl) throw failure("cannot open " + log_file);
    }
    transport::udp_network net;
    gateway::node_config c;
    c.name = prof.empty() ? "monitor:" + std::to_string(::getpid()) : "cli:" + fs::absolute(prof).string();
    if (!prof.empty()) c.profile_root = prof;
    c.endpoint = compact_peer::from_u32(0x7f000001, udp_port ? *udp_port : cfg_.udp_port.value_or(0));
    c.bootstrap = boot_peers;
    gateway::node n(net, c);
    n.start();
    net.run_until([&] { return n.bootstrapped(); }, net.now() + 10000);
    monitor::crawler cr(n, h, cc);
    cr.set_record_sink([&](const std::string& line) {
        if (jsonl) jsonl << line << "\n" << std::flush;
    });
    cr.start();
    interrupted = false;
    std::signal(SIGINT, on_signal);
    net.run_until([&] { return interrupted || cr.done(); }, net.now() + cc.duration_ms + cc.interval_ms, 100);
    std::signal(SIGINT, SIG_DFL);
    cr.stop();
    auto st = monitor::report(cr.log());
    if (!json_out.empty()) write_text(json_out, monitor::to_json(cr.log(), st));
    out_ << monitor::to_text(cr.log(), st);
    n.stop(true);
    return 0;
}

int app_runner::sim()
{
    auto s = scenario::load(scenario_file);
    scenario::options o;
    o.seed = seed;
    o.trace = trace;
    if (!profiles_dir.empty()) o.profiles = profiles_dir;
    auto r = scenario::run(s, o);
    if (!json_out.empty()) write_text(json_out, r.report_json);
    out_ << r.transcript;
    return 0;
}

int app_runner::run(int argc, const char* const* argv)
{
    CLI::App app{"Serverless web node: publish, serve, fetch, inspect, monitor and simulate", "mael"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");
    app.add_option("--config", config_path, "TOML file overriding defaults")->check(CLI::ExistingFile);
    app.add_option("--log-level", log_level, "error, info or debug")->check(CLI::IsMember({"error", "info", "debug"}));

    auto add_profile = [&](CLI::App* sc) {
        sc->add_option("--profile", profile, std::string("Profile directory (default $") + profile_env + ")");
    };
    auto add_net = [&](CLI::App* sc) {
        sc->add_option("--udp-port", udp_port, "UDP port (0 picks one)");
        sc->add_option("--bootstrap", boot, "Bootstrap endpoint a.b.c.d:port (repeatable)");
    };

    auto* pub = app.add_subcommand("publish", "Package a directory as a site and write it into a profile");
    pub->add_option("site", site_dir, "Site directory")->required()->check(CLI::ExistingDirectory);
    pub->add_option("--out", out_dir, "Profile directory to write");
    add_profile(pub);
    pub->add_option("--name", name, "Site name (default: directory name)");
    pub->add_option("--split-threshold", split_threshold, "Files larger than this many bytes get their own torrent");
    pub->add_option("--piece-length", piece_length, "Piece length in bytes")->check(CLI::Range(std::int64_t{16384}, std::int64_t{1} << 24));

    auto* srv = app.add_subcommand("serve", "Run a node with the HTTP gateway until interrupted");
    add_profile(srv);
    add_net(srv);
    srv->add_option("--http-port", http_port, "Gateway port on 127.0.0.1");
    srv->add_flag("--no-http", no_http, "Run without the gateway");
    srv->add_option("--publish", publish_dirs, "Publish this directory on start (repeatable)");

    auto* fet = app.add_subcommand("fetch", "Load a site by magnet or bittorrent:// URL");
    fet->add_option("url", target, "magnet: or bittorrent:// URL")->required();
    add_profile(fet);
    add_net(fet);
    fet->add_option("--out", out_dir, "Write the assembled site here");
    fet->add_option("--timeout", timeout, "Give up after this long (e.g. 60s)");

    auto* ins = app.add_subcommand("inspect", "Report the artifacts in a profile directory (read-only)");
    ins->add_option("root", root, "Profile directory")->required();
    ins->add_option("--json", json_out, "Also write the JSON report here");

    auto* rem = app.add_subcommand("remnants", "Look for install and uninstall remnants under a machine root");
    rem->add_option("root", root, "Machine root holding Users/")->required();
    rem->add_option("--json", json_out, "Also write the JSON report here");

    auto* rec = app.add_subcommand("reconstruct", "Rebuild a torrent's files from a profile cache");
    rec->add_option("root", root, "Profile directory")->required();
    rec->add_option("--infohash", hash_text, "40 hex characters")->required();
    rec->add_option("--out", out_dir, "Output directory")->required();
    rec->add_option("--json", json_out, "Also write the JSON summary here");

    auto* mon = app.add_subcommand("monitor", "Crawl the DHT for peers serving an infohash");
    mon->add_option("target", target, "Infohash or magnet URI")->required();
    mon->add_option("--duration", duration, "Crawl length (default 10m)");
    mon->add_option("--interval", interval, "Poll interval (default 30s)");
    mon->add_option("--json", json_out, "Also write the JSON report here");
    mon->add_option("--log", log_file, "Append one JSON record per line here");
    add_profile(mon);
    add_net(mon);

    auto* sim = app.add_subcommand("sim", "Run a scenario file in the network simulator");
    sim->add_option("--scenario", scenario_file, "Scenario TOML")->required()->check(CLI::ExistingFile);
    sim->add_option("--seed", seed, "Override the scenario's network seed");
    sim->add_option("--json", json_out, "Also write the JSON report here");
    sim->add_option("--profiles", profiles_dir, "Give every node a profile under this directory");
    sim->add_flag("--trace", trace, "One transcript line per datagram");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out_ << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().back()->help());
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out_ << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err_ << "error: " << e.what() << "\n";
        err_ << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().back()->help());
        return 2;
    }

    CLI::App* chosen = app.get_subcommands().front();
    try {
        if (!config_path.empty()) cfg_ = read_config(config_path);
        auto lv = !log_level.empty() ? log_level : cfg_.log_level.value_or("info");
        level_ = lv == "error" ? level::error : lv == "debug" ? level::debug : level::info;

        if (chosen == pub) return publish();
        if (chosen == srv) return serve();
        if (chosen == fet) return fetch();
        if (chosen == ins) return inspect();
        if (chosen == rem) return remnants();
        if (chosen == rec) return reconstruct();
        if (chosen == mon) return monitor();
        if (chosen == sim) return this->sim();
    } catch (const usage_error& e) {
        err_ << "error: " << e.what() << "\n" << chosen->help();
        return 2;
    } catch (const std::exception& e) {
        err_ << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    app_runner r(out, err);
    return r.run(argc, argv);
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace mael::cli
