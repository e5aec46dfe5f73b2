// Acceptance criteria. `acceptance` runs all of them, `acceptance N` one.
// Each prints a single PASS/FAIL line; the exit code is the failure count.
#include "mael/bencode.hpp"
#include "mael/forensics.hpp"
#include "mael/scenario.hpp"
#include "mael/torrent.hpp"

#include "dht_sim.hpp"
#include "node_sim.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

using namespace mael;
namespace fs = std::filesystem;

namespace {

struct verdict {
    std::vector<std::string> failures;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what)
    {
        if (!ok) failures.push_back(what);
    }
    void note(const std::string& s) { notes.push_back(s); }
};

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0)
{
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(double v, int digits = 2)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string magnet_for(const infohash& h, const std::string& name) { return torrent::magnet{h, name, {}}.to_uri(); }

// --- 1 -------------------------------------------------------------------

void bencode_roundtrip(verdict& v)
{
    auto t0 = clock_type::now();
    std::mt19937_64 rng(2015);
    std::size_t bad_roundtrip = 0, bad_reencode = 0;
    std::vector<bytes> corpus;
    for (int i = 0; i < 10000; ++i) {
        auto val = testing::random_value(rng);
        auto raw = bencode::encode(val);
        if (!(bencode::decode(raw) == val)) ++bad_roundtrip;
        if (bencode::encode(bencode::decode(raw)) != raw) ++bad_reencode;
        corpus.push_back(std::move(raw));
    }
    std::size_t accepted = 0, rejected = 0, crashed = 0, reencode_fail = 0;
    for (int i = 0; i < 10000; ++i) {
        bytes input;
        if (i % 2 == 0) {
            input = corpus[rng() % corpus.size()];
            auto flips = 1 + rng() % 4;
            for (std::size_t k = 0; k < flips && !input.empty(); ++k) {
                auto at = rng() % input.size();
                switch (rng() % 3) {
                case 0: input[at] = static_cast<char>(rng()); break;
                case 1: input.erase(at, 1); break;
                default: input.insert(at, 1, "ile:0123456789-"[rng() % 15]); break;
                }
            }
        } else {
            input.resize(rng() % 64);
            for (auto& c : input) c = "ilde:0123456789-x"[rng() % 17];
        }
        try {
            auto val = bencode::decode(input);
            ++accepted;
            if (bencode::encode(val) != input) ++reencode_fail;
        } catch (const bencode::error&) {
            ++rejected;
        } catch (...) {
            ++crashed;
        }
    }
    auto secs = seconds_since(t0);
    v.check(bad_roundtrip == 0, std::to_string(bad_roundtrip) + " decode(encode(v)) != v");
    v.check(bad_reencode == 0, std::to_string(bad_reencode) + " encode(decode(x)) != x on generated input");
    v.check(reencode_fail == 0, std::to_string(reencode_fail) + " accepted fuzz inputs did not re-encode");
    v.check(crashed == 0, std::to_string(crashed) + " fuzz inputs threw a foreign exception");
    v.check(secs < 10, "runtime " + fmt(secs) + " s");
    v.note("10000 values, 10000 fuzz inputs (" + std::to_string(accepted) + " accepted, " + std::to_string(rejected) +
           " rejected), " + fmt(secs) + " s");
}

// --- 2 -------------------------------------------------------------------

std::map<std::string, std::string> run_oracle(const std::vector<fs::path>& files)
{
    std::string cmd = "python3 '" + (testing::source_root() / "tests" / "oracles" / "infohash_oracle.py").string() + "'";
    for (const auto& f : files) cmd += " '" + f.string() + "'";
    std::map<std::string, std::string> out;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return out;
    char line[512];
    while (std::fgets(line, sizeof line, p)) {
        std::istringstream in(line);
        std::string name, hex;
        if (in >> name >> hex) out[name] = hex;
    }
    pclose(p);
    return out;
}

void infohash_oracle(verdict& v)
{
    std::vector<fs::path> files;
    for (const auto* dir : {"torrents", "startpage"})
        for (const auto& e : fs::directory_iterator(testing::fixtures() / dir))
            if (e.path().extension() == ".torrent") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    auto oracle = run_oracle(files);
    v.check(oracle.size() == files.size(), "oracle answered for " + std::to_string(oracle.size()) + " of " +
                                               std::to_string(files.size()) + " fixtures");
    std::size_t agree = 0;
    for (const auto& f : files) {
        auto meta = torrent::parse_torrent(*store::read_file(f));
        auto name = f.filename().string();
        if (oracle.count(name) && oracle[name] == meta.hash.hex()) ++agree;
        else v.check(false, name + ": parser " + meta.hash.hex() + " oracle " + oracle[name]);
    }
    v.note("oracle agrees on " + std::to_string(agree) + "/" + std::to_string(files.size()) + " fixtures");

    const std::string want = "8E65684D700ECC41A09A60EE58991845EA56F734";
    auto startpage = testing::fixtures() / "startpage" / (want + ".torrent");
    auto meta = torrent::parse_torrent(*store::read_file(startpage));
    v.check(meta.hash.hex() == want, "startpage fixture hashes to " + meta.hash.hex() + ", its filename says " + want +
                                         " (no info dictionary with that SHA-1 is known)");
}

// --- 3 -------------------------------------------------------------------

void wire_constants(verdict& v)
{
    auto p = dht::compact_peer::from_u32(0xC0A80101, 6881);
    v.check(p.encode().size() == 6, "compact peer is " + std::to_string(p.encode().size()) + " bytes");
    v.check(p.encode() == bytes("\xC0\xA8\x01\x01\x1A\xE1", 6), "compact peer bytes");

    // A find_nodes response from a node with a few table entries.
    auto self = dht::node_id::from_bytes(bytes(20, '\x10'));
    dht::dht_node node(self, p, "s");
    for (int i = 1; i <= 5; ++i) {
        dht::message ping;
        ping.kind = dht::msg_kind::ping;
        ping.transaction_id = "t" + std::to_string(i);
        ping.sender = dht::node_id::from_bytes(bytes(20, static_cast<char>(0x20 + i)));
        node.handle_message(dht::compact_peer::from_u32(0x0a000000u + i, 6881), ping, 0);
    }
    dht::message q;
    q.kind = dht::msg_kind::find_nodes;
    q.transaction_id = "fn";
    q.sender = dht::node_id::from_bytes(bytes(20, '\x7f'));
    q.target = dht::node_id::from_bytes(bytes(20, '\x22'));
    auto out = node.handle_message(dht::compact_peer::from_u32(0x0a0000ff, 6881), q, 0);
    bool checked = false;
    for (const auto& o : out) {
        if (o.msg.kind != dht::msg_kind::response) continue;
        auto raw = dht::encode_message(o.msg);
        auto r = bencode::decode(raw).find("r");
        auto nodes = r ? r->find("nodes") : nullptr;
        v.check(nodes && !nodes->as_string().empty() && nodes->as_string().size() % 26 == 0,
                "nodes field is not a non-empty multiple of 26 bytes");
        if (nodes) {
            auto entries = dht::decode_nodes(nodes->as_string());
            v.check(entries.size() * 26 == nodes->as_string().size(), "node entry stride");
            for (const auto& e : entries) v.check(e.encode().size() == 26, "node entry is not 26 bytes");
            v.note(std::to_string(entries.size()) + " node entries in " + std::to_string(nodes->as_string().size()) +
                   " bytes");
        }
        checked = true;
    }
    v.check(checked, "no find_nodes response");

    auto dat = dht::save_dht_dat(node);
    v.check(dat.find("id20:") != bytes::npos, "dht.dat lacks the id20: span");
    v.check(dat.substr(3, 5) == "id20:", "id20: is not at the start of the id entry");
    auto loaded = dht::load_dht_dat(dat);
    v.check(loaded.id == self, "dht.dat id");
    v.note("dht.dat " + std::to_string(dat.size()) + " bytes, id20: at offset " + std::to_string(dat.find("id20:")));
}

// --- 4 -------------------------------------------------------------------

void settings_defaults(verdict& v)
{
    testing::temp_dir tmp("acc4");
    store::profile p(tmp.path());
    auto s = p.load_settings();
    v.check(s.cache_size_bytes == 5 * store::GiB, "cache size " + std::to_string(s.cache_size_bytes));
    v.check(s.share_ratio_limit && *s.share_ratio_limit == 1.0, "share ratio limit");
    v.check(!s.upload_rate && !s.download_rate, "rate limits");
    v.check(!s.transfer_cap, "transfer cap");
    v.check(s.background_seed, "background_seed");
    v.check(s.warnings.empty(), "fresh settings carry warnings");
    s.set_cache_size(101 * store::GiB, 1428624000);
    v.check(s.warnings.size() == 1 && s.warnings[0].code == "cache_size_over_limit" &&
                s.warnings[0].value == 101 * store::GiB,
            "no warning record above 100 GiB");
    v.check(s.cache_size_bytes == 101 * store::GiB, "large cache size not kept");
    p.save_settings(s);
    v.check(p.load_settings().warnings == s.warnings, "warning not persisted");
    v.note("5 GiB, ratio 1.0, unlimited rates, no cap, background seeding; 101 GiB warns");
}

// --- 5 -------------------------------------------------------------------

void dht_oracle(verdict& v)
{
    auto t0 = clock_type::now();
    transport::sim_config c;
    c.latency_min_ms = 5;
    c.latency_max_ms = 50;
    testing::dht_sim sim(50, 5, c);
    sim.start(0);
    for (std::size_t i = 1; i < 50; ++i)
        sim.net().schedule(static_cast<std::int64_t>(i) * 100, [&sim, i] { sim.start(i, {0}); });
    sim.net().run_until(20000);
    // Lookups from every node to random targets.
    std::mt19937_64 rng(55);
    std::size_t done = 0;
    for (std::size_t i = 0; i < 50; ++i) {
        bytes raw(20, '\0');
        for (auto& ch : raw) ch = static_cast<char>(rng());
        sim.send(i, sim.node(i).find_node(dht::node_id::from_bytes(raw), sim.net().now(),
                                          [&](const dht::lookup_result&) { ++done; }));
    }
    sim.net().run_until(60000);
    const auto& r = sim.results();
    auto secs = seconds_since(t0);
    v.check(r.find_nodes_checked > 0, "no find_nodes responses observed");
    v.check(r.find_nodes_mismatches == 0, std::to_string(r.find_nodes_mismatches) + " responses differ from brute force");
    v.check(r.failures.empty(), r.failures.empty() ? "" : "bucket invariant: " + r.failures.front());
    v.check(done == 50, std::to_string(done) + "/50 lookups finished");
    v.check(secs < 30, "runtime " + fmt(secs) + " s");
    v.note(std::to_string(r.find_nodes_checked) + " find_nodes responses equal brute force, " +
           std::to_string(r.invariant_checks) + " invariant checks, " + fmt(secs) + " s");
}

// --- 6, 9, 10 --------------------------------------------------------------

struct visitor_run {
    bundle::website site;
    infohash root;
    std::vector<infohash> members;
    std::map<std::string, bundle::file_tree> trees;  // A, B, C
    std::vector<std::string> steps_b;
    std::string digest;
    bytes dht_dat_b;
    std::vector<infohash> held_b;
    bool ok = false;
    std::string why;
};

// Node 0 is a plain DHT router. A publishes, B fetches from A, A stops, C
// fetches from B alone.
visitor_run visitor_becomes_host(std::uint64_t seed, const std::optional<fs::path>& profiles)
{
    visitor_run out;
    testing::node_sim sim(0, seed);
    auto prof = [&](const std::string& n) {
        return profiles ? std::optional<fs::path>(*profiles / n) : std::nullopt;
    };
    sim.add();
    sim.add(prof("A"));
    sim.add(prof("B"));
    sim.add(prof("C"));
    std::string trace;
    sim.net().set_send_observer([&](const transport::delivery_record& r, bytes_view payload) {
        trace += std::to_string(r.seq) + " " + std::to_string(r.sent_at) + " " + std::to_string(r.deliver_at) + " " +
                 r.from.to_string() + " " + r.to.to_string() + " " + (r.dropped ? "d " : "- ") +
                 to_hex(sha1_bytes(payload)) + "\n";
    });
    sim[0].start();
    sim[1].start();
    sim[2].start();
    sim.run_for(3000);

    out.site = bundle::generate_demo_site(42, 12, 1 << 20);
    auto pub = sim[1].publish(out.site, {}, {"demo"});
    out.root = pub.man.base().hash;
    for (const auto& m : pub.man.members) out.members.push_back(m.hash);
    out.trees["A"] = *sim[1].site(out.root);
    sim.run_for(2000);

    auto jb = sim.wait(2, sim[2].load_site(magnet_for(out.root, "demo")), 120000);
    for (const auto& e : jb.log) out.steps_b.push_back(e.step);
    if (jb.ph != gateway::phase::ready) {
        out.why = "B did not finish: " + gateway::to_string(jb.ph) + " " + jb.detail;
        return out;
    }
    out.trees["B"] = *sim[2].site(out.root);

    sim[1].stop();
    sim[3].start();
    sim.run_for(3000);
    std::set<std::string> sources_c;
    sim.net().set_send_observer([&](const transport::delivery_record& r, bytes_view payload) {
        trace += std::to_string(r.seq) + " " + std::to_string(r.sent_at) + " " + std::to_string(r.deliver_at) + " " +
                 r.from.to_string() + " " + r.to.to_string() + " " + (r.dropped ? "d " : "- ") +
                 to_hex(sha1_bytes(payload)) + "\n";
        if (r.to == sim[3].endpoint() && swarm::is_swarm(payload) && !r.dropped) sources_c.insert(r.from.to_string());
    });
    auto jc = sim.wait(3, sim[3].load_site(magnet_for(out.root, "demo")), 120000);
    if (jc.ph != gateway::phase::ready) {
        out.why = "C did not finish: " + gateway::to_string(jc.ph) + " " + jc.detail;
        return out;
    }
    out.trees["C"] = *sim[3].site(out.root);
    if (sources_c != std::set<std::string>{sim[2].endpoint().to_string()}) {
        out.why = "C received swarm data from " + std::to_string(sources_c.size()) + " sources";
        return out;
    }
    out.dht_dat_b = sim[2].dht_dat();
    out.held_b = out.members;
    sim.run_for(1000);
    sim[2].stop();
    sim[3].stop();
    sim[0].stop();
    out.digest = to_hex(sha1_bytes(trace));
    out.ok = true;
    return out;
}

void end_to_end(verdict& v)
{
    auto t0 = clock_type::now();
    auto a = visitor_becomes_host(6, std::nullopt);
    auto b = visitor_becomes_host(6, std::nullopt);
    auto secs = seconds_since(t0);
    v.check(a.ok, a.why);
    if (!a.ok) return;
    v.check(a.site.tree.size() == 12, "fixture has " + std::to_string(a.site.tree.size()) + " files");
    std::int64_t total = 0;
    for (const auto& [p, d] : a.site.tree) total += static_cast<std::int64_t>(d.size());
    v.check(total == (1 << 20), "fixture is " + std::to_string(total) + " bytes");
    v.check(a.trees["A"] == a.site.tree && a.trees["B"] == a.site.tree && a.trees["C"] == a.site.tree,
            "trees differ");

    // The six steps in order (5 is the explicit skip).
    std::vector<std::string> order = {"resolve", "fetch_metadata", "discover", "manifest", "transfer", "assemble",
                                      "scripts_skipped", "share", "ready"};
    auto pos = [&](const std::string& s) {
        return static_cast<std::size_t>(std::find(a.steps_b.begin(), a.steps_b.end(), s) - a.steps_b.begin());
    };
    for (const auto& s : order) v.check(pos(s) < a.steps_b.size(), "B's log lacks " + s);
    v.check(pos("resolve") < pos("discover") && pos("fetch_metadata") < pos("transfer") && pos("transfer") < pos("assemble") && pos("discover") < pos("fetch_metadata") &&
                pos("fetch_metadata") < pos("manifest") && pos("manifest") < pos("assemble") &&
                pos("assemble") < pos("scripts_skipped") && pos("scripts_skipped") < pos("share"),
            "pipeline order");
    v.check(b.ok && a.digest == b.digest, "replay with the same seed diverged");
    v.check(secs < 60, "runtime " + fmt(secs) + " s");
    v.note("12 files / 1 MiB identical on A, B and C; C fed by B only; replay digest " + a.digest.substr(0, 12) +
           "; " + fmt(secs) + " s for two runs");
}

void forensic_roundtrip(verdict& v)
{
    testing::temp_dir tmp("acc9");
    auto run = visitor_becomes_host(6, tmp.path());
    v.check(run.ok, run.why);
    if (!run.ok) return;
    auto root = tmp / "B";
    auto before = testing::tree_hash(root);
    auto r1 = forensics::inspect(root);
    auto r2 = forensics::inspect(root);
    auto after = testing::tree_hash(root);
    v.check(before == after, "inspect changed the profile");
    v.check(forensics::to_json(r1) == forensics::to_json(r2) && forensics::to_text(r1) == forensics::to_text(r2),
            "reports differ between runs");

    std::set<infohash> want(run.held_b.begin(), run.held_b.end()), got;
    std::int64_t earliest = INT64_MAX;
    for (const auto& t : r1.torrents) {
        got.insert(t.hash);
        v.check(t.completeness && *t.completeness == 1.0, t.hash.hex() + " completeness");
        if (t.created_at) earliest = std::min(earliest, *t.created_at);
    }
    v.check(got == want, "recovered " + std::to_string(got.size()) + " of " + std::to_string(want.size()) + " infohashes");

    auto expected = dht::load_dht_dat(*store::read_file(root / "dht.dat"));
    auto live = dht::load_dht_dat(run.dht_dat_b);
    v.check(r1.dht.has_value(), "no dht.dat in report");
    if (r1.dht) {
        auto a = r1.dht->peers, b = expected.peers, c = live.peers;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        std::sort(c.begin(), c.end());
        v.check(a == b, "peers differ from dht.dat");
        v.check(a == c, "peers differ from the node's table at shutdown");
        v.check(!a.empty(), "no peers recovered");
        v.note(std::to_string(a.size()) + " peers");
    }
    v.check(!r1.timeline.empty() && r1.timeline.front().timestamp == earliest &&
                r1.timeline.front().kind == forensics::event_kind::torrent_first_processed,
            "timeline does not start at the earliest resume created_at");
    v.note(std::to_string(got.size()) + " torrents at 100%, first event " +
           (r1.timeline.empty() ? std::string("none") : forensics::utc(r1.timeline.front().timestamp)) +
           ", report identical twice, tree hash unchanged");
}

void remnant_detection(verdict& v)
{
    testing::temp_dir tmp("acc10");
    auto run = visitor_becomes_host(6, tmp / "profiles");
    v.check(run.ok, run.why);
    if (!run.ok) return;
    store::machine_layout m{tmp / "machine"};
    store::install(m, 1428624000);
    fs::copy(tmp / "profiles" / "B", m.roaming_dir(), fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    store::uninstall(m, store::uninstall_mode::remove_history);
    v.check(!fs::exists(m.user_data_dir()) && fs::exists(m.roaming_dir()), "fixture layout");

    auto before = testing::tree_hash(m.root);
    auto r = forensics::detect_remnants(m.root);
    v.check(testing::tree_hash(m.root) == before, "remnant scan changed the tree");
    v.check(r.mode == forensics::uninstall_mode::history_removed, "mode " + forensics::to_string(r.mode));
    std::size_t sites = 0, identical = 0;
    for (const auto& u : r.users)
        for (const auto& s : u.sites) {
            ++sites;
            auto tree = forensics::recover_site(m.roaming_dir(), s.hash);
            if (s.complete && tree && *tree == run.site.tree) ++identical;
        }
    v.check(sites >= 1 && identical == sites,
            std::to_string(identical) + "/" + std::to_string(sites) + " cached sites reconstructed byte-identically");
    v.note("history_removed; " + std::to_string(identical) + "/" + std::to_string(sites) + " sites byte-identical");
}

// --- 7 -------------------------------------------------------------------

void ratio_enforcement(verdict& v)
{
    for (double limit : {1.0, 0.0}) {
        testing::node_sim sim(0, 77);
        store::settings s;
        s.share_ratio_limit = limit;
        sim.add();
        sim.add();          // publisher
        sim.add(std::nullopt, s);  // relay under test
        for (int i = 0; i < 3; ++i) sim.add();
        sim.start_all();
        auto site = bundle::generate_demo_site(70, 8, 400000);
        auto pub = sim[1].publish(site, {}, {"ratio"});
        auto h = pub.man.base().hash;
        sim.run_for(2000);

        if (limit == 0.0) {
            // The relay copies the site straight from the publisher's files.
            auto id = sim[2].load_site(magnet_for(h, "ratio"));
            sim.wait(2, id, 60000);
        } else {
            v.check(sim.wait(2, sim[2].load_site(magnet_for(h, "ratio"))).ph == gateway::phase::ready,
                    "relay did not fetch the site");
        }
        sim[1].stop();
        std::vector<std::uint64_t> jobs;
        for (std::size_t i = 3; i < 6; ++i) jobs.push_back(sim[i].load_site(magnet_for(h, "ratio")));
        sim.run_for(90000);

        std::int64_t up = 0, down = 0, piece = 0;
        for (const auto& t : pub.torrents) {
            if (!sim[2].swarm().has_torrent(t.hash)) continue;
            up += sim[2].swarm().stats(t.hash).uploaded;
            down += sim[2].swarm().stats(t.hash).downloaded;
            piece = std::max(piece, t.info.piece_length);
            auto st = sim[2].swarm().stats(t.hash);
            v.check(st.uploaded <= static_cast<std::int64_t>(limit * static_cast<double>(st.downloaded)) + t.info.piece_length,
                    "limit " + fmt(limit, 1) + ": uploaded " + std::to_string(st.uploaded) + " > r*d + piece");
        }
        if (limit == 0.0) {
            v.check(up == 0, "limit 0: relay uploaded " + std::to_string(up));
            // The publisher itself is refused too.
            store::settings zero;
            zero.share_ratio_limit = 0.0;
            swarm::token_bucket bucket;
            swarm::node_totals totals;
            swarm::transfer_stats st;
            v.check(!swarm::serve_piece(16384, st, totals, zero, true, bucket, 0).ok, "limit 0 served a publisher request");
        } else {
            v.check(down > 0, "relay downloaded nothing");
            v.check(up > 0, "relay never uploaded");
        }
        v.note("limit " + fmt(limit, 1) + ": d=" + std::to_string(down) + " u=" + std::to_string(up) +
               " bound=" + std::to_string(static_cast<std::int64_t>(limit * static_cast<double>(down)) + piece));
    }
}

// --- 8 -------------------------------------------------------------------

void background_seeding(verdict& v)
{
    for (bool background : {true, false}) {
        testing::node_sim sim(0, 88);
        store::settings s;
        s.background_seed = background;
        sim.add();
        sim.add(std::nullopt, s);
        sim.add();
        sim.start_all();
        auto pub = sim[1].publish(bundle::generate_demo_site(8, 12, 300000), {}, {"bg"});
        sim.run_for(2000);
        sim[1].close_gateway();
        const auto& j = sim.wait(2, sim[2].load_site(magnet_for(pub.man.base().hash, "bg")), 90000);
        bool ready = j.ph == gateway::phase::ready;
        v.check(ready == background, std::string("background_seed=") + (background ? "true" : "false") +
                                         ": remote load " + gateway::to_string(j.ph));
        v.note(std::string(background ? "on" : "off") + ": " + gateway::to_string(j.ph) +
               (j.cause != gateway::failure::none ? " (" + gateway::to_string(j.cause) + ")" : ""));
    }
}

// --- 11 ------------------------------------------------------------------

void monitor_coverage(verdict& v)
{
    auto sc = scenario::load(testing::source_root() / "scenarios" / "monitor_churn.toml");
    std::size_t fetchers = 0;
    for (const auto& a : sc.actions)
        if (a.kind == scenario::action_kind::load) fetchers += a.nodes.size();
    v.check(sc.network.loss_probability == 0, "scenario has packet loss");
    v.check(fetchers >= 10, "scenario has " + std::to_string(fetchers) + " fetch actions");
    auto r = scenario::run(sc);
    v.check(!r.monitors.empty(), "no monitor ran");
    for (const auto& m : r.monitors) {
        std::size_t covered = 0;
        for (const auto& p : m.ground_truth) covered += m.log.observations.count(p);
        double frac = m.ground_truth.empty() ? 0 : static_cast<double>(covered) / static_cast<double>(m.ground_truth.size());
        v.check(frac >= 0.9, "coverage " + fmt(frac * 100, 1) + "%");
        v.check(m.swarm_requests_sent == 0, std::to_string(m.swarm_requests_sent) + " piece requests sent");
        v.check(m.swarm_messages_sent == 0, std::to_string(m.swarm_messages_sent) + " swarm messages sent");
        v.note(std::to_string(covered) + "/" + std::to_string(m.ground_truth.size()) + " ground-truth peers observed, " +
               std::to_string(m.swarm_requests_sent) + " piece requests, " + std::to_string(m.dht_messages_sent) +
               " DHT messages");
    }
}

// --- 12 ------------------------------------------------------------------

void determinism(verdict& v)
{
    std::size_t runs = 0;
    for (const auto& e : fs::directory_iterator(testing::source_root() / "scenarios")) {
        if (e.path().extension() != ".toml") continue;
        auto sc = scenario::load(e.path());
        scenario::options o;
        o.trace = true;
        auto a = scenario::run(sc, o);
        auto b = scenario::run(sc, o);
        auto name = e.path().filename().string();
        v.check(a.transcript == b.transcript, name + ": transcripts differ");
        v.check(a.report_json == b.report_json, name + ": reports differ");
        v.check(a.trace_digest == b.trace_digest, name + ": datagram traces differ");
        v.check(a.monitors.size() == b.monitors.size(), name + ": monitor count differs");
        for (std::size_t i = 0; i < std::min(a.monitors.size(), b.monitors.size()); ++i)
            v.check(a.monitors[i].jsonl == b.monitors[i].jsonl, name + ": monitor logs differ");
        ++runs;
    }
    v.check(runs >= 3, "only " + std::to_string(runs) + " scenarios found");

    // A different seed gives a different trace.
    auto sc = scenario::load(testing::source_root() / "scenarios" / "fifty_nodes.toml");
    auto x = scenario::run(sc, {std::uint64_t{8}, std::nullopt, false});
    auto y = scenario::run(sc);
    v.check(x.trace_digest != y.trace_digest, "seed has no effect");
    v.note(std::to_string(runs) + " scenarios replayed twice: transcripts, reports, traces and monitor logs identical");
}

struct criterion {
    int number;
    const char* name;
    std::function<void(verdict&)> run;
};

const std::vector<criterion>& criteria()
{
    static const std::vector<criterion> all = {
        {1, "bencode roundtrip", bencode_roundtrip},
        {2, "infohash oracle", infohash_oracle},
        {3, "wire-format constants", wire_constants},
        {4, "settings defaults", settings_defaults},
        {5, "DHT oracle equivalence", dht_oracle},
        {6, "visitor becomes host", end_to_end},
        {7, "ratio enforcement", ratio_enforcement},
        {8, "background seeding", background_seeding},
        {9, "forensic roundtrip", forensic_roundtrip},
        {10, "remnant detection", remnant_detection},
        {11, "monitor coverage", monitor_coverage},
        {12, "determinism replay", determinism},
    };
    return all;
}

bool run_one(const criterion& c)
{
    verdict v;
    auto t0 = clock_type::now();
    try {
        c.run(v);
    } catch (const std::exception& e) {
        v.failures.push_back(std::string("exception: ") + e.what());
    }
    std::vector<std::string> failures;
    for (const auto& f : v.failures)
        if (!f.empty()) failures.push_back(f);
    bool pass = failures.empty();
    std::ostringstream line;
    line << (pass ? "PASS" : "FAIL") << "  criterion " << (c.number < 10 ? " " : "") << c.number << "  " << c.name
         << " (" << fmt(seconds_since(t0)) << " s)";
    for (const auto& f : failures) line << "\n      failed: " << f;
    for (const auto& n : v.notes) line << "\n      " << n;
    std::cout << line.str() << std::endl;
    return pass;
}

}  // namespace

int main(int argc, char** argv)
{
    int failed = 0;
    if (argc > 1) {
        int n = std::atoi(argv[1]);
        for (const auto& c : criteria())
            if (c.number == n) return run_one(c) ? 0 : 1;
        std::cerr << "no criterion " << argv[1] << "\n";
        return 2;
    }
    for (const auto& c : criteria()) failed += !run_one(c);
    std::cout << (criteria().size() - static_cast<std::size_t>(failed)) << "/" << criteria().size()
              << " criteria passed\n";
    return failed;
}
