#include "mael/forensics.hpp"

#include "node_sim.hpp"
#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

using namespace mael;
using namespace mael::forensics;

namespace {

const char* startpage = "8E65684D700ECC41A09A60EE58991845EA56F734";

std::string magnet_for(const bundle::published& p) { return torrent::magnet{p.man.base().hash, {}, {}}.to_uri(); }

// Publisher plus one visitor with a profile; returns the visitor's profile.
struct visited {
    testing::temp_dir tmp{"fx"};
    bundle::website site = bundle::generate_demo_site(42);
    bundle::published pub;
    bytes dht_dat;
    std::vector<infohash> held;

    visited()
    {
        testing::node_sim sim(0, 21);
        sim.add();
        sim.add();
        sim.add(tmp / "profile");
        sim.start_all();
        pub = sim[1].publish(site, {128 * 1024}, {"demo"});
        sim.run_for(2000);
        auto id = sim[2].load_site(magnet_for(pub));
        REQUIRE(sim.wait(2, id).ph == gateway::phase::ready);
        sim.run_for(5000);
        sim[2].stop();
        dht_dat = *store::read_file(tmp / "profile" / "dht.dat");
    }
    fs::path root() const { return tmp / "profile"; }
};

bytes dht_file(const dht::node_id& id, const std::vector<bytes>& entries, std::size_t count)
{
    bytes blob;
    for (const auto& e : entries) blob += e;
    return "d2:id20:" + id.to_bytes() + "5:nodesi" + std::to_string(count) + "e5:peers" + std::to_string(blob.size()) +
           ":" + blob + "e";
}

}  // namespace

TEST_SUITE("forensics") {

TEST_CASE("empty directory")
{
    testing::temp_dir tmp("empty");
    auto r = inspect(tmp.path());
    CHECK(r.torrents.empty());
    CHECK(r.anomalies.empty());
    CHECK_FALSE(r.dht);
    CHECK(r.timeline.empty());
    CHECK_THROWS_AS(inspect(tmp / "missing"), error);
}

TEST_CASE("utc formatting")
{
    CHECK(utc(1428624000) == "2015-04-10T00:00:00Z");
    CHECK(utc(0) == "1970-01-01T00:00:00Z");
}

TEST_CASE("startpage pair anchors the timeline")
{
    auto r = inspect(testing::fixtures() / "startpage");
    REQUIRE_FALSE(r.timeline.empty());
    const auto& first = r.timeline.front();
    CHECK(first.kind == event_kind::torrent_first_processed);
    CHECK(first.subject == startpage);
    CHECK(first.timestamp == 1428624061);
    CHECK(first.source == std::string(startpage) + ".resume");
}

TEST_CASE("generate then inspect")
{
    visited v;
    auto before = testing::tree_hash(v.root());
    auto r = inspect(v.root());
    CHECK(testing::tree_hash(v.root()) == before);
    CHECK(to_json(inspect(v.root())) == to_json(r));
    CHECK(to_text(inspect(v.root())) == to_text(r));

    std::set<infohash> want, got;
    for (const auto& t : v.pub.torrents) want.insert(t.hash);
    for (const auto& t : r.torrents) {
        got.insert(t.hash);
        CHECK(t.completeness == 1.0);
        CHECK(t.publisher == false);
    }
    CHECK(got == want);
    CHECK(r.anomalies.empty());

    REQUIRE(r.dht);
    CHECK(r.dht->stride == 6);
    auto expected = dht::load_dht_dat(v.dht_dat);
    auto a = r.dht->peers, b = expected.peers;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK(!a.empty());
    CHECK(r.dht->id == expected.id);

    std::int64_t earliest = INT64_MAX;
    for (const auto& t : r.torrents) earliest = std::min(earliest, *t.created_at);
    REQUIRE_FALSE(r.timeline.empty());
    CHECK(r.timeline.front().timestamp == earliest);
    CHECK(r.timeline.front().kind == event_kind::torrent_first_processed);
    for (std::size_t i = 1; i < r.timeline.size(); ++i) CHECK(r.timeline[i - 1].timestamp <= r.timeline[i].timestamp);
    for (const auto& e : r.timeline) CHECK(fs::exists(v.root() / e.source));

    auto doc = nlohmann::json::parse(to_json(r));
    CHECK(doc["schema"] == "mael.forensics/1");

    // Cached site comes back byte-identical.
    CHECK(recover_site(v.root(), v.pub.man.base().hash) == v.site.tree);
    for (const auto& t : v.pub.torrents) CHECK(reconstruct(v.root(), t.hash).complete());
    CHECK(testing::tree_hash(v.root()) == before);
}

TEST_CASE("damaged artifacts become anomalies")
{
    testing::temp_dir tmp("damaged");
    store::write_file(tmp / "dht.dat", "d2:id3:abce");
    store::write_file(tmp / "settings.dat", "garbage");
    store::write_file(tmp / (std::string(startpage) + ".torrent"), "d4:infoi1ee");
    store::write_file(tmp / "other.resume", "d1:x");
    auto r = inspect(tmp.path());
    CHECK(r.anomalies.size() >= 3);
    for (const auto& a : r.anomalies) CHECK(fs::exists(tmp / a.path));
}

TEST_CASE("dht.dat stride detection")
{
    auto id = *dht::node_id::from_hex("0102030405060708090a0b0c0d0e0f1011121314");
    auto p1 = dht::compact_peer::from_u32(0x01020304, 6881);
    auto p2 = dht::compact_peer::from_u32(0x05060708, 51413);
    testing::temp_dir tmp("stride");

    store::write_file(tmp / "dht.dat", dht_file(id, {p1.encode(), p2.encode()}, 2));
    auto r = inspect(tmp.path());
    REQUIRE(r.dht);
    CHECK(r.dht->stride == 6);
    CHECK(r.dht->peers == std::vector<dht::compact_peer>{p1, p2});

    auto n1 = dht::node_id::from_bytes(bytes(20, 'a'));
    store::write_file(tmp / "dht.dat", dht_file(id, {n1.to_bytes() + p1.encode()}, 1));
    r = inspect(tmp.path());
    CHECK(r.dht->stride == 26);
    CHECK(r.dht->node_ids == std::vector<dht::node_id>{n1});
    CHECK(r.dht->peers == std::vector<dht::compact_peer>{p1});

    // 78 bytes fit 3 x 26 and 13 x 6; without a count this is ambiguous.
    bytes blob(78, '\x01');
    store::write_file(tmp / "dht.dat", "d2:id20:" + id.to_bytes() + "5:peers78:" + blob + "e");
    r = inspect(tmp.path());
    CHECK(r.dht->stride == 26);
    CHECK(r.anomalies.size() == 1);
}

TEST_CASE("partial reconstruction flags the gap")
{
    testing::temp_dir tmp("partial");
    bytes data;
    for (int i = 0; i < 3 * 16384 - 1000; ++i) data.push_back(static_cast<char>('a' + i % 26));
    auto meta = torrent::build_torrent({{"page.html", data}}, 16384);
    store::profile p(tmp.path());
    p.save_torrent(meta, 1428624000);
    for (std::size_t i : {0u, 2u})
        p.store_piece(meta.info.name, meta.hash, i,
                      bytes_view(data).substr(i * 16384, static_cast<std::size_t>(meta.info.piece_size(i))), 1428624000);
    auto r = reconstruct(tmp.path(), meta.hash);
    CHECK(r.from_torrent);
    CHECK(r.pieces == std::vector<bool>{true, false, true});
    REQUIRE(r.files.size() == 1);
    const auto& f = r.files[0];
    CHECK(f.gaps == std::vector<byte_range>{{16384, 32768}});
    CHECK(f.data.substr(0, 16384) == data.substr(0, 16384));
    CHECK(f.data.substr(32768) == data.substr(32768));
    CHECK(f.data.substr(16384, 16384) == bytes(16384, '\0'));
    CHECK_FALSE(r.complete());

    testing::temp_dir out("partial-out");
    write_reconstruction(r, out / "o");
    CHECK(fs::file_size(out / "o" / "page.html") == data.size());
    CHECK(fs::exists(out / "o" / "gaps.json"));
    auto j = nlohmann::json::parse(reconstruction_json(r));
    CHECK(j["schema"] == "mael.reconstruction/1");
}

TEST_CASE("cache without its torrent exports raw pieces")
{
    testing::temp_dir tmp("raw");
    auto meta = torrent::build_torrent({{"x.html", bytes(20000, 'x')}}, 16384);
    store::profile p(tmp.path());
    p.store_piece(meta.info.name, meta.hash, 1, bytes(20000 - 16384, 'x'), 0);
    auto r = reconstruct(tmp.path(), meta.hash);
    CHECK_FALSE(r.from_torrent);
    REQUIRE(r.raw.size() == 1);
    CHECK(r.raw[0].index == 1);
    CHECK(r.raw[0].sha1_hex == to_hex(sha1_bytes(bytes(20000 - 16384, 'x'))));
    CHECK_THROWS_AS(reconstruct(tmp.path(), infohash::from_bytes(sha1_bytes("none"))), error);
}

TEST_CASE("remnants")
{
    SUBCASE("empty tree")
    {
        testing::temp_dir tmp("rm0");
        CHECK(detect_remnants(tmp.path()).mode == uninstall_mode::no_evidence);
    }
    SUBCASE("install, browse, uninstall")
    {
        visited v;
        testing::temp_dir tmp("rm");
        store::machine_layout m{tmp.path()};
        store::install(m, 1428624000);
        fs::copy(v.root(), m.roaming_dir(), fs::copy_options::recursive | fs::copy_options::overwrite_existing);

        auto full = detect_remnants(tmp.path());
        CHECK(full.mode == uninstall_mode::history_kept);

        store::uninstall(m, store::uninstall_mode::remove_history);
        auto before = testing::tree_hash(tmp.path());
        auto r = detect_remnants(tmp.path());
        CHECK(testing::tree_hash(tmp.path()) == before);
        CHECK(r.mode == uninstall_mode::history_removed);
        CHECK_FALSE(r.registry_present);
        REQUIRE(r.users.size() == 1);
        const auto& u = r.users[0];
        CHECK(u.roaming_present);
        CHECK_FALSE(u.user_data_present);
        REQUIRE(u.profile);
        CHECK(u.profile->torrents.size() == v.pub.torrents.size());
        bool found = false;
        for (const auto& s : u.sites)
            if (s.hash == v.pub.man.base().hash) found = s.complete;
        CHECK(found);
        CHECK(recover_site(m.roaming_dir(), v.pub.man.base().hash) == v.site.tree);
        CHECK(nlohmann::json::parse(to_json(r))["schema"] == "mael.remnants/1");
    }
}

}
