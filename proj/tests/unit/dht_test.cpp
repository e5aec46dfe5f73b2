#include "mael/dht.hpp"

#include "dht_sim.hpp"
#include "support.hpp"

#include <doctest.h>

#include <set>

using namespace mael;
using namespace mael::dht;

namespace {

node_id random_id(std::mt19937_64& rng)
{
    bytes raw(20, '\0');
    for (auto& c : raw) c = static_cast<char>(rng() & 0xff);
    return node_id::from_bytes(raw);
}

node_id id_from_hex(const char* hex) { return *node_id::from_hex(hex); }

compact_peer peer(std::uint32_t n, std::uint16_t port = 6881) { return compact_peer::from_u32(0x0a000000u + n, port); }

distance add(const distance& a, const distance& b, bool& overflow)
{
    distance out{};
    int carry = 0;
    for (int i = 19; i >= 0; --i) {
        int s = a[i] + b[i] + carry;
        out[i] = static_cast<std::uint8_t>(s & 0xff);
        carry = s >> 8;
    }
    overflow = carry != 0;
    return out;
}

}  // namespace

TEST_SUITE("dht") {

TEST_CASE("xor distance")
{
    auto zero = id_from_hex("0000000000000000000000000000000000000000");
    auto top = id_from_hex("8000000000000000000000000000000000000000");
    CHECK(xor_distance(zero, zero) == distance{});
    distance two159{};
    two159[0] = 0x80;
    CHECK(xor_distance(zero, top) == two159);
    CHECK(common_prefix_length(zero, top) == 0);
    CHECK(common_prefix_length(zero, zero) == 160);

    std::mt19937_64 rng(5);
    for (int i = 0; i < 1000; ++i) {
        auto a = random_id(rng), b = random_id(rng), c = random_id(rng);
        CHECK(xor_distance(a, b) == xor_distance(b, a));
        auto ab = xor_distance(a, b), bc = xor_distance(b, c), ac = xor_distance(a, c);
        distance combined{};
        for (int k = 0; k < 20; ++k) combined[k] = ab[k] ^ bc[k];
        CHECK(ac == combined);
        bool overflow = false;
        auto sum = add(ab, bc, overflow);
        CHECK((overflow || ac <= sum));
    }
}

TEST_CASE("compact peer wire form")
{
    auto p = *compact_peer::parse("1.2.3.4:6881");
    CHECK(p.encode() == bytes("\x01\x02\x03\x04\x1a\xe1", 6));
    auto sat = *compact_peer::parse("255.255.255.255:65535");
    CHECK(sat.encode() == bytes(6, '\xff'));
    CHECK(compact_peer::decode(p.encode()) == p);
    CHECK_THROWS_AS(compact_peer::decode("12345"), peer_error);
    CHECK_FALSE(compact_peer::parse("1.2.3:5"));
    CHECK_FALSE(compact_peer::parse("1.2.3.4:70000"));

    std::mt19937_64 rng(9);
    for (int i = 0; i < 500; ++i) {
        auto q = compact_peer::from_u32(static_cast<std::uint32_t>(rng()), static_cast<std::uint16_t>(rng() % 65535 + 1));
        CHECK(q.encode().size() == 6);
        CHECK(compact_peer::decode(q.encode()) == q);
        CHECK(compact_peer::parse(q.to_string()) == q);
    }
}

TEST_CASE("node entries are 26 bytes")
{
    std::mt19937_64 rng(2);
    std::vector<node_entry> v;
    for (std::uint32_t i = 0; i < 3; ++i) v.push_back(node_entry{random_id(rng), peer(i + 1), 0, 0});
    CHECK(v[0].encode().size() == 26);
    auto blob = encode_nodes(v);
    CHECK(blob.size() == 78);
    auto back = decode_nodes(blob);
    REQUIRE(back.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK((back[i].id == v[i].id && back[i].peer == v[i].peer));
    CHECK_THROWS(decode_nodes(blob.substr(0, 77)));
}

TEST_CASE("routing table against a linear scan")
{
    std::mt19937_64 rng(77);
    routing_table t(random_id(rng));
    std::vector<node_entry> accepted;
    for (std::uint32_t i = 0; i < 600; ++i) {
        auto id = random_id(rng);
        // Skew a third of the ids toward our own to force splits.
        if (i % 3 == 0) {
            auto raw = id.to_bytes();
            auto own = t.own_id().to_bytes();
            std::copy(own.begin(), own.begin() + 2 + i % 5, raw.begin());
            id = node_id::from_bytes(raw);
        }
        if (t.insert(id, peer(i + 1), i)) accepted.push_back({id, peer(i + 1), i, 0});
        REQUIRE_FALSE(t.check_invariants());
    }
    CHECK(t.size() == t.entries().size());
    CHECK(t.bucket_count() > 1);
    for (std::size_t b = 0; b < t.bucket_count(); ++b) CHECK(t.bucket_entries(b).size() <= t.k());
    auto all = t.entries();
    std::set<node_id> ids;
    for (const auto& e : all) CHECK(ids.insert(e.id).second);
    for (int q = 0; q < 200; ++q) {
        auto target = random_id(rng);
        auto got = t.closest(target, 8);
        auto want = testing::dht_sim::brute_force_closest(all, target, 8);
        REQUIRE(got.size() == want.size());
        for (std::size_t k = 0; k < got.size(); ++k) CHECK(got[k].id == want[k].id);
    }
    CHECK_FALSE(t.insert(t.own_id(), peer(9999), 0));
}

TEST_CASE("message roundtrip")
{
    std::mt19937_64 rng(3);
    message q;
    q.kind = msg_kind::get_peers;
    q.transaction_id = "aa";
    q.sender = random_id(rng);
    q.query_name = "get_peers";
    q.info_hash = infohash::from_bytes(random_id(rng).to_bytes());
    auto back = decode_message(encode_message(q));
    CHECK(back.kind == msg_kind::get_peers);
    CHECK(back.info_hash == q.info_hash);
    CHECK(back.sender == q.sender);
    CHECK(is_krpc(encode_message(q)));
    CHECK_FALSE(is_krpc("d1:mi1ee"));
    CHECK_THROWS_AS(decode_message("i1e"), error);

    message r;
    r.kind = msg_kind::response;
    r.transaction_id = "zz";
    r.sender = random_id(rng);
    r.values = {peer(1), peer(2)};
    r.token = "tok";
    auto rb = decode_message(encode_message(r));
    CHECK(rb.values == r.values);
    CHECK(rb.token == r.token);
}

TEST_CASE("handle_message transitions")
{
    std::mt19937_64 rng(4);
    dht_node n(random_id(rng), peer(1), "secret");
    auto asker = random_id(rng);

    message ping;
    ping.kind = msg_kind::ping;
    ping.query_name = "ping";
    ping.transaction_id = "t1";
    ping.sender = asker;
    auto out = n.handle_message(peer(2), ping, 1000);
    REQUIRE(out.size() == 1);
    CHECK(out[0].to == peer(2));
    CHECK(out[0].msg.kind == msg_kind::response);
    CHECK(out[0].msg.transaction_id == "t1");
    CHECK(n.table().size() == 1);

    for (std::uint32_t i = 0; i < 2; ++i) n.table().insert(random_id(rng), peer(10 + i), 1000);
    message fn;
    fn.kind = msg_kind::find_nodes;
    fn.query_name = "find_node";
    fn.transaction_id = "t2";
    fn.sender = asker;
    fn.target = random_id(rng);
    out = n.handle_message(peer(2), fn, 1001);
    REQUIRE(out.size() == 1);
    CHECK(out[0].msg.nodes.size() == 3 * 26);

    message unknown = ping;
    unknown.kind = msg_kind::unknown_query;
    unknown.query_name = "vote";
    out = n.handle_message(peer(2), unknown, 1002);
    REQUIRE(out.size() == 1);
    CHECK(out[0].msg.kind == msg_kind::error);
    CHECK(out[0].msg.error_code == 204);

    // Equal inputs, equal outputs.
    dht_node a(id_from_hex("1111111111111111111111111111111111111111"), peer(1), "s");
    dht_node b(id_from_hex("1111111111111111111111111111111111111111"), peer(1), "s");
    CHECK(a.handle_message(peer(2), fn, 5) == b.handle_message(peer(2), fn, 5));
}

TEST_CASE("announce then get_peers, with token checks and expiry")
{
    std::mt19937_64 rng(6);
    dht_node n(random_id(rng), peer(1), "secret");
    auto hash = infohash::from_bytes(random_id(rng).to_bytes());
    auto asker = random_id(rng);

    message gp;
    gp.kind = msg_kind::get_peers;
    gp.query_name = "get_peers";
    gp.transaction_id = "g1";
    gp.sender = asker;
    gp.info_hash = hash;
    auto out = n.handle_message(peer(2), gp, 0);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].msg.token);
    CHECK(out[0].msg.values.empty());
    auto token = *out[0].msg.token;

    message an;
    an.kind = msg_kind::announce_peer;
    an.query_name = "announce_peer";
    an.transaction_id = "a1";
    an.sender = asker;
    an.info_hash = hash;
    an.port = 7000;
    an.token = "wrong";
    out = n.handle_message(peer(2), an, 10);
    CHECK(out[0].msg.kind == msg_kind::error);
    CHECK(n.stored_peers(hash, 10).empty());

    // A token issued to another address is not valid for this one.
    an.token = token;
    out = n.handle_message(peer(3), an, 10);
    CHECK(out[0].msg.kind == msg_kind::error);

    out = n.handle_message(peer(2), an, 10);
    CHECK(out[0].msg.kind == msg_kind::response);
    auto stored = n.stored_peers(hash, 10);
    REQUIRE(stored.size() == 1);
    CHECK(stored[0] == peer(2, 7000));

    gp.transaction_id = "g2";
    out = n.handle_message(peer(4), gp, 20);
    CHECK(out[0].msg.values == std::vector<compact_peer>{peer(2, 7000)});

    CHECK(n.stored_peers(hash, 30 * 60 * 1000 - 1).size() == 1);
    n.tick(30 * 60 * 1000 + 11);
    CHECK(n.stored_peers(hash, 30 * 60 * 1000 + 11).empty());

    // Tokens survive one rotation, not two.
    auto t0 = n.make_token(peer(5), 0);
    CHECK(n.valid_token(peer(5), t0, 5 * 60 * 1000 + 1));
    CHECK_FALSE(n.valid_token(peer(5), t0, 10 * 60 * 1000 + 1));
}

TEST_CASE("dht.dat format")
{
    auto id = id_from_hex("0102030405060708090A0B0C0D0E0F1011121314");
    dht_dat empty{id, {}};
    auto raw = save_dht_dat(empty);
    CHECK(raw == "d2:id20:" + id.to_bytes() + "5:nodesi0e5:peers0:e");
    CHECK(raw.find("id20:") == 3);

    dht_dat two{id, {peer(1), peer(2, 80)}};
    raw = save_dht_dat(two);
    CHECK(raw.find("5:nodesi2e5:peers12:") != bytes::npos);
    CHECK(load_dht_dat(raw) == two);

    auto code = [](const bytes& b) {
        try {
            load_dht_dat(b);
        } catch (const error& e) {
            return e.code();
        }
        return errc::bootstrap_timeout;
    };
    CHECK(code("garbage") == errc::malformed_input);
    CHECK(code("d2:id3:abc5:peers0:e") == errc::bad_id_length);
    CHECK(code("d2:id20:" + id.to_bytes() + "5:peers5:abcdee") == errc::peers_blob_not_multiple_of_6);
}

TEST_CASE("bootstrap against a router that knows 20 nodes")
{
    testing::dht_sim sim(21, 42);
    for (std::size_t i = 1; i <= 20; ++i) sim.node(0).table().insert(sim.node(i).id(), sim.endpoint(i), 0);
    for (std::size_t i = 0; i <= 20; ++i) sim.start(i);
    bool done = false, ok = false;
    sim.bootstrap(1, {0}, [&](const bootstrap_result& r) { done = true, ok = r.ok; });
    sim.net().run_until([&] { return done; }, 20000);
    CHECK(ok);
    CHECK(sim.node(1).table().size() >= 8);
    CHECK(sim.results().failures.empty());
}

TEST_CASE("bootstrap edge cases")
{
    SUBCASE("router knows nobody")
    {
        testing::dht_sim sim(2, 1);
        sim.start(0);
        bool ok = false;
        sim.start(1, {0}, [&](const bootstrap_result& r) { ok = r.ok; });
        sim.net().run_until(20000);
        CHECK(ok);
        REQUIRE(sim.node(1).table().size() == 1);
        CHECK(sim.node(1).table().entries()[0].peer == sim.endpoint(0));
    }
    SUBCASE("unreachable router times out after three attempts")
    {
        testing::dht_sim sim(2, 1);
        bool called = false, ok = true;
        sim.start(1, {0}, [&](const bootstrap_result& r) { called = true, ok = r.ok; });
        sim.net().run_until(60000);
        CHECK(called);
        CHECK_FALSE(ok);
        CHECK(sim.node(1).table().size() == 0);
    }
}

TEST_CASE("identically seeded sims converge to identical tables")
{
    auto run = [](std::uint64_t seed) {
        transport::sim_config c;
        c.latency_min_ms = 5;
        c.latency_max_ms = 50;
        testing::dht_sim sim(30, seed, c);
        sim.start(0);
        for (std::size_t i = 1; i < 30; ++i)
            sim.net().schedule(static_cast<std::int64_t>(i) * 100, [&sim, i] { sim.start(i, {0}); });
        sim.net().run_until(30000);
        std::vector<bytes> out;
        for (std::size_t i = 0; i < 30; ++i) out.push_back(save_dht_dat(sim.node(i)));
        CHECK(sim.results().failures.empty());
        return out;
    };
    CHECK(run(8) == run(8));
}

TEST_CASE("lookups find announced peers in a 40-node sim")
{
    transport::sim_config c;
    c.latency_min_ms = 5;
    c.latency_max_ms = 30;
    testing::dht_sim sim(40, 17, c);
    sim.start(0);
    for (std::size_t i = 1; i < 40; ++i)
        sim.net().schedule(static_cast<std::int64_t>(i) * 50, [&sim, i] { sim.start(i, {0}); });
    sim.net().run_until(15000);

    auto hash = *infohash::from_hex("00112233445566778899AABBCCDDEEFF00112233");
    std::size_t acked = 0;
    sim.send(7, sim.node(7).announce(hash, 7777, sim.net().now(), [&](std::size_t n) { acked = n; }));
    sim.net().run_until(25000);
    CHECK(acked > 0);

    std::vector<compact_peer> found;
    sim.send(33, sim.node(33).get_peers(hash, sim.net().now(), [&](const lookup_result& r) { found = r.peers; }));
    sim.net().run_until(35000);
    auto want = sim.endpoint(7);
    want.port = 7777;
    CHECK(std::find(found.begin(), found.end(), want) != found.end());
    CHECK(sim.results().find_nodes_checked > 0);
    CHECK(sim.results().find_nodes_mismatches == 0);
    CHECK(sim.results().failures.empty());
}

}
