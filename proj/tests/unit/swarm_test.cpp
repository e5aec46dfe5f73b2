#include "mael/swarm.hpp"
#include "mael/transport.hpp"

#include <doctest.h>

#include <memory>
#include <random>

using namespace mael;
using namespace mael::swarm;

namespace {

bytes content(std::size_t n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    bytes out(n, '\0');
    for (auto& c : out) c = static_cast<char>(rng() & 0xff);
    return out;
}

// One engine on the sim network with an in-memory verified piece store.
struct peer {
    transport::endpoint ep;
    engine eng;
    std::map<std::pair<infohash, std::size_t>, bytes> pieces;
    std::map<infohash, torrent::info_dict> infos;
    bool corrupt = false;  // serves flipped bytes

    peer(transport::network& net, std::uint32_t n)
        : ep(transport::endpoint::from_u32(0x0a000000u + n, 6881)), eng(ep, bytes(20, static_cast<char>('a' + n)))
    {
        eng.set_piece_reader([this](const infohash& h, std::size_t i) -> std::optional<bytes> {
            auto it = pieces.find({h, i});
            if (it == pieces.end()) return std::nullopt;
            auto d = it->second;
            if (corrupt) d[0] ^= 1;
            return d;
        });
        eng.set_piece_sink([this](const infohash& h, std::size_t i, bytes d) {
            if (sha1_bytes(d) != infos.at(h).piece_hash(i)) return false;
            pieces[{h, i}] = std::move(d);
            return true;
        });
        net.attach(ep, [this, &net](const transport::endpoint& from, bytes_view raw) {
            deliver(net, eng.handle(from, raw, net.now()));
        });
    }

    void deliver(transport::network& net, const std::vector<outgoing>& out)
    {
        for (const auto& o : out) net.send(ep, o.to, o.payload);
    }

    void seed(const torrent::torrent_meta& m, const bytes& data, bool publisher)
    {
        infos[m.hash] = m.info;
        for (std::size_t i = 0; i < m.info.piece_count(); ++i)
            pieces[{m.hash, i}] = data.substr(i * static_cast<std::size_t>(m.info.piece_length),
                                              static_cast<std::size_t>(m.info.piece_size(i)));
        eng.add_torrent(m, std::vector<bool>(m.info.piece_count(), true), publisher);
    }

    void want(const torrent::torrent_meta& m)
    {
        infos[m.hash] = m.info;
        eng.add_torrent(m, {}, false);
    }

    bytes assemble(const torrent::torrent_meta& m) const
    {
        bytes out;
        for (std::size_t i = 0; i < m.info.piece_count(); ++i) out += pieces.at({m.hash, i});
        return out;
    }
};

void pump(transport::sim_network& net, std::vector<std::unique_ptr<peer>>& peers, std::function<bool()> until,
          std::int64_t budget_ms)
{
    auto deadline = net.now() + budget_ms;
    while (!until() && net.now() < deadline) {
        net.run_until(net.now() + 100);
        for (auto& p : peers) p->deliver(net, p->eng.tick(net.now()));
    }
}

transport::sim_config quiet()
{
    transport::sim_config c;
    c.latency_min_ms = 5;
    c.latency_max_ms = 20;
    return c;
}

}  // namespace

TEST_SUITE("swarm") {

TEST_CASE("wire messages roundtrip")
{
    auto h = infohash::from_bytes(sha1_bytes("x"));
    std::vector<wire_message> all;
    wire_message m;
    m.hash = h;
    m.type = msg_type::handshake;
    m.peer_id = bytes(20, 'p');
    all.push_back(m);
    m = {};
    m.hash = h;
    m.type = msg_type::bitfield;
    m.bitfield = {true, false, true, true, false, false, false, false, true};
    all.push_back(m);
    m = {};
    m.hash = h;
    m.type = msg_type::request;
    m.index = 7;
    all.push_back(m);
    m.type = msg_type::piece;
    m.offset = 1024;
    m.data = "abc";
    all.push_back(m);
    m = {};
    m.hash = h;
    m.type = msg_type::metadata_data;
    m.total = 4000;
    m.data = "d4:name";
    all.push_back(m);
    m = {};
    m.hash = h;
    m.type = msg_type::reject;
    m.reason = "ratio";
    m.retry_after_ms = 5000;
    all.push_back(m);
    for (const auto& w : all) {
        auto raw = encode(w);
        CHECK(is_swarm(raw));
        CHECK(decode(raw) == w);
    }
    CHECK_FALSE(is_swarm("d1:y1:qe"));
    CHECK_THROWS_AS(decode("garbage"), error);
    CHECK_THROWS_AS(decode("d1:m4:nopee"), error);
}

TEST_CASE("bitfield packing is MSB first")
{
    CHECK(pack_bitfield({true, false, false, false, false, false, false, true, true}) == bytes("\x81\x80", 2));
    std::mt19937 rng(4);
    for (int n = 0; n < 200; ++n) {
        std::vector<bool> bits(static_cast<std::size_t>(n));
        for (auto&& b : bits) b = rng() & 1;
        CHECK(unpack_bitfield(pack_bitfield(bits), bits.size()) == bits);
    }
}

TEST_CASE("ratio is undefined until something is downloaded")
{
    CHECK_FALSE(transfer_stats{10, 0}.ratio());
    CHECK(*transfer_stats{10, 20}.ratio() == doctest::Approx(0.5));
}

TEST_CASE("serve decision table")
{
    store::settings s;
    token_bucket bucket;
    node_totals totals;
    SUBCASE("ratio 0 refuses everything, publisher included")
    {
        s.share_ratio_limit = 0.0;
        for (bool pub : {false, true}) {
            transfer_stats st{0, 1 << 20};
            auto d = serve_piece(100, st, totals, s, pub, bucket, 0);
            CHECK_FALSE(d.ok);
            CHECK(d.why == refusal::ratio_exceeded);
            CHECK(st.uploaded == 0);
        }
    }
    SUBCASE("publisher exemption with default ratio")
    {
        transfer_stats st{};
        CHECK(serve_piece(16384, st, totals, s, true, bucket, 0).ok);
        CHECK(st.uploaded == 16384);
        CHECK(totals.uploaded == 16384);
    }
    SUBCASE("1 MiB up, 1 MiB down, limit 1.0")
    {
        transfer_stats st{1 << 20, 1 << 20};
        auto d = serve_piece(16384, st, totals, s, false, bucket, 0);
        CHECK_FALSE(d.ok);
        CHECK(d.why == refusal::ratio_exceeded);
    }
    SUBCASE("unlimited ratio")
    {
        s.share_ratio_limit = std::nullopt;
        transfer_stats st{1 << 30, 1};
        CHECK(serve_piece(16384, st, totals, s, false, bucket, 0).ok);
    }
    SUBCASE("transfer cap counts both directions")
    {
        s.share_ratio_limit = std::nullopt;
        s.transfer_cap = 1000;
        totals.downloaded = 900;
        transfer_stats st{};
        CHECK(serve_piece(100, st, totals, s, true, bucket, 0).ok);
        auto d = serve_piece(1, st, totals, s, true, bucket, 0);
        CHECK_FALSE(d.ok);
        CHECK(d.why == refusal::cap_exceeded);
    }
    SUBCASE("rate limit")
    {
        s.upload_rate = 1000;
        bucket.set_rate(1000);
        transfer_stats st{};
        CHECK(serve_piece(1500, st, totals, s, true, bucket, 100).ok);
        auto d = serve_piece(10, st, totals, s, true, bucket, 200);
        CHECK_FALSE(d.ok);
        CHECK(d.why == refusal::throttled);
        CHECK(d.retry_after_ms > 0);
        CHECK(serve_piece(10, st, totals, s, true, bucket, 200 + d.retry_after_ms).ok);
    }
}

TEST_CASE("ratio bound holds for any request sequence")
{
    std::mt19937_64 rng(8);
    for (int round = 0; round < 200; ++round) {
        store::settings s;
        s.share_ratio_limit = static_cast<double>(rng() % 40) / 10.0;
        token_bucket bucket;
        node_totals totals;
        transfer_stats st{0, static_cast<std::int64_t>(1 + rng() % 100000)};
        std::int64_t piece = 16384;
        for (int k = 0; k < 100; ++k) {
            serve_piece(piece, st, totals, s, false, bucket, k);
            if (rng() % 4 == 0) st.downloaded += static_cast<std::int64_t>(rng() % 20000);
            CHECK(static_cast<double>(st.uploaded) <= *s.share_ratio_limit * static_cast<double>(st.downloaded) + piece);
        }
    }
}

TEST_CASE("token bucket admits about rate bytes per second")
{
    token_bucket b(5000);
    std::int64_t sent = 0;
    for (std::int64_t t = 0; t < 10000; t += 10)
        if (!b.admit(1000, t)) sent += 1000;
    CHECK(sent >= 45000);
    CHECK(sent <= 56000);
}

TEST_CASE("next_request")
{
    std::vector<bool> all(4, true);
    CHECK(next_request({true, false, true, false}, all, {}, piece_policy::sequential) == 1u);
    CHECK(next_request({true, false, true, false}, all, {1}, piece_policy::sequential) == 3u);
    CHECK_FALSE(next_request(all, all, {}, piece_policy::sequential));
    CHECK_FALSE(next_request({false, false}, {false, false}, {}, piece_policy::sequential));

    // Three peers with scripted holdings; rarity is counted by brute force.
    std::vector<std::vector<bool>> peers = {
        {true, true, true, true, false, true},
        {true, false, true, true, true, true},
        {true, false, false, true, false, true},
    };
    std::vector<std::size_t> avail(6, 0);
    for (const auto& p : peers)
        for (std::size_t i = 0; i < 6; ++i) avail[i] += p[i];
    std::vector<bool> have(6, false);
    for (const auto& p : peers) {
        std::optional<std::size_t> want;
        for (std::size_t i = 0; i < 6; ++i)
            if (p[i] && (!want || avail[i] < avail[*want])) want = i;
        CHECK(next_request(have, p, {}, piece_policy::rarest_first, avail) == want);
    }
}

TEST_CASE("metadata and pieces over the simulator")
{
    transport::sim_network net(quiet());
    std::vector<std::unique_ptr<peer>> peers;
    for (std::uint32_t i = 1; i <= 3; ++i) peers.push_back(std::make_unique<peer>(net, i));
    auto data = content(200000, 5);
    auto meta = torrent::build_torrent({{"site/index.html", data}}, 16384);
    peers[0]->seed(meta, data, true);

    SUBCASE("no peers")
    {
        metadata_result got;
        bool done = false;
        peers[1]->deliver(net, peers[1]->eng.fetch_metadata(meta.hash, {}, net.now(), [&](const metadata_result& r) {
            got = r;
            done = true;
        }));
        CHECK(done);
        CHECK_FALSE(got.ok);
        CHECK(got.why == errc::no_peers);
    }

    SUBCASE("liar first, honest second")
    {
        auto fake = meta;
        fake.info_bytes = torrent::build_torrent({{"site/index.html", content(200000, 6)}}, 16384).info_bytes;
        peers[2]->eng.add_torrent(fake, std::vector<bool>(fake.info.piece_count(), true), true);
        std::optional<metadata_result> got;
        peers[1]->deliver(net, peers[1]->eng.fetch_metadata(meta.hash, {peers[2]->ep, peers[0]->ep}, net.now(),
                                                            [&](const metadata_result& r) { got = r; }));
        pump(net, peers, [&] { return got.has_value(); }, 20000);
        REQUIRE(got);
        CHECK(got->ok);
        CHECK(got->mismatched == std::vector<compact_peer>{peers[2]->ep});
        CHECK(infohash::from_bytes(sha1_bytes(got->info_bytes)) == meta.hash);
    }

    SUBCASE("download is byte identical")
    {
        peers[1]->want(meta);
        peers[1]->deliver(net, peers[1]->eng.start_download(meta.hash, {peers[0]->ep}, net.now()));
        pump(net, peers, [&] { return peers[1]->eng.complete(meta.hash); }, 60000);
        REQUIRE(peers[1]->eng.complete(meta.hash));
        CHECK(peers[1]->assemble(meta) == data);
        CHECK(peers[1]->eng.stats(meta.hash).downloaded == static_cast<std::int64_t>(data.size()));
        CHECK(peers[0]->eng.stats(meta.hash).uploaded == static_cast<std::int64_t>(data.size()));

        // A downloader with ratio 1.0 serves at most what it took plus a piece.
        peers[2]->want(meta);
        peers[2]->deliver(net, peers[2]->eng.start_download(meta.hash, {peers[1]->ep}, net.now()));
        pump(net, peers, [&] { return peers[2]->eng.complete(meta.hash); }, 60000);
        CHECK(peers[1]->eng.stats(meta.hash).uploaded <=
              peers[1]->eng.stats(meta.hash).downloaded + meta.info.piece_length);
    }

    SUBCASE("a corrupt source is banned and the download completes elsewhere")
    {
        peers[2]->seed(meta, data, true);
        peers[2]->corrupt = true;
        peers[1]->want(meta);
        peers[1]->deliver(net, peers[1]->eng.start_download(meta.hash, {peers[2]->ep, peers[0]->ep}, net.now()));
        pump(net, peers, [&] { return peers[1]->eng.complete(meta.hash); }, 60000);
        REQUIRE(peers[1]->eng.complete(meta.hash));
        CHECK(peers[1]->assemble(meta) == data);
    }

    SUBCASE("zero ratio seeder never uploads")
    {
        store::settings s;
        s.share_ratio_limit = 0.0;
        peers[0]->eng.set_settings(s);
        peers[1]->want(meta);
        peers[1]->deliver(net, peers[1]->eng.start_download(meta.hash, {peers[0]->ep}, net.now()));
        pump(net, peers, [] { return false; }, 10000);
        CHECK(peers[0]->eng.stats(meta.hash).uploaded == 0);
        CHECK_FALSE(peers[1]->eng.complete(meta.hash));
    }
}

}
