#pragma once

#include "mael/dht.hpp"
#include "mael/transport.hpp"

#include <algorithm>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace testing {

// DHT nodes wired straight onto the simulator, no swarm or store. Every
// find_nodes answer is compared with a linear scan of the responder's table
// and every table is checked after every delivery.
class dht_sim {
public:
    struct stats {
        std::size_t find_nodes_checked = 0;
        std::size_t find_nodes_mismatches = 0;
        std::size_t invariant_checks = 0;
        std::vector<std::string> failures;
    };

    dht_sim(std::size_t n, std::uint64_t seed, mael::transport::sim_config cfg = {}) : net_(with_seed(cfg, seed))
    {
        std::mt19937_64 rng(seed);
        for (std::size_t i = 0; i < n; ++i) {
            mael::bytes raw(20, '\0');
            for (auto& c : raw) c = static_cast<char>(rng() & 0xff);
            auto ep = mael::dht::compact_peer::from_u32(0x0a000000u + static_cast<std::uint32_t>(i + 1), 6881);
            eps_.push_back(ep);
            nodes_.push_back(std::make_unique<mael::dht::dht_node>(mael::dht::node_id::from_bytes(raw), ep,
                                                                    "secret-" + std::to_string(i)));
        }
    }

    void start(std::size_t i, const std::vector<std::size_t>& routers = {},
               mael::dht::dht_node::bootstrap_callback done = {})
    {
        net_.attach(eps_[i], [this, i](const mael::dht::compact_peer& from, mael::bytes_view raw) { deliver(i, from, raw); });
        tick_loop(i);
        if (!routers.empty()) bootstrap(i, routers, std::move(done));
    }

    void bootstrap(std::size_t i, const std::vector<std::size_t>& routers, mael::dht::dht_node::bootstrap_callback done = {})
    {
        std::vector<mael::dht::compact_peer> r;
        for (auto k : routers) r.push_back(eps_[k]);
        send(i, node(i).bootstrap(r, net_.now(), std::move(done)));
    }

    void send(std::size_t i, const std::vector<mael::dht::outgoing>& out)
    {
        for (const auto& o : out) {
            try {
                net_.send(eps_[i], o.to, mael::dht::encode_message(o.msg));
            } catch (const mael::transport::error&) {
            }
        }
    }

    mael::dht::dht_node& node(std::size_t i) { return *nodes_[i]; }
    const mael::dht::compact_peer& endpoint(std::size_t i) const { return eps_[i]; }
    std::size_t size() const { return nodes_.size(); }
    mael::transport::sim_network& net() { return net_; }
    const stats& results() const { return stats_; }

    static std::vector<mael::dht::node_entry> brute_force_closest(const std::vector<mael::dht::node_entry>& all,
                                                                  const mael::dht::node_id& target, std::size_t k)
    {
        auto v = all;
        std::sort(v.begin(), v.end(), [&](const auto& a, const auto& b) {
            return mael::dht::xor_distance(a.id, target) < mael::dht::xor_distance(b.id, target);
        });
        if (v.size() > k) v.resize(k);
        return v;
    }

private:
    static mael::transport::sim_config with_seed(mael::transport::sim_config c, std::uint64_t seed)
    {
        c.seed = seed;
        return c;
    }

    void tick_loop(std::size_t i)
    {
        net_.schedule(500, [this, i] {
            if (!net_.attached(eps_[i])) return;
            send(i, node(i).tick(net_.now()));
            check(i);
            tick_loop(i);
        });
    }

    void check(std::size_t i)
    {
        ++stats_.invariant_checks;
        if (auto bad = node(i).table().check_invariants())
            stats_.failures.push_back("node " + std::to_string(i) + ": " + *bad);
    }

    void deliver(std::size_t i, const mael::dht::compact_peer& from, mael::bytes_view raw)
    {
        mael::dht::message msg;
        try {
            msg = mael::dht::decode_message(raw);
        } catch (const mael::dht::error&) {
            return;
        }
        auto out = node(i).handle_message(from, msg, net_.now());
        if (msg.kind == mael::dht::msg_kind::find_nodes && msg.target) {
            for (const auto& o : out) {
                if (o.to != from || o.msg.kind != mael::dht::msg_kind::response || o.msg.transaction_id != msg.transaction_id)
                    continue;
                ++stats_.find_nodes_checked;
                auto got = mael::dht::decode_nodes(o.msg.nodes);
                auto want = brute_force_closest(node(i).table().entries(), *msg.target, node(i).config().k);
                bool same = got.size() == want.size();
                for (std::size_t k = 0; same && k < got.size(); ++k)
                    same = got[k].id == want[k].id && got[k].peer == want[k].peer;
                if (!same) {
                    ++stats_.find_nodes_mismatches;
                    stats_.failures.push_back("node " + std::to_string(i) + " find_nodes answer differs from the scan");
                }
            }
        }
        check(i);
        send(i, out);
    }

    mael::transport::sim_network net_;
    std::vector<std::unique_ptr<mael::dht::dht_node>> nodes_;
    std::vector<mael::dht::compact_peer> eps_;
    stats stats_;
};

}  // namespace testing
