#pragma once

#include "mael/gateway.hpp"
#include "mael/transport.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace testing {

// Gateway nodes on one simulated network; node i bootstraps from node 0.
class node_sim {
public:
    explicit node_sim(std::size_t n, std::uint64_t seed = 1, mael::transport::sim_config cfg = quiet_config())
        : net_([&] {
              cfg.seed = seed;
              return cfg;
          }())
    {
        for (std::size_t i = 0; i < n; ++i) add();
    }

    static mael::transport::sim_config quiet_config()
    {
        mael::transport::sim_config c;
        c.latency_min_ms = 5;
        c.latency_max_ms = 40;
        return c;
    }

    // Adds a node; it is not started.
    mael::gateway::node& add(std::optional<std::filesystem::path> profile = std::nullopt,
                             std::optional<mael::store::settings> settings = std::nullopt)
    {
        mael::gateway::node_config c;
        auto i = nodes_.size();
        c.name = "n" + std::to_string(i);
        c.endpoint = endpoint(i);
        if (i != 0) c.bootstrap.push_back(endpoint(0));
        c.profile_root = std::move(profile);
        c.settings = std::move(settings);
        configs_.push_back(c);
        nodes_.push_back(std::make_unique<mael::gateway::node>(net_, c));
        return *nodes_.back();
    }

    // Replaces node i with a fresh object over the same configuration.
    mael::gateway::node& recreate(std::size_t i)
    {
        nodes_[i].reset();
        nodes_[i] = std::make_unique<mael::gateway::node>(net_, configs_[i]);
        return *nodes_[i];
    }

    mael::gateway::node_config& config(std::size_t i) { return configs_[i]; }

    static mael::dht::compact_peer endpoint(std::size_t i)
    {
        return mael::dht::compact_peer::from_u32(0x0a000001u + static_cast<std::uint32_t>(i), 6881);
    }

    void start_all()
    {
        for (auto& n : nodes_) {
            n->start();
            run_for(200);
        }
        run_for(3000);
    }

    void run_for(std::int64_t ms) { net_.run_until(net_.now() + ms); }

    // Runs until the job is terminal or the budget is spent.
    const mael::gateway::load_job& wait(std::size_t node, std::uint64_t job, std::int64_t budget_ms = 60000)
    {
        auto& n = *nodes_[node];
        net_.run_until([&] { return n.job(job)->terminal(); }, net_.now() + budget_ms, 50);
        return *n.job(job);
    }

    mael::gateway::node& operator[](std::size_t i) { return *nodes_[i]; }
    std::size_t size() const { return nodes_.size(); }
    mael::transport::sim_network& net() { return net_; }

private:
    mael::transport::sim_network net_;
    std::vector<mael::gateway::node_config> configs_;
    std::vector<std::unique_ptr<mael::gateway::node>> nodes_;
};

}  // namespace testing
