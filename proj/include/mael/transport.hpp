#pragma once

#include "mael/common.hpp"
#include "mael/compact_peer.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <random>
#include <set>
#include <vector>

namespace mael::transport {

using endpoint = dht::compact_peer;

enum class errc { payload_too_large, unknown_endpoint, bad_config, socket_error };
using error = coded_error<errc>;

using handler = std::function<void(const endpoint& from, bytes_view payload)>;
using timer_id = std::uint64_t;

// Datagram delivery plus a timer service. Handlers and timers for all
// attached endpoints run on the thread that drives run_until.
class network {
public:
    virtual ~network() = default;

    // Binds `ep` and returns the bound endpoint (UDP may pick the port).
    virtual endpoint attach(const endpoint& ep, handler h) = 0;
    virtual void detach(const endpoint& ep) = 0;
    virtual void send(const endpoint& from, const endpoint& to, bytes payload) = 0;

    virtual std::int64_t now() const = 0;           // ms on the network clock
    virtual std::int64_t wall_seconds() const = 0;  // timestamps written to artifacts

    virtual timer_id schedule(std::int64_t delay_ms, std::function<void()> fn) = 0;
    virtual void cancel(timer_id id) = 0;

    // Processes every event due at or before `t`; afterwards now() == t.
    virtual std::size_t run_until(std::int64_t t) = 0;

    virtual std::size_t max_datagram() const = 0;

    // Advances in small steps until `done()` holds or `deadline` passes.
    bool run_until(const std::function<bool()>& done, std::int64_t deadline, std::int64_t step_ms = 50);
};

struct sim_config {
    std::uint64_t seed = 1;
    std::int64_t latency_min_ms = 10;
    std::int64_t latency_max_ms = 10;
    double loss_probability = 0.0;
    std::size_t max_datagram = 1472;
    // Wall-clock second that sim time 0 maps to.
    std::int64_t epoch_seconds = 1428624000;  // 2015-04-10T00:00:00Z

    void validate() const;  // throws error(bad_config)
};

struct delivery_record {
    std::uint64_t seq = 0;
    std::int64_t sent_at = 0;
    std::int64_t deliver_at = 0;
    endpoint from;
    endpoint to;
    std::size_t size = 0;
    bool dropped = false;
    friend bool operator==(const delivery_record&, const delivery_record&) = default;
};

struct pair_counters {
    std::uint64_t sent = 0;
    std::uint64_t delivered = 0;
    std::uint64_t dropped = 0;
};

// Discrete-event datagram simulator. Events are ordered by (time, sequence
// number); the only randomness comes from the seeded generator owned here.
class sim_network : public network {
public:
    using observer = std::function<void(const delivery_record&, bytes_view payload)>;

    explicit sim_network(sim_config cfg);

    endpoint attach(const endpoint& ep, handler h) override;
    void detach(const endpoint& ep) override;
    void send(const endpoint& from, const endpoint& to, bytes payload) override;
    std::int64_t now() const override { return now_; }
    std::int64_t wall_seconds() const override { return cfg_.epoch_seconds + now_ / 1000; }
    timer_id schedule(std::int64_t delay_ms, std::function<void()> fn) override;
    void cancel(timer_id id) override;
    std::size_t run_until(std::int64_t t) override;
    using network::run_until;
    std::size_t max_datagram() const override { return cfg_.max_datagram; }

    // Same as run_until but returns the datagram events processed.
    std::vector<delivery_record> step_until(std::int64_t t);

    const sim_config& config() const { return cfg_; }
    bool attached(const endpoint& ep) const { return handlers_.count(ep) != 0; }
    std::size_t pending_events() const { return queue_.size(); }
    std::uint64_t events_processed() const { return processed_; }
    const std::map<std::pair<endpoint, endpoint>, pair_counters>& counters() const { return counters_; }

    // Sees every datagram at send time (dropped ones included).
    void set_send_observer(observer obs) { on_send_ = std::move(obs); }
    // Sees every datagram at delivery time.
    void set_delivery_observer(observer obs) { on_deliver_ = std::move(obs); }

private:
    struct event {
        std::int64_t at;
        std::uint64_t seq;
        bool operator>(const event& o) const { return at != o.at ? at > o.at : seq > o.seq; }
    };
    struct datagram {
        delivery_record record;
        bytes payload;
    };

    std::int64_t sample_latency();
    bool sample_loss();

    sim_config cfg_;
    std::mt19937_64 rng_;
    std::int64_t now_ = 0;
    std::uint64_t next_seq_ = 0;
    std::uint64_t processed_ = 0;
    std::priority_queue<event, std::vector<event>, std::greater<>> queue_;
    std::map<std::uint64_t, datagram> datagrams_;
    std::map<std::uint64_t, std::function<void()>> timers_;
    std::map<endpoint, handler> handlers_;
    std::set<endpoint> known_;
    std::map<std::pair<endpoint, endpoint>, pair_counters> counters_;
    observer on_send_;
    observer on_deliver_;
};

// Loopback UDP backend. Sockets are bound on 127.0.0.1; a single poll loop
// serves every attached socket, so handlers never run concurrently.
class udp_network : public network {
public:
    explicit udp_network(std::size_t max_datagram = 1472);
    ~udp_network() override;

    endpoint attach(const endpoint& ep, handler h) override;
    void detach(const endpoint& ep) override;
    void send(const endpoint& from, const endpoint& to, bytes payload) override;
    std::int64_t now() const override;
    std::int64_t wall_seconds() const override;
    timer_id schedule(std::int64_t delay_ms, std::function<void()> fn) override;
    void cancel(timer_id id) override;
    std::size_t run_until(std::int64_t t) override;
    using network::run_until;
    std::size_t max_datagram() const override { return max_datagram_; }

    // Thread-safe: queues `fn` to run on the loop thread and wakes it.
    void post(std::function<void()> fn);
    // Thread-safe: makes a blocking run_until return early.
    void interrupt();

private:
    struct timer {
        std::int64_t at;
        std::uint64_t seq;
        bool operator>(const timer& o) const { return at != o.at ? at > o.at : seq > o.seq; }
    };

    std::size_t drain_posted();
    std::size_t fire_timers();

    std::size_t max_datagram_;
    std::int64_t start_ms_;
    std::map<endpoint, std::pair<int, handler>> sockets_;
    std::priority_queue<timer, std::vector<timer>, std::greater<>> timer_queue_;
    std::map<std::uint64_t, std::function<void()>> timers_;
    std::uint64_t next_seq_ = 0;
    int wake_pipe_[2] = {-1, -1};
    std::mutex posted_mutex_;
    std::vector<std::function<void()>> posted_;
    bool interrupted_ = false;
};

}  // namespace mael::transport
