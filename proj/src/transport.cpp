#include "mael/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>

namespace mael::transport {

bool network::run_until(const std::function<bool()>& done, std::int64_t deadline, std::int64_t step_ms)
{
    while (!done()) {
        if (now() >= deadline) return false;
        run_until(std::min(now() + step_ms, deadline));
    }
    return true;
}

void sim_config::validate() const
{
    if (latency_min_ms < 0 || latency_min_ms > latency_max_ms)
        throw error(errc::bad_config, "latency range must satisfy 0 <= min <= max");
    if (!(loss_probability >= 0.0 && loss_probability < 1.0))
        throw error(errc::bad_config, "loss probability must be in [0, 1)");
    if (max_datagram == 0) throw error(errc::bad_config, "max datagram must be positive");
}

sim_network::sim_network(sim_config cfg) : cfg_(cfg), rng_(cfg.seed)
{
    cfg_.validate();
}

endpoint sim_network::attach(const endpoint& ep, handler h)
{
    handlers_[ep] = std::move(h);
    known_.insert(ep);
    return ep;
}

void sim_network::detach(const endpoint& ep)
{
    handlers_.erase(ep);
}

// Plain modulo over the raw 64-bit output: the bias is negligible for
// millisecond ranges and, unlike std::uniform_int_distribution, the mapping
// is identical across standard libraries.
std::int64_t sim_network::sample_latency()
{
    auto span = static_cast<std::uint64_t>(cfg_.latency_max_ms - cfg_.latency_min_ms) + 1;
    return cfg_.latency_min_ms + static_cast<std::int64_t>(rng_() % span);
}

bool sim_network::sample_loss()
{
    double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return u < cfg_.loss_probability;
}

void sim_network::send(const endpoint& from, const endpoint& to, bytes payload)
{
    if (payload.size() > cfg_.max_datagram)
        throw error(errc::payload_too_large, "payload of " + std::to_string(payload.size()) +
                                                 " bytes exceeds max datagram " + std::to_string(cfg_.max_datagram));
    if (!known_.count(to)) throw error(errc::unknown_endpoint, "no simulated node at " + to.to_string());

    delivery_record rec;
    rec.seq = next_seq_++;
    rec.sent_at = now_;
    rec.from = from;
    rec.to = to;
    rec.size = payload.size();
    rec.deliver_at = now_ + sample_latency();
    rec.dropped = sample_loss();

    auto& c = counters_[{from, to}];
    ++c.sent;
    if (on_send_) on_send_(rec, payload);
    if (rec.dropped) {
        ++c.dropped;
        return;
    }
    queue_.push(event{rec.deliver_at, rec.seq});
    datagrams_.emplace(rec.seq, datagram{rec, std::move(payload)});
}

timer_id sim_network::schedule(std::int64_t delay_ms, std::function<void()> fn)
{
    auto seq = next_seq_++;
    queue_.push(event{now_ + std::max<std::int64_t>(0, delay_ms), seq});
    timers_.emplace(seq, std::move(fn));
    return seq;
}

void sim_network::cancel(timer_id id)
{
    timers_.erase(id);
}

std::vector<delivery_record> sim_network::step_until(std::int64_t t)
{
    std::vector<delivery_record> out;
    while (!queue_.empty() && queue_.top().at <= t) {
        event ev = queue_.top();
        queue_.pop();
        now_ = std::max(now_, ev.at);

        if (auto tm = timers_.find(ev.seq); tm != timers_.end()) {
            auto fn = std::move(tm->second);
            timers_.erase(tm);
            ++processed_;
            fn();
            continue;
        }
        auto dg = datagrams_.find(ev.seq);
        if (dg == datagrams_.end()) continue;  // cancelled timer
        datagram d = std::move(dg->second);
        datagrams_.erase(dg);
        ++processed_;

        auto& c = counters_[{d.record.from, d.record.to}];
        auto h = handlers_.find(d.record.to);
        if (h == handlers_.end()) {
            // Recipient went away while the datagram was in flight.
            ++c.dropped;
            d.record.dropped = true;
            out.push_back(d.record);
            continue;
        }
        ++c.delivered;
        out.push_back(d.record);
        if (on_deliver_) on_deliver_(d.record, d.payload);
        // Copy: the handler may detach itself.
        handler fn = h->second;
        fn(d.record.from, d.payload);
    }
    now_ = std::max(now_, t);
    return out;
}

std::size_t sim_network::run_until(std::int64_t t)
{
    auto before = processed_;
    step_until(t);
    return static_cast<std::size_t>(processed_ - before);
}

// --- UDP ---------------------------------------------------------------

namespace {

std::int64_t steady_ms()
{
    using namespace std::chrono;
    return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

sockaddr_in to_sockaddr(const endpoint& ep)
{
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(ep.port);
    sa.sin_addr.s_addr = htonl(ep.ip_u32());
    return sa;
}

endpoint from_sockaddr(const sockaddr_in& sa)
{
    return endpoint::from_u32(ntohl(sa.sin_addr.s_addr), ntohs(sa.sin_port));
}

[[noreturn]] void throw_errno(const std::string& what)
{
    throw error(errc::socket_error, what + ": " + std::strerror(errno));
}

}  // namespace

udp_network::udp_network(std::size_t max_datagram) : max_datagram_(max_datagram), start_ms_(steady_ms())
{
    if (::pipe(wake_pipe_) != 0) throw_errno("pipe");
    for (int fd : wake_pipe_) ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK);
}

udp_network::~udp_network()
{
    for (auto& [ep, s] : sockets_) ::close(s.first);
    for (int fd : wake_pipe_)
        if (fd >= 0) ::close(fd);
}

endpoint udp_network::attach(const endpoint& ep, handler h)
{
    int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd < 0) throw_errno("socket");
    sockaddr_in sa = to_sockaddr(ep);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) {
        int saved = errno;
        ::close(fd);
        errno = saved;
        throw_errno("bind " + ep.to_string());
    }
    socklen_t len = sizeof sa;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK);
    endpoint bound = from_sockaddr(sa);
    sockets_[bound] = {fd, std::move(h)};
    return bound;
}

void udp_network::detach(const endpoint& ep)
{
    auto it = sockets_.find(ep);
    if (it == sockets_.end()) return;
    ::close(it->second.first);
    sockets_.erase(it);
}

void udp_network::send(const endpoint& from, const endpoint& to, bytes payload)
{
    if (payload.size() > max_datagram_)
        throw error(errc::payload_too_large, "payload of " + std::to_string(payload.size()) +
                                                 " bytes exceeds max datagram " + std::to_string(max_datagram_));
    auto it = sockets_.find(from);
    if (it == sockets_.end()) throw error(errc::unknown_endpoint, "no socket bound at " + from.to_string());
    sockaddr_in sa = to_sockaddr(to);
    // Best effort, like the simulator's loss: a failed sendto is a lost datagram.
    (void)::sendto(it->second.first, payload.data(), payload.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
}

std::int64_t udp_network::now() const
{
    return steady_ms() - start_ms_;
}

std::int64_t udp_network::wall_seconds() const
{
    using namespace std::chrono;
    return duration_cast<seconds>(system_clock::now().time_since_epoch()).count();
}

timer_id udp_network::schedule(std::int64_t delay_ms, std::function<void()> fn)
{
    auto seq = next_seq_++;
    timer_queue_.push(timer{now() + std::max<std::int64_t>(0, delay_ms), seq});
    timers_.emplace(seq, std::move(fn));
    return seq;
}

void udp_network::cancel(timer_id id)
{
    timers_.erase(id);
}

void udp_network::post(std::function<void()> fn)
{
    {
        std::lock_guard lock(posted_mutex_);
        posted_.push_back(std::move(fn));
    }
    char b = 1;
    if (::write(wake_pipe_[1], &b, 1) < 0) {
        // Pipe full: the loop is already due to wake.
    }
}

void udp_network::interrupt()
{
    post([this] { interrupted_ = true; });
}

std::size_t udp_network::drain_posted()
{
    char buf[64];
    while (::read(wake_pipe_[0], buf, sizeof buf) > 0) {
    }
    std::vector<std::function<void()>> fns;
    {
        std::lock_guard lock(posted_mutex_);
        fns.swap(posted_);
    }
    for (auto& fn : fns) fn();
    return fns.size();
}

std::size_t udp_network::fire_timers()
{
    std::size_t n = 0;
    auto t = now();
    while (!timer_queue_.empty() && timer_queue_.top().at <= t) {
        auto seq = timer_queue_.top().seq;
        timer_queue_.pop();
        auto it = timers_.find(seq);
        if (it == timers_.end()) continue;
        auto fn = std::move(it->second);
        timers_.erase(it);
        fn();
        ++n;
    }
    return n;
}

std::size_t udp_network::run_until(std::int64_t t)
{
    std::size_t n = 0;
    interrupted_ = false;
    std::vector<char> buf(65536);
    while (!interrupted_) {
        n += fire_timers();
        n += drain_posted();
        auto cur = now();
        if (cur >= t || interrupted_) break;

        std::int64_t wait = t - cur;
        while (!timer_queue_.empty() && !timers_.count(timer_queue_.top().seq)) timer_queue_.pop();
        if (!timer_queue_.empty()) wait = std::min(wait, std::max<std::int64_t>(0, timer_queue_.top().at - cur));

        std::vector<pollfd> fds;
        std::vector<endpoint> eps;
        fds.push_back(pollfd{wake_pipe_[0], POLLIN, 0});
        for (auto& [ep, s] : sockets_) {
            fds.push_back(pollfd{s.first, POLLIN, 0});
            eps.push_back(ep);
        }
        int rc = ::poll(fds.data(), fds.size(), static_cast<int>(std::min<std::int64_t>(wait, 1000)));
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw_errno("poll");
        }
        for (std::size_t i = 1; i < fds.size(); ++i) {
            if (!(fds[i].revents & POLLIN)) continue;
            while (true) {
                // The socket may have been detached by an earlier handler.
                auto it = sockets_.find(eps[i - 1]);
                if (it == sockets_.end()) break;
                sockaddr_in sa{};
                socklen_t len = sizeof sa;
                auto got = ::recvfrom(it->second.first, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&sa),
                                      &len);
                if (got < 0) break;
                handler h = it->second.second;
                h(from_sockaddr(sa), bytes_view(buf.data(), static_cast<std::size_t>(got)));
                ++n;
            }
        }
    }
    return n;
}

}  // namespace mael::transport
