#include "mael/gateway.hpp"

#include <httplib.h>

#include <chrono>
#include <future>
#include <iostream>
#include <thread>

namespace mael::gateway {

int run_daemon(const daemon_options& opts, std::atomic<bool>& stop)
{
    transport::udp_network net;
    node_config cfg;
    cfg.name = "daemon:" + fs::absolute(opts.profile).string();
    cfg.profile_root = opts.profile;
    cfg.bootstrap = opts.bootstrap;
    cfg.settings = opts.settings;
    cfg.endpoint = compact_peer::from_u32(0x7f000001, opts.udp_port);

    node n(net, cfg);
    try {
        n.start();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "node " << n.dht().id().hex() << " on udp " << n.endpoint().to_string() << "\n";

    for (const auto& dir : opts.publish_dirs) {
        try {
            bundle::publish_options po;
            po.name = fs::path(dir).filename().string();
            if (po.name.empty()) po.name = "site";
            auto pub = n.publish(read_site_directory(dir), {}, po);
            torrent::magnet m;
            m.hash = pub.man.base().hash;
            m.display_name = po.name;
            std::cout << m.to_uri() << "\n" << std::flush;
        } catch (const std::exception& e) {
            std::cerr << "error: publishing " << dir << ": " << e.what() << "\n";
        }
    }

    httplib::Server srv;
    std::thread http_thread;
    if (opts.http) {
        auto handler = [&](const httplib::Request& req, httplib::Response& res) {
            auto done = std::make_shared<std::promise<http_response>>();
            auto fut = done->get_future();
            std::string method = req.method, target = req.target;
            net.post([&n, done, method, target] { done->set_value(n.handle_http(method, target)); });
            if (fut.wait_for(std::chrono::seconds(10)) != std::future_status::ready) {
                res.status = 504;
                return;
            }
            auto r = fut.get();
            res.status = r.status;
            std::string type = "application/octet-stream";
            for (const auto& [k, v] : r.headers) {
                if (k == "Content-Type") type = v;
                else res.set_header(k, v);
            }
            res.set_content(r.body, type);
        };
        srv.Get(".*", handler);
        srv.Post(".*", handler);
        srv.Put(".*", handler);
        srv.Delete(".*", handler);
        if (!srv.bind_to_port("127.0.0.1", opts.http_port)) {
            std::cerr << "error: cannot listen on 127.0.0.1:" << opts.http_port << "\n";
            n.stop(true);
            return 1;
        }
        http_thread = std::thread([&] { srv.listen_after_bind(); });
        std::cerr << "http on 127.0.0.1:" << opts.http_port << "\n";
    }

    while (!stop.load()) net.run_until(net.now() + 200);

    if (opts.http) {
        // Keep the loop turning so in-flight handlers can finish.
        auto stopper = std::async(std::launch::async, [&] {
            srv.stop();
            http_thread.join();
        });
        while (stopper.wait_for(std::chrono::milliseconds(0)) != std::future_status::ready)
            net.run_until(net.now() + 20);
    }
    n.close_gateway();
    n.stop(true);
    return 0;
}

}  // namespace mael::gateway
