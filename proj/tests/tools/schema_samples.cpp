// Writes one sample document per JSON schema into the given directory.
#include "mael/forensics.hpp"
#include "mael/monitor.hpp"
#include "mael/scenario.hpp"

#include "node_sim.hpp"
#include "support.hpp"

#include <fstream>
#include <iostream>

using namespace mael;
namespace fs = std::filesystem;

namespace {

void put(const fs::path& p, const std::string& text)
{
    std::ofstream(p, std::ios::binary) << text;
}

}  // namespace

int main(int argc, char** argv)
{
    if (argc != 2) {
        std::cerr << "usage: schema_samples <out-dir>\n";
        return 2;
    }
    fs::path out = argv[1];
    fs::create_directories(out);
    auto work = out / "work";
    fs::remove_all(work);

    testing::node_sim sim(0, 3);
    sim.add();
    sim.add();
    sim.add(work / "visitor");
    sim.add();
    sim.start_all();
    auto pub = sim[1].publish(bundle::generate_demo_site(4, 6, 200000), {100000}, {"sample"});
    auto h = pub.man.base().hash;
    sim.run_for(2000);

    monitor::crawler crawler(sim[3], h, {120000, 30000, 4, 3, 1});
    crawler.start();
    auto id = sim[2].load_site(torrent::magnet{h, {}, {}}.to_uri());
    sim.wait(2, id);
    sim[3].load_site("bittorrent://" + infohash::from_bytes(sha1_bytes("absent")).hex() + "/");
    sim.net().run_until([&] { return crawler.done(); }, sim.net().now() + 200000, 100);
    put(out / "status.json", sim[2].status_json());
    put(out / "status_failed.json", sim[3].status_json());
    put(out / "monitor.json", monitor::to_json(crawler.log(), monitor::report(crawler.log())));
    sim[2].stop();

    auto report = forensics::inspect(work / "visitor");
    put(out / "forensics.json", forensics::to_json(report));
    put(out / "forensics_startpage.json",
        forensics::to_json(forensics::inspect(testing::fixtures() / "startpage")));
    put(out / "reconstruction.json", forensics::reconstruction_json(forensics::reconstruct(work / "visitor", h)));

    store::machine_layout m{work / "machine"};
    store::install(m, 1428624000);
    fs::copy(work / "visitor", m.roaming_dir(), fs::copy_options::recursive | fs::copy_options::overwrite_existing);
    store::uninstall(m, store::uninstall_mode::remove_history);
    put(out / "remnants.json", forensics::to_json(forensics::detect_remnants(work / "machine")));

    auto sc = scenario::load(testing::source_root() / "scenarios" / "monitor_churn.toml");
    put(out / "scenario.json", scenario::run(sc).report_json);
    fs::remove_all(work);
    return 0;
}
