#include "mael/cli.hpp"
#include "mael/scenario.hpp"

#include "support.hpp"

#include <doctest.h>
#include <json.hpp>

#include <sstream>

using namespace mael;
namespace fs = std::filesystem;

namespace {

struct outcome {
    int code;
    std::string out;
    std::string err;
};

outcome run(std::vector<std::string> args)
{
    args.insert(args.begin(), "mael");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string scenario_path(const std::string& name) { return (testing::source_root() / "scenarios" / name).string(); }

const char* small = R"(
name = "small"
until_ms = 40000

[network]
seed = 5
nodes = 4
loss = 0.05

[[site]]
name = "s"
seed = 2
files = 3
bytes = 60000

[[action]]
at_ms = 3000
kind = "publish"
node = 1
site = "s"

[[action]]
at_ms = 6000
kind = "load"
nodes = [2, 3]
site = "s"
)";

}  // namespace

TEST_SUITE("scenario") {

TEST_CASE("parse errors")
{
    CHECK_THROWS_AS(scenario::parse("this is not toml ["), scenario::error);
    CHECK_THROWS_AS(scenario::parse("[network]\nnodes = 0\n"), scenario::error);
    CHECK_THROWS_AS(scenario::parse("[[action]]\nat_ms = 1\nkind = \"dance\"\n"), scenario::error);
    CHECK_THROWS_AS(scenario::parse("[network]\nnodes = 2\n[[action]]\nat_ms = 1\nkind = \"stop\"\nnode = 9\n"),
                    scenario::error);
    CHECK_THROWS_AS(scenario::parse("[[action]]\nat_ms = 1\nkind = \"load\"\nnode = 0\nsite = \"missing\"\n"),
                    scenario::error);
}

TEST_CASE("actions are ordered by time")
{
    auto s = scenario::parse(std::string(small) + "\n[[action]]\nat_ms = 1000\nkind = \"stop\"\nnode = 0\n");
    CHECK(s.nodes == 4);
    CHECK(s.network.seed == 5);
    REQUIRE(s.actions.size() == 3);
    CHECK(s.actions[0].kind == scenario::action_kind::stop);
    CHECK(s.actions[2].nodes == std::vector<std::size_t>{2, 3});
}

TEST_CASE("runs are replayable")
{
    auto s = scenario::parse(small);
    auto a = scenario::run(s, {std::nullopt, std::nullopt, true});
    auto b = scenario::run(s, {std::nullopt, std::nullopt, true});
    CHECK(a.transcript == b.transcript);
    CHECK(a.report_json == b.report_json);
    CHECK(a.trace_digest == b.trace_digest);
    CHECK(a.datagrams > 0);
    for (std::size_t i : {2u, 3u}) {
        REQUIRE(a.final_jobs[i]);
        CHECK(a.final_jobs[i]->ph == gateway::phase::ready);
    }
    auto c = scenario::run(s, {std::uint64_t{6}, std::nullopt, false});
    CHECK(c.trace_digest != a.trace_digest);
    CHECK(nlohmann::json::parse(a.report_json)["schema"] == "mael.scenario/1");
}

TEST_CASE("shipped scenarios load")
{
    for (const auto* f : {"fifty_nodes.toml", "visitor_becomes_host.toml", "monitor_churn.toml"})
        CHECK_NOTHROW(scenario::load(scenario_path(f)));
}

}

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2")
{
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    auto r = run({"reconstruct", "/tmp"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--infohash") != std::string::npos);
    CHECK(run({"publish", "/nonexistent-dir"}).code == 2);
    CHECK(run({"monitor", "abc", "--duration", "soon"}).code == 2);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("inspect of a missing directory fails")
{
    auto r = run({"inspect", "/nonexistent"});
    CHECK(r.code == 1);
    CHECK(r.out.empty());
    CHECK_FALSE(r.err.empty());
}

TEST_CASE("publish then inspect")
{
    testing::temp_dir tmp("cli");
    fs::create_directories(tmp / "site");
    store::write_file(tmp / "site" / "index.html", "<h1>cli</h1>");
    store::write_file(tmp / "site" / "about.html", "about");
    auto r = run({"publish", (tmp / "site").string(), "--out", (tmp / "profile").string(), "--name", "clisite"});
    REQUIRE(r.code == 0);
    std::istringstream lines(r.out);
    std::string magnet, hex;
    std::getline(lines, magnet);
    std::getline(lines, hex);
    CHECK(magnet.rfind("magnet:?xt=urn:btih:", 0) == 0);
    auto m = torrent::parse_magnet(magnet);
    CHECK(m.hash.hex() == hex);
    CHECK(fs::exists(tmp / "profile" / (hex + ".torrent")));

    auto before = testing::tree_hash(tmp / "profile");
    auto json_path = (tmp / "report.json").string();
    auto i = run({"inspect", (tmp / "profile").string(), "--json", json_path});
    CHECK(i.code == 0);
    CHECK(i.out.find(hex) != std::string::npos);
    CHECK(testing::tree_hash(tmp / "profile") == before);
    auto doc = nlohmann::json::parse(*store::read_file(json_path));
    CHECK(doc["schema"] == "mael.forensics/1");

    auto out = (tmp / "rebuilt").string();
    CHECK(run({"reconstruct", (tmp / "profile").string(), "--infohash", hex, "--out", out}).code == 0);
    CHECK(*store::read_file(tmp / "rebuilt" / "index.html") == "<h1>cli</h1>");
    CHECK(run({"reconstruct", (tmp / "profile").string(), "--infohash", "zz", "--out", out}).code == 2);
}

TEST_CASE("profile comes from the environment when no flag is given")
{
    testing::temp_dir tmp("clienv");
    fs::create_directories(tmp / "site");
    store::write_file(tmp / "site" / "index.html", "x");
    setenv("MAEL_PROFILE", (tmp / "envprofile").c_str(), 1);
    auto r = run({"publish", (tmp / "site").string()});
    unsetenv("MAEL_PROFILE");
    REQUIRE(r.code == 0);
    auto hex = r.out.substr(r.out.find('\n') + 1, 40);
    CHECK(fs::exists(tmp / "envprofile" / (hex + ".torrent")));
}

TEST_CASE("sim transcripts repeat")
{
    auto path = scenario_path("visitor_becomes_host.toml");
    auto a = run({"sim", "--scenario", path});
    auto b = run({"sim", "--scenario", path});
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(a.out.find("ready") != std::string::npos);
}

TEST_CASE("remnants on an empty tree")
{
    testing::temp_dir tmp("clirem");
    auto r = run({"remnants", tmp.path().string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("no_evidence") != std::string::npos);
}

}
