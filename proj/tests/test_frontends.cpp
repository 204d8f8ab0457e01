
#include <chrono>
#include <functional>
#include <set>
#include <thread>

#include "doctest.h"
#include "fixtures.hpp"
#include "line_client.hpp"
#include "simworld/error.hpp"
#include "simworld/server.hpp"

using namespace simworld;

namespace {

std::shared_ptr<const MapData> shared_map() {
    static auto m = fixture::city_map(21, 400);
    return m;
}

json req(std::int64_t id, const std::string& cmd, json args = json::object()) {
    return json{{"id", id}, {"cmd", cmd}, {"args", std::move(args)}};
}

std::string status_of(const json& r) { return r.at("status").get<std::string>(); }
std::string code_of(const json& r) { return r.at("error").at("code").get<std::string>(); }

using testnet::Client;

// A session exercising most of the command set; everything in it is deterministic.
std::vector<json> scripted_requests(const MapData& m) {
    WaypointId spawn = m.fine.nearest(m.coarse.node(0).pos, RouteMode::pedestrian);
    WaypointId far = m.fine.nearest(m.coarse.node(m.coarse.size() - 1).pos, RouteMode::pedestrian);
    std::vector<json> r;
    std::int64_t id = 1;
    r.push_back(req(id++, "world.load", {{"seed", 5}, {"traffic", {{"n_vehicles", 4}, {"n_pedestrians", 6}}}}));
    r.push_back(req(id++, "world.info"));
    r.push_back(req(id++, "agent.register", {{"spawn_waypoint", spawn}}));
    r.push_back(req(id++, "agent.register", {{"embodiment", "robot"}, {"spawn_waypoint", far}}));
    r.push_back(req(id++, "scene.query", {{"mode", "nearest"}, {"category", "building"}}));
    r.push_back(req(id++, "scene.query", {{"mode", "region"}, {"region", {0, 0, 60, 60}}, {"limit", 5}}));
    r.push_back(req(id++, "agent.observe", {{"id", -1}, {"raster", true}}));
    r.push_back(req(id++, "agent.act", {{"id", -1}, {"action", {{"verb", "rotate"}, {"args", {{"theta", 0.5}}}}}}));
    r.push_back(req(id++, "agent.act", {{"id", -1}, {"action", {{"verb", "fly"}}}}));
    r.push_back(req(id++, "agent.plan", {{"id", -2}, {"plan", {{"steps", {{{"verb", "navigate"}, {"args", {{"target", {{"waypoint", spawn}}}}}}}}}}}));
    r.push_back(req(id++, "sim.step", {{"n", 40}}));
    r.push_back(req(id++, "task.status"));
    r.push_back(req(id++, "scene.edit", {{"op", "add"}, {"category", "urban_prop"}, {"tags", {"bench"}}, {"size", {1, 0.5}}}));
    r.push_back(req(id++, "sim.run", {{"mode", "async"}, {"steps", 10}}));
    r.push_back(req(id++, "agent.act", {{"id", -1}, {"action", {{"verb", "step_forward"}}}}));
    r.push_back(req(id++, "sim.step", {{"n", 5}}));
    r.push_back(req(id++, "agent.observe", {{"id", -2}}));
    r.push_back(req(id++, "world.reset"));
    r.push_back(req(id++, "world.info"));
    return r;
}

// Plays a script through `call`; agent ids -1, -2 stand for the first and second registered agents.
std::vector<std::string> play(const std::vector<json>& script, const std::function<std::string(const std::string&)>& call) {
    std::vector<std::int64_t> agents;
    std::vector<std::string> out;
    for (json r : script) {
        auto& a = r["args"];
        if (a.contains("id") && a["id"].get<std::int64_t>() < 0) a["id"] = agents.at(-a["id"].get<std::int64_t>() - 1);
        out.push_back(call(r.dump()));
        json resp = json::parse(out.back());
        if (r["cmd"] == "agent.register" && resp["status"] == "ok") agents.push_back(resp["data"]["id"]);
    }
    return out;
}

}  // namespace

TEST_SUITE("frontends") {

TEST_CASE("line framing") {
    LineFramer f;
    CHECK(f.feed("").empty());
    auto a = f.feed("{\"id\":1}\n{\"id\"");
    REQUIRE(a.size() == 1);
    CHECK(a[0] == "{\"id\":1}");
    CHECK(f.partial() == "{\"id\"");
    auto b = f.feed(":2}\r\n\n");
    REQUIRE(b.size() == 2);
    CHECK(b[0] == "{\"id\":2}");
    CHECK(b[1].empty());

    // Byte-at-a-time feeding yields the same lines as one chunk.
    std::string stream = "a\nbb\r\nccc\n\n dd \n";
    LineFramer whole, bytewise;
    auto w = whole.feed(stream);
    std::vector<std::string> bl;
    for (char c : stream)
        for (auto& l : bytewise.feed(std::string_view(&c, 1))) bl.push_back(l);
    CHECK(w == bl);
    CHECK(w == std::vector<std::string>{"a", "bb", "ccc", "", " dd "});

    LineFramer small(4);
    auto s = small.feed("abcdefghij\n");
    CHECK(s == std::vector<std::string>{"abcd", "efgh", "ij"});
}

TEST_CASE("base64 matches the RFC test vectors") {
    auto enc = [](const std::string& s) { return base64_encode(std::vector<std::uint8_t>(s.begin(), s.end())); };
    CHECK(enc("") == "");
    CHECK(enc("f") == "Zg==");
    CHECK(enc("fo") == "Zm8=");
    CHECK(enc("foo") == "Zm9v");
    CHECK(enc("foob") == "Zm9vYg==");
    CHECK(enc("fooba") == "Zm9vYmE=");
    CHECK(enc("foobar") == "Zm9vYmFy");
    CHECK(base64_encode({0xff, 0x00, 0xfe}) == "/wD+");
}

TEST_CASE("world.info answers ok with the extent and agent count") {
    Session s(shared_map(), 3);
    json r = s.handle_line(R"({"id":1,"cmd":"world.info"})");
    CHECK(r["id"] == 1);
    CHECK(status_of(r) == "ok");
    const AABB& e = shared_map()->city.scene.extent();
    CHECK(r["data"]["extent"] == json::array({e.min_x, e.min_y, e.max_x, e.max_y}));
    CHECK(r["data"]["agents"] == 0);
    s.handle(req(2, "agent.register", {{"spawn_waypoint", shared_map()->fine.nearest({200, 200}, RouteMode::pedestrian)}}));
    CHECK(s.handle(req(3, "world.info"))["data"]["agents"] == 1);
}

TEST_CASE("malformed and invalid requests") {
    Session s(shared_map(), 3);
    for (std::string bad : {"not json", "{", "", "\x01\xff\xfe", "{\"id\":1,\"cmd\":\"world.info\"", "[1,2]", "42",
                            "{\"cmd\":\"world.info\"}", "{\"id\":\"7\",\"cmd\":\"world.info\"}", "{\"id\":1.5,\"cmd\":\"x\"}"}) {
        json r = s.handle_line(bad);
        CAPTURE(bad);
        CHECK(r["id"] == 0);
        CHECK(status_of(r) == "error");
        // Responses always serialise, whatever bytes came in.
        CHECK_NOTHROW((void)r.dump());
    }
    CHECK(code_of(s.handle_line("nope")) == proto_err::MalformedJson);
    CHECK(code_of(s.handle_line("[]")) == proto_err::BadRequest);

    json u = s.handle(req(9, "world.explode"));
    CHECK(u["id"] == 9);
    CHECK(code_of(u) == proto_err::UnknownCommand);
    CHECK(code_of(s.handle(json{{"id", 4}})) == proto_err::BadRequest);
    CHECK(code_of(s.handle(json{{"id", 4}, {"cmd", "world.info"}, {"args", 3}})) == proto_err::BadRequest);
    CHECK(code_of(s.handle(req(5, "agent.observe", {{"id", 12345}}))) == err::UnknownAgent);
    CHECK(code_of(s.handle(req(6, "agent.observe"))) == proto_err::BadRequest);
    CHECK(code_of(s.handle(req(7, "task.start", {{"kind", "dance"}}))) == proto_err::BadRequest);

    Session empty;
    json nw = empty.handle(req(1, "world.info"));
    CHECK(code_of(nw) == proto_err::NoWorld);
    CHECK(code_of(empty.handle(req(2, "world.load", {{"seed", 1}}))) == err::ScenarioInvalid);
}

TEST_CASE("acting on an agent that is executing a plan is refused") {
    for (std::string mode : {"async", "sync"}) {
        CAPTURE(mode);
        Session s(shared_map(), 3);
        const auto& m = *shared_map();
        WaypointId a = m.fine.nearest(m.coarse.node(0).pos, RouteMode::pedestrian);
        WaypointId b = m.fine.nearest(m.coarse.node(m.coarse.size() - 1).pos, RouteMode::pedestrian);
        REQUIRE(status_of(s.handle(req(1, "world.load", {{"seed", 1}, {"mode", mode}}))) == "ok");
        AgentId id = s.handle(req(2, "agent.register", {{"spawn_waypoint", a}}))["data"]["id"];
        json plan = s.handle(req(3, "agent.plan", {{"id", id}, {"text", "go to waypoint " + std::to_string(b)}}));
        REQUIRE(status_of(plan) == "ok");
        CHECK(plan["data"]["status"] == "running");
        json act = s.handle(req(4, "agent.act", {{"id", id}, {"action", {{"verb", "rotate"}, {"args", {{"theta", 1}}}}}}));
        CHECK(status_of(act) == "error");
        CHECK(code_of(act) == err::Busy);
        CHECK(act["id"] == 4);
        // The refused action changed nothing; the plan still advances.
        json st = s.handle(req(5, "sim.step", {{"n", 3}}));
        CHECK(st["data"]["tick"] == 3);
        CHECK(s.handle(req(6, "task.status"))["data"]["programs"][std::to_string(id)]["status"] == "running");
    }
}

TEST_CASE("async: a second action in the same interval is refused with 'busy'") {
    Session s(shared_map(), 3);
    s.handle(req(1, "world.load", {{"seed", 1}, {"mode", "async"}}));
    AgentId id = s.handle(req(2, "agent.register", {{"spawn_waypoint", shared_map()->fine.nearest({200, 200}, RouteMode::pedestrian)}}))["data"]["id"];
    json rot = {{"verb", "rotate"}, {"args", {{"theta", 0.2}}}};
    json first = s.handle(req(3, "agent.act", {{"id", id}, {"action", rot}}));
    REQUIRE(status_of(first) == "ok");
    CHECK(first["data"]["queued"] == true);
    json second = s.handle(req(4, "agent.act", {{"id", id}, {"action", rot}}));
    CHECK(code_of(second) == "busy");
    s.handle(req(5, "sim.step"));
    CHECK(status_of(s.handle(req(6, "agent.act", {{"id", id}, {"action", rot}}))) == "ok");
}

TEST_CASE("sync act executes one tick; deferred actions wait for sim.step") {
    Session s(shared_map(), 3);
    WaypointId a = shared_map()->fine.nearest({200, 200}, RouteMode::pedestrian);
    s.handle(req(1, "world.load", {{"seed", 2}}));
    AgentId id = s.handle(req(2, "agent.register", {{"spawn_waypoint", a}}))["data"]["id"];
    double yaw0 = s.world().agent(id).pose.yaw;
    json r = s.handle(req(3, "agent.act", {{"id", id}, {"action", {{"verb", "rotate"}, {"args", {{"theta", 0.3}}}}}}));
    REQUIRE(status_of(r) == "ok");
    CHECK(r["data"]["tick"] == 1);
    CHECK(r["data"]["feedback"]["outcome"] == "ok");
    CHECK(normalize_angle(s.world().agent(id).pose.yaw - yaw0) == doctest::Approx(0.3));

    json d = s.handle(req(4, "agent.act", {{"id", id}, {"defer", true}, {"action", {{"verb", "rotate"}, {"args", {{"theta", 0.2}}}}}}));
    CHECK(d["data"]["deferred"] == true);
    CHECK(s.world().tick() == 1);
    json again = s.handle(req(5, "agent.act", {{"id", id}, {"defer", true}, {"action", {{"verb", "do_nothing"}}}}));
    CHECK(code_of(again) == err::Busy);
    s.handle(req(6, "sim.step"));
    CHECK(s.world().tick() == 2);
    CHECK(normalize_angle(s.world().agent(id).pose.yaw - yaw0) == doctest::Approx(0.5));
}

TEST_CASE("scripted session transcript is reproducible in-process and over TCP") {
    auto m = shared_map();
    auto script = scripted_requests(*m);
    auto transcript = [&] {
        Session s(m, 3);
        return play(script, [&](const std::string& l) { return s.handle_line(l).dump(); });
    };
    auto first = transcript();
    CHECK(first == transcript());
    std::size_t errors = 0;
    for (const auto& l : first) errors += json::parse(l)["status"] == "error";
    CHECK(errors == 1);  // the unknown verb
    CHECK(json::parse(first[6])["data"]["raster"]["encoding"] == "base64");
    CHECK(json::parse(first.back())["data"]["tick"] == 0);

    Session s(m, 3);
    Server srv(s, ServerConfig{"127.0.0.1", 0, 64});
    int port = srv.start();
    REQUIRE(port > 0);
    {
        Client c(port);
        auto tcp = play(script, [&](const std::string& l) {
            c.send(l + "\n");
            auto resp = c.line();
            REQUIRE(resp.has_value());
            return *resp;
        });
        CHECK(tcp == first);
    }
    srv.stop();
}

TEST_CASE("requests beyond the per-connection queue bound are answered 'overloaded'") {
    Session s(shared_map(), 3);
    Server srv(s, ServerConfig{"127.0.0.1", 0, 64});
    int port = srv.start();
    Client c(port);
    srv.pause();
    const int n = 100;
    std::string batch;
    for (int i = 1; i <= n; ++i) batch += req(i, "world.info").dump() + "\n";
    c.send(batch);
    auto until = std::chrono::steady_clock::now() + std::chrono::seconds(20);
    while (srv.lines_received() < static_cast<std::size_t>(n) && std::chrono::steady_clock::now() < until)
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    REQUIRE(srv.lines_received() == static_cast<std::size_t>(n));
    srv.resume();
    int ok = 0, overloaded = 0;
    std::set<std::int64_t> ids;
    for (int i = 0; i < n; ++i) {
        auto l = c.line();
        REQUIRE(l.has_value());
        json r = json::parse(*l);
        ids.insert(r["id"].get<std::int64_t>());
        if (r["status"] == "ok") ++ok;
        else if (code_of(r) == proto_err::Overloaded) ++overloaded;
    }
    CHECK(ok == 64);
    CHECK(overloaded == n - 64);
    CHECK(ids.size() == static_cast<std::size_t>(n));  // every request answered under its own id
    CHECK(status_of(c.call(req(1000, "world.info"))) == "ok");
    srv.stop();
}

TEST_CASE("fuzzed input: one response per line and the server survives") {
    Session s(shared_map(), 3);
    Server srv(s, ServerConfig{"127.0.0.1", 0, 64});
    int port = srv.start();
    Rng rng(77);
    const std::vector<std::string> cmds{"world.info", "scene.query", "agent.observe", "agent.act", "task.status",
                                        "sim.step", "metrics.export", "bogus.cmd", "scene.edit", "agent.plan"};
    auto junk = [&] {
        std::string s;
        std::size_t n = rng.below(40);
        for (std::size_t i = 0; i < n; ++i) {
            char c = static_cast<char>(rng.below(256));
            s.push_back(c == '\n' ? ' ' : c);
        }
        return s;
    };
    auto line = [&](std::int64_t id) -> std::string {
        switch (rng.below(6)) {
            case 0: return junk();
            case 1: return "{\"id\":" + std::to_string(id) + ",\"cmd\":" + junk();
            case 2: return json{{"id", id}, {"cmd", cmds[rng.below(cmds.size())]}, {"args", json::array()}}.dump();
            default: {
                json args{{"id", static_cast<std::int64_t>(rng.below(3))}, {"n", 1}, {"mode", "point"}, {"at", {rng.uniform(0, 400), rng.uniform(0, 400)}}};
                if (rng.bernoulli(0.3)) args["action"] = {{"verb", rng.bernoulli(0.5) ? "rotate" : junk()}, {"args", {{"theta", 0.1}}}};
                return json{{"id", id}, {"cmd", cmds[rng.below(cmds.size())]}, {"args", args}}.dump(-1, ' ', false, json::error_handler_t::replace);
            }
        }
    };
    const std::size_t total = 100000;
    Client c(port);
    std::size_t got = 0, parsed = 0;
    std::thread writer([&] {
        Client& w = c;
        std::string chunk;
        for (std::size_t i = 0; i < total; ++i) {
            chunk += line(static_cast<std::int64_t>(i + 1)) + "\n";
            if (chunk.size() > 16384) {
                w.send(chunk);
                chunk.clear();
            }
        }
        w.send(chunk);
    });
    while (got < total) {
        auto l = c.line(std::chrono::milliseconds(30000));
        if (!l) break;
        ++got;
        try {
            json r = json::parse(*l);
            parsed += r.contains("id") && r.contains("status");
        } catch (const json::exception&) {
        }
    }
    writer.join();
    CHECK(got == total);
    CHECK(parsed == total);
    CHECK(srv.lines_received() == total);
    Client fresh(port);
    json info = fresh.call(req(1, "world.info"));
    CHECK(status_of(info) == "ok");
    srv.stop();
}

TEST_CASE("a navigation episode driven through the protocol yields physical metrics") {
    auto m = shared_map();
    Session s(m, 3);
    s.handle(req(1, "world.load", {{"seed", 4}}));
    AgentId id = s.handle(req(2, "agent.register", {{"spawn_waypoint", m->fine.nearest({200, 200}, RouteMode::pedestrian)}}))["data"]["id"];
    json start = s.handle(req(3, "task.start", {{"kind", "nav"}, {"id", id}, {"params", {{"difficulty", "easy"}, {"seed", 9}}}}));
    REQUIRE(status_of(start) == "ok");
    NavTask t = NavTask::from_json(start["data"]["task"]);
    Vec2 goal = m->coarse.node(t.goal).pos;
    json plan = s.handle(req(4, "agent.plan", {{"id", id}, {"text", "go to waypoint " + std::to_string(m->fine.nearest(goal, RouteMode::pedestrian))}}));
    REQUIRE(status_of(plan) == "ok");
    for (int i = 0; i < 4000 && s.handle(req(5, "task.status"))["data"]["programs"][std::to_string(id)]["status"] == "running"; ++i)
        s.handle(req(6, "sim.step", {{"n", 10}, {"events", false}}));
    double yaw = s.world().agent(id).pose.yaw;
    s.handle(req(7, "agent.act", {{"id", id}, {"action", {{"verb", "rotate"}, {"args", {{"theta", normalize_angle(t.goal_yaw - yaw)}}}}}}));
    json ev = s.handle(req(8, "agent.act", {{"id", id}, {"action", {{"verb", "evaluate"}}}}));
    REQUIRE(status_of(ev) == "ok");
    CHECK(ev["data"]["feedback"]["data"]["success"] == true);
    json met = s.handle(req(9, "metrics.export", {{"family", "physical"}}));
    REQUIRE(status_of(met) == "ok");
    REQUIRE(met["data"]["records"].size() == 1);
    CHECK(met["data"]["report"]["metrics"]["SR"] == 1.0);
    CHECK(met["data"]["records"][0]["decisions"] == 1);
    CHECK(s.handle(req(10, "task.status"))["data"]["episodes"][0]["done"] == true);
}

TEST_CASE("delivery and search tasks through the protocol") {
    auto m = shared_map();
    Session s(m, 3);
    s.handle(req(1, "world.load", {{"seed", 4}}));
    for (int k = 0; k < 3; ++k)
        s.handle(req(2 + k, "agent.register", {{"spawn_waypoint", m->fine.nearest({100.0 + 60 * k, 200}, RouteMode::pedestrian)}}));
    json d = s.handle(req(10, "task.start", {{"kind", "delivery"}, {"params", {{"hunger_rate", 0.9}}}}));
    REQUIRE(status_of(d) == "ok");
    s.handle(req(11, "sim.step", {{"n", 300}, {"events", false}}));
    json st = s.handle(req(12, "task.status"));
    CHECK(st["data"]["economy"]["orders"].get<std::size_t>() > 0);
    json dm = s.handle(req(13, "metrics.export"));
    REQUIRE(status_of(dm) == "ok");
    CHECK(dm["data"]["family"] == "delivery");
    CHECK(dm["data"]["csv"].get<std::string>().rfind("model,agent_id,profit", 0) == 0);

    json sr = s.handle(req(14, "task.start", {{"kind", "search"}, {"params", {{"seed", 5}}}}));
    REQUIRE(status_of(sr) == "ok");
    REQUIRE(sr["data"]["agents"].size() == 2);
    AgentId r0 = sr["data"]["agents"][0];
    json ev = s.handle(req(15, "agent.act", {{"id", r0}, {"action", {{"verb", "evaluate"}}}}));
    REQUIRE(status_of(ev) == "ok");
    json sm = s.handle(req(16, "metrics.export", {{"family", "search"}}));
    REQUIRE(status_of(sm) == "ok");
    CHECK(sm["data"]["records"].size() == 1);
    CHECK(sm["data"]["report"]["metrics"].contains("CSR"));
}

}  // TEST_SUITE
