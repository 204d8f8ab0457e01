#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "simworld/error.hpp"
#include "simworld/planner.hpp"

using namespace simworld;

namespace {

Scenario one_agent(std::shared_ptr<const MapData> m, Pose2D pose, Embodiment e = Embodiment::humanoid) {
    Scenario sc;
    sc.map = std::move(m);
    sc.seed = 1;
    AgentSpec s;
    s.embodiment = e;
    s.spawn_pose = pose;
    sc.agents.push_back(s);
    return sc;
}

std::string error_code(const std::function<void()>& f) {
    try {
        f();
    } catch (const SimError& e) {
        return e.code();
    }
    return "";
}

using Adj = std::vector<std::vector<std::pair<std::size_t, std::int64_t>>>;
Adj unblocked_adjacency(const WaypointGraph& g) {
    Adj adj(g.size());
    for (WaypointId u = 0; u < g.size(); ++u) {
        if (!g.traversable(u, RouteMode::pedestrian) || g.blocked(u)) continue;
        for (const Edge& e : g.out(u))
            if (g.traversable(e.to, RouteMode::pedestrian) && !g.blocked(e.to)) adj[u].push_back({e.to, e.length});
    }
    return adj;
}

}  // namespace

TEST_SUITE("action_planner") {

TEST_CASE("parser: worked example and single patterns") {
    HighLevelPlan p = parse_command("go to the nearest chair and sit down");
    REQUIRE(p.steps.size() == 2);
    CHECK(p.steps[0].verb == "navigate");
    CHECK(p.steps[0].args["target"] == json{{"category", "urban_prop"}, {"tag", "chair"}});
    CHECK(p.steps[1].verb == "sit_down");
    CHECK(p.source_text == "go to the nearest chair and sit down");

    REQUIRE(parse_command("wave").steps.size() == 1);
    CHECK(parse_command("wave").steps[0].verb == "wave_hand");

    try {
        parse_command("fly to the moon");
        FAIL("expected UnparseableClause");
    } catch (const SimError& e) {
        CHECK(e.code() == err::UnparseableClause);
        CHECK(std::string(e.what()).find("fly to the moon") != std::string::npos);
    }
    // The offending fragment is named even when other clauses parse.
    try {
        parse_command("wave and juggle three balls");
        FAIL("expected UnparseableClause");
    } catch (const SimError& e) {
        CHECK(std::string(e.what()).find("juggle three balls") != std::string::npos);
    }
    CHECK(error_code([] { parse_command("   "); }) == err::UnparseableClause);
}

TEST_CASE("parser: every documented pattern parses to the expected verbs") {
    const std::vector<std::pair<std::string, std::vector<std::string>>> table{
        {"go to waypoint 12", {"navigate"}},
        {"walk to the closest bench", {"navigate"}},
        {"navigate to (3.5, -2)", {"navigate"}},
        {"Please go to the nearest tree, then wave.", {"navigate", "wave_hand"}},
        {"sit down", {"sit_down"}},
        {"sit on the nearest chair", {"navigate", "sit_down"}},
        {"stand up", {"stand_up"}},
        {"pick up the nearest box", {"pick_up"}},
        {"pick up entity 42", {"pick_up"}},
        {"carry the bin", {"carry"}},
        {"put it down", {"put_down"}},
        {"drop", {"drop"}},
        {"enter the nearest car", {"enter_car"}},
        {"exit the car", {"exit_car"}},
        {"open the door", {"open_door"}},
        {"open the door of the nearest shop", {"open_door"}},
        {"wave hands", {"wave_hand"}},
        {"stop", {"stop"}},
        {"wait", {"do_nothing"}},
        {"turn left then turn right and then turn around", {"rotate", "rotate", "rotate"}},
        {"step forward", {"step_forward"}},
        {"step back", {"step_backward"}},
        {"look up; look down", {"look_up", "look_down"}},
        {"take a photo", {"take_photo"}},
        {"ride the scooter", {"ride_scooter"}},
        {"say hello", {"converse"}},
        {"pick up order 7", {"pick_up_order"}},
        {"deliver order 7", {"deliver_order"}},
        {"share order 3", {"share_order"}},
        {"cancel share order 3", {"cancel_share"}},
        {"go to the meeting point for order 3", {"go_to_meet_point"}},
        {"buy a scooter", {"purchase_scooter"}},
        {"purchase drinks", {"purchase_drinks"}},
        {"adjust speed to 1.5", {"adjust_speed"}},
    };
    for (const auto& [text, verbs] : table) {
        CAPTURE(text);
        HighLevelPlan p = parse_command(text);
        std::vector<std::string> got;
        for (const auto& s : p.steps) got.push_back(s.verb);
        CHECK(got == verbs);
    }
    CHECK(parse_command("turn around").steps[0].args["theta"].get<double>() == -kPi);
    CHECK(parse_command("pick up entity 42").steps[0].args["target"] == json{{"entity", 42}});
}

TEST_CASE("property: parser is total — every input parses or raises UnparseableClause") {
    const std::vector<std::string> words{"go", "to", "the", "nearest", "chair", "and", "then", "sit", "down", "wave",
                                         "pick", "up", "fly", "moon", ",", "(", "1", ")", "order", "#", "bench", "  "};
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        std::string s;
        std::size_t n = 1 + rng.below(8);
        for (std::size_t k = 0; k < n; ++k) s += words[rng.below(words.size())] + (rng.bernoulli(0.8) ? " " : "");
        CAPTURE(s);
        std::string code;
        try {
            HighLevelPlan p = parse_command(s);
            CHECK_FALSE(p.steps.empty());
            CHECK(parse_command(s).to_json() == p.to_json());  // deterministic
        } catch (const SimError& e) {
            code = e.code();
        }
        CHECK((code.empty() || code == err::UnparseableClause));
    }
}

TEST_CASE("plan JSON round trip and structural errors") {
    HighLevelPlan p = parse_command("go to the nearest chair and sit down");
    HighLevelPlan q = HighLevelPlan::from_json(json::parse(p.to_json().dump()));
    CHECK(q.to_json() == p.to_json());
    CHECK(error_code([] { HighLevelPlan::from_json(json{{"steps", json::array()}}); }) == err::UnparseableClause);
    CHECK(error_code([] { HighLevelPlan::from_json(json{{"steps", {{{"args", {}}}}}}); }) == err::UnparseableClause);
    CHECK(error_code([] { TargetSpec::from_json(json{{"entity", 3}, {"waypoint", 4}}); }) == err::UnparseableClause);
}

TEST_CASE("worked example: nearest chair via (0,1), (1,10), (10,10), then sit down") {
    auto m = fixture::planner_example_map();
    World w = World::reset(one_agent(m, {0, 0, 0}));
    AgentId id = w.agents().begin()->first;
    PlanProgram p = expand_rule_based(parse_command("go to the nearest chair and sit down"), w, id);
    std::vector<Vec2> visited;
    for (const Hop& h : p.hops())
        if (h.from != kNone) visited.push_back(m->fine.node(h.to).pos);
    REQUIRE(visited.size() == 3);
    CHECK(visited[0] == Vec2{0, 1});
    CHECK(visited[1] == Vec2{1, 10});
    CHECK(visited[2] == Vec2{10, 10});
    CHECK(p.queue.back().kind == QueueItem::Kind::primitive);
    CHECK(p.queue.back().cmd.verb == "sit_down");
    CHECK(run_program(p, w, 200) == ProgramStatus::done);
    CHECK(w.agent(id).flags.seated);
    CHECK(dist(w.agent(id).pose.pos(), {10, 10}) < 0.5);
    CHECK(p.queue.empty());
}

TEST_CASE("agent already at the target waypoint: sit down compiles to one primitive") {
    auto m = fixture::planner_example_map();
    World w = World::reset(one_agent(m, {10, 10, 0}));
    AgentId id = w.agents().begin()->first;
    PlanProgram p = expand_rule_based(parse_command("sit down"), w, id);
    REQUIRE(p.queue.size() == 1);
    CHECK(p.queue.front().cmd.verb == "sit_down");
    auto c = tick_executor(p, w);
    REQUIRE(c);
    CHECK(c->verb == "sit_down");
    w.step_sync({*c});
    CHECK_FALSE(tick_executor(p, w));
    CHECK(p.done());
    // Empty queue: done, no action.
    PlanProgram empty;
    empty.agent = id;
    CHECK_FALSE(tick_executor(empty, w));
    CHECK(empty.done());
}

TEST_CASE("compiled navigation cost equals A* and Dijkstra on 30 random targets") {
    auto m = fixture::city_map(8, 400);
    const WaypointGraph& g = m->fine;
    Adj adj = unblocked_adjacency(g);
    std::vector<WaypointId> usable;
    for (WaypointId i = 0; i < g.size(); ++i)
        if (g.traversable(i, RouteMode::pedestrian) && !g.blocked(i)) usable.push_back(i);
    Rng rng(77);
    WaypointId s = usable[rng.below(usable.size())];
    World w = World::reset(one_agent(m, {g.node(s).pos.x, g.node(s).pos.y, 0}));
    AgentId id = w.agents().begin()->first;
    for (int q = 0; q < 30; ++q) {
        WaypointId t = usable[rng.below(usable.size())];
        HighLevelPlan plan;
        plan.steps.push_back({"navigate", {{"target", {{"waypoint", t}}}}});
        PlanProgram p = expand_rule_based(plan, w, id);
        Cost total = 0;
        WaypointId prev = kNone;
        for (const Hop& h : p.hops()) {
            if (h.from == kNone) {
                CHECK(h.to == s);
            } else {
                CHECK(h.from == prev);
                auto len = g.edge_length(h.from, h.to);
                REQUIRE(len.has_value());
                total += *len;
            }
            prev = h.to;
        }
        CHECK(prev == t);
        CHECK(total == astar(g, s, t, RouteMode::pedestrian).cost);
        CHECK(total == oracle::dijkstra_i64(adj, s, t));
    }
}

TEST_CASE("unobstructed five-hop program emits exactly its compiled primitives") {
    auto m = fixture::corridor_map(6, 2.0);
    World w = World::reset(one_agent(m, {0, 0, 0}));
    AgentId id = w.agents().begin()->first;
    HighLevelPlan plan;
    plan.steps.push_back({"navigate", {{"target", {{"waypoint", 5}}}}});
    PlanProgram p = expand_rule_based(plan, w, id);
    std::size_t hops = 0;
    for (const Hop& h : p.hops()) hops += h.from != kNone;
    CHECK(hops == 5);
    CHECK(run_program(p, w, 100) == ProgramStatus::done);
    // 5 hops × 2 m at 0.5 m per step, already facing +x: 20 step_forward, no rotations.
    CHECK(p.emitted == 20);
    CHECK(w.agent(id).pose.x == doctest::Approx(10.0));
    CHECK(w.tick() == 20);
}

TEST_CASE("corridor walled mid-run fails as stuck after two replans") {
    auto m = fixture::corridor_map(12, 2.0);
    World w = World::reset(one_agent(m, {0, 0, 0}));
    AgentId id = w.agents().begin()->first;
    HighLevelPlan plan;
    plan.steps.push_back({"navigate", {{"target", {{"waypoint", 11}}}}});
    PlanProgram p = expand_rule_based(plan, w, id);
    for (int t = 0; t < 5; ++t) w.step_sync({*tick_executor(p, w)});
    SceneEntity wall;
    wall.id = 9000;
    wall.category = Category::building;
    wall.footprint = {10.6, -10, 11.4, 10};
    wall.pose = Pose2D(11, 0, 0);
    w.scene().insert(wall);
    int replans_seen = 0, last = 0;
    ProgramStatus st = ProgramStatus::running;
    for (int t = 0; t < 200 && st == ProgramStatus::running; ++t) {
        auto c = tick_executor(p, w);
        if (p.replans != last) { ++replans_seen; last = p.replans; }
        st = p.status;
        if (c) w.step_sync({*c});
    }
    CHECK(st == ProgramStatus::failed);
    CHECK(p.reason == "stuck");
    CHECK(replans_seen == 3);  // two replans, then the third blockage exhausts the budget
    CHECK(w.agent(id).pose.x < 10.6);
}

TEST_CASE("interaction targets: pick up the nearest box from afar") {
    SceneEntity box;
    box.category = Category::urban_prop;
    box.footprint = AABB::centered({230, 209}, 0.2, 0.2);
    box.pose = Pose2D(230, 209, 0);
    box.tags = {"box"};
    auto m = fixture::map_from_net(fixture::plus_net(), {0, 0, 1000, 400}, {box});
    Vec2 start = m->fine.node(m->fine.sidewalks[0][0][3][2]).pos;
    World w = World::reset(one_agent(m, {start.x, start.y, 0}));
    AgentId id = w.agents().begin()->first;
    PlanProgram p = expand_rule_based(parse_command("pick up the nearest box"), w, id);
    CHECK(run_program(p, w, 2000) == ProgramStatus::done);
    REQUIRE(w.agent(id).held.size() == 1);
    CHECK(w.agent(id).held[0].has_tag("box"));
    CHECK(error_code([&] { expand_rule_based(parse_command("go to the nearest restaurant"), w, id); }) ==
          err::TargetNotFound);
}

TEST_CASE("external executor: replay, timeout, invalid choices, unknown endpoint") {
    auto m = fixture::planner_example_map();
    auto sc = one_agent(m, {0, 0, 0});
    // Rule-based reference run.
    World ref = World::reset(sc);
    AgentId id = ref.agents().begin()->first;
    PlanProgram rp = expand_rule_based(parse_command("go to the nearest chair and sit down"), ref, id);
    std::vector<ActionCommand> trace;
    while (auto c = tick_executor(rp, ref)) {
        trace.push_back(*c);
        ref.step_sync({*c});
    }
    REQUIRE(rp.done());

    ExecutorRegistry reg;
    std::size_t cursor = 0;
    reg.add("replay", [&](const Observation&, std::chrono::milliseconds) -> std::optional<ActionCommand> {
        if (cursor == trace.size()) return ActionCommand{0, "done", json::object()};
        return trace[cursor++];
    });
    World w = World::reset(sc);
    PlanProgram xp;
    xp.agent = id;
    attach_external_executor(xp, reg, "replay");
    while (auto c = tick_executor(xp, w)) w.step_sync({*c});
    CHECK(xp.done());
    CHECK(w.state_json() == ref.state_json());

    reg.add("silent", [](const Observation&, std::chrono::milliseconds) { return std::optional<ActionCommand>(); });
    PlanProgram sp;
    sp.agent = id;
    attach_external_executor(sp, reg, "silent", std::chrono::milliseconds(5));
    CHECK_FALSE(tick_executor(sp, w));
    CHECK(sp.status == ProgramStatus::failed);
    CHECK(sp.reason == "executor_timeout");

    int calls = 0;
    reg.add("clumsy", [&](const Observation&, std::chrono::milliseconds) -> std::optional<ActionCommand> {
        if (++calls > 2) return ActionCommand{0, "done", json::object()};
        return ActionCommand{0, calls == 1 ? "throttle" : "juggle", {{"u", 0.5}}};
    });
    PlanProgram cp;
    cp.agent = id;
    attach_external_executor(cp, reg, "clumsy");
    auto c1 = tick_executor(cp, w);
    REQUIRE(c1);
    auto r = w.step_sync({*c1});
    CHECK(r.observations.at(id).feedback.outcome == "invalid");
    CHECK(cp.status == ProgramStatus::running);
    auto c2 = tick_executor(cp, w);  // unknown verb: idles, keeps running
    REQUIRE(c2);
    CHECK(c2->verb == "do_nothing");
    w.step_sync({*c2});
    CHECK_FALSE(tick_executor(cp, w));
    CHECK(cp.done());

    CHECK(error_code([&] { attach_external_executor(cp, reg, "nobody"); }) == err::EndpointUnavailable);
}

}  // TEST_SUITE
