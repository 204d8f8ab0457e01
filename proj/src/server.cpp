#include "simworld/server.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>

#include "simworld/error.hpp"

namespace simworld {

std::vector<std::string> LineFramer::feed(std::string_view bytes) {
    std::vector<std::string> out;
    for (char c : bytes) {
        if (c == '\n') {
            if (!buf_.empty() && buf_.back() == '\r') buf_.pop_back();
            out.push_back(std::move(buf_));
            buf_.clear();
        } else {
            buf_.push_back(c);
            if (buf_.size() >= max_line_) {
                out.push_back(std::move(buf_));
                buf_.clear();
            }
        }
    }
    return out;
}

std::string base64_encode(const std::vector<std::uint8_t>& b) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((b.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < b.size(); i += 3) {
        std::uint32_t v = static_cast<std::uint32_t>(b[i]) << 16;
        if (i + 1 < b.size()) v |= static_cast<std::uint32_t>(b[i + 1]) << 8;
        if (i + 2 < b.size()) v |= b[i + 2];
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(i + 1 < b.size() ? tbl[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < b.size() ? tbl[v & 63] : '=');
    }
    return out;
}

json error_response(std::int64_t id, const std::string& code, const std::string& message) {
    std::string clean = message;  // parser messages may quote raw, non-UTF-8 input bytes
    for (char& ch : clean)
        if (static_cast<unsigned char>(ch) < 0x20 || static_cast<unsigned char>(ch) >= 0x7f) ch = '?';
    return json{{"id", id}, {"status", "error"}, {"error", json{{"code", code}, {"message", clean}}}};
}

// ---------------------------------------------------------------------------
// Session

namespace {

[[noreturn]] void bad(const std::string& msg) { throw SimError(proto_err::BadRequest, msg); }

Vec2 vec_arg(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!v.is_array() || v.size() < 2 || !v[0].is_number() || !v[1].is_number())
        bad(std::string("'") + key + "' must be [x, y]");
    return {v[0].get<double>(), v[1].get<double>()};
}

json extent_json(const AABB& b) { return json::array({b.min_x, b.min_y, b.max_x, b.max_y}); }

AgentSpec spec_from_json(const json& a) {
    AgentSpec s;
    s.embodiment = embodiment_from_string(a.value("embodiment", std::string("humanoid")));
    if (a.contains("spawn_waypoint")) s.spawn_waypoint = a["spawn_waypoint"].get<WaypointId>();
    if (a.contains("spawn")) {
        Vec2 p = vec_arg(a, "spawn");
        double yaw = a["spawn"].size() > 2 ? a["spawn"][2].get<double>() : 0.0;
        s.spawn_pose = Pose2D(p.x, p.y, yaw);
    }
    if (a.contains("vitals")) {
        s.energy = a["vitals"].value("energy", s.energy);
        s.money_cents = std::llround(a["vitals"].value("money", 0.0) * 100.0);
    }
    return s;
}

SceneEditCommand edit_from_json(const json& j) {
    SceneEditCommand c;
    std::string op = j.value("op", std::string("add"));
    if (op == "remove") {
        c.op = SceneEditCommand::Op::remove;
        c.target = j.at("target").get<EntityId>();
        return c;
    }
    if (op != "add") bad("scene.edit op must be add or remove");
    c.category = category_from_string(j.value("category", std::string("urban_prop")));
    for (const auto& t : j.value("tags", json::array())) c.tags.insert(t.get<std::string>());
    if (j.contains("size")) {
        Vec2 s = vec_arg(j, "size");
        c.size_x = s.x;
        c.size_y = s.y;
    }
    c.blocking = j.value("blocking", true);
    c.anchor_category = category_from_string(j.value("anchor_category", std::string("building")));
    if (j.contains("anchor_tag")) c.anchor_tag = j["anchor_tag"].get<std::string>();
    c.offset_distance = j.value("offset", c.offset_distance);
    if (j.contains("near")) c.near = vec_arg(j, "near");
    return c;
}

}  // namespace

Session::Session(std::shared_ptr<const MapData> default_map, std::uint64_t seed)
    : default_map_(std::move(default_map)), default_seed_(seed) {
    if (default_map_) {
        Scenario sc;
        sc.map = default_map_;
        sc.seed = seed;
        scenario_json_ = json{{"seed", seed}};
        install(sc);
    }
}

Session::~Session() = default;

World& Session::world() {
    if (!world_) fail(proto_err::NoWorld, "no world loaded; send world.load first");
    return *world_;
}

json Session::handle_line(const std::string& line) {
    json req;
    try {
        req = json::parse(line);
    } catch (const json::exception& e) {
        return error_response(0, proto_err::MalformedJson, e.what());
    }
    return handle(req);
}

json Session::handle(const json& req) {
    if (!req.is_object()) return error_response(0, proto_err::BadRequest, "request must be a JSON object");
    if (!req.contains("id") || !req["id"].is_number_integer())
        return error_response(0, proto_err::BadRequest, "request needs an integer id");
    std::int64_t id = req["id"].get<std::int64_t>();
    if (!req.contains("cmd") || !req["cmd"].is_string()) return error_response(id, proto_err::BadRequest, "missing cmd");
    json args = req.value("args", json::object());
    if (!args.is_object()) return error_response(id, proto_err::BadRequest, "args must be an object");
    try {
        json data = dispatch(req["cmd"].get<std::string>(), args);
        return json{{"id", id}, {"status", "ok"}, {"data", std::move(data)}};
    } catch (const SimError& e) {
        return error_response(id, e.code(), e.what());
    } catch (const json::exception& e) {
        return error_response(id, proto_err::BadRequest, e.what());
    } catch (const std::exception& e) {
        return error_response(id, "Internal", e.what());
    }
}

json Session::dispatch(const std::string& cmd, const json& args) {
    if (cmd == "world.load") return cmd_load(args);
    if (cmd == "world.reset") return cmd_reset();
    if (cmd == "world.info") return cmd_info();
    if (cmd == "scene.query") return cmd_scene_query(args);
    if (cmd == "scene.edit") return cmd_scene_edit(args);
    if (cmd == "agent.register") return cmd_register(args);
    if (cmd == "agent.observe") return cmd_observe(args);
    if (cmd == "agent.act") return cmd_act(args);
    if (cmd == "agent.plan") return cmd_plan(args);
    if (cmd == "task.start") return cmd_task_start(args);
    if (cmd == "task.status") return cmd_task_status();
    if (cmd == "metrics.export") return cmd_metrics(args);
    if (cmd == "sim.step") return cmd_step(args);
    if (cmd == "sim.run") return cmd_run(args);
    fail(proto_err::UnknownCommand, "unknown command '" + cmd + "'");
}

void Session::install(const Scenario& sc) {
    programs_.clear();  // programs point at the economy's extensions
    economy_.reset();
    deferred_.clear();
    episodes_.clear();
    search_.reset();
    search_agents_.clear();
    search_result_.reset();
    wall_interval_.reset();
    scenario_ = sc;
    world_ = std::make_unique<World>(World::reset(sc));
    buffer_ = std::make_unique<AsyncBuffer>();
    mode_ = sc.mode;
    world_->set_evaluator([this](World& w, AgentId id) -> json {
        for (const auto& e : episodes_)
            if (!e.done && e.agent == id) {
                Vec2 goal = w.map().coarse.node(e.task.goal).pos;
                return make_nav_evaluator(goal, e.task.goal_yaw)(w, id);
            }
        for (std::size_t k = 0; k < search_agents_.size(); ++k)
            if (search_agents_[k] == id) return make_search_evaluator(search_agents_[1 - k])(w, id);
        fail(err::InvalidTarget, "agent " + std::to_string(id) + " has no task to evaluate");
    });
}

json Session::cmd_load(const json& args) {
    json j = args.contains("scenario") ? args["scenario"] : args;
    bool has_map = j.contains("map") || j.contains("map_ref");
    if (!has_map && !default_map_) fail(err::ScenarioInvalid, "scenario needs 'map' or 'map_ref'");
    Scenario sc = Scenario::from_json(j, has_map ? nullptr : default_map_);
    scenario_json_ = j;
    install(sc);
    return cmd_info();
}

json Session::cmd_reset() {
    if (!world_) fail(proto_err::NoWorld, "no world loaded");
    install(scenario_);
    return cmd_info();
}

json Session::cmd_info() const {
    if (!world_) fail(proto_err::NoWorld, "no world loaded");
    json ids = json::array();
    for (const auto& [id, a] : world_->agents()) ids.push_back(id);
    return json{{"extent", extent_json(world_->scene().extent())},
                {"tick", world_->tick()},
                {"agents", world_->agents().size()},
                {"agent_ids", ids},
                {"mode", mode_},
                {"seed", scenario_.seed},
                {"segments", world_->map().city.roads.segments.size()},
                {"entities", world_->scene().size()},
                {"vehicles", world_->traffic().vehicles.size()},
                {"pedestrians", world_->traffic().pedestrians.size()}};
}

AgentId Session::agent_arg(const json& args) const {
    if (!args.contains("id") || !args["id"].is_number_integer()) bad("missing integer agent 'id'");
    AgentId id = args["id"].get<AgentId>();
    world_->agent(id);  // UnknownAgent
    return id;
}

json Session::cmd_scene_query(const json& args) const {
    if (!world_) fail(proto_err::NoWorld, "no world loaded");
    const SceneGraph& s = world_->scene();
    std::string mode = args.value("mode", std::string("nearest"));
    if (mode == "nearest") {
        Vec2 from = args.contains("from") ? vec_arg(args, "from") : s.extent().center();
        std::optional<std::string> tag;
        if (args.contains("tag")) tag = args["tag"].get<std::string>();
        Category c = category_from_string(args.value("category", std::string("building")));
        return entity_to_json(s.nearest(from, c, tag));
    }
    std::vector<EntityId> ids;
    if (mode == "region") {
        const json& r = args.at("region");
        if (!r.is_array() || r.size() != 4) bad("region must be [min_x, min_y, max_x, max_y]");
        ids = s.query_region({r[0].get<double>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>()});
    } else if (mode == "point") {
        ids = s.query_point(vec_arg(args, "at"));
    } else {
        bad("scene.query mode must be nearest, region or point");
    }
    std::size_t limit = args.value("limit", std::size_t{1000});
    json out = json::array();
    for (std::size_t i = 0; i < ids.size() && i < limit; ++i) out.push_back(entity_to_json(s.at(ids[i])));
    return json{{"count", ids.size()}, {"entities", out}};
}

json Session::cmd_scene_edit(const json& args) {
    EntityId id = world().scene().edit(edit_from_json(args));
    json out{{"id", id}};
    if (const SceneEntity* e = world_->scene().find(id)) out["entity"] = entity_to_json(*e);
    return out;
}

json Session::cmd_register(const json& args) {
    AgentId id = world().add_agent(spec_from_json(args));
    if (economy_ && world_->agent(id).embodiment != Embodiment::vehicle) economy_->register_agent(*world_, id);
    return json{{"id", id}, {"state", world_->agent(id).to_json()}};
}

json Session::cmd_observe(const json& args) {
    world();
    AgentId id = agent_arg(args);
    bool raster = args.value("raster", false);
    Observation o = world_->observe(id, raster);
    json j = o.to_json(false);
    if (raster)
        j["raster"] = json{{"w", o.raster_w}, {"h", o.raster_h}, {"encoding", "base64"}, {"data", base64_encode(o.raster)}};
    return j;
}

json Session::cmd_act(const json& args) {
    world();
    AgentId id = agent_arg(args);
    const json& a = args.contains("action") ? args["action"] : args;
    ActionCommand c;
    c.agent = id;
    if (!a.contains("verb") || !a["verb"].is_string()) bad("action needs a verb");
    c.verb = a["verb"].get<std::string>();
    c.args = a.value("args", json::object());
    validate_action(c);
    auto prog = programs_.find(id);
    if (prog != programs_.end() && prog->second.status == ProgramStatus::running)
        fail(err::Busy, "agent " + std::to_string(id) + " is executing a plan");
    if (mode_ == "async") {
        buffer_->submit(c);
        return json{{"queued", true}, {"tick", world_->tick()}};
    }
    if (deferred_.count(id)) fail(err::Busy, "agent " + std::to_string(id) + " already has an action queued");
    deferred_[id] = c;
    if (args.value("defer", false)) return json{{"deferred", true}, {"tick", world_->tick()}};
    tick_once();
    return json{{"tick", world_->tick()}, {"feedback", world_->agent(id).last.to_json()}};
}

json Session::cmd_plan(const json& args) {
    world();
    AgentId id = agent_arg(args);
    HighLevelPlan plan;
    if (args.contains("text")) plan = parse_command(args["text"].get<std::string>());
    else if (args.contains("plan")) plan = HighLevelPlan::from_json(args["plan"]);
    else bad("agent.plan needs 'text' or 'plan'");
    PlanProgram p = expand_rule_based(plan, *world_, id, economy_ ? &economy_->extensions() : nullptr);
    std::size_t hops = p.hops().size();
    for (auto& e : episodes_)
        if (!e.done && e.agent == id) {
            ++e.decisions;
            e.fine_waypoints += hops;
        }
    json out{{"agent", id}, {"status", to_string(p.status)}, {"plan", plan.to_json()}, {"hops", hops}};
    programs_[id] = std::move(p);
    return out;
}

json Session::cmd_task_start(const json& args) {
    World& w = world();
    std::string kind = args.value("kind", std::string());
    json params = args.value("params", json::object());
    const MapData& map = w.map();
    if (kind == "nav") {
        AgentId id = agent_arg(args);
        NavTask task;
        if (args.contains("task")) {
            task = NavTask::from_json(args["task"]);
            if (task.start >= map.coarse.size() || task.goal >= map.coarse.size()) bad("task waypoints out of range");
        } else {
            Rng rng(params.value("seed", scenario_.seed));
            if (params.value("multimodal", false)) {
                task = gen_multimodal_task(map, episodes_.size(), rng);
            } else {
                Difficulty d = difficulty_from_string(params.value("difficulty", std::string("easy")));
                for (const auto& t : gen_physical_tasks(map, 1, rng))
                    if (t.difficulty == d) task = t;
                task.id = episodes_.size();
            }
        }
        for (const auto& e : episodes_)
            if (!e.done && e.agent == id) fail(err::Busy, "agent already has a navigation task");
        if (params.value("place", true)) {
            WaypointId wp = map.fine.nearest(map.coarse.node(task.start).pos, RouteMode::pedestrian);
            if (wp == kNone) fail(err::InfeasibleMap, "no walkable spawn near the task start");
            Vec2 p = map.fine.node(wp).pos;
            w.agent_mut(id).pose = Pose2D(p.x, p.y, w.agent(id).pose.yaw);
        }
        NavEpisode e;
        e.task = task;
        e.agent = id;
        e.start_tick = w.tick();
        e.d0 = manhattan(w.agent(id).pose.pos(), map.coarse.node(task.goal).pos);
        episodes_.push_back(std::move(e));
        return json{{"episode", episodes_.size() - 1}, {"task", task.to_json()}};
    }
    if (kind == "delivery") {
        EconomyConfig cfg = EconomyConfig::from_json(params);
        programs_.clear();
        economy_ = std::make_unique<Economy>(w, cfg, params.value("seed", scenario_.seed));
        for (const auto& [id, a] : w.agents())
            if (a.embodiment != Embodiment::vehicle) economy_->register_agent(w, id);
        return json{{"restaurants", economy_->restaurants()}, {"config", cfg.to_json()}};
    }
    if (kind == "search") {
        Rng rng(params.value("seed", scenario_.seed));
        search_ = gen_search_task(map, params.value("landmarks_per_street", std::size_t{2}), rng);
        search_agents_.clear();
        for (int k = 0; k < 2; ++k) {
            AgentSpec s;
            s.embodiment = Embodiment::robot;
            s.spawn_waypoint = search_->spawns[k];
            search_agents_.push_back(w.add_agent(s));
        }
        search_start_ = w.tick();
        search_D0_ = manhattan(w.agent(search_agents_[0]).pose.pos(), w.agent(search_agents_[1]).pose.pos());
        search_result_.reset();
        return json{{"task", search_->to_json()}, {"agents", search_agents_}};
    }
    bad("task kind must be nav, delivery or search");
}

json Session::cmd_task_status() const {
    if (!world_) fail(proto_err::NoWorld, "no world loaded");
    json progs = json::object();
    for (const auto& [id, p] : programs_)
        progs[std::to_string(id)] = json{{"status", to_string(p.status)}, {"reason", p.reason}, {"hops_left", p.hops().size()}};
    json eps = json::array();
    for (std::size_t i = 0; i < episodes_.size(); ++i) {
        const auto& e = episodes_[i];
        eps.push_back(json{{"episode", i},
                           {"agent", e.agent},
                           {"done", e.done},
                           {"success", e.success},
                           {"stuck", e.is_stuck},
                           {"subtasks_completed", e.completed},
                           {"subtasks_total", e.task.subtasks.size()}});
    }
    json out{{"tick", world_->tick()}, {"mode", mode_}, {"programs", progs}, {"episodes", eps}};
    if (economy_) {
        std::map<std::string, int> by_state;
        for (const auto& o : economy_->orders()) ++by_state[to_string(o.state)];
        out["economy"] = json{{"orders", economy_->orders().size()}, {"by_state", by_state}, {"auctions", economy_->auctions().size()}};
    }
    if (search_)
        out["search"] = json{{"agents", search_agents_},
                             {"result", search_result_ ? json(*search_result_) : json(nullptr)}};
    return out;
}

std::vector<EpisodeRecord> Session::episode_records() const {
    std::vector<EpisodeRecord> out;
    for (const auto& e : episodes_) {
        if (!e.done) continue;
        EpisodeRecord r;
        r.task_id = std::string(to_string(e.task.difficulty)) + "-" + std::to_string(e.task.id);
        r.success = e.success;
        r.subtasks_total = e.task.subtasks.size();
        r.subtasks_completed = std::min(e.completed, r.subtasks_total);
        r.d0 = e.d0;
        r.dT = e.dT;
        LogCounts c = counts_from_log(world_->log(), e.agent, e.start_tick, e.end_tick == 0 ? 0 : e.end_tick - 1);
        r.collisions_static = c.collisions_static;
        r.collisions_dynamic = c.collisions_dynamic;
        r.red_light = c.red_light;
        r.decisions = e.decisions;
        r.fine_waypoints = e.fine_waypoints;
        r.stuck = e.is_stuck;
        r.ticks_used = e.end_tick - e.start_tick;
        out.push_back(r);
    }
    return out;
}

json Session::cmd_metrics(const json& args) const {
    if (!world_) fail(proto_err::NoWorld, "no world loaded");
    std::string family = args.value("family", std::string(economy_ ? "delivery" : "physical"));
    if (family == "delivery") {
        if (!economy_) fail(err::WrongState, "no delivery task running");
        MetricsReport rep = compute_delivery_metrics(*world_, economy_->ledger());
        return json{{"family", family}, {"report", rep.to_json()}, {"csv", rep.to_csv(args.value("model", std::string("client")))}};
    }
    MetricFamily f = metric_family_from_string(family);
    std::vector<EpisodeRecord> recs;
    if (f == MetricFamily::search) {
        if (!search_) fail(err::WrongState, "no search task running");
        EpisodeRecord r;
        r.task_id = "search";
        r.success = search_result_.value_or(false);
        r.D0 = search_D0_;
        r.DT = manhattan(world_->agent(search_agents_[0]).pose.pos(), world_->agent(search_agents_[1]).pose.pos());
        r.ticks_used = world_->tick() - search_start_;
        recs.push_back(r);
    } else {
        recs = episode_records();
    }
    json rj = json::array();
    for (const auto& r : recs) rj.push_back(r.to_json());
    if (recs.empty()) return json{{"family", family}, {"records", rj}, {"report", nullptr}, {"csv", ""}};
    MetricsSummary m = compute_metrics(recs, f);
    return json{{"family", family}, {"records", rj}, {"report", m.to_json()}, {"csv", m.to_csv()}};
}

std::vector<EventRecord> Session::tick_once() {
    World& w = *world_;
    if (economy_) economy_->begin_tick(w);
    std::vector<ActionCommand> executed;
    StepResult r;
    if (mode_ == "sync") {
        for (const auto& [id, a] : w.agents()) {
            auto d = deferred_.find(id);
            std::optional<ActionCommand> c;
            if (d != deferred_.end()) {
                c = d->second;
            } else if (auto p = programs_.find(id); p != programs_.end()) {
                c = tick_executor(p->second, w);
            }
            executed.push_back(c ? *c : ActionCommand{id, "do_nothing", json::object()});
        }
        deferred_.clear();
        r = w.step_sync(executed);
    } else {
        for (auto& [id, p] : programs_) {
            if (p.status != ProgramStatus::running || !buffer_->available(id) || !w.agents().count(id)) continue;
            if (auto c = tick_executor(p, w)) {
                try {
                    buffer_->submit(*c);
                } catch (const SimError&) {
                    // already holds a client action this interval
                }
            }
        }
        executed = buffer_->drain();
        r = w.step_partial(executed);
        for (const auto& [id, a] : w.agents()) buffer_->set_available(id, w.tick() >= a.busy_until);
    }
    if (economy_) economy_->end_tick(w);
    after_tick(executed);
    return r.events;
}

void Session::after_tick(const std::vector<ActionCommand>& executed) {
    World& w = *world_;
    auto evaluated = [&](AgentId id) {
        for (const auto& c : executed)
            if (c.agent == id && c.verb == "evaluate") return true;
        return false;
    };
    for (auto& e : episodes_) {
        if (e.done || !w.agents().count(e.agent)) continue;
        const AgentState& a = w.agent(e.agent);
        const WaypointGraph& g = w.map().coarse;
        bool completed_now = false;
        while (e.next_subtask + 1 < e.task.subtasks.size()) {  // reach_destination is judged by evaluate
            const SubTask& s = e.task.subtasks[e.next_subtask];
            bool facing = std::abs(normalize_angle(a.pose.yaw - s.yaw)) <= kPi / 6;
            bool near = dist(a.pose.pos(), g.node(s.goal).pos) <= 3;
            bool ok = s.kind == SubTaskKind::orientation_alignment ? facing
                      : s.kind == SubTaskKind::turning_at_intersection ? near && facing
                                                                        : near;
            if (!ok) break;
            ++e.next_subtask;
            ++e.completed;
            completed_now = true;
        }
        bool finish = false;
        if (evaluated(e.agent)) {
            e.success = a.last.outcome == "ok" && a.last.data.value("success", false);
            if (e.success && !e.task.subtasks.empty()) e.completed = e.task.subtasks.size();
            finish = true;
        }
        if (e.stuck.push({w.tick(), a.pose.pos(), completed_now}) && !finish) {
            e.is_stuck = true;
            finish = true;
        }
        if (w.tick() - e.start_tick >= e.task.time_limit) finish = true;
        if (finish) {
            e.done = true;
            e.dT = manhattan(a.pose.pos(), g.node(e.task.goal).pos);
            e.end_tick = w.tick();
        }
    }
    for (std::size_t k = 0; k < search_agents_.size() && !search_result_; ++k)
        if (evaluated(search_agents_[k])) {
            const AgentState& a = w.agent(search_agents_[k]);
            search_result_ = a.last.outcome == "ok" && a.last.data.value("success", false);
        }
}

json Session::cmd_step(const json& args) {
    world();
    std::int64_t n = args.value("n", std::int64_t{1});
    if (n < 1 || n > 1000000) bad("n must be in [1, 1000000]");
    json events = json::array();
    bool want_events = args.value("events", true);
    for (std::int64_t i = 0; i < n; ++i)
        for (const auto& e : tick_once())
            if (want_events) events.push_back(e.to_json());
    return json{{"tick", world_->tick()}, {"events", events}};
}

void Session::async_interval() {
    if (!world_) return;
    double dt = world_->traffic().config.dt;
    double interval = scenario_.env.async_interval;
    long per = std::max(1L, std::lround(interval / dt));
    for (long k = 0; k < per; ++k) tick_once();
}

json Session::cmd_run(const json& args) {
    world();
    std::string mode = args.value("mode", mode_);
    if (mode != "sync" && mode != "async") bad("mode must be sync or async");
    if (mode != mode_) {
        deferred_.clear();
        buffer_ = std::make_unique<AsyncBuffer>();
        mode_ = mode;
    }
    if (args.contains("interval")) {
        double iv = args["interval"].get<double>();
        if (!(iv > 0)) bad("interval must be > 0");
        scenario_.env.async_interval = iv;
    }
    wall_interval_.reset();
    if (args.value("wall_clock", false)) {
        if (mode_ != "async") bad("wall_clock pacing needs async mode");
        wall_interval_ = scenario_.env.async_interval;
    }
    if (args.contains("steps")) {
        std::int64_t n = args["steps"].get<std::int64_t>();
        if (n < 0 || n > 1000000) bad("steps must be in [0, 1000000]");
        for (std::int64_t i = 0; i < n; ++i) tick_once();
    }
    if (args.contains("duration")) {
        double d = args["duration"].get<double>();
        if (!(d >= 0)) bad("duration must be >= 0");
        long intervals = std::lround(d / scenario_.env.async_interval);
        for (long i = 0; i < intervals; ++i) async_interval();
    }
    return json{{"mode", mode_}, {"tick", world_->tick()}, {"wall_clock", wall_interval_.has_value()}};
}

// ---------------------------------------------------------------------------
// Server

struct Server::Conn {
    int fd = -1;
    std::mutex write_mu;
    std::atomic<std::size_t> pending{0};
    std::atomic<bool> closed{false};
    ~Conn() {
        if (fd >= 0) ::close(fd);
    }
};

Server::Server(Session& session, ServerConfig cfg) : session_(session), cfg_(std::move(cfg)) {}

Server::~Server() { stop(); }

int Server::start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) fail(err::ConfigInvalid, std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(cfg_.port));
    if (::inet_pton(AF_INET, cfg_.bind.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        fail(err::ConfigInvalid, "bad bind address '" + cfg_.bind + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 64) < 0) {
        std::string why = std::strerror(errno);
        ::close(listen_fd_);
        listen_fd_ = -1;
        fail(err::ConfigInvalid, "cannot listen on " + cfg_.bind + ":" + std::to_string(cfg_.port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    executor_ = std::thread([this] { exec_loop(); });
    return ntohs(addr.sin_port);
}

void Server::stop() {
    if (!running_.exchange(false)) return;
    q_cv_.notify_all();
    if (acceptor_.joinable()) acceptor_.join();
    if (executor_.joinable()) executor_.join();
    {
        std::lock_guard lk(conns_mu_);
        for (auto& r : readers_) ::shutdown(r.first->fd, SHUT_RDWR);
    }
    for (auto& r : readers_) r.second.join();
    readers_.clear();
    queue_.clear();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
    stop_cv_.notify_all();
}

void Server::wait() {
    std::unique_lock lk(stop_mu_);
    stop_cv_.wait(lk, [this] { return !running_.load(); });
}

void Server::pause() {
    std::lock_guard lk(q_mu_);
    paused_ = true;
}

void Server::resume() {
    {
        std::lock_guard lk(q_mu_);
        paused_ = false;
    }
    q_cv_.notify_all();
}

void Server::accept_loop() {
    while (running_) {
        {
            // Reap finished readers; a connection's fd closes once its last queued job is answered.
            std::lock_guard lk(conns_mu_);
            for (auto it = readers_.begin(); it != readers_.end();) {
                if (!it->first->closed) {
                    ++it;
                    continue;
                }
                it->second.join();
                it = readers_.erase(it);
            }
        }
        pollfd p{listen_fd_, POLLIN, 0};
        if (::poll(&p, 1, 50) <= 0) continue;
        int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        auto c = std::make_shared<Conn>();
        c->fd = fd;
        std::lock_guard lk(conns_mu_);
        readers_.emplace_back(c, std::thread([this, c] { read_loop(c); }));
    }
}

void Server::send_line(Conn& c, const std::string& s) {
    std::lock_guard lk(c.write_mu);
    std::string out = s + "\n";
    std::size_t off = 0;
    while (off < out.size()) {
        ssize_t n = ::send(c.fd, out.data() + off, out.size() - off, MSG_NOSIGNAL);
        if (n <= 0) {
            if (n < 0 && errno == EINTR) continue;
            return;  // peer gone; its agents persist
        }
        off += static_cast<std::size_t>(n);
    }
}

void Server::read_loop(std::shared_ptr<Conn> c) {
    LineFramer framer;
    char buf[8192];
    while (running_) {
        ssize_t n = ::recv(c->fd, buf, sizeof buf, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        for (std::string& line : framer.feed(std::string_view(buf, static_cast<std::size_t>(n)))) {
            ++received_;
            if (c->pending.load() >= cfg_.max_pending) {
                std::int64_t id = 0;
                try {
                    json j = json::parse(line);
                    if (j.is_object() && j.contains("id") && j["id"].is_number_integer()) id = j["id"].get<std::int64_t>();
                } catch (const json::exception&) {
                }
                send_line(*c, error_response(id, proto_err::Overloaded, "too many pending requests on this connection").dump());
                continue;
            }
            ++c->pending;
            {
                std::lock_guard lk(q_mu_);
                queue_.push_back({c, std::move(line)});
            }
            q_cv_.notify_one();
        }
    }
    c->closed = true;
}

void Server::exec_loop() {
    using clock = std::chrono::steady_clock;
    auto next_tick = clock::now();
    while (running_) {
        std::unique_lock lk(q_mu_);
        auto iv = session_.wall_clock_interval();
        auto ready = [&] { return !running_ || (!paused_ && !queue_.empty()); };
        if (iv) {
            q_cv_.wait_until(lk, next_tick, ready);
        } else {
            q_cv_.wait_for(lk, std::chrono::milliseconds(100), ready);
            next_tick = clock::now();
        }
        if (!running_) break;
        if (iv && clock::now() >= next_tick) {  // a due tick goes ahead of queued requests
            lk.unlock();
            session_.async_interval();
            next_tick += std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(*iv));
            next_tick = std::max(next_tick, clock::now() - std::chrono::milliseconds(100));  // no unbounded catch-up
            continue;
        }
        if (!paused_ && !queue_.empty()) {
            Job job = std::move(queue_.front());
            queue_.pop_front();
            lk.unlock();
            json resp = session_.handle_line(job.line);
            send_line(*job.conn, resp.dump(-1, ' ', false, json::error_handler_t::replace));
            --job.conn->pending;
            continue;
        }
    }
}

}  // namespace simworld
