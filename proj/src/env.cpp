#include "simworld/env.hpp"
#include "simworld/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace simworld {

const char* to_string(Embodiment e) {
    switch (e) {
    case Embodiment::humanoid: return "humanoid";
    case Embodiment::robot: return "robot";
    case Embodiment::vehicle: return "vehicle";
    }
    return "?";
}

Embodiment embodiment_from_string(const std::string& s) {
    if (s == "humanoid") return Embodiment::humanoid;
    if (s == "robot") return Embodiment::robot;
    if (s == "vehicle") return Embodiment::vehicle;
    fail(err::ScenarioInvalid, "unknown embodiment '" + s + "'");
}

const char* to_string(EventKind k) {
    switch (k) {
    case EventKind::collision_static: return "collision_static";
    case EventKind::collision_dynamic: return "collision_dynamic";
    case EventKind::red_light_violation: return "red_light_violation";
    case EventKind::order_event: return "order_event";
    case EventKind::purchase: return "purchase";
    case EventKind::message: return "message";
    }
    return "?";
}

namespace {

json pose_json(const Pose2D& p) { return json{{"x", p.x}, {"y", p.y}, {"yaw", p.yaw}}; }

json flags_json(const StatusFlags& f) {
    return json{{"seated", f.seated}, {"in_vehicle", f.in_vehicle}, {"riding_scooter", f.riding_scooter},
                {"carrying", f.carrying}};
}

json messages_json(const std::vector<Message>& ms) {
    json a = json::array();
    for (const auto& m : ms) a.push_back(json{{"tick", m.tick}, {"from", m.from}, {"text", m.text}});
    return a;
}

Category category_of(Embodiment e) {
    switch (e) {
    case Embodiment::humanoid: return Category::humanoid;
    case Embodiment::robot: return Category::robot;
    case Embodiment::vehicle: return Category::vehicle;
    }
    return Category::humanoid;
}

bool is_movement(const std::string& v) {
    return v == "step_forward" || v == "step_backward" || v == "move_left" || v == "move_right" || v == "rotate";
}

const std::set<std::string> kCommon{"do_nothing", "evaluate", "send_message", "look_up",
                                    "look_down",  "focus",    "take_photo",   "stop"};
const std::set<std::string> kSocial{"converse", "point_direction", "wave_hand", "argue"};
const std::set<std::string> kManip{"pick_up", "drop", "carry", "put_down"};

double num_arg(const ActionCommand& c, const char* key) {
    auto it = c.args.find(key);
    if (it == c.args.end() || !it->is_number())
        fail(err::MalformedAction, c.verb + " needs numeric '" + key + "'");
    double v = it->get<double>();
    if (!std::isfinite(v)) fail(err::MalformedAction, c.verb + ": non-finite '" + std::string(key) + "'");
    return v;
}

EntityId id_arg(const ActionCommand& c, const char* key) {
    auto it = c.args.find(key);
    if (it == c.args.end() || !it->is_number_integer() || it->get<std::int64_t>() < 0)
        fail(err::MalformedAction, c.verb + " needs integer '" + key + "'");
    return it->get<EntityId>();
}

std::string text_arg(const ActionCommand& c, const char* key, bool required) {
    auto it = c.args.find(key);
    if (it == c.args.end()) {
        if (required) fail(err::MalformedAction, c.verb + " needs string '" + key + "'");
        return {};
    }
    if (!it->is_string()) fail(err::MalformedAction, c.verb + ": '" + std::string(key) + "' must be a string");
    return it->get<std::string>();
}

void check_range(const ActionCommand& c, const char* key, double lo, double hi, bool lo_open, bool hi_open) {
    double v = num_arg(c, key);
    bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    if (!ok) fail(err::MalformedAction, c.verb + ": '" + std::string(key) + "' out of range");
}

// Structural validation of a command, independent of world state.
void validate_args(const ActionCommand& c) {
    const auto& vs = all_verbs();
    if (std::find(vs.begin(), vs.end(), c.verb) == vs.end()) fail(err::MalformedAction, "unknown verb '" + c.verb + "'");
    if (!c.args.is_object()) fail(err::MalformedAction, "args must be an object");
    const std::string& v = c.verb;
    if (v == "rotate" || v == "point_direction") check_range(c, "theta", -kPi, kPi, false, true);
    else if (v == "throttle" || v == "brake") check_range(c, "u", 0, 1, false, false);
    else if (v == "steering") check_range(c, "u", -1, 1, false, false);
    else if (v == "focus") check_range(c, "fov", 0, kPi, true, false);
    else if (v == "pick_up" || v == "carry" || v == "open_door" || v == "enter_car") id_arg(c, "target");
    else if (v == "send_message") { id_arg(c, "to"); text_arg(c, "text", true); }
    else if (v == "converse") text_arg(c, "text", true);
    else if (v == "argue") text_arg(c, "text", false);
}

}  // namespace

void validate_action(const ActionCommand& c) { validate_args(c); }

json ActionFeedback::to_json() const {
    json j{{"verb", verb}, {"outcome", outcome}};
    j["error"] = error ? json(*error) : json(nullptr);
    j["collision"] = collision ? json(*collision) : json(nullptr);
    j["signal_violation"] = signal_violation;
    if (!data.is_null()) j["data"] = data;
    return j;
}

bool AgentState::has_item(const std::string& s) const { return std::find(items.begin(), items.end(), s) != items.end(); }

json AgentState::to_json() const {
    json j;
    j["id"] = id;
    j["embodiment"] = simworld::to_string(embodiment);
    j["pose"] = pose_json(pose);
    j["speed"] = speed;
    j["energy"] = energy;
    j["money_cents"] = money_cents;
    j["items"] = items;
    json h = json::array();
    for (const auto& e : held) h.push_back(e.id);
    j["held"] = std::move(h);
    j["carried"] = carried ? json(carried->id) : json(nullptr);
    j["flags"] = flags_json(flags);
    j["inbox"] = messages_json(inbox);
    j["controls"] = json{{"throttle", throttle}, {"brake", brake}, {"steering", steering}};
    j["view"] = json{{"pitch", pitch}, {"fov", fov}};
    j["car"] = car ? json(*car) : json(nullptr);
    j["speed_multiplier"] = speed_multiplier;
    j["busy_until"] = busy_until;
    j["last"] = last.to_json();
    return j;
}

json ActionCommand::to_json() const { return json{{"agent", agent}, {"verb", verb}, {"args", args}}; }

ActionCommand ActionCommand::from_json(const json& j) {
    if (!j.is_object()) fail(err::MalformedAction, "action must be an object");
    ActionCommand c;
    const json* a = j.contains("agent") ? &j["agent"] : j.contains("agent_id") ? &j["agent_id"] : nullptr;
    if (!a || !a->is_number_integer() || a->get<std::int64_t>() < 0) fail(err::MalformedAction, "action needs integer 'agent'");
    c.agent = a->get<AgentId>();
    if (!j.contains("verb") || !j["verb"].is_string()) fail(err::MalformedAction, "action needs string 'verb'");
    c.verb = j["verb"].get<std::string>();
    if (j.contains("args")) c.args = j["args"];
    validate_args(c);
    return c;
}

json EventRecord::to_json() const {
    return json{{"tick", tick}, {"agent", agent}, {"kind", simworld::to_string(kind)}, {"payload", payload}};
}

void EventLog::append(EventRecord r) { records.push_back(std::move(r)); }

std::string EventLog::to_jsonl(std::size_t from) const {
    std::string out;
    for (std::size_t i = from; i < records.size(); ++i) {
        out += records[i].to_json().dump();
        out += '\n';
    }
    return out;
}

json Observation::to_json(bool include_raster) const {
    json j;
    j["agent"] = agent;
    j["tick"] = tick;
    j["pose"] = pose_json(pose);
    j["compass"] = compass;
    if (include_raster && !raster.empty()) {
        j["raster"] = json{{"w", raster_w}, {"h", raster_h}, {"cells", raster}};
    }
    j["scene_view"] = scene_view;
    j["signals"] = signals;
    j["messages"] = messages_json(messages);
    j["feedback"] = feedback.to_json();
    j["vitals"] = vitals;
    j["flags"] = flags;
    return j;
}

// ---------------------------------------------------------------------------
// Scenario

std::shared_ptr<const MapData> map_from_json(const json& m) {
    if (!m.is_object()) fail(err::ConfigInvalid, "map must be an object");
    if (m.contains("scene") && m.contains("roads")) return build_map(City::from_json(m));
    return build_map(GenConfig::from_json(m));
}

std::shared_ptr<const MapData> load_map_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(err::ConfigInvalid, "cannot open map '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(err::ConfigInvalid, "map '" + path + "' is not JSON: " + e.what());
    }
    return map_from_json(j);
}

Scenario Scenario::from_json(const json& j, std::shared_ptr<const MapData> preloaded) {
    if (!j.is_object()) fail(err::ScenarioInvalid, "scenario must be an object");
    Scenario sc;
    try {
        if (preloaded) {
            sc.map = std::move(preloaded);
        } else if (j.contains("map") && j["map"].is_object()) {
            sc.map = map_from_json(j["map"]);
        } else if (j.contains("map_ref") && j["map_ref"].is_string()) {
            std::ifstream in(j["map_ref"].get<std::string>());
            if (!in) fail(err::ScenarioInvalid, "cannot open map_ref '" + j["map_ref"].get<std::string>() + "'");
            sc.map = map_from_json(json::parse(in));
        } else {
            fail(err::ScenarioInvalid, "scenario needs 'map' or 'map_ref'");
        }
        sc.seed = j.value("seed", std::uint64_t{0});
        sc.mode = j.value("mode", std::string("sync"));
        if (sc.mode != "sync" && sc.mode != "async") fail(err::ScenarioInvalid, "mode must be sync or async");
        if (j.contains("interval")) {
            sc.env.async_interval = j["interval"].get<double>();
            if (!(sc.env.async_interval > 0)) fail(err::ScenarioInvalid, "interval must be > 0");
        }
        if (j.contains("traffic")) {
            const json& t = j["traffic"];
            sc.n_vehicles = t.value("n_vehicles", std::size_t{0});
            sc.n_pedestrians = t.value("n_pedestrians", std::size_t{0});
            if (t.contains("config")) sc.traffic = TrafficConfig::from_json(t["config"]);
        }
        if (j.contains("env")) {
            const json& e = j["env"];
            if (e.contains("verb_ticks"))
                for (auto& [k, v] : e["verb_ticks"].items()) {
                    int n = v.get<int>();
                    if (n < 1) fail(err::ScenarioInvalid, "verb_ticks must be >= 1");
                    sc.env.verb_ticks[k] = n;
                }
            sc.env.view_radius = e.value("view_radius", sc.env.view_radius);
            sc.env.interact_range = e.value("interact_range", sc.env.interact_range);
        }
        for (const json& a : j.value("agents", json::array())) {
            AgentSpec s;
            s.embodiment = embodiment_from_string(a.value("embodiment", std::string("humanoid")));
            if (a.contains("spawn_waypoint")) s.spawn_waypoint = a["spawn_waypoint"].get<WaypointId>();
            if (a.contains("spawn")) {
                const json& p = a["spawn"];
                if (p.is_array()) s.spawn_pose = Pose2D(p.at(0).get<double>(), p.at(1).get<double>(), p.size() > 2 ? p[2].get<double>() : 0.0);
                else s.spawn_pose = Pose2D(p.at("x").get<double>(), p.at("y").get<double>(), p.value("yaw", 0.0));
            }
            if (a.contains("vitals")) {
                s.energy = a["vitals"].value("energy", s.energy);
                s.money_cents = std::llround(a["vitals"].value("money", 0.0) * 100.0);
            }
            sc.agents.push_back(s);
        }
    } catch (const SimError& e) {
        if (e.code() == err::ScenarioInvalid) throw;
        fail(err::ScenarioInvalid, e.what());
    } catch (const json::exception& e) {
        fail(err::ScenarioInvalid, e.what());
    }
    return sc;
}

// ---------------------------------------------------------------------------
// Verb legality

void check_verb_legal(Embodiment e, const StatusFlags& f, const std::string& verb) {
    auto deny = [&](const char* code) {
        fail(code, "'" + verb + "' not allowed for " + to_string(e) +
                       (f.seated ? " (seated)" : f.in_vehicle ? " (in vehicle)" : f.riding_scooter ? " (riding)" : ""));
    };
    if (kCommon.count(verb)) return;
    if (e == Embodiment::vehicle) {
        if (verb == "throttle" || verb == "brake" || verb == "steering") return;
        deny(err::WrongEmbodiment);
    }
    if (e == Embodiment::robot) {
        if (is_movement(verb) || kManip.count(verb)) return;
        deny(err::WrongEmbodiment);
    }
    // humanoid
    static const std::set<std::string> humanoid_only{"pick_up",   "drop",        "carry",     "put_down",
                                                     "sit_down",  "stand_up",    "open_door", "enter_car",
                                                     "exit_car",  "ride_scooter"};
    bool humanoid_verb = is_movement(verb) || kSocial.count(verb) || humanoid_only.count(verb);
    if (!humanoid_verb) deny(err::WrongEmbodiment);
    if (f.in_vehicle) {
        if (verb == "exit_car" || verb == "converse") return;
        deny(err::WrongEmbodiment);
    }
    if (f.seated) {
        if (verb == "stand_up" || kSocial.count(verb)) return;
        deny(err::WrongState);
    }
    if (verb == "stand_up" || verb == "exit_car") deny(err::WrongState);
    if (f.riding_scooter) {
        if (is_movement(verb) || kSocial.count(verb) || verb == "ride_scooter") return;
        deny(err::WrongState);
    }
}

// ---------------------------------------------------------------------------
// World

AABB World::footprint(const AgentState& a) const {
    switch (a.embodiment) {
    case Embodiment::vehicle:
        return oriented_box(a.pose.pos(), a.pose.yaw, traffic_.config.vehicle_length, traffic_.config.vehicle_width);
    case Embodiment::robot: return AABB::centered(a.pose.pos(), cfg_.robot_size / 2, cfg_.robot_size / 2);
    case Embodiment::humanoid: break;
    }
    return AABB::centered(a.pose.pos(), cfg_.humanoid_size / 2, cfg_.humanoid_size / 2);
}

const AgentState& World::agent(AgentId id) const {
    auto it = agents_.find(id);
    if (it == agents_.end()) fail(err::UnknownAgent, "unknown agent " + std::to_string(id));
    return it->second;
}

AgentState& World::agent_mut(AgentId id) { return const_cast<AgentState&>(agent(id)); }

std::optional<World::Hit> World::first_hit(const AABB& fp, AgentId self) const {
    if (auto s = scene_.first_collision(fp)) return Hit{true, *s, scene_.at(*s).category};
    std::optional<Hit> best;
    auto consider = [&](EntityId id, const AABB& b, Category c) {
        if (id == self || !b.overlaps(fp)) return;
        if (!best || id < best->id) best = Hit{false, id, c};
    };
    for (const auto& v : traffic_.vehicles) consider(v.id, traffic_.footprint(v), Category::vehicle);
    for (const auto& p : traffic_.pedestrians) consider(p.id, traffic_.footprint(p), Category::pedestrian);
    for (const auto& [id, a] : agents_) {
        if (a.flags.in_vehicle) continue;  // occupies the car's footprint, not its own
        consider(id, footprint(a), category_of(a.embodiment));
    }
    return best;
}

namespace {

// Red-light check on entering a signalled crosswalk region.
bool violates_signal(const MapData& map, const TrafficState& st, Embodiment e, Vec2 from, Vec2 to, double yaw) {
    const Crosswalk* cw = map.fine.crosswalk_at(to);
    if (!cw || !cw->signal_id) return false;
    if (map.fine.crosswalk_at(from) == cw) return false;  // already inside
    const SignalState* sig = st.signal_for(cw->intersection_id);
    if (!sig) return false;
    if (e != Embodiment::vehicle) return !sig->walkable(cw->crosses_x_road);
    Vec2 centre = map.city.roads.intersections[cw->intersection_id].pos;
    if (heading(yaw).dot(centre - to) <= 0) return false;  // leaving the junction
    return sig->phase_for(cw->crosses_x_road) == SignalPhase::red;
}

}  // namespace

ActionFeedback World::move_agent(AgentState& a, Pose2D to) {
    ActionFeedback fb;
    AgentState probe = a;
    probe.pose = to;
    AABB fp = footprint(probe);
    if (!scene_.extent().contains(fp)) {
        fb.outcome = "blocked";
        fb.collision = "boundary";
        log_.append({tick_, a.id, EventKind::collision_static, json{{"entity", nullptr}, {"category", "boundary"}}});
        a.speed = 0;
        return fb;
    }
    if (auto hit = first_hit(fp, a.id)) {
        fb.outcome = "blocked";
        fb.collision = to_string(hit->category);
        log_.append({tick_, a.id, hit->is_static ? EventKind::collision_static : EventKind::collision_dynamic,
                     json{{"entity", hit->id}, {"category", to_string(hit->category)}}});
        a.speed = 0;
        return fb;
    }
    if (violates_signal(*map_, traffic_, a.embodiment, a.pose.pos(), to.pos(), to.yaw)) {
        fb.signal_violation = true;
        const Crosswalk* cw = map_->fine.crosswalk_at(to.pos());
        log_.append({tick_, a.id, EventKind::red_light_violation,
                     json{{"intersection", cw->intersection_id}, {"segment", cw->segment_id}}});
    }
    a.speed = dist(a.pose.pos(), to.pos()) / traffic_.config.dt;
    a.pose = to;
    return fb;
}

void World::integrate_vehicle(AgentState& a) {
    const TrafficConfig& tc = traffic_.config;
    double dt = tc.dt;
    double acc = a.throttle * tc.a_max + a.brake * tc.a_min;
    a.speed = std::clamp(a.speed + acc * dt, 0.0, tc.v_max);
    if (a.speed <= 0) return;
    double yaw = a.pose.yaw + a.speed / cfg_.wheelbase * std::tan(a.steering * cfg_.max_steer) * dt;
    Vec2 p = a.pose.pos() + heading(yaw) * (a.speed * dt);
    double v = a.speed;
    ActionFeedback fb = move_agent(a, Pose2D(p.x, p.y, yaw));
    if (fb.outcome == "ok") a.speed = v;  // move_agent infers speed from displacement
    if (fb.outcome == "blocked" && a.last.outcome != "invalid") {
        a.last.outcome = "blocked";
        a.last.collision = fb.collision;
    }
    if (fb.signal_violation) a.last.signal_violation = true;
}

namespace {

// Placement of a released object just in front of the agent.
AABB drop_box(const SceneEntity& e, const Pose2D& pose, double agent_half) {
    double w = e.footprint.width(), h = e.footprint.height();
    double reach = agent_half + 0.5 * std::max(w, h) + 0.05;
    Vec2 c = pose.pos() + heading(pose.yaw) * reach;
    return AABB::centered(c, w / 2, h / 2);
}

}  // namespace

ActionFeedback World::execute_primitive(const ActionCommand& cmd) {
    validate_args(cmd);
    AgentState& a = agent_mut(cmd.agent);
    check_verb_legal(a.embodiment, a.flags, cmd.verb);
    const std::string& v = cmd.verb;
    ActionFeedback fb;
    fb.verb = v;
    double step = (a.embodiment == Embodiment::robot ? cfg_.robot_step : cfg_.humanoid_step) * a.speed_multiplier;
    Vec2 fwd = heading(a.pose.yaw), left{-fwd.y, fwd.x};
    auto moved = [&](Vec2 d) {
        Vec2 p = a.pose.pos() + d;
        ActionFeedback m = move_agent(a, Pose2D(p.x, p.y, a.pose.yaw));
        m.verb = v;
        return m;
    };
    auto target_entity = [&](EntityId id) -> const SceneEntity& {
        const SceneEntity* e = scene_.find(id);
        if (!e) fail(err::InvalidTarget, "no entity " + std::to_string(id));
        return *e;
    };
    auto in_range = [&](const SceneEntity& e) {
        double d = e.footprint.distance_to(a.pose.pos());
        if (d > cfg_.interact_range)
            fail(err::OutOfRange, "entity " + std::to_string(e.id) + " is " + std::to_string(d) + " m away");
    };
    auto half = [&] { return (a.embodiment == Embodiment::robot ? cfg_.robot_size : cfg_.humanoid_size) / 2; };
    auto release = [&](const SceneEntity& e) {
        AABB b = drop_box(e, a.pose, half());
        if (!scene_.extent().contains(b) || first_hit(b, a.id)) fail(err::InvalidTarget, "no room to put the object down");
        SceneEntity placed = e;
        placed.footprint = b;
        placed.pose = Pose2D(b.center().x, b.center().y, e.pose.yaw);
        scene_.insert(placed);
        fb.data = json{{"entity", e.id}};
    };

    if (v == "step_forward") return moved(fwd * step);
    if (v == "step_backward") return moved(fwd * -step);
    if (v == "move_left") return moved(left * step);
    if (v == "move_right") return moved(left * -step);
    if (v == "rotate") {
        Pose2D to = a.pose;
        to.set_yaw(a.pose.yaw + num_arg(cmd, "theta"));
        AgentState probe = a;
        probe.pose = to;
        if (a.embodiment == Embodiment::vehicle || footprint(probe) != footprint(a)) {
            ActionFeedback m = move_agent(a, to);
            m.verb = v;
            return m;
        }
        a.pose = to;  // square footprint: turning in place cannot collide
        return fb;
    }
    if (v == "throttle") { a.throttle = num_arg(cmd, "u"); a.brake = 0; return fb; }
    if (v == "brake") { a.brake = num_arg(cmd, "u"); a.throttle = 0; return fb; }
    if (v == "steering") { a.steering = num_arg(cmd, "u"); return fb; }
    if (v == "stop") {
        if (a.embodiment == Embodiment::vehicle) { a.throttle = 0; a.brake = 1; }
        else a.speed = 0;
        return fb;
    }
    if (v == "pick_up" || v == "carry") {
        const SceneEntity& e = target_entity(id_arg(cmd, "target"));
        if (e.category != Category::urban_prop && e.category != Category::generated_asset)
            fail(err::InvalidTarget, std::string("cannot lift a ") + to_string(e.category));
        if (v == "carry" && a.flags.carrying) fail(err::WrongState, "already carrying");
        in_range(e);
        SceneEntity copy = e;
        scene_.remove(copy.id);
        if (v == "pick_up") a.held.push_back(copy);
        else { a.carried = copy; a.flags.carrying = true; }
        fb.data = json{{"entity", copy.id}};
        return fb;
    }
    if (v == "drop") {
        if (a.held.empty()) fail(err::InvalidTarget, "holding nothing");
        release(a.held.back());
        a.held.pop_back();
        return fb;
    }
    if (v == "put_down") {
        if (!a.carried) fail(err::InvalidTarget, "carrying nothing");
        release(*a.carried);
        a.carried.reset();
        a.flags.carrying = false;
        return fb;
    }
    if (v == "sit_down") {
        AABB r = AABB::centered(a.pose.pos(), cfg_.interact_range, cfg_.interact_range);
        for (EntityId id : scene_.query_region(r)) {
            const SceneEntity& e = scene_.at(id);
            if (e.category != Category::urban_prop || !(e.has_tag("chair") || e.has_tag("bench"))) continue;
            if (e.footprint.distance_to(a.pose.pos()) > cfg_.interact_range) continue;
            a.flags.seated = true;
            a.speed = 0;
            fb.data = json{{"seat", id}};
            return fb;
        }
        fail(err::OutOfRange, "no seat within reach");
    }
    if (v == "stand_up") { a.flags.seated = false; return fb; }
    if (v == "open_door") {
        const SceneEntity& e = target_entity(id_arg(cmd, "target"));
        if (e.category != Category::building) fail(err::InvalidTarget, "only buildings have doors");
        in_range(e);
        fb.data = json{{"door", e.id}, {"state", "open"}};
        return fb;
    }
    if (v == "enter_car") {
        const SceneEntity& e = target_entity(id_arg(cmd, "target"));
        if (e.category != Category::vehicle) fail(err::InvalidTarget, "not a vehicle");
        in_range(e);
        a.flags.in_vehicle = true;
        a.car = e.id;
        a.speed = 0;
        return fb;
    }
    if (v == "exit_car") {
        a.flags.in_vehicle = false;
        a.car.reset();
        return fb;
    }
    if (v == "ride_scooter") {
        if (a.flags.riding_scooter) {
            a.flags.riding_scooter = false;
            a.speed_multiplier = 1;
        } else {
            if (!a.has_item("scooter")) fail(err::InvalidTarget, "no scooter");
            a.flags.riding_scooter = true;
            a.speed_multiplier = 2;
        }
        return fb;
    }
    if (v == "look_up") { a.pitch = std::min(a.pitch + kPi / 6, kPi / 2); return fb; }
    if (v == "look_down") { a.pitch = std::max(a.pitch - kPi / 6, -kPi / 2); return fb; }
    if (v == "focus") { a.fov = num_arg(cmd, "fov"); return fb; }
    if (v == "take_photo") {
        auto r = render_raster(a);
        fb.data = json{{"w", cfg_.raster_size}, {"h", cfg_.raster_size}, {"cells", r}};
        return fb;
    }
    if (v == "send_message") {
        AgentId to = id_arg(cmd, "to");
        auto it = agents_.find(to);
        if (it == agents_.end() || to == a.id) fail(err::InvalidTarget, "no recipient " + std::to_string(to));
        std::string text = text_arg(cmd, "text", true);
        it->second.inbox.push_back({tick_, a.id, text});
        log_.append({tick_, a.id, EventKind::message, json{{"to", to}, {"text", text}}});
        return fb;
    }
    if (kSocial.count(v)) {
        json p{{"verb", v}};
        if (v == "point_direction") p["theta"] = num_arg(cmd, "theta");
        if (v == "converse" || v == "argue") p["text"] = text_arg(cmd, "text", v == "converse");
        log_.append({tick_, a.id, EventKind::message, p});
        return fb;
    }
    if (v == "evaluate") {
        if (!evaluator_) fail(err::InvalidTarget, "no task evaluator installed");
        fb.data = evaluator_(*this, a.id);
        return fb;
    }
    return fb;  // do_nothing
}

AgentId World::add_agent(const AgentSpec& spec) {
    AgentState a;
    a.embodiment = spec.embodiment;
    a.energy = spec.energy;
    a.money_cents = spec.money_cents;
    const WaypointGraph& g = map_->fine;
    RouteMode mode = spec.embodiment == Embodiment::vehicle ? RouteMode::vehicle : RouteMode::pedestrian;
    if (spec.spawn_pose) {
        a.pose = *spec.spawn_pose;
    } else {
        WaypointId w = spec.spawn_waypoint ? *spec.spawn_waypoint : kNone;
        if (w == kNone) fail(err::ScenarioInvalid, "agent needs spawn_waypoint or spawn");
        if (w >= g.size() || !g.traversable(w, mode))
            fail(err::ScenarioInvalid, "spawn waypoint " + std::to_string(w) + " unusable for " + to_string(spec.embodiment));
        double yaw = 0;
        if (!g.out(w).empty()) yaw = std::atan2(g.node(g.out(w)[0].to).pos.y - g.node(w).pos.y,
                                                g.node(g.out(w)[0].to).pos.x - g.node(w).pos.x);
        if (mode == RouteMode::pedestrian) yaw = 0;
        a.pose = Pose2D(g.node(w).pos.x, g.node(w).pos.y, yaw);
    }
    AABB fp = footprint(a);
    if (!scene_.extent().contains(fp)) fail(err::ScenarioInvalid, "spawn outside the map");
    if (first_hit(fp, kNone)) fail(err::ScenarioInvalid, "spawn position occupied");
    a.id = traffic_.next_id++;
    agents_.emplace(a.id, a);
    return a.id;
}

World World::reset(const Scenario& sc, std::map<AgentId, Observation>* first_obs) {
    if (!sc.map) fail(err::ScenarioInvalid, "scenario has no map");
    World w;
    w.map_ = sc.map;
    w.scene_ = sc.map->city.scene;
    w.cfg_ = sc.env;
    w.traffic_ = make_traffic(*sc.map, sc.traffic, sc.seed);
    for (const auto& s : sc.agents) w.add_agent(s);
    for (const auto& [id, a] : w.agents_) w.traffic_.external.emplace_back(id, w.footprint(a));
    Rng rng(sc.seed);
    try {
        spawn_population(*sc.map, w.traffic_, sc.n_vehicles, sc.n_pedestrians, rng, &w.scene_);
    } catch (const SimError& e) {
        fail(err::ScenarioInvalid, e.what());
    }
    if (first_obs)
        for (const auto& [id, a] : w.agents_) (*first_obs)[id] = w.observe(id);
    return w;
}

StepResult World::finish_tick(std::size_t log_mark, const std::set<AgentId>& acted) {
    (void)acted;
    for (auto& [id, a] : agents_)
        if (a.embodiment == Embodiment::vehicle) integrate_vehicle(a);
    traffic_.external.clear();
    for (const auto& [id, a] : agents_)
        if (!a.flags.in_vehicle) traffic_.external.emplace_back(id, footprint(a));
    step_traffic(*map_, traffic_, &scene_);
    traffic_.events.clear();
    ++tick_;
    StepResult r;
    for (const auto& [id, a] : agents_) r.observations[id] = observe(id);
    r.events.assign(log_.records.begin() + static_cast<std::ptrdiff_t>(log_mark), log_.records.end());
    return r;
}

namespace {

void check_batch(const std::map<AgentId, AgentState>& agents, const std::vector<ActionCommand>& actions) {
    std::set<AgentId> seen;
    for (const auto& c : actions) {
        if (!agents.count(c.agent)) fail(err::UnknownAgent, "unknown agent " + std::to_string(c.agent));
        if (!seen.insert(c.agent).second) fail(err::MalformedAction, "two actions for agent " + std::to_string(c.agent));
        validate_args(c);
    }
}

}  // namespace

StepResult World::step_partial(const std::vector<ActionCommand>& actions) {
    check_batch(agents_, actions);
    std::vector<ActionCommand> ordered = actions;
    std::sort(ordered.begin(), ordered.end(), [](const auto& x, const auto& y) { return x.agent < y.agent; });
    std::size_t mark = log_.records.size();
    std::set<AgentId> acted;
    // Walkers only move through their own step; speed reflects this tick's displacement.
    for (auto& [id, a] : agents_)
        if (a.embodiment != Embodiment::vehicle) a.speed = 0;
    for (const auto& c : ordered) {
        AgentState& a = agents_.at(c.agent);
        ActionFeedback fb;
        try {
            fb = execute_primitive(c);
        } catch (const SimError& e) {
            fb = ActionFeedback{};
            fb.verb = c.verb;
            fb.outcome = "invalid";
            fb.error = e.code();
            fb.data = json{{"message", e.what()}};
        }
        a.last = fb;
        auto d = cfg_.verb_ticks.find(c.verb);
        a.busy_until = tick_ + static_cast<std::uint64_t>(d == cfg_.verb_ticks.end() ? 1 : d->second);
        acted.insert(c.agent);
    }
    for (auto& [id, a] : agents_)
        if (!acted.count(id)) a.last = ActionFeedback{};
    return finish_tick(mark, acted);
}

StepResult World::step_sync(const std::vector<ActionCommand>& actions) {
    check_batch(agents_, actions);
    if (actions.size() != agents_.size())
        fail(err::MalformedAction, "sync step needs exactly one action per agent (" + std::to_string(agents_.size()) +
                                       " agents, " + std::to_string(actions.size()) + " actions)");
    return step_partial(actions);
}

std::vector<std::uint8_t> World::render_raster(const AgentState& a) const {
    const int n = cfg_.raster_size;
    const double cell = cfg_.raster_cell;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(n) * n, 0);
    double reach = n * cell * 0.75;  // > half-diagonal
    AABB region = AABB::centered(a.pose.pos(), reach, reach);
    struct Box { AABB b; std::uint8_t code; };
    std::vector<Box> dyn, blocking, soft;
    auto code = [](Category c) { return static_cast<std::uint8_t>(static_cast<int>(c) + 1); };
    for (const auto& v : traffic_.vehicles)
        if (traffic_.footprint(v).touches(region)) dyn.push_back({traffic_.footprint(v), code(Category::vehicle)});
    for (const auto& p : traffic_.pedestrians)
        if (traffic_.footprint(p).touches(region)) dyn.push_back({traffic_.footprint(p), code(Category::pedestrian)});
    for (const auto& [id, o] : agents_)
        if (id != a.id && !o.flags.in_vehicle && footprint(o).touches(region))
            dyn.push_back({footprint(o), code(category_of(o.embodiment))});
    for (EntityId id : scene_.query_region(region)) {
        const SceneEntity& e = scene_.at(id);
        (e.blocking ? blocking : soft).push_back({e.footprint, code(e.category)});
    }
    Vec2 fwd = heading(a.pose.yaw), left{-fwd.y, fwd.x};
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            double f = (n / 2.0 - r - 0.5) * cell, l = (n / 2.0 - c - 0.5) * cell;
            Vec2 p = a.pose.pos() + fwd * f + left * l;
            std::uint8_t v = 0;
            for (const auto* layer : {&dyn, &blocking, &soft}) {
                for (const auto& b : *layer)
                    if (b.b.contains(p)) { v = b.code; break; }
                if (v) break;
            }
            out[static_cast<std::size_t>(r) * n + c] = v;
        }
    return out;
}

Observation World::observe(AgentId id, bool raster, bool drain) {
    AgentState& a = agent_mut(id);
    Observation o;
    o.agent = id;
    o.tick = tick_;
    o.pose = a.pose;
    o.compass = a.pose.yaw;
    if (raster) {
        o.raster_w = o.raster_h = cfg_.raster_size;
        o.raster = render_raster(a);
    }
    const double R = cfg_.view_radius;
    Vec2 me = a.pose.pos();
    auto item = [&](EntityId eid, Category c, const AABB& fp, const Pose2D& p, const std::set<std::string>* tags) {
        json j{{"id", eid}, {"category", to_string(c)}, {"x", p.x}, {"y", p.y}, {"yaw", p.yaw},
               {"distance", fp.distance_to(me)}};
        if (tags && !tags->empty()) j["tags"] = *tags;
        return j;
    };
    json view = json::array();
    for (EntityId eid : scene_.query_region(AABB::centered(me, R, R))) {
        const SceneEntity& e = scene_.at(eid);
        if (e.footprint.distance_to(me) <= R) view.push_back(item(eid, e.category, e.footprint, e.pose, &e.tags));
    }
    for (const auto& v : traffic_.vehicles)
        if (traffic_.footprint(v).distance_to(me) <= R)
            view.push_back(item(v.id, Category::vehicle, traffic_.footprint(v), v.pose, nullptr));
    for (const auto& p : traffic_.pedestrians)
        if (traffic_.footprint(p).distance_to(me) <= R)
            view.push_back(item(p.id, Category::pedestrian, traffic_.footprint(p), p.pose, nullptr));
    for (const auto& [oid, other] : agents_)
        if (oid != id && footprint(other).distance_to(me) <= R)
            view.push_back(item(oid, category_of(other.embodiment), footprint(other), other.pose, nullptr));
    o.scene_view = std::move(view);
    json sigs = json::array();
    for (const auto& s : traffic_.signals) {
        Vec2 c = map_->city.roads.intersections[s.intersection_id].pos;
        if (dist(c, me) <= R)
            sigs.push_back(json{{"intersection", s.intersection_id},
                                {"x_axis", to_string(s.phase_for(true))},
                                {"y_axis", to_string(s.phase_for(false))}});
    }
    o.signals = std::move(sigs);
    o.messages = a.inbox;
    if (drain) a.inbox.clear();
    o.feedback = a.last;
    o.vitals = json{{"energy", a.energy}, {"money", a.money_cents / 100.0}, {"money_cents", a.money_cents},
                    {"speed", a.speed}, {"items", a.items}};
    o.flags = flags_json(a.flags);
    return o;
}

json World::state_json() const {
    json j;
    j["tick"] = tick_;
    json as = json::array();
    for (const auto& [id, a] : agents_) {
        json x = a.to_json();
        x.erase("inbox");  // transient; delivered through observations
        as.push_back(std::move(x));
    }
    j["agents"] = std::move(as);
    j["traffic"] = traffic_.to_json();
    j["scene_size"] = scene_.size();
    j["scene_hash"] = Rng::hash(scene_.to_json().dump());
    j["events"] = log_.records.size();
    return j;
}

// ---------------------------------------------------------------------------
// Async

void AsyncBuffer::submit(const ActionCommand& cmd) {
    std::lock_guard lk(mu_);
    if (unavailable_.count(cmd.agent)) fail(err::Busy, "agent " + std::to_string(cmd.agent) + " is executing an action");
    if (pending_.count(cmd.agent)) fail(err::Busy, "agent " + std::to_string(cmd.agent) + " already has a pending action");
    pending_.emplace(cmd.agent, cmd);
}

std::vector<ActionCommand> AsyncBuffer::drain() {
    std::lock_guard lk(mu_);
    std::vector<ActionCommand> out;
    for (auto& [id, c] : pending_) out.push_back(std::move(c));
    pending_.clear();
    return out;
}

void AsyncBuffer::set_available(AgentId id, bool available) {
    std::lock_guard lk(mu_);
    if (available) unavailable_.erase(id);
    else unavailable_.insert(id);
}

bool AsyncBuffer::available(AgentId id) const {
    std::lock_guard lk(mu_);
    return !unavailable_.count(id) && !pending_.count(id);
}

StepResult async_tick(World& w, AsyncBuffer& buf) {
    std::vector<ActionCommand> cmds;
    for (auto& c : buf.drain())
        if (w.agents().count(c.agent)) cmds.push_back(std::move(c));
    StepResult r = w.step_partial(cmds);
    for (const auto& [id, a] : w.agents()) buf.set_available(id, w.tick() >= a.busy_until);
    return r;
}

void run_async(World& w, AsyncBuffer& buf, const ActionSource& source, double interval, double duration) {
    if (!(interval > 0)) fail(err::ConfigInvalid, "interval must be > 0");
    const double dt = w.traffic().config.dt;
    const long per = std::max(1L, std::lround(interval / dt));
    const long intervals = std::lround(duration / interval);
    for (long i = 0; i < intervals; ++i) {
        source(w, buf, static_cast<double>(i) * interval);
        async_tick(w, buf);
        for (long k = 1; k < per; ++k) async_tick(w, buf);
    }
}

}  // namespace simworld
