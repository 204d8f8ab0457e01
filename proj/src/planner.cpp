#include "simworld/planner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>

#include "simworld/error.hpp"

namespace simworld {

const char* to_string(ProgramStatus s) {
    switch (s) {
    case ProgramStatus::running: return "running";
    case ProgramStatus::done: return "done";
    case ProgramStatus::failed: return "failed";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Targets and plans

json TargetSpec::to_json() const {
    json j = json::object();
    if (category) j["category"] = simworld::to_string(*category);
    if (tag) j["tag"] = *tag;
    if (entity) j["entity"] = *entity;
    if (waypoint) j["waypoint"] = *waypoint;
    if (point) j["point"] = json::array({point->x, point->y});
    return j;
}

TargetSpec TargetSpec::from_json(const json& j) {
    if (!j.is_object()) fail(err::UnparseableClause, "target must be an object");
    TargetSpec t;
    try {
        if (j.contains("category")) t.category = category_from_string(j["category"].get<std::string>());
        if (j.contains("tag")) t.tag = j["tag"].get<std::string>();
        if (j.contains("entity")) t.entity = j["entity"].get<EntityId>();
        if (j.contains("waypoint")) t.waypoint = j["waypoint"].get<WaypointId>();
        if (j.contains("point")) t.point = Vec2{j["point"].at(0).get<double>(), j["point"].at(1).get<double>()};
    } catch (const json::exception& e) {
        fail(err::UnparseableClause, std::string("bad target: ") + e.what());
    } catch (const SimError& e) {
        fail(err::UnparseableClause, std::string("bad target: ") + e.what());
    }
    int kinds = (t.category || t.tag) + t.entity.has_value() + t.waypoint.has_value() + t.point.has_value();
    if (kinds != 1) fail(err::UnparseableClause, "target needs exactly one of category/tag, entity, waypoint, point");
    return t;
}

json HighLevelPlan::to_json() const {
    json steps_j = json::array();
    for (const auto& s : steps) steps_j.push_back(json{{"verb", s.verb}, {"args", s.args}});
    return json{{"steps", steps_j}, {"source_text", source_text}};
}

HighLevelPlan HighLevelPlan::from_json(const json& j) {
    if (!j.is_object() || !j.contains("steps") || !j["steps"].is_array())
        fail(err::UnparseableClause, "plan needs a 'steps' array");
    HighLevelPlan p;
    p.source_text = j.value("source_text", std::string());
    for (const auto& s : j["steps"]) {
        if (!s.is_object() || !s.contains("verb") || !s["verb"].is_string())
            fail(err::UnparseableClause, "each step needs a string 'verb'");
        PlanStep st{s["verb"].get<std::string>(), s.value("args", json::object())};
        if (!st.args.is_object()) fail(err::UnparseableClause, "step args must be an object");
        p.steps.push_back(std::move(st));
    }
    if (p.steps.empty()) fail(err::UnparseableClause, "plan has no steps");
    return p;
}

namespace {

struct Noun {
    Category category;
    std::optional<std::string> tag;
};

const std::map<std::string, Noun>& noun_table() {
    static const std::map<std::string, Noun> t{
        {"chair", {Category::urban_prop, "chair"}},   {"bench", {Category::urban_prop, "bench"}},
        {"bin", {Category::urban_prop, "bin"}},       {"trash can", {Category::urban_prop, "bin"}},
        {"cone", {Category::urban_prop, "cone"}},     {"box", {Category::urban_prop, "box"}},
        {"tree", {Category::vegetation, "tree"}},     {"car", {Category::vehicle, "parked"}},
        {"parked car", {Category::vehicle, "parked"}}, {"vehicle", {Category::vehicle, "parked"}},
        {"building", {Category::building, std::nullopt}}, {"shop", {Category::building, "shop"}},
        {"house", {Category::building, "house"}},     {"kiosk", {Category::building, "kiosk"}},
        {"landmark", {Category::building, "landmark"}}, {"restaurant", {Category::building, "restaurant"}},
    };
    return t;
}

std::string normalize(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::string out;
    bool space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) { space = !out.empty(); continue; }
        if (space) out += ' ';
        space = false;
        out += c;
    }
    while (!out.empty() && (out.back() == '.' || out.back() == '!' || out.back() == '?')) out.pop_back();
    if (out.rfind("please ", 0) == 0) out = out.substr(7);
    return out;
}

std::optional<TargetSpec> parse_target(const std::string& phrase) {
    static const std::regex point(R"(^(?:the )?(?:point )?\(\s*(-?[0-9.]+)\s*,\s*(-?[0-9.]+)\s*\)$)");
    static const std::regex wp(R"(^(?:the )?waypoint #?([0-9]+)$)");
    static const std::regex ent(R"(^(?:the )?(?:entity|object) #?([0-9]+)$)");
    static const std::regex noun(R"(^(?:the |a |an )?(?:(?:nearest|closest) )?([a-z ]+?)(?: #?([0-9]+))?$)");
    std::smatch m;
    TargetSpec t;
    if (std::regex_match(phrase, m, point)) {
        t.point = Vec2{std::stod(m[1]), std::stod(m[2])};
        return t;
    }
    if (std::regex_match(phrase, m, wp)) { t.waypoint = std::stoull(m[1]); return t; }
    if (std::regex_match(phrase, m, ent)) { t.entity = std::stoull(m[1]); return t; }
    if (std::regex_match(phrase, m, noun)) {
        auto it = noun_table().find(m[1]);
        if (it == noun_table().end()) return std::nullopt;
        if (m[2].matched) {
            t.entity = std::stoull(m[2]);
        } else {
            t.category = it->second.category;
            t.tag = it->second.tag;
        }
        return t;
    }
    return std::nullopt;
}

std::vector<std::string> split_clauses(const std::string& s) {
    static const std::regex sep(R"(\s*(?:,\s*and then|,\s*then|,\s*and|\band then\b|\bthen\b|\band\b|,|;)\s*)");
    // Commas inside "(x, y)" belong to the coordinate, not the clause list.
    std::string masked = s;
    int depth = 0;
    for (char& ch : masked) {
        if (ch == '(') ++depth;
        else if (ch == ')') depth = std::max(0, depth - 1);
        else if (ch == ',' && depth > 0) ch = '\x01';
    }
    std::vector<std::string> out;
    std::sregex_token_iterator it(masked.begin(), masked.end(), sep, -1), end;
    for (; it != end; ++it) {
        std::string c = it->str();
        std::replace(c.begin(), c.end(), '\x01', ',');
        if (!c.empty()) out.push_back(c);
    }
    return out;
}

PlanStep prim(const std::string& verb, json args = json::object()) { return PlanStep{verb, std::move(args)}; }

std::vector<PlanStep> parse_clause(const std::string& c) {
    using R = std::regex;
    std::smatch m;
    auto target_or_fail = [&](const std::string& phrase) {
        auto t = parse_target(phrase);
        if (!t) fail(err::UnparseableClause, "unknown target '" + phrase + "' in clause '" + c + "'");
        return t->to_json();
    };
    static const R go(R"(^(?:go|walk|navigate|move|head|run) to (.+)$)");
    static const R sit(R"(^sit(?: down)?(?: on (.+))?$)");
    static const R stand(R"(^(?:stand up|get up|stand)$)");
    static const R order_pick(R"(^pick up order #?([0-9]+)$)");
    static const R order_deliver(R"(^deliver(?: order)? #?([0-9]+)$)");
    static const R order_share(R"(^share(?: order)? #?([0-9]+)$)");
    static const R order_cancel(R"(^cancel share(?: of)?(?: order)? #?([0-9]+)$)");
    static const R meet(R"(^go to (?:the )?meet(?:ing)?[ -]point(?: (?:for|of) order #?([0-9]+))?$)");
    static const R scooter_buy(R"(^(?:buy|purchase) (?:a )?scooter$)");
    static const R drinks_buy(R"(^(?:buy|purchase) (?:a |some )?drinks?$)");
    static const R speed(R"(^(?:set|adjust) speed to ([0-9.]+)$)");
    static const R pick(R"(^(?:pick up|grab|take) (.+)$)");
    static const R carry(R"(^carry (.+)$)");
    static const R drop(R"(^drop(?: it)?$)");
    static const R put(R"(^put (?:it )?down$)");
    static const R enter(R"(^(?:enter|get into|get in) (.+)$)");
    static const R exit(R"(^(?:exit|leave|get out of) (?:the )?(?:car|vehicle)$)");
    static const R door(R"(^open (?:the )?door(?: of (.+))?$)");
    static const R wave(R"(^wave(?: (?:your )?hands?)?$)");
    static const R turn(R"(^turn (left|right|around)$)");
    static const R fwd(R"(^(?:step|move|walk) forward$)");
    static const R back(R"(^(?:step|move|walk) back(?:ward)?$)");
    static const R look(R"(^look (up|down)$)");
    static const R photo(R"(^take (?:a )?(?:photo|picture)$)");
    static const R ride(R"(^ride (?:the |a )?scooter$)");
    static const R say(R"(^say (.+)$)");

    if (std::regex_match(c, m, meet)) {
        json a = json::object();
        if (m[1].matched) a["order"] = std::stoull(m[1]);
        return {prim("go_to_meet_point", a)};
    }
    if (std::regex_match(c, m, go)) return {PlanStep{"navigate", {{"target", target_or_fail(m[1])}}}};
    if (std::regex_match(c, m, sit)) {
        if (m[1].matched) return {PlanStep{"navigate", {{"target", target_or_fail(m[1])}}}, prim("sit_down")};
        return {prim("sit_down")};
    }
    if (std::regex_match(c, stand)) return {prim("stand_up")};
    if (std::regex_match(c, m, order_pick)) return {prim("pick_up_order", {{"order", std::stoull(m[1])}})};
    if (std::regex_match(c, m, order_deliver)) return {prim("deliver_order", {{"order", std::stoull(m[1])}})};
    if (std::regex_match(c, m, order_share)) return {prim("share_order", {{"order", std::stoull(m[1])}})};
    if (std::regex_match(c, m, order_cancel)) return {prim("cancel_share", {{"order", std::stoull(m[1])}})};
    if (std::regex_match(c, scooter_buy)) return {prim("purchase_scooter")};
    if (std::regex_match(c, drinks_buy)) return {prim("purchase_drinks")};
    if (std::regex_match(c, m, speed)) return {prim("adjust_speed", {{"speed", std::stod(m[1])}})};
    if (std::regex_match(c, photo)) return {prim("take_photo")};
    if (std::regex_match(c, m, pick)) return {prim("pick_up", {{"target", target_or_fail(m[1])}})};
    if (std::regex_match(c, m, carry)) return {prim("carry", {{"target", target_or_fail(m[1])}})};
    if (std::regex_match(c, drop)) return {prim("drop")};
    if (std::regex_match(c, put)) return {prim("put_down")};
    if (std::regex_match(c, exit)) return {prim("exit_car")};
    if (std::regex_match(c, m, enter)) return {prim("enter_car", {{"target", target_or_fail(m[1])}})};
    if (std::regex_match(c, m, door)) {
        json t = m[1].matched ? target_or_fail(m[1]) : TargetSpec{Category::building, {}, {}, {}, {}}.to_json();
        return {prim("open_door", {{"target", t}})};
    }
    if (std::regex_match(c, wave)) return {prim("wave_hand")};
    if (c == "stop") return {prim("stop")};
    if (c == "wait") return {prim("do_nothing")};
    if (std::regex_match(c, m, turn)) {
        double th = m[1] == "left" ? kPi / 2 : m[1] == "right" ? -kPi / 2 : -kPi;
        return {prim("rotate", {{"theta", th}})};
    }
    if (std::regex_match(c, fwd)) return {prim("step_forward")};
    if (std::regex_match(c, back)) return {prim("step_backward")};
    if (std::regex_match(c, m, look)) return {prim(m[1] == "up" ? "look_up" : "look_down")};
    if (std::regex_match(c, ride)) return {prim("ride_scooter")};
    if (std::regex_match(c, m, say)) return {prim("converse", {{"text", m[1].str()}})};
    fail(err::UnparseableClause, "cannot parse clause '" + c + "'");
}

}  // namespace

HighLevelPlan parse_command(const std::string& command) {
    std::string s = normalize(command);
    if (s.empty()) fail(err::UnparseableClause, "empty command");
    HighLevelPlan p;
    p.source_text = command;
    for (const auto& c : split_clauses(s))
        for (auto& st : parse_clause(c)) p.steps.push_back(std::move(st));
    if (p.steps.empty()) fail(err::UnparseableClause, "no clauses in '" + command + "'");
    return p;
}

// ---------------------------------------------------------------------------
// Resolution

std::optional<EntityId> resolve_entity(const World& w, const TargetSpec& t, Vec2 from) {
    if (t.entity) {
        if (!w.scene().find(*t.entity)) fail(err::TargetNotFound, "no entity " + std::to_string(*t.entity));
        return t.entity;
    }
    if (t.category || t.tag) {
        const SceneGraph& g = w.scene();
        if (!t.category) {
            // Tag only: scan (rare path).
            std::optional<EntityId> best;
            double bd = 0;
            for (const auto& [id, e] : g.entities()) {
                if (!e.has_tag(*t.tag)) continue;
                double d = e.footprint.distance_to(from);
                if (!best || d < bd) { best = id; bd = d; }
            }
            if (!best) fail(err::TargetNotFound, "nothing tagged '" + *t.tag + "'");
            return best;
        }
        try {
            return g.nearest(from, *t.category, t.tag).id;
        } catch (const SimError&) {
            fail(err::TargetNotFound, std::string("no ") + (t.tag ? *t.tag : to_string(*t.category)) + " in the world");
        }
    }
    return std::nullopt;
}

WaypointId resolve_waypoint(const World& w, const TargetSpec& t, Vec2 from, RouteMode mode) {
    const WaypointGraph& g = w.map().fine;
    if (t.waypoint) {
        if (*t.waypoint >= g.size() || !g.traversable(*t.waypoint, mode) || g.blocked(*t.waypoint))
            fail(err::TargetNotFound, "waypoint " + std::to_string(*t.waypoint) + " is not usable");
        return *t.waypoint;
    }
    if (t.point) {
        WaypointId n = g.nearest(*t.point, mode);
        if (n == kNone) fail(err::TargetNotFound, "no waypoint near the point");
        return n;
    }
    EntityId id = *resolve_entity(w, t, from);
    const AABB& fp = w.scene().at(id).footprint;
    WaypointId best = kNone;
    double bd = 0;
    for (WaypointId i = 0; i < g.size(); ++i) {
        if (!g.traversable(i, mode) || g.blocked(i)) continue;
        double d = fp.distance_to(g.node(i).pos);
        if (best == kNone || d < bd) { best = i; bd = d; }
    }
    if (best == kNone) fail(err::TargetNotFound, "no waypoint reaches entity " + std::to_string(id));
    return best;
}

// ---------------------------------------------------------------------------
// Expansion

namespace {

const std::set<std::string> kTargeted{"pick_up", "carry", "open_door", "enter_car"};

void push_leg(PlanProgram& p, const PathResult& r, WaypointId goal, bool from_agent, std::size_t leg,
              std::deque<QueueItem>& out) {
    (void)p;
    auto hop = [&](WaypointId a, WaypointId b) {
        QueueItem it;
        it.kind = QueueItem::Kind::hop;
        it.hop = {a, b};
        it.leg = leg;
        it.leg_goal = goal;
        out.push_back(it);
    };
    if (from_agent) hop(kNone, r.path.front());
    for (std::size_t i = 0; i + 1 < r.path.size(); ++i) hop(r.path[i], r.path[i + 1]);
}

}  // namespace

PlanProgram expand_rule_based(const HighLevelPlan& plan, const World& w, AgentId agent, const PlannerExtensions* ext) {
    const AgentState& a = w.agent(agent);
    if (a.embodiment == Embodiment::vehicle) fail(err::WrongEmbodiment, "the rule-based executor drives walkers only");
    PlanProgram p;
    p.agent = agent;
    p.ext = ext;
    p.mode = RouteMode::pedestrian;
    const WaypointGraph& g = w.map().fine;

    std::vector<PlanStep> steps;
    for (const auto& s : plan.steps) {
        if (ext && ext->expanders.count(s.verb)) {
            for (auto& x : ext->expanders.at(s.verb)(s, w, agent)) steps.push_back(std::move(x));
        } else {
            steps.push_back(s);
        }
    }

    Vec2 cursor = a.pose.pos();
    WaypointId cursor_wp = kNone;
    std::size_t leg = 0;
    const auto& verbs = all_verbs();
    auto navigate_to = [&](WaypointId goal) {
        WaypointId start = cursor_wp != kNone ? cursor_wp : g.nearest(cursor, p.mode);
        if (start == kNone) fail(err::NoPath, "no waypoint near the agent");
        PathResult r = astar(g, start, goal, p.mode);
        push_leg(p, r, goal, cursor_wp == kNone, leg++, p.queue);
        cursor = g.node(goal).pos;
        cursor_wp = goal;
    };
    for (const auto& s : steps) {
        if (s.verb == "navigate") {
            if (!s.args.contains("target")) fail(err::UnparseableClause, "navigate needs a target");
            TargetSpec t = TargetSpec::from_json(s.args["target"]);
            navigate_to(resolve_waypoint(w, t, cursor, p.mode));
            continue;
        }
        if (kTargeted.count(s.verb)) {
            EntityId id;
            const json& tj = s.args.contains("target") ? s.args["target"] : json();
            if (tj.is_number_integer()) {
                TargetSpec t;
                t.entity = tj.get<EntityId>();
                id = *resolve_entity(w, t, cursor);
            } else {
                TargetSpec t = TargetSpec::from_json(tj);
                auto e = resolve_entity(w, t, cursor);
                if (!e) fail(err::UnparseableClause, s.verb + " needs an object target");
                id = *e;
            }
            const AABB& fp = w.scene().at(id).footprint;
            if (fp.distance_to(cursor) > w.config().interact_range) {
                TargetSpec t;
                t.entity = id;
                navigate_to(resolve_waypoint(w, t, cursor, p.mode));
            }
            QueueItem ap;
            ap.kind = QueueItem::Kind::approach;
            ap.entity = id;
            p.queue.push_back(ap);
            QueueItem it;
            it.cmd = ActionCommand{agent, s.verb, json{{"target", id}}};
            p.queue.push_back(it);
            continue;
        }
        if (std::find(verbs.begin(), verbs.end(), s.verb) != verbs.end()) {
            QueueItem it;
            it.cmd = ActionCommand{agent, s.verb, s.args};
            validate_action(it.cmd);
            p.queue.push_back(it);
            continue;
        }
        if (ext && ext->hooks.count(s.verb)) {
            QueueItem it;
            it.kind = QueueItem::Kind::hook;
            it.hook = s.verb;
            it.hook_args = s.args;
            p.queue.push_back(it);
            continue;
        }
        fail(err::UnparseableClause, "no handler for step '" + s.verb + "'");
    }
    if (p.queue.empty()) p.status = ProgramStatus::done;
    return p;
}

std::vector<Hop> PlanProgram::hops() const {
    std::vector<Hop> out;
    for (const auto& it : queue)
        if (it.kind == QueueItem::Kind::hop) out.push_back(it.hop);
    return out;
}

json PlanProgram::to_json() const {
    json q = json::array();
    for (const auto& it : queue) {
        switch (it.kind) {
        case QueueItem::Kind::hop:
            q.push_back(json{{"navigate", json::array({it.hop.from == kNone ? json("agent") : json(it.hop.from), it.hop.to})}});
            break;
        case QueueItem::Kind::approach: q.push_back(json{{"approach", it.entity}}); break;
        case QueueItem::Kind::primitive: q.push_back(json{{"primitive", it.cmd.to_json()}}); break;
        case QueueItem::Kind::hook: q.push_back(json{{"hook", it.hook}, {"args", it.hook_args}}); break;
        }
    }
    json j{{"agent", agent}, {"status", to_string(status)}, {"queue", q}, {"pending", pending.size()},
           {"replans", replans}, {"emitted", emitted}};
    if (!reason.empty()) j["reason"] = reason;
    return j;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

double step_length(const World& w, const AgentState& a) {
    return (a.embodiment == Embodiment::robot ? w.config().robot_step : w.config().humanoid_step) * a.speed_multiplier;
}

void set_failed(PlanProgram& p, std::string why) {
    p.status = ProgramStatus::failed;
    p.reason = std::move(why);
    p.pending.clear();
}

// Rotate toward `target` and step until within half a step of it.
void compile_move(PlanProgram& p, const AgentState& a, Vec2 target, std::size_t n_steps) {
    Vec2 d = target - a.pose.pos();
    double th = normalize_angle(std::atan2(d.y, d.x) - a.pose.yaw);
    if (n_steps == 0) return;
    if (std::abs(th) > 1e-12) p.pending.push_back(ActionCommand{p.agent, "rotate", json{{"theta", th}}});
    for (std::size_t i = 0; i < n_steps; ++i) p.pending.push_back(ActionCommand{p.agent, "step_forward", json::object()});
}

Vec2 attempted_point(const World& w, const AgentState& a, const ActionCommand& c) {
    double s = step_length(w, a);
    Vec2 f = heading(a.pose.yaw), l{-f.y, f.x};
    if (c.verb == "step_forward") return a.pose.pos() + f * s;
    if (c.verb == "step_backward") return a.pose.pos() - f * s;
    if (c.verb == "move_left") return a.pose.pos() + l * s;
    if (c.verb == "move_right") return a.pose.pos() - l * s;
    return a.pose.pos();
}

bool last_collision_dynamic(const World& w, AgentId id) {
    const auto& rec = w.log().records;
    for (auto it = rec.rbegin(); it != rec.rend(); ++it) {
        if (it->agent != id) continue;
        if (it->kind == EventKind::collision_dynamic) return true;
        if (it->kind == EventKind::collision_static) return false;
    }
    return false;
}

// Id of the entity behind the agent's most recent collision, if any.
std::optional<EntityId> last_blocker_id(const World& w, AgentId id) {
    const auto& rec = w.log().records;
    for (auto it = rec.rbegin(); it != rec.rend(); ++it) {
        if (it->agent != id) continue;
        if (it->kind != EventKind::collision_dynamic && it->kind != EventKind::collision_static) continue;
        const json& e = it->payload["entity"];
        if (!e.is_number_integer()) return std::nullopt;
        return e.get<EntityId>();
    }
    return std::nullopt;
}

// Where the agent's most recent blocker stands, if it can still be found.
std::optional<Vec2> last_blocker_position(const World& w, AgentId id) {
    const auto& rec = w.log().records;
    for (auto it = rec.rbegin(); it != rec.rend(); ++it) {
        if (it->agent != id) continue;
        if (it->kind != EventKind::collision_dynamic && it->kind != EventKind::collision_static) continue;
        const json& e = it->payload["entity"];
        if (!e.is_number_integer()) return std::nullopt;
        auto bid = e.get<EntityId>();
        if (auto ag = w.agents().find(bid); ag != w.agents().end()) return ag->second.pose.pos();
        for (const auto& v : w.traffic().vehicles)
            if (v.id == bid) return v.pose.pos();
        for (const auto& pd : w.traffic().pedestrians)
            if (pd.id == bid) return pd.pose.pos();
        if (const SceneEntity* s = w.scene().find(bid)) return s->footprint.center();
        return std::nullopt;
    }
    return std::nullopt;
}

// Replans the current navigate leg around the blocked spot. Returns false once the program failed.
bool replan(PlanProgram& p, World& w, const AgentState& a) {
    if (p.current_leg_goal == kNone) {
        set_failed(p, "stuck");
        return false;
    }
    if (++p.replans > p.replan_budget) {
        set_failed(p, "stuck");
        return false;
    }
    const WaypointGraph& g = w.map().fine;
    Vec2 bad = attempted_point(w, a, p.last_emitted);
    double r = std::max(1.0, 2 * step_length(w, a));
    auto bump = [&](WaypointId n) {
        int& f = p.penalty[n];
        f = std::min(std::max(f, 1) * p.penalty_factor, 1000000);
    };
    auto blocker = last_blocker_position(w, a.id);
    for (WaypointId n = 0; n < g.size(); ++n) {
        Vec2 q = g.node(n).pos;
        if (dist(q, bad) <= r || (blocker && dist(q, *blocker) <= 0.9)) bump(n);
    }
    // Walker in the way: sidestep one metre (right first) before rejoining the graph.
    Vec2 from = a.pose.pos();
    std::optional<Vec2> side;
    if (blocker && last_collision_dynamic(w, a.id) && dist(*blocker, from) > 1e-9) {
        Vec2 f = (*blocker - from) * (1.0 / dist(*blocker, from));
        AABB fp = w.footprint(a);
        auto clear = [&](Vec2 off) {
            AABB b{fp.min_x + off.x, fp.min_y + off.y, fp.max_x + off.x, fp.max_y + off.y};
            if (!w.scene().extent().contains(b.center()) || w.scene().collides(b)) return false;
            for (const auto& [oid, o] : w.agents())
                if (oid != a.id && !o.flags.in_vehicle && w.footprint(o).overlaps(b)) return false;
            return true;
        };
        auto free_run = [&](Vec2 dir, double len) {
            for (double k = 0.25; k <= len + 1e-9; k += 0.25)
                if (!clear(dir * k)) return false;
            return true;
        };
        for (Vec2 dir : {Vec2{f.y, -f.x}, Vec2{-f.y, f.x}}) {
            if (free_run(dir, 1.0)) {
                side = from + dir;
                break;
            }
        }
        // Single-file passage: the higher id backs off and lets the other through.
        auto bid = last_blocker_id(w, a.id);
        if (!side && bid && w.agents().count(*bid) && *bid < a.id && free_run(f * -1.0, 2.0)) side = from - f * 2.0;
    }
    if (side) from = *side;
    if (!p.hops_started.empty() && p.hops_started.back().to != p.current_leg_goal) bump(p.hops_started.back().to);
    p.pending.clear();
    while (!p.queue.empty() && p.queue.front().kind == QueueItem::Kind::hop && p.queue.front().leg == p.current_leg)
        p.queue.pop_front();
    WaypointId start = g.nearest(from, p.mode);
    if (start == kNone) {
        set_failed(p, "stuck");
        return false;
    }
    // Rejoin the graph away from the blockage when a clear node is about as close:
    // unpenalised, and reachable in a straight line that keeps off the blocker.
    auto seg_dist = [](Vec2 q, Vec2 s0, Vec2 s1) {
        Vec2 d = s1 - s0;
        double l2 = d.x * d.x + d.y * d.y;
        double u = l2 > 0 ? std::clamp(((q.x - s0.x) * d.x + (q.y - s0.y) * d.y) / l2, 0.0, 1.0) : 0.0;
        return dist(q, s0 + d * u);
    };
    auto grazes = [&](WaypointId n) {
        if (!blocker) return false;
        double clearance = std::min(0.8, dist(*blocker, from)) - 1e-9;
        return seg_dist(*blocker, from, g.node(n).pos) < clearance;
    };
    if (p.penalty.count(start) || grazes(start)) {
        double base = dist(g.node(start).pos, from);
        WaypointId alt = kNone;
        double best = base + 3.0;
        for (WaypointId n = 0; n < g.size(); ++n) {
            if (p.penalty.count(n) || !g.traversable(n, p.mode) || g.blocked(n) || grazes(n)) continue;
            double d = dist(g.node(n).pos, from);
            // Keep right of the blocker so two walkers meeting head-on pass each other.
            if (blocker) {
                Vec2 f = *blocker - from, q = g.node(n).pos - from;
                if (f.x * q.y - f.y * q.x > 0) d += 2.0;
            }
            if (d < best) best = d, alt = n;
        }
        if (alt != kNone) start = alt;
    }
    PathResult path;
    try {
        path = astar(g, start, p.current_leg_goal, p.mode, p.penalty);
    } catch (const SimError&) {
        set_failed(p, "stuck");
        return false;
    }
    std::deque<QueueItem> fresh;
    push_leg(p, path, p.current_leg_goal, true, p.current_leg, fresh);
    p.queue.insert(p.queue.begin(), fresh.begin(), fresh.end());
    if (side)
        compile_move(p, a, *side, static_cast<std::size_t>(std::llround(dist(*side, a.pose.pos()) / step_length(w, a))));
    p.waits = 0;
    return true;
}

}  // namespace

std::optional<ActionCommand> tick_executor(PlanProgram& p, World& w) {
    if (p.status != ProgramStatus::running) return std::nullopt;
    const AgentState& a = w.agent(p.agent);

    if (p.external) {
        p.awaiting = false;
        Observation obs = w.observe(p.agent, false, false);
        std::optional<ActionCommand> c = p.external(obs, p.timeout);
        if (!c) {
            set_failed(p, "executor_timeout");
            return std::nullopt;
        }
        if (c->verb == "done") {
            p.status = ProgramStatus::done;
            return std::nullopt;
        }
        c->agent = p.agent;
        try {
            validate_action(*c);
        } catch (const SimError& e) {
            // Unusable choice: the agent idles this tick and the program carries on.
            p.reason = std::string("rejected external choice: ") + e.what();
            c = ActionCommand{p.agent, "do_nothing", json::object()};
        }
        p.last_emitted = *c;
        ++p.emitted;
        return c;
    }

    if (p.awaiting) {
        p.awaiting = false;
        const ActionFeedback& fb = a.last;
        if (fb.outcome == "blocked") {
            // Between two walkers the lower id gives up waiting first and detours,
            // so a head-on pair does not sidestep into each other.
            int budget = p.wait_budget;
            if (auto b = last_blocker_id(w, p.agent); b && w.agents().count(*b) && *b > p.agent)
                budget = std::min(budget, 4);
            if (last_collision_dynamic(w, p.agent) && ++p.waits <= budget) {
                p.pending.push_front(p.last_emitted);  // wait it out by retrying
            } else if (!replan(p, w, a)) {
                return std::nullopt;
            }
        } else if (fb.outcome == "invalid") {
            set_failed(p, fb.verb + ": " + fb.error.value_or("invalid"));
            return std::nullopt;
        }
    }

    const double range = w.config().interact_range;
    while (p.pending.empty()) {
        if (p.queue.empty()) {
            p.status = ProgramStatus::done;
            return std::nullopt;
        }
        QueueItem it = p.queue.front();
        p.queue.pop_front();
        if (it.kind == QueueItem::Kind::hop) {
            if (it.leg != p.current_leg) {
                p.current_leg = it.leg;
                p.current_leg_goal = it.leg_goal;
                p.replans = p.waits = 0;
                p.penalty.clear();
            }
            p.hops_started.push_back(it.hop);
            Vec2 target = w.map().fine.node(it.hop.to).pos;
            double d = dist(a.pose.pos(), target);
            compile_move(p, a, target, static_cast<std::size_t>(std::llround(d / step_length(w, a))));
            continue;
        }
        p.current_leg = static_cast<std::size_t>(-1);
        p.current_leg_goal = kNone;
        if (it.kind == QueueItem::Kind::approach) {
            const SceneEntity* e = w.scene().find(it.entity);
            if (!e) {
                set_failed(p, "target " + std::to_string(it.entity) + " vanished");
                return std::nullopt;
            }
            double d = e->footprint.distance_to(a.pose.pos());
            if (d > range - 0.05) {
                Vec2 pos = a.pose.pos();
                Vec2 c{std::clamp(pos.x, e->footprint.min_x, e->footprint.max_x),
                       std::clamp(pos.y, e->footprint.min_y, e->footprint.max_y)};
                auto n = static_cast<std::size_t>(std::ceil((d - (range - 0.3)) / step_length(w, a)));
                compile_move(p, a, c, n);
            }
            continue;
        }
        if (it.kind == QueueItem::Kind::hook) {
            if (!p.ext || !p.ext->hooks.count(it.hook)) {
                set_failed(p, "no hook '" + it.hook + "'");
                return std::nullopt;
            }
            if (auto e = p.ext->hooks.at(it.hook)(w, p.agent, it.hook_args)) {
                set_failed(p, it.hook + ": " + *e);
                return std::nullopt;
            }
            continue;
        }
        p.pending.push_back(it.cmd);
    }
    ActionCommand c = p.pending.front();
    p.pending.pop_front();
    p.awaiting = true;
    p.last_emitted = c;
    ++p.emitted;
    return c;
}

void ExecutorRegistry::add(const std::string& endpoint, ExternalChooser c) {
    std::lock_guard lk(mu_);
    endpoints_[endpoint] = std::move(c);
}

void ExecutorRegistry::remove(const std::string& endpoint) {
    std::lock_guard lk(mu_);
    endpoints_.erase(endpoint);
}

std::optional<ExternalChooser> ExecutorRegistry::find(const std::string& endpoint) const {
    std::lock_guard lk(mu_);
    auto it = endpoints_.find(endpoint);
    if (it == endpoints_.end()) return std::nullopt;
    return it->second;
}

void attach_external_executor(PlanProgram& p, const ExecutorRegistry& reg, const std::string& endpoint,
                              std::chrono::milliseconds timeout) {
    auto c = reg.find(endpoint);
    if (!c) fail(err::EndpointUnavailable, "no executor endpoint '" + endpoint + "'");
    p.external = *c;
    p.timeout = timeout;
    p.status = ProgramStatus::running;
}

ProgramStatus run_program(PlanProgram& p, World& w, std::size_t max_ticks) {
    for (std::size_t t = 0; t < max_ticks; ++t) {
        auto c = tick_executor(p, w);
        if (!c) break;
        std::vector<ActionCommand> batch;
        for (const auto& [id, ag] : w.agents())
            batch.push_back(id == p.agent ? *c : ActionCommand{id, "do_nothing", json::object()});
        w.step_sync(batch);
    }
    return p.status;
}

}  // namespace simworld
