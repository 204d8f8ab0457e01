#include "simworld/traffic.hpp"

#include <algorithm>
#include <cmath>

#include "simworld/error.hpp"

namespace simworld {

double PIDState::update(double error, double dt, double lo, double hi) {
    const double deriv = has_prev ? (error - prev_error) / dt : 0.0;
    prev_error = error;
    has_prev = true;
    double out = kp * error + ki * integral + kd * deriv;
    // Conditional integration: skip while saturated in the direction of the error.
    const bool sat_hi = out >= hi && error > 0, sat_lo = out <= lo && error < 0;
    if (!sat_hi && !sat_lo) {
        integral = std::clamp(integral + error * dt, -integral_clamp, integral_clamp);
        out = kp * error + ki * integral + kd * deriv;
    }
    return std::clamp(out, lo, hi);
}

const char* to_string(SignalPhase p) {
    switch (p) {
        case SignalPhase::green: return "green";
        case SignalPhase::yellow: return "yellow";
        case SignalPhase::red: return "red";
    }
    return "?";
}

double SignalState::duration(SignalPhase p) const {
    return p == SignalPhase::green ? timing.green : p == SignalPhase::yellow ? timing.yellow : timing.red;
}

void SignalState::advance(double dt) {
    elapsed_us += std::llround(dt * 1e6);
    for (;;) {
        const std::int64_t d = std::llround(duration(phase) * 1e6);
        if (elapsed_us < d) break;
        elapsed_us -= d;
        phase = phase == SignalPhase::green ? SignalPhase::yellow
                : phase == SignalPhase::yellow ? SignalPhase::red
                                               : SignalPhase::green;
    }
}

SignalPhase SignalState::phase_for(bool x_axis) const {
    if (x_axis) return phase;
    if (phase != SignalPhase::red) return SignalPhase::red;
    const std::int64_t green_part = std::llround((timing.red - timing.yellow) * 1e6);
    return elapsed_us < green_part ? SignalPhase::green : SignalPhase::yellow;
}

json TrafficConfig::to_json() const {
    json j;
    j["dt"] = dt;
    j["cruise_speed"] = cruise_speed;
    j["v_max"] = v_max;
    j["a_min"] = a_min;
    j["a_max"] = a_max;
    j["pid"] = json{{"kp", pid.kp}, {"ki", pid.ki}, {"kd", pid.kd}, {"integral_clamp", pid.integral_clamp}};
    j["time_headway"] = time_headway;
    j["standstill_gap"] = standstill_gap;
    j["lookahead"] = lookahead;
    j["brake_decel"] = brake_decel;
    j["stop_margin"] = stop_margin;
    j["vehicle_length"] = vehicle_length;
    j["vehicle_width"] = vehicle_width;
    j["ped_speed"] = ped_speed;
    j["ped_size"] = ped_size;
    j["ped_max_turn_rate"] = ped_max_turn_rate;
    j["arrive_radius"] = arrive_radius;
    j["ped_give_up_ticks"] = ped_give_up_ticks;
    j["signal_timing"] = json::array({signal_timing.green, signal_timing.yellow, signal_timing.red});
    return j;
}

TrafficConfig TrafficConfig::from_json(const json& j) {
    TrafficConfig c;
    try {
        auto get = [&](const char* k, auto& v) {
            if (j.contains(k)) v = j.at(k).get<std::decay_t<decltype(v)>>();
        };
        get("dt", c.dt);
        get("cruise_speed", c.cruise_speed);
        get("v_max", c.v_max);
        get("a_min", c.a_min);
        get("a_max", c.a_max);
        if (j.contains("pid")) {
            const json& p = j.at("pid");
            c.pid.kp = p.value("kp", c.pid.kp);
            c.pid.ki = p.value("ki", c.pid.ki);
            c.pid.kd = p.value("kd", c.pid.kd);
            c.pid.integral_clamp = p.value("integral_clamp", c.pid.integral_clamp);
        }
        get("time_headway", c.time_headway);
        get("standstill_gap", c.standstill_gap);
        get("lookahead", c.lookahead);
        get("brake_decel", c.brake_decel);
        get("stop_margin", c.stop_margin);
        get("vehicle_length", c.vehicle_length);
        get("vehicle_width", c.vehicle_width);
        get("ped_speed", c.ped_speed);
        get("ped_size", c.ped_size);
        get("ped_max_turn_rate", c.ped_max_turn_rate);
        get("arrive_radius", c.arrive_radius);
        get("ped_give_up_ticks", c.ped_give_up_ticks);
        if (j.contains("signal_timing")) {
            const json& t = j.at("signal_timing");
            c.signal_timing = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>()};
        }
    } catch (const json::exception& e) {
        fail(err::ConfigInvalid, std::string("traffic config: ") + e.what());
    }
    if (!(c.dt > 0) || c.v_max <= 0 || c.cruise_speed < 0 || c.cruise_speed > c.v_max || c.a_min >= 0 || c.a_max <= 0 ||
        c.signal_timing.green <= 0 || c.signal_timing.yellow <= 0 || c.signal_timing.red < c.signal_timing.yellow ||
        c.brake_decel <= 0 || c.ped_speed < 0 || c.ped_max_turn_rate <= 0)
        fail(err::ConfigInvalid, "traffic config out of range");
    return c;
}

const SignalState* TrafficState::signal_for(std::size_t intersection_id) const {
    auto it = std::lower_bound(signals.begin(), signals.end(), intersection_id,
                               [](const SignalState& s, std::size_t id) { return s.intersection_id < id; });
    return it != signals.end() && it->intersection_id == intersection_id ? &*it : nullptr;
}

AABB TrafficState::footprint(const VehicleState& v) const {
    return oriented_box(v.pose.pos(), v.pose.yaw, config.vehicle_length, config.vehicle_width);
}

AABB TrafficState::footprint(const PedestrianState& p) const {
    return AABB::centered(p.pose.pos(), config.ped_size / 2, config.ped_size / 2);
}

namespace {

json pid_json(const PIDState& p) {
    return json{{"integral", p.integral}, {"prev_error", p.prev_error}, {"has_prev", p.has_prev}};
}

json pose_json(const Pose2D& p) { return json{{"x", p.x}, {"y", p.y}, {"yaw", p.yaw}}; }

}  // namespace

json TrafficState::to_json() const {
    json j;
    j["tick"] = tick;
    j["seed"] = seed;
    j["config"] = config.to_json();
    json vs = json::array();
    for (const auto& v : vehicles) {
        json r = json::array();
        for (std::size_t i = v.route_cursor; i < v.route.size(); ++i) r.push_back(v.route[i]);
        vs.push_back(json{{"id", v.id}, {"pose", pose_json(v.pose)}, {"speed", v.speed}, {"target_speed", v.target_speed},
                          {"route", std::move(r)}, {"holding", v.holding}, {"pid", pid_json(v.pid)},
                          {"rng", v.rng_state}});
    }
    j["vehicles"] = std::move(vs);
    json ps = json::array();
    for (const auto& p : pedestrians)
        ps.push_back(json{{"id", p.id}, {"pose", pose_json(p.pose)}, {"speed", p.speed}, {"goal", p.goal},
                          {"prev", p.prev == kNone ? json(nullptr) : json(p.prev)}, {"waiting", p.waiting},
                          {"blocked_ticks", p.blocked_ticks}, {"rng", p.rng_state}});
    j["pedestrians"] = std::move(ps);
    json ss = json::array();
    for (const auto& s : signals)
        ss.push_back(json{{"id", s.id}, {"intersection_id", s.intersection_id}, {"phase", to_string(s.phase)},
                          {"phase_elapsed", s.phase_elapsed()}});
    j["signals"] = std::move(ss);
    return j;
}

TrafficState make_traffic(const MapData& map, const TrafficConfig& cfg, std::uint64_t seed) {
    TrafficState st;
    st.config = cfg;
    st.seed = seed;
    st.next_id = map.city.scene.next_id();
    for (const Intersection& in : map.city.roads.intersections) {
        if (in.degree() < 3) continue;
        SignalState s;
        s.id = in.id;
        s.intersection_id = in.id;
        s.timing = cfg.signal_timing;
        st.signals.push_back(s);
    }
    return st;
}

WaypointId choose_route(Rng& rng, const WaypointGraph& g, WaypointId node, WaypointId came_from, RouteMode mode) {
    const Waypoint& here = g.node(node);
    std::vector<WaypointId> options;
    WaypointId uturn = kNone;
    for (const Edge& e : g.out(node)) {
        if (!g.traversable(e.to, mode) || g.blocked(e.to)) continue;
        const Waypoint& w = g.node(e.to);
        bool is_uturn = e.to == came_from ||
                        (mode == RouteMode::vehicle && !e.interpolated && w.segment_id == here.segment_id);
        if (is_uturn) uturn = e.to;
        else options.push_back(e.to);
    }
    if (options.empty()) {
        if (uturn == kNone) fail(err::NoPath, "waypoint " + std::to_string(node) + " has no outgoing edge");
        return uturn;
    }
    return options[rng.below(options.size())];
}

namespace {

// Polyline from the current position through the remaining route nodes.
struct Ahead {
    std::vector<Vec2> pts;
    std::vector<double> cum;  // distance from the vehicle to pts[i]
};

Ahead ahead_of(const WaypointGraph& g, const VehicleState& v, double limit) {
    Ahead a;
    a.pts.push_back(v.pose.pos());
    a.cum.push_back(0);
    for (std::size_t i = v.route_cursor; i < v.route.size(); ++i) {
        Vec2 p = g.node(v.route[i]).pos;
        a.cum.push_back(a.cum.back() + dist(a.pts.back(), p));
        a.pts.push_back(p);
        if (a.cum.back() > limit) break;
    }
    return a;
}

// Along-route distance of point q if it lies within `lateral` of the polyline ahead.
std::optional<double> along(const Ahead& a, Vec2 q, double lateral) {
    std::optional<double> best;
    for (std::size_t i = 0; i + 1 < a.pts.size(); ++i) {
        Vec2 p0 = a.pts[i], d = a.pts[i + 1] - p0;
        double len = d.norm();
        if (len <= 0) continue;
        double t = (q - p0).dot(d) / len;
        if (t < 0 || t > len) continue;
        Vec2 foot = p0 + d * (t / len);
        if (dist(foot, q) > lateral) continue;
        double s = a.cum[i] + t;
        if (s > 1e-9 && (!best || s < *best)) best = s;
    }
    return best;
}

double remaining_length(const WaypointGraph& g, const VehicleState& v) {
    double s = 0;
    Vec2 p = v.pose.pos();
    for (std::size_t i = v.route_cursor; i < v.route.size(); ++i) {
        Vec2 q = g.node(v.route[i]).pos;
        s += dist(p, q);
        p = q;
    }
    return s;
}

void ensure_route(const MapData& map, const TrafficState& st, VehicleState& v) {
    const WaypointGraph& g = map.fine;
    if (v.route_cursor > 1) {
        v.route.erase(v.route.begin(), v.route.begin() + static_cast<std::ptrdiff_t>(v.route_cursor - 1));
        v.route_cursor = 1;
    }
    Rng rng(v.rng_state);
    while (remaining_length(g, v) < st.config.lookahead + 20) {
        WaypointId last = v.route.back();
        WaypointId before = v.route.size() >= 2 ? v.route[v.route.size() - 2] : kNone;
        WaypointId next = choose_route(rng, g, last, before, RouteMode::vehicle);
        const Waypoint& w = g.node(next);
        const auto& lane = g.lanes[w.segment_id][w.side > 0 ? 0 : 1];
        auto it = std::find(lane.begin(), lane.end(), next);
        v.route.insert(v.route.end(), it, lane.end());
    }
    v.rng_state = rng.state();
}

bool blocked_by_others(const SceneGraph& scene, const TrafficState& st, const AABB& fp, EntityId self) {
    if (scene.collides(fp)) return true;
    for (const auto& o : st.vehicles)
        if (o.id != self && st.footprint(o).overlaps(fp)) return true;
    for (const auto& o : st.pedestrians)
        if (o.id != self && st.footprint(o).overlaps(fp)) return true;
    for (const auto& [id, box] : st.external)
        if (id != self && box.overlaps(fp)) return true;
    return false;
}

bool is_x_axis(const RoadNetwork& net, std::size_t seg) { return std::abs(net.segments[seg].dir().x) > 0.5; }

}  // namespace

VehiclePerception perceive(const MapData& map, const TrafficState& st, const VehicleState& v) {
    const WaypointGraph& g = map.fine;
    const TrafficConfig& c = st.config;
    VehiclePerception out;
    Ahead a = ahead_of(g, v, c.lookahead);
    const Vec2 me = heading(v.pose.yaw);
    auto consider = [&](Vec2 q, double back_off) {
        auto s = along(a, q, 1.5);
        if (!s || *s > c.lookahead) return;
        double gap = *s - back_off;
        if (!out.leader_gap || gap < *out.leader_gap) out.leader_gap = gap;
    };
    for (const auto& o : st.vehicles)
        if (o.id != v.id && heading(o.pose.yaw).dot(me) > 0.5) consider(o.pose.pos(), c.vehicle_length);
    for (const auto& p : st.pedestrians) consider(p.pose.pos(), c.vehicle_length / 2 + c.ped_size / 2);
    for (const auto& [id, box] : st.external)
        if (id != v.id) consider(box.center(), c.vehicle_length / 2 + std::max(box.width(), box.height()) / 2);

    // Next lane end ahead: stop line of the coming intersection.
    double s = 0;
    Vec2 p = v.pose.pos();
    for (std::size_t i = v.route_cursor; i < v.route.size(); ++i) {
        const Waypoint& w = g.node(v.route[i]);
        s += dist(p, w.pos);
        p = w.pos;
        if (s > c.lookahead) break;
        if (w.intersection_id == kNone) continue;
        if (const SignalState* sig = st.signal_for(w.intersection_id)) {
            out.stop_distance = s;
            out.signal = sig->phase_for(is_x_axis(map.city.roads, w.segment_id));
        }
        break;
    }
    return out;
}

double target_speed_for(const TrafficConfig& c, VehicleState& v, const VehiclePerception& p) {
    if (!p.signal || *p.signal == SignalPhase::green) v.holding = false;
    if (p.signal && *p.signal != SignalPhase::green && p.stop_distance) {
        const double brake = v.speed * v.speed / (2 * c.brake_decel) + c.stop_margin;
        const bool can_stop = *p.stop_distance >= v.speed * v.speed / (2 * -c.a_min);
        if (*p.stop_distance <= brake && (*p.signal == SignalPhase::red || can_stop || v.holding)) v.holding = true;
    }
    if (v.holding) return 0;
    if (p.leader_gap && *p.leader_gap < c.time_headway * v.speed + c.standstill_gap) return 0;
    return c.cruise_speed;
}

void spawn_population(const MapData& map, TrafficState& st, std::size_t n_vehicles, std::size_t n_pedestrians, Rng& rng,
                      const SceneGraph* scene_override) {
    const WaypointGraph& g = map.fine;
    const SceneGraph& scene = scene_override ? *scene_override : map.city.scene;
    std::vector<WaypointId> lane_slots, walk_slots;
    for (const Waypoint& w : g.nodes()) {
        if (w.kind == WaypointKind::road_lane) lane_slots.push_back(w.id);
        else if (w.kind == WaypointKind::fine_sidewalk && !g.blocked(w.id)) walk_slots.push_back(w.id);
    }
    if (n_vehicles > lane_slots.size()) fail(err::InsufficientSpace, "more vehicles than lane slots");
    if (n_pedestrians > walk_slots.size()) fail(err::InsufficientSpace, "more pedestrians than sidewalk slots");
    auto shuffle = [&](std::vector<WaypointId>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    };
    shuffle(lane_slots);
    shuffle(walk_slots);

    std::size_t placed = 0;
    for (WaypointId slot : lane_slots) {
        if (placed == n_vehicles) break;
        const Waypoint& w = g.node(slot);
        const auto& lane = g.lanes[w.segment_id][w.side > 0 ? 0 : 1];
        VehicleState v;
        v.id = st.next_id;
        Vec2 dir = dist(g.node(lane[0]).pos, g.node(lane[1]).pos) > 0 ? g.node(lane[1]).pos - g.node(lane[0]).pos : Vec2{1, 0};
        v.pose = Pose2D(w.pos.x, w.pos.y, std::atan2(dir.y, dir.x));
        if (blocked_by_others(scene, st, st.footprint(v), v.id)) continue;
        auto it = std::find(lane.begin(), lane.end(), slot);
        v.route.assign(it, lane.end());
        v.route_cursor = 1;
        v.pid = st.config.pid;
        v.rng_state = Rng::derive(st.seed, v.id).state();
        ensure_route(map, st, v);
        st.vehicles.push_back(std::move(v));
        ++st.next_id;
        ++placed;
    }
    if (placed < n_vehicles) fail(err::InsufficientSpace, "no room for " + std::to_string(n_vehicles) + " vehicles");

    placed = 0;
    for (WaypointId slot : walk_slots) {
        if (placed == n_pedestrians) break;
        const Waypoint& w = g.node(slot);
        // Skip pockets sealed off by obstacles: a walker there could never move.
        bool exits = false;
        for (const Edge& e : g.out(slot))
            exits = exits || (g.traversable(e.to, RouteMode::pedestrian) && !g.blocked(e.to));
        if (!exits) continue;
        PedestrianState p;
        p.id = st.next_id;
        p.speed = st.config.ped_speed;
        p.max_turn_rate = st.config.ped_max_turn_rate;
        Rng r = Rng::derive(st.seed, p.id);
        p.pose = Pose2D(w.pos.x, w.pos.y, r.uniform(-kPi, kPi));
        if (blocked_by_others(scene, st, st.footprint(p), p.id)) continue;
        p.prev = slot;
        p.goal = choose_route(r, g, slot, kNone, RouteMode::pedestrian);
        p.rng_state = r.state();
        st.pedestrians.push_back(p);
        ++st.next_id;
        ++placed;
    }
    if (placed < n_pedestrians) fail(err::InsufficientSpace, "no room for " + std::to_string(n_pedestrians) + " pedestrians");
}

namespace {

void step_vehicle(const MapData& map, const SceneGraph& scene, TrafficState& st, VehicleState& v) {
    const TrafficConfig& c = st.config;
    const WaypointGraph& g = map.fine;
    VehiclePerception p = perceive(map, st, v);
    v.target_speed = target_speed_for(c, v, p);
    const double acc = v.pid.update(v.target_speed - v.speed, c.dt, c.a_min, c.a_max);
    const double new_speed = std::clamp(v.speed + acc * c.dt, 0.0, c.v_max);

    VehicleState moved = v;
    moved.speed = new_speed;
    double remaining = new_speed * c.dt;
    Vec2 pos = v.pose.pos();
    double yaw = v.pose.yaw;
    while (remaining > 0 && moved.route_cursor < moved.route.size()) {
        Vec2 t = g.node(moved.route[moved.route_cursor]).pos;
        double d = dist(pos, t);
        if (d > 0) yaw = std::atan2(t.y - pos.y, t.x - pos.x);
        if (d <= remaining) {
            pos = t;
            remaining -= d;
            ++moved.route_cursor;
        } else {
            pos = pos + (t - pos) * (remaining / d);
            remaining = 0;
        }
    }
    moved.pose = Pose2D(pos.x, pos.y, yaw);
    if (new_speed > 0 && blocked_by_others(scene, st, st.footprint(moved), v.id)) {
        if (v.speed > 0) st.events.push_back({st.tick, v.id, "blocked"});
        v.speed = 0;
        return;
    }
    v = std::move(moved);
    ensure_route(map, st, v);
}

void step_pedestrian(const MapData& map, const SceneGraph& scene, TrafficState& st, PedestrianState& p) {
    const TrafficConfig& c = st.config;
    const WaypointGraph& g = map.fine;
    const Vec2 goal = g.node(p.goal).pos;
    const Vec2 here = p.pose.pos();
    const double d = dist(here, goal);

    // Hold at the kerb while the crossing shows "don't walk".
    p.waiting = false;
    if (p.prev != kNone) {
        const Crosswalk* cw = g.crosswalk_of(p.goal);
        if (cw && cw->signal_id && (p.goal != cw->nodes.front() && p.goal != cw->nodes.back()) &&
            (p.prev == cw->nodes.front() || p.prev == cw->nodes.back())) {
            const SignalState* sig = st.signal_for(*cw->signal_id);
            if (sig && !sig->walkable(cw->crosses_x_road)) p.waiting = true;
        }
    }

    if (d > 0) {
        const double err = normalize_angle(std::atan2(goal.y - here.y, goal.x - here.x) - p.pose.yaw);
        const double lim = p.max_turn_rate * c.dt;
        p.pose.set_yaw(p.pose.yaw + std::clamp(err, -lim, lim));
    }
    if (p.waiting) return;
    const double err = d > 0 ? normalize_angle(std::atan2(goal.y - here.y, goal.x - here.x) - p.pose.yaw) : 0;
    if (std::abs(err) <= kPi / 4 && d > 0) {
        const double step = std::min(p.speed * c.dt, d);
        PedestrianState moved = p;
        Vec2 np = here + heading(p.pose.yaw) * step;
        moved.pose = Pose2D(np.x, np.y, p.pose.yaw);
        if (blocked_by_others(scene, st, st.footprint(moved), p.id)) {
            if (p.blocked_ticks == 0) st.events.push_back({st.tick, p.id, "blocked"});
            if (++p.blocked_ticks >= c.ped_give_up_ticks && p.prev != kNone) {
                std::swap(p.goal, p.prev);
                p.blocked_ticks = 0;
            }
            return;
        }
        p.pose = moved.pose;
        p.blocked_ticks = 0;
    }
    if (dist(p.pose.pos(), goal) <= c.arrive_radius) {
        Rng r(p.rng_state);
        WaypointId next = choose_route(r, g, p.goal, p.prev, RouteMode::pedestrian);
        p.rng_state = r.state();
        p.prev = p.goal;
        p.goal = next;
    }
}

}  // namespace

void step_traffic(const MapData& map, TrafficState& st, const SceneGraph* scene_override) {
    const SceneGraph& scene = scene_override ? *scene_override : map.city.scene;
    for (auto& v : st.vehicles) step_vehicle(map, scene, st, v);
    for (auto& p : st.pedestrians) step_pedestrian(map, scene, st, p);
    for (auto& s : st.signals) s.advance(st.config.dt);
    ++st.tick;
}

}  // namespace simworld
