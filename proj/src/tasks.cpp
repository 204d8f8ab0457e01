#include "simworld/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "simworld/error.hpp"
#include "simworld/planner.hpp"

namespace simworld {

const char* to_string(Difficulty d) {
    switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::medium: return "medium";
    case Difficulty::hard: return "hard";
    case Difficulty::dynamic: return "dynamic";
    }
    return "easy";
}

Difficulty difficulty_from_string(const std::string& s) {
    for (Difficulty d : {Difficulty::easy, Difficulty::medium, Difficulty::hard, Difficulty::dynamic})
        if (s == to_string(d)) return d;
    fail(err::ConfigInvalid, "unknown difficulty '" + s + "'");
}

const char* to_string(SubTaskKind k) {
    switch (k) {
    case SubTaskKind::orientation_alignment: return "orientation_alignment";
    case SubTaskKind::move_along_road: return "move_along_road";
    case SubTaskKind::turning_at_intersection: return "turning_at_intersection";
    case SubTaskKind::reach_destination: return "reach_destination";
    }
    return "orientation_alignment";
}

SubTaskKind subtask_kind_from_string(const std::string& s) {
    for (SubTaskKind k : {SubTaskKind::orientation_alignment, SubTaskKind::move_along_road,
                          SubTaskKind::turning_at_intersection, SubTaskKind::reach_destination})
        if (s == to_string(k)) return k;
    fail(err::ConfigInvalid, "unknown subtask kind '" + s + "'");
}

const char* to_string(MetricFamily f) {
    switch (f) {
    case MetricFamily::instruction: return "instruction";
    case MetricFamily::physical: return "physical";
    case MetricFamily::search: return "search";
    }
    return "physical";
}

MetricFamily metric_family_from_string(const std::string& s) {
    for (MetricFamily f : {MetricFamily::instruction, MetricFamily::physical, MetricFamily::search})
        if (s == to_string(f)) return f;
    fail(err::ConfigInvalid, "unknown metric family '" + s + "'");
}

namespace {

json opt_id(const std::optional<EntityId>& e) { return e ? json(*e) : json(nullptr); }
std::optional<EntityId> opt_id(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<EntityId>();
}

template <class T>
T req(const json& j, const char* key) {
    if (!j.contains(key)) fail(err::ConfigInvalid, std::string("missing field '") + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(err::ConfigInvalid, std::string("bad field '") + key + "'");
    }
}

const char* compass(double yaw) {
    static const char* names[] = {"east", "north", "west", "south"};
    int q = static_cast<int>(std::lround(normalize_angle(yaw) / (kPi / 2)));
    return names[((q % 4) + 4) % 4];
}

std::string describe(const SceneEntity& e) {
    for (const char* t : {"landmark", "shop", "office", "residential"})
        if (e.has_tag(t)) return std::string(t) + " building";
    if (!e.tags.empty()) return *e.tags.begin() + " building";
    return "building";
}

bool is_sidewalk(const Waypoint& w) { return w.kind == WaypointKind::coarse_sidewalk; }

}  // namespace

json SubTask::to_json() const {
    return json{{"kind", to_string(kind)}, {"goal", goal},          {"yaw", yaw},
                {"instruction", instruction}, {"landmark", opt_id(landmark)}, {"direction", direction}};
}

SubTask SubTask::from_json(const json& j) {
    SubTask s;
    s.kind = subtask_kind_from_string(req<std::string>(j, "kind"));
    s.goal = req<WaypointId>(j, "goal");
    s.yaw = req<double>(j, "yaw");
    s.instruction = j.value("instruction", "");
    if (j.contains("landmark")) s.landmark = opt_id(j["landmark"]);
    s.direction = j.value("direction", "");
    return s;
}

json NavTask::to_json() const {
    json subs = json::array();
    for (const auto& s : subtasks) subs.push_back(s.to_json());
    return json{{"id", id},
                {"difficulty", to_string(difficulty)},
                {"route", route},
                {"start", start},
                {"goal", goal},
                {"goal_yaw", goal_yaw},
                {"subtasks", subs},
                {"time_limit", time_limit},
                {"obstacle_mode", obstacle_mode},
                {"pedestrians", pedestrians},
                {"start_building", opt_id(start_building)},
                {"goal_building", opt_id(goal_building)}};
}

NavTask NavTask::from_json(const json& j) {
    if (!j.is_object()) fail(err::ConfigInvalid, "task must be an object");
    NavTask t;
    t.id = req<std::size_t>(j, "id");
    t.difficulty = difficulty_from_string(req<std::string>(j, "difficulty"));
    t.route = req<std::vector<WaypointId>>(j, "route");
    t.start = req<WaypointId>(j, "start");
    t.goal = req<WaypointId>(j, "goal");
    t.goal_yaw = j.value("goal_yaw", 0.0);
    if (j.contains("subtasks"))
        for (const auto& s : j["subtasks"]) t.subtasks.push_back(SubTask::from_json(s));
    t.time_limit = req<std::uint64_t>(j, "time_limit");
    t.obstacle_mode = j.value("obstacle_mode", false);
    t.pedestrians = j.value("pedestrians", std::size_t{0});
    if (j.contains("start_building")) t.start_building = opt_id(j["start_building"]);
    if (j.contains("goal_building")) t.goal_building = opt_id(j["goal_building"]);
    return t;
}

// ---------------------------------------------------------------------------
// Routes

std::size_t route_segment_count(const WaypointGraph& coarse, const std::vector<WaypointId>& route) {
    std::size_t n = 0, last = kNone;
    for (WaypointId id : route) {
        const Waypoint& w = coarse.node(id);
        if (!is_sidewalk(w) || w.segment_id == kNone) continue;
        if (w.segment_id != last) ++n;
        last = w.segment_id;
    }
    return n;
}

std::vector<RouteRun> route_runs(const MapData& map, const std::vector<WaypointId>& route) {
    const WaypointGraph& g = map.coarse;
    std::vector<RouteRun> runs;
    std::vector<std::size_t> first_index;  // route index of each run's first node
    bool broken = true;
    for (std::size_t i = 0; i < route.size(); ++i) {
        const Waypoint& w = g.node(route[i]);
        if (!is_sidewalk(w)) {
            broken = true;
            continue;
        }
        if (broken || runs.back().segment != w.segment_id || runs.back().side != w.side) {
            runs.push_back({w.segment_id, w.side, {}, 0});
            first_index.push_back(i);
        }
        runs.back().nodes.push_back(route[i]);
        broken = false;
    }
    for (std::size_t k = 0; k < runs.size(); ++k) {
        RouteRun& r = runs[k];
        const RoadSegment& seg = map.city.roads.segments.at(r.segment);
        int sign = 1;
        if (r.nodes.size() >= 2) {
            sign = g.node(r.nodes.back()).station > g.node(r.nodes.front()).station ? 1 : -1;
        } else {
            std::size_t i = first_index[k];
            if (i + 1 < route.size() && g.node(route[i + 1]).kind == WaypointKind::coarse_intersection)
                sign = g.node(route[i + 1]).intersection_id == seg.b_node ? 1 : -1;
            else if (i > 0 && g.node(route[i - 1]).kind == WaypointKind::coarse_intersection)
                sign = g.node(route[i - 1]).intersection_id == seg.a_node ? 1 : -1;
        }
        Vec2 d = seg.dir() * sign;
        r.yaw = std::atan2(d.y, d.x);
    }
    return runs;
}

namespace {

std::vector<WaypointId> sidewalk_nodes(const WaypointGraph& g) {
    std::vector<WaypointId> out;
    for (const auto& w : g.nodes())
        if (is_sidewalk(w) && g.traversable(w.id, RouteMode::pedestrian) && !g.blocked(w.id)) out.push_back(w.id);
    return out;
}

std::uint64_t time_limit_for(double metres, const TaskGenConfig& cfg) {
    return static_cast<std::uint64_t>(std::ceil(cfg.time_slack * metres / cfg.step_length)) + cfg.stuck_window;
}

bool level_accepts(Difficulty d, std::size_t segments) {
    switch (d) {
    case Difficulty::easy: return segments >= 1 && segments <= 2;
    case Difficulty::medium:
    case Difficulty::dynamic: return segments >= 3 && segments <= 4;
    case Difficulty::hard: return segments >= 5;
    }
    return false;
}

}  // namespace

std::vector<NavTask> gen_physical_tasks(const MapData& map, std::size_t count_per_level, Rng& rng,
                                        const TaskGenConfig& cfg) {
    const WaypointGraph& g = map.coarse;
    std::vector<WaypointId> nodes = sidewalk_nodes(g);
    if (nodes.size() < 2) fail(err::InfeasibleMap, "map has fewer than two coarse sidewalk nodes");
    std::vector<NavTask> out;
    for (Difficulty d : {Difficulty::easy, Difficulty::medium, Difficulty::hard, Difficulty::dynamic}) {
        for (std::size_t k = 0; k < count_per_level; ++k) {
            bool placed = false;
            for (std::size_t attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
                WaypointId s = nodes[rng.below(nodes.size())], t = nodes[rng.below(nodes.size())];
                if (s == t) continue;
                PathResult pr;
                try {
                    pr = astar(g, s, t, RouteMode::pedestrian);
                } catch (const SimError&) {
                    continue;
                }
                if (!level_accepts(d, route_segment_count(g, pr.path))) continue;
                NavTask task;
                task.id = out.size();
                task.difficulty = d;
                task.route = pr.path;
                task.start = s;
                task.goal = t;
                auto runs = route_runs(map, pr.path);
                task.goal_yaw = runs.empty() ? 0 : runs.back().yaw;
                task.time_limit = time_limit_for(pr.metres(), cfg);
                task.obstacle_mode = d == Difficulty::hard || d == Difficulty::dynamic;
                task.pedestrians = d == Difficulty::dynamic ? cfg.dynamic_pedestrians : 0;
                out.push_back(std::move(task));
                placed = true;
            }
            if (!placed)
                fail(err::InfeasibleMap, std::string("no ") + to_string(d) + " route after " +
                                             std::to_string(cfg.max_attempts) + " attempts");
        }
    }
    return out;
}

WaypointId front_door(const MapData& map, EntityId building) {
    const AABB& fp = map.city.scene.at(building).footprint;
    WaypointId best = kNone;
    double bd = 0;
    for (const auto& w : map.coarse.nodes()) {
        if (!is_sidewalk(w) || !map.coarse.traversable(w.id, RouteMode::pedestrian)) continue;
        double d = fp.distance_to(w.pos);
        if (best == kNone || d < bd) {
            best = w.id;
            bd = d;
        }
    }
    return best;
}

double facing_yaw(const MapData& map, WaypointId wp, EntityId building) {
    Vec2 d = map.city.scene.at(building).footprint.center() - map.coarse.node(wp).pos;
    return std::atan2(d.y, d.x);
}

namespace {

// Largest-footprint building within `radius` of the polyline through `nodes` (ties: smaller id).
std::optional<EntityId> prominent_building(const MapData& map, const std::vector<WaypointId>& nodes, double radius) {
    std::vector<Vec2> samples;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        Vec2 a = map.coarse.node(nodes[i]).pos;
        samples.push_back(a);
        if (i + 1 < nodes.size()) {
            Vec2 b = map.coarse.node(nodes[i + 1]).pos;
            int n = static_cast<int>(std::ceil(dist(a, b)));
            for (int k = 1; k < n; ++k) samples.push_back(a + (b - a) * (static_cast<double>(k) / n));
        }
    }
    AABB box{samples[0].x, samples[0].y, samples[0].x, samples[0].y};
    for (Vec2 p : samples) box = {std::min(box.min_x, p.x), std::min(box.min_y, p.y), std::max(box.max_x, p.x),
                                  std::max(box.max_y, p.y)};
    std::optional<EntityId> best;
    double best_area = -1;
    for (EntityId id : map.city.scene.query_region(box.expanded(radius))) {
        const SceneEntity& e = map.city.scene.at(id);
        if (e.category != Category::building) continue;
        bool near = false;
        for (Vec2 p : samples)
            if (e.footprint.distance_to(p) <= radius) {
                near = true;
                break;
            }
        if (near && e.footprint.area() > best_area) {  // ascending ids: strict > keeps the smaller id
            best = id;
            best_area = e.footprint.area();
        }
    }
    return best;
}

}  // namespace

std::vector<SubTask> gen_multimodal_subtasks(const MapData& map, WaypointId start, WaypointId goal,
                                             std::optional<EntityId> goal_building, const TaskGenConfig& cfg) {
    const WaypointGraph& g = map.coarse;
    std::vector<WaypointId> path = start == goal ? std::vector<WaypointId>{start}
                                                 : astar(g, start, goal, RouteMode::pedestrian).path;
    std::vector<RouteRun> runs = route_runs(map, path);
    double final_yaw = runs.empty() ? 0 : runs.back().yaw;
    if (goal_building) final_yaw = facing_yaw(map, goal, *goal_building);
    std::vector<SubTask> out;

    SubTask orient;
    orient.kind = SubTaskKind::orientation_alignment;
    orient.goal = start;
    orient.yaw = path.size() > 1 && !runs.empty() ? runs.front().yaw : final_yaw;
    orient.instruction = std::string("Turn to face ") + compass(orient.yaw) + " along the street.";
    out.push_back(orient);

    if (path.size() > 1) {
        // Straight continuations through an intersection stay in one stretch.
        std::vector<std::vector<RouteRun>> groups;
        for (const auto& r : runs) {
            if (!groups.empty() && std::abs(normalize_angle(r.yaw - groups.back().back().yaw)) <= kPi / 6)
                groups.back().push_back(r);
            else
                groups.push_back({r});
        }
        for (std::size_t k = 0; k < groups.size(); ++k) {
            const auto& grp = groups[k];
            if (k > 0) {
                double delta = normalize_angle(grp.front().yaw - groups[k - 1].back().yaw);
                SubTask turn;
                turn.kind = SubTaskKind::turning_at_intersection;
                turn.goal = grp.front().nodes.front();
                turn.yaw = grp.front().yaw;
                turn.direction = std::abs(delta) > kPi * 5 / 6 ? "around" : delta > 0 ? "left" : "right";
                turn.instruction = turn.direction == "around" ? "Turn around at the intersection."
                                                              : "Turn " + turn.direction + " at the intersection.";
                out.push_back(turn);
            }
            std::vector<WaypointId> stretch;
            for (const auto& r : grp) stretch.insert(stretch.end(), r.nodes.begin(), r.nodes.end());
            SubTask move;
            move.kind = SubTaskKind::move_along_road;
            move.goal = stretch.back();
            move.yaw = grp.back().yaw;
            move.landmark = prominent_building(map, stretch, cfg.landmark_radius);
            double len = 0;
            for (std::size_t i = 0; i + 1 < stretch.size(); ++i) len += dist(g.node(stretch[i]).pos, g.node(stretch[i + 1]).pos);
            std::ostringstream ins;
            ins << "Walk " << compass(move.yaw) << " along the road for about " << std::lround(len) << " m";
            if (move.landmark) ins << ", passing the " << describe(map.city.scene.at(*move.landmark));
            ins << (k + 1 < groups.size() ? ", until the next intersection." : ".");
            move.instruction = ins.str();
            out.push_back(move);
        }
    }

    SubTask reach;
    reach.kind = SubTaskKind::reach_destination;
    reach.goal = goal;
    reach.yaw = final_yaw;
    reach.landmark = goal_building;
    reach.instruction = goal_building ? "Stop in front of the " + describe(map.city.scene.at(*goal_building)) +
                                            " and face it."
                                      : std::string("Stop at the destination facing ") + compass(final_yaw) + ".";
    out.push_back(reach);
    return out;
}

NavTask gen_multimodal_task(const MapData& map, std::size_t id, Rng& rng, const TaskGenConfig& cfg) {
    std::vector<EntityId> tagged, any;
    for (const auto& [eid, e] : map.city.scene.entities())
        if (e.category == Category::building) (e.has_tag("landmark") ? tagged : any).push_back(eid);
    const std::vector<EntityId>& pool = tagged.size() >= 2 ? tagged : any;
    if (pool.size() < 2) fail(err::InfeasibleMap, "fewer than two buildings for a landmark task");
    for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        EntityId a = pool[rng.below(pool.size())], b = pool[rng.below(pool.size())];
        if (a == b) continue;
        WaypointId s = front_door(map, a), t = front_door(map, b);
        if (s == kNone || t == kNone || s == t) continue;
        PathResult pr;
        try {
            pr = astar(map.coarse, s, t, RouteMode::pedestrian);
        } catch (const SimError&) {
            continue;
        }
        NavTask task;
        task.id = id;
        std::size_t segs = route_segment_count(map.coarse, pr.path);
        task.difficulty = segs <= 2 ? Difficulty::easy : segs <= 4 ? Difficulty::medium : Difficulty::hard;
        task.route = pr.path;
        task.start = s;
        task.goal = t;
        task.start_building = a;
        task.goal_building = b;
        task.subtasks = gen_multimodal_subtasks(map, s, t, b, cfg);
        task.goal_yaw = task.subtasks.back().yaw;
        task.time_limit = time_limit_for(pr.metres(), cfg);
        return task;
    }
    fail(err::InfeasibleMap, "no connected landmark pair");
}

// ---------------------------------------------------------------------------
// Search

json SearchTask::to_json() const {
    json mem = json::array();
    for (const auto& m : memory)
        mem.push_back(json{{"entity", m.entity},
                           {"waypoint", m.waypoint},
                           {"pose", json::array({m.pose.x, m.pose.y, m.pose.yaw})},
                           {"street", m.street}});
    return json{{"memory", mem}, {"spawns", json::array({spawns[0], spawns[1]})}, {"streets", streets}};
}

SearchTask gen_search_task(const MapData& map, std::size_t n_landmarks_per_street, Rng& rng) {
    std::map<std::size_t, std::pair<std::vector<EntityId>, std::vector<EntityId>>> frontage;  // street -> (tagged, other)
    for (const auto& [id, e] : map.city.scene.entities()) {
        if (e.category != Category::building) continue;
        WaypointId door = front_door(map, id);
        if (door == kNone) continue;
        auto& slot = frontage[map.coarse.node(door).segment_id];
        (e.has_tag("landmark") ? slot.first : slot.second).push_back(id);
    }
    auto shuffle = [&](std::vector<EntityId>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
    };
    SearchTask task;
    for (auto& [street, lists] : frontage) {
        shuffle(lists.first);
        shuffle(lists.second);
        std::vector<EntityId> pick = lists.first;
        pick.insert(pick.end(), lists.second.begin(), lists.second.end());
        if (pick.size() > n_landmarks_per_street) pick.resize(n_landmarks_per_street);
        if (pick.empty()) continue;
        ++task.streets;
        for (EntityId id : pick) {
            WaypointId door = front_door(map, id);
            Vec2 p = map.coarse.node(door).pos;
            task.memory.push_back({id, door, Pose2D(p.x, p.y, facing_yaw(map, door, id)), street});
        }
    }
    if (task.memory.empty()) fail(err::InfeasibleMap, "no street has a frontage building");

    const WaypointGraph& f = map.fine;
    auto usable = [&](WaypointId w) {
        return f.traversable(w, RouteMode::pedestrian) && !f.blocked(w) &&
               !map.city.scene.collides(AABB::centered(f.node(w).pos, 0.3, 0.3));
    };
    for (std::size_t attempt = 0; attempt < 100000; ++attempt) {
        WaypointId a = rng.below(f.size()), b = rng.below(f.size());
        if (a == b || !usable(a) || !usable(b) || dist(f.node(a).pos, f.node(b).pos) < 2) continue;
        task.spawns = {a, b};
        return task;
    }
    fail(err::InfeasibleMap, "no two valid spawn waypoints");
}

// ---------------------------------------------------------------------------
// Records and metrics

json EpisodeRecord::to_json() const {
    return json{{"task_id", task_id},
                {"success", success},
                {"subtasks_total", subtasks_total},
                {"subtasks_completed", subtasks_completed},
                {"d0", d0},
                {"dT", dT},
                {"D0", D0},
                {"DT", DT},
                {"collisions_static", collisions_static},
                {"collisions_dynamic", collisions_dynamic},
                {"red_light", red_light},
                {"decisions", decisions},
                {"fine_waypoints", fine_waypoints},
                {"stuck", stuck},
                {"ticks_used", ticks_used}};
}

EpisodeRecord EpisodeRecord::from_json(const json& j) {
    EpisodeRecord r;
    r.task_id = req<std::string>(j, "task_id");
    r.success = req<bool>(j, "success");
    r.subtasks_total = j.value("subtasks_total", std::size_t{0});
    r.subtasks_completed = j.value("subtasks_completed", std::size_t{0});
    r.d0 = j.value("d0", 0.0);
    r.dT = j.value("dT", 0.0);
    r.D0 = j.value("D0", 0.0);
    r.DT = j.value("DT", 0.0);
    r.collisions_static = j.value("collisions_static", std::size_t{0});
    r.collisions_dynamic = j.value("collisions_dynamic", std::size_t{0});
    r.red_light = j.value("red_light", std::size_t{0});
    r.decisions = j.value("decisions", std::size_t{0});
    r.fine_waypoints = j.value("fine_waypoints", std::size_t{0});
    r.stuck = j.value("stuck", false);
    r.ticks_used = j.value("ticks_used", std::uint64_t{0});
    if (r.subtasks_completed > r.subtasks_total) fail(err::ConfigInvalid, "subtasks_completed exceeds subtasks_total");
    if (r.d0 < 0 || r.dT < 0 || r.D0 < 0 || r.DT < 0) fail(err::ConfigInvalid, "negative distance");
    return r;
}

std::optional<double> subtask_success(const EpisodeRecord& r) {
    if (r.subtasks_total == 0) return std::nullopt;
    return static_cast<double>(r.subtasks_completed) / static_cast<double>(r.subtasks_total);
}

std::optional<double> distance_progress(double d0, double dT) {
    if (d0 <= 0) return std::nullopt;
    return std::max((d0 - dT) / d0, 0.0);
}

std::optional<double> MetricsSummary::get(const std::string& key) const {
    for (const auto& [k, v] : values)
        if (k == key) return v;
    fail(err::NotFound, "no metric '" + key + "' in the " + std::string(to_string(family)) + " report");
}

json MetricsSummary::to_json() const {
    json m = json::object();
    for (const auto& [k, v] : values) m[k] = v ? json(*v) : json(nullptr);
    return json{{"family", to_string(family)}, {"episodes", episodes}, {"metrics", m}};
}

std::string MetricsSummary::to_csv() const {
    std::string head = "family,episodes", row = std::string(to_string(family)) + "," + std::to_string(episodes);
    for (const auto& [k, v] : values) {
        head += "," + k;
        row += ",";
        if (v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.10g", *v);
            row += buf;
        }
    }
    return head + "\n" + row + "\n";
}

MetricsSummary compute_metrics(const std::vector<EpisodeRecord>& records, MetricFamily family) {
    MetricsSummary out;
    out.family = family;
    out.episodes = records.size();
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    std::size_t n_success = 0;
    for (const auto& r : records) n_success += r.success;
    std::optional<double> sr;
    if (!records.empty()) sr = static_cast<double>(n_success) / static_cast<double>(records.size());

    if (family == MetricFamily::instruction) {
        std::vector<double> ssr, dp;
        for (const auto& r : records) {
            if (auto v = subtask_success(r)) ssr.push_back(*v);
            if (auto v = distance_progress(r.d0, r.dT)) dp.push_back(*v);
        }
        out.values = {{"SR", sr}, {"SSR", mean(ssr)}, {"DP", mean(dp)}};
    } else if (family == MetricFamily::physical) {
        double cc = 0, cc_static = 0, cc_dynamic = 0, cc_s = 0;
        std::vector<double> red, ndc, dss;
        std::size_t failed = 0, stuck = 0;
        for (const auto& r : records) {
            cc_static += static_cast<double>(r.collisions_static);
            cc_dynamic += static_cast<double>(r.collisions_dynamic);
            cc += static_cast<double>(r.collisions());
            if (r.success) {
                cc_s += static_cast<double>(r.collisions());
                red.push_back(r.red_light > 0 ? 1.0 : 0.0);
                if (r.fine_waypoints > 0)
                    ndc.push_back(static_cast<double>(r.decisions) / static_cast<double>(r.fine_waypoints));
                dss.push_back(static_cast<double>(r.decisions));
            } else {
                ++failed;
                stuck += r.stuck;
            }
        }
        std::optional<double> str;
        if (failed > 0) str = static_cast<double>(stuck) / static_cast<double>(failed);
        out.values = {{"SR", sr},       {"CC", cc},          {"CC_static", cc_static}, {"CC_dynamic", cc_dynamic},
                      {"CC_S", cc_s},   {"RVR", mean(red)},  {"STR", str},             {"NDC", mean(ndc)},
                      {"DSS", mean(dss)}};
    } else {
        std::vector<double> tp;
        for (const auto& r : records)
            if (auto v = distance_progress(r.D0, r.DT)) tp.push_back(*v);
        out.values = {{"CSR", sr}, {"TP", mean(tp)}};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stuck detection

bool detect_stuck(const std::vector<TrajectorySample>& samples, std::uint64_t window) {
    if (samples.empty() || window == 0) return false;
    std::uint64_t last = samples.back().tick;
    if (last < window || samples.front().tick > last - window) return false;  // stream shorter than the window
    const TrajectorySample* start = nullptr;
    for (const auto& s : samples) {
        if (s.tick < last - window) continue;
        if (!start) start = &s;
        if (s.subtask_completed) return false;
    }
    return dist(start->pos, samples.back().pos) < 1.0;
}

bool StuckDetector::push(const TrajectorySample& s) {
    if (!first_tick_) first_tick_ = s.tick;
    buf_.push_back(s);
    if (window_ == 0 || s.tick < window_ || *first_tick_ > s.tick - window_) return false;
    while (buf_.front().tick < s.tick - window_) buf_.pop_front();
    for (const auto& b : buf_)
        if (b.subtask_completed) return false;
    return dist(buf_.front().pos, s.pos) < 1.0;
}

LogCounts counts_from_log(const EventLog& log, AgentId agent, std::uint64_t from, std::uint64_t to) {
    LogCounts c;
    for (const auto& r : log.records) {
        if (r.agent != agent || r.tick < from || r.tick > to) continue;
        if (r.kind == EventKind::collision_static) ++c.collisions_static;
        if (r.kind == EventKind::collision_dynamic) ++c.collisions_dynamic;
        if (r.kind == EventKind::red_light_violation) ++c.red_light;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation

Evaluator make_nav_evaluator(Vec2 goal, double goal_yaw, double range, double yaw_tol) {
    return [=](World& w, AgentId id) {
        const Pose2D& p = w.agent(id).pose;
        double d = dist(p.pos(), goal), e = std::abs(normalize_angle(p.yaw - goal_yaw));
        return json{{"success", d <= range && e <= yaw_tol}, {"distance", d}, {"yaw_error", e}};
    };
}

bool sees_agent(const World& w, AgentId observer, AgentId partner, double radius) {
    const AgentState& a = w.agent(observer);
    const AgentState& b = w.agent(partner);
    if (observer == partner || b.flags.in_vehicle || dist(a.pose.pos(), b.pose.pos()) > radius) return false;
    std::vector<std::uint8_t> raster = w.render_raster(a);
    AABB fp = w.footprint(b);
    const int n = w.config().raster_size;
    const double cell = w.config().raster_cell;
    Vec2 fwd = heading(a.pose.yaw), left{-fwd.y, fwd.x};
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            Vec2 p = a.pose.pos() + fwd * ((n / 2.0 - r - 0.5) * cell) + left * ((n / 2.0 - c - 0.5) * cell);
            if (raster[static_cast<std::size_t>(r) * n + c] != 0 && fp.contains(p) && dist(a.pose.pos(), p) <= radius)
                return true;
        }
    return false;
}

Evaluator make_search_evaluator(AgentId partner, double radius) {
    return [=](World& w, AgentId id) {
        bool seen = sees_agent(w, id, partner, radius);
        return json{{"success", seen}, {"partner", partner}};
    };
}

// ---------------------------------------------------------------------------
// Rule-based navigation runner

namespace {

struct NavRun {
    World& w;
    AgentId agent;
    const NavRunConfig& cfg;
    EpisodeRecord& rec;
    std::uint64_t start_tick, limit;
    StuckDetector stuck;
    bool completion_pending = false;
    bool over = false;  // stuck or out of time

    Pose2D pose() const { return w.agent(agent).pose; }

    void step(const ActionCommand& cmd) {
        std::vector<ActionCommand> batch;
        for (const auto& [id, a] : w.agents())
            batch.push_back(id == agent ? cmd : ActionCommand{id, "do_nothing", json::object()});
        StepResult res = w.step_sync(batch);
        for (const auto& e : res.events) {
            if (e.agent != agent) continue;
            if (e.kind == EventKind::collision_static) ++rec.collisions_static;
            if (e.kind == EventKind::collision_dynamic) ++rec.collisions_dynamic;
            if (e.kind == EventKind::red_light_violation) ++rec.red_light;
        }
        if (stuck.push({w.tick(), pose().pos(), completion_pending})) {
            rec.stuck = true;
            over = true;
        }
        completion_pending = false;
        if (w.tick() - start_tick >= limit) over = true;
    }

    void rotate_to(double yaw) {
        double th = normalize_angle(yaw - pose().yaw);
        if (std::abs(th) > 1e-9 && !over) step(ActionCommand{agent, "rotate", json{{"theta", th}}});
    }

    // Navigates to the fine waypoint nearest `goal`; replans on failure until the decision budget runs out.
    bool navigate(Vec2 goal) {
        WaypointId target = w.map().fine.nearest(goal, RouteMode::pedestrian);
        if (target == kNone) return false;
        while (!over && rec.decisions < cfg.max_decisions) {
            ++rec.decisions;
            PlanProgram p;
            try {
                HighLevelPlan plan;
                plan.steps.push_back(PlanStep{"navigate", json{{"target", json{{"waypoint", target}}}}});
                p = expand_rule_based(plan, w, agent);
            } catch (const SimError&) {
                continue;  // counted as a wasted decision; the world may change before the next one
            }
            rec.fine_waypoints += p.hops().size();
            while (!over) {
                auto cmd = tick_executor(p, w);
                if (!cmd) break;
                step(*cmd);
            }
            if (p.done()) return true;
            if (!over) step(ActionCommand{agent, "do_nothing", json::object()});
        }
        return false;
    }

    void complete() {
        ++rec.subtasks_completed;
        completion_pending = true;
    }
};

}  // namespace

EpisodeRecord run_nav_task(World& w, AgentId agent, const NavTask& task, const NavRunConfig& cfg) {
    EpisodeRecord rec;
    rec.task_id = std::string(to_string(task.difficulty)) + "-" + std::to_string(task.id);
    rec.subtasks_total = task.subtasks.size();
    const WaypointGraph& g = w.map().coarse;
    Vec2 goal = g.node(task.goal).pos;
    rec.d0 = manhattan(w.agent(agent).pose.pos(), goal);
    w.set_evaluator(make_nav_evaluator(goal, task.goal_yaw, cfg.goal_range, cfg.yaw_tol));

    NavRun run{w, agent, cfg, rec, w.tick(), task.time_limit, StuckDetector(cfg.stuck_window)};
    auto near = [&](WaypointId wp) { return dist(run.pose().pos(), g.node(wp).pos) <= cfg.goal_range; };
    auto facing = [&](double yaw) { return std::abs(normalize_angle(run.pose().yaw - yaw)) <= cfg.yaw_tol; };

    bool on_track = true;
    if (task.subtasks.empty()) {
        on_track = run.navigate(goal);
    } else {
        for (const SubTask& s : task.subtasks) {
            if (s.kind == SubTaskKind::reach_destination) break;
            if (s.kind == SubTaskKind::orientation_alignment) {
                run.rotate_to(s.yaw);
            } else {
                if (!run.navigate(g.node(s.goal).pos)) {
                    on_track = false;
                    break;
                }
                if (s.kind == SubTaskKind::turning_at_intersection) run.rotate_to(s.yaw);
            }
            bool ok = s.kind == SubTaskKind::orientation_alignment ? facing(s.yaw)
                      : s.kind == SubTaskKind::turning_at_intersection ? near(s.goal) && facing(s.yaw)
                                                                        : near(s.goal);
            if (!ok || run.over) {
                on_track = false;
                break;
            }
            run.complete();
        }
        if (on_track) on_track = run.navigate(goal);
    }
    if (on_track && !run.over) {
        run.rotate_to(task.goal_yaw);
        if (!run.over) {
            run.step(ActionCommand{agent, "evaluate", json::object()});
            const ActionFeedback& fb = w.agent(agent).last;
            rec.success = fb.outcome == "ok" && fb.data.value("success", false);
            if (rec.success && !task.subtasks.empty()) ++rec.subtasks_completed;
        }
    }
    rec.dT = manhattan(w.agent(agent).pose.pos(), goal);
    rec.ticks_used = w.tick() - run.start_tick;
    return rec;
}

}  // namespace simworld
