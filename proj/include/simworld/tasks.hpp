#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "simworld/env.hpp"

namespace simworld {

enum class Difficulty { easy, medium, hard, dynamic };
const char* to_string(Difficulty d);
Difficulty difficulty_from_string(const std::string& s);  // ConfigInvalid

enum class SubTaskKind { orientation_alignment, move_along_road, turning_at_intersection, reach_destination };
const char* to_string(SubTaskKind k);
SubTaskKind subtask_kind_from_string(const std::string& s);  // ConfigInvalid

struct SubTask {
    SubTaskKind kind = SubTaskKind::orientation_alignment;
    WaypointId goal = kNone;  // coarse waypoint of g_k
    double yaw = 0;           // heading of g_k
    std::string instruction;
    std::optional<EntityId> landmark;
    std::string direction;  // turns: left | right | around

    json to_json() const;
    static SubTask from_json(const json& j);
};

struct NavTask {
    std::size_t id = 0;
    Difficulty difficulty = Difficulty::easy;
    std::vector<WaypointId> route;  // coarse waypoint ids, start .. goal
    WaypointId start = kNone, goal = kNone;
    double goal_yaw = 0;
    std::vector<SubTask> subtasks;  // multimodal tasks only
    std::uint64_t time_limit = 0;   // ticks
    bool obstacle_mode = false;
    std::size_t pedestrians = 0;
    std::optional<EntityId> start_building, goal_building;

    json to_json() const;
    static NavTask from_json(const json& j);
};

struct TaskGenConfig {
    std::size_t max_attempts = 20000;  // per task before InfeasibleMap
    std::size_t dynamic_pedestrians = 20;
    double step_length = 0.5;           // metres a walker covers per tick
    double time_slack = 3;              // time limit = slack × walk time + stuck window
    std::uint64_t stuck_window = 1200;  // ticks (2 minutes at 0.1 s)
    double landmark_radius = 20;        // building-to-run distance for move_along_road landmarks
};

// Number of road segments a coarse route walks along (consecutive repeats merged).
std::size_t route_segment_count(const WaypointGraph& coarse, const std::vector<WaypointId>& route);

// count_per_level tasks for each difficulty, ids ascending. InfeasibleMap.
std::vector<NavTask> gen_physical_tasks(const MapData& map, std::size_t count_per_level, Rng& rng,
                                        const TaskGenConfig& cfg = {});

// Nearest coarse sidewalk node to a building footprint (ties by id); kNone if none.
WaypointId front_door(const MapData& map, EntityId building);
// Heading from a waypoint towards the centre of a building.
double facing_yaw(const MapData& map, WaypointId wp, EntityId building);

// Straight stretches of a coarse route: maximal runs on one (segment, side), with travel heading.
struct RouteRun {
    std::size_t segment = kNone;
    int side = 0;
    std::vector<WaypointId> nodes;
    double yaw = 0;
};
std::vector<RouteRun> route_runs(const MapData& map, const std::vector<WaypointId>& route);

// Decomposes the A* route between two front doors. NoPath.
std::vector<SubTask> gen_multimodal_subtasks(const MapData& map, WaypointId start, WaypointId goal,
                                             std::optional<EntityId> goal_building = std::nullopt,
                                             const TaskGenConfig& cfg = {});
// Random landmark-to-landmark task with subtasks. InfeasibleMap.
NavTask gen_multimodal_task(const MapData& map, std::size_t id, Rng& rng, const TaskGenConfig& cfg = {});

struct MemoryItem {
    EntityId entity = 0;
    WaypointId waypoint = kNone;  // coarse front door
    Pose2D pose;                  // at the front door, facing the building
    std::size_t street = kNone;
};

struct SearchTask {
    std::vector<MemoryItem> memory;
    std::array<WaypointId, 2> spawns{kNone, kNone};  // fine waypoints: main agent, partner
    std::size_t streets = 0;                          // streets contributing landmarks

    json to_json() const;
};

// Streets without frontage buildings are skipped; InfeasibleMap when none qualifies.
SearchTask gen_search_task(const MapData& map, std::size_t n_landmarks_per_street, Rng& rng);

struct EpisodeRecord {
    std::string task_id;
    bool success = false;
    std::size_t subtasks_total = 0, subtasks_completed = 0;  // N, n_c
    double d0 = 0, dT = 0;                                   // Manhattan agent -> goal
    double D0 = 0, DT = 0;                                   // Manhattan inter-agent (search)
    std::size_t collisions_static = 0, collisions_dynamic = 0;
    std::size_t red_light = 0;
    std::size_t decisions = 0, fine_waypoints = 0;
    bool stuck = false;
    std::uint64_t ticks_used = 0;

    std::size_t collisions() const { return collisions_static + collisions_dynamic; }
    json to_json() const;
    static EpisodeRecord from_json(const json& j);
};

// Per-episode ratios; null when the denominator is zero.
std::optional<double> subtask_success(const EpisodeRecord& r);  // n_c / N
std::optional<double> distance_progress(double d0, double dT);  // max((d0 - dT) / d0, 0)

enum class MetricFamily { instruction, physical, search };
const char* to_string(MetricFamily f);
MetricFamily metric_family_from_string(const std::string& s);  // ConfigInvalid

struct MetricsSummary {
    MetricFamily family = MetricFamily::physical;
    std::size_t episodes = 0;
    std::vector<std::pair<std::string, std::optional<double>>> values;  // fixed order per family

    std::optional<double> get(const std::string& key) const;  // NotFound for unknown keys
    json to_json() const;
    std::string to_csv() const;  // header line + one row
};

MetricsSummary compute_metrics(const std::vector<EpisodeRecord>& records, MetricFamily family);

// Sliding-window stuck rule: the trailing `window` ticks show < 1 m net displacement and no subtask completion.
struct TrajectorySample {
    std::uint64_t tick = 0;
    Vec2 pos;
    bool subtask_completed = false;
};
bool detect_stuck(const std::vector<TrajectorySample>& samples, std::uint64_t window = 1200);

class StuckDetector {
public:
    explicit StuckDetector(std::uint64_t window = 1200) : window_(window) {}
    // Feeds one sample (ticks ascending); returns the stuck verdict over the trailing window.
    bool push(const TrajectorySample& s);

private:
    std::uint64_t window_;
    std::optional<std::uint64_t> first_tick_;
    std::deque<TrajectorySample> buf_;  // samples with tick >= latest - window
};

// Collision / red-light counts for one agent over ticks [from, to], recomputed from the raw log.
struct LogCounts {
    std::size_t collisions_static = 0, collisions_dynamic = 0, red_light = 0;
    bool operator==(const LogCounts&) const = default;
};
LogCounts counts_from_log(const EventLog& log, AgentId agent, std::uint64_t from, std::uint64_t to);

// Evaluators installed on the world for the evaluate action; they answer {"success": bool, ...}.
Evaluator make_nav_evaluator(Vec2 goal, double goal_yaw, double range = 3, double yaw_tol = kPi / 6);
Evaluator make_search_evaluator(AgentId partner, double radius = 20);
// True when the partner's footprint shows up in the observer's egocentric raster within radius.
bool sees_agent(const World& w, AgentId observer, AgentId partner, double radius = 20);

struct NavRunConfig {
    double goal_range = 3;
    double yaw_tol = kPi / 6;
    std::uint64_t stuck_window = 1200;
    std::size_t max_decisions = 20;
};

// Rule-based agent: plans one navigate program per subtask goal (or straight to the goal),
// aligns its heading and evaluates. Fills every field of the record from the world's log.
EpisodeRecord run_nav_task(World& w, AgentId agent, const NavTask& task, const NavRunConfig& cfg = {});

}  // namespace simworld
