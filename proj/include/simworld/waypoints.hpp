#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "simworld/procgen.hpp"

namespace simworld {

enum class WaypointKind { coarse_intersection, coarse_sidewalk, fine_sidewalk, fine_crosswalk, road_lane };
enum class RouteMode { pedestrian, vehicle };

const char* to_string(WaypointKind k);

using WaypointId = std::size_t;
inline constexpr std::size_t kNone = static_cast<std::size_t>(-1);

// Edge lengths are stored as integers in units of 2^-30 m so that path sums are
// exact and independent of summation order.
using Cost = std::int64_t;
inline constexpr double kCostScale = 1073741824.0;
inline Cost to_cost(double metres) { return static_cast<Cost>(std::llround(metres * kCostScale)); }
inline double to_metres(Cost c) { return static_cast<double>(c) / kCostScale; }

struct Waypoint {
    WaypointId id = 0;
    Vec2 pos;
    WaypointKind kind = WaypointKind::fine_sidewalk;
    std::optional<int> lane_index;        // fine_sidewalk only
    std::size_t segment_id = kNone;       // owning road (kNone for intersection/junction nodes)
    std::size_t intersection_id = kNone;  // for intersection, crosswalk, junction and lane-end nodes
    int side = 0;                         // +1 left / -1 right of the segment; road lanes: +1 a->b, -1 b->a
    int station = -1;                     // longitudinal index along the sidewalk / lane
    std::optional<std::size_t> signal_id;  // fine_crosswalk only
};

struct Edge {
    WaypointId to = 0;
    Cost length = 0;
    bool interpolated = true;  // false for intersection connectors
};

struct Crosswalk {
    std::size_t id = 0;
    std::size_t intersection_id = 0;
    std::size_t segment_id = 0;
    std::vector<WaypointId> nodes;  // left curb to right curb
    std::optional<std::size_t> signal_id;
    AABB region;
    bool crosses_x_road = true;  // the road being crossed runs along x
};

class WaypointGraph {
public:
    WaypointId add_node(Waypoint w);
    void add_edge(WaypointId a, WaypointId b, bool directed, bool interpolated = true);

    std::size_t size() const { return nodes_.size(); }
    const Waypoint& node(WaypointId id) const;
    const std::vector<Waypoint>& nodes() const { return nodes_; }
    const std::vector<Edge>& out(WaypointId id) const { return out_[id]; }
    const std::vector<Edge>& in(WaypointId id) const { return in_[id]; }
    std::optional<Cost> edge_length(WaypointId a, WaypointId b) const;

    bool traversable(WaypointId id, RouteMode m) const;
    bool blocked(WaypointId id) const { return blocked_[id]; }
    void set_blocked(WaypointId id, bool b) { blocked_[id] = b; }

    std::vector<Crosswalk> crosswalks;
    // Vehicle lane bookkeeping: lanes[segment][0 = a->b, 1 = b->a] = ordered node ids.
    std::vector<std::array<std::vector<WaypointId>, 2>> lanes;
    // sidewalks[segment][0 = left, 1 = right][lane] = ordered node ids.
    std::vector<std::array<std::array<std::vector<WaypointId>, 4>, 2>> sidewalks;

    // Nearest traversable, unblocked node (ties by smaller id); kNone if none.
    WaypointId nearest(Vec2 p, RouteMode m) const;
    const Crosswalk* crosswalk_at(Vec2 p) const;
    const Crosswalk* crosswalk_of(WaypointId id) const;

    json to_json() const;

private:
    std::vector<Waypoint> nodes_;
    std::vector<std::vector<Edge>> out_, in_;
    std::vector<char> blocked_;
};

struct FineConfig {
    double step = 4;
    std::vector<double> lateral_offsets{7.5, 6.5, 5.5, 4.5};
    double margin = 1;
    int crosswalk_points = 8;

    static FineConfig from(const GenConfig& g) { return {g.fine_step, g.lane_offsets, g.sidewalk_margin, 8}; }
};

WaypointGraph build_coarse(const RoadNetwork& net, double margin = 1);
WaypointGraph build_fine(const RoadNetwork& net, const WaypointGraph& coarse, const FineConfig& cfg = {});
// Marks pedestrian nodes whose walker probe overlaps a blocking scene entity.
std::size_t mark_obstacles(WaypointGraph& g, const SceneGraph& scene, double probe_half);

struct PathResult {
    std::vector<WaypointId> path;
    Cost cost = 0;
    double metres() const { return to_metres(cost); }
};

// Penalty multipliers apply to edges entering the listed nodes.
PathResult astar(const WaypointGraph& g, WaypointId from, WaypointId to, RouteMode mode,
                 const std::map<WaypointId, int>& penalty = {});
Cost path_cost(const WaypointGraph& g, const std::vector<WaypointId>& path);

}  // namespace simworld

#include <memory>

namespace simworld {

// Immutable map bundle shared by traffic, agents and tasks.
struct MapData {
    City city;
    WaypointGraph coarse, fine;
    std::size_t blocked_nodes = 0;
};
std::shared_ptr<const MapData> build_map(const GenConfig& cfg);
std::shared_ptr<const MapData> build_map(City city);

}  // namespace simworld
