#pragma once
// Small hand-built worlds shared by several test files.

#include <utility>
#include <vector>

#include "simworld/procgen.hpp"
#include "simworld/waypoints.hpp"

namespace fixture {

using namespace simworld;

// Road network from a list of (a, b) centre-line endpoints; equal points share a node.
inline RoadNetwork make_net(const std::vector<std::pair<Vec2, Vec2>>& segs) {
    RoadNetwork net;
    auto node = [&](Vec2 p) {
        for (auto& in : net.intersections)
            if (in.pos == p) return in.id;
        Intersection in;
        in.id = net.intersections.size();
        in.pos = p;
        net.intersections.push_back(in);
        return in.id;
    };
    for (auto [a, b] : segs) {
        RoadSegment s;
        s.id = net.segments.size();
        s.a = a;
        s.b = b;
        s.a_node = node(a);
        s.b_node = node(b);
        net.intersections[s.a_node].segments.push_back(s.id);
        net.intersections[s.b_node].segments.push_back(s.id);
        net.segments.push_back(s);
    }
    return net;
}

// A plus-shaped crossing at (200, 200) with four 82 m arms.
inline RoadNetwork plus_net() {
    Vec2 c{200, 200};
    return make_net({{c, {282, 200}}, {c, {200, 282}}, {{118, 200}, c}, {{200, 118}, c}});
}

// Map built from a hand-made network with no buildings or props; `extra` entities are inserted first.
inline std::shared_ptr<const MapData> map_from_net(RoadNetwork net, AABB extent = {0, 0, 1000, 400},
                                                   const std::vector<SceneEntity>& extra = {}) {
    City c;
    c.roads = std::move(net);
    c.scene = SceneGraph(extent);
    add_roads_to_scene(c.roads, c.scene);
    EntityId id = c.scene.next_id();
    for (SceneEntity e : extra) {
        e.id = id++;
        c.scene.insert(e);
    }
    return build_map(std::move(c));
}

inline std::shared_ptr<const MapData> city_map(std::uint64_t seed, double size = 500) {
    GenConfig c;
    c.seed = seed;
    c.extent_w = c.extent_h = size;
    return build_map(c);
}

// Planner worked-example topology: waypoints at (0,0), (0,1), (1,10), (10,10)
// plus a detour corner (10,0); a chair sits on (10,10) and a farther one at (-30,-30).
inline std::shared_ptr<const MapData> planner_example_map() {
    auto md = std::make_shared<MapData>();
    md->city.scene = SceneGraph({-50, -50, 50, 50});
    auto chair = [&](EntityId id, Vec2 c) {
        SceneEntity e;
        e.id = id;
        e.category = Category::urban_prop;
        e.footprint = AABB::centered(c, 0.3, 0.3);
        e.pose = Pose2D(c.x, c.y, 0);
        e.tags = {"chair"};
        e.blocking = false;
        md->city.scene.insert(e);
    };
    chair(1, {10, 10});
    chair(2, {-30, -30});
    auto node = [&](double x, double y) {
        Waypoint w;
        w.pos = {x, y};
        w.kind = WaypointKind::fine_sidewalk;
        return md->fine.add_node(w);
    };
    WaypointId a = node(0, 0), b = node(0, 1), c = node(1, 10), d = node(10, 10), e = node(10, 0);
    md->fine.add_edge(a, b, false);
    md->fine.add_edge(b, c, false);
    md->fine.add_edge(c, d, false);
    md->fine.add_edge(a, e, false);
    md->fine.add_edge(e, d, false);
    md->coarse = md->fine;
    return md;
}

// Straight pedestrian corridor along y = 0: n waypoints spaced `gap` metres from x = 0.
inline std::shared_ptr<MapData> corridor_map(std::size_t n, double gap) {
    auto md = std::make_shared<MapData>();
    md->city.scene = SceneGraph({-20, -20, gap * n + 20, 20});
    WaypointId prev = kNone;
    for (std::size_t i = 0; i < n; ++i) {
        Waypoint w;
        w.pos = {gap * i, 0};
        w.kind = WaypointKind::fine_sidewalk;
        WaypointId id = md->fine.add_node(w);
        if (prev != kNone) md->fine.add_edge(prev, id, false);
        prev = id;
    }
    md->coarse = md->fine;
    return md;
}

}  // namespace fixture

namespace fixture {

// `n` pedestrian waypoints that are clear of scene obstacles and at least 2 m apart.
inline std::vector<simworld::WaypointId> free_sidewalk_spawns(const simworld::MapData& m, std::size_t n,
                                                               std::uint64_t seed) {
    using namespace simworld;
    Rng rng(seed);
    std::vector<WaypointId> out;
    for (std::size_t tries = 0; out.size() < n && tries < 100000; ++tries) {
        WaypointId w = rng.below(m.fine.size());
        if (!m.fine.traversable(w, RouteMode::pedestrian)) continue;
        if (m.city.scene.collides(AABB::centered(m.fine.node(w).pos, 0.3, 0.3))) continue;
        bool close = false;
        for (WaypointId u : out)
            if (dist(m.fine.node(u).pos, m.fine.node(w).pos) < 2) close = true;
        if (!close) out.push_back(w);
    }
    return out;
}

}  // namespace fixture
