#include <doctest.h>

#include <queue>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "simworld/error.hpp"
#include "simworld/waypoints.hpp"

using namespace simworld;

namespace {

using Adj = std::vector<std::vector<std::pair<std::size_t, std::int64_t>>>;

Adj adjacency(const WaypointGraph& g, RouteMode m) {
    Adj adj(g.size());
    for (WaypointId u = 0; u < g.size(); ++u) {
        if (!g.traversable(u, m)) continue;
        for (const Edge& e : g.out(u))
            if (g.traversable(e.to, m)) adj[u].push_back({e.to, e.length});
    }
    return adj;
}

std::size_t reachable(const WaypointGraph& g, WaypointId s, RouteMode m) {
    std::vector<char> seen(g.size(), 0);
    std::queue<WaypointId> q;
    q.push(s);
    seen[s] = 1;
    std::size_t n = 0;
    while (!q.empty()) {
        WaypointId u = q.front();
        q.pop();
        ++n;
        for (const Edge& e : g.out(u))
            if (!seen[e.to] && g.traversable(e.to, m)) { seen[e.to] = 1; q.push(e.to); }
    }
    return n;
}

std::size_t count_mode(const WaypointGraph& g, RouteMode m) {
    std::size_t n = 0;
    for (WaypointId i = 0; i < g.size(); ++i) n += g.traversable(i, m);
    return n;
}

struct Graphs {
    RoadNetwork net;
    WaypointGraph coarse, fine;
};

Graphs graphs_for(std::uint64_t seed, double extent = 500) {
    GenConfig c;
    c.seed = seed;
    c.extent_w = c.extent_h = extent;
    Rng rng(seed);
    Graphs out;
    out.net = generate_roads(c, rng);
    out.coarse = build_coarse(out.net, c.sidewalk_margin);
    out.fine = build_fine(out.net, out.coarse, FineConfig::from(c));
    return out;
}

}  // namespace

TEST_SUITE("waypoints") {

TEST_CASE("single 82 m segment: coarse and fine counts") {
    RoadNetwork net = fixture::make_net({{{100, 100}, {182, 100}}});
    WaypointGraph coarse = build_coarse(net);
    std::size_t inter = 0, side = 0;
    for (const auto& w : coarse.nodes()) {
        inter += w.kind == WaypointKind::coarse_intersection;
        side += w.kind == WaypointKind::coarse_sidewalk;
    }
    CHECK(inter == 2);
    CHECK(side == 6);
    CHECK(coarse.size() == 8);
    // Sidewalk midpoints sit on the sidewalk centre line beside the segment midpoint.
    for (const auto& w : coarse.nodes())
        if (w.kind == WaypointKind::coarse_sidewalk && w.station == 1) {
            CHECK(w.pos.x == doctest::Approx(141));
            CHECK(std::abs(w.pos.y - 100) == doctest::Approx(6));
        }

    WaypointGraph fine = build_fine(net, coarse);
    for (int side_i = 0; side_i < 2; ++side_i) {
        std::size_t n = 0;
        for (const auto& w : fine.nodes())
            if (w.kind == WaypointKind::fine_sidewalk && w.segment_id == 0 && w.side == (side_i ? -1 : 1)) ++n;
        CHECK(n == 68);  // 4 lanes x 17 stations
        for (int k = 0; k < 4; ++k) CHECK(fine.sidewalks[0][side_i][k].size() == 17);
    }
    // Dead ends: crosswalks exist but carry no signal.
    REQUIRE(fine.crosswalks.size() == 2);
    for (const auto& cw : fine.crosswalks) {
        CHECK(cw.nodes.size() == 8);
        CHECK_FALSE(cw.signal_id.has_value());
    }
    CHECK(reachable(fine, fine.sidewalks[0][0][0][0], RouteMode::pedestrian) == count_mode(fine, RouteMode::pedestrian));
}

TEST_CASE("fine lanes sit at the configured lateral offsets") {
    RoadNetwork net = fixture::make_net({{{100, 100}, {182, 100}}});
    WaypointGraph fine = build_fine(net, build_coarse(net));
    const double off[4] = {7.5, 6.5, 5.5, 4.5};
    for (int k = 0; k < 4; ++k) {
        for (WaypointId id : fine.sidewalks[0][0][k]) CHECK(fine.node(id).pos.y == doctest::Approx(100 + off[k]));
        for (WaypointId id : fine.sidewalks[0][1][k]) CHECK(fine.node(id).pos.y == doctest::Approx(100 - off[k]));
    }
}

TEST_CASE("plus crossing: signals, corner links and connectivity") {
    RoadNetwork net = fixture::plus_net();
    WaypointGraph fine = build_fine(net, build_coarse(net));
    std::size_t signalled = 0;
    for (const auto& cw : fine.crosswalks)
        if (cw.signal_id) {
            ++signalled;
            CHECK(*cw.signal_id == cw.intersection_id);
            CHECK(net.intersections[cw.intersection_id].degree() == 4);
        }
    CHECK(signalled == 4);
    CHECK(reachable(fine, 0, RouteMode::pedestrian) == count_mode(fine, RouteMode::pedestrian));
    // Every crosswalk end at the centre has exactly one corner link to another leg.
    for (const auto& cw : fine.crosswalks) {
        if (!cw.signal_id) continue;
        for (WaypointId end : {cw.nodes.front(), cw.nodes.back()}) {
            int corner = 0;
            for (const Edge& e : fine.out(end)) {
                const auto& w = fine.node(e.to);
                corner += w.kind == WaypointKind::fine_crosswalk && w.segment_id != cw.segment_id;
            }
            CHECK(corner == 1);
        }
    }
}

TEST_CASE("straight through a degree-2 node keeps both sidewalks continuous") {
    RoadNetwork net = fixture::make_net({{{100, 100}, {182, 100}}, {{182, 100}, {264, 100}}});
    WaypointGraph fine = build_fine(net, build_coarse(net));
    // Remove crosswalks from consideration: lane 0 of the left sidewalk must be
    // walkable end to end along sidewalk nodes only.
    WaypointId s = fine.sidewalks[0][0][0].front(), t = fine.sidewalks[1][0][0].back();
    PathResult r = astar(fine, s, t, RouteMode::pedestrian);
    for (WaypointId id : r.path) CHECK(fine.node(id).kind == WaypointKind::fine_sidewalk);
    CHECK(r.metres() == doctest::Approx(dist(fine.node(s).pos, fine.node(t).pos)));
}

TEST_CASE("generated cities: connectivity and edge bound") {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        CAPTURE(seed);
        Graphs G = graphs_for(seed);
        const auto& f = G.fine;
        CHECK(reachable(G.coarse, 0, RouteMode::pedestrian) == G.coarse.size());
        WaypointId p0 = f.sidewalks[0][0][0][0];
        CHECK(reachable(f, p0, RouteMode::pedestrian) == count_mode(f, RouteMode::pedestrian));
        // Vehicle lanes: every lane node reaches every other (strong connectivity).
        std::size_t nv = count_mode(f, RouteMode::vehicle);
        for (WaypointId v : {f.lanes[0][0][0], f.lanes.back()[1].back()}) CHECK(reachable(f, v, RouteMode::vehicle) == nv);
        // Interpolation bound on every pedestrian edge and every in-lane vehicle edge.
        Cost bound = to_cost(4 * 1.5);
        bool ok = true;
        for (WaypointId u = 0; u < f.size(); ++u)
            for (const Edge& e : f.out(u)) {
                bool ped = f.traversable(u, RouteMode::pedestrian);
                if ((ped || e.interpolated) && e.length > bound) ok = false;
            }
        CHECK(ok);
    }
}

TEST_CASE("A* cost equals Dijkstra on random pairs") {
    Rng pick(77);
    for (std::uint64_t seed : {2u, 5u, 9u}) {
        Graphs G = graphs_for(seed);
        for (RouteMode m : {RouteMode::pedestrian, RouteMode::vehicle}) {
            Adj adj = adjacency(G.fine, m);
            std::vector<WaypointId> ids;
            for (WaypointId i = 0; i < G.fine.size(); ++i)
                if (G.fine.traversable(i, m)) ids.push_back(i);
            for (int q = 0; q < 40; ++q) {
                WaypointId s = ids[pick.below(ids.size())], t = ids[pick.below(ids.size())];
                PathResult r = astar(G.fine, s, t, m);
                CHECK(r.cost == oracle::dijkstra_i64(adj, s, t));
                CHECK(path_cost(G.fine, r.path) == r.cost);
                CHECK(r.path.front() == s);
                CHECK(r.path.back() == t);
            }
        }
        Adj cadj = adjacency(G.coarse, RouteMode::pedestrian);
        for (int q = 0; q < 40; ++q) {
            WaypointId s = pick.below(G.coarse.size()), t = pick.below(G.coarse.size());
            CHECK(astar(G.coarse, s, t, RouteMode::pedestrian).cost == oracle::dijkstra_i64(cadj, s, t));
        }
    }
}

TEST_CASE("ties resolve to the lexicographically smallest node sequence") {
    // Random unit-grid graphs are full of equal-cost alternatives.
    Rng rng(4);
    for (int trial = 0; trial < 60; ++trial) {
        WaypointGraph g;
        const int W = 3, H = 3;
        std::vector<WaypointId> id(W * H);
        std::vector<int> perm(W * H);
        for (int i = 0; i < W * H; ++i) perm[i] = i;
        for (int i = W * H - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
        std::vector<Vec2> pos(W * H);
        for (int i = 0; i < W * H; ++i) pos[perm[i]] = {double(i % W), double(i / W)};
        for (int i = 0; i < W * H; ++i) {
            Waypoint w;
            w.pos = pos[i];
            id[i] = g.add_node(w);
        }
        for (int a = 0; a < W * H; ++a)
            for (int b = a + 1; b < W * H; ++b)
                if (dist(pos[a], pos[b]) == 1 && rng.bernoulli(0.85)) g.add_edge(a, b, false);
        Adj adj = adjacency(g, RouteMode::pedestrian);
        WaypointId s = rng.below(W * H), t = rng.below(W * H);
        auto [best, path] = oracle::best_path_bruteforce(adj, s, t);
        if (best < 0) {
            CHECK_THROWS_AS(astar(g, s, t, RouteMode::pedestrian), SimError);
            continue;
        }
        PathResult r = astar(g, s, t, RouteMode::pedestrian);
        CHECK(r.cost == best);
        CHECK(r.path == path);
    }
}

TEST_CASE("heuristic is admissible") {
    Graphs G = graphs_for(3);
    Adj adj = adjacency(G.fine, RouteMode::pedestrian);
    // Reverse Dijkstra from a goal gives exact remaining cost for every node.
    WaypointId goal = G.fine.sidewalks.back()[1][2][5];
    Adj radj(adj.size());
    for (std::size_t u = 0; u < adj.size(); ++u)
        for (auto [v, w] : adj[u]) radj[v].push_back({u, w});
    std::vector<std::int64_t> d(adj.size(), -1);
    using Item = std::pair<std::int64_t, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[goal] = 0;
    pq.push({0, goal});
    while (!pq.empty()) {
        auto [du, u] = pq.top();
        pq.pop();
        if (du > d[u]) continue;
        for (auto [v, w] : radj[u])
            if (d[v] < 0 || du + w < d[v]) { d[v] = du + w; pq.push({d[v], v}); }
    }
    const Vec2 gp = G.fine.node(goal).pos;
    for (WaypointId v = 0; v < G.fine.size(); ++v) {
        if (d[v] < 0) continue;
        auto h = static_cast<Cost>(dist(G.fine.node(v).pos, gp) * kCostScale * (1 - 1e-6));
        CHECK(h <= d[v]);
    }
}

TEST_CASE("penalties and blocked nodes steer the path") {
    RoadNetwork net = fixture::make_net({{{100, 100}, {182, 100}}});
    WaypointGraph fine = build_fine(net, build_coarse(net));
    const auto& lane0 = fine.sidewalks[0][0][0];
    WaypointId s = lane0.front(), t = lane0.back();
    PathResult straight = astar(fine, s, t, RouteMode::pedestrian);
    CHECK(std::find(straight.path.begin(), straight.path.end(), lane0[8]) != straight.path.end());

    std::map<WaypointId, int> pen{{lane0[8], 10}};
    PathResult detour = astar(fine, s, t, RouteMode::pedestrian, pen);
    CHECK(std::find(detour.path.begin(), detour.path.end(), lane0[8]) == detour.path.end());
    CHECK(path_cost(fine, detour.path) > straight.cost);

    SceneGraph scene(AABB{0, 0, 400, 400});
    SceneEntity bin;
    bin.id = 1;
    bin.category = Category::urban_prop;
    bin.pose = Pose2D(fine.node(lane0[8]).pos.x, fine.node(lane0[8]).pos.y);
    bin.footprint = AABB::centered(bin.pose.pos(), 0.3, 0.3);
    bin.blocking = true;
    scene.insert(bin);
    CHECK(mark_obstacles(fine, scene, 0.25) >= 1);
    CHECK(fine.blocked(lane0[8]));
    PathResult avoid = astar(fine, s, t, RouteMode::pedestrian);
    CHECK(std::find(avoid.path.begin(), avoid.path.end(), lane0[8]) == avoid.path.end());
    CHECK(fine.nearest(fine.node(lane0[8]).pos, RouteMode::pedestrian) != lane0[8]);
}

TEST_CASE("mode checks and errors") {
    RoadNetwork net = fixture::plus_net();
    WaypointGraph fine = build_fine(net, build_coarse(net));
    WaypointId ped = fine.sidewalks[0][0][0][0], car = fine.lanes[0][0][0];
    CHECK_THROWS_AS(astar(fine, ped, car, RouteMode::pedestrian), SimError);
    CHECK_THROWS_AS(astar(fine, ped, fine.size() + 5, RouteMode::pedestrian), SimError);
    PathResult r = astar(fine, car, fine.lanes[2][0].back(), RouteMode::vehicle);
    for (WaypointId id : r.path) CHECK(fine.node(id).kind == WaypointKind::road_lane);
    // Vehicle lanes keep to the right of travel.
    for (const auto& seg : net.segments)
        for (int d = 0; d < 2; ++d) {
            const auto& lane = fine.lanes[seg.id][d];
            Vec2 p0 = fine.node(lane[0]).pos, p1 = fine.node(lane[1]).pos;
            Vec2 dir = p1 - p0, to_centre = seg.a - p0;
            double cross = dir.x * to_centre.y - dir.y * to_centre.x;
            CHECK(cross > 0);  // centre line lies to the left
        }
}

TEST_CASE("json export") {
    RoadNetwork net = fixture::make_net({{{100, 100}, {182, 100}}});
    WaypointGraph fine = build_fine(net, build_coarse(net));
    json j = fine.to_json();
    CHECK(j["nodes"].size() == fine.size());
    CHECK(j["nodes"][0]["kind"] == "fine_sidewalk");
    CHECK(j["nodes"][0]["lane_index"] == 0);
    CHECK(j.dump() == build_fine(net, build_coarse(net)).to_json().dump());
}

}  // TEST_SUITE
