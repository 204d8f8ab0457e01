#include "simworld/waypoints.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <tuple>

#include "simworld/error.hpp"

namespace simworld {

const char* to_string(WaypointKind k) {
    switch (k) {
        case WaypointKind::coarse_intersection: return "coarse_intersection";
        case WaypointKind::coarse_sidewalk: return "coarse_sidewalk";
        case WaypointKind::fine_sidewalk: return "fine_sidewalk";
        case WaypointKind::fine_crosswalk: return "fine_crosswalk";
        case WaypointKind::road_lane: return "road_lane";
    }
    return "?";
}

WaypointId WaypointGraph::add_node(Waypoint w) {
    w.id = nodes_.size();
    nodes_.push_back(w);
    out_.emplace_back();
    in_.emplace_back();
    blocked_.push_back(0);
    return w.id;
}

void WaypointGraph::add_edge(WaypointId a, WaypointId b, bool directed, bool interpolated) {
    if (a >= size() || b >= size()) fail(err::NotFound, "edge endpoint out of range");
    if (a == b) return;
    const Cost c = to_cost(dist(nodes_[a].pos, nodes_[b].pos));
    if (c <= 0) fail(err::ConfigInvalid, "zero-length waypoint edge");
    auto add = [&](WaypointId u, WaypointId v) {
        for (const Edge& e : out_[u])
            if (e.to == v) return;
        out_[u].push_back({v, c, interpolated});
        in_[v].push_back({u, c, interpolated});
    };
    add(a, b);
    if (!directed) add(b, a);
}

const Waypoint& WaypointGraph::node(WaypointId id) const {
    if (id >= size()) fail(err::NotFound, "waypoint " + std::to_string(id));
    return nodes_[id];
}

std::optional<Cost> WaypointGraph::edge_length(WaypointId a, WaypointId b) const {
    if (a >= size()) return std::nullopt;
    for (const Edge& e : out_[a])
        if (e.to == b) return e.length;
    return std::nullopt;
}

bool WaypointGraph::traversable(WaypointId id, RouteMode m) const {
    const bool lane = nodes_[id].kind == WaypointKind::road_lane;
    return m == RouteMode::vehicle ? lane : !lane;
}

WaypointId WaypointGraph::nearest(Vec2 p, RouteMode m) const {
    WaypointId best = kNone;
    double bd = std::numeric_limits<double>::infinity();
    for (const Waypoint& w : nodes_) {
        if (!traversable(w.id, m) || blocked_[w.id]) continue;
        double d = dist(w.pos, p);
        if (d < bd) { bd = d; best = w.id; }
    }
    return best;
}

const Crosswalk* WaypointGraph::crosswalk_at(Vec2 p) const {
    for (const Crosswalk& c : crosswalks)
        if (c.region.contains(p)) return &c;
    return nullptr;
}

const Crosswalk* WaypointGraph::crosswalk_of(WaypointId id) const {
    const Waypoint& w = node(id);
    if (w.kind != WaypointKind::fine_crosswalk) return nullptr;
    for (const Crosswalk& c : crosswalks)
        if (c.segment_id == w.segment_id && c.intersection_id == w.intersection_id) return &c;
    return nullptr;
}

json WaypointGraph::to_json() const {
    json nodes = json::array();
    for (const Waypoint& w : nodes_) {
        json n;
        n["id"] = w.id;
        n["x"] = w.pos.x;
        n["y"] = w.pos.y;
        n["kind"] = to_string(w.kind);
        if (w.lane_index) n["lane_index"] = *w.lane_index;
        if (w.segment_id != kNone) n["segment_id"] = w.segment_id;
        if (w.intersection_id != kNone) n["intersection_id"] = w.intersection_id;
        if (w.signal_id) n["signal_id"] = *w.signal_id;
        if (blocked_[w.id]) n["blocked"] = true;
        nodes.push_back(std::move(n));
    }
    json edges = json::array();
    for (WaypointId u = 0; u < size(); ++u) {
        for (const Edge& e : out_[u]) {
            bool sym = edge_length(e.to, u).has_value();
            if (sym && e.to < u) continue;  // undirected edges listed once
            edges.push_back(json{{"from", u}, {"to", e.to}, {"length", to_metres(e.length)}, {"directed", !sym}});
        }
    }
    return json{{"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

// ---------------------------------------------------------------- coarse

WaypointGraph build_coarse(const RoadNetwork& net, double margin) {
    WaypointGraph g;
    for (const Intersection& in : net.intersections) {
        Waypoint w;
        w.pos = in.pos;
        w.kind = WaypointKind::coarse_intersection;
        w.intersection_id = in.id;
        g.add_node(w);
    }
    for (const RoadSegment& seg : net.segments) {
        const double m0 = seg.width / 2 + seg.sidewalk_width + margin;
        const double lat = seg.width / 2 + seg.sidewalk_width / 2;
        const double L = seg.length();
        for (int side : {1, -1}) {
            WaypointId ids[3];
            const double s[3] = {m0, L / 2, L - m0};
            for (int k = 0; k < 3; ++k) {
                Waypoint w;
                w.pos = seg.at(s[k], side * lat);
                w.kind = WaypointKind::coarse_sidewalk;
                w.segment_id = seg.id;
                w.side = side;
                w.station = k;
                ids[k] = g.add_node(w);
            }
            g.add_edge(ids[0], ids[1], false);
            g.add_edge(ids[1], ids[2], false);
            g.add_edge(seg.a_node, ids[0], false, false);
            g.add_edge(seg.b_node, ids[2], false, false);
        }
    }
    return g;
}

// ---------------------------------------------------------------- fine

namespace {

Vec2 dir_from(const RoadSegment& seg, std::size_t node) {
    return node == seg.a_node ? seg.dir() : seg.dir() * -1.0;
}

bool same_dir(Vec2 a, Vec2 b) { return a.dot(b) > 0.999; }

}  // namespace

WaypointGraph build_fine(const RoadNetwork& net, const WaypointGraph& coarse, const FineConfig& cfg) {
    if (coarse.size() != net.intersections.size() + 6 * net.segments.size())
        fail(err::ConfigInvalid, "coarse graph does not match the road network");
    if (cfg.lateral_offsets.size() != 4) fail(err::ConfigInvalid, "fine graph needs four sidewalk lanes");
    if (cfg.crosswalk_points < 2) fail(err::ConfigInvalid, "crosswalk needs at least two points");

    WaypointGraph g;
    g.sidewalks.resize(net.segments.size());
    g.lanes.resize(net.segments.size());

    // Sidewalk lattices.
    for (const RoadSegment& seg : net.segments) {
        for (int si = 0; si < 2; ++si) {
            const int side = si == 0 ? 1 : -1;
            SidewalkLayout lay = sidewalk_layout(seg, side, cfg.margin, cfg.step, cfg.lateral_offsets);
            auto& lanes = g.sidewalks[seg.id][si];
            for (int k = 0; k < 4; ++k) {
                for (std::size_t i = 0; i < lay.s.size(); ++i) {
                    Waypoint w;
                    w.pos = seg.at(lay.s[i], lay.lateral[k]);
                    w.kind = WaypointKind::fine_sidewalk;
                    w.lane_index = k;
                    w.segment_id = seg.id;
                    w.side = side;
                    w.station = static_cast<int>(i);
                    lanes[k].push_back(g.add_node(w));
                    if (i > 0) g.add_edge(lanes[k][i - 1], lanes[k][i], false);
                }
                if (k > 0)
                    for (std::size_t i = 0; i < lay.s.size(); ++i) g.add_edge(lanes[k - 1][i], lanes[k][i], false);
            }
        }
    }

    // Crosswalks: one per segment end, just outside the cross street's kerb line.
    struct CwEnd { WaypointId node; std::size_t seg; };
    std::vector<std::vector<CwEnd>> cw_ends(net.intersections.size());
    for (const RoadSegment& seg : net.segments) {
        const double off = cfg.lateral_offsets[3];
        for (std::size_t node : {seg.a_node, seg.b_node}) {
            const Intersection& in = net.intersections[node];
            const bool at_a = node == seg.a_node;
            const double sc = seg.width / 2 + seg.sidewalk_width / 2;
            const double s = at_a ? sc : seg.length() - sc;
            Crosswalk cw;
            cw.id = g.crosswalks.size();
            cw.intersection_id = in.id;
            cw.segment_id = seg.id;
            if (in.degree() >= 3) cw.signal_id = in.id;
            cw.crosses_x_road = std::abs(seg.dir().x) > 0.5;
            const int n = cfg.crosswalk_points;
            for (int k = 0; k < n; ++k) {
                Waypoint w;
                w.pos = seg.at(s, off - 2 * off * k / (n - 1));
                w.kind = WaypointKind::fine_crosswalk;
                w.segment_id = seg.id;
                w.intersection_id = in.id;
                w.station = k;
                w.signal_id = cw.signal_id;
                cw.nodes.push_back(g.add_node(w));
                if (k > 0) g.add_edge(cw.nodes[k - 1], cw.nodes[k], false);
            }
            Vec2 p0 = seg.at(s - 1, -seg.width / 2), p1 = seg.at(s + 1, seg.width / 2);
            cw.region = {std::min(p0.x, p1.x), std::min(p0.y, p1.y), std::max(p0.x, p1.x), std::max(p0.y, p1.y)};
            // Kerb lanes meet the crosswalk ends.
            const auto& L = g.sidewalks[seg.id];
            const std::size_t end = at_a ? 0 : L[0][3].size() - 1;
            g.add_edge(L[0][3][end], cw.nodes.front(), false, false);
            g.add_edge(L[1][3][end], cw.nodes.back(), false, false);
            cw_ends[in.id].push_back({cw.nodes.front(), seg.id});
            cw_ends[in.id].push_back({cw.nodes.back(), seg.id});
            g.crosswalks.push_back(std::move(cw));
        }
    }

    for (const Intersection& in : net.intersections) {
        // Corner links between crosswalks of adjacent legs.
        const auto& ends = cw_ends[in.id];
        for (std::size_t i = 0; i < ends.size(); ++i)
            for (std::size_t j = i + 1; j < ends.size(); ++j)
                if (ends[i].seg != ends[j].seg &&
                    dist(g.node(ends[i].node).pos, g.node(ends[j].node).pos) <= cfg.step * 1.5)
                    g.add_edge(ends[i].node, ends[j].node, false, false);

        // Where a straight road passes a missing side leg, the sidewalk continues
        // through the junction with interpolated nodes.
        for (std::size_t x = 0; x < in.segments.size(); ++x) {
            for (std::size_t y = x + 1; y < in.segments.size(); ++y) {
                const RoadSegment& e1 = net.segments[in.segments[x]];
                const RoadSegment& e2 = net.segments[in.segments[y]];
                Vec2 d1 = dir_from(e1, in.id), d2 = dir_from(e2, in.id);
                if (!same_dir(d1, d2 * -1.0)) continue;
                for (Vec2 n : {Vec2{-d1.y, d1.x}, Vec2{d1.y, -d1.x}}) {
                    bool leg = false;
                    for (std::size_t sid : in.segments)
                        if (same_dir(dir_from(net.segments[sid], in.id), n)) leg = true;
                    if (leg) continue;
                    const int si1 = e1.left().dot(n) > 0 ? 0 : 1;
                    const int si2 = e2.left().dot(n) > 0 ? 0 : 1;
                    std::array<std::vector<WaypointId>, 4> fill;
                    for (int k = 0; k < 4; ++k) {
                        const auto& l1 = g.sidewalks[e1.id][si1][k];
                        const auto& l2 = g.sidewalks[e2.id][si2][k];
                        WaypointId u = in.id == e1.a_node ? l1.front() : l1.back();
                        WaypointId v = in.id == e2.a_node ? l2.front() : l2.back();
                        Vec2 pu = g.node(u).pos, pv = g.node(v).pos;
                        const int parts = std::max(1, static_cast<int>(std::ceil(dist(pu, pv) / cfg.step - 1e-9)));
                        WaypointId prev = u;
                        for (int t = 1; t < parts; ++t) {
                            Waypoint w;
                            w.pos = pu + (pv - pu) * (static_cast<double>(t) / parts);
                            w.kind = WaypointKind::fine_sidewalk;
                            w.lane_index = k;
                            w.intersection_id = in.id;
                            w.station = t - 1;
                            WaypointId id = g.add_node(w);
                            fill[k].push_back(id);
                            g.add_edge(prev, id, false);
                            prev = id;
                        }
                        g.add_edge(prev, v, false);
                        if (k > 0)
                            for (std::size_t t = 0; t < fill[k].size() && t < fill[k - 1].size(); ++t)
                                g.add_edge(fill[k - 1][t], fill[k][t], false);
                    }
                }
            }
        }
    }

    // Vehicle lanes: right-hand traffic, one lane per direction.
    for (const RoadSegment& seg : net.segments) {
        SidewalkLayout lay = sidewalk_layout(seg, 1, cfg.margin, cfg.step, cfg.lateral_offsets);
        const double lat = seg.width / 4;
        for (int dir = 0; dir < 2; ++dir) {
            auto& lane = g.lanes[seg.id][dir];
            const std::size_t n = lay.s.size();
            for (std::size_t i = 0; i < n; ++i) {
                Waypoint w;
                w.pos = dir == 0 ? seg.at(lay.s[i], -lat) : seg.at(lay.s[n - 1 - i], lat);
                w.kind = WaypointKind::road_lane;
                w.segment_id = seg.id;
                w.side = dir == 0 ? 1 : -1;
                w.station = static_cast<int>(i);
                if (i + 1 == n) w.intersection_id = dir == 0 ? seg.b_node : seg.a_node;
                lane.push_back(g.add_node(w));
                if (i > 0) g.add_edge(lane[i - 1], lane[i], true);
            }
        }
    }
    for (const Intersection& in : net.intersections) {
        for (std::size_t a : in.segments) {
            const RoadSegment& sin = net.segments[a];
            WaypointId last = g.lanes[a][sin.b_node == in.id ? 0 : 1].back();
            for (std::size_t b : in.segments) {
                const RoadSegment& sout = net.segments[b];
                WaypointId first = g.lanes[b][sout.a_node == in.id ? 0 : 1].front();
                g.add_edge(last, first, true, false);
            }
        }
    }
    return g;
}

std::size_t mark_obstacles(WaypointGraph& g, const SceneGraph& scene, double probe_half) {
    std::size_t n = 0;
    for (const Waypoint& w : g.nodes()) {
        if (w.kind != WaypointKind::fine_sidewalk && w.kind != WaypointKind::fine_crosswalk) continue;
        bool b = scene.collides(probe_box(w.pos, probe_half));
        g.set_blocked(w.id, b);
        n += b;
    }
    return n;
}

// ---------------------------------------------------------------- search

PathResult astar(const WaypointGraph& g, WaypointId from, WaypointId to, RouteMode mode,
                 const std::map<WaypointId, int>& penalty) {
    if (from >= g.size() || to >= g.size()) fail(err::NotFound, "unknown waypoint");
    if (!g.traversable(from, mode) || !g.traversable(to, mode))
        fail(err::NoPath, "endpoint not traversable in this mode");
    if (from == to) return {{from}, 0};

    const std::size_t N = g.size();
    constexpr Cost kInf = std::numeric_limits<Cost>::max();
    std::vector<Cost> gs(N, kInf);
    std::vector<int> mult(N, 1);
    for (auto [id, m] : penalty)
        if (id < N) mult[id] = std::max(1, m);
    const Vec2 goal = g.node(to).pos;
    // Slightly deflated straight-line distance: admissible despite per-edge rounding.
    auto h = [&](WaypointId v) { return static_cast<Cost>(dist(g.node(v).pos, goal) * kCostScale * (1 - 1e-6)); };
    auto usable = [&](WaypointId v) { return g.traversable(v, mode) && (!g.blocked(v) || v == from || v == to); };
    auto weight = [&](const Edge& e) { return e.length * mult[e.to]; };

    using Item = std::tuple<Cost, Cost, WaypointId>;  // f, g, id
    std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
    gs[from] = 0;
    open.emplace(h(from), 0, from);
    while (!open.empty()) {
        auto [f, gu, u] = open.top();
        if (gs[to] != kInf && f > gs[to]) break;
        open.pop();
        if (gu != gs[u]) continue;
        for (const Edge& e : g.out(u)) {
            if (!usable(e.to)) continue;
            Cost ng = gu + weight(e);
            if (ng < gs[e.to]) {
                gs[e.to] = ng;
                open.emplace(ng + h(e.to), ng, e.to);
            }
        }
    }
    if (gs[to] == kInf) fail(err::NoPath, "no path from " + std::to_string(from) + " to " + std::to_string(to));

    // Nodes that lie on some optimal path: walk tight edges backwards from the goal.
    std::vector<char> on(N, 0);
    std::vector<WaypointId> stack{to};
    on[to] = 1;
    while (!stack.empty()) {
        WaypointId v = stack.back();
        stack.pop_back();
        for (const Edge& e : g.in(v)) {
            WaypointId u = e.to;
            if (on[u] || gs[u] == kInf || !usable(u)) continue;
            if (gs[u] + e.length * mult[v] == gs[v]) { on[u] = 1; stack.push_back(u); }
        }
    }
    // Lexicographically smallest optimal path.
    PathResult r;
    r.cost = gs[to];
    WaypointId u = from;
    r.path.push_back(u);
    while (u != to) {
        WaypointId best = kNone;
        for (const Edge& e : g.out(u))
            if (on[e.to] && gs[u] + weight(e) == gs[e.to] && e.to < best) best = e.to;
        if (best == kNone) fail(err::NoPath, "internal: broken optimal path");
        u = best;
        r.path.push_back(u);
    }
    return r;
}

Cost path_cost(const WaypointGraph& g, const std::vector<WaypointId>& path) {
    Cost c = 0;
    for (std::size_t i = 1; i < path.size(); ++i) {
        auto e = g.edge_length(path[i - 1], path[i]);
        if (!e) fail(err::NoPath, "path uses a missing edge");
        c += *e;
    }
    return c;
}

}  // namespace simworld

namespace simworld {

std::shared_ptr<const MapData> build_map(City city) {
    auto m = std::make_shared<MapData>();
    m->city = std::move(city);
    const GenConfig& c = m->city.config;
    m->coarse = build_coarse(m->city.roads, c.sidewalk_margin);
    m->fine = build_fine(m->city.roads, m->coarse, FineConfig::from(c));
    m->blocked_nodes = mark_obstacles(m->fine, m->city.scene, c.prop_probe_half);
    return m;
}

std::shared_ptr<const MapData> build_map(const GenConfig& cfg) { return build_map(generate_city(cfg)); }

}  // namespace simworld
