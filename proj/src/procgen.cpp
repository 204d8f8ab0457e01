#include "simworld/procgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>

#include "simworld/error.hpp"

namespace simworld {

namespace {

std::set<std::string> tags_from(const json& j) {
    std::set<std::string> out;
    if (j.is_array())
        for (const auto& t : j) out.insert(t.get<std::string>());
    return out;
}

json tags_to(const std::set<std::string>& tags) {
    json a = json::array();
    for (const auto& t : tags) a.push_back(t);
    return a;
}

json vec_to(Vec2 v) { return json::array({v.x, v.y}); }
Vec2 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

// Distance between two closed segments in the plane.
double seg_point_dist(Vec2 p, Vec2 a, Vec2 b) {
    Vec2 ab = b - a;
    double t = std::clamp((p - a).dot(ab) / ab.dot(ab), 0.0, 1.0);
    return dist(p, a + ab * t);
}

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }

double seg_seg_dist(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    double d1 = cross(b - a, c - a), d2 = cross(b - a, d - a);
    double d3 = cross(d - c, a - c), d4 = cross(d - c, b - c);
    if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) return 0;
    return std::min({seg_point_dist(a, c, d), seg_point_dist(b, c, d), seg_point_dist(c, a, b),
                     seg_point_dist(d, a, b)});
}

// Footprint of a box spanning [s0, s1] along the segment and [l0, l1] laterally.
AABB strip_box(const RoadSegment& seg, double s0, double s1, double l0, double l1) {
    Vec2 p = seg.at(s0, l0), q = seg.at(s1, l1);
    return {std::min(p.x, q.x), std::min(p.y, q.y), std::max(p.x, q.x), std::max(p.y, q.y)};
}

bool overlaps_category(const SceneGraph& g, const AABB& fp, Category c) {
    for (EntityId id : g.query_region(fp)) {
        const auto& e = g.at(id);
        if (e.category == c && e.footprint.overlaps(fp)) return true;
    }
    return false;
}

// Intervals of [lo, hi] along one side of seg whose strip just behind the sidewalk is built on.
std::vector<std::pair<double, double>> covered_frontage(const SceneGraph& g, const RoadSegment& seg, int side, double lo,
                                                        double hi) {
    const double front = seg.width / 2 + seg.sidewalk_width;
    const AABB strip = strip_box(seg, lo, hi, side * front, side * (front + 0.5));
    const Vec2 d = seg.dir();
    std::vector<std::pair<double, double>> out;
    for (EntityId id : g.query_region(strip)) {
        const auto& e = g.at(id);
        if (e.category != Category::building || !e.footprint.overlaps(strip)) continue;
        const double s0 = (Vec2{e.footprint.min_x, e.footprint.min_y} - seg.a).dot(d);
        const double s1 = (Vec2{e.footprint.max_x, e.footprint.max_y} - seg.a).dot(d);
        out.push_back({std::max(lo, std::min(s0, s1)), std::min(hi, std::max(s0, s1))});
    }
    std::sort(out.begin(), out.end());
    return out;
}

double union_length(const std::vector<std::pair<double, double>>& sorted) {
    double total = 0, end = -1e300;
    for (auto [a, b] : sorted) {
        if (b <= end) continue;
        total += b - std::max(a, end);
        end = b;
    }
    return total;
}

}  // namespace

std::vector<BuildingType> default_building_catalog() {
    return {
        {24, 20, Category::building, {"landmark", "office"}},
        {18, 16, Category::building, {"restaurant"}},
        {14, 14, Category::building, {"landmark", "shop"}},
        {10, 12, Category::building, {"house"}},
        {8, 8, Category::building, {"kiosk"}},
    };
}

std::vector<PropType> default_prop_catalog() {
    return {
        {"tree", Category::vegetation, 0.8, 0.8, true, {"tree"}},
        {"bench", Category::urban_prop, 0.6, 1.6, true, {"bench"}},
        {"chair", Category::urban_prop, 0.6, 0.6, false, {"chair"}},
        {"bin", Category::urban_prop, 0.6, 0.6, true, {"bin"}},
        {"cone", Category::urban_prop, 0.4, 0.4, true, {"cone"}},
        {"parked_vehicle", Category::vehicle, 0.8, 1.8, true, {"parked"}},
    };
}

std::vector<BuildingType> building_catalog_from_json(const json& j) {
    std::vector<BuildingType> out;
    for (const auto& e : j) {
        BuildingType b;
        b.frontage = e.at("frontage").get<double>();
        b.depth = e.at("depth").get<double>();
        b.category = category_from_string(e.value("category", std::string("building")));
        b.tags = tags_from(e.value("tags", json::array()));
        if (b.frontage <= 0 || b.depth <= 0) fail(err::ConfigInvalid, "building footprint must be positive");
        out.push_back(b);
    }
    return out;
}

std::vector<PropType> prop_catalog_from_json(const json& j) {
    std::vector<PropType> out;
    for (const auto& e : j) {
        PropType p;
        p.name = e.at("name").get<std::string>();
        p.category = category_from_string(e.value("category", std::string("urban_prop")));
        p.lateral = e.at("lateral").get<double>();
        p.longitudinal = e.at("longitudinal").get<double>();
        p.blocking = e.value("blocking", true);
        p.tags = tags_from(e.value("tags", json::array()));
        out.push_back(p);
    }
    return out;
}

void GenConfig::validate() const {
    auto bad = [](const std::string& m) { fail(err::ConfigInvalid, m); };
    if (!(extent_w > 0 && extent_h > 0)) bad("extent must be positive");
    if (!(road_density > 0)) bad("road_density must be positive");
    if (!(building_density >= 0 && building_density <= 1)) bad("building_density must lie in [0,1]");
    if (!(street_element_density >= 0 && street_element_density <= 1)) bad("street_element_density must lie in [0,1]");
    if (max_road_depth < 1) bad("max_road_depth must be >= 1");
    if (!(branch_probability >= 0 && branch_probability <= 1)) bad("branch_probability must lie in [0,1]");
    if (!(segment_length > 0 && road_width > 0 && sidewalk_width > 0 && fine_step > 0)) bad("geometry must be positive");
    if (lane_offsets.size() != 4) bad("exactly 4 sidewalk lane offsets are required");
    if (segment_length <= 2 * (road_width / 2 + sidewalk_width + sidewalk_margin)) bad("segment too short for sidewalks");
    if (buildings.empty() && building_density > 0) bad("building catalog is empty");
    if (props.empty() && street_element_density > 0) bad("prop catalog is empty");
}

json GenConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["extent"] = json::array({extent_w, extent_h});
    j["road_density"] = road_density;
    j["building_density"] = building_density;
    j["street_element_density"] = street_element_density;
    j["max_road_depth"] = max_road_depth;
    j["branch_probability"] = branch_probability;
    j["obstacle_mode"] = obstacle_mode;
    j["segment_length"] = segment_length;
    j["road_width"] = road_width;
    j["lane_count"] = lane_count;
    j["sidewalk_width"] = sidewalk_width;
    j["sidewalk_margin"] = sidewalk_margin;
    j["fine_step"] = fine_step;
    j["lane_offsets"] = lane_offsets;
    j["prop_probe_half"] = prop_probe_half;
    j["tree_probability"] = tree_probability;
    j["prop_probability"] = prop_probability;
    json bj = json::array();
    for (const auto& b : buildings)
        bj.push_back({{"frontage", b.frontage}, {"depth", b.depth}, {"category", to_string(b.category)}, {"tags", tags_to(b.tags)}});
    j["buildings"] = bj;
    json pj = json::array();
    for (const auto& p : props)
        pj.push_back({{"name", p.name}, {"category", to_string(p.category)}, {"lateral", p.lateral},
                      {"longitudinal", p.longitudinal}, {"blocking", p.blocking}, {"tags", tags_to(p.tags)}});
    j["props"] = pj;
    return j;
}

GenConfig GenConfig::from_json(const json& j) {
    GenConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("extent")) {
            c.extent_w = j["extent"].at(0).get<double>();
            c.extent_h = j["extent"].at(1).get<double>();
        }
        c.road_density = j.value("road_density", c.road_density);
        c.building_density = j.value("building_density", c.building_density);
        c.street_element_density = j.value("street_element_density", c.street_element_density);
        c.max_road_depth = j.value("max_road_depth", c.max_road_depth);
        c.branch_probability = j.value("branch_probability", c.branch_probability);
        c.obstacle_mode = j.value("obstacle_mode", c.obstacle_mode);
        c.segment_length = j.value("segment_length", c.segment_length);
        c.road_width = j.value("road_width", c.road_width);
        c.lane_count = j.value("lane_count", c.lane_count);
        c.sidewalk_width = j.value("sidewalk_width", c.sidewalk_width);
        c.sidewalk_margin = j.value("sidewalk_margin", c.sidewalk_margin);
        c.fine_step = j.value("fine_step", c.fine_step);
        if (j.contains("lane_offsets")) c.lane_offsets = j["lane_offsets"].get<std::vector<double>>();
        c.prop_probe_half = j.value("prop_probe_half", c.prop_probe_half);
        c.tree_probability = j.value("tree_probability", c.tree_probability);
        c.prop_probability = j.value("prop_probability", c.prop_probability);
        if (j.contains("buildings")) c.buildings = building_catalog_from_json(j["buildings"]);
        if (j.contains("props")) c.props = prop_catalog_from_json(j["props"]);
    } catch (const json::exception& e) {
        fail(err::ConfigInvalid, std::string("gen config: ") + e.what());
    }
    c.validate();
    return c;
}

json RoadNetwork::to_json() const {
    json j;
    j["segments"] = json::array();
    for (const auto& s : segments)
        j["segments"].push_back({{"id", s.id}, {"a", vec_to(s.a)}, {"b", vec_to(s.b)}, {"a_node", s.a_node},
                                 {"b_node", s.b_node}, {"width", s.width}, {"lane_count", s.lane_count},
                                 {"sidewalk_width", s.sidewalk_width}, {"depth", s.depth}});
    j["intersections"] = json::array();
    for (const auto& n : intersections)
        j["intersections"].push_back({{"id", n.id}, {"position", vec_to(n.pos)}, {"segments", n.segments}});
    return j;
}

RoadNetwork RoadNetwork::from_json(const json& j) {
    RoadNetwork net;
    try {
        for (const auto& s : j.at("segments")) {
            RoadSegment r;
            r.id = s.at("id").get<std::size_t>();
            r.a = vec_from(s.at("a"));
            r.b = vec_from(s.at("b"));
            r.a_node = s.at("a_node").get<std::size_t>();
            r.b_node = s.at("b_node").get<std::size_t>();
            r.width = s.at("width").get<double>();
            r.lane_count = s.at("lane_count").get<int>();
            r.sidewalk_width = s.at("sidewalk_width").get<double>();
            r.depth = s.value("depth", 1);
            if (r.a == r.b || r.width <= 0) fail(err::ConfigInvalid, "degenerate road segment");
            if (r.id != net.segments.size()) fail(err::ConfigInvalid, "segment ids must be dense and ordered");
            net.segments.push_back(r);
        }
        for (const auto& n : j.at("intersections")) {
            Intersection x;
            x.id = n.at("id").get<std::size_t>();
            x.pos = vec_from(n.at("position"));
            x.segments = n.at("segments").get<std::vector<std::size_t>>();
            if (x.id != net.intersections.size()) fail(err::ConfigInvalid, "intersection ids must be dense and ordered");
            net.intersections.push_back(x);
        }
    } catch (const json::exception& e) {
        fail(err::ConfigInvalid, std::string("road json: ") + e.what());
    }
    return net;
}

SidewalkLayout sidewalk_layout(const RoadSegment& seg, int side, double margin, double step,
                               const std::vector<double>& lane_offsets) {
    SidewalkLayout out;
    const double m0 = seg.width / 2 + seg.sidewalk_width + margin;
    const double span = seg.length() - 2 * m0;
    const int n = std::max(2, static_cast<int>(std::lround(span / step)) + 1);
    for (int i = 0; i < n; ++i) out.s.push_back(m0 + span * i / (n - 1));
    for (double off : lane_offsets) out.lateral.push_back(side * off);
    return out;
}

RoadNetwork generate_roads(const GenConfig& cfg, Rng& rng) {
    cfg.validate();
    const double L = cfg.segment_length;
    // Lattice margin leaves room for the deepest building behind the outermost roads.
    double deepest = 0;
    for (const auto& b : cfg.buildings) deepest = std::max(deepest, b.depth);
    const double m = cfg.road_width / 2 + cfg.sidewalk_width + deepest;
    const int nx = static_cast<int>(std::floor((cfg.extent_w - 2 * m) / L)) + 1;
    const int ny = static_cast<int>(std::floor((cfg.extent_h - 2 * m) / L)) + 1;
    if (nx < 1 || ny < 1 || (nx < 2 && ny < 2)) fail(err::ConfigInvalid, "extent too small for a single road segment");
    const std::size_t target =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.road_density * cfg.extent_w * cfg.extent_h / 1e6)));

    RoadNetwork net;
    std::map<std::pair<int, int>, std::size_t> lattice;
    std::vector<std::pair<int, int>> cell_of;
    auto node_at = [&](int i, int j) -> std::size_t {
        auto it = lattice.find({i, j});
        if (it != lattice.end()) return it->second;
        Intersection x;
        x.id = net.intersections.size();
        x.pos = {m + i * L, m + j * L};
        net.intersections.push_back(x);
        cell_of.push_back({i, j});
        lattice[{i, j}] = x.id;
        return x.id;
    };
    auto inside = [&](int i, int j) { return i >= 0 && j >= 0 && i < nx && j < ny; };
    auto connected = [&](std::size_t p, std::size_t q) {
        for (std::size_t s : net.intersections[p].segments)
            if (net.segments[s].other(p) == q) return true;
        return false;
    };
    auto add_segment = [&](std::size_t p, std::size_t q, int depth) {
        RoadSegment s;
        s.id = net.segments.size();
        s.a = net.intersections[p].pos;
        s.b = net.intersections[q].pos;
        s.a_node = p;
        s.b_node = q;
        s.width = cfg.road_width;
        s.lane_count = cfg.lane_count;
        s.sidewalk_width = cfg.sidewalk_width;
        s.depth = depth;
        net.segments.push_back(s);
        net.intersections[p].segments.push_back(s.id);
        net.intersections[q].segments.push_back(s.id);
    };
    // A candidate may not run within half a road width of any segment it does not share an endpoint with.
    auto clear_of_others = [&](Vec2 a, Vec2 b, std::size_t p, std::optional<std::size_t> q) {
        for (const auto& s : net.segments) {
            if (s.a_node == p || s.b_node == p || (q && (s.a_node == *q || s.b_node == *q))) continue;
            if (seg_seg_dist(a, b, s.a, s.b) < 0.5 * cfg.road_width) return false;
        }
        return true;
    };

    static constexpr int DX[4] = {1, 0, -1, 0}, DY[4] = {0, 1, 0, -1};  // E, N, W, S (CCW order)
    struct Frontier {
        double priority;
        std::uint64_t seq;
        std::size_t node;
        int dir, depth;
        bool operator>(const Frontier& o) const { return priority != o.priority ? priority > o.priority : seq > o.seq; }
    };
    std::priority_queue<Frontier, std::vector<Frontier>, std::greater<>> open;
    std::uint64_t seq = 0;
    auto push = [&](std::size_t node, int dir, int depth) {
        if (depth >= cfg.max_road_depth) return;
        open.push({depth + rng.uniform(), seq++, node, dir, depth});
    };

    // Seed segment from the central lattice node in the first direction (from a random one) that fits.
    const int i0 = (nx - 1) / 2, j0 = (ny - 1) / 2;
    const std::size_t start = node_at(i0, j0);
    const int d0 = static_cast<int>(rng.below(4));
    for (int k = 0; k < 4; ++k) {
        int d = (d0 + k) % 4;
        if (!inside(i0 + DX[d], j0 + DY[d])) continue;
        std::size_t q = node_at(i0 + DX[d], j0 + DY[d]);
        add_segment(start, q, 1);
        push(q, d, 1);
        break;
    }

    while (!open.empty() && net.segments.size() < target) {
        Frontier f = open.top();
        open.pop();
        std::vector<int> dirs{f.dir};
        const bool left = rng.bernoulli(cfg.branch_probability);
        const bool right = rng.bernoulli(cfg.branch_probability);
        if (left) dirs.push_back((f.dir + 1) % 4);
        if (right) dirs.push_back((f.dir + 3) % 4);
        for (int d : dirs) {
            if (net.segments.size() >= target) break;
            auto [pi, pj] = cell_of[f.node];
            const Vec2 P = net.intersections[f.node].pos;
            const Vec2 Q{P.x + DX[d] * L, P.y + DY[d] * L};
            if (!inside(pi + DX[d], pj + DY[d])) continue;
            // Road-end attachment: the nearest registered intersection within one segment length of Q
            // that lies on the growth ray without skipping a lattice point.
            std::optional<std::size_t> snap;
            double best = L + 1e-9;
            for (const auto& x : net.intersections) {
                if (x.id == f.node) continue;
                const double dq = dist(x.pos, Q);
                const Vec2 rel = x.pos - P;
                const bool on_ray = std::abs(cross(rel, {double(DX[d]), double(DY[d])})) < 1e-9 && rel.dot({double(DX[d]), double(DY[d])}) > 0;
                if (dq <= best && on_ray && rel.norm() <= L + 1e-9 && (!snap || dq < best)) {
                    snap = x.id;
                    best = dq;
                }
            }
            if (snap) {
                if (net.intersections[*snap].degree() >= 4 || net.intersections[f.node].degree() >= 4) continue;
                if (connected(f.node, *snap)) continue;
                if (!clear_of_others(P, net.intersections[*snap].pos, f.node, snap)) continue;
                add_segment(f.node, *snap, f.depth + 1);
                continue;  // attached ends do not grow further
            }
            if (net.intersections[f.node].degree() >= 4) continue;
            if (!clear_of_others(P, Q, f.node, std::nullopt)) continue;
            std::size_t q = node_at(pi + DX[d], pj + DY[d]);
            add_segment(f.node, q, f.depth + 1);
            push(q, d, f.depth + 1);
        }
    }
    for (auto& x : net.intersections) std::sort(x.segments.begin(), x.segments.end());
    return net;
}

void add_roads_to_scene(const RoadNetwork& net, SceneGraph& graph) {
    for (const auto& s : net.segments) {
        const double h = s.width / 2 + s.sidewalk_width;
        SceneEntity e;
        e.id = graph.next_id();
        e.category = Category::road_segment;
        e.footprint = AABB{std::min(s.a.x, s.b.x), std::min(s.a.y, s.b.y), std::max(s.a.x, s.b.x), std::max(s.a.y, s.b.y)}
                          .expanded(h);
        Vec2 c = (s.a + s.b) * 0.5;
        e.pose = Pose2D(c.x, c.y, std::atan2(s.b.y - s.a.y, s.b.x - s.a.x));
        e.tags = {"road", "segment:" + std::to_string(s.id)};
        e.blocking = false;  // roads are traversable; buildings test against them explicitly
        graph.insert(e);
    }
}

BuildingStats generate_buildings(const RoadNetwork& net, SceneGraph& graph, const GenConfig& cfg, Rng& rng) {
    BuildingStats st;
    if (cfg.building_density <= 0) return st;
    std::vector<std::size_t> by_size(cfg.buildings.size());
    for (std::size_t i = 0; i < by_size.size(); ++i) by_size[i] = i;
    std::stable_sort(by_size.begin(), by_size.end(), [&](std::size_t a, std::size_t b) {
        const auto &x = cfg.buildings[a], &y = cfg.buildings[b];
        if (x.frontage != y.frontage) return x.frontage > y.frontage;
        return x.frontage * x.depth > y.frontage * y.depth;
    });

    for (const auto& seg : net.segments) {
        const double L = seg.length();
        const double front = seg.width / 2 + seg.sidewalk_width;
        const double lo = front, hi = L - front;
        if (hi <= lo) continue;
        for (int side : {1, -1}) {
            const double target = cfg.building_density * (hi - lo);
            // Frontage already covered by buildings of neighbouring roads (corner lots) counts towards the fill.
            std::vector<std::pair<double, double>> taken = covered_frontage(graph, seg, side, lo, hi);
            double placed = union_length(taken);
            auto try_place = [&](const BuildingType& t, double s0) {
                const double s1 = s0 + t.frontage;
                AABB fp = strip_box(seg, s0, s1, side * front, side * (front + t.depth));
                if (!graph.extent().contains(fp) || graph.collides(fp) || overlaps_category(graph, fp, Category::road_segment))
                    return false;
                SceneEntity e;
                e.id = graph.next_id();
                e.category = t.category;
                e.footprint = fp;
                Vec2 c = fp.center();
                Vec2 face = seg.left() * static_cast<double>(-side);  // towards the road
                e.pose = Pose2D(c.x, c.y, std::atan2(face.y, face.x));
                e.tags = t.tags;
                e.blocking = true;
                graph.insert(e);
                taken.push_back({s0, s1});
                std::sort(taken.begin(), taken.end());
                placed = union_length(taken);
                return true;
            };

            // Sampling pass: random type, random gap whose mean keeps the expected fill at density.
            double cursor = lo;
            while (placed < target) {
                const auto& t = cfg.buildings[rng.below(cfg.buildings.size())];
                const double mean_gap = t.frontage * (1 - cfg.building_density) / cfg.building_density;
                const double s0 = cursor + rng.uniform(0, 2 * mean_gap);
                if (s0 + t.frontage > hi) break;
                if (try_place(t, s0)) ++st.sampled;
                cursor = s0 + t.frontage;
            }

            // Greedy pass over residual gaps, nearest to a road end first.
            std::sort(taken.begin(), taken.end());
            std::vector<std::pair<double, double>> gaps;
            double prev = lo;
            for (auto [a, b] : taken) {
                if (a > prev) gaps.push_back({prev, a});
                prev = std::max(prev, b);
            }
            if (hi > prev) gaps.push_back({prev, hi});
            std::stable_sort(gaps.begin(), gaps.end(), [&](auto x, auto y) {
                return std::min(x.first - lo, hi - x.second) < std::min(y.first - lo, hi - y.second);
            });
            for (auto [g0, g1] : gaps) {
                while (placed < target) {
                    const bool from_start = (g0 - lo) <= (hi - g1);
                    bool ok = false;
                    for (std::size_t k : by_size) {
                        const auto& t = cfg.buildings[k];
                        if (t.frontage > g1 - g0 + 1e-9) continue;
                        const double s0 = from_start ? g0 : g1 - t.frontage;
                        if (try_place(t, s0)) {
                            ++st.gap_filled;
                            if (from_start) g0 += t.frontage; else g1 -= t.frontage;
                            ok = true;
                            break;
                        }
                    }
                    if (!ok) break;
                }
            }
            st.frontage += hi - lo;
            st.filled += union_length(covered_frontage(graph, seg, side, lo, hi));
        }
    }
    st.shortfall = st.fill_fraction() < 0.8 * cfg.building_density;
    return st;
}

StreetStats generate_street_elements(const RoadNetwork& net, SceneGraph& graph, const GenConfig& cfg, Rng& rng) {
    StreetStats st;
    if (cfg.street_element_density <= 0) return st;
    const PropType& tree = cfg.props.front();
    for (const auto& seg : net.segments) {
        const Vec2 d = seg.dir();
        const bool along_x = std::abs(d.x) >= std::abs(d.y);
        for (int side : {1, -1}) {
            SidewalkLayout lay = sidewalk_layout(seg, side, cfg.sidewalk_margin, cfg.fine_step, cfg.lane_offsets);
            for (double s : lay.s) {
                // Decide the whole lateral group first so the free-lane rule can veto one lane.
                std::array<const PropType*, 4> pick{};
                if (rng.bernoulli(cfg.street_element_density * cfg.tree_probability)) pick[0] = &tree;
                for (int lane = 1; lane < 4; ++lane) {
                    if (cfg.props.size() < 2) break;
                    if (rng.bernoulli(cfg.street_element_density * cfg.prop_probability))
                        pick[lane] = &cfg.props[1 + rng.below(cfg.props.size() - 1)];
                }
                if (cfg.obstacle_mode) {
                    int blocking = 0;
                    for (auto* p : pick) blocking += (p && p->blocking);
                    if (blocking == 4) pick[rng.below(4)] = nullptr;
                }
                std::vector<EntityId> placed;
                for (int lane = 0; lane < 4; ++lane) {
                    const PropType* p = pick[lane];
                    if (!p) continue;
                    Vec2 c = seg.at(s, lay.lateral[lane]);
                    const double hx = (along_x ? p->longitudinal : p->lateral) / 2;
                    const double hy = (along_x ? p->lateral : p->longitudinal) / 2;
                    AABB fp = AABB::centered(c, hx, hy);
                    if (!graph.extent().contains(fp) || overlaps_category(graph, fp, Category::building)) {
                        ++st.rejected_building;
                        continue;
                    }
                    SceneEntity e;
                    e.id = graph.next_id();
                    e.category = p->category;
                    e.footprint = fp;
                    e.pose = Pose2D(c.x, c.y, std::atan2(d.y, d.x));
                    e.tags = p->tags;
                    e.tags.insert("lane:" + std::to_string(lane));
                    e.blocking = p->blocking;
                    graph.insert(e);
                    placed.push_back(e.id);
                    ++st.placed;
                }
                if (!cfg.obstacle_mode) continue;
                auto any_free = [&] {
                    for (int lane = 0; lane < 4; ++lane)
                        if (!graph.collides(probe_box(seg.at(s, lay.lateral[lane]), cfg.prop_probe_half))) return true;
                    return false;
                };
                while (!any_free() && !placed.empty()) {
                    graph.remove(placed.back());
                    placed.pop_back();
                    --st.placed;
                    ++st.cleared_for_free_lane;
                }
            }
        }
    }
    return st;
}

City generate_city(const GenConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    City city{cfg, SceneGraph({0, 0, cfg.extent_w, cfg.extent_h}), {}, {}, {}};
    city.roads = generate_roads(cfg, rng);
    add_roads_to_scene(city.roads, city.scene);
    city.building_stats = generate_buildings(city.roads, city.scene, cfg, rng);
    city.street_stats = generate_street_elements(city.roads, city.scene, cfg, rng);
    return city;
}

json City::to_json() const {
    json j;
    j["config"] = config.to_json();
    j["scene"] = scene.to_json();
    j["roads"] = roads.to_json();
    return j;
}

City City::from_json(const json& j) {
    if (!j.is_object() || !j.contains("scene") || !j.contains("roads"))
        fail(err::ConfigInvalid, "map file must contain scene and roads");
    City c{j.contains("config") ? GenConfig::from_json(j["config"]) : GenConfig{}, SceneGraph::from_json(j["scene"]),
           RoadNetwork::from_json(j["roads"]), {}, {}};
    return c;
}

}  // namespace simworld
