#include <doctest.h>

#include "oracles.hpp"
#include "simworld/error.hpp"
#include "simworld/procgen.hpp"

using namespace simworld;

namespace {

bool connected(const RoadNetwork& net) {
    oracle::DisjointSet ds(net.intersections.size());
    for (const auto& s : net.segments) ds.unite(s.a_node, s.b_node);
    return ds.components() == 1;
}

// Independent orientation-based test for closed segments touching or crossing.
bool segments_touch(Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    auto orient = [](Vec2 p, Vec2 q, Vec2 r) {
        double v = (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
        return (v > 1e-12) - (v < -1e-12);
    };
    auto on = [](Vec2 p, Vec2 q, Vec2 r) {
        return std::min(p.x, q.x) - 1e-12 <= r.x && r.x <= std::max(p.x, q.x) + 1e-12 && std::min(p.y, q.y) - 1e-12 <= r.y &&
               r.y <= std::max(p.y, q.y) + 1e-12;
    };
    int o1 = orient(a, b, c), o2 = orient(a, b, d), o3 = orient(c, d, a), o4 = orient(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    return (o1 == 0 && on(a, b, c)) || (o2 == 0 && on(a, b, d)) || (o3 == 0 && on(c, d, a)) || (o4 == 0 && on(c, d, b));
}

// Segments may only meet at a registered, shared intersection node.
bool no_stray_crossings(const RoadNetwork& net) {
    for (std::size_t i = 0; i < net.segments.size(); ++i)
        for (std::size_t j = i + 1; j < net.segments.size(); ++j) {
            const auto &s = net.segments[i], &t = net.segments[j];
            std::set<std::size_t> shared;
            for (auto n : {s.a_node, s.b_node})
                if (n == t.a_node || n == t.b_node) shared.insert(n);
            if (shared.size() == 2) return false;  // duplicate segment
            if (shared.empty()) {
                if (segments_touch(s.a, s.b, t.a, t.b)) return false;
            } else {
                // Sharing one endpoint: they must not overlap beyond it (collinear, same direction).
                Vec2 p = net.intersections[*shared.begin()].pos;
                Vec2 u = (s.a == p ? s.b : s.a) - p, v = (t.a == p ? t.b : t.a) - p;
                if (std::abs(u.x * v.y - u.y * v.x) < 1e-9 && u.dot(v) > 0) return false;
            }
        }
    return true;
}

std::size_t blocking_overlaps(const SceneGraph& g) {
    std::vector<const SceneEntity*> b;
    for (const auto& [id, e] : g.entities())
        if (e.blocking && e.category == Category::building) b.push_back(&e);
    std::size_t n = 0;
    for (std::size_t i = 0; i < b.size(); ++i)
        for (std::size_t j = i + 1; j < b.size(); ++j) n += oracle::box_overlap(b[i]->footprint, b[j]->footprint);
    // buildings against road corridors
    for (const auto& [id, e] : g.entities()) {
        if (e.category != Category::road_segment) continue;
        for (auto* x : b) n += oracle::box_overlap(x->footprint, e.footprint);
    }
    return n;
}

std::size_t count(const SceneGraph& g, Category c) {
    std::size_t n = 0;
    for (const auto& [id, e] : g.entities()) n += e.category == c;
    return n;
}

}  // namespace

TEST_SUITE("procgen") {

TEST_CASE("no branching, depth 3 -> one straight 3-segment road") {
    GenConfig c;
    c.branch_probability = 0;
    c.max_road_depth = 3;
    c.extent_w = c.extent_h = 1000;
    Rng rng(5);
    RoadNetwork net = generate_roads(c, rng);
    REQUIRE(net.segments.size() == 3);
    Vec2 d = net.segments[0].dir();
    for (const auto& s : net.segments) {
        CHECK(s.dir().x == doctest::Approx(d.x));
        CHECK(s.dir().y == doctest::Approx(d.y));
    }
    CHECK(net.segments[1].a == net.segments[0].b);
    CHECK(net.segments[2].a == net.segments[1].b);
}

TEST_CASE("config validation") {
    GenConfig c;
    c.building_density = 1.5;
    CHECK_THROWS_AS(c.validate(), SimError);
    c = GenConfig{};
    c.extent_w = -1;
    CHECK_THROWS_AS(generate_city(c), SimError);
    c = GenConfig{};
    c.extent_w = c.extent_h = 20;
    CHECK_THROWS_AS(generate_city(c), SimError);
}

TEST_CASE("50 seeds: connected road networks with no stray crossings, degree <= 4") {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        GenConfig c;
        c.seed = seed;
        Rng rng(seed);
        RoadNetwork net = generate_roads(c, rng);
        REQUIRE(connected(net));
        REQUIRE(no_stray_crossings(net));
        for (const auto& x : net.intersections) REQUIRE(x.degree() <= 4);
        for (const auto& s : net.segments) {
            REQUIRE(s.length() == doctest::Approx(c.segment_length));
            REQUIRE((s.a.x == s.b.x || s.a.y == s.b.y));
        }
    }
}

TEST_CASE("same seed -> byte-identical city") {
    GenConfig c;
    c.seed = 42;
    CHECK(generate_city(c).to_json().dump() == generate_city(c).to_json().dump());
    GenConfig d = c;
    d.seed = 43;
    CHECK(generate_city(c).to_json().dump() != generate_city(d).to_json().dump());
}

TEST_CASE("building density 0 -> no buildings; element density 0 -> no props") {
    GenConfig c;
    c.building_density = 0;
    c.street_element_density = 0;
    City city = generate_city(c);
    CHECK(count(city.scene, Category::building) == 0);
    CHECK(city.scene.size() == city.roads.segments.size());
}

TEST_CASE("isolated segment, one 10 m type, 100 m frontage per side, density 1 -> at least 16 buildings") {
    GenConfig c;
    c.building_density = 1.0;
    c.street_element_density = 0;
    c.buildings = {{10, 10, Category::building, {"house"}}};
    RoadNetwork net;
    RoadSegment s;
    s.id = 0;
    s.a = {50, 100};
    s.b = {166, 100};  // 116 m minus 8 m corner clearance at each end = 100 m usable per side
    s.a_node = 0;
    s.b_node = 1;
    net.segments.push_back(s);
    net.intersections = {{0, s.a, {0}}, {1, s.b, {0}}};
    SceneGraph g({0, 0, 250, 200});
    add_roads_to_scene(net, g);
    Rng rng(1);
    BuildingStats st = generate_buildings(net, g, c, rng);
    std::size_t n = count(g, Category::building);
    CHECK(n >= 16);
    CHECK(st.frontage == doctest::Approx(200));
    CHECK_FALSE(st.shortfall);
    CHECK(blocking_overlaps(g) == 0);
}

TEST_CASE("buildings face a road and sit right behind the sidewalk") {
    GenConfig c;
    c.seed = 8;
    City city = generate_city(c);
    for (const auto& [id, e] : city.scene.entities()) {
        if (e.category != Category::building) continue;
        // Oracle: a point just beyond the front face lies inside some road corridor.
        Vec2 h = heading(e.pose.yaw);
        double half = std::abs(h.x) * e.footprint.width() / 2 + std::abs(h.y) * e.footprint.height() / 2;
        Vec2 probe = e.footprint.center() + h * (half + 0.25);
        bool on_road = false;
        for (const auto& [jd, f] : city.scene.entities())
            if (f.category == Category::road_segment && f.footprint.contains(probe)) on_road = true;
        REQUIRE(on_road);
    }
}

TEST_CASE("20 seeds: zero building overlaps, trees only on lane 0, fill statistic reported") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        GenConfig c;
        c.seed = seed;
        City city = generate_city(c);
        REQUIRE(blocking_overlaps(city.scene) == 0);
        CHECK(city.building_stats.fill_fraction() >= 0.8 * c.building_density);
        // Tree positions: lateral distance from their segment equals the innermost lane offset.
        for (const auto& [id, e] : city.scene.entities()) {
            if (!e.has_tag("tree")) continue;
            Vec2 p = e.footprint.center();
            bool on_lane0 = false;
            for (const auto& s : city.roads.segments) {
                Vec2 rel = p - s.a;
                double along = rel.dot(s.dir()), across = std::abs(rel.dot(s.left()));
                if (along > 0 && along < s.length() && std::abs(across - c.lane_offsets[0]) < 1e-9) on_lane0 = true;
            }
            REQUIRE(on_lane0);
        }
        // Props never overlap buildings.
        for (const auto& [id, e] : city.scene.entities()) {
            if (e.category == Category::building || e.category == Category::road_segment) continue;
            for (const auto& [jd, f] : city.scene.entities())
                if (f.category == Category::building) REQUIRE_FALSE(oracle::box_overlap(e.footprint, f.footprint));
        }
    }
}

TEST_CASE("obstacle mode: every lateral group keeps a free lane (exhaustive)") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        GenConfig c;
        c.seed = seed;
        c.obstacle_mode = true;
        c.street_element_density = 1.0;
        c.tree_probability = 1.0;
        c.prop_probability = 1.0;
        City city = generate_city(c);
        for (const auto& s : city.roads.segments)
            for (int side : {1, -1}) {
                auto lay = sidewalk_layout(s, side, c.sidewalk_margin, c.fine_step, c.lane_offsets);
                for (double st : lay.s) {
                    int free = 0;
                    for (double lat : lay.lateral) {
                        AABB probe = AABB::centered(s.at(st, lat), c.prop_probe_half, c.prop_probe_half);
                        free += !oracle::collides(city.scene, probe);
                    }
                    REQUIRE(free >= 1);
                }
            }
    }
}

TEST_CASE("without obstacle mode a saturated sidewalk can be fully blocked") {
    GenConfig c;
    c.seed = 3;
    c.street_element_density = 1.0;
    c.tree_probability = 1.0;
    c.prop_probability = 1.0;
    c.props = {default_prop_catalog()[0], default_prop_catalog()[3]};  // tree + bin, both blocking
    City city = generate_city(c);
    const auto& s = city.roads.segments[0];
    auto lay = sidewalk_layout(s, 1, c.sidewalk_margin, c.fine_step, c.lane_offsets);
    int free = 0;
    for (double lat : lay.lateral)
        free += !oracle::collides(city.scene, AABB::centered(s.at(lay.s[3], lat), c.prop_probe_half, c.prop_probe_half));
    CHECK(free == 0);
}

TEST_CASE("stage monotonicity: later stages only add entities") {
    GenConfig c;
    c.seed = 77;
    Rng rng(c.seed);
    SceneGraph g({0, 0, c.extent_w, c.extent_h});
    RoadNetwork net = generate_roads(c, rng);
    add_roads_to_scene(net, g);
    json after_roads = g.to_json();
    generate_buildings(net, g, c, rng);
    json after_buildings = g.to_json();
    generate_street_elements(net, g, c, rng);
    json after_props = g.to_json();
    auto prefix = [](const json& small, const json& big) {
        for (std::size_t i = 0; i < small["entities"].size(); ++i)
            if (small["entities"][i] != big["entities"][i]) return false;
        return true;
    };
    CHECK(prefix(after_roads, after_buildings));
    CHECK(prefix(after_buildings, after_props));
    CHECK(after_props.dump() == generate_city(c).scene.to_json().dump());
}

TEST_CASE("tiny one-block extent golden") {
    GenConfig c;
    c.seed = 3;
    c.extent_w = c.extent_h = 228;
    c.road_density = 77;
    City city = generate_city(c);
    CHECK(city.roads.segments.size() == 4);
    CHECK(city.roads.intersections.size() == 5);  // tree: nodes = segments + 1
    CHECK(connected(city.roads));
    CHECK(count(city.scene, Category::building) == 28);
    CHECK(count(city.scene, Category::building) >= 1);
}

TEST_CASE("city json round trip") {
    GenConfig c;
    c.seed = 9;
    City city = generate_city(c);
    City back = City::from_json(json::parse(city.to_json().dump()));
    CHECK(back.to_json().dump() == city.to_json().dump());
    json cat = json::array({{{"frontage", 12}, {"depth", 9}, {"tags", {"x"}}}});
    auto parsed = building_catalog_from_json(cat);
    REQUIRE(parsed.size() == 1);
    CHECK(parsed[0].frontage == 12);
    CHECK(parsed[0].tags.count("x"));
}

}  // TEST_SUITE
