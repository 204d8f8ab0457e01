#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "simworld/rng.hpp"
#include "simworld/scene.hpp"

namespace simworld {

struct BuildingType {
    double frontage = 10;  // along the road
    double depth = 10;     // away from the road
    Category category = Category::building;
    std::set<std::string> tags;
};

struct PropType {
    std::string name;
    Category category = Category::urban_prop;
    double lateral = 0.6;       // extent across the sidewalk
    double longitudinal = 0.6;  // extent along the sidewalk
    bool blocking = true;
    std::set<std::string> tags;
};

std::vector<BuildingType> default_building_catalog();
std::vector<PropType> default_prop_catalog();  // first entry is the tree
std::vector<BuildingType> building_catalog_from_json(const json& j);
std::vector<PropType> prop_catalog_from_json(const json& j);

struct GenConfig {
    std::uint64_t seed = 1;
    double extent_w = 600, extent_h = 600;  // metres
    double road_density = 150;              // target segments per km²
    double building_density = 0.8;          // (0, 1]; 0 disables buildings
    double street_element_density = 0.3;    // [0, 1]
    int max_road_depth = 64;
    double branch_probability = 0.5;
    bool obstacle_mode = false;

    // Road / sidewalk geometry.
    double segment_length = 82;
    double road_width = 8;
    int lane_count = 2;
    double sidewalk_width = 4;
    double sidewalk_margin = 1;  // keeps fine waypoints clear of the cross street's sidewalk
    double fine_step = 4;
    std::vector<double> lane_offsets{7.5, 6.5, 5.5, 4.5};  // lane 0 (building side) .. lane 3 (curb)

    double prop_probe_half = 0.25;  // half-size of the walker probe used by the free-lane rule
    double tree_probability = 0.6;
    double prop_probability = 0.35;

    std::vector<BuildingType> buildings = default_building_catalog();
    std::vector<PropType> props = default_prop_catalog();

    void validate() const;  // ConfigInvalid
    json to_json() const;
    static GenConfig from_json(const json& j);
};

struct RoadSegment {
    std::size_t id = 0;
    Vec2 a, b;
    std::size_t a_node = 0, b_node = 0;
    double width = 8;
    int lane_count = 2;
    double sidewalk_width = 4;
    int depth = 1;

    double length() const { return dist(a, b); }
    Vec2 dir() const { return (b - a) * (1.0 / length()); }
    Vec2 left() const { Vec2 d = dir(); return {-d.y, d.x}; }
    Vec2 at(double s, double lateral) const { return a + dir() * s + left() * lateral; }
    std::size_t other(std::size_t node) const { return node == a_node ? b_node : a_node; }
};

struct Intersection {
    std::size_t id = 0;
    Vec2 pos;
    std::vector<std::size_t> segments;  // incident, ascending
    std::size_t degree() const { return segments.size(); }
};

struct RoadNetwork {
    std::vector<RoadSegment> segments;
    std::vector<Intersection> intersections;

    json to_json() const;
    static RoadNetwork from_json(const json& j);
};

// Fine sidewalk layout shared by the street-element stage and the waypoint builder.
struct SidewalkLayout {
    std::vector<double> s;        // longitudinal stations
    std::vector<double> lateral;  // signed lateral offsets per lane (lane 0 first)
};
SidewalkLayout sidewalk_layout(const RoadSegment& seg, int side, double margin, double step,
                               const std::vector<double>& lane_offsets);

struct BuildingStats {
    double frontage = 0;  // usable roadside length
    double filled = 0;
    std::size_t sampled = 0, gap_filled = 0;
    double fill_fraction() const { return frontage > 0 ? filled / frontage : 0; }
    bool shortfall = false;  // fill below 0.8 × density
};

struct StreetStats {
    std::size_t placed = 0, rejected_building = 0, cleared_for_free_lane = 0;
};

struct City {
    GenConfig config;
    SceneGraph scene;
    RoadNetwork roads;
    BuildingStats building_stats;
    StreetStats street_stats;

    json to_json() const;  // {config, scene, roads}
    static City from_json(const json& j);
};

RoadNetwork generate_roads(const GenConfig& cfg, Rng& rng);
void add_roads_to_scene(const RoadNetwork& net, SceneGraph& graph);
BuildingStats generate_buildings(const RoadNetwork& net, SceneGraph& graph, const GenConfig& cfg, Rng& rng);
StreetStats generate_street_elements(const RoadNetwork& net, SceneGraph& graph, const GenConfig& cfg, Rng& rng);
City generate_city(const GenConfig& cfg);

// Convenience: footprint of the walker probe at a sidewalk point.
inline AABB probe_box(Vec2 p, double half) { return AABB::centered(p, half, half); }

}  // namespace simworld
