#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "simworld/waypoints.hpp"

namespace simworld {

struct PIDState {
    double kp = 0.8, ki = 0.1, kd = 0.05;
    double integral = 0, prev_error = 0, integral_clamp = 10;
    bool has_prev = false;

    // Returns the raw control output clamped to [lo, hi]. The integral only
    // accumulates while the output is unsaturated (or the error unwinds it).
    double update(double error, double dt, double lo, double hi);
};

enum class SignalPhase { green, yellow, red };
const char* to_string(SignalPhase p);

struct SignalTiming {
    double green = 10, yellow = 3, red = 10;
};

// The phase drives the x-axis approaches; y-axis approaches see green/yellow
// inside the x-axis red, giving an all-red clearance during x-axis yellow.
struct SignalState {
    std::size_t id = 0;
    std::size_t intersection_id = 0;
    SignalPhase phase = SignalPhase::green;
    std::int64_t elapsed_us = 0;  // integer clock keeps phase arithmetic exact
    SignalTiming timing;

    double phase_elapsed() const { return elapsed_us * 1e-6; }
    double duration(SignalPhase p) const;
    void advance(double dt);
    SignalPhase phase_for(bool x_axis) const;
    bool walkable(bool crosses_x_road) const { return phase_for(crosses_x_road) == SignalPhase::red; }
};

struct TrafficConfig {
    double dt = 0.1;
    double cruise_speed = 10, v_max = 15;
    double a_min = -4, a_max = 3;
    PIDState pid;
    double time_headway = 2, standstill_gap = 2, lookahead = 30;
    double brake_decel = 3, stop_margin = 2;  // stop-trigger distance v²/(2·brake_decel) + margin
    double vehicle_length = 4.5, vehicle_width = 1.8;
    double ped_speed = 1.4, ped_size = 0.5, ped_max_turn_rate = kPi / 2, arrive_radius = 0.3;
    int ped_give_up_ticks = 20;  // blocked this long -> turn back
    SignalTiming signal_timing;

    json to_json() const;
    static TrafficConfig from_json(const json& j);
};

struct VehicleState {
    EntityId id = 0;
    Pose2D pose;
    double speed = 0, target_speed = 0;
    std::vector<WaypointId> route;
    std::size_t route_cursor = 0;  // index of the next route node to reach
    PIDState pid;
    bool holding = false;  // committed to stop at a signal until it turns green
    std::uint64_t rng_state = 0;
};

struct PedestrianState {
    EntityId id = 0;
    Pose2D pose;
    double speed = 1.4;
    WaypointId goal = 0, prev = kNone;
    double max_turn_rate = kPi / 2;
    bool waiting = false;
    int blocked_ticks = 0;
    std::uint64_t rng_state = 0;
};

struct TrafficEvent {
    std::uint64_t tick = 0;
    EntityId entity = 0;
    std::string event;
};

struct TrafficState {
    TrafficConfig config;
    std::uint64_t tick = 0;
    std::uint64_t seed = 0;
    EntityId next_id = 1;
    std::vector<VehicleState> vehicles;        // ascending id
    std::vector<PedestrianState> pedestrians;  // ascending id
    std::vector<SignalState> signals;          // ascending intersection id
    std::vector<TrafficEvent> events;          // since last drain
    // Footprints of entities the traffic must not run into (e.g. agents).
    std::vector<std::pair<EntityId, AABB>> external;

    const SignalState* signal_for(std::size_t intersection_id) const;
    AABB footprint(const VehicleState& v) const;
    AABB footprint(const PedestrianState& p) const;
    json to_json() const;
};

// Fresh state with signals deployed at every intersection of degree >= 3.
TrafficState make_traffic(const MapData& map, const TrafficConfig& cfg, std::uint64_t seed);
void spawn_population(const MapData& map, TrafficState& st, std::size_t n_vehicles, std::size_t n_pedestrians, Rng& rng,
                      const SceneGraph* scene = nullptr);
// `scene` overrides the map's static scene (e.g. a world whose props were edited).
void step_traffic(const MapData& map, TrafficState& st, const SceneGraph* scene = nullptr);

// Uniform over outgoing edges, skipping the U-turn unless it is the only option.
WaypointId choose_route(Rng& rng, const WaypointGraph& g, WaypointId node, WaypointId came_from, RouteMode mode);

struct VehiclePerception {
    std::optional<double> leader_gap;    // bumper to bumper, metres
    std::optional<double> stop_distance; // to the next signalled stop line
    std::optional<SignalPhase> signal;
};
VehiclePerception perceive(const MapData& map, const TrafficState& st, const VehicleState& v);
// Updates the signal hold latch on v and returns the commanded speed.
double target_speed_for(const TrafficConfig& cfg, VehicleState& v, const VehiclePerception& p);

}  // namespace simworld
