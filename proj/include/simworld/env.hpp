#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "simworld/traffic.hpp"

namespace simworld {

using AgentId = EntityId;

enum class Embodiment { humanoid, robot, vehicle };
const char* to_string(Embodiment e);
Embodiment embodiment_from_string(const std::string& s);  // ScenarioInvalid

// Every verb of the low-level action table.
inline const std::vector<std::string>& all_verbs() {
    static const std::vector<std::string> v{
        "step_forward", "step_backward", "move_left", "move_right", "rotate",     "throttle",    "brake",
        "steering",     "stop",          "pick_up",   "drop",       "carry",      "put_down",    "sit_down",
        "stand_up",     "open_door",     "enter_car", "exit_car",   "ride_scooter", "look_up",   "look_down",
        "focus",        "take_photo",    "converse",  "point_direction", "wave_hand", "argue", "send_message",
        "do_nothing",   "evaluate"};
    return v;
}

struct StatusFlags {
    bool seated = false, in_vehicle = false, riding_scooter = false, carrying = false;
    bool operator==(const StatusFlags&) const = default;
};

struct Message {
    std::uint64_t tick = 0;
    AgentId from = 0;
    std::string text;
};

struct ActionFeedback {
    std::string verb = "none";
    std::string outcome = "ok";  // ok | blocked | invalid
    std::optional<std::string> error;       // error code for invalid outcomes
    std::optional<std::string> collision;   // category of what was hit
    bool signal_violation = false;
    json data;  // verb-specific payload (take_photo raster, evaluate result)
    json to_json() const;
};

struct AgentState {
    AgentId id = 0;
    Embodiment embodiment = Embodiment::humanoid;
    Pose2D pose;
    double speed = 0;
    double energy = 100;
    std::int64_t money_cents = 0;
    std::vector<std::string> items;      // e.g. "scooter", "drink", "order:12"
    std::vector<SceneEntity> held;       // picked-up scene objects
    std::optional<SceneEntity> carried;  // bulky object (carrying flag)
    StatusFlags flags;
    std::vector<Message> inbox;
    // Vehicle controls (agent-driven vehicles only).
    double throttle = 0, brake = 0, steering = 0;
    // View state.
    double pitch = 0, fov = kPi / 2;
    std::optional<EntityId> car;  // entered parked car
    double speed_multiplier = 1;  // scooter riding
    std::uint64_t busy_until = 0;  // async: unavailable while tick < busy_until
    ActionFeedback last;

    bool has_item(const std::string& s) const;
    json to_json() const;
};

struct ActionCommand {
    AgentId agent = 0;
    std::string verb;
    json args = json::object();

    json to_json() const;
    static ActionCommand from_json(const json& j);  // MalformedAction
};

enum class EventKind { collision_static, collision_dynamic, red_light_violation, order_event, purchase, message };
const char* to_string(EventKind k);

struct EventRecord {
    std::uint64_t tick = 0;
    AgentId agent = 0;
    EventKind kind = EventKind::message;
    json payload = json::object();
    json to_json() const;
};

struct EventLog {
    std::vector<EventRecord> records;
    void append(EventRecord r);
    std::string to_jsonl(std::size_t from = 0) const;
};

struct Observation {
    AgentId agent = 0;
    std::uint64_t tick = 0;
    Pose2D pose;
    double compass = 0;
    int raster_w = 0, raster_h = 0;
    std::vector<std::uint8_t> raster;  // empty unless requested
    json scene_view = json::array();
    json signals = json::array();
    std::vector<Message> messages;
    ActionFeedback feedback;
    json vitals, flags;

    json to_json(bool include_raster = false) const;
};

struct AgentSpec {
    Embodiment embodiment = Embodiment::humanoid;
    std::optional<WaypointId> spawn_waypoint;
    std::optional<Pose2D> spawn_pose;
    double energy = 100;
    std::int64_t money_cents = 0;
};

struct EnvConfig {
    double humanoid_step = 0.5, robot_step = 0.25;
    double humanoid_size = 0.5, robot_size = 0.6;
    double wheelbase = 2.7, max_steer = 0.5;  // bicycle model, radians at |steering| = 1
    double interact_range = 1.5;
    double view_radius = 20;
    int raster_size = 64;
    double raster_cell = 0.5;
    double async_interval = 0.1;
    std::map<std::string, int> verb_ticks;  // async action durations; missing verbs take 1 tick
};

struct Scenario {
    std::shared_ptr<const MapData> map;
    std::uint64_t seed = 0;
    std::vector<AgentSpec> agents;
    std::size_t n_vehicles = 0, n_pedestrians = 0;
    std::string mode = "sync";
    TrafficConfig traffic;
    EnvConfig env;

    // {map_ref | map, seed, agents:[{embodiment, spawn_waypoint|spawn, vitals}], traffic, mode, interval}
    static Scenario from_json(const json& j, std::shared_ptr<const MapData> preloaded = nullptr);
};

// Map files hold either a full city {config, scene, roads} or a generator config. ConfigInvalid.
std::shared_ptr<const MapData> map_from_json(const json& m);
std::shared_ptr<const MapData> load_map_file(const std::string& path);

class World;
using Evaluator = std::function<json(World&, AgentId)>;

struct StepResult {
    std::map<AgentId, Observation> observations;
    std::vector<EventRecord> events;
};

class World {
public:
    // Deterministic initial world; ScenarioInvalid on bad specs.
    static World reset(const Scenario& sc, std::map<AgentId, Observation>* first_obs = nullptr);

    const MapData& map() const { return *map_; }
    std::shared_ptr<const MapData> map_ptr() const { return map_; }
    const SceneGraph& scene() const { return scene_; }
    SceneGraph& scene() { return scene_; }
    const TrafficState& traffic() const { return traffic_; }
    const EnvConfig& config() const { return cfg_; }
    std::uint64_t tick() const { return tick_; }
    const std::map<AgentId, AgentState>& agents() const { return agents_; }
    const AgentState& agent(AgentId id) const;  // UnknownAgent
    AgentState& agent_mut(AgentId id);
    const EventLog& log() const { return log_; }
    EventLog& log() { return log_; }

    AgentId add_agent(const AgentSpec& spec);  // ScenarioInvalid if the spawn is occupied/invalid
    void set_evaluator(Evaluator e) { evaluator_ = std::move(e); }

    // Lockstep: exactly one action per registered agent.
    StepResult step_sync(const std::vector<ActionCommand>& actions);
    // Executes a validated subset of agents' actions and advances one tick (async drain).
    StepResult step_partial(const std::vector<ActionCommand>& actions);
    // Runs one primitive immediately; throws WrongEmbodiment / WrongState / OutOfRange / InvalidTarget.
    ActionFeedback execute_primitive(const ActionCommand& cmd);

    Observation observe(AgentId id, bool raster = false, bool drain = true);  // drains the inbox unless told not to
    std::vector<std::uint8_t> render_raster(const AgentState& a) const;
    AABB footprint(const AgentState& a) const;

    json state_json() const;  // full dynamic state, canonical

private:
    std::shared_ptr<const MapData> map_;
    SceneGraph scene_;
    TrafficState traffic_;
    EnvConfig cfg_;
    std::uint64_t tick_ = 0;
    std::map<AgentId, AgentState> agents_;
    EventLog log_;
    Evaluator evaluator_;

    struct Hit {
        bool is_static = true;
        EntityId id = 0;
        Category category = Category::building;
    };
    std::optional<Hit> first_hit(const AABB& fp, AgentId self) const;
    ActionFeedback move_agent(AgentState& a, Pose2D to);
    void integrate_vehicle(AgentState& a);
    StepResult finish_tick(std::size_t log_mark, const std::set<AgentId>& acted);
};

// Structural validation (known verb, argument types and ranges); MalformedAction.
void validate_action(const ActionCommand& c);

// Legal verbs for an embodiment/flag combination (throws the matching error otherwise).
void check_verb_legal(Embodiment e, const StatusFlags& f, const std::string& verb);

// Thread-safe action buffer for asynchronous mode.
class AsyncBuffer {
public:
    void submit(const ActionCommand& cmd);  // Busy when unavailable or already pending
    std::vector<ActionCommand> drain();     // ascending agent id
    void set_available(AgentId id, bool available);
    bool available(AgentId id) const;

private:
    mutable std::mutex mu_;
    std::map<AgentId, ActionCommand> pending_;
    std::set<AgentId> unavailable_;
};

// One async interval on the simulated clock: drain, execute, advance, update availability.
StepResult async_tick(World& w, AsyncBuffer& buf);

// Runs `duration / interval` intervals. `source(world, buffer, t)` submits actions each interval.
using ActionSource = std::function<void(World&, AsyncBuffer&, double)>;
void run_async(World& w, AsyncBuffer& buf, const ActionSource& source, double interval, double duration);

}  // namespace simworld
