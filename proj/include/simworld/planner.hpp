#pragma once

#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "simworld/env.hpp"

namespace simworld {

// What a clause refers to. Exactly one of entity / waypoint / point, or a
// (category, tag) pair resolved to the nearest match.
struct TargetSpec {
    std::optional<Category> category;
    std::optional<std::string> tag;
    std::optional<EntityId> entity;
    std::optional<WaypointId> waypoint;
    std::optional<Vec2> point;

    json to_json() const;
    static TargetSpec from_json(const json& j);  // UnparseableClause
};

struct PlanStep {
    std::string verb;  // "navigate", a primitive verb, or an extension verb
    json args = json::object();
};

struct HighLevelPlan {
    std::vector<PlanStep> steps;
    std::string source_text;

    json to_json() const;
    static HighLevelPlan from_json(const json& j);  // UnparseableClause
};

// Clause grammar: split on "and" / "then" / commas, each clause matched against
// a fixed pattern table. Throws UnparseableClause naming the fragment.
HighLevelPlan parse_command(const std::string& command);

// Waypoint-to-waypoint hop; `from == kNone` starts at the agent's position.
struct Hop {
    WaypointId from = kNone, to = kNone;
};

struct QueueItem {
    enum class Kind { hop, approach, primitive, hook } kind = Kind::primitive;
    Hop hop;
    WaypointId leg_goal = kNone;  // final waypoint of the navigate leg this hop belongs to
    std::size_t leg = 0;
    EntityId entity = 0;          // approach target
    ActionCommand cmd;            // primitive
    std::string hook;             // hook name (extension verbs)
    json hook_args;
};

enum class ProgramStatus { running, done, failed };
const char* to_string(ProgramStatus s);

// Chooses the next primitive from an observation; nullopt means the party
// stayed silent past the timeout. A command with verb "done" ends the program.
using ExternalChooser = std::function<std::optional<ActionCommand>(const Observation&, std::chrono::milliseconds)>;

// Runs an extension verb when the program reaches it. Returns an error message
// (program fails) or nullopt.
using HookRunner = std::function<std::optional<std::string>(World&, AgentId, const json& args)>;

// Extension verbs (e.g. the delivery economy) rewrite a step into navigate /
// primitive / hook steps before expansion.
using StepExpander = std::function<std::vector<PlanStep>(const PlanStep&, const World&, AgentId)>;

struct PlannerExtensions {
    std::map<std::string, StepExpander> expanders;
    std::map<std::string, HookRunner> hooks;
};

struct PlanProgram {
    AgentId agent = 0;
    ProgramStatus status = ProgramStatus::running;
    std::string reason;
    std::deque<QueueItem> queue;
    std::deque<ActionCommand> pending;  // primitives compiled from the item being executed
    RouteMode mode = RouteMode::pedestrian;

    // Replanning.
    int replan_budget = 2;
    int penalty_factor = 10;
    int wait_budget = 20;  // ticks to wait out a dynamic blocker before replanning
    int replans = 0, waits = 0;
    std::size_t current_leg = static_cast<std::size_t>(-1);
    WaypointId current_leg_goal = kNone;
    std::map<WaypointId, int> penalty;

    bool awaiting = false;
    ActionCommand last_emitted;
    std::size_t emitted = 0;
    std::vector<Hop> hops_started;  // trace of executed hops

    ExternalChooser external;
    std::chrono::milliseconds timeout{1000};
    const PlannerExtensions* ext = nullptr;

    bool done() const { return status == ProgramStatus::done; }
    std::vector<Hop> hops() const;  // hops still queued
    json to_json() const;
};

// Nearest usable waypoint for a target (from a reference point for "nearest" lookups).
WaypointId resolve_waypoint(const World& w, const TargetSpec& t, Vec2 from, RouteMode mode);
// Scene entity referred to by a target, if any; TargetNotFound when none matches.
std::optional<EntityId> resolve_entity(const World& w, const TargetSpec& t, Vec2 from);

// Compiles the plan for `agent`: navigate steps become A* hop chains, other
// steps become primitives. NoPath, TargetNotFound.
PlanProgram expand_rule_based(const HighLevelPlan& plan, const World& w, AgentId agent,
                              const PlannerExtensions* ext = nullptr);

// Next primitive for the program's agent (nullopt once the program is terminal).
// Reads the agent's last feedback to detect blocked moves and replan.
std::optional<ActionCommand> tick_executor(PlanProgram& p, World& w);

// Named decision sources reachable over the protocol.
class ExecutorRegistry {
public:
    void add(const std::string& endpoint, ExternalChooser c);
    void remove(const std::string& endpoint);
    std::optional<ExternalChooser> find(const std::string& endpoint) const;

private:
    mutable std::mutex mu_;
    std::map<std::string, ExternalChooser> endpoints_;
};

// Hands next-primitive choices to an external party; EndpointUnavailable if unknown.
void attach_external_executor(PlanProgram& p, const ExecutorRegistry& reg, const std::string& endpoint,
                              std::chrono::milliseconds timeout = std::chrono::milliseconds(1000));

// Convenience: drive one agent's program in lockstep (others do_nothing) until terminal or max_ticks.
ProgramStatus run_program(PlanProgram& p, World& w, std::size_t max_ticks);

}  // namespace simworld
