#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "simworld/planner.hpp"

namespace simworld {

using OrderId = std::uint64_t;
using Cents = std::int64_t;

struct EconomyConfig {
    Cents initial_money = 2000;  // M_0
    double hunger_rate = 0.9;
    int order_window = 50;  // ticks
    std::size_t n_restaurants = 5;
    std::string restaurant_tag = "shop";
    std::string dropoff_tag = "landmark";
    Cents scooter_price = 3000;
    double scooter_multiplier = 2.0;
    Cents drink_price = 200;
    double drink_energy = 20, energy_max = 100;
    double v_min = 1.5, v_max = 5.0, v_default = 2.5;  // m/s on foot
    double c0 = 0.01, c1 = 0.002;                      // f(v) = c0 + c1·v² per tick
    double alpha = 2.0, beta = 0.05, gamma = 3.0;      // reward α + β·d, deadline γ·d / v_min
    Cents late_penalty = 100;
    int max_concurrent_orders = 1;
    double meet_radius = 2.0;

    json to_json() const;
    static EconomyConfig from_json(const json& j);  // ConfigInvalid
};

enum class OrderState { open, bid_phase, assigned, picked_up, delivered, failed };
const char* to_string(OrderState s);

struct ShareInfo {
    AgentId publisher = 0;
    WaypointId meet_point = kNone;
    std::optional<AgentId> helper;
    bool handed_off = false;
};

struct Order {
    OrderId id = 0;
    EntityId restaurant = 0;
    WaypointId pickup = kNone, dropoff = kNone;
    double distance = 0;  // A* metres pickup -> dropoff
    Cents base_reward = 0;
    std::uint64_t created = 0, deadline = 0;
    OrderState state = OrderState::open;
    std::optional<AgentId> assignee;
    std::optional<Cents> winning_bid;
    std::optional<ShareInfo> shared;
    std::optional<AgentId> carrier;  // who physically holds it after pickup

    json to_json() const;
};

struct Bid {
    AgentId agent = 0;
    Cents price = 0;
    std::uint64_t tick = 0;
};

// Lowest price, then earliest tick, then smallest agent id, among eligible bidders.
std::optional<Bid> resolve_auction(const std::vector<Bid>& bids, const std::function<bool(AgentId)>& eligible);

struct AuctionRecord {
    OrderId order = 0;
    std::uint64_t tick = 0;
    std::vector<Bid> bids;
    std::set<AgentId> eligible;
    std::optional<Bid> winner;
};

struct AgentLedger {
    Cents m0 = 0;
    std::vector<std::pair<std::uint64_t, Cents>> revenue, costs;  // (tick, amount)
    std::vector<double> energy;                                   // e_i(t), one entry per tick
    std::set<OrderId> bid, succ, delay, shared_succ;
    std::vector<std::uint64_t> buy_bike;  // ticks of successful scooter purchases
    double speed = 2.5;                   // commanded walking speed, m/s
    bool scooter = false;

    Cents total_revenue() const;
    Cents total_cost() const;
    double energy_spent() const;
};

struct DeliveryLedger {
    std::map<AgentId, AgentLedger> agents;
};

struct AgentMetrics {
    AgentId agent = 0;
    double profit = 0;                   // P_i in currency units
    std::size_t successful_orders = 0;   // |O_succ|
    std::optional<double> success_rate;  // SR_i
    std::optional<double> delay_rate;    // DR_i
    std::optional<double> energy_efficiency;  // EE_i
    std::size_t sharing = 0, investment = 0;  // SH_i, IN_i
};

struct MetricsReport {
    std::vector<AgentMetrics> agents;
    // Population mean / std (ddof 0) per metric over defined values.
    std::map<std::string, std::pair<double, double>> summary;
    std::string to_csv(const std::string& model) const;
    json to_json() const;
};
MetricsReport compute_delivery_metrics(const World& w, const DeliveryLedger& ledger);

class Economy {
public:
    Economy(const World& w, EconomyConfig cfg, std::uint64_t seed);
    Economy(const Economy&) = delete;  // planner hooks capture `this`
    Economy& operator=(const Economy&) = delete;

    const EconomyConfig& config() const { return cfg_; }
    const std::vector<Order>& orders() const { return orders_; }
    const Order& order(OrderId id) const;  // NotFound
    const DeliveryLedger& ledger() const { return ledger_; }
    const std::vector<EntityId>& restaurants() const { return restaurants_; }
    const std::map<OrderId, std::vector<Bid>>& bids() const { return bids_; }
    const std::vector<AuctionRecord>& auctions() const { return auctions_; }
    WaypointId restaurant_waypoint(std::size_t i) const { return restaurant_wp_.at(i); }

    // Enrols an agent: sets money to M_0 and walking speed to v_default.
    void register_agent(World& w, AgentId a);

    // Window boundary work (call before agents act each tick): auctions for
    // orders whose bid window closed, then Bernoulli order spawning.
    void begin_tick(World& w);
    // Per-tick dynamics after the world step: energy, speed clamps, deadlines, meet-point handoffs.
    void end_tick(World& w);

    std::vector<OrderId> spawn_orders(World& w);  // one Bernoulli draw per restaurant

    // High-level economy actions. Errors: WrongState, OutOfRange, InsufficientFunds, NotFound.
    void place_bid(World& w, AgentId a, OrderId o, Cents price);
    void pick_up_order(World& w, AgentId a, OrderId o);
    void deliver_order(World& w, AgentId a, OrderId o);
    void share_order(World& w, AgentId a, OrderId o, std::optional<WaypointId> meet_point);
    void cancel_share(World& w, AgentId a, OrderId o);
    void accept_share(World& w, AgentId a, OrderId o);  // become the helper
    void cancel_order(World& w, AgentId a, OrderId o);  // fails the order, no refund
    void purchase_scooter(World& w, AgentId a);
    void purchase_drinks(World& w, AgentId a);
    void adjust_speed(World& w, AgentId a, double v);

    // Orders the agent is responsible for (assigned to it, or carried as helper).
    std::vector<OrderId> active_orders(AgentId a) const;

    // Planner hooks/expanders for the economy verbs.
    const PlannerExtensions& extensions() const { return ext_; }

    json to_json() const;

private:
    EconomyConfig cfg_;
    Rng rng_;
    std::vector<Order> orders_;
    std::map<OrderId, std::vector<Bid>> bids_;
    std::vector<AuctionRecord> auctions_;
    DeliveryLedger ledger_;
    std::vector<EntityId> restaurants_;
    std::vector<WaypointId> restaurant_wp_, dropoff_wp_;
    PlannerExtensions ext_;
    std::uint64_t last_window_ = static_cast<std::uint64_t>(-1);

    Order& order_mut(OrderId id);
    AgentLedger& agent_ledger(AgentId a);
    void credit(World& w, AgentId a, Cents amount, OrderId o, bool late);
    void debit(World& w, AgentId a, Cents amount, const std::string& item);
    void transition(World& w, Order& o, OrderState to, AgentId by, json extra = json::object());
    void check_reach(const World& w, AgentId a, WaypointId wp) const;
    void refresh_multiplier(World& w, AgentId a);
    void build_extensions();
};

// Scripted greedy courier: bids on the closest biddable order, picks up,
// delivers, buys drinks when tired and a scooter when rich.
struct GreedyCourier {
    double bid_fraction = 0.9;  // price = fraction × base reward
    double tired_energy = 20;
    Cents scooter_reserve = 1000;  // keep this much after buying a scooter
};

struct DeliveryRunResult {
    std::size_t ticks = 0;
    std::size_t orders_spawned = 0, auctions = 0;
};

// Lockstep driver: begin_tick, greedy decisions + planner primitives, world step, end_tick.
DeliveryRunResult run_greedy_delivery(World& w, Economy& econ, const GreedyCourier& policy, std::size_t ticks,
                                      const std::function<void(const World&, const Economy&)>& on_tick = {});

}  // namespace simworld
