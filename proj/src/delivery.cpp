#include "simworld/delivery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "simworld/error.hpp"

namespace simworld {

json EconomyConfig::to_json() const {
    return json{{"initial_money", initial_money}, {"hunger_rate", hunger_rate},
                {"order_window", order_window},   {"n_restaurants", n_restaurants},
                {"restaurant_tag", restaurant_tag}, {"dropoff_tag", dropoff_tag},
                {"scooter_price", scooter_price}, {"scooter_multiplier", scooter_multiplier},
                {"drink_price", drink_price},     {"drink_energy", drink_energy},
                {"energy_max", energy_max},       {"v_min", v_min},
                {"v_max", v_max},                 {"v_default", v_default},
                {"c0", c0},                       {"c1", c1},
                {"alpha", alpha},                 {"beta", beta},
                {"gamma", gamma},                 {"late_penalty", late_penalty},
                {"max_concurrent_orders", max_concurrent_orders}, {"meet_radius", meet_radius}};
}

EconomyConfig EconomyConfig::from_json(const json& j) {
    EconomyConfig c;
    if (!j.is_object()) fail(err::ConfigInvalid, "economy config must be an object");
    try {
        c.initial_money = j.value("initial_money", c.initial_money);
        c.hunger_rate = j.value("hunger_rate", c.hunger_rate);
        c.order_window = j.value("order_window", c.order_window);
        c.n_restaurants = j.value("n_restaurants", c.n_restaurants);
        c.restaurant_tag = j.value("restaurant_tag", c.restaurant_tag);
        c.dropoff_tag = j.value("dropoff_tag", c.dropoff_tag);
        c.scooter_price = j.value("scooter_price", c.scooter_price);
        c.scooter_multiplier = j.value("scooter_multiplier", c.scooter_multiplier);
        c.drink_price = j.value("drink_price", c.drink_price);
        c.drink_energy = j.value("drink_energy", c.drink_energy);
        c.energy_max = j.value("energy_max", c.energy_max);
        c.v_min = j.value("v_min", c.v_min);
        c.v_max = j.value("v_max", c.v_max);
        c.v_default = j.value("v_default", c.v_default);
        c.c0 = j.value("c0", c.c0);
        c.c1 = j.value("c1", c.c1);
        c.alpha = j.value("alpha", c.alpha);
        c.beta = j.value("beta", c.beta);
        c.gamma = j.value("gamma", c.gamma);
        c.late_penalty = j.value("late_penalty", c.late_penalty);
        c.max_concurrent_orders = j.value("max_concurrent_orders", c.max_concurrent_orders);
        c.meet_radius = j.value("meet_radius", c.meet_radius);
    } catch (const json::exception& e) {
        fail(err::ConfigInvalid, std::string("economy config: ") + e.what());
    }
    if (c.hunger_rate < 0 || c.hunger_rate > 1) fail(err::ConfigInvalid, "hunger_rate must be in [0,1]");
    if (c.order_window < 1) fail(err::ConfigInvalid, "order_window must be >= 1");
    if (!(c.v_min > 0 && c.v_min <= c.v_default && c.v_default <= c.v_max))
        fail(err::ConfigInvalid, "need 0 < v_min <= v_default <= v_max");
    if (c.max_concurrent_orders < 1) fail(err::ConfigInvalid, "max_concurrent_orders must be >= 1");
    if (c.initial_money < 0 || c.scooter_price < 0 || c.drink_price < 0 || c.late_penalty < 0)
        fail(err::ConfigInvalid, "prices must be non-negative");
    return c;
}

const char* to_string(OrderState s) {
    switch (s) {
        case OrderState::open: return "open";
        case OrderState::bid_phase: return "bid_phase";
        case OrderState::assigned: return "assigned";
        case OrderState::picked_up: return "picked_up";
        case OrderState::delivered: return "delivered";
        case OrderState::failed: return "failed";
    }
    return "?";
}

json Order::to_json() const {
    json j{{"id", id},
           {"restaurant", restaurant},
           {"pickup", pickup},
           {"dropoff", dropoff},
           {"distance", distance},
           {"base_reward", base_reward},
           {"created", created},
           {"deadline", deadline},
           {"state", to_string(state)},
           {"assignee", assignee ? json(*assignee) : json()},
           {"winning_bid", winning_bid ? json(*winning_bid) : json()},
           {"carrier", carrier ? json(*carrier) : json()}};
    if (shared)
        j["shared"] = json{{"publisher", shared->publisher},
                           {"meet_point", shared->meet_point},
                           {"helper", shared->helper ? json(*shared->helper) : json()},
                           {"handed_off", shared->handed_off}};
    else
        j["shared"] = nullptr;
    return j;
}

std::optional<Bid> resolve_auction(const std::vector<Bid>& bids, const std::function<bool(AgentId)>& eligible) {
    std::optional<Bid> best;
    for (const Bid& b : bids) {
        if (eligible && !eligible(b.agent)) continue;
        if (!best || std::tie(b.price, b.tick, b.agent) < std::tie(best->price, best->tick, best->agent)) best = b;
    }
    return best;
}

Cents AgentLedger::total_revenue() const {
    Cents s = 0;
    for (const auto& [t, c] : revenue) s += c;
    return s;
}

Cents AgentLedger::total_cost() const {
    Cents s = 0;
    for (const auto& [t, c] : costs) s += c;
    return s;
}

double AgentLedger::energy_spent() const {
    double s = 0;
    for (double e : energy) s += e;
    return s;
}

// ---------------------------------------------------------------------------
// Economy

namespace {

std::optional<WaypointId> front_waypoint(const World& w, EntityId b) {
    try {
        TargetSpec t;
        t.entity = b;
        return resolve_waypoint(w, t, w.scene().at(b).footprint.center(), RouteMode::pedestrian);
    } catch (const SimError&) {
        return std::nullopt;
    }
}

std::string hook_error(const SimError& e) { return e.code(); }

}  // namespace

Economy::Economy(const World& w, EconomyConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), rng_(Rng::derive(seed, Rng::hash("economy"))) {
    std::vector<EntityId> tagged, others;
    for (const auto& [id, e] : w.scene().entities()) {
        if (e.category != Category::building) continue;
        (e.has_tag(cfg_.restaurant_tag) ? tagged : others).push_back(id);
    }
    // Restaurants: tagged buildings first (by id), topped up with other buildings.
    std::vector<EntityId> candidates = tagged;
    candidates.insert(candidates.end(), others.begin(), others.end());
    for (EntityId id : candidates) {
        if (restaurants_.size() >= cfg_.n_restaurants) break;
        if (auto wp = front_waypoint(w, id)) {
            restaurants_.push_back(id);
            restaurant_wp_.push_back(*wp);
        }
    }
    if (restaurants_.empty()) fail(err::ConfigInvalid, "no reachable building can host a restaurant");

    std::vector<EntityId> drop_tagged, drop_any;
    for (const auto& [id, e] : w.scene().entities()) {
        if (e.category != Category::building) continue;
        if (std::find(restaurants_.begin(), restaurants_.end(), id) != restaurants_.end()) continue;
        (e.has_tag(cfg_.dropoff_tag) ? drop_tagged : drop_any).push_back(id);
    }
    for (EntityId id : drop_tagged.empty() ? drop_any : drop_tagged)
        if (auto wp = front_waypoint(w, id)) dropoff_wp_.push_back(*wp);
    if (dropoff_wp_.empty()) dropoff_wp_ = restaurant_wp_;
    build_extensions();
}

const Order& Economy::order(OrderId id) const {
    if (id == 0 || id > orders_.size()) fail(err::NotFound, "no order " + std::to_string(id));
    return orders_[id - 1];
}

Order& Economy::order_mut(OrderId id) { return const_cast<Order&>(order(id)); }

AgentLedger& Economy::agent_ledger(AgentId a) {
    auto it = ledger_.agents.find(a);
    if (it == ledger_.agents.end()) fail(err::UnknownAgent, "agent " + std::to_string(a) + " is not a courier");
    return it->second;
}

void Economy::register_agent(World& w, AgentId a) {
    AgentState& s = w.agent_mut(a);
    if (s.embodiment == Embodiment::vehicle) fail(err::WrongEmbodiment, "couriers walk or ride");
    s.money_cents = cfg_.initial_money;
    s.energy = std::min(s.energy, cfg_.energy_max);
    AgentLedger l;
    l.m0 = s.money_cents;
    l.speed = cfg_.v_default;
    ledger_.agents[a] = l;
    refresh_multiplier(w, a);
}

void Economy::refresh_multiplier(World& w, AgentId a) {
    AgentState& s = w.agent_mut(a);
    const AgentLedger& l = ledger_.agents.at(a);
    double v = s.energy <= 0 ? cfg_.v_min : l.speed;
    double step = s.embodiment == Embodiment::robot ? w.config().robot_step : w.config().humanoid_step;
    double mult = v * w.traffic().config.dt / step;
    if (s.flags.riding_scooter) mult *= cfg_.scooter_multiplier;
    s.speed_multiplier = mult;
}

void Economy::transition(World& w, Order& o, OrderState to, AgentId by, json extra) {
    json p{{"order", o.id}, {"from", to_string(o.state)}, {"to", to_string(to)}};
    for (auto& [k, v] : extra.items()) p[k] = v;
    o.state = to;
    w.log().append({w.tick(), by, EventKind::order_event, std::move(p)});
}

void Economy::credit(World& w, AgentId a, Cents amount, OrderId o, bool late) {
    w.agent_mut(a).money_cents += amount;
    agent_ledger(a).revenue.emplace_back(w.tick(), amount);
    w.log().append({w.tick(), a, EventKind::order_event,
                    json{{"order", o}, {"payout", amount}, {"late", late}}});
}

void Economy::debit(World& w, AgentId a, Cents amount, const std::string& item) {
    AgentState& s = w.agent_mut(a);
    if (s.money_cents < amount)
        fail(err::InsufficientFunds, item + " costs " + std::to_string(amount) + ", have " +
                                         std::to_string(s.money_cents));
    s.money_cents -= amount;
    agent_ledger(a).costs.emplace_back(w.tick(), amount);
    w.log().append({w.tick(), a, EventKind::purchase, json{{"item", item}, {"cost", amount}}});
}

void Economy::check_reach(const World& w, AgentId a, WaypointId wp) const {
    double d = dist(w.agent(a).pose.pos(), w.map().fine.node(wp).pos);
    if (d > cfg_.meet_radius)
        fail(err::OutOfRange, "waypoint " + std::to_string(wp) + " is " + std::to_string(d) + " m away");
}

std::vector<OrderId> Economy::active_orders(AgentId a) const {
    std::vector<OrderId> out;
    for (const Order& o : orders_) {
        if (o.state != OrderState::assigned && o.state != OrderState::picked_up) continue;
        bool mine = o.carrier ? *o.carrier == a : o.assignee == a;
        bool helping = o.shared && o.shared->helper == a && !o.shared->handed_off;
        if (mine || helping) out.push_back(o.id);
    }
    return out;
}

std::vector<OrderId> Economy::spawn_orders(World& w) {
    std::vector<OrderId> out;
    const double dt = w.traffic().config.dt;
    for (std::size_t i = 0; i < restaurants_.size(); ++i) {
        if (!rng_.bernoulli(cfg_.hunger_rate)) continue;
        WaypointId drop = dropoff_wp_[rng_.below(dropoff_wp_.size())];
        Order o;
        o.id = orders_.size() + 1;
        o.restaurant = restaurants_[i];
        o.pickup = restaurant_wp_[i];
        o.dropoff = drop;
        try {
            o.distance = astar(w.map().fine, o.pickup, drop, RouteMode::pedestrian).metres();
        } catch (const SimError&) {
            continue;  // unreachable customer: the draw is spent, no order
        }
        o.base_reward = std::llround((cfg_.alpha + cfg_.beta * o.distance) * 100.0);
        o.created = w.tick();
        o.deadline = w.tick() + static_cast<std::uint64_t>(std::ceil(cfg_.gamma * o.distance / (cfg_.v_min * dt)));
        orders_.push_back(o);
        Order& ref = orders_.back();
        w.log().append({w.tick(), 0, EventKind::order_event,
                        json{{"order", ref.id}, {"from", nullptr}, {"to", "open"}, {"base_reward", ref.base_reward},
                             {"deadline", ref.deadline}}});
        transition(w, ref, OrderState::bid_phase, 0);
        out.push_back(ref.id);
    }
    return out;
}

void Economy::begin_tick(World& w) {
    const std::uint64_t t = w.tick();
    if (t % static_cast<std::uint64_t>(cfg_.order_window) != 0 || t == last_window_) return;
    last_window_ = t;
    for (Order& o : orders_) {
        if (o.state != OrderState::bid_phase || o.created + cfg_.order_window > t) continue;
        AuctionRecord rec;
        rec.order = o.id;
        rec.tick = t;
        rec.bids = bids_[o.id];
        auto eligible = [&](AgentId a) {
            return static_cast<int>(active_orders(a).size()) < cfg_.max_concurrent_orders;
        };
        for (const Bid& b : rec.bids)
            if (eligible(b.agent)) rec.eligible.insert(b.agent);
        rec.winner = resolve_auction(rec.bids, eligible);
        bids_.erase(o.id);
        if (rec.winner) {
            o.assignee = rec.winner->agent;
            o.winning_bid = rec.winner->price;
            transition(w, o, OrderState::assigned, rec.winner->agent, json{{"price", rec.winner->price}});
        }
        auctions_.push_back(std::move(rec));
    }
    spawn_orders(w);
}

void Economy::end_tick(World& w) {
    for (auto& [id, l] : ledger_.agents) {
        AgentState& s = w.agent_mut(id);
        double e = std::min(s.energy, cfg_.c0 + cfg_.c1 * s.speed * s.speed);
        e = std::max(e, 0.0);
        s.energy -= e;
        l.energy.push_back(e);
        refresh_multiplier(w, id);
    }
    for (Order& o : orders_) {
        if (o.state == OrderState::bid_phase && w.tick() > o.deadline) {
            bids_.erase(o.id);
            transition(w, o, OrderState::failed, 0, json{{"reason", "expired"}});
        }
        if (o.state == OrderState::picked_up && o.shared && o.shared->helper && !o.shared->handed_off) {
            Vec2 m = w.map().fine.node(o.shared->meet_point).pos;
            AgentId pub = o.shared->publisher, help = *o.shared->helper;
            if (dist(w.agent(pub).pose.pos(), m) <= cfg_.meet_radius &&
                dist(w.agent(help).pose.pos(), m) <= cfg_.meet_radius) {
                o.shared->handed_off = true;
                o.carrier = help;
                std::string tag = "order:" + std::to_string(o.id);
                auto& pi = w.agent_mut(pub).items;
                pi.erase(std::remove(pi.begin(), pi.end(), tag), pi.end());
                w.agent_mut(help).items.push_back(tag);
                w.log().append({w.tick(), help, EventKind::order_event,
                                json{{"order", o.id}, {"handoff", pub}, {"helper", help}}});
            }
        }
    }
}

void Economy::place_bid(World& w, AgentId a, OrderId id, Cents price) {
    AgentLedger& l = agent_ledger(a);
    Order& o = order_mut(id);
    if (o.state != OrderState::bid_phase) fail(err::WrongState, "order " + std::to_string(id) + " is " + to_string(o.state));
    if (price <= 0 || price > o.base_reward)
        fail(err::OutOfRange, "bid must be in (0, " + std::to_string(o.base_reward) + "]");
    auto& v = bids_[id];
    auto it = std::find_if(v.begin(), v.end(), [&](const Bid& b) { return b.agent == a; });
    if (it != v.end()) *it = Bid{a, price, w.tick()};
    else v.push_back(Bid{a, price, w.tick()});
    l.bid.insert(id);
    w.log().append({w.tick(), a, EventKind::order_event, json{{"order", id}, {"bid", price}}});
}

void Economy::pick_up_order(World& w, AgentId a, OrderId id) {
    agent_ledger(a);
    Order& o = order_mut(id);
    if (o.state != OrderState::assigned || o.assignee != a)
        fail(err::WrongState, "order " + std::to_string(id) + " is not awaiting pickup by this agent");
    if (w.agent(a).energy <= 0) fail(err::WrongState, "exhausted");
    check_reach(w, a, o.pickup);
    o.carrier = a;
    w.agent_mut(a).items.push_back("order:" + std::to_string(id));
    transition(w, o, OrderState::picked_up, a);
}

void Economy::deliver_order(World& w, AgentId a, OrderId id) {
    agent_ledger(a);
    Order& o = order_mut(id);
    if (o.state != OrderState::picked_up || o.carrier != a)
        fail(err::WrongState, "agent does not carry order " + std::to_string(id));
    check_reach(w, a, o.dropoff);
    bool late = w.tick() > o.deadline;
    Cents amount = std::max<Cents>(0, *o.winning_bid - (late ? cfg_.late_penalty : 0));
    std::string tag = "order:" + std::to_string(id);
    auto& items = w.agent_mut(a).items;
    items.erase(std::remove(items.begin(), items.end(), tag), items.end());
    transition(w, o, OrderState::delivered, a, json{{"late", late}, {"revenue", amount}});
    AgentId owner = *o.assignee;
    AgentLedger& ol = agent_ledger(owner);
    ol.succ.insert(id);
    if (late) ol.delay.insert(id);
    if (o.shared && o.shared->handed_off) {
        Cents half = amount / 2;
        credit(w, owner, half, id, late);
        credit(w, *o.shared->helper, amount - half, id, late);
        ol.shared_succ.insert(id);
    } else {
        credit(w, owner, amount, id, late);
    }
}

void Economy::share_order(World& w, AgentId a, OrderId id, std::optional<WaypointId> meet_point) {
    agent_ledger(a);
    Order& o = order_mut(id);
    if (o.state != OrderState::picked_up || o.assignee != a || o.carrier != a)
        fail(err::WrongState, "only the carrying assignee can share order " + std::to_string(id));
    if (o.shared) fail(err::WrongState, "order " + std::to_string(id) + " is already shared");
    WaypointId m = meet_point ? *meet_point : w.map().fine.nearest(w.agent(a).pose.pos(), RouteMode::pedestrian);
    if (m == kNone || m >= w.map().fine.size()) fail(err::OutOfRange, "no meet point");
    o.shared = ShareInfo{a, m, std::nullopt, false};
    w.log().append({w.tick(), a, EventKind::order_event, json{{"order", id}, {"shared", true}, {"meet_point", m}}});
}

void Economy::accept_share(World& w, AgentId a, OrderId id) {
    agent_ledger(a);
    Order& o = order_mut(id);
    if (!o.shared || o.state != OrderState::picked_up) fail(err::WrongState, "order " + std::to_string(id) + " is not shared");
    if (o.shared->publisher == a || o.shared->helper == a) return;
    if (o.shared->helper) fail(err::WrongState, "order " + std::to_string(id) + " already has a helper");
    if (static_cast<int>(active_orders(a).size()) >= cfg_.max_concurrent_orders)
        fail(err::WrongState, "helper is at capacity");
    o.shared->helper = a;
    w.log().append({w.tick(), a, EventKind::order_event, json{{"order", id}, {"helper", a}}});
}

void Economy::cancel_share(World& w, AgentId a, OrderId id) {
    agent_ledger(a);
    Order& o = order_mut(id);
    if (!o.shared || o.shared->publisher != a) fail(err::WrongState, "agent did not share order " + std::to_string(id));
    if (o.shared->handed_off) fail(err::WrongState, "order already handed off");
    o.shared.reset();
    w.log().append({w.tick(), a, EventKind::order_event, json{{"order", id}, {"shared", false}}});
}

void Economy::cancel_order(World& w, AgentId a, OrderId id) {
    agent_ledger(a);
    Order& o = order_mut(id);
    bool held = o.state == OrderState::assigned || o.state == OrderState::picked_up;
    if (!held || o.assignee != a || (o.shared && o.shared->handed_off))
        fail(err::WrongState, "agent cannot cancel order " + std::to_string(id));
    if (o.carrier) {
        std::string tag = "order:" + std::to_string(id);
        auto& items = w.agent_mut(*o.carrier).items;
        items.erase(std::remove(items.begin(), items.end(), tag), items.end());
    }
    o.shared.reset();
    transition(w, o, OrderState::failed, a, json{{"reason", "cancelled"}});
}

void Economy::purchase_scooter(World& w, AgentId a) {
    AgentLedger& l = agent_ledger(a);
    if (l.scooter) fail(err::WrongState, "already owns a scooter");
    debit(w, a, cfg_.scooter_price, "scooter");
    l.scooter = true;
    l.buy_bike.push_back(w.tick());
    AgentState& s = w.agent_mut(a);
    s.items.push_back("scooter");
    s.flags.riding_scooter = true;
    refresh_multiplier(w, a);
}

void Economy::purchase_drinks(World& w, AgentId a) {
    agent_ledger(a);
    debit(w, a, cfg_.drink_price, "drink");
    AgentState& s = w.agent_mut(a);
    s.energy = std::min(cfg_.energy_max, s.energy + cfg_.drink_energy);
    refresh_multiplier(w, a);
}

void Economy::adjust_speed(World& w, AgentId a, double v) {
    AgentLedger& l = agent_ledger(a);
    if (!(v >= cfg_.v_min && v <= cfg_.v_max))
        fail(err::OutOfRange, "speed must be in [" + std::to_string(cfg_.v_min) + ", " + std::to_string(cfg_.v_max) + "]");
    l.speed = v;
    refresh_multiplier(w, a);
}

void Economy::build_extensions() {
    auto order_arg = [](const json& args) -> OrderId {
        if (!args.contains("order") || !args["order"].is_number_unsigned())
            fail(err::UnparseableClause, "economy step needs an order number");
        return args["order"].get<OrderId>();
    };
    auto nav = [](WaypointId wp) { return PlanStep{"navigate", json{{"target", json{{"waypoint", wp}}}}}; };
    auto& ex = ext_.expanders;
    ex["pick_up_order"] = [this, order_arg, nav](const PlanStep& s, const World&, AgentId) {
        const Order& o = order(order_arg(s.args));
        return std::vector<PlanStep>{nav(o.pickup), s};
    };
    ex["deliver_order"] = [this, order_arg, nav](const PlanStep& s, const World&, AgentId) {
        const Order& o = order(order_arg(s.args));
        return std::vector<PlanStep>{nav(o.dropoff), s};
    };
    ex["go_to_meet_point"] = [this, order_arg, nav](const PlanStep& s, const World&, AgentId a) {
        const Order* found = nullptr;
        if (s.args.contains("order")) {
            found = &order(order_arg(s.args));
        } else {
            for (const Order& o : orders_) {
                if (o.state != OrderState::picked_up || !o.shared || o.shared->handed_off) continue;
                if (o.shared->publisher == a || o.shared->helper == a || !o.shared->helper) {
                    found = &o;
                    break;
                }
            }
        }
        if (!found || !found->shared) fail(err::TargetNotFound, "no shared order to meet for");
        PlanStep accept{"accept_share", json{{"order", found->id}}};
        return std::vector<PlanStep>{accept, nav(found->shared->meet_point)};
    };

    auto wrap = [](auto fn) -> HookRunner {
        return [fn](World& w, AgentId a, const json& args) -> std::optional<std::string> {
            try {
                fn(w, a, args);
            } catch (const SimError& e) {
                return hook_error(e);
            }
            return std::nullopt;
        };
    };
    auto& hk = ext_.hooks;
    hk["pick_up_order"] = wrap([this, order_arg](World& w, AgentId a, const json& j) { pick_up_order(w, a, order_arg(j)); });
    hk["deliver_order"] = wrap([this, order_arg](World& w, AgentId a, const json& j) { deliver_order(w, a, order_arg(j)); });
    hk["accept_share"] = wrap([this, order_arg](World& w, AgentId a, const json& j) { accept_share(w, a, order_arg(j)); });
    hk["share_order"] = wrap([this, order_arg](World& w, AgentId a, const json& j) {
        std::optional<WaypointId> m;
        if (j.contains("meet_point")) m = j["meet_point"].get<WaypointId>();
        share_order(w, a, order_arg(j), m);
    });
    hk["cancel_share"] = wrap([this, order_arg](World& w, AgentId a, const json& j) { cancel_share(w, a, order_arg(j)); });
    hk["cancel_order"] = wrap([this, order_arg](World& w, AgentId a, const json& j) { cancel_order(w, a, order_arg(j)); });
    hk["purchase_scooter"] = wrap([this](World& w, AgentId a, const json&) { purchase_scooter(w, a); });
    hk["purchase_drinks"] = wrap([this](World& w, AgentId a, const json&) { purchase_drinks(w, a); });
    hk["adjust_speed"] = wrap([this](World& w, AgentId a, const json& j) {
        if (!j.contains("speed") || !j["speed"].is_number()) fail(err::UnparseableClause, "adjust_speed needs a speed");
        adjust_speed(w, a, j["speed"].get<double>());
    });
    hk["bid_order"] = wrap([this, order_arg](World& w, AgentId a, const json& j) {
        if (!j.contains("price") || !j["price"].is_number_integer()) fail(err::UnparseableClause, "bid needs a price");
        place_bid(w, a, order_arg(j), j["price"].get<Cents>());
    });
}

json Economy::to_json() const {
    json os = json::array();
    for (const Order& o : orders_) os.push_back(o.to_json());
    json ag = json::object();
    for (const auto& [id, l] : ledger_.agents)
        ag[std::to_string(id)] = json{{"m0", l.m0},
                                      {"revenue", l.total_revenue()},
                                      {"cost", l.total_cost()},
                                      {"energy_spent", l.energy_spent()},
                                      {"speed", l.speed},
                                      {"scooter", l.scooter},
                                      {"bid", l.bid},
                                      {"succ", l.succ},
                                      {"delay", l.delay},
                                      {"shared_succ", l.shared_succ}};
    return json{{"config", cfg_.to_json()}, {"orders", os}, {"agents", ag}, {"auctions", auctions_.size()}};
}

// ---------------------------------------------------------------------------
// Metrics

MetricsReport compute_delivery_metrics(const World& w, const DeliveryLedger& ledger) {
    (void)w;
    MetricsReport r;
    for (const auto& [id, l] : ledger.agents) {
        AgentMetrics m;
        m.agent = id;
        m.profit = static_cast<double>(l.total_revenue() - l.total_cost()) / 100.0;
        m.successful_orders = l.succ.size();
        if (!l.bid.empty()) m.success_rate = static_cast<double>(l.succ.size()) / static_cast<double>(l.bid.size());
        if (!l.succ.empty()) m.delay_rate = static_cast<double>(l.delay.size()) / static_cast<double>(l.succ.size());
        double e = l.energy_spent();
        if (e > 0) m.energy_efficiency = m.profit / e;
        m.sharing = l.shared_succ.size();
        m.investment = l.buy_bike.size();
        r.agents.push_back(m);
    }
    auto stat = [&](const std::string& key, auto get) {
        std::vector<double> v;
        for (const auto& m : r.agents)
            if (auto x = get(m)) v.push_back(*x);
        if (v.empty()) return;
        double mean = 0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        r.summary[key] = {mean, std::sqrt(var / static_cast<double>(v.size()))};
    };
    using O = std::optional<double>;
    stat("profit", [](const AgentMetrics& m) { return O(m.profit); });
    stat("successful_orders", [](const AgentMetrics& m) { return O(static_cast<double>(m.successful_orders)); });
    stat("success_rate", [](const AgentMetrics& m) { return m.success_rate; });
    stat("delay_rate", [](const AgentMetrics& m) { return m.delay_rate; });
    stat("energy_efficiency", [](const AgentMetrics& m) { return m.energy_efficiency; });
    stat("sharing_count", [](const AgentMetrics& m) { return O(static_cast<double>(m.sharing)); });
    stat("investment_count", [](const AgentMetrics& m) { return O(static_cast<double>(m.investment)); });
    return r;
}

namespace {
std::string num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}
std::string opt(const std::optional<double>& x) { return x ? num(*x) : ""; }
}  // namespace

std::string MetricsReport::to_csv(const std::string& model) const {
    std::ostringstream os;
    os << "model,agent_id,profit,successful_orders,energy_efficiency,sharing_count,investment_count\n";
    for (const auto& m : agents)
        os << model << ',' << m.agent << ',' << num(m.profit) << ',' << m.successful_orders << ','
           << opt(m.energy_efficiency) << ',' << m.sharing << ',' << m.investment << '\n';
    for (int which = 0; which < 2; ++which) {
        os << model << ',' << (which == 0 ? "Avg" : "Std");
        for (const char* k : {"profit", "successful_orders", "energy_efficiency", "sharing_count", "investment_count"}) {
            auto it = summary.find(k);
            os << ',' << (it == summary.end() ? "" : num(which == 0 ? it->second.first : it->second.second));
        }
        os << '\n';
    }
    return os.str();
}

json MetricsReport::to_json() const {
    auto o = [](const std::optional<double>& x) { return x ? json(*x) : json(); };
    json a = json::array();
    for (const auto& m : agents)
        a.push_back(json{{"agent", m.agent},
                         {"profit", m.profit},
                         {"successful_orders", m.successful_orders},
                         {"success_rate", o(m.success_rate)},
                         {"delay_rate", o(m.delay_rate)},
                         {"energy_efficiency", o(m.energy_efficiency)},
                         {"sharing_count", m.sharing},
                         {"investment_count", m.investment}});
    json s = json::object();
    for (const auto& [k, v] : summary) s[k] = json{{"mean", v.first}, {"std", v.second}};
    return json{{"agents", a}, {"summary", s}};
}

// ---------------------------------------------------------------------------
// Greedy courier driver

namespace {

std::optional<PlanProgram> greedy_decide(World& w, Economy& econ, const GreedyCourier& pol, AgentId id) {
    const AgentState& a = w.agent(id);
    const AgentLedger& l = econ.ledger().agents.at(id);
    const EconomyConfig& cfg = econ.config();
    try {
        if (a.energy < pol.tired_energy && a.money_cents >= cfg.drink_price) {
            econ.purchase_drinks(w, id);
            return std::nullopt;
        }
        if (!l.scooter && a.money_cents >= cfg.scooter_price + pol.scooter_reserve) {
            econ.purchase_scooter(w, id);
            return std::nullopt;
        }
    } catch (const SimError&) {
        return std::nullopt;
    }
    auto active = econ.active_orders(id);
    if (!active.empty()) {
        const Order& o = econ.order(active.front());
        HighLevelPlan plan;
        if (o.state == OrderState::assigned) plan.steps.push_back({"pick_up_order", json{{"order", o.id}}});
        else if (o.carrier == id) plan.steps.push_back({"deliver_order", json{{"order", o.id}}});
        else return std::nullopt;
        try {
            return expand_rule_based(plan, w, id, &econ.extensions());
        } catch (const SimError&) {
            return std::nullopt;
        }
    }
    // Bid on the closest biddable order not yet bid on.
    const Order* best = nullptr;
    double best_d = 0;
    for (const Order& o : econ.orders()) {
        if (o.state != OrderState::bid_phase) continue;
        auto it = econ.bids().find(o.id);
        if (it != econ.bids().end() &&
            std::any_of(it->second.begin(), it->second.end(), [&](const Bid& b) { return b.agent == id; }))
            continue;
        double d = dist(a.pose.pos(), w.map().fine.node(o.pickup).pos);
        if (!best || d < best_d) best = &o, best_d = d;
    }
    if (best) {
        Cents price = std::max<Cents>(1, std::llround(static_cast<double>(best->base_reward) * pol.bid_fraction));
        price = std::min(price, best->base_reward);
        try {
            econ.place_bid(w, id, best->id, price);
        } catch (const SimError&) {
        }
    }
    return std::nullopt;
}

}  // namespace

DeliveryRunResult run_greedy_delivery(World& w, Economy& econ, const GreedyCourier& policy, std::size_t ticks,
                                      const std::function<void(const World&, const Economy&)>& on_tick) {
    DeliveryRunResult res;
    std::map<AgentId, std::optional<PlanProgram>> progs;
    std::size_t orders_before = econ.orders().size(), auctions_before = econ.auctions().size();
    for (std::size_t k = 0; k < ticks; ++k) {
        econ.begin_tick(w);
        std::vector<ActionCommand> acts;
        for (const auto& [id, a] : w.agents()) {
            std::optional<ActionCommand> c;
            if (econ.ledger().agents.count(id)) {
                auto& p = progs[id];
                if (!p || p->status != ProgramStatus::running) p = greedy_decide(w, econ, policy, id);
                if (p) c = tick_executor(*p, w);
            }
            acts.push_back(c ? *c : ActionCommand{id, "do_nothing", json::object()});
        }
        w.step_sync(acts);
        econ.end_tick(w);
        ++res.ticks;
        if (on_tick) on_tick(w, econ);
    }
    res.orders_spawned = econ.orders().size() - orders_before;
    res.auctions = econ.auctions().size() - auctions_before;
    return res;
}

}  // namespace simworld
