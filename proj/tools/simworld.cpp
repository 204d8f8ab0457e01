// Command-line front end: map generation, headless runs, task suites, the
// protocol server and top-down rendering.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>

#include "simworld/delivery.hpp"
#include "simworld/error.hpp"
#include "simworld/planner.hpp"
#include "simworld/server.hpp"
#include "simworld/tasks.hpp"

using namespace simworld;

namespace {

constexpr int kConfigError = 2;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_file(const std::string& path, const std::string& data, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << data;
    if (!out) throw ConfigError("failed writing '" + path + "'");
}

std::pair<double, double> parse_size(const std::string& s) {
    static const std::regex re(R"(^\s*([0-9]+(?:\.[0-9]+)?)\s*[xX]\s*([0-9]+(?:\.[0-9]+)?)\s*$)");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw ConfigError("--size must look like 600x600, got '" + s + "'");
    return {std::stod(m[1]), std::stod(m[2])};
}

// Collision-free pedestrian spawn waypoints at least 2 m apart.
std::vector<WaypointId> spawn_points(const MapData& m, std::size_t n, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, Rng::hash("cli-spawns"));
    std::vector<WaypointId> out;
    for (std::size_t tries = 0; out.size() < n && tries < 200000; ++tries) {
        WaypointId w = rng.below(m.fine.size());
        if (!m.fine.traversable(w, RouteMode::pedestrian) || m.fine.blocked(w)) continue;
        if (m.city.scene.collides(AABB::centered(m.fine.node(w).pos, 0.35, 0.35))) continue;
        bool close = false;
        for (WaypointId u : out) close = close || dist(m.fine.node(u).pos, m.fine.node(w).pos) < 2;
        if (!close) out.push_back(w);
    }
    if (out.size() < n) throw ConfigError("map has room for only " + std::to_string(out.size()) + " agents");
    return out;
}

std::uint64_t fnv(const std::string& s) { return Rng::hash(s); }

// ---------------------------------------------------------------------------

int cmd_gen(std::uint64_t seed, const std::string& size, double road_density, double building_density, bool obstacles,
            const std::string& out) {
    GenConfig cfg;
    cfg.seed = seed;
    std::tie(cfg.extent_w, cfg.extent_h) = parse_size(size);
    cfg.road_density = road_density;
    cfg.building_density = building_density;
    cfg.obstacle_mode = obstacles;
    City city = generate_city(cfg);
    write_file(out, city.to_json().dump() + "\n");
    std::size_t buildings = 0;
    for (const auto& [id, e] : city.scene.entities()) buildings += e.category == Category::building;
    std::printf("wrote %s: %zu segments, %zu intersections, %zu entities (%zu buildings)\n", out.c_str(),
                city.roads.segments.size(), city.roads.intersections.size(), city.scene.size(), buildings);
    return 0;
}

int cmd_run(const std::string& map_path, const std::string& mode, std::size_t steps, std::uint64_t seed,
            std::size_t n_agents, std::size_t vehicles, std::size_t pedestrians, const std::string& out) {
    if (mode != "sync" && mode != "async") throw ConfigError("--mode must be sync or async");
    auto map = load_map_file(map_path);
    Scenario sc;
    sc.map = map;
    sc.seed = seed;
    sc.mode = mode;
    sc.n_vehicles = vehicles;
    sc.n_pedestrians = pedestrians;
    for (WaypointId w : spawn_points(*map, n_agents, seed)) {
        AgentSpec a;
        a.spawn_waypoint = w;
        sc.agents.push_back(a);
    }
    World w = World::reset(sc);
    // Each agent walks to random sidewalk waypoints, replanning whenever a program ends.
    Rng rng = Rng::derive(seed, Rng::hash("cli-run"));
    std::map<AgentId, PlanProgram> progs;
    auto next_program = [&](AgentId id) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            WaypointId goal = rng.below(map->fine.size());
            if (!map->fine.traversable(goal, RouteMode::pedestrian) || map->fine.blocked(goal)) continue;
            HighLevelPlan plan;
            plan.steps.push_back(PlanStep{"navigate", json{{"target", json{{"waypoint", goal}}}}});
            try {
                progs[id] = expand_rule_based(plan, w, id);
                return;
            } catch (const SimError&) {
            }
        }
        progs.erase(id);
    };
    for (const auto& [id, a] : w.agents()) next_program(id);
    std::map<std::string, std::size_t> kinds;
    AsyncBuffer buf;
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<ActionCommand> batch;
        for (const auto& [id, a] : w.agents()) {
            std::optional<ActionCommand> c;
            if (mode == "async" && !buf.available(id)) continue;
            auto it = progs.find(id);
            if (it != progs.end()) {
                c = tick_executor(it->second, w);
                if (!c) {
                    next_program(id);
                    if (progs.count(id)) c = tick_executor(progs[id], w);
                }
            }
            batch.push_back(c ? *c : ActionCommand{id, "do_nothing", json::object()});
        }
        StepResult r;
        if (mode == "sync") {
            r = w.step_sync(batch);
        } else {
            for (const auto& c : batch) buf.submit(c);
            r = async_tick(w, buf);
        }
        for (const auto& e : r.events) ++kinds[to_string(e.kind)];
    }
    json agents = json::array();
    for (const auto& [id, a] : w.agents())
        agents.push_back(json{{"id", id}, {"pose", json::array({a.pose.x, a.pose.y, a.pose.yaw})}});
    json summary{{"mode", mode},
                 {"tick", w.tick()},
                 {"agents", agents},
                 {"events", kinds},
                 {"vehicles", w.traffic().vehicles.size()},
                 {"pedestrians", w.traffic().pedestrians.size()},
                 {"state_hash", fnv(w.state_json().dump())}};
    std::string text = summary.dump(2) + "\n";
    if (!out.empty()) write_file(out, text);
    std::fputs(text.c_str(), stdout);
    return 0;
}

int cmd_delivery(const std::string& map_path, std::size_t n_agents, std::size_t steps, double hunger,
                 std::uint64_t seed, const std::string& out) {
    auto map = load_map_file(map_path);
    EconomyConfig cfg;
    cfg.hunger_rate = hunger;
    if (!(hunger >= 0 && hunger <= 1)) throw ConfigError("--hunger must be in [0, 1]");
    Scenario sc;
    sc.map = map;
    sc.seed = seed;
    for (WaypointId w : spawn_points(*map, n_agents, seed)) {
        AgentSpec a;
        a.spawn_waypoint = w;
        sc.agents.push_back(a);
    }
    World w = World::reset(sc);
    Economy econ(w, cfg, seed);
    for (const auto& [id, a] : w.agents()) econ.register_agent(w, id);
    DeliveryRunResult res = run_greedy_delivery(w, econ, GreedyCourier{}, steps);
    MetricsReport rep = compute_delivery_metrics(w, econ.ledger());
    write_file(out, rep.to_csv("greedy"));
    std::size_t delivered = 0;
    for (const auto& o : econ.orders()) delivered += o.state == OrderState::delivered;
    std::printf("%zu ticks, %zu orders spawned, %zu auctions, %zu delivered; metrics in %s\n", res.ticks,
                res.orders_spawned, res.auctions, delivered, out.c_str());
    return 0;
}

int cmd_nav(const std::string& map_path, const std::string& suite_path, std::size_t per_level, std::uint64_t seed,
            bool run) {
    auto map = load_map_file(map_path);
    // Hard and dynamic tasks run on the obstacle-mode variant of the same city.
    std::shared_ptr<const MapData> obstacle_map = map;
    if (!map->city.config.obstacle_mode && map->city.scene.size() > 0) {
        GenConfig oc = map->city.config;
        oc.obstacle_mode = true;
        auto alt = build_map(oc);
        bool same_roads = alt->coarse.size() == map->coarse.size();
        for (WaypointId i = 0; same_roads && i < map->coarse.size(); ++i)
            same_roads = alt->coarse.node(i).pos == map->coarse.node(i).pos;
        if (same_roads) obstacle_map = alt;
    }
    Rng rng(seed);
    std::vector<NavTask> tasks = gen_physical_tasks(*map, per_level, rng);
    json tj = json::array(), rj = json::array();
    std::vector<EpisodeRecord> records;
    for (const NavTask& t : tasks) {
        tj.push_back(t.to_json());
        if (!run) continue;
        auto m = t.obstacle_mode ? obstacle_map : map;
        Scenario sc;
        sc.map = m;
        sc.seed = seed + t.id;
        sc.n_pedestrians = t.pedestrians;
        AgentSpec a;
        a.spawn_waypoint = m->fine.nearest(m->coarse.node(t.start).pos, RouteMode::pedestrian);
        sc.agents = {a};
        World w = World::reset(sc);
        EpisodeRecord r = run_nav_task(w, w.agents().begin()->first, t);
        rj.push_back(r.to_json());
        records.push_back(r);
    }
    json suite{{"seed", seed}, {"per_level", per_level}, {"tasks", tj}};
    if (run) {
        MetricsSummary m = compute_metrics(records, MetricFamily::physical);
        suite["records"] = rj;
        suite["metrics"] = m.to_json();
        std::fputs(m.to_csv().c_str(), stdout);
    }
    write_file(suite_path, suite.dump(1) + "\n");
    std::printf("wrote %zu tasks to %s\n", tasks.size(), suite_path.c_str());
    return 0;
}

int cmd_serve(const std::string& map_path, int port, const std::string& bind, std::uint64_t seed) {
    std::shared_ptr<const MapData> map;
    if (!map_path.empty()) map = load_map_file(map_path);
    if (port < 0 || port > 65535) throw ConfigError("--port must be in [0, 65535]");
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);  // server threads inherit the mask
    Session session(map, seed);
    ServerConfig cfg;
    cfg.port = port;
    cfg.bind = bind;
    Server server(session, cfg);
    int bound = server.start();
    std::printf("listening on %s:%d\n", bind.c_str(), bound);
    std::fflush(stdout);
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
    return 0;
}

int cmd_render(const std::string& map_path, const std::string& out, double scale, bool waypoints) {
    if (!(scale > 0 && scale <= 20)) throw ConfigError("--scale must be in (0, 20]");
    auto map = load_map_file(map_path);
    const AABB ext = map->city.scene.extent();
    int W = std::max(1, static_cast<int>(std::ceil(ext.width() * scale)));
    int H = std::max(1, static_cast<int>(std::ceil(ext.height() * scale)));
    std::vector<std::uint8_t> img(static_cast<std::size_t>(W) * H * 3);
    auto put = [&](int x, int y, std::array<std::uint8_t, 3> c) {
        if (x < 0 || y < 0 || x >= W || y >= H) return;
        std::size_t i = (static_cast<std::size_t>(H - 1 - y) * W + x) * 3;  // north up
        img[i] = c[0];
        img[i + 1] = c[1];
        img[i + 2] = c[2];
    };
    auto fill = [&](const AABB& b, std::array<std::uint8_t, 3> c) {
        int x0 = static_cast<int>(std::floor((b.min_x - ext.min_x) * scale));
        int x1 = static_cast<int>(std::ceil((b.max_x - ext.min_x) * scale));
        int y0 = static_cast<int>(std::floor((b.min_y - ext.min_y) * scale));
        int y1 = static_cast<int>(std::ceil((b.max_y - ext.min_y) * scale));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) put(x, y, c);
    };
    fill(ext, {196, 214, 170});
    // Sidewalk strips, then roads, buildings, vegetation, props.
    for (const auto& s : map->city.roads.segments) {
        double half = s.width / 2 + s.sidewalk_width;
        fill(oriented_box((s.a + s.b) * 0.5, std::atan2(s.b.y - s.a.y, s.b.x - s.a.x), s.length() + 2 * half, 2 * half),
             {205, 205, 200});
    }
    const std::map<Category, std::array<std::uint8_t, 3>> colour{
        {Category::road_segment, {90, 90, 95}},    {Category::building, {150, 105, 80}},
        {Category::vegetation, {60, 140, 60}},     {Category::urban_prop, {200, 160, 40}},
        {Category::vehicle, {40, 80, 200}},        {Category::traffic_signal, {220, 40, 40}},
        {Category::generated_asset, {170, 60, 170}}};
    for (Category pass : {Category::road_segment, Category::building, Category::vegetation, Category::urban_prop,
                          Category::vehicle, Category::traffic_signal, Category::generated_asset})
        for (const auto& [id, e] : map->city.scene.entities())
            if (e.category == pass) fill(e.footprint, colour.at(pass));
    if (waypoints)
        for (const auto& wp : map->coarse.nodes())
            fill(AABB::centered(wp.pos, 1, 1), {230, 30, 30});
    std::string data = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    data.append(reinterpret_cast<const char*>(img.data()), img.size());
    write_file(out, data, true);
    std::printf("wrote %s (%dx%d)\n", out.c_str(), W, H);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Headless urban world simulator"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    std::string size = "600x600", out, map_path, mode = "sync", suite, bind = "127.0.0.1";
    double road_density = 150, building_density = 0.8, hunger = 0.9, scale = 1;
    bool obstacles = false, no_run = false, waypoints = false;
    std::size_t steps = 1000, n_agents = 2, vehicles = 0, pedestrians = 0, per_level = 10;
    int port = 9000;

    auto* gen = app.add_subcommand("gen", "generate a city and write it as JSON");
    gen->add_option("--seed", seed, "generator seed");
    gen->add_option("--size", size, "extent in metres, WxH");
    gen->add_option("--road-density", road_density, "target road segments per km^2");
    gen->add_option("--building-density", building_density, "frontage fill fraction (0, 1]");
    gen->add_flag("--obstacle-mode", obstacles, "block every sidewalk lane somewhere");
    gen->add_option("--out", out, "output map file")->required();

    auto* run = app.add_subcommand("run", "run agents on a map headlessly");
    run->add_option("--map", map_path, "map file")->required();
    run->add_option("--mode", mode, "sync or async")->check(CLI::IsMember({"sync", "async"}));
    run->add_option("--steps", steps, "ticks to simulate");
    run->add_option("--seed", seed, "scenario seed");
    run->add_option("--agents", n_agents, "walking agents");
    run->add_option("--vehicles", vehicles, "traffic vehicles");
    run->add_option("--pedestrians", pedestrians, "background pedestrians");
    run->add_option("--out", out, "also write the summary JSON here");

    auto* task = app.add_subcommand("task", "run a task suite");
    task->require_subcommand(1);
    auto* delivery = task->add_subcommand("delivery", "multi-agent delivery economy with greedy couriers");
    delivery->add_option("--map", map_path, "map file")->required();
    delivery->add_option("--agents", n_agents, "couriers")->default_val(20);
    delivery->add_option("--steps", steps, "ticks")->default_val(5000);
    delivery->add_option("--hunger", hunger, "order probability per restaurant per window");
    delivery->add_option("--seed", seed, "scenario seed");
    delivery->add_option("--out", out, "metrics CSV")->required();
    auto* nav = task->add_subcommand("nav", "generate and run the navigation suite");
    nav->add_option("--map", map_path, "map file")->required();
    nav->add_option("--suite", suite, "output suite JSON")->required();
    nav->add_option("--per-level", per_level, "tasks per difficulty level");
    nav->add_option("--seed", seed, "task sampling seed");
    nav->add_flag("--no-run", no_run, "only generate the tasks");

    auto* serve = app.add_subcommand("serve", "serve the JSON-lines protocol over TCP");
    serve->add_option("--map", map_path, "map file loaded at start");
    serve->add_option("--port", port, "TCP port (0 = ephemeral)");
    serve->add_option("--bind", bind, "bind address");
    serve->add_option("--seed", seed, "scenario seed");

    auto* render = app.add_subcommand("render", "top-down PPM image of a map");
    render->add_option("--map", map_path, "map file")->required();
    render->add_option("--out", out, "output .ppm")->required();
    render->add_option("--scale", scale, "pixels per metre");
    render->add_flag("--waypoints", waypoints, "mark coarse waypoints");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return kConfigError;
    }

    try {
        if (*gen) return cmd_gen(seed, size, road_density, building_density, obstacles, out);
        if (*run) return cmd_run(map_path, mode, steps, seed, n_agents, vehicles, pedestrians, out);
        if (*delivery) return cmd_delivery(map_path, n_agents, steps, hunger, seed, out);
        if (*nav) return cmd_nav(map_path, suite, per_level, seed, !no_run);
        if (*serve) return cmd_serve(map_path, port, bind, seed);
        if (*render) return cmd_render(map_path, out, scale, waypoints);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfigError;
    } catch (const SimError& e) {
        std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
        const std::string& c = e.code();
        bool config = c == err::ConfigInvalid || c == err::ScenarioInvalid || c == err::InfeasibleMap;
        return config ? kConfigError : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kConfigError;
}
