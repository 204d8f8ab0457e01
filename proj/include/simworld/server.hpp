#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "simworld/delivery.hpp"
#include "simworld/planner.hpp"
#include "simworld/tasks.hpp"

namespace simworld {

// Splits a byte stream into LF-terminated lines (a trailing CR is dropped).
// Lines longer than max_line are cut and delivered as they fill up, so memory stays bounded.
class LineFramer {
public:
    explicit LineFramer(std::size_t max_line = 1 << 20) : max_line_(max_line) {}
    std::vector<std::string> feed(std::string_view bytes);
    const std::string& partial() const { return buf_; }

private:
    std::size_t max_line_;
    std::string buf_;
};

std::string base64_encode(const std::vector<std::uint8_t>& bytes);

// Protocol error codes beyond the simulator's own.
namespace proto_err {
inline constexpr const char* MalformedJson = "MalformedJson";
inline constexpr const char* BadRequest = "BadRequest";
inline constexpr const char* UnknownCommand = "UnknownCommand";
inline constexpr const char* NoWorld = "NoWorld";
inline constexpr const char* Overloaded = "overloaded";
}  // namespace proto_err

json error_response(std::int64_t id, const std::string& code, const std::string& message);

// One simulated world behind the JSON-lines command set. Not thread-safe: the
// server feeds it from a single executor thread.
class Session {
public:
    explicit Session(std::shared_ptr<const MapData> default_map = nullptr, std::uint64_t seed = 0);
    ~Session();
    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    // Parses one line and answers it; malformed input yields an error with id 0.
    json handle_line(const std::string& line);
    json handle(const json& request);

    bool loaded() const { return world_ != nullptr; }
    World& world();
    // Wall-clock async pacing requested through sim.run (seconds per interval), if active.
    std::optional<double> wall_clock_interval() const { return wall_interval_; }
    // One simulated async interval (used by the server's wall-clock ticker).
    void async_interval();

private:
    struct NavEpisode {
        NavTask task;
        AgentId agent = 0;
        std::uint64_t start_tick = 0;
        double d0 = 0, dT = 0;
        std::size_t decisions = 0, fine_waypoints = 0, next_subtask = 0, completed = 0;
        StuckDetector stuck{1200};
        bool is_stuck = false, done = false, success = false;
        std::uint64_t end_tick = 0;
    };

    json dispatch(const std::string& cmd, const json& args);
    json cmd_load(const json& args);
    json cmd_reset();
    json cmd_info() const;
    json cmd_scene_query(const json& args) const;
    json cmd_scene_edit(const json& args);
    json cmd_register(const json& args);
    json cmd_observe(const json& args);
    json cmd_act(const json& args);
    json cmd_plan(const json& args);
    json cmd_task_start(const json& args);
    json cmd_task_status() const;
    json cmd_metrics(const json& args) const;
    json cmd_step(const json& args);
    json cmd_run(const json& args);

    void install(const Scenario& sc);
    AgentId agent_arg(const json& args) const;
    // One tick in the current mode; returns the events it produced.
    std::vector<EventRecord> tick_once();
    void after_tick(const std::vector<ActionCommand>& executed);
    std::vector<EpisodeRecord> episode_records() const;

    std::shared_ptr<const MapData> default_map_;
    std::uint64_t default_seed_;
    json scenario_json_;
    Scenario scenario_;
    std::unique_ptr<World> world_;
    std::unique_ptr<AsyncBuffer> buffer_;
    std::unique_ptr<Economy> economy_;
    std::string mode_ = "sync";
    std::optional<double> wall_interval_;
    std::map<AgentId, PlanProgram> programs_;
    std::map<AgentId, ActionCommand> deferred_;
    std::vector<NavEpisode> episodes_;
    std::optional<SearchTask> search_;
    std::vector<AgentId> search_agents_;
    std::uint64_t search_start_ = 0;
    double search_D0_ = 0;
    std::optional<bool> search_result_;
};

struct ServerConfig {
    std::string bind = "127.0.0.1";
    int port = 9000;  // 0 picks an ephemeral port
    std::size_t max_pending = 64;  // per connection
};

// TCP front end: a reader thread per connection feeds one shared queue; a
// single executor applies requests to the session and writes each response
// back on the originating connection.
class Server {
public:
    Server(Session& session, ServerConfig cfg = {});
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    int start();  // binds and listens; returns the bound port. ConfigInvalid on socket errors.
    void stop();
    void wait();  // blocks until stop()

    // Test hooks: hold the executor so queues fill deterministically.
    void pause();
    void resume();
    std::size_t lines_received() const { return received_.load(); }

private:
    struct Conn;
    struct Job {
        std::shared_ptr<Conn> conn;
        std::string line;
    };
    void accept_loop();
    void read_loop(std::shared_ptr<Conn> c);
    void exec_loop();
    static void send_line(Conn& c, const std::string& s);

    Session& session_;
    ServerConfig cfg_;
    int listen_fd_ = -1;
    std::atomic<bool> running_{false};
    std::atomic<std::size_t> received_{0};
    std::thread acceptor_, executor_;
    std::mutex conns_mu_;
    std::vector<std::pair<std::shared_ptr<Conn>, std::thread>> readers_;

    std::mutex q_mu_;
    std::condition_variable q_cv_;
    std::deque<Job> queue_;
    bool paused_ = false;

    std::mutex stop_mu_;
    std::condition_variable stop_cv_;
};

}  // namespace simworld
