#pragma once
// Minimal blocking JSON-lines TCP client for tests.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>

#include "simworld/server.hpp"

namespace testnet {

class Client {
public:
    explicit Client(int port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in a{};
        a.sin_family = AF_INET;
        a.sin_port = htons(static_cast<std::uint16_t>(port));
        ::inet_pton(AF_INET, "127.0.0.1", &a.sin_addr);
        if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0)
            throw std::runtime_error("cannot connect to port " + std::to_string(port));
    }
    ~Client() { ::close(fd_); }
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    void send(const std::string& s) {
        std::size_t off = 0;
        while (off < s.size()) {
            ssize_t n = ::send(fd_, s.data() + off, s.size() - off, MSG_NOSIGNAL);
            if (n <= 0) throw std::runtime_error("send failed");
            off += static_cast<std::size_t>(n);
        }
    }
    // Next response line, or nullopt on timeout or disconnect.
    std::optional<std::string> line(std::chrono::milliseconds timeout = std::chrono::milliseconds(20000)) {
        auto until = std::chrono::steady_clock::now() + timeout;
        while (pending_.empty()) {
            auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
            if (left.count() <= 0) return std::nullopt;
            pollfd p{fd_, POLLIN, 0};
            if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) continue;
            char buf[65536];
            ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
            if (n <= 0) return std::nullopt;
            for (auto& l : framer_.feed(std::string_view(buf, static_cast<std::size_t>(n)))) pending_.push_back(l);
        }
        std::string l = std::move(pending_.front());
        pending_.pop_front();
        return l;
    }
    simworld::json call(const simworld::json& r) {
        send(r.dump() + "\n");
        auto l = line();
        if (!l) throw std::runtime_error("no response");
        return simworld::json::parse(*l);
    }

private:
    int fd_ = -1;
    simworld::LineFramer framer_;
    std::deque<std::string> pending_;
};

}  // namespace testnet
