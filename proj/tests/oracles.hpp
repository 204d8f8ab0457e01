#pragma once
// Brute-force reference implementations used only by tests.

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <vector>

#include "simworld/scene.hpp"

namespace oracle {

using namespace simworld;

inline bool box_overlap(const AABB& a, const AABB& b) {
    return a.min_x < b.max_x && b.min_x < a.max_x && a.min_y < b.max_y && b.min_y < a.max_y;
}

inline bool collides(const SceneGraph& g, const AABB& fp, const std::set<EntityId>& ignore = {}) {
    for (const auto& [id, e] : g.entities())
        if (e.blocking && !ignore.count(id) && box_overlap(e.footprint, fp)) return true;
    return false;
}

inline std::optional<EntityId> nearest(const SceneGraph& g, Vec2 p, Category c, const std::optional<std::string>& tag) {
    std::optional<EntityId> best;
    double bd = std::numeric_limits<double>::infinity();
    for (const auto& [id, e] : g.entities()) {  // ascending id: strict < keeps the smallest on ties
        if (e.category != c || (tag && !e.tags.count(*tag))) continue;
        Vec2 ctr = e.footprint.center();
        double d = std::hypot(ctr.x - p.x, ctr.y - p.y);
        if (d < bd) { bd = d; best = id; }
    }
    return best;
}

// Union-find connectivity over an undirected edge list.
struct DisjointSet {
    std::vector<std::size_t> parent;
    explicit DisjointSet(std::size_t n) : parent(n) { for (std::size_t i = 0; i < n; ++i) parent[i] = i; }
    std::size_t find(std::size_t x) { while (parent[x] != x) x = parent[x] = parent[parent[x]]; return x; }
    void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
    std::size_t components() {
        std::set<std::size_t> roots;
        for (std::size_t i = 0; i < parent.size(); ++i) roots.insert(find(i));
        return roots.size();
    }
};

// Plain Dijkstra over an adjacency map; returns infinity when unreachable.
inline double dijkstra(const std::vector<std::vector<std::pair<std::size_t, double>>>& adj, std::size_t s, std::size_t t) {
    std::vector<double> d(adj.size(), std::numeric_limits<double>::infinity());
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[s] = 0;
    pq.push({0, s});
    while (!pq.empty()) {
        auto [du, u] = pq.top();
        pq.pop();
        if (du > d[u]) continue;
        if (u == t) return du;
        for (auto [v, w] : adj[u])
            if (du + w < d[v]) { d[v] = du + w; pq.push({d[v], v}); }
    }
    return d[t];
}

}  // namespace oracle

namespace oracle {

// Integer-weight Dijkstra over (to, weight) adjacency; -1 when unreachable.
inline std::int64_t dijkstra_i64(const std::vector<std::vector<std::pair<std::size_t, std::int64_t>>>& adj, std::size_t s,
                                 std::size_t t) {
    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max();
    std::vector<std::int64_t> d(adj.size(), inf);
    using Item = std::pair<std::int64_t, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    d[s] = 0;
    pq.push({0, s});
    while (!pq.empty()) {
        auto [du, u] = pq.top();
        pq.pop();
        if (du > d[u]) continue;
        if (u == t) return du;
        for (auto [v, w] : adj[u])
            if (du + w < d[v]) { d[v] = du + w; pq.push({d[v], v}); }
    }
    return -1;
}

// Exhaustive simple-path enumeration: cheapest, then lexicographically smallest.
inline std::pair<std::int64_t, std::vector<std::size_t>> best_path_bruteforce(
    const std::vector<std::vector<std::pair<std::size_t, std::int64_t>>>& adj, std::size_t s, std::size_t t) {
    std::int64_t best = -1;
    std::vector<std::size_t> best_path, cur{s};
    std::vector<char> seen(adj.size(), 0);
    seen[s] = 1;
    auto rec = [&](auto&& self, std::size_t u, std::int64_t c) -> void {
        if (u == t) {
            if (best < 0 || c < best || (c == best && cur < best_path)) { best = c; best_path = cur; }
            return;
        }
        for (auto [v, w] : adj[u]) {
            if (seen[v]) continue;
            seen[v] = 1;
            cur.push_back(v);
            self(self, v, c + w);
            cur.pop_back();
            seen[v] = 0;
        }
    };
    rec(rec, s, 0);
    return {best, best_path};
}

}  // namespace oracle
