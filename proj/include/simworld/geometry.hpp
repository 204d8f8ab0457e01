#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>

namespace simworld {

inline constexpr double kPi = std::numbers::pi;

// Wrap to [-pi, pi).
inline double normalize_angle(double a) {
    double r = std::fmod(a + kPi, 2.0 * kPi);
    if (r < 0) r += 2.0 * kPi;
    r -= kPi;
    if (r >= kPi) r -= 2.0 * kPi;  // fmod rounding can land exactly on +pi
    return r;
}

struct Vec2 {
    double x = 0, y = 0;
    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    bool operator==(const Vec2&) const = default;
    double norm() const { return std::hypot(x, y); }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
};

inline double dist(Vec2 a, Vec2 b) { return (a - b).norm(); }
inline double manhattan(Vec2 a, Vec2 b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }
inline Vec2 heading(double yaw) { return {std::cos(yaw), std::sin(yaw)}; }

struct Pose2D {
    double x = 0, y = 0, yaw = 0;

    Pose2D() = default;
    Pose2D(double x_, double y_, double yaw_ = 0) : x(x_), y(y_), yaw(normalize_angle(yaw_)) {}

    Vec2 pos() const { return {x, y}; }
    void set_yaw(double a) { yaw = normalize_angle(a); }
    bool operator==(const Pose2D&) const = default;
};

struct AABB {
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;

    static AABB centered(Vec2 c, double half_w, double half_h) {
        return {c.x - half_w, c.y - half_h, c.x + half_w, c.y + half_h};
    }

    bool valid() const { return min_x <= max_x && min_y <= max_y; }
    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
    double area() const { return width() * height(); }
    Vec2 center() const { return {(min_x + max_x) * 0.5, (min_y + max_y) * 0.5}; }

    // Positive-area overlap; boxes that merely share an edge do not collide.
    bool overlaps(const AABB& o) const {
        return min_x < o.max_x && o.min_x < max_x && min_y < o.max_y && o.min_y < max_y;
    }
    // Closed-set intersection, used for quadtree membership.
    bool touches(const AABB& o) const {
        return min_x <= o.max_x && o.min_x <= max_x && min_y <= o.max_y && o.min_y <= max_y;
    }
    bool contains(Vec2 p) const { return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y; }
    bool contains(const AABB& o) const {
        return o.min_x >= min_x && o.max_x <= max_x && o.min_y >= min_y && o.max_y <= max_y;
    }
    double distance_to(Vec2 p) const {
        double dx = std::max({min_x - p.x, 0.0, p.x - max_x});
        double dy = std::max({min_y - p.y, 0.0, p.y - max_y});
        return std::hypot(dx, dy);
    }
    AABB expanded(double m) const { return {min_x - m, min_y - m, max_x + m, max_y + m}; }
    bool operator==(const AABB&) const = default;
};

// Axis-aligned bound of a length×width box whose long axis points along yaw.
inline AABB oriented_box(Vec2 c, double yaw, double length, double width) {
    double cs = std::abs(std::cos(yaw)), sn = std::abs(std::sin(yaw));
    double hx = 0.5 * (length * cs + width * sn);
    double hy = 0.5 * (length * sn + width * cs);
    return AABB::centered(c, hx, hy);
}

}  // namespace simworld
