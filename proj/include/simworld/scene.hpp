#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "simworld/geometry.hpp"

namespace simworld {

using EntityId = std::uint64_t;
using json = nlohmann::ordered_json;

enum class Category {
    road_segment,
    building,
    vegetation,
    urban_prop,
    vehicle,
    pedestrian,
    robot,
    humanoid,
    traffic_signal,
    generated_asset,
};

const char* to_string(Category c);
Category category_from_string(const std::string& s);  // throws ConfigInvalid

struct SceneEntity {
    EntityId id = 0;
    Category category = Category::urban_prop;
    AABB footprint;
    Pose2D pose;
    std::set<std::string> tags;
    bool blocking = true;

    bool has_tag(const std::string& t) const { return tags.count(t) != 0; }
};

struct QuadTreeConfig {
    std::size_t leaf_capacity = 8;
    int max_depth = 12;
};

struct QuadTreeNode {
    AABB bounds;
    int depth = 0;
    std::vector<EntityId> entities;  // leaf payload only
    std::array<std::unique_ptr<QuadTreeNode>, 4> children;

    bool is_leaf() const { return !children[0]; }
};

struct SceneEditCommand {
    enum class Op { add, remove } op = Op::add;
    // add
    Category category = Category::urban_prop;
    std::set<std::string> tags;
    double size_x = 1.0, size_y = 1.0;
    bool blocking = true;
    Category anchor_category = Category::building;
    std::optional<std::string> anchor_tag;
    double offset_distance = 1.0;
    std::optional<Vec2> near;  // anchor lookup origin; extent centre if unset
    // remove
    EntityId target = 0;
};

class SceneGraph {
public:
    explicit SceneGraph(AABB extent = {0, 0, 1000, 1000}, QuadTreeConfig cfg = {});
    SceneGraph(const SceneGraph& o);
    SceneGraph& operator=(const SceneGraph& o);
    SceneGraph(SceneGraph&&) noexcept = default;
    SceneGraph& operator=(SceneGraph&&) noexcept = default;

    const AABB& extent() const { return extent_; }
    const QuadTreeNode& root() const { return *root_; }
    const QuadTreeConfig& config() const { return cfg_; }
    std::size_t size() const { return index_.size(); }
    const std::map<EntityId, SceneEntity>& entities() const { return index_; }
    const SceneEntity* find(EntityId id) const;
    const SceneEntity& at(EntityId id) const;  // throws NotFound
    EntityId next_id() const { return index_.empty() ? 1 : index_.rbegin()->first + 1; }

    void insert(const SceneEntity& e);  // DuplicateId, OutOfExtent
    void remove(EntityId id);           // NotFound

    bool collides(const AABB& footprint, const std::set<EntityId>& ignore = {}) const;
    // Smallest-id blocking entity overlapping footprint, if any.
    std::optional<EntityId> first_collision(const AABB& footprint, const std::set<EntityId>& ignore = {}) const;
    std::vector<EntityId> query_point(Vec2 p) const;          // sorted ids
    std::vector<EntityId> query_region(const AABB& r) const;  // sorted ids, closed-set test
    const SceneEntity& nearest(Vec2 from, Category cat, const std::optional<std::string>& tag = std::nullopt) const;

    // Returns the id of the added entity (or the removed one).
    EntityId edit(const SceneEditCommand& cmd);
    // Candidate centres tried by an add, in order (exposed for inspection).
    std::vector<AABB> edit_candidates(const SceneEntity& anchor, const SceneEditCommand& cmd) const;

    json to_json() const;
    static SceneGraph from_json(const json& j, QuadTreeConfig cfg = {});

private:
    void insert_into(QuadTreeNode& n, EntityId id, const AABB& fp);
    void split(QuadTreeNode& n);
    template <class F> void visit(const QuadTreeNode& n, const AABB& r, F&& f) const;

    AABB extent_;
    QuadTreeConfig cfg_;
    std::unique_ptr<QuadTreeNode> root_;
    std::map<EntityId, SceneEntity> index_;
};

json entity_to_json(const SceneEntity& e);
SceneEntity entity_from_json(const json& j);
json aabb_to_json(const AABB& b);
AABB aabb_from_json(const json& j);

}  // namespace simworld
