#include "simworld/scene.hpp"

#include <algorithm>
#include <queue>

#include "simworld/error.hpp"

namespace simworld {

namespace {
constexpr const char* kCategoryNames[] = {
    "road_segment", "building", "vegetation", "urban_prop", "vehicle",
    "pedestrian", "robot", "humanoid", "traffic_signal", "generated_asset",
};

std::unique_ptr<QuadTreeNode> make_node(const AABB& b, int depth) {
    auto n = std::make_unique<QuadTreeNode>();
    n->bounds = b;
    n->depth = depth;
    return n;
}
}  // namespace

const char* to_string(Category c) { return kCategoryNames[static_cast<int>(c)]; }

Category category_from_string(const std::string& s) {
    for (int i = 0; i < 10; ++i)
        if (s == kCategoryNames[i]) return static_cast<Category>(i);
    fail(err::ConfigInvalid, "unknown category '" + s + "'");
}

SceneGraph::SceneGraph(AABB extent, QuadTreeConfig cfg)
    : extent_(extent), cfg_(cfg), root_(make_node(extent, 0)) {
    if (!extent.valid() || extent.area() <= 0) fail(err::ConfigInvalid, "scene extent must have positive area");
}

SceneGraph::SceneGraph(const SceneGraph& o) : extent_(o.extent_), cfg_(o.cfg_), root_(make_node(o.extent_, 0)) {
    for (const auto& [id, e] : o.index_) insert(e);
}

SceneGraph& SceneGraph::operator=(const SceneGraph& o) {
    if (this != &o) {
        SceneGraph tmp(o);
        *this = std::move(tmp);
    }
    return *this;
}

const SceneEntity* SceneGraph::find(EntityId id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &it->second;
}

const SceneEntity& SceneGraph::at(EntityId id) const {
    if (auto* e = find(id)) return *e;
    fail(err::NotFound, "no entity with id " + std::to_string(id));
}

void SceneGraph::insert(const SceneEntity& e) {
    if (index_.count(e.id)) fail(err::DuplicateId, "entity id " + std::to_string(e.id) + " already present");
    if (!e.footprint.valid()) fail(err::ConfigInvalid, "invalid footprint");
    if (!extent_.contains(e.footprint))
        fail(err::OutOfExtent, "entity " + std::to_string(e.id) + " lies outside the scene extent");
    index_.emplace(e.id, e);
    insert_into(*root_, e.id, e.footprint);
}

void SceneGraph::insert_into(QuadTreeNode& n, EntityId id, const AABB& fp) {
    if (!n.bounds.touches(fp)) return;
    if (!n.is_leaf()) {
        for (auto& c : n.children) insert_into(*c, id, fp);
        return;
    }
    n.entities.push_back(id);
    if (n.entities.size() > cfg_.leaf_capacity && n.depth < cfg_.max_depth) split(n);
}

void SceneGraph::split(QuadTreeNode& n) {
    const AABB& b = n.bounds;
    const double mx = (b.min_x + b.max_x) * 0.5, my = (b.min_y + b.max_y) * 0.5;
    n.children[0] = make_node({b.min_x, b.min_y, mx, my}, n.depth + 1);
    n.children[1] = make_node({mx, b.min_y, b.max_x, my}, n.depth + 1);
    n.children[2] = make_node({b.min_x, my, mx, b.max_y}, n.depth + 1);
    n.children[3] = make_node({mx, my, b.max_x, b.max_y}, n.depth + 1);
    std::vector<EntityId> payload;
    payload.swap(n.entities);
    for (EntityId id : payload) {
        const AABB& fp = index_.at(id).footprint;
        for (auto& c : n.children) insert_into(*c, id, fp);
    }
}

void SceneGraph::remove(EntityId id) {
    auto it = index_.find(id);
    if (it == index_.end()) fail(err::NotFound, "no entity with id " + std::to_string(id));
    const AABB fp = it->second.footprint;
    std::vector<QuadTreeNode*> stack{root_.get()};
    while (!stack.empty()) {
        QuadTreeNode* n = stack.back();
        stack.pop_back();
        if (!n->bounds.touches(fp)) continue;
        if (n->is_leaf()) {
            std::erase(n->entities, id);
        } else {
            for (auto& c : n->children) stack.push_back(c.get());
        }
    }
    index_.erase(it);
}

template <class F>
void SceneGraph::visit(const QuadTreeNode& n, const AABB& r, F&& f) const {
    if (!n.bounds.touches(r)) return;
    if (n.is_leaf()) {
        for (EntityId id : n.entities) f(index_.at(id));
        return;
    }
    for (const auto& c : n.children) visit(*c, r, f);
}

std::optional<EntityId> SceneGraph::first_collision(const AABB& fp, const std::set<EntityId>& ignore) const {
    std::optional<EntityId> best;
    visit(*root_, fp, [&](const SceneEntity& e) {
        if (!e.blocking || ignore.count(e.id) || !e.footprint.overlaps(fp)) return;
        if (!best || e.id < *best) best = e.id;
    });
    return best;
}

bool SceneGraph::collides(const AABB& fp, const std::set<EntityId>& ignore) const {
    return first_collision(fp, ignore).has_value();
}

std::vector<EntityId> SceneGraph::query_region(const AABB& r) const {
    std::vector<EntityId> out;
    visit(*root_, r, [&](const SceneEntity& e) {
        if (e.footprint.touches(r)) out.push_back(e.id);
    });
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<EntityId> SceneGraph::query_point(Vec2 p) const { return query_region({p.x, p.y, p.x, p.y}); }

const SceneEntity& SceneGraph::nearest(Vec2 from, Category cat, const std::optional<std::string>& tag) const {
    // Best-first over leaves by box distance. An entity's centre lies inside its
    // footprint, so the leaf holding the centre is never farther than the entity.
    using Item = std::pair<double, const QuadTreeNode*>;
    auto cmp = [](const Item& a, const Item& b) { return a.first > b.first; };
    std::priority_queue<Item, std::vector<Item>, decltype(cmp)> open(cmp);
    open.push({root_->bounds.distance_to(from), root_.get()});
    const SceneEntity* best = nullptr;
    double best_d = 0;
    while (!open.empty()) {
        auto [d, n] = open.top();
        open.pop();
        if (best && d > best_d) break;
        if (!n->is_leaf()) {
            for (const auto& c : n->children) open.push({c->bounds.distance_to(from), c.get()});
            continue;
        }
        for (EntityId id : n->entities) {
            const SceneEntity& e = index_.at(id);
            if (e.category != cat || (tag && !e.has_tag(*tag))) continue;
            double de = dist(from, e.footprint.center());
            if (!best || de < best_d || (de == best_d && e.id < best->id)) {
                best = &e;
                best_d = de;
            }
        }
    }
    if (!best)
        fail(err::NotFound, std::string("no entity of category ") + to_string(cat) + (tag ? " tagged " + *tag : ""));
    return *best;
}

std::vector<AABB> SceneGraph::edit_candidates(const SceneEntity& anchor, const SceneEditCommand& cmd) const {
    // Compass directions clockwise from east (y points north).
    static constexpr int dirs[8][2] = {{1, 0}, {1, -1}, {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}, {0, 1}, {1, 1}};
    const Vec2 c = anchor.footprint.center();
    const double ahw = anchor.footprint.width() * 0.5, ahh = anchor.footprint.height() * 0.5;
    const double nhw = cmd.size_x * 0.5, nhh = cmd.size_y * 0.5;
    std::vector<AABB> out;
    for (int ring = 0; ring < 10; ++ring) {
        const double gap = cmd.offset_distance + ring;
        for (const auto& d : dirs) {
            Vec2 p{c.x + d[0] * (ahw + nhw + gap), c.y + d[1] * (ahh + nhh + gap)};
            out.push_back(AABB::centered(p, nhw, nhh));
        }
    }
    return out;
}

EntityId SceneGraph::edit(const SceneEditCommand& cmd) {
    if (cmd.op == SceneEditCommand::Op::remove) {
        remove(cmd.target);
        return cmd.target;
    }
    if (cmd.size_x <= 0 || cmd.size_y <= 0 || cmd.offset_distance < 0)
        fail(err::ConfigInvalid, "edit: size must be positive and offset non-negative");
    const SceneEntity& anchor = nearest(cmd.near.value_or(extent_.center()), cmd.anchor_category, cmd.anchor_tag);
    for (const AABB& fp : edit_candidates(anchor, cmd)) {
        if (!extent_.contains(fp) || collides(fp)) continue;
        SceneEntity e;
        e.id = next_id();
        e.category = cmd.category;
        e.footprint = fp;
        e.pose = Pose2D(fp.center().x, fp.center().y, 0);
        e.tags = cmd.tags;
        e.blocking = cmd.blocking;
        insert(e);
        return e.id;
    }
    fail(err::NoFreeSpace, "no collision-free placement next to entity " + std::to_string(anchor.id));
}

json aabb_to_json(const AABB& b) { return json::array({b.min_x, b.min_y, b.max_x, b.max_y}); }

AABB aabb_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) fail(err::ConfigInvalid, "AABB must be [min_x,min_y,max_x,max_y]");
    AABB b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
    if (!b.valid()) fail(err::ConfigInvalid, "AABB min exceeds max");
    return b;
}

json entity_to_json(const SceneEntity& e) {
    json j;
    j["id"] = e.id;
    j["category"] = to_string(e.category);
    j["pose"] = {{"x", e.pose.x}, {"y", e.pose.y}, {"yaw", e.pose.yaw}};
    j["footprint"] = aabb_to_json(e.footprint);
    j["tags"] = json::array();
    for (const auto& t : e.tags) j["tags"].push_back(t);
    j["blocking"] = e.blocking;
    return j;
}

SceneEntity entity_from_json(const json& j) {
    SceneEntity e;
    e.id = j.at("id").get<EntityId>();
    e.category = category_from_string(j.at("category").get<std::string>());
    const auto& p = j.at("pose");
    e.pose = Pose2D(p.at("x").get<double>(), p.at("y").get<double>(), p.at("yaw").get<double>());
    e.footprint = aabb_from_json(j.at("footprint"));
    for (const auto& t : j.at("tags")) e.tags.insert(t.get<std::string>());
    e.blocking = j.at("blocking").get<bool>();
    return e;
}

json SceneGraph::to_json() const {
    json j;
    j["extent"] = aabb_to_json(extent_);
    j["entities"] = json::array();
    for (const auto& [id, e] : index_) j["entities"].push_back(entity_to_json(e));
    return j;
}

SceneGraph SceneGraph::from_json(const json& j, QuadTreeConfig cfg) {
    try {
        SceneGraph g(aabb_from_json(j.at("extent")), cfg);
        for (const auto& ej : j.at("entities")) g.insert(entity_from_json(ej));
        return g;
    } catch (const json::exception& ex) {
        fail(err::ConfigInvalid, std::string("scene json: ") + ex.what());
    }
}

}  // namespace simworld
