// Role-monitoring constraints: evaluation, failure classification and
// substitution candidate selection.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace steam {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RoleConstraint {
    enum class Kind { Role, And, Or, Dep };
    Kind kind = Kind::Role;
    std::string role;                  // Role leaf
    std::string dependent, provider;   // Dep
    std::vector<RoleConstraint> kids;  // And / Or

    static RoleConstraint leaf(std::string r) {
        RoleConstraint c;
        c.role = std::move(r);
        return c;
    }
    static RoleConstraint all(std::vector<RoleConstraint> k) {
        RoleConstraint c;
        c.kind = Kind::And;
        c.kids = std::move(k);
        return c;
    }
    static RoleConstraint any(std::vector<RoleConstraint> k) {
        RoleConstraint c;
        c.kind = Kind::Or;
        c.kids = std::move(k);
        return c;
    }
    static RoleConstraint dep(std::string a, std::string b) {
        RoleConstraint c;
        c.kind = Kind::Dep;
        c.dependent = std::move(a);
        c.provider = std::move(b);
        return c;
    }

    // Leaf role names in order of first appearance.
    std::vector<std::string> roles() const {
        std::vector<std::string> out;
        collect(out);
        return out;
    }

    std::string str() const {
        switch (kind) {
        case Kind::Role: return role;
        case Kind::Dep: return "DEP(" + dependent + "," + provider + ")";
        default: {
            std::string s = kind == Kind::And ? "AND(" : "OR(";
            for (std::size_t i = 0; i < kids.size(); ++i) {
                if (i) s += ",";
                s += kids[i].str();
            }
            return s + ")";
        }
        }
    }

private:
    void collect(std::vector<std::string>& out) const {
        auto add = [&](const std::string& r) {
            if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
        };
        switch (kind) {
        case Kind::Role: add(role); break;
        case Kind::Dep: add(dependent); add(provider); break;
        default:
            for (const auto& k : kids) k.collect(out);
        }
    }
};

enum class RoleState { Performing, Failed, Unassigned };
using RoleStatus = std::map<std::string, RoleState>;

struct FailureClass {
    enum class Kind { None, CriticalRole, RoleDependency, AllRoles };
    Kind kind = Kind::None;
    std::string role;                 // CriticalRole
    std::string dependent, provider;  // RoleDependency

    std::string str() const {
        switch (kind) {
        case Kind::CriticalRole: return "critical-role-failure " + role;
        case Kind::RoleDependency: return "role-dependency-failure " + dependent + " " + provider;
        case Kind::AllRoles: return "all-roles-failure";
        default: return "none";
        }
    }
    bool operator==(const FailureClass&) const = default;
};

struct ConstraintVerdict {
    bool satisfied = true;
    FailureClass cls;
};

namespace detail {

inline bool performing(const RoleStatus& s, const std::string& r) {
    auto it = s.find(r);
    if (it == s.end()) throw ConfigError("role status missing leaf '" + r + "'");
    return it->second == RoleState::Performing;
}

// deps_hold: treat every DEP node as true (used to isolate dependency-only failures).
inline bool truth(const RoleConstraint& c, const RoleStatus& s, bool deps_hold = false) {
    using K = RoleConstraint::Kind;
    switch (c.kind) {
    case K::Role: return performing(s, c.role);
    case K::Dep: {
        bool a = performing(s, c.dependent);
        bool b = performing(s, c.provider);
        return deps_hold || !a || b;
    }
    case K::And:
        for (const auto& k : c.kids)
            if (!truth(k, s, deps_hold)) return false;
        return true;
    case K::Or:
        for (const auto& k : c.kids)
            if (truth(k, s, deps_hold)) return true;
        return false;
    }
    return false;
}

inline void violated_deps(const RoleConstraint& c, const RoleStatus& s,
                          std::vector<const RoleConstraint*>& out) {
    if (c.kind == RoleConstraint::Kind::Dep) {
        if (performing(s, c.dependent) && !performing(s, c.provider)) out.push_back(&c);
        return;
    }
    for (const auto& k : c.kids) violated_deps(k, s, out);
}

}  // namespace detail

inline ConstraintVerdict evaluate_constraint(const RoleConstraint& c, const RoleStatus& s) {
    ConstraintVerdict v;
    const auto leaves = c.roles();
    for (const auto& r : leaves) detail::performing(s, r);  // validates coverage
    if (detail::truth(c, s)) return v;
    v.satisfied = false;

    std::vector<std::string> failed;
    for (const auto& r : leaves)
        if (!detail::performing(s, r)) failed.push_back(r);

    if (failed.size() == leaves.size()) {
        v.cls.kind = FailureClass::Kind::AllRoles;
        return v;
    }

    auto flip_fixes = [&](const std::string& r) {
        RoleStatus t = s;
        t[r] = RoleState::Performing;
        return detail::truth(c, t);
    };

    if (detail::truth(c, s, true)) {
        std::vector<const RoleConstraint*> bad;
        detail::violated_deps(c, s, bad);
        if (bad.size() == 1) {
            v.cls.kind = FailureClass::Kind::RoleDependency;
            v.cls.dependent = bad[0]->dependent;
            v.cls.provider = bad[0]->provider;
            return v;
        }
    }
    for (const auto& r : failed) {
        if (flip_fixes(r)) {
            v.cls.kind = FailureClass::Kind::CriticalRole;
            v.cls.role = r;
            return v;
        }
    }
    // Several roles failed together and no single one explains it.
    v.cls.kind = FailureClass::Kind::CriticalRole;
    v.cls.role = failed.front();
    return v;
}

// A role is critical when its loss alone would break an otherwise satisfied constraint.
inline bool role_is_critical(const RoleConstraint& c, const RoleStatus& s, const std::string& r) {
    if (!detail::truth(c, s)) return false;
    RoleStatus t = s;
    t[r] = RoleState::Failed;
    return !detail::truth(c, t);
}

inline constexpr const char* kUnassigned = "UNASSIGNED";

// bindings: role -> entity (agent id, team id, or UNASSIGNED)
// members: team id -> agent ids (flattened, including subteam members)
// failed: agents known to be unable to perform (crashed, declared inability)
inline RoleStatus infer_role_status(const std::vector<std::pair<std::string, std::string>>& bindings,
                                    const std::set<std::string>& failed,
                                    const std::map<std::string, std::vector<std::string>>& members) {
    RoleStatus s;
    for (const auto& [role, entity] : bindings) {
        if (entity == kUnassigned) {
            s[role] = RoleState::Unassigned;
            continue;
        }
        if (failed.count(entity)) {
            s[role] = RoleState::Failed;
            continue;
        }
        auto it = members.find(entity);
        if (it == members.end()) {
            s[role] = RoleState::Performing;
            continue;
        }
        bool all_failed = !it->second.empty();
        for (const auto& m : it->second)
            if (!failed.count(m)) all_failed = false;
        s[role] = all_failed ? RoleState::Failed : RoleState::Performing;
    }
    return s;
}

struct RepairCandidate {
    std::string id;                 // agent or subteam
    std::set<std::string> capabilities;
    bool critical_commitment = false;
};

struct RepairOutcome {
    bool found = false;
    std::string entity;
};

// Candidates must be supplied in member-index order.
inline RepairOutcome repair_critical_role(const std::string& role,
                                          const std::vector<RepairCandidate>& candidates,
                                          const std::set<std::string>& causes) {
    for (const auto& c : candidates) {
        if (causes.count(c.id)) continue;
        if (!c.capabilities.count(role)) continue;
        if (c.critical_commitment) continue;
        return {true, c.id};
    }
    return {};
}

inline RepairOutcome repair_dependency(const std::string& provider_role, const std::string& failed_provider,
                                       const std::vector<RepairCandidate>& candidates) {
    for (const auto& c : candidates) {
        if (c.id == failed_provider) continue;
        if (!c.capabilities.count(provider_role)) continue;
        return {true, c.id};
    }
    return {};
}

}  // namespace steam
