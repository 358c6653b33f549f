// Independent reference models shared by the unit tests and the acceptance run.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "steam/comm.hpp"
#include "steam/monitor.hpp"

namespace steam::oracle {

// Numeric stand-ins for the qualitative levels.
inline double prob(Qual q) {
    static const double p[] = {0.0, 0.1, 0.5, 0.9};
    return p[idx(q)];
}
inline double cost(Qual q) {
    static const double c[] = {0.0, 1.0, 5.0, 25.0};
    return c[idx(q)];
}

inline bool numeric_send(Qual p, Qual c, Qual cc) { return prob(p) * cost(c) > cost(cc); }

inline ExtendedDecision numeric_extended(Qual delta, Qual tau, Qual cmt, Qual cc, Qual cn) {
    double d = delta == Qual::High ? 1.0 : prob(delta);
    double lhs = d * prob(tau) * cost(cmt);
    double rhs = cost(cc) + (1.0 - d) * cost(cn);
    if (lhs > rhs) return ExtendedDecision::SendTerminate;
    if (prob(tau) * cost(cmt) > cost(cc)) return ExtendedDecision::SendThreat;
    return ExtendedDecision::Silent;
}

using K = RoleConstraint::Kind;
using Truth = std::function<bool(const std::map<std::string, bool>&)>;

// A tree plus an independently built predicate for it.
struct Built {
    RoleConstraint c;
    Truth f;
};

inline std::string leaf_name(int i) { return "r" + std::to_string(i); }

// Every tree over exactly n leaf slots, leaves named from `first` upward.
// AND/OR take 2 or 3 children; DEP takes two distinct leaves.
inline std::vector<Built> gen(int n, int first) {
    std::vector<Built> out;
    if (n == 1) {
        std::string r = leaf_name(first);
        out.push_back({RoleConstraint::leaf(r), [r](const auto& m) { return m.at(r); }});
        return out;
    }
    if (n == 2) {
        std::string a = leaf_name(first), b = leaf_name(first + 1);
        out.push_back({RoleConstraint::dep(a, b), [a, b](const auto& m) { return !m.at(a) || m.at(b); }});
    }
    auto combine = [&](const std::vector<std::vector<Built>>& parts) {
        std::vector<std::size_t> pos(parts.size(), 0);
        while (true) {
            std::vector<RoleConstraint> kids;
            std::vector<Truth> fs;
            for (std::size_t i = 0; i < parts.size(); ++i) {
                kids.push_back(parts[i][pos[i]].c);
                fs.push_back(parts[i][pos[i]].f);
            }
            out.push_back({RoleConstraint::all(kids), [fs](const auto& m) {
                               for (const auto& f : fs)
                                   if (!f(m)) return false;
                               return true;
                           }});
            out.push_back({RoleConstraint::any(kids), [fs](const auto& m) {
                               for (const auto& f : fs)
                                   if (f(m)) return true;
                               return false;
                           }});
            std::size_t i = 0;
            while (i < pos.size() && ++pos[i] == parts[i].size()) pos[i++] = 0;
            if (i == pos.size()) break;
        }
    };
    for (int k = 1; k < n; ++k) combine({gen(k, first), gen(n - k, first + k)});
    for (int a = 1; a < n; ++a)
        for (int b = 1; a + b < n; ++b) combine({gen(a, first), gen(b, first + a), gen(n - a - b, first + a + b)});
    return out;
}

inline bool perf(RoleState s) { return s == RoleState::Performing; }

// Walks the tree collecting DEP nodes whose dependent performs without its provider.
inline void broken_deps(const RoleConstraint& c, const RoleStatus& s, std::vector<std::pair<std::string, std::string>>& out) {
    if (c.kind == K::Dep) {
        if (perf(s.at(c.dependent)) && !perf(s.at(c.provider))) out.push_back({c.dependent, c.provider});
        return;
    }
    for (const auto& k : c.kids) broken_deps(k, s, out);
}

// Same tree with every DEP forced true.
inline bool holds_without_deps(const RoleConstraint& c, const RoleStatus& s) {
    switch (c.kind) {
    case K::Role: return perf(s.at(c.role));
    case K::Dep: return true;
    case K::And:
        return std::all_of(c.kids.begin(), c.kids.end(), [&](const auto& k) { return holds_without_deps(k, s); });
    case K::Or:
        return std::any_of(c.kids.begin(), c.kids.end(), [&](const auto& k) { return holds_without_deps(k, s); });
    }
    return false;
}

inline FailureClass expected_class(const Built& b, const std::vector<std::string>& leaves, const RoleStatus& s) {
    std::map<std::string, bool> m;
    for (const auto& r : leaves) m[r] = perf(s.at(r));
    FailureClass fc;
    if (b.f(m)) return fc;
    std::vector<std::string> failed;
    for (const auto& r : leaves)
        if (!m[r]) failed.push_back(r);
    if (failed.size() == leaves.size()) {
        fc.kind = FailureClass::Kind::AllRoles;
        return fc;
    }
    std::vector<std::pair<std::string, std::string>> deps;
    broken_deps(b.c, s, deps);
    if (deps.size() == 1 && holds_without_deps(b.c, s)) {
        fc.kind = FailureClass::Kind::RoleDependency;
        fc.dependent = deps[0].first;
        fc.provider = deps[0].second;
        return fc;
    }
    fc.kind = FailureClass::Kind::CriticalRole;
    fc.role = failed.front();
    for (const auto& r : failed) {
        auto t = m;
        t[r] = true;
        if (b.f(t)) {
            fc.role = r;
            break;
        }
    }
    return fc;
}

}  // namespace steam::oracle
