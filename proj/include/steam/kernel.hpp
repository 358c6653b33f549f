// Domain types shared by every module, plus the team-state write rules.
#pragma once

#include <algorithm>
#include <cctype>
#include <tuple>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "steam/monitor.hpp"

namespace steam {

struct AuthorizationViolation : std::logic_error {
    using std::logic_error::logic_error;
};
struct MutualBeliefViolation : std::logic_error {
    using std::logic_error::logic_error;
};

// ---------------------------------------------------------------- facts

struct Fact {
    std::string predicate;
    std::vector<std::string> args;
    std::string source = "percept";

    Fact() = default;
    Fact(std::string p, std::vector<std::string> a, std::string src = "percept")
        : predicate(std::move(p)), args(std::move(a)), source(std::move(src)) {
        if (predicate.empty()) throw ConfigError("fact with empty predicate");
    }

    // Identity ignores the source.
    bool operator<(const Fact& o) const {
        return std::tie(predicate, args) < std::tie(o.predicate, o.args);
    }
    bool operator==(const Fact& o) const { return predicate == o.predicate && args == o.args; }

    std::string str() const {
        std::string s = predicate;
        for (const auto& a : args) s += " " + a;
        return s;
    }
};

inline std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

inline Fact parse_fact(const std::string& text, std::string source = "percept") {
    auto w = split_ws(text);
    if (w.empty()) throw ConfigError("empty fact");
    return Fact(w[0], std::vector<std::string>(w.begin() + 1, w.end()), std::move(source));
}

// Ground pattern with "*" wildcards; arity must match.
struct Pattern {
    std::string predicate;
    std::vector<std::string> args;

    bool matches(const Fact& f) const {
        if (predicate != "*" && predicate != f.predicate) return false;
        if (args.size() != f.args.size()) return false;
        for (std::size_t i = 0; i < args.size(); ++i)
            if (args[i] != "*" && args[i] != f.args[i]) return false;
        return true;
    }
    std::string str() const {
        std::string s = predicate;
        for (const auto& a : args) s += " " + a;
        return s;
    }
};

inline Pattern parse_pattern(const std::string& text) {
    auto w = split_ws(text);
    if (w.empty()) throw ConfigError("empty pattern");
    return Pattern{w[0], std::vector<std::string>(w.begin() + 1, w.end())};
}

// ---------------------------------------------------------------- qualitative values

enum class Qual { Zero = 0, Low = 1, Medium = 2, High = 3 };

inline int idx(Qual q) { return static_cast<int>(q); }
inline Qual qual_from_index(int i) { return static_cast<Qual>(std::clamp(i, 0, 3)); }

inline const char* to_string(Qual q) {
    switch (q) {
    case Qual::Zero: return "zero";
    case Qual::Low: return "low";
    case Qual::Medium: return "medium";
    case Qual::High: return "high";
    }
    return "?";
}

inline Qual parse_qual(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "zero") return Qual::Zero;
    if (s == "low") return Qual::Low;
    if (s == "medium" || s == "med") return Qual::Medium;
    if (s == "high") return Qual::High;
    throw ConfigError("bad qualitative value '" + s + "'");
}

struct CostModel {
    Qual Cc = Qual::Low;
    Qual Cmt = Qual::Low;
    Qual Cme = Qual::Low;
    Qual Cn = Qual::Low;
    Qual Ceps = Qual::Low;
    Qual B = Qual::High;
};

// ---------------------------------------------------------------- templates

enum class Termination { Achieved, Unachievable, Irrelevant, Threat, NoMatch };

inline const char* to_string(Termination t) {
    switch (t) {
    case Termination::Achieved: return "achieved";
    case Termination::Unachievable: return "unachievable";
    case Termination::Irrelevant: return "irrelevant";
    case Termination::Threat: return "threat";
    case Termination::NoMatch: return "no-match";
    }
    return "?";
}

struct TermCondition {
    std::string id;
    Termination category = Termination::Achieved;
    Pattern pattern;
    std::string cost_class;
};

struct ExecSpec {
    enum class Kind { Self, Team, Parent, Role };
    Kind kind = Kind::Self;
    std::string name;  // team id or role name
};

struct Effect {
    int after = 1;
    bool origin_leader = true;   // produced by the executing team's leader only
    Fact fact;
    bool location_visible = true;
    std::string move_to;         // location reached on completion, empty = stay
};

struct OperatorTemplate {
    std::string id;
    int priority = 0;
    std::vector<std::vector<Pattern>> preconditions;  // conjunction of disjunctions
    ExecSpec exec;
    std::vector<TermCondition> conditions;
    std::vector<std::string> children;
    std::vector<std::pair<std::string, std::string>> roles;
    std::optional<RoleConstraint> constraint;
    std::map<std::string, std::vector<std::string>> info_dependency;
    std::string leader_role;
    std::string group;
    std::string establish_class;
    std::optional<Effect> effect;

    bool is_leaf() const { return children.empty(); }
    bool has_termination() const {
        return std::any_of(conditions.begin(), conditions.end(),
                           [](const TermCondition& c) { return c.category != Termination::Threat; });
    }
};

using TemplatePtr = std::shared_ptr<const OperatorTemplate>;

// ---------------------------------------------------------------- intentions

enum class Status { Establishing, Active, Achieved, Unachievable, Irrelevant };

inline const char* to_string(Status s) {
    switch (s) {
    case Status::Establishing: return "establishing";
    case Status::Active: return "active";
    case Status::Achieved: return "achieved";
    case Status::Unachievable: return "unachievable";
    case Status::Irrelevant: return "irrelevant";
    }
    return "?";
}
inline bool terminal(Status s) { return s != Status::Establishing && s != Status::Active; }

enum class OpKind { Normal, Repair, CompleteFailure };

struct IntentionInstance {
    int id = 0;
    TemplatePtr tpl;
    std::string executor;   // agent id or team id
    bool team_op = false;
    Status status = Status::Active;
    int parent = -1;
    int child = -1;
    std::string cause;      // "" | "domain <what>" | "constraint <class>"
    OpKind kind = OpKind::Normal;

    // runtime bookkeeping
    std::vector<std::pair<std::string, std::string>> roles;
    std::string leader;
    bool via_protocol = false;
    bool chose_at_random = false;
    bool action_started = false;
    bool effect_done = false;
    int active_ticks = 0;
    int request_tick = -1;
    int rebroadcasts = 0;
    int confirm_tick = -1;
    int confirm_retries = 0;
    bool confirmed = false;
    std::set<std::string> confirms;
    std::set<std::string> closed_children;  // child templates achieved under this instance
    std::set<std::string> blocked_children; // unachievable children awaiting repair
    std::string last_child_executor;        // executing agent of the preceding child
    std::string last_child_tpl;
    int waiting_since = -1;                  // member side: establishing without a request
    int nudges = 0;
    bool got_request = false;
    int last_confirm_reply = -1;
    std::string failed_template;            // Repair / CompleteFailure target
    FailureClass failure;
    bool substitution_sent = false;

    bool active() const { return status == Status::Active; }
};

// ---------------------------------------------------------------- state

struct TeamState {
    std::string id;
    std::vector<std::string> members;   // direct and nested, in member-index order
    std::vector<std::string> subteams;
    std::vector<std::string> channels;
    std::string leader;
    std::set<Fact> beliefs;
    std::map<Fact, int> scope;  // fact -> owning instance (cleared when it ends)

    bool has(const Fact& f) const { return beliefs.count(f) > 0; }
};

enum class Policy { Cautious, Balanced, Reckless };

inline const char* to_string(Policy p) {
    switch (p) {
    case Policy::Cautious: return "cautious";
    case Policy::Balanced: return "balanced";
    case Policy::Reckless: return "reckless";
    }
    return "?";
}
inline Policy parse_policy(const std::string& s) {
    if (s == "cautious") return Policy::Cautious;
    if (s == "balanced") return Policy::Balanced;
    if (s == "reckless") return Policy::Reckless;
    throw ConfigError("unknown policy '" + s + "'");
}

// How a private belief reached the agent; drives tau estimation.
enum class Provenance { Location, Own, PrivateChannel, SharedChannel, Message };

struct AgentState {
    std::string id;
    int index = 0;
    std::set<Fact> private_beliefs;
    std::map<Fact, Provenance> provenance;
    std::map<std::string, TeamState> team_states;
    std::map<int, IntentionInstance> intentions;
    int root = -1;
    std::set<std::string> capabilities;
    Policy policy = Policy::Balanced;

    bool alive = true;
    bool finished = false;
    std::string outcome;           // "", "success", "complete-failure"
    std::set<std::string> known_failed;
    std::map<std::string, std::map<std::string, std::string>> role_overrides;  // template -> role -> entity
    std::map<std::string, std::string> finished_ops;  // "template@team" seen terminated
    std::map<std::string, Fact> finish_facts;         // team-state fact that ended it
    std::map<std::string, int> no_confirm_retries;    // "template@team" -> repairs spent re-asking
    int next_instance = 1;
    int seq = 0;
    std::mt19937_64 rng{0};

    IntentionInstance* find(int id) {
        auto it = intentions.find(id);
        return it == intentions.end() ? nullptr : &it->second;
    }
    const IntentionInstance* find(int id) const {
        auto it = intentions.find(id);
        return it == intentions.end() ? nullptr : &it->second;
    }

    // Root-to-leaf chain of live (non-terminal) intentions.
    std::vector<int> chain() const {
        std::vector<int> out;
        int cur = root;
        while (cur >= 0) {
            const auto* in = find(cur);
            if (!in || terminal(in->status)) break;
            out.push_back(cur);
            cur = in->child;
        }
        return out;
    }
};

// ---------------------------------------------------------------- organisation

struct TeamInfo {
    std::string id;
    std::string parent;
    std::string leader;
    std::vector<std::string> members;  // flattened
    std::vector<std::string> subteams;
    std::vector<std::string> channels;
    int level = 1;
};

struct Org {
    std::vector<std::string> agents;  // member-index order
    std::map<std::string, TeamInfo> teams;
    std::map<std::string, TemplatePtr> templates;
    std::map<std::string, std::set<std::string>> capabilities;  // agent or team -> roles

    bool is_team(const std::string& id) const { return teams.count(id) > 0; }
    bool is_agent(const std::string& id) const {
        return std::find(agents.begin(), agents.end(), id) != agents.end();
    }
    int agent_index(const std::string& id) const {
        auto it = std::find(agents.begin(), agents.end(), id);
        return it == agents.end() ? -1 : static_cast<int>(it - agents.begin());
    }
    bool contains(const std::string& entity, const std::string& agent) const {
        if (entity == agent) return true;
        auto it = teams.find(entity);
        if (it == teams.end()) return false;
        const auto& m = it->second.members;
        return std::find(m.begin(), m.end(), agent) != m.end();
    }
    std::map<std::string, std::vector<std::string>> membership() const {
        std::map<std::string, std::vector<std::string>> m;
        for (const auto& [id, t] : teams) m[id] = t.members;
        return m;
    }
    const TemplatePtr& tpl(const std::string& id) const {
        auto it = templates.find(id);
        if (it == templates.end()) throw ConfigError("unknown template '" + id + "'");
        return it->second;
    }
};

// ---------------------------------------------------------------- operations

inline std::string resolve_executor(const OperatorTemplate& t, const IntentionInstance* parent,
                                    const AgentState& agent) {
    switch (t.exec.kind) {
    case ExecSpec::Kind::Self: return agent.id;
    case ExecSpec::Kind::Team: return t.exec.name;
    case ExecSpec::Kind::Parent:
        if (!parent || !parent->team_op)
            throw ConfigError("template '" + t.id + "' executes as parent team but parent is not a team operator");
        return parent->executor;
    case ExecSpec::Kind::Role: {
        if (!parent) throw ConfigError("template '" + t.id + "' binds role without a parent");
        for (const auto& [r, e] : parent->roles)
            if (r == t.exec.name) return e;
        throw ConfigError("template '" + t.id + "' names role '" + t.exec.name + "' missing from parent");
    }
    }
    return agent.id;
}

inline bool preconditions_hold(const OperatorTemplate& t, const std::set<Fact>& beliefs) {
    for (const auto& alternatives : t.preconditions) {
        bool any = false;
        for (const auto& p : alternatives)
            for (const auto& f : beliefs)
                if (p.matches(f)) { any = true; break; }
        if (!any) return false;
    }
    return true;
}

// Every belief visible to the agent: private plus all team-state copies.
inline std::set<Fact> visible_beliefs(const AgentState& a) {
    std::set<Fact> all = a.private_beliefs;
    for (const auto& [id, ts] : a.team_states) all.insert(ts.beliefs.begin(), ts.beliefs.end());
    return all;
}

inline IntentionInstance instantiate_operator(const TemplatePtr& t, const IntentionInstance* parent,
                                              AgentState& agent, const Org& org) {
    if (!preconditions_hold(*t, visible_beliefs(agent)))
        throw ConfigError("preconditions of '" + t->id + "' do not hold for " + agent.id);
    IntentionInstance in;
    in.id = agent.next_instance++;
    in.tpl = t;
    in.executor = resolve_executor(*t, parent, agent);
    in.parent = parent ? parent->id : -1;
    if (org.is_team(in.executor)) {
        in.team_op = true;
        in.status = Status::Establishing;
        in.leader = org.teams.at(in.executor).leader;
        if (!t->leader_role.empty())
            for (const auto& [r, e] : t->roles)
                if (r == t->leader_role && org.is_agent(e)) in.leader = e;
    } else if (in.executor == agent.id) {
        in.status = Status::Active;
        in.leader = agent.id;
    } else if (org.is_agent(in.executor)) {
        throw ConfigError("template '" + t->id + "' is bound to another agent (" + in.executor + ")");
    } else {
        throw ConfigError("template '" + t->id + "' names unknown executing agent '" + in.executor + "'");
    }
    in.roles = t->roles;
    auto ov = agent.role_overrides.find(t->id);
    if (ov != agent.role_overrides.end())
        for (auto& [r, e] : in.roles) {
            auto it = ov->second.find(r);
            if (it != ov->second.end()) e = it->second;
        }
    return in;
}

inline void apply_team_state_update(AgentState& agent, const std::string& team, const Fact& f,
                                    const IntentionInstance& source) {
    if (!source.team_op)
        throw AuthorizationViolation("individual operator '" + source.tpl->id + "' tried to write team state " + team);
    if (source.executor != team)
        throw AuthorizationViolation("operator [" + source.tpl->id + "]_" + source.executor +
                                     " tried to write team state " + team);
    auto it = agent.team_states.find(team);
    if (it == agent.team_states.end())
        throw AuthorizationViolation(agent.id + " holds no team state for " + team);
    it->second.beliefs.insert(f);
    it->second.scope[f] = source.parent;
}

struct TerminationMatch {
    Termination category = Termination::NoMatch;
    const TermCondition* condition = nullptr;
};

inline TerminationMatch match_termination_detail(const Fact& f, const OperatorTemplate& t) {
    static constexpr Termination order[] = {Termination::Achieved, Termination::Unachievable,
                                            Termination::Irrelevant, Termination::Threat};
    for (auto cat : order)
        for (const auto& c : t.conditions)
            if (c.category == cat && c.pattern.matches(f)) return {cat, &c};
    return {};
}

inline Termination match_termination(const Fact& f, const IntentionInstance& in) {
    return match_termination_detail(f, *in.tpl).category;
}

}  // namespace steam
