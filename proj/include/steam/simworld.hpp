// Deterministic tick-based world: scenario loading, message bus with
// channel models, observation model, scripted events and tracing.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "steam/comm.hpp"
#include "steam/engine.hpp"
#include "steam/kernel.hpp"

namespace steam {

struct LoadError : ConfigError {
    using ConfigError::ConfigError;
};

struct ChannelModel {
    std::string id;
    double loss = 0.0;
    int delay = 1;
    bool shared = true;
    std::string team;                   // Shared audience
    std::vector<std::string> private_;  // Private audience
    std::optional<Qual> tau;
};

struct ScriptedEvent {
    std::string kind;  // crash enemy-sighting order-arrival unassign-role
    int tick = -1;
    std::string arrive_agent, arrive_loc;
    int arrive_delay = 0;
    std::string target;
    std::string channel;
    std::string at;  // explicit location
    std::string tpl, role;
    std::optional<Fact> fact;
};

struct ConditionSpec {
    int id = 1;
    int base = 0;
    std::vector<std::string> flags;
    std::vector<std::string> share;
    std::vector<std::tuple<std::string, std::string, Qual>> costs;
};

struct AgentSpec {
    std::string id;
    std::set<std::string> caps;
    std::string at = "base";
};

struct TeamSpec {
    std::string id, leader, parent;
    std::vector<std::string> members;
    std::set<std::string> caps;
};

struct ScenarioConfig {
    std::string name;
    unsigned long long seed = 1;
    int deadlock = 50;
    int timeout = 3;
    int max_rebroadcast = 5;
    int max_ticks = 3000;
    int size_min = 1, size_max = 0;
    std::string fallback;
    std::set<std::string> failure_predicates = {"crashed", "destroyed", "inability"};
    std::vector<AgentSpec> agents;
    std::vector<TeamSpec> teams;
    std::vector<ChannelModel> channels;
    std::map<std::string, CostModel> costs;
    WorldView objects;
    std::vector<std::string> roots;
    std::vector<std::pair<std::string, std::vector<std::string>>> phases;
    std::vector<ScriptedEvent> events;
    std::map<int, ConditionSpec> conditions;
    // raw template lines, expanded once the team size is known
    std::vector<std::pair<std::string, std::vector<std::pair<int, std::string>>>> template_src;
};

namespace sim_detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline int to_int(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (...) {
        throw LoadError(where + ": expected integer, got '" + s + "'");
    }
}

inline double to_double(const std::string& s, const std::string& where) {
    try {
        return std::stod(s);
    } catch (...) {
        throw LoadError(where + ": expected number, got '" + s + "'");
    }
}

inline std::set<std::string> csv_set(const std::string& s) {
    std::set<std::string> out;
    std::stringstream in(s);
    std::string w;
    while (std::getline(in, w, ','))
        if (!w.empty()) out.insert(w);
    return out;
}

}  // namespace sim_detail

inline ScenarioConfig parse_scenario(const std::string& text) {
    using namespace sim_detail;
    ScenarioConfig sc;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    std::string open_template;
    std::vector<std::pair<int, std::string>> body;
    while (std::getline(in, raw)) {
        ++lineno;
        auto hash = raw.find('#');
        std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        auto w = split_ws(line);
        const std::string where = "line " + std::to_string(lineno);
        if (!open_template.empty()) {
            if (w[0] == "end") {
                sc.template_src.push_back({open_template, body});
                open_template.clear();
                body.clear();
            } else {
                body.push_back({lineno, line});
            }
            continue;
        }
        const std::string& k = w[0];
        auto need = [&](std::size_t n) {
            if (w.size() < n) throw LoadError(where + ": '" + k + "' needs more fields");
        };
        if (k == "scenario") {
            need(2);
            sc.name = w[1];
        } else if (k == "seed") {
            need(2);
            sc.seed = static_cast<unsigned long long>(to_int(w[1], where));
        } else if (k == "deadlock") {
            need(2);
            sc.deadlock = to_int(w[1], where);
        } else if (k == "timeout") {
            need(2);
            sc.timeout = to_int(w[1], where);
        } else if (k == "max-rebroadcast") {
            need(2);
            sc.max_rebroadcast = to_int(w[1], where);
        } else if (k == "max-ticks") {
            need(2);
            sc.max_ticks = to_int(w[1], where);
        } else if (k == "sizes") {
            need(3);
            sc.size_min = to_int(w[1], where);
            sc.size_max = to_int(w[2], where);
        } else if (k == "fallback") {
            need(2);
            sc.fallback = w[1];
        } else if (k == "failure-predicates") {
            sc.failure_predicates = std::set<std::string>(w.begin() + 1, w.end());
        } else if (k == "agent") {
            need(2);
            AgentSpec a;
            a.id = w[1];
            for (std::size_t i = 2; i + 1 < w.size(); i += 2) {
                if (w[i] == "caps") a.caps = csv_set(w[i + 1]);
                else if (w[i] == "at") a.at = w[i + 1];
                else throw LoadError(where + ": unknown agent field '" + w[i] + "'");
            }
            sc.agents.push_back(a);
        } else if (k == "team") {
            need(2);
            TeamSpec t;
            t.id = w[1];
            std::size_t i = 2;
            while (i < w.size()) {
                if (w[i] == "leader" && i + 1 < w.size()) {
                    t.leader = w[i + 1];
                    i += 2;
                } else if (w[i] == "parent" && i + 1 < w.size()) {
                    t.parent = w[i + 1];
                    i += 2;
                } else if (w[i] == "caps" && i + 1 < w.size()) {
                    t.caps = csv_set(w[i + 1]);
                    i += 2;
                } else if (w[i] == "members") {
                    ++i;
                    while (i < w.size() && w[i] != "leader" && w[i] != "parent" && w[i] != "caps")
                        t.members.push_back(w[i++]);
                } else {
                    throw LoadError(where + ": unknown team field '" + w[i] + "'");
                }
            }
            sc.teams.push_back(t);
        } else if (k == "channel") {
            need(4);
            ChannelModel ch;
            ch.id = w[1];
            std::size_t i = 3;
            if (w[2] == "shared") {
                ch.shared = true;
                ch.team = w[3];
                i = 4;
            } else if (w[2] == "private") {
                ch.shared = false;
                while (i < w.size() && w[i] != "delay" && w[i] != "loss" && w[i] != "tau") ch.private_.push_back(w[i++]);
            } else {
                throw LoadError(where + ": channel audience must be shared or private");
            }
            for (; i + 1 < w.size(); i += 2) {
                if (w[i] == "delay") ch.delay = to_int(w[i + 1], where);
                else if (w[i] == "loss") ch.loss = to_double(w[i + 1], where);
                else if (w[i] == "tau") ch.tau = parse_qual(w[i + 1]);
                else throw LoadError(where + ": unknown channel field '" + w[i] + "'");
            }
            if (ch.loss < 0 || ch.loss > 1) throw LoadError(where + ": loss outside [0,1]");
            if (ch.delay < 0) throw LoadError(where + ": negative delay");
            sc.channels.push_back(ch);
        } else if (k == "cost") {
            need(2);
            CostModel cm;
            std::set<std::string> seen;
            for (std::size_t i = 2; i + 1 < w.size(); i += 2) {
                Qual q = parse_qual(w[i + 1]);
                seen.insert(w[i]);
                if (w[i] == "Cc") cm.Cc = q;
                else if (w[i] == "Cmt") cm.Cmt = q;
                else if (w[i] == "Cme") cm.Cme = q;
                else if (w[i] == "Cn") cm.Cn = q;
                else if (w[i] == "Ceps") cm.Ceps = q;
                else if (w[i] == "B") cm.B = q;
                else throw LoadError(where + ": unknown cost field '" + w[i] + "'");
            }
            for (const char* f : {"Cc", "Cmt", "Cme", "Cn", "Ceps", "B"})
                if (!seen.count(f)) throw LoadError(where + ": cost " + w[1] + " missing " + f);
            sc.costs[w[1]] = cm;
        } else if (k == "object") {
            need(2);
            auto& o = sc.objects[w[1]];
            for (std::size_t i = 2; i + 1 < w.size(); i += 2) o[w[i]] = w[i + 1];
        } else if (k == "root") {
            need(2);
            sc.roots.push_back(w[1]);
        } else if (k == "phase") {
            need(3);
            sc.phases.push_back({w[1], std::vector<std::string>(w.begin() + 2, w.end())});
        } else if (k == "event") {
            need(2);
            ScriptedEvent e;
            e.kind = w[1];
            std::size_t i = 2;
            while (i < w.size()) {
                const auto& f = w[i];
                if (f == "fact") {
                    std::string rest;
                    for (std::size_t j = i + 1; j < w.size(); ++j) rest += (rest.empty() ? "" : " ") + w[j];
                    e.fact = parse_fact(rest);
                    break;
                }
                if (f == "arrive") {
                    if (i + 3 >= w.size()) throw LoadError(where + ": arrive needs agent location delay");
                    e.arrive_agent = w[i + 1];
                    e.arrive_loc = w[i + 2];
                    e.arrive_delay = to_int(w[i + 3], where);
                    i += 4;
                    continue;
                }
                if (i + 1 >= w.size()) throw LoadError(where + ": event field '" + f + "' needs a value");
                const auto& v = w[i + 1];
                if (f == "tick") e.tick = to_int(v, where);
                else if (f == "target") e.target = v;
                else if (f == "channel") e.channel = v;
                else if (f == "at") e.at = v;
                else if (f == "template") e.tpl = v;
                else if (f == "role") e.role = v;
                else throw LoadError(where + ": unknown event field '" + f + "'");
                i += 2;
            }
            static const std::set<std::string> kinds = {"crash", "enemy-sighting", "order-arrival", "unassign-role"};
            if (!kinds.count(e.kind)) throw LoadError(where + ": unknown event kind '" + e.kind + "'");
            if (e.tick < 0 && e.arrive_agent.empty()) throw LoadError(where + ": event needs tick or arrive");
            sc.events.push_back(e);
        } else if (k == "condition") {
            need(2);
            ConditionSpec c;
            c.id = to_int(w[1], where);
            for (std::size_t i = 2; i < w.size();) {
                if (w[i] == "base" && i + 1 < w.size()) {
                    c.base = to_int(w[i + 1], where);
                    i += 2;
                } else if (w[i] == "flag" && i + 1 < w.size()) {
                    c.flags.push_back(w[i + 1]);
                    i += 2;
                } else if (w[i] == "share" && i + 1 < w.size()) {
                    c.share.push_back(w[i + 1]);
                    i += 2;
                } else if (w[i] == "cost" && i + 3 < w.size()) {
                    c.costs.emplace_back(w[i + 1], w[i + 2], parse_qual(w[i + 3]));
                    i += 4;
                } else {
                    throw LoadError(where + ": bad condition field '" + w[i] + "'");
                }
            }
            sc.conditions[c.id] = c;
        } else if (k == "template") {
            need(2);
            open_template = w[1];
        } else {
            throw LoadError(where + ": unknown key '" + k + "'");
        }
    }
    if (!open_template.empty()) throw LoadError("template '" + open_template + "' missing end");
    if (sc.agents.empty()) throw LoadError("scenario declares no agents");
    if (sc.size_max == 0) sc.size_max = static_cast<int>(sc.agents.size());
    return sc;
}

inline ScenarioConfig load_scenario_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open scenario '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_scenario(ss.str());
}

inline ScenarioConfig load_scenario(const std::string& path) { return load_scenario_file(path); }

struct RunOptions {
    Policy policy = Policy::Balanced;
    int size = 0;  // 0 = all agents
    int condition = 1;
    std::optional<unsigned long long> seed;
    std::map<std::string, double> loss;  // channel -> loss override
    std::optional<int> deadlock;
};

struct InFlight {
    int deliver = 0;
    std::string channel;
    int sender_index = 0;
    Message msg;
};

struct World {
    ScenarioConfig cfg;
    RunOptions opt;
    Org org;
    std::vector<AgentState> agents;
    std::map<std::string, ChannelModel> channels;
    std::map<std::string, CostModel> costs;
    std::map<std::string, std::string> locations;
    std::map<std::string, std::set<Fact>> location_facts;
    std::vector<ScriptedEvent> events;
    std::map<std::string, int> arrivals;  // "agent@loc" -> first tick there
    std::vector<InFlight> in_flight;
    std::map<std::string, std::vector<Percept>> pending;
    std::vector<TraceEvent> trace;
    std::mt19937_64 rng;
    bool poor_visibility = false;
    std::vector<std::string> phase_of;  // per agent
    std::vector<std::string> degree_of;
    int tick_now = 0;
    int last_change = 0;
    std::string outcome;  // success | complete-failure | deadlock
    std::map<std::string, int> sent_by_kind;
    int sent_total = 0;

    void emit(const std::string& agent, const std::string& kind, const std::string& payload) {
        trace.push_back({tick_now, agent, kind, payload});
    }
    AgentState* agent(const std::string& id) {
        for (auto& a : agents)
            if (a.id == id) return &a;
        return nullptr;
    }
};

namespace sim_detail {

inline std::vector<std::string> expand_members(const std::string& tok, const std::map<std::string, TeamInfo>& teams,
                                               const std::string& where) {
    const std::string prefix = "members-of:";
    if (tok.rfind(prefix, 0) != 0) return {tok};
    auto it = teams.find(tok.substr(prefix.size()));
    if (it == teams.end()) throw LoadError(where + ": unknown team in '" + tok + "'");
    return it->second.members;
}

class ConstraintParser {
public:
    ConstraintParser(std::string s, const std::map<std::string, TeamInfo>& teams, std::string where)
        : s_(std::move(s)), teams_(teams), where_(std::move(where)) {}

    RoleConstraint parse() {
        auto c = node();
        skip();
        if (pos_ != s_.size()) fail("trailing text");
        return c;
    }

private:
    std::string s_;
    const std::map<std::string, TeamInfo>& teams_;
    std::string where_;
    std::size_t pos_ = 0;

    [[noreturn]] void fail(const std::string& m) { throw LoadError(where_ + ": constraint " + m); }
    void skip() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }
    std::string word() {
        skip();
        std::size_t b = pos_;
        while (pos_ < s_.size() && s_[pos_] != '(' && s_[pos_] != ')' && s_[pos_] != ',' && s_[pos_] != ' ') ++pos_;
        if (b == pos_) fail("expected name");
        return s_.substr(b, pos_ - b);
    }
    bool eat(char ch) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == ch) {
            ++pos_;
            return true;
        }
        return false;
    }
    void items(std::vector<RoleConstraint>& out) {
        do {
            skip();
            std::size_t save = pos_;
            std::string w = word();
            if (w.rfind("members-of:", 0) == 0 && !(skip(), pos_ < s_.size() && s_[pos_] == '(')) {
                for (const auto& m : expand_members(w, teams_, where_)) out.push_back(RoleConstraint::leaf(m));
            } else {
                pos_ = save;
                out.push_back(node());
            }
        } while (eat(','));
    }
    RoleConstraint node() {
        std::string w = word();
        if (w == "AND" || w == "OR") {
            if (!eat('(')) fail("expected (");
            std::vector<RoleConstraint> kids;
            items(kids);
            if (!eat(')')) fail("expected )");
            return w == "AND" ? RoleConstraint::all(kids) : RoleConstraint::any(kids);
        }
        if (w == "DEP") {
            if (!eat('(')) fail("expected (");
            std::string a = word();
            if (!eat(',')) fail("expected ,");
            std::string b = word();
            if (!eat(')')) fail("expected )");
            if (a == b) fail("DEP arguments must differ");
            return RoleConstraint::dep(a, b);
        }
        return RoleConstraint::leaf(w);
    }
};

inline Termination category_of(const std::string& k) {
    if (k == "achieve") return Termination::Achieved;
    if (k == "unachievable") return Termination::Unachievable;
    if (k == "irrelevant") return Termination::Irrelevant;
    return Termination::Threat;
}

inline TemplatePtr build_template(const std::string& id, const std::vector<std::pair<int, std::string>>& body,
                                  const std::map<std::string, TeamInfo>& teams, const std::set<std::string>& present) {
    auto t = std::make_shared<OperatorTemplate>();
    t->id = id;
    t->establish_class = "default";
    for (const auto& [ln, line] : body) {
        const std::string where = "line " + std::to_string(ln) + " (template " + id + ")";
        auto w = split_ws(line);
        const auto& k = w[0];
        auto rest = [&](std::size_t from) {
            std::string r;
            for (std::size_t i = from; i < w.size(); ++i) r += (r.empty() ? "" : " ") + w[i];
            return r;
        };
        if (k == "exec") {
            if (w.size() < 2) throw LoadError(where + ": exec needs a value");
            if (w[1] == "self") t->exec.kind = ExecSpec::Kind::Self;
            else if (w[1] == "parent") t->exec.kind = ExecSpec::Kind::Parent;
            else if (w[1] == "team" && w.size() > 2) t->exec = {ExecSpec::Kind::Team, w[2]};
            else if (w[1] == "role" && w.size() > 2) t->exec = {ExecSpec::Kind::Role, w[2]};
            else throw LoadError(where + ": bad exec");
        } else if (k == "priority") {
            t->priority = to_int(w.at(1), where);
        } else if (k == "pre") {
            std::vector<Pattern> alts;
            std::stringstream ss(rest(1));
            std::string part;
            while (std::getline(ss, part, '|'))
                if (!trim(part).empty()) alts.push_back(parse_pattern(trim(part)));
            if (alts.empty()) throw LoadError(where + ": empty pre");
            t->preconditions.push_back(alts);
        } else if (k == "achieve" || k == "unachievable" || k == "irrelevant" || k == "threat") {
            // <kind> <cond-id> <cost-class> : <pattern>
            auto colon = line.find(':');
            if (colon == std::string::npos || w.size() < 4) throw LoadError(where + ": condition needs 'id class : pattern'");
            TermCondition c;
            c.id = w[1];
            c.cost_class = w[2];
            c.category = category_of(k);
            c.pattern = parse_pattern(trim(line.substr(colon + 1)));
            t->conditions.push_back(c);
        } else if (k == "children") {
            t->children.assign(w.begin() + 1, w.end());
        } else if (k == "role") {
            if (w.size() != 3) throw LoadError(where + ": role needs name and entity");
            std::string e = w[2];
            if (e != kUnassigned && !present.count(e)) e = kUnassigned;  // dropped by team-size truncation
            t->roles.push_back({w[1], e});
        } else if (k == "roles") {
            if (w.size() != 2) throw LoadError(where + ": roles needs members-of:<team>");
            for (const auto& m : expand_members(w[1], teams, where)) t->roles.push_back({m, m});
        } else if (k == "constraint") {
            t->constraint = ConstraintParser(rest(1), teams, where).parse();
        } else if (k == "depends") {
            if (w.size() < 3) throw LoadError(where + ": depends needs condition and fields");
            t->info_dependency[w[1]] = std::vector<std::string>(w.begin() + 2, w.end());
        } else if (k == "leader") {
            t->leader_role = w.at(1);
        } else if (k == "group") {
            t->group = w.at(1);
        } else if (k == "establish") {
            t->establish_class = w.at(1);
        } else if (k == "effect") {
            Effect e;
            std::size_t i = 1;
            bool have_fact = false;
            while (i < w.size()) {
                if (w[i] == "fact") {
                    e.fact = parse_fact(rest(i + 1));
                    have_fact = true;
                    break;
                }
                if (i + 1 >= w.size()) throw LoadError(where + ": effect field needs value");
                if (w[i] == "after") e.after = to_int(w[i + 1], where);
                else if (w[i] == "origin") e.origin_leader = w[i + 1] == "leader";
                else if (w[i] == "visible") e.location_visible = w[i + 1] == "location";
                else if (w[i] == "move") e.move_to = w[i + 1];
                else throw LoadError(where + ": unknown effect field '" + w[i] + "'");
                i += 2;
            }
            if (!have_fact) e.fact = Fact("moved", {id});
            if (!have_fact) e.location_visible = false;
            t->effect = e;
        } else {
            throw LoadError(where + ": unknown template key '" + k + "'");
        }
    }
    if (t->constraint)
        for (const auto& r : t->constraint->roles()) {
            bool ok = std::any_of(t->roles.begin(), t->roles.end(), [&](const auto& p) { return p.first == r; });
            if (!ok) throw LoadError("template " + id + ": constraint role '" + r + "' missing from role-spec");
        }
    return t;
}

}  // namespace sim_detail

// Builds a world for one run.  Team size truncates the agent list to the
// first N declared agents; empty teams disappear and roles bound to
// vanished entities become UNASSIGNED.
inline World make_world(const ScenarioConfig& sc, const RunOptions& opt) {
    using namespace sim_detail;
    World w;
    w.cfg = sc;
    w.opt = opt;
    int n = opt.size > 0 ? opt.size : static_cast<int>(sc.agents.size());
    if (n > static_cast<int>(sc.agents.size())) throw LoadError("team size " + std::to_string(n) + " exceeds agent list");
    std::set<std::string> present;
    std::map<std::string, const AgentSpec*> aspec;
    for (int i = 0; i < n; ++i) {
        w.org.agents.push_back(sc.agents[i].id);
        present.insert(sc.agents[i].id);
        aspec[sc.agents[i].id] = &sc.agents[i];
    }
    std::set<std::string> all_agents;
    for (const auto& a : sc.agents) {
        if (!all_agents.insert(a.id).second) throw LoadError("duplicate agent '" + a.id + "'");
    }
    std::set<std::string> declared_teams;
    for (const auto& t : sc.teams) declared_teams.insert(t.id);
    for (const auto& t : sc.teams) {
        if (!t.parent.empty() && !declared_teams.count(t.parent))
            throw LoadError("team " + t.id + ": unknown parent '" + t.parent + "'");
        for (const auto& m : t.members)
            if (!all_agents.count(m)) throw LoadError("team " + t.id + ": unknown member '" + m + "'");
        if (t.leader.empty()) throw LoadError("team " + t.id + ": no leader");
        if (std::find(t.members.begin(), t.members.end(), t.leader) == t.members.end())
            throw LoadError("team " + t.id + ": leader '" + t.leader + "' is not a member");
        // cycle / depth check
        std::set<std::string> seen{t.id};
        std::string p = t.parent;
        int depth = 1;
        while (!p.empty()) {
            if (!seen.insert(p).second) throw LoadError("team " + t.id + ": cyclic hierarchy");
            ++depth;
            auto it = std::find_if(sc.teams.begin(), sc.teams.end(), [&](const TeamSpec& x) { return x.id == p; });
            p = it->parent;
        }
        if (depth + 1 > 4) throw LoadError("team " + t.id + ": hierarchy deeper than 4 levels");
    }
    for (const auto& t : sc.teams) {
        if (t.parent.empty()) continue;
        const auto& par = *std::find_if(sc.teams.begin(), sc.teams.end(), [&](const TeamSpec& x) { return x.id == t.parent; });
        for (const auto& m : t.members)
            if (std::find(par.members.begin(), par.members.end(), m) == par.members.end())
                throw LoadError("team " + t.id + ": member '" + m + "' not in parent " + t.parent);
    }
    // at most one subteam per level per agent
    {
        std::map<std::pair<std::string, std::string>, std::string> slot;  // (agent, parent) -> subteam
        for (const auto& t : sc.teams) {
            if (t.parent.empty()) continue;
            for (const auto& m : t.members) {
                auto [it, ok] = slot.insert({{m, t.parent}, t.id});
                if (!ok) throw LoadError("agent " + m + " belongs to sibling subteams " + it->second + " and " + t.id);
            }
        }
    }
    for (const auto& t : sc.teams) {
        TeamInfo ti;
        ti.id = t.id;
        ti.parent = t.parent;
        for (const auto& m : t.members)
            if (present.count(m)) ti.members.push_back(m);
        std::sort(ti.members.begin(), ti.members.end(),
                  [&](const std::string& a, const std::string& b) { return w.org.agent_index(a) < w.org.agent_index(b); });
        if (ti.members.empty()) continue;
        ti.leader = present.count(t.leader) ? t.leader : ti.members.front();
        w.org.teams[t.id] = ti;
        if (!t.caps.empty()) w.org.capabilities[t.id] = t.caps;
    }
    for (auto& [id, ti] : w.org.teams) {
        int level = 1;
        for (std::string p = ti.parent; !p.empty(); p = w.org.teams.count(p) ? w.org.teams[p].parent : "") ++level;
        ti.level = level;
        if (!ti.parent.empty() && w.org.teams.count(ti.parent)) w.org.teams[ti.parent].subteams.push_back(id);
    }
    for (auto& [id, ti] : w.org.teams) present.insert(id);
    for (const auto& a : sc.agents)
        if (present.count(a.id)) w.org.capabilities[a.id] = a.caps;

    // channels
    for (auto ch : sc.channels) {
        if (ch.shared && !declared_teams.count(ch.team))
            throw LoadError("channel " + ch.id + ": unknown team '" + ch.team + "'");
        for (const auto& p : ch.private_)
            if (!all_agents.count(p)) throw LoadError("channel " + ch.id + ": unknown agent '" + p + "'");
        auto lo = opt.loss.find(ch.id);
        if (lo != opt.loss.end()) ch.loss = lo->second;
        w.channels[ch.id] = ch;
        if (ch.shared && w.org.teams.count(ch.team)) w.org.teams[ch.team].channels.push_back(ch.id);
    }

    // conditions (resolved through their base chain)
    std::vector<const ConditionSpec*> chain;
    if (!sc.conditions.empty() || opt.condition != 1) {
        int c = opt.condition;
        std::set<int> seen;
        while (c > 0) {
            auto it = sc.conditions.find(c);
            if (it == sc.conditions.end()) throw LoadError("unknown condition " + std::to_string(c));
            if (!seen.insert(c).second) throw LoadError("cyclic condition base");
            chain.push_back(&it->second);
            c = it->second.base;
        }
        std::reverse(chain.begin(), chain.end());
    }
    w.costs = sc.costs;
    std::set<std::string> flags;
    for (const auto* c : chain) {
        for (const auto& f : c->flags) flags.insert(f);
        for (const auto& s : c->share) {
            auto it = w.channels.find(s);
            if (it == w.channels.end()) throw LoadError("condition shares unknown channel '" + s + "'");
            it->second.shared = true;
            if (it->second.team.empty()) it->second.team = w.org.teams.empty() ? "" : w.org.teams.begin()->first;
            for (const auto& [tid, ti] : w.org.teams)
                if (ti.parent.empty()) it->second.team = tid;
        }
        for (const auto& [cls, field, q] : c->costs) {
            auto it = w.costs.find(cls);
            if (it == w.costs.end()) throw LoadError("condition overrides unknown cost class '" + cls + "'");
            if (field == "Cc") it->second.Cc = q;
            else if (field == "Cmt") it->second.Cmt = q;
            else if (field == "Cme") it->second.Cme = q;
            else if (field == "Cn") it->second.Cn = q;
            else throw LoadError("condition overrides unknown cost field '" + field + "'");
        }
    }
    w.poor_visibility = flags.count("poor-visibility") > 0;

    // templates
    for (const auto& [id, body] : sc.template_src) {
        if (w.org.templates.count(id)) throw LoadError("duplicate template '" + id + "'");
        w.org.templates[id] = build_template(id, body, w.org.teams, present);
    }
    for (const auto& [id, t] : w.org.templates) {
        for (const auto& c : t->children)
            if (!w.org.templates.count(c)) throw LoadError("template " + id + ": unknown child '" + c + "'");
        if (t->exec.kind == ExecSpec::Kind::Team && !declared_teams.count(t->exec.name))
            throw LoadError("template " + id + ": unknown team '" + t->exec.name + "'");
        for (const auto& c : t->conditions)
            if (!w.costs.count(c.cost_class))
                throw LoadError("template " + id + ": missing cost entry '" + c.cost_class + "'");
        if (!w.costs.count(t->establish_class))
            throw LoadError("template " + id + ": missing cost entry '" + t->establish_class + "'");
        for (const auto& [cond, fields] : t->info_dependency) {
            bool ok = std::any_of(t->conditions.begin(), t->conditions.end(), [&](const TermCondition& c) { return c.id == cond; });
            if (!ok) throw LoadError("template " + id + ": depends on undeclared condition '" + cond + "'");
        }
        if (!t->is_leaf() && !t->has_termination())
            throw LoadError("template " + id + ": needs a termination condition or must be a leaf");
    }
    for (const char* cls : {kRepair, kCompleteFailure})
        if (!w.costs.count(cls)) throw LoadError(std::string("missing cost entry '") + cls + "'");
    for (const auto& r : sc.roots)
        if (!w.org.templates.count(r)) throw LoadError("unknown root template '" + r + "'");
    if (!sc.fallback.empty() && !w.org.templates.count(sc.fallback))
        throw LoadError("unknown fallback template '" + sc.fallback + "'");
    for (const auto& [ph, ops] : sc.phases)
        for (const auto& o : ops)
            if (!w.org.templates.count(o)) throw LoadError("phase " + ph + ": unknown template '" + o + "'");

    // agents and their initial team-state copies
    unsigned long long seed = opt.seed ? *opt.seed : sc.seed;
    w.rng.seed(seed);
    for (int i = 0; i < n; ++i) {
        AgentState a;
        a.id = sc.agents[i].id;
        a.index = i;
        a.capabilities = sc.agents[i].caps;
        a.policy = opt.policy;
        a.rng.seed(seed * 1000003ULL + static_cast<unsigned long long>(i) * 7919ULL + 17ULL);
        for (const auto& [tid, ti] : w.org.teams) {
            if (std::find(ti.members.begin(), ti.members.end(), a.id) == ti.members.end()) continue;
            TeamState ts;
            ts.id = tid;
            ts.members = ti.members;
            ts.subteams = ti.subteams;
            ts.channels = ti.channels;
            ts.leader = ti.leader;
            a.team_states[tid] = ts;
        }
        for (const auto& f : flags) {
            Fact fact("env", {f});
            a.private_beliefs.insert(fact);
            a.provenance[fact] = Provenance::SharedChannel;
        }
        w.locations[a.id] = sc.agents[i].at;
        w.arrivals[a.id + "@" + sc.agents[i].at] = 0;
        w.agents.push_back(std::move(a));
    }
    for (const auto& e : sc.events) {
        if (!e.target.empty() && !present.count(e.target) && all_agents.count(e.target)) continue;
        if (!e.arrive_agent.empty() && !present.count(e.arrive_agent)) continue;
        if (e.kind == "unassign-role" && !w.org.templates.count(e.tpl))
            throw LoadError("event names unknown template '" + e.tpl + "'");
        if (!e.channel.empty() && !w.channels.count(e.channel))
            throw LoadError("event names unknown channel '" + e.channel + "'");
        w.events.push_back(e);
    }
    w.phase_of.assign(w.agents.size(), "");
    w.degree_of.assign(w.agents.size(), "");
    return w;
}

namespace sim_detail {

inline std::string channel_for(const World& w, const std::string& team) {
    std::string t = team;
    while (!t.empty()) {
        auto it = w.org.teams.find(t);
        if (it == w.org.teams.end()) break;
        if (!it->second.channels.empty()) return it->second.channels.front();
        t = it->second.parent;
    }
    return "";
}

inline void perceive_at(World& w, const std::string& loc, const Fact& f, const std::string& origin, bool location_visible) {
    if (location_visible) w.location_facts[loc].insert(f);
    for (auto& a : w.agents) {
        if (!a.alive) continue;
        bool sees = a.id == origin;
        if (!sees && location_visible && !w.poor_visibility) sees = w.locations[a.id] == loc;
        if (!sees) continue;
        Provenance p = a.id == origin && !location_visible ? Provenance::Own : Provenance::Location;
        w.pending[a.id].push_back({f, p, std::nullopt});
    }
}

inline void fire_event(World& w, const ScriptedEvent& e) {
    std::string payload = e.kind;
    if (!e.target.empty()) payload += " target=" + e.target;
    if (e.fact) payload += " fact=" + e.fact->str();
    w.emit("world", "metric", "event " + payload);
    if (e.kind == "crash") {
        auto* a = w.agent(e.target);
        if (!a || !a->alive) return;
        a->alive = false;
        Fact f("crashed", {e.target});
        for (auto& o : w.agents) {
            if (!o.alive) continue;
            bool shares = false;
            for (const auto& [tid, ti] : w.org.teams)
                if (w.org.contains(tid, o.id) && w.org.contains(tid, e.target)) shares = true;
            if (shares) w.pending[o.id].push_back({f, Provenance::SharedChannel, std::nullopt});
        }
        return;
    }
    if (e.kind == "unassign-role") {
        for (auto& a : w.agents) a.role_overrides[e.tpl][e.role] = kUnassigned;
        return;
    }
    if (!e.fact) return;
    if (e.kind == "enemy-sighting") {
        std::string loc = !e.at.empty() ? e.at : w.locations[e.target];
        perceive_at(w, loc, *e.fact, e.target, true);
        return;
    }
    // order-arrival
    if (!e.channel.empty()) {
        const auto& ch = w.channels.at(e.channel);
        std::vector<std::string> audience;
        if (ch.shared) {
            if (w.org.teams.count(ch.team)) audience = w.org.teams.at(ch.team).members;
        } else {
            audience = ch.private_;
        }
        for (const auto& id : audience) {
            auto* a = w.agent(id);
            if (!a || !a->alive) continue;
            w.pending[id].push_back({*e.fact, ch.shared ? Provenance::SharedChannel : Provenance::PrivateChannel, ch.tau});
        }
        return;
    }
    if (!e.target.empty()) w.pending[e.target].push_back({*e.fact, Provenance::PrivateChannel, std::nullopt});
}

inline std::string phase_for(const World& w, const AgentState& a) {
    std::string best;
    for (int id : a.chain()) {
        const auto* in = a.find(id);
        for (const auto& [ph, ops] : w.cfg.phases)
            if (std::find(ops.begin(), ops.end(), in->tpl->id) != ops.end()) best = ph;
    }
    return best;
}

inline std::string degree_for(const AgentState& a) {
    int team = 0, total = 0;
    for (int id : a.chain()) {
        ++total;
        team += a.find(id)->team_op;
    }
    return std::to_string(team) + "/" + std::to_string(total);
}

inline std::string subteam_degree_for(const World& w, const AgentState& a) {
    int top = 0, total = 0;
    for (int id : a.chain()) {
        const auto* in = a.find(id);
        ++total;
        if (in->team_op && w.org.teams.count(in->executor) && w.org.teams.at(in->executor).parent.empty()) ++top;
    }
    return std::to_string(top) + "/" + std::to_string(total);
}

}  // namespace sim_detail

// Advances the world by one tick.  Returns false once the run is over.
inline bool tick(World& w) {
    using namespace sim_detail;
    if (!w.outcome.empty()) return false;
    const int t = w.tick_now;
    const std::size_t first_event = w.trace.size();
    bool changed = false;

    // 1. deliver due messages, drawing losses in (channel, sender, seq) order
    std::vector<InFlight> due, later;
    for (auto& m : w.in_flight) (m.deliver <= t ? due : later).push_back(std::move(m));
    w.in_flight = std::move(later);
    std::stable_sort(due.begin(), due.end(), [](const InFlight& a, const InFlight& b) {
        return std::tie(a.channel, a.sender_index, a.msg.seq) < std::tie(b.channel, b.sender_index, b.msg.seq);
    });
    std::map<std::string, std::vector<Message>> inbox;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (const auto& m : due) {
        const ChannelModel* ch = m.channel.empty() ? nullptr : &w.channels.at(m.channel);
        auto it = w.org.teams.find(m.msg.team);
        if (it == w.org.teams.end()) continue;
        for (const auto& r : it->second.members) {
            if (r == m.msg.sender) continue;
            auto* a = w.agent(r);
            if (!a || !a->alive) continue;
            bool lost = false;
            if (ch && ch->loss > 0) lost = u(w.rng) < ch->loss;
            w.emit(r, lost ? "msg-lost" : "msg-delivered", to_wire(m.msg));
            if (!lost) inbox[r].push_back(m.msg);
        }
    }

    // 2. scripted events
    for (const auto& e : w.events) {
        int at = e.tick;
        if (!e.arrive_agent.empty()) {
            auto it = w.arrivals.find(e.arrive_agent + "@" + e.arrive_loc);
            if (it == w.arrivals.end()) continue;
            at = it->second + e.arrive_delay;
        }
        if (at == t) fire_event(w, e);
    }

    // 3. agents in index order
    Env env;
    env.tick = t;
    env.org = &w.org;
    env.costs = &w.costs;
    env.world = &w.cfg.objects;
    env.locations = &w.locations;
    env.poor_visibility = w.poor_visibility;
    env.timeout = w.cfg.timeout;
    env.max_rebroadcast = w.cfg.max_rebroadcast;
    env.failure_predicates = w.cfg.failure_predicates;
    env.roots = w.cfg.roots;
    env.fallback = w.cfg.fallback;
    std::vector<std::pair<std::string, WorldAction>> actions;
    std::vector<std::pair<int, Message>> outgoing;
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
        auto& a = w.agents[i];
        if (!a.alive) continue;
        auto percepts = std::move(w.pending[a.id]);
        w.pending[a.id].clear();
        StepResult r = step_agent(a, inbox[a.id], percepts, env);
        for (auto& e : r.events) {
            if (e.kind == "intention-change") changed = true;
            w.trace.push_back(std::move(e));
        }
        for (auto& m : r.outbox) outgoing.push_back({static_cast<int>(i), std::move(m)});
        for (auto& act : r.actions) actions.push_back({a.id, act});
    }

    // 4. outboxes merged at the barrier
    for (auto& [idx, m] : outgoing) {
        std::string ch = channel_for(w, m.team);
        int delay = ch.empty() ? 1 : std::max(1, w.channels.at(ch).delay);
        w.emit(m.sender, "msg-sent", to_wire(m));
        w.sent_total++;
        w.sent_by_kind[to_string(m.kind)]++;
        changed = true;
        w.in_flight.push_back({t + delay, ch, idx, std::move(m)});
    }

    // 5. world actions: moves first, then produced facts
    for (const auto& [id, act] : actions) {
        if (act.move_to.empty() || w.locations[id] == act.move_to) continue;
        w.locations[id] = act.move_to;
        w.arrivals.emplace(id + "@" + act.move_to, t + 1);
        w.emit(id, "state-update", "location " + act.move_to);
        if (!w.poor_visibility)
            for (const auto& f : w.location_facts[act.move_to]) w.pending[id].push_back({f, Provenance::Location, std::nullopt});
    }
    for (const auto& [id, act] : actions)
        if (act.fact) perceive_at(w, w.locations[id], *act.fact, id, act.location_visible);

    // 6. phase and collaboration markers
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
        const auto& a = w.agents[i];
        if (!a.alive || a.finished) continue;
        std::string ph = phase_for(w, a);
        if (ph != w.phase_of[i]) {
            w.phase_of[i] = ph;
            if (!ph.empty()) w.emit(a.id, "metric", "phase " + ph);
        }
        std::string d = degree_for(a) + " " + subteam_degree_for(w, a);
        if (d != w.degree_of[i]) {
            w.degree_of[i] = d;
            w.emit(a.id, "metric", "degree " + d);
        }
    }

    if (changed) w.last_change = t;

    // trace order within a tick: world first, then agents by index
    std::map<std::string, int> rank;
    for (std::size_t i = 0; i < w.agents.size(); ++i) rank[w.agents[i].id] = static_cast<int>(i);
    std::stable_sort(w.trace.begin() + static_cast<long>(first_event), w.trace.end(),
                     [&](const TraceEvent& a, const TraceEvent& b) {
                         auto ra = rank.find(a.agent), rb = rank.find(b.agent);
                         return (ra == rank.end() ? -1 : ra->second) < (rb == rank.end() ? -1 : rb->second);
                     });

    // 7. end of run
    bool all_done = true, any_cf = false, any_alive = false;
    for (const auto& a : w.agents) {
        if (!a.alive) continue;
        any_alive = true;
        if (!a.finished) all_done = false;
        if (a.outcome == "complete-failure") any_cf = true;
    }
    int D = w.opt.deadlock ? *w.opt.deadlock : w.cfg.deadlock;
    if (!any_alive) {
        w.outcome = "complete-failure";
    } else if (all_done) {
        w.outcome = any_cf ? "complete-failure" : "success";
    } else if (t - w.last_change >= D || t >= w.cfg.max_ticks) {
        w.outcome = "deadlock";
    }
    if (!w.outcome.empty()) w.emit("world", "metric", "end " + w.outcome);
    w.tick_now = t + 1;
    return w.outcome.empty();
}

inline void run_to_end(World& w) {
    while (tick(w)) {
    }
}

inline std::string escape_payload(std::string s) {
    std::replace(s.begin(), s.end(), '\t', ' ');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

inline std::string format_trace(const std::vector<TraceEvent>& tr) {
    std::string out;
    for (const auto& e : tr)
        out += std::to_string(e.tick) + "\t" + e.agent + "\t" + e.kind + "\t" + escape_payload(e.payload) + "\n";
    return out;
}

inline std::vector<TraceEvent> parse_trace(const std::string& text) {
    std::vector<TraceEvent> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::size_t b = 0;
        for (int k = 0; k < 3; ++k) {
            auto p = line.find('\t', b);
            if (p == std::string::npos) break;
            f.push_back(line.substr(b, p - b));
            b = p + 1;
        }
        if (f.size() != 3) continue;
        TraceEvent e;
        try {
            e.tick = std::stoi(f[0]);
        } catch (...) {
            continue;
        }
        e.agent = f[1];
        e.kind = f[2];
        e.payload = line.substr(b);
        out.push_back(e);
    }
    return out;
}

// Facts the given agent perceives from the world right now (location rule).
inline std::vector<Fact> observe(const World& w, const std::string& agent) {
    std::vector<Fact> out;
    auto loc = w.locations.find(agent);
    if (loc == w.locations.end() || w.poor_visibility) return out;
    auto it = w.location_facts.find(loc->second);
    if (it != w.location_facts.end()) out.assign(it->second.begin(), it->second.end());
    return out;
}

}  // namespace steam
