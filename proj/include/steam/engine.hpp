// Per-tick execution of the team/individual operator hierarchy.
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "steam/comm.hpp"
#include "steam/kernel.hpp"
#include "steam/monitor.hpp"

namespace steam {

struct TraceEvent {
    int tick = 0;
    std::string agent;
    std::string kind;  // msg-sent msg-delivered msg-lost intention-change state-update repair metric
    std::string payload;
};

struct Percept {
    Fact fact;
    Provenance provenance = Provenance::Location;
    std::optional<Qual> tau_override;
};

// Side effects on the world requested by an agent this tick.
struct WorldAction {
    std::optional<Fact> fact;
    bool location_visible = true;
    std::string move_to;
};

struct Env {
    int tick = 0;
    const Org* org = nullptr;
    const std::map<std::string, CostModel>* costs = nullptr;
    const WorldView* world = nullptr;
    const std::map<std::string, std::string>* locations = nullptr;
    bool poor_visibility = false;
    int timeout = 3;
    int max_rebroadcast = 5;
    std::set<std::string> failure_predicates = {"crashed", "destroyed", "inability"};
    std::vector<std::string> roots;   // root template ids
    std::string fallback;             // complete-failure fallback template id
};

struct StepResult {
    std::vector<Message> outbox;
    std::vector<TraceEvent> events;
    std::vector<WorldAction> actions;
};

inline constexpr const char* kRepair = "repair";
inline constexpr const char* kCompleteFailure = "complete-failure";

namespace engine_detail {

struct Ctx {
    AgentState& a;
    const Env& env;
    StepResult& out;
    bool comm_pending = false;
    std::set<int> confirm_replied;
    std::set<std::string> stale_replied;

    const Org& org() const { return *env.org; }

    void trace(const std::string& kind, const std::string& payload) {
        out.events.push_back({env.tick, a.id, kind, payload});
    }

    const CostModel& cost(const std::string& cls) const {
        auto it = env.costs->find(cls);
        if (it == env.costs->end()) throw ConfigError("missing cost entry '" + cls + "'");
        return it->second;
    }

    void send(Message m) {
        m.sender = a.id;
        m.seq = ++a.seq;
        out.outbox.push_back(std::move(m));
        comm_pending = true;
    }
};

inline std::string key(const std::string& tpl, const std::string& team) { return tpl + "@" + team; }

inline std::vector<std::string> live_members(const Ctx& c, const std::string& team) {
    std::vector<std::string> out;
    auto it = c.org().teams.find(team);
    if (it == c.org().teams.end()) return {team};
    for (const auto& m : it->second.members)
        if (!c.a.known_failed.count(m)) out.push_back(m);
    return out;
}

inline std::string live_leader(const Ctx& c, const std::string& team, const std::string& preferred) {
    if (!preferred.empty() && !c.a.known_failed.count(preferred)) return preferred;
    auto live = live_members(c, team);
    return live.empty() ? preferred : live.front();
}

inline bool colocated_all(const Ctx& c, const std::string& team) {
    if (!c.env.locations) return true;
    auto mine = c.env.locations->find(c.a.id);
    if (mine == c.env.locations->end()) return true;
    for (const auto& m : live_members(c, team)) {
        auto it = c.env.locations->find(m);
        if (it == c.env.locations->end() || it->second != mine->second) return false;
    }
    return true;
}

inline std::string status_line(const IntentionInstance& in) {
    std::string s = in.tpl->id + " " + in.executor + " " + to_string(in.status);
    if (!in.cause.empty() && in.status == Status::Unachievable) s += " cause=" + in.cause;
    return s;
}

inline void note_failure_fact(Ctx& c, const Fact& f) {
    if (c.env.failure_predicates.count(f.predicate) && !f.args.empty()) c.a.known_failed.insert(f.args[0]);
}

inline void write_team(Ctx& c, IntentionInstance& in, const Fact& f) {
    if (c.a.team_states.count(in.executor) && c.a.team_states.at(in.executor).has(f)) return;
    apply_team_state_update(c.a, in.executor, f, in);
    c.trace("state-update", in.executor + " " + f.str());
}

void start_followup(Ctx& c, IntentionInstance& failed);
void on_activated(Ctx& c, int id);

inline void clear_scope(Ctx& c, int owner) {
    for (auto& [tid, ts] : c.a.team_states) {
        for (auto it = ts.scope.begin(); it != ts.scope.end();) {
            if (it->second == owner) {
                ts.beliefs.erase(it->first);
                it = ts.scope.erase(it);
            } else {
                ++it;
            }
        }
    }
}

inline void set_status(Ctx& c, IntentionInstance& in, Status s) {
    in.status = s;
    c.trace("intention-change", status_line(in));
}

}  // namespace engine_detail

// Terminates an intention: status set, descendants cascade to Irrelevant,
// facts scoped to it cleared.  Team instances need the fact in team state.
inline void terminate_intention(AgentState& agent, int id, Status status, const std::optional<Fact>& fact,
                                std::vector<TraceEvent>* events = nullptr, int tick = 0) {
    auto* in = agent.find(id);
    if (!in || terminal(in->status)) return;
    if (in->team_op && fact) {
        auto it = agent.team_states.find(in->executor);
        if (it == agent.team_states.end() || !it->second.has(*fact))
            throw MutualBeliefViolation("terminating [" + in->tpl->id + "]_" + in->executor + " on '" + fact->str() +
                                        "' which is not in team state");
    }
    auto log = [&](const IntentionInstance& x) {
        if (events) events->push_back({tick, agent.id, "intention-change", engine_detail::status_line(x)});
    };
    // cascade first so the trace reads child before parent
    int ch = in->child;
    while (ch >= 0) {
        auto* c = agent.find(ch);
        if (!c) break;
        int next = c->child;
        if (!terminal(c->status)) {
            c->status = Status::Irrelevant;
            log(*c);
            agent.finished_ops[engine_detail::key(c->tpl->id, c->executor)] = "irrelevant";
        }
        for (auto& [tid, ts] : agent.team_states)
            for (auto s = ts.scope.begin(); s != ts.scope.end();)
                if (s->second == c->id) {
                    ts.beliefs.erase(s->first);
                    s = ts.scope.erase(s);
                } else {
                    ++s;
                }
        ch = next;
    }
    in->status = status;
    log(*in);
    agent.finished_ops[engine_detail::key(in->tpl->id, in->executor)] = to_string(status);
    if (in->team_op && fact) agent.finish_facts.insert_or_assign(engine_detail::key(in->tpl->id, in->executor), *fact);
    for (auto& [tid, ts] : agent.team_states)
        for (auto s = ts.scope.begin(); s != ts.scope.end();)
            if (s->second == in->id) {
                ts.beliefs.erase(s->first);
                s = ts.scope.erase(s);
            } else {
                ++s;
            }
    if (auto* p = agent.find(in->parent)) {
        p->child = -1;
        p->last_child_executor = in->executor;
        p->last_child_tpl = in->tpl->id;
        if (status == Status::Achieved || status == Status::Irrelevant) p->closed_children.insert(in->tpl->id);
        if (status == Status::Unachievable && in->kind == OpKind::Normal) p->blocked_children.insert(in->tpl->id);
    }
}

// Picks the best candidate.  Ties at the top priority inside one
// equally-preferable group are broken by a seeded draw.
inline TemplatePtr select_best(const std::vector<TemplatePtr>& candidates, std::mt19937_64& rng, bool& random) {
    random = false;
    if (candidates.empty()) return nullptr;
    int best = candidates.front()->priority;
    for (const auto& t : candidates) best = std::max(best, t->priority);
    std::vector<TemplatePtr> top;
    for (const auto& t : candidates)
        if (t->priority == best) top.push_back(t);
    if (top.size() == 1) return top.front();
    const std::string& g = top.front()->group;
    bool same_group = !g.empty() && std::all_of(top.begin(), top.end(), [&](const TemplatePtr& t) { return t->group == g; });
    if (!same_group) return top.front();
    random = true;
    std::uniform_int_distribution<std::size_t> pick(0, top.size() - 1);
    return top[pick(rng)];
}

namespace engine_detail {

inline Qual tau_for(Ctx& c, const IntentionInstance& in, const Fact& f, const std::optional<Qual>& override_) {
    TauInputs t;
    t.team_alive = in.team_op ? static_cast<int>(live_members(c, in.executor).size()) : 1;
    auto pv = c.a.provenance.find(f);
    t.provenance = pv == c.a.provenance.end() ? Provenance::Location : pv->second;
    t.colocated_all = in.team_op ? colocated_all(c, in.executor) : true;
    t.poor_visibility = c.env.poor_visibility;
    t.channel_override = override_;
    return estimate_tau(t);
}

inline int performing_members(Ctx& c, const IntentionInstance& in) {
    if (!in.tpl->constraint) return static_cast<int>(live_members(c, in.executor).size());
    auto st = infer_role_status(in.roles, c.a.known_failed, c.org().membership());
    int n = 0;
    for (const auto& [r, s] : st)
        if (s == RoleState::Performing) ++n;
    return n;
}

// Termination or threat fact discovered privately for instance `in`.
// Returns true when the instance was terminated.
inline bool discover(Ctx& c, IntentionInstance& in, const Fact& f, const TerminationMatch& m,
                     const std::optional<Qual>& tau_override) {
    const auto& cost = c.cost(m.condition->cost_class);
    if (!in.team_op) {
        if (m.category == Termination::Threat) return false;
        Status s = m.category == Termination::Achieved ? Status::Achieved
                   : m.category == Termination::Unachievable ? Status::Unachievable
                                                             : Status::Irrelevant;
        if (m.category == Termination::Unachievable) in.cause = "domain " + f.predicate;
        terminate_intention(c.a, in.id, s, std::nullopt, &c.out.events, c.env.tick);
        start_followup(c, in);
        return true;
    }
    bool known = c.a.team_states.count(in.executor) && c.a.team_states.at(in.executor).has(f);
    Qual tau = tau_for(c, in, f, tau_override);
    if (m.category == Termination::Threat) {
        if (in.status != Status::Active) return false;
        Qual delta = estimate_delta(m.category, in.tpl->constraint, performing_members(c, in));
        ExtendedDecision d = ExtendedDecision::Silent;
        switch (c.a.policy) {
        case Policy::Cautious: d = ExtendedDecision::SendThreat; break;
        case Policy::Balanced: d = decide_extended(delta, tau, cost.Cmt, cost.Cc, cost.Cn); break;
        case Policy::Reckless:
            d = cost.Cmt == Qual::High && tau != Qual::Zero ? ExtendedDecision::SendThreat : ExtendedDecision::Silent;
            break;
        }
        if (known) d = ExtendedDecision::Silent;
        if (d == ExtendedDecision::Silent) return false;
        Message msg;
        msg.kind = d == ExtendedDecision::SendTerminate ? Message::Kind::TerminateJPG : Message::Kind::Threat;
        msg.team = in.executor;
        msg.op = in.tpl->id;
        msg.fact = f;
        msg.cost_class = m.condition->cost_class;
        if (d == ExtendedDecision::SendTerminate) {
            auto built = build_termination_message(c.a.id, in, *m.condition, f, *c.env.world, 0);
            for (const auto& w : built.warnings) c.trace("metric", "warning " + w);
            msg.elaborations = built.msg.elaborations;
        }
        c.send(msg);
        write_team(c, in, f);
        if (d == ExtendedDecision::SendTerminate) {
            in.cause = "domain " + f.predicate;
            terminate_intention(c.a, in.id, Status::Unachievable, f, &c.out.events, c.env.tick);
            start_followup(c, in);
            return true;
        }
        return false;
    }
    if (!known) {
        bool send = false;
        switch (c.a.policy) {
        case Policy::Cautious: send = true; break;
        case Policy::Balanced: send = decide_termination_comm(tau, cost.Cmt, cost.Cc); break;
        case Policy::Reckless: send = cost.Cmt == Qual::High && tau != Qual::Zero; break;
        }
        if (send) {
            auto built = build_termination_message(c.a.id, in, *m.condition, f, *c.env.world, 0);
            for (const auto& w : built.warnings) c.trace("metric", "warning " + w);
            c.send(built.msg);
        }
        write_team(c, in, f);
    }
    if (in.status == Status::Establishing) set_status(c, in, Status::Active);
    Status s = m.category == Termination::Achieved ? Status::Achieved
               : m.category == Termination::Unachievable ? Status::Unachievable
                                                         : Status::Irrelevant;
    if (s == Status::Unachievable) in.cause = "domain " + f.predicate;
    terminate_intention(c.a, in.id, s, f, &c.out.events, c.env.tick);
    start_followup(c, in);
    return true;
}

inline void handle_fact(Ctx& c, const Fact& f, const std::optional<Qual>& tau_override) {
    note_failure_fact(c, f);
    for (int id : c.a.chain()) {
        auto* in = c.a.find(id);
        if (!in || terminal(in->status)) continue;
        auto m = match_termination_detail(f, *in->tpl);
        if (m.category == Termination::NoMatch) continue;
        if (in->status == Status::Establishing && m.category == Termination::Threat) continue;
        if (m.category == Termination::Threat) {
            discover(c, *in, f, m, tau_override);
            return;
        }
        discover(c, *in, f, m, tau_override);
        return;
    }
}

inline IntentionInstance* find_on_chain(Ctx& c, const std::string& tpl, const std::string& team) {
    for (int id : c.a.chain()) {
        auto* in = c.a.find(id);
        if (in->tpl->id == tpl && in->executor == team) return in;
    }
    return nullptr;
}

inline bool applicable(Ctx& c, const OperatorTemplate& t, const IntentionInstance* parent, std::string& exec) {
    try {
        exec = resolve_executor(t, parent, c.a);
    } catch (const ConfigError&) {
        return false;
    }
    if (exec == kUnassigned) return false;
    if (c.a.known_failed.count(exec) && exec != c.a.id) return false;
    return c.org().contains(exec, c.a.id);
}

inline IntentionInstance& adopt(Ctx& c, const TemplatePtr& t, IntentionInstance* parent) {
    IntentionInstance in;
    in.id = c.a.next_instance++;
    in.tpl = t;
    in.parent = parent ? parent->id : -1;
    in.executor = resolve_executor(*t, parent, c.a);
    in.team_op = c.org().is_team(in.executor);
    in.status = in.team_op ? Status::Establishing : Status::Active;
    in.roles = t->roles;
    auto ov = c.a.role_overrides.find(t->id);
    if (ov != c.a.role_overrides.end())
        for (auto& [r, e] : in.roles) {
            auto it = ov->second.find(r);
            if (it != ov->second.end()) e = it->second;
        }
    in.leader = in.team_op ? live_leader(c, in.executor, c.org().teams.at(in.executor).leader) : c.a.id;
    int id = in.id;
    c.a.intentions[id] = std::move(in);
    if (parent) parent->child = id;
    else c.a.root = id;
    return c.a.intentions[id];
}

// Advances through sole-choice children until `target` becomes a child
// of the deepest live node.  Returns that node or nullptr.
inline IntentionInstance* lookahead(Ctx& c, const std::string& target) {
    for (int depth = 0; depth < 4; ++depth) {
        auto ch = c.a.chain();
        if (ch.empty()) return nullptr;
        for (auto it = ch.rbegin(); it != ch.rend(); ++it) {
            auto* n = c.a.find(*it);
            const auto& kids = n->tpl->children;
            if (std::find(kids.begin(), kids.end(), target) != kids.end()) return n;
        }
        auto* deep = c.a.find(ch.back());
        if (deep->status != Status::Active || deep->child >= 0) return nullptr;
        std::vector<TemplatePtr> options;
        for (const auto& kid : deep->tpl->children) {
            const auto& t = c.org().tpl(kid);
            std::string exec;
            if (deep->closed_children.count(kid)) continue;
            if (applicable(c, *t, deep, exec)) options.push_back(t);
        }
        if (options.size() != 1) return nullptr;
        auto& in = adopt(c, options.front(), deep);
        in.status = Status::Active;
        c.trace("intention-change", status_line(in) + " lookahead");
    }
    return nullptr;
}

inline void send_confirm(Ctx& c, IntentionInstance& in) {
    Message m;
    m.kind = Message::Kind::Confirm;
    m.team = in.executor;
    m.op = in.tpl->id;
    m.cost_class = in.tpl->establish_class;
    c.send(m);
    in.confirms.insert(c.a.id);
    in.confirmed = true;
    in.confirm_tick = c.env.tick;
}

inline std::vector<std::string> subordinates(Ctx& c, const IntentionInstance& in) {
    std::vector<std::string> out;
    for (const auto& m : live_members(c, in.executor))
        if (m != in.leader) out.push_back(m);
    return out;
}

inline bool my_turn(Ctx& c, const IntentionInstance& in) {
    for (const auto& m : subordinates(c, in)) {
        if (m == c.a.id) return true;
        if (!in.confirms.count(m)) return false;
    }
    return true;
}

inline bool establishment_complete(Ctx& c, const IntentionInstance& in) {
    auto subs = subordinates(c, in);
    if (subs.empty()) return true;
    return in.confirms.count(subs.back()) > 0;
}

IntentionInstance& spawn_builtin(Ctx& c, OpKind kind, IntentionInstance& failed);

inline void handle_request(Ctx& c, const Message& m) {
    auto* in = find_on_chain(c, m.op, m.team);
    if (in) {
        if (in->status == Status::Establishing) {
            in->got_request = true;
            in->leader = m.sender;
            if (in->confirmed) send_confirm(c, *in);
            return;
        }
        if (!in->via_protocol && in->leader != c.a.id) {
            c.trace("repair", std::string("gamma-mismatch ") + to_string(Recovery::ReEstablish) + " " + m.op);
            auto* parent = c.a.find(in->parent);
            auto tpl = in->tpl;
            terminate_intention(c.a, in->id, Status::Irrelevant, std::nullopt, &c.out.events, c.env.tick);
            auto& fresh = adopt(c, tpl, parent);
            fresh.via_protocol = true;
            fresh.got_request = true;
            fresh.leader = m.sender;
            c.trace("intention-change", status_line(fresh));
            return;
        }
        if (in->confirmed && in->leader != c.a.id) send_confirm(c, *in);
        return;
    }
    if (c.a.finished_ops.count(key(m.op, m.team))) {
        // stale rebroadcast for an operator already behind us
        Message r;
        r.kind = Message::Kind::Confirm;
        r.team = m.team;
        r.op = m.op;
        c.send(r);
        return;
    }
    if (m.op == kRepair || m.op == kCompleteFailure) {
        // leader gave up on a team op we still hold; follow it into recovery
        IntentionInstance* held = nullptr;
        for (int id : c.a.chain()) {
            auto* n = c.a.find(id);
            if (n->team_op && n->executor == m.team && n->kind != OpKind::CompleteFailure) held = n;
        }
        if (!held) {
            c.trace("metric", "warning diverged on request " + m.op);
            return;
        }
        if (held->status == Status::Establishing) set_status(c, *held, Status::Active);
        held->cause = "domain no-confirm";
        terminate_intention(c.a, held->id, Status::Unachievable, std::nullopt, &c.out.events, c.env.tick);
        auto& in2 = spawn_builtin(c, m.op == kRepair ? OpKind::Repair : OpKind::CompleteFailure, *held);
        in2.via_protocol = true;
        in2.got_request = true;
        in2.leader = m.sender;
        c.trace("intention-change", status_line(in2));
        return;
    }
    IntentionInstance* parent = nullptr;
    for (int id : c.a.chain()) {
        auto* n = c.a.find(id);
        const auto& kids = n->tpl->children;
        if (std::find(kids.begin(), kids.end(), m.op) != kids.end()) parent = n;
    }
    if (!parent) {
        c.trace("repair", std::string("gamma-mismatch ") + to_string(Recovery::LookaheadCatchUp) + " " + m.op);
        parent = lookahead(c, m.op);
        if (!parent) {
            c.trace("metric", "warning diverged on request " + m.op);
            return;
        }
    }
    if (parent->status != Status::Active) return;
    const auto& t = c.org().tpl(m.op);
    std::string exec;
    if (!applicable(c, *t, parent, exec) || exec != m.team) return;
    if (parent->child >= 0) {
        auto* cur = c.a.find(parent->child);
        if (cur && cur->tpl->id != m.op) {
            c.trace("repair", "conform " + cur->tpl->id + " -> " + m.op);
            terminate_intention(c.a, cur->id, Status::Irrelevant, std::nullopt, &c.out.events, c.env.tick);
        }
    }
    auto& in2 = adopt(c, t, parent);
    in2.via_protocol = true;
    in2.got_request = true;
    in2.leader = m.sender;
    c.trace("intention-change", status_line(in2));
}

inline void handle_terminate(Ctx& c, const Message& m) {
    if (!m.fact) return;
    auto* in = find_on_chain(c, m.op, m.team);
    if (!in) {
        if (c.a.finished_ops.count(key(m.op, m.team))) return;
        c.trace("repair", std::string("gamma-mismatch ") + to_string(Recovery::LookaheadCatchUp) + " " + m.op);
        auto* parent = lookahead(c, m.op);
        if (!parent) return;
        const auto& t = c.org().tpl(m.op);
        std::string exec;
        if (!applicable(c, *t, parent, exec) || exec != m.team) return;
        if (parent->child >= 0) return;
        in = &adopt(c, t, parent);
        in->status = Status::Active;
        c.trace("intention-change", status_line(*in) + " lookahead");
    }
    auto match = match_termination_detail(*m.fact, *in->tpl);
    if (match.category == Termination::NoMatch) {
        c.trace("metric", "warning terminate without matching condition " + m.op);
        return;
    }
    write_team(c, *in, *m.fact);
    if (!m.elaborations.empty()) {
        std::vector<std::string> args{m.op};
        args.insert(args.end(), m.elaborations.begin(), m.elaborations.end());
        write_team(c, *in, Fact("info", args, m.sender));
    }
    if (in->status == Status::Establishing) set_status(c, *in, Status::Active);
    Status s = match.category == Termination::Achieved ? Status::Achieved
               : match.category == Termination::Irrelevant ? Status::Irrelevant
                                                           : Status::Unachievable;
    if (s == Status::Unachievable) in->cause = "domain " + m.fact->predicate;
    terminate_intention(c.a, in->id, s, *m.fact, &c.out.events, c.env.tick);
    start_followup(c, *in);
}

inline void apply_substitution(Ctx& c, const std::string& op, const std::string& role, const std::string& entity) {
    auto& ov = c.a.role_overrides[op];
    const auto& t = c.org().tpl(op);
    // the volunteer gives up whatever it held before
    for (const auto& [r, e] : t->roles) {
        std::string cur = ov.count(r) ? ov[r] : e;
        if (r != role && cur == entity) ov[r] = kUnassigned;
    }
    ov[role] = entity;
    c.trace("repair", "substitution " + op + " " + role + " " + entity);
}

inline void finish_repair(Ctx& c, IntentionInstance& rep, bool ok) {
    Fact f(ok ? "repaired" : "repair-failed", {rep.failed_template}, c.a.id);
    if (rep.team_op) write_team(c, rep, f);
    if (ok) {
        if (auto* p = c.a.find(rep.parent)) p->blocked_children.erase(rep.failed_template);
    } else {
        rep.cause = "domain no-repair";
    }
    terminate_intention(c.a, rep.id, ok ? Status::Achieved : Status::Unachievable,
                        rep.team_op ? std::optional<Fact>(f) : std::nullopt, &c.out.events, c.env.tick);
    if (!ok) start_followup(c, rep);
}

inline bool descends_from(Ctx& c, const std::string& ancestor, const std::string& op, int depth = 6) {
    if (depth == 0) return false;
    const auto& t = c.org().tpl(ancestor);
    for (const auto& kid : t->children)
        if (kid == op || descends_from(c, kid, op, depth - 1)) return true;
    return false;
}

// Traffic about a sub-operator shows the team got past establishment even
// if the last confirm never reached us.
inline void activate_on_evidence(Ctx& c, const Message& m) {
    for (int id : c.a.chain()) {
        auto* in = c.a.find(id);
        if (!in || in->status != Status::Establishing || !in->via_protocol || !in->confirmed) continue;
        if (in->leader == c.a.id || in->kind != OpKind::Normal) continue;
        if (m.op == in->tpl->id || !c.org().templates.count(m.op) || !descends_from(c, in->tpl->id, m.op)) continue;
        c.trace("repair", "evidence " + in->tpl->id + " from " + m.sender);
        set_status(c, *in, Status::Active);
        on_activated(c, id);
        return;
    }
}

// A member still establishing an operator we already ended is told how it ended.
inline bool answer_stale(Ctx& c, const Message& m) {
    if (m.kind != Message::Kind::Confirm && m.kind != Message::Kind::Request) return false;
    const auto k = key(m.op, m.team);
    auto it = c.a.finish_facts.find(k);
    if (it == c.a.finish_facts.end() || find_on_chain(c, m.op, m.team)) return false;
    if (!c.stale_replied.insert(k).second) return true;
    Message r;
    r.kind = Message::Kind::TerminateJPG;
    r.team = m.team;
    r.op = m.op;
    r.fact = it->second;
    r.cost_class = c.org().tpl(m.op)->establish_class;
    c.send(r);
    return true;
}

inline void handle_message(Ctx& c, const Message& m) {
    if (m.sender == c.a.id) return;
    if (!c.a.team_states.count(m.team)) return;
    if (m.fact) note_failure_fact(c, *m.fact);
    if (m.kind == Message::Kind::Confirm && answer_stale(c, m)) return;
    activate_on_evidence(c, m);
    switch (m.kind) {
    case Message::Kind::Request: handle_request(c, m); break;
    case Message::Kind::Confirm: {
        auto* in = find_on_chain(c, m.op, m.team);
        if (!in) break;
        bool repeat = in->confirms.count(m.sender) > 0;
        in->confirms.insert(m.sender);
        if (!repeat && in->status == Status::Establishing) {
            if (in->leader == c.a.id) {
                in->request_tick = c.env.tick;
                in->rebroadcasts = 0;
            } else if (in->confirmed) {
                in->confirm_tick = c.env.tick;
            }
        }
        // someone confirmed, so a request went out even if we missed it
        if (in->status == Status::Establishing && in->via_protocol && in->leader != c.a.id) in->got_request = true;
        // a member still waiting repeats its confirm; the last subordinate answers once it is done
        auto subs = subordinates(c, *in);
        bool last = !subs.empty() && subs.back() == c.a.id;
        if (repeat && last && in->status == Status::Active && in->confirmed && !c.confirm_replied.count(in->id) &&
            in->last_confirm_reply != c.env.tick) {
            c.confirm_replied.insert(in->id);
            in->last_confirm_reply = c.env.tick;
            send_confirm(c, *in);
        }
        break;
    }
    case Message::Kind::Refuse: {
        auto* in = find_on_chain(c, m.op, m.team);
        if (!in || in->status != Status::Establishing) break;
        Fact f("refused", {m.op, m.sender}, m.sender);
        write_team(c, *in, f);
        set_status(c, *in, Status::Active);
        in->cause = "domain refused";
        terminate_intention(c.a, in->id, Status::Unachievable, f, &c.out.events, c.env.tick);
        start_followup(c, *in);
        break;
    }
    case Message::Kind::TerminateJPG: handle_terminate(c, m); break;
    case Message::Kind::Threat: {
        auto* in = find_on_chain(c, m.op, m.team);
        if (in && in->team_op && m.fact) write_team(c, *in, *m.fact);
        break;
    }
    case Message::Kind::RoleSubstitution: {
        if (!m.fact || m.fact->args.size() < 2) break;
        apply_substitution(c, m.op, m.fact->args[0], m.fact->args[1]);
        for (int id : c.a.chain()) {
            auto* in = c.a.find(id);
            if (in->kind == OpKind::Repair && in->failed_template == m.op && in->status == Status::Active) {
                finish_repair(c, *in, true);
                break;
            }
        }
        break;
    }
    }
}

inline IntentionInstance& spawn_builtin(Ctx& c, OpKind kind, IntentionInstance& failed) {
    auto t = std::make_shared<OperatorTemplate>();
    t->id = kind == OpKind::Repair ? kRepair : kCompleteFailure;
    t->establish_class = t->id;
    if (kind == OpKind::CompleteFailure && !c.env.fallback.empty()) {
        const auto& fb = c.org().tpl(c.env.fallback);
        bool top = !failed.team_op || c.org().teams.at(failed.executor).parent.empty();
        if (top && failed.team_op) {
            t->children = {c.env.fallback};
            for (const auto& cond : fb->conditions)
                if (cond.category == Termination::Achieved) t->conditions.push_back(cond);
        }
    }
    IntentionInstance in;
    in.id = c.a.next_instance++;
    in.tpl = t;
    in.kind = kind;
    in.executor = failed.executor;
    in.team_op = failed.team_op;
    in.parent = failed.parent;
    in.failed_template = failed.kind == OpKind::Normal ? failed.tpl->id : failed.failed_template;
    in.failure = failed.failure;
    in.cause = failed.cause;
    in.roles = failed.roles;
    in.status = in.team_op ? Status::Establishing : Status::Active;
    in.leader = in.team_op ? live_leader(c, in.executor, c.org().teams.at(in.executor).leader) : c.a.id;
    int id = in.id;
    c.a.intentions[id] = std::move(in);
    if (auto* p = c.a.find(failed.parent)) p->child = id;
    else c.a.root = id;
    return c.a.intentions[id];
}

void begin_team_op(Ctx& c, IntentionInstance& in, const std::string& prior);

inline void start_followup(Ctx& c, IntentionInstance& failed) {
    if (failed.status != Status::Unachievable) {
        if (failed.kind == OpKind::CompleteFailure && failed.status == Status::Achieved) {
            c.a.finished = true;
            c.a.outcome = "complete-failure";
            c.trace("metric", "outcome complete-failure");
        }
        return;
    }
    IntentionInstance* next = nullptr;
    if (failed.kind == OpKind::Normal && failed.failure.kind != FailureClass::Kind::AllRoles) {
        next = &spawn_builtin(c, OpKind::Repair, failed);
    } else if (failed.kind != OpKind::CompleteFailure) {
        next = &spawn_builtin(c, OpKind::CompleteFailure, failed);
    } else {
        c.a.finished = true;
        c.a.outcome = "complete-failure";
        c.trace("metric", "outcome complete-failure");
        return;
    }
    c.trace("repair", std::string(next->kind == OpKind::Repair ? "repair " : "complete-failure ") +
                          next->failed_template + " cause=" + (failed.cause.empty() ? "-" : failed.cause));
    if (next->team_op) {
        begin_team_op(c, *next, failed.executor);
    } else {
        c.trace("intention-change", status_line(*next));
    }
}

inline bool want_establish(Ctx& c, const IntentionInstance& in, Qual gamma) {
    if (subordinates(c, in).empty()) return false;
    const auto& cost = c.cost(in.tpl->establish_class);
    switch (c.a.policy) {
    case Policy::Cautious: return true;
    case Policy::Balanced: return decide_establish_comm(gamma, cost.Cme, cost.Cc);
    case Policy::Reckless: return cost.Cme == Qual::High;
    }
    return false;
}

inline void begin_team_op(Ctx& c, IntentionInstance& in, const std::string& prior) {
    Qual gamma = estimate_gamma(in.chose_at_random, prior, in.executor, c.org());
    if (want_establish(c, in, gamma)) {
        in.via_protocol = true;
        c.trace("intention-change", status_line(in) + " gamma=" + to_string(gamma));
        if (in.leader == c.a.id) {
            Message m;
            m.kind = Message::Kind::Request;
            m.team = in.executor;
            m.op = in.tpl->id;
            m.cost_class = in.tpl->establish_class;
            c.send(m);
            in.request_tick = c.env.tick;
        }
        return;
    }
    in.status = Status::Active;
    c.trace("intention-change", status_line(in) + " gamma=" + to_string(gamma));
    on_activated(c, in.id);
}

inline void on_activated(Ctx& c, int id) {
    auto* in = c.a.find(id);
    if (!in) return;
    // facts believed before the operator started
    std::vector<Fact> known(c.a.private_beliefs.begin(), c.a.private_beliefs.end());
    for (const auto& f : known) {
        in = c.a.find(id);
        if (!in || terminal(in->status)) return;
        auto m = match_termination_detail(f, *in->tpl);
        if (m.category == Termination::NoMatch || m.category == Termination::Threat) continue;
        discover(c, *in, f, m, std::nullopt);
        return;
    }
    if (in->team_op && c.a.team_states.count(in->executor)) {
        std::vector<Fact> shared(c.a.team_states.at(in->executor).beliefs.begin(),
                                 c.a.team_states.at(in->executor).beliefs.end());
        for (const auto& f : shared) {
            in = c.a.find(id);
            if (!in || terminal(in->status)) return;
            auto m = match_termination_detail(f, *in->tpl);
            if (m.category == Termination::NoMatch || m.category == Termination::Threat) continue;
            discover(c, *in, f, m, std::nullopt);
            return;
        }
    }
}

inline void check_constraints(Ctx& c) {
    for (int id : c.a.chain()) {
        auto* in = c.a.find(id);
        if (!in || in->status != Status::Active || !in->tpl->constraint || in->kind != OpKind::Normal) continue;
        auto st = infer_role_status(in->roles, c.a.known_failed, c.org().membership());
        for (const auto& r : in->tpl->constraint->roles())
            if (!st.count(r)) st[r] = RoleState::Unassigned;
        auto v = evaluate_constraint(*in->tpl->constraint, st);
        if (v.satisfied) continue;
        in->failure = v.cls;
        in->cause = "constraint " + v.cls.str();
        Fact f("constraint-failed", {in->tpl->id}, c.a.id);
        if (in->team_op) write_team(c, *in, f);
        terminate_intention(c.a, in->id, Status::Unachievable, in->team_op ? std::optional<Fact>(f) : std::nullopt,
                            &c.out.events, c.env.tick);
        start_followup(c, *in);
        return;
    }
}

inline std::vector<TemplatePtr> candidates(Ctx& c, IntentionInstance* parent) {
    std::vector<TemplatePtr> out;
    auto beliefs = visible_beliefs(c.a);
    const std::vector<std::string>* kids = parent ? &parent->tpl->children : &c.env.roots;
    for (const auto& kid : *kids) {
        const auto& t = c.org().tpl(kid);
        if (parent && (parent->closed_children.count(kid) || parent->blocked_children.count(kid))) continue;
        std::string exec;
        if (!applicable(c, *t, parent, exec)) continue;
        // the fallback of a complete failure is forced
        bool forced = parent && parent->kind == OpKind::CompleteFailure;
        if (!forced && !preconditions_hold(*t, beliefs)) continue;
        out.push_back(t);
    }
    return out;
}

inline void run_repair(Ctx& c, IntentionInstance& rep) {
    auto* parent = c.a.find(rep.parent);
    const auto& cause = rep.cause;
    if (cause.rfind("constraint", 0) != 0) {
        int& tries = c.a.no_confirm_retries[key(rep.failed_template, rep.executor)];
        bool retry = cause == "domain no-confirm" && tries < 2;
        if (retry) {
            tries++;
            finish_repair(c, rep, true);
            return;
        }
        bool other = false;
        if (parent)
            for (const auto& t : candidates(c, parent))
                if (t->id != rep.failed_template) other = true;
        finish_repair(c, rep, other);
        return;
    }
    const auto& tpl = c.org().tpl(rep.failed_template);
    if (!tpl->constraint) {
        finish_repair(c, rep, false);
        return;
    }
    std::string role;
    std::set<std::string> causes;
    auto binding = [&](const std::string& r) {
        for (const auto& [rr, e] : rep.roles)
            if (rr == r) return e;
        return std::string(kUnassigned);
    };
    bool dependency = rep.failure.kind == FailureClass::Kind::RoleDependency;
    role = dependency ? rep.failure.provider : rep.failure.role;
    std::string bound = binding(role);
    if (bound != kUnassigned) causes.insert(bound);

    auto st = infer_role_status(rep.roles, c.a.known_failed, c.org().membership());
    for (const auto& r : tpl->constraint->roles())
        if (!st.count(r)) st[r] = RoleState::Unassigned;
    st[role] = RoleState::Performing;  // hypothetically repaired

    std::vector<RepairCandidate> cands;
    auto add = [&](const std::string& id) {
        if (c.a.known_failed.count(id)) return;
        if (c.org().is_team(id)) {
            auto live = live_members(c, id);
            if (live.empty()) return;
        }
        RepairCandidate rc;
        rc.id = id;
        auto cap = c.org().capabilities.find(id);
        if (cap != c.org().capabilities.end()) rc.capabilities = cap->second;
        for (const auto& [r, e] : rep.roles)
            if (e == id && r != role && st.count(r) && role_is_critical(*tpl->constraint, st, r))
                rc.critical_commitment = true;
        cands.push_back(rc);
    };
    const auto& team = c.org().teams.at(rep.executor);
    for (const auto& s : team.subteams) add(s);
    for (const auto& m : team.members) add(m);

    RepairOutcome res = dependency ? repair_dependency(role, bound, cands) : RepairOutcome{};
    if (!res.found) res = repair_critical_role(role, cands, causes);
    if (!res.found) {
        c.trace("repair", "no-candidate " + rep.failed_template + " " + role);
        finish_repair(c, rep, false);
        return;
    }
    std::string volunteer = c.org().is_team(res.entity)
                                ? live_leader(c, res.entity, c.org().teams.at(res.entity).leader)
                                : res.entity;
    if (volunteer == c.a.id && !rep.substitution_sent) {
        Message m;
        m.kind = Message::Kind::RoleSubstitution;
        m.team = rep.executor;
        m.op = rep.failed_template;
        m.fact = Fact("role", {role, res.entity}, c.a.id);
        m.cost_class = kRepair;
        rep.substitution_sent = true;
        c.send(m);
        apply_substitution(c, rep.failed_template, role, res.entity);
        finish_repair(c, rep, true);
    }
    // others wait for the announcement
}

inline void run_complete_failure(Ctx& c, IntentionInstance& cf) {
    if (!cf.tpl->children.empty()) return;  // top-level: runs the fallback child
    Fact f("inability", {cf.executor}, c.a.id);
    c.a.known_failed.insert(cf.executor);
    if (cf.team_op) write_team(c, cf, f);
    std::string parent_team = cf.team_op ? c.org().teams.at(cf.executor).parent : std::string();
    if (parent_team.empty()) {
        for (const auto& [tid, ts] : c.a.team_states)
            if (tid != cf.executor && std::find(ts.members.begin(), ts.members.end(), c.a.id) != ts.members.end())
                parent_team = tid;
    }
    if (!parent_team.empty() && (!cf.team_op || cf.leader == c.a.id)) {
        Message m;
        m.kind = Message::Kind::Threat;
        m.team = parent_team;
        m.op = cf.failed_template;
        m.fact = f;
        m.cost_class = kCompleteFailure;
        c.send(m);
    }
    terminate_intention(c.a, cf.id, Status::Achieved, cf.team_op ? std::optional<Fact>(f) : std::nullopt,
                        &c.out.events, c.env.tick);
    c.a.finished = true;
    c.a.outcome = "complete-failure";
    c.trace("metric", "outcome complete-failure");
}

inline void protocol_tick(Ctx& c, IntentionInstance& in) {
    if (in.status != Status::Establishing || !in.via_protocol) return;
    in.leader = live_leader(c, in.executor, in.leader);
    if (in.leader == c.a.id) {
        if (establishment_complete(c, in)) {
            set_status(c, in, Status::Active);
            on_activated(c, in.id);
            return;
        }
        if (in.request_tick < 0 || c.env.tick - in.request_tick >= c.env.timeout) {
            if (in.request_tick >= 0 && in.rebroadcasts >= c.env.max_rebroadcast) {
                Fact f("no-confirm", {in.tpl->id}, c.a.id);
                write_team(c, in, f);
                set_status(c, in, Status::Active);
                in.cause = "domain no-confirm";
                terminate_intention(c.a, in.id, Status::Unachievable, f, &c.out.events, c.env.tick);
                start_followup(c, in);
                return;
            }
            if (in.request_tick >= 0) in.rebroadcasts++;
            Message m;
            m.kind = Message::Kind::Request;
            m.team = in.executor;
            m.op = in.tpl->id;
            m.cost_class = in.tpl->establish_class;
            c.send(m);
            in.request_tick = c.env.tick;
        }
        return;
    }
    if (!in.got_request) {
        // a leader that missed how the previous sibling ended never asks; remind it
        if (in.waiting_since < 0) in.waiting_since = c.env.tick;
        auto* parent = c.a.find(in.parent);
        if (parent && !parent->last_child_tpl.empty() && in.nudges < c.env.max_rebroadcast &&
            c.env.tick - in.waiting_since >= c.env.timeout * (in.nudges + 1)) {
            auto it = c.a.finish_facts.find(key(parent->last_child_tpl, parent->last_child_executor));
            if (it != c.a.finish_facts.end() && c.org().is_team(parent->last_child_executor)) {
                in.nudges++;
                Message m;
                m.kind = Message::Kind::TerminateJPG;
                m.team = parent->last_child_executor;
                m.op = parent->last_child_tpl;
                m.fact = it->second;
                m.cost_class = in.tpl->establish_class;
                c.send(m);
            }
        }
    }
    if (in.got_request && !in.confirmed && my_turn(c, in)) send_confirm(c, in);
    if (in.confirmed && establishment_complete(c, in)) {
        set_status(c, in, Status::Active);
        on_activated(c, in.id);
        return;
    }
    if (in.confirmed && c.env.tick - in.confirm_tick >= c.env.timeout) {
        if (in.confirm_retries < c.env.max_rebroadcast) {
            in.confirm_retries++;
            send_confirm(c, in);
            return;
        }
        // the leader asked and we answered; the rest of the replies went missing
        c.trace("repair", "assume-established " + in.tpl->id);
        set_status(c, in, Status::Active);
        on_activated(c, in.id);
    }
}

inline void act(Ctx& c) {
    auto ch = c.a.chain();
    for (int id : ch) {
        auto* in = c.a.find(id);
        if (!in || terminal(in->status)) continue;
        if (in->status == Status::Establishing) {
            protocol_tick(c, *in);
            continue;
        }
        in->active_ticks++;
        if (in->kind == OpKind::Repair) {
            run_repair(c, *in);
            return;
        }
        if (in->kind == OpKind::CompleteFailure) {
            run_complete_failure(c, *in);
            if (c.a.finished) return;
        }
    }
    ch = c.a.chain();
    if (ch.empty()) return;
    auto* leaf = c.a.find(ch.back());
    if (leaf->status != Status::Active || !leaf->tpl->is_leaf() || leaf->kind != OpKind::Normal) return;
    if (!leaf->action_started) {
        leaf->action_started = true;
        c.trace("intention-change", "action " + leaf->tpl->id);
    }
    const auto& eff = leaf->tpl->effect;
    if (!eff || leaf->effect_done || leaf->active_ticks < eff->after) return;
    leaf->effect_done = true;
    WorldAction wa;
    wa.move_to = eff->move_to;
    bool origin = true;
    if (eff->origin_leader) {
        origin = false;
        for (auto it = ch.rbegin(); it != ch.rend(); ++it) {
            auto* t = c.a.find(*it);
            if (t->team_op) {
                origin = live_leader(c, t->executor, t->leader) == c.a.id;
                break;
            }
        }
        if (ch.size() == 1 || std::none_of(ch.begin(), ch.end(), [&](int x) { return c.a.find(x)->team_op; }))
            origin = true;
    }
    if (origin) {
        wa.fact = eff->fact;
        wa.location_visible = eff->location_visible;
    }
    if (wa.fact || !wa.move_to.empty()) c.out.actions.push_back(wa);
}

inline void select_child(Ctx& c) {
    auto ch = c.a.chain();
    IntentionInstance* parent = nullptr;
    if (!ch.empty()) {
        parent = c.a.find(ch.back());
        if (parent->status != Status::Active || parent->tpl->is_leaf()) return;
        if (parent->kind == OpKind::Repair) return;
    } else if (c.a.root >= 0) {
        // a repaired top-level operator is re-selected from the roots
        const auto* r = c.a.find(c.a.root);
        if (!(r && r->kind == OpKind::Repair && r->status == Status::Achieved)) return;
    }
    auto cands = candidates(c, parent);
    if (cands.empty()) return;
    bool random = false;
    auto pick = select_best(cands, c.a.rng, random);
    auto& in = adopt(c, pick, parent);
    in.chose_at_random = random;
    if (in.team_op) {
        begin_team_op(c, in, parent ? parent->last_child_executor : std::string());
    } else {
        c.trace("intention-change", status_line(in));
        on_activated(c, in.id);
    }
}

}  // namespace engine_detail

// One tick for one agent: inbox, percepts, constraints, actions, child selection.
inline StepResult step_agent(AgentState& agent, const std::vector<Message>& inbox,
                             const std::vector<Percept>& percepts, const Env& env) {
    StepResult out;
    if (!agent.alive) return out;
    engine_detail::Ctx c{agent, env, out, false, {}, {}};
    if (agent.finished) {
        for (const auto& m : inbox)
            if (m.sender != agent.id && agent.team_states.count(m.team)) engine_detail::answer_stale(c, m);
        return out;
    }
    for (const auto& m : inbox) {
        try {
            engine_detail::handle_message(c, m);
        } catch (const ConfigError& e) {
            c.trace("metric", std::string("warning dropped message: ") + e.what());
        }
    }
    for (const auto& p : percepts) {
        agent.private_beliefs.insert(p.fact);
        if (!agent.provenance.count(p.fact)) agent.provenance[p.fact] = p.provenance;
        engine_detail::handle_fact(c, p.fact, p.tau_override);
        if (agent.finished) return out;
    }
    engine_detail::check_constraints(c);
    if (!agent.finished) engine_detail::act(c);
    if (!agent.finished && !c.comm_pending) engine_detail::select_child(c);
    if (!agent.finished && agent.root >= 0) {
        const auto* r = agent.find(agent.root);
        if (r && r->status == Status::Achieved && r->kind == OpKind::Normal) {
            // reaching the goal through a complete-failure fallback is still a failure
            bool fell_back = std::any_of(agent.intentions.begin(), agent.intentions.end(),
                                         [](const auto& kv) { return kv.second.kind == OpKind::CompleteFailure; });
            agent.finished = true;
            agent.outcome = fell_back ? "complete-failure" : "success";
            c.trace("metric", "outcome " + agent.outcome);
        }
    }
    return out;
}

}  // namespace steam
