// Messages, qualitative decision rules, parameter estimation and the
// helpers behind the establish-commitments protocol.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steam/kernel.hpp"

namespace steam {

struct Message {
    enum class Kind { Request, Confirm, Refuse, TerminateJPG, Threat, RoleSubstitution };
    Kind kind = Kind::Request;
    std::string sender;
    std::string team;
    std::string op;
    std::optional<Fact> fact;
    std::vector<std::string> elaborations;
    int seq = 0;
    std::string cost_class;  // bookkeeping only, not on the wire
};

inline const char* to_string(Message::Kind k) {
    switch (k) {
    case Message::Kind::Request: return "request";
    case Message::Kind::Confirm: return "confirm";
    case Message::Kind::Refuse: return "refuse";
    case Message::Kind::TerminateJPG: return "terminate-JPG";
    case Message::Kind::Threat: return "threat";
    case Message::Kind::RoleSubstitution: return "role-substitution";
    }
    return "?";
}

inline std::optional<Message::Kind> parse_kind(const std::string& s) {
    for (auto k : {Message::Kind::Request, Message::Kind::Confirm, Message::Kind::Refuse,
                   Message::Kind::TerminateJPG, Message::Kind::Threat, Message::Kind::RoleSubstitution})
        if (s == to_string(k)) return k;
    return std::nullopt;
}

inline std::string to_wire(const Message& m) {
    std::string s = m.sender + " " + to_string(m.kind) + " " + m.op;
    if (m.fact) s += " " + m.fact->str();
    if (!m.elaborations.empty()) {
        s += " elaborations";
        for (const auto& e : m.elaborations) s += " " + e;
    }
    return s + " seq=" + std::to_string(m.seq);
}

// Team is not carried on the wire; callers fill it from context.
inline std::optional<Message> from_wire(const std::string& line) {
    auto w = split_ws(line);
    if (w.size() < 4) return std::nullopt;
    Message m;
    m.sender = w[0];
    auto k = parse_kind(w[1]);
    if (!k) return std::nullopt;
    m.kind = *k;
    m.op = w[2];
    const std::string& last = w.back();
    if (last.rfind("seq=", 0) != 0) return std::nullopt;
    try {
        m.seq = std::stoi(last.substr(4));
    } catch (...) {
        return std::nullopt;
    }
    std::size_t i = 3, end = w.size() - 1;
    std::vector<std::string> fact;
    while (i < end && w[i] != "elaborations") fact.push_back(w[i++]);
    if (!fact.empty()) m.fact = Fact(fact[0], std::vector<std::string>(fact.begin() + 1, fact.end()), m.sender);
    if (i < end) m.elaborations.assign(w.begin() + static_cast<long>(i) + 1, w.begin() + static_cast<long>(end));
    return m;
}

// ---------------------------------------------------------------- qualitative algebra

// Product of a probability level (row) and a cost level (column).
// Each entry is the bucket of p*c with p in {0,.1,.5,.9}, c in {0,1,5,25}
// against the cost thresholds 0/1/5/25.
inline Qual qual_mul(Qual prob, Qual cost) {
    static constexpr int table[4][4] = {
        {0, 0, 0, 0},
        {0, 1, 1, 2},
        {0, 1, 2, 3},
        {0, 1, 2, 3},
    };
    return qual_from_index(table[idx(prob)][idx(cost)]);
}

// 1 - p on the probability scale.
inline Qual qual_complement(Qual p) {
    static constexpr int table[4] = {3, 3, 2, 0};
    return qual_from_index(table[idx(p)]);
}

inline Qual qual_max(Qual a, Qual b) { return idx(a) >= idx(b) ? a : b; }

inline bool decide_termination_comm(Qual tau, Qual Cmt, Qual Cc) {
    return idx(qual_mul(tau, Cmt)) > idx(Cc);
}

inline bool decide_establish_comm(Qual gamma, Qual Cme, Qual Cc) {
    return idx(qual_mul(gamma, Cme)) > idx(Cc);
}

enum class ExtendedDecision { SendTerminate, SendThreat, Silent };

inline const char* to_string(ExtendedDecision d) {
    switch (d) {
    case ExtendedDecision::SendTerminate: return "terminate";
    case ExtendedDecision::SendThreat: return "threat";
    case ExtendedDecision::Silent: return "silent";
    }
    return "?";
}

inline ExtendedDecision decide_extended(Qual delta, Qual tau, Qual Cmt, Qual Cc, Qual Cn) {
    const bool worth = decide_termination_comm(tau, Cmt, Cc);
    if (delta == Qual::High) return worth ? ExtendedDecision::SendTerminate : ExtendedDecision::Silent;
    Qual lhs = qual_mul(delta, qual_mul(tau, Cmt));
    Qual rhs = qual_max(Cc, qual_mul(qual_complement(delta), Cn));
    if (idx(lhs) > idx(rhs)) return ExtendedDecision::SendTerminate;
    if (worth) return ExtendedDecision::SendThreat;
    return ExtendedDecision::Silent;
}

// ---------------------------------------------------------------- estimation

// prior_executor: executing agent of the preceding operator under the same
// parent, empty when the operator is the first one in its subgoal.
inline Qual estimate_gamma(bool chose_at_random, const std::string& prior_executor, const std::string& team,
                           const Org& org) {
    if (chose_at_random) return Qual::High;
    if (prior_executor.empty()) return Qual::Low;
    if (prior_executor == team) return Qual::Low;
    auto members_of = [&](const std::string& e) -> std::set<std::string> {
        auto it = org.teams.find(e);
        if (it == org.teams.end()) return {e};
        return {it->second.members.begin(), it->second.members.end()};
    };
    auto prior = members_of(prior_executor);
    auto cur = members_of(team);
    bool cur_in_prior = std::includes(prior.begin(), prior.end(), cur.begin(), cur.end());
    if (cur_in_prior) return Qual::Low;
    bool prior_in_cur = std::includes(cur.begin(), cur.end(), prior.begin(), prior.end());
    if (prior_in_cur) return Qual::High;
    return Qual::Low;
}

struct TauInputs {
    int team_alive = 1;
    Provenance provenance = Provenance::Location;
    bool colocated_all = true;
    bool poor_visibility = false;
    std::optional<Qual> channel_override;
};

inline Qual estimate_tau(const TauInputs& in) {
    if (in.team_alive <= 1) return Qual::Zero;
    if (in.channel_override) return *in.channel_override;
    switch (in.provenance) {
    case Provenance::PrivateChannel:
    case Provenance::Own: return Qual::High;
    case Provenance::SharedChannel: return Qual::Low;
    case Provenance::Location:
        if (in.poor_visibility) return Qual::High;
        return in.colocated_all ? Qual::Low : Qual::Medium;
    case Provenance::Message: return Qual::Medium;
    }
    return Qual::Medium;
}

inline Qual estimate_delta(Termination match, const std::optional<RoleConstraint>& constraint, int performing) {
    switch (match) {
    case Termination::Achieved:
    case Termination::Unachievable:
    case Termination::Irrelevant: return Qual::High;
    case Termination::Threat:
        if (!constraint) return Qual::Low;
        if (constraint->kind == RoleConstraint::Kind::Or) return performing <= 2 ? Qual::Medium : Qual::Low;
        if (constraint->kind == RoleConstraint::Kind::And) return Qual::High;
        return Qual::Low;
    case Termination::NoMatch: return Qual::Low;
    }
    return Qual::Low;
}

// ---------------------------------------------------------------- termination message

using WorldView = std::map<std::string, std::map<std::string, std::string>>;  // object -> field -> value

struct BuiltMessage {
    Message msg;
    std::vector<std::string> warnings;
};

// Fields are "obj.field" or a bare field looked up on the objects the fact names.
inline BuiltMessage build_termination_message(const std::string& sender, const IntentionInstance& in,
                                              const TermCondition& cond, const Fact& f, const WorldView& world,
                                              int seq) {
    BuiltMessage out;
    out.msg.kind = Message::Kind::TerminateJPG;
    out.msg.sender = sender;
    out.msg.team = in.executor;
    out.msg.op = in.tpl->id;
    out.msg.fact = f;
    out.msg.seq = seq;
    out.msg.cost_class = cond.cost_class;
    auto it = in.tpl->info_dependency.find(cond.id);
    if (it == in.tpl->info_dependency.end()) return out;
    for (const auto& field : it->second) {
        std::optional<std::string> value;
        auto dot = field.find('.');
        if (dot != std::string::npos) {
            auto o = world.find(field.substr(0, dot));
            if (o != world.end()) {
                auto v = o->second.find(field.substr(dot + 1));
                if (v != o->second.end()) value = v->second;
            }
        } else {
            for (const auto& a : f.args) {
                auto o = world.find(a);
                if (o == world.end()) continue;
                auto v = o->second.find(field);
                if (v != o->second.end()) {
                    value = v->second;
                    break;
                }
            }
        }
        if (!value) {
            out.warnings.push_back("elaboration field '" + field + "' missing for " + in.tpl->id);
            value = "?";
        }
        out.msg.elaborations.push_back(*value);
    }
    return out;
}

// ---------------------------------------------------------------- gamma mismatch

enum class Recovery { ReEstablish, LookaheadCatchUp, None };

inline const char* to_string(Recovery r) {
    switch (r) {
    case Recovery::ReEstablish: return "re-establish";
    case Recovery::LookaheadCatchUp: return "lookahead";
    case Recovery::None: return "none";
    }
    return "?";
}

struct MismatchEvent {
    Message::Kind kind = Message::Kind::Request;
    bool op_active_without_protocol = false;  // agent skipped establishment for the named op
    bool op_unreached = false;                // named op is not on the agent's chain yet
};

inline Recovery recover_gamma_mismatch(const MismatchEvent& e) {
    if (e.kind == Message::Kind::Request && e.op_active_without_protocol) return Recovery::ReEstablish;
    if (e.op_unreached && e.kind != Message::Kind::Confirm && e.kind != Message::Kind::Refuse)
        return Recovery::LookaheadCatchUp;
    return Recovery::None;
}

}  // namespace steam
