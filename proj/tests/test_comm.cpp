#include <gtest/gtest.h>

#include <array>

#include "oracles.hpp"
#include "steam/comm.hpp"

using namespace steam;
using namespace steam::oracle;

namespace {

const std::array<Qual, 4> kAll = {Qual::Zero, Qual::Low, Qual::Medium, Qual::High};

Org nested_org() {
    Org o;
    o.agents = {"a1", "a2", "a3", "a4"};
    o.teams["company"] = {"company", "", "a1", {"a1", "a2", "a3", "a4"}, {"A", "B"}, {}, 1};
    o.teams["A"] = {"A", "company", "a1", {"a1", "a3"}, {}, {}, 2};
    o.teams["B"] = {"B", "company", "a2", {"a2", "a4"}, {}, {}, 2};
    return o;
}

}  // namespace

TEST(QualMul, AnchorCases) {
    EXPECT_EQ(qual_mul(Qual::Low, Qual::High), Qual::Medium);
    EXPECT_EQ(qual_mul(Qual::Zero, Qual::High), Qual::Zero);
    for (auto q : kAll) {
        EXPECT_EQ(qual_mul(Qual::Zero, q), Qual::Zero);
        EXPECT_EQ(qual_mul(q, Qual::Zero), Qual::Zero);
    }
}

TEST(QualMul, MonotoneInBothArguments) {
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            if (a < 3) {
                EXPECT_LE(idx(qual_mul(kAll[a], kAll[b])), idx(qual_mul(kAll[a + 1], kAll[b])));
            }
            if (b < 3) {
                EXPECT_LE(idx(qual_mul(kAll[a], kAll[b])), idx(qual_mul(kAll[a], kAll[b + 1])));
            }
        }
}

TEST(QualMul, ComplementAndMax) {
    EXPECT_EQ(qual_complement(Qual::High), Qual::Zero);
    EXPECT_EQ(qual_complement(Qual::Zero), Qual::High);
    for (auto a : kAll)
        for (auto b : kAll) EXPECT_EQ(idx(qual_max(a, b)), std::max(idx(a), idx(b)));
}

TEST(DecideTermination, Examples) {
    EXPECT_FALSE(decide_termination_comm(Qual::Low, Qual::Low, Qual::Low));
    EXPECT_TRUE(decide_termination_comm(Qual::Low, Qual::High, Qual::Low));
    EXPECT_FALSE(decide_termination_comm(Qual::Zero, Qual::High, Qual::Low));
}

TEST(DecideTermination, AgreesWithNumericOracle) {
    int n = 0;
    for (auto t : kAll)
        for (auto c : kAll)
            for (auto cc : kAll) {
                EXPECT_EQ(decide_termination_comm(t, c, cc), numeric_send(t, c, cc))
                    << to_string(t) << " " << to_string(c) << " " << to_string(cc);
                ++n;
            }
    EXPECT_EQ(n, 64);
}

TEST(DecideEstablish, ExamplesAndOracle) {
    EXPECT_TRUE(decide_establish_comm(Qual::High, Qual::High, Qual::Low));
    EXPECT_FALSE(decide_establish_comm(Qual::Low, Qual::Low, Qual::Medium));
    for (auto g : kAll)
        for (auto c : kAll)
            for (auto cc : kAll) EXPECT_EQ(decide_establish_comm(g, c, cc), numeric_send(g, c, cc));
}

TEST(Decide, Monotonicity) {
    for (int t = 0; t < 4; ++t)
        for (int c = 0; c < 4; ++c)
            for (int cc = 0; cc < 4; ++cc) {
                bool here = decide_termination_comm(kAll[t], kAll[c], kAll[cc]);
                bool est = decide_establish_comm(kAll[t], kAll[c], kAll[cc]);
                if (cc < 3) {
                    EXPECT_TRUE(here || !decide_termination_comm(kAll[t], kAll[c], kAll[cc + 1]));
                    EXPECT_TRUE(est || !decide_establish_comm(kAll[t], kAll[c], kAll[cc + 1]));
                }
                if (t < 3) {
                    EXPECT_TRUE(!here || decide_termination_comm(kAll[t + 1], kAll[c], kAll[cc]));
                    EXPECT_TRUE(!est || decide_establish_comm(kAll[t + 1], kAll[c], kAll[cc]));
                }
                if (c < 3) {
                    EXPECT_TRUE(!here || decide_termination_comm(kAll[t], kAll[c + 1], kAll[cc]));
                    EXPECT_TRUE(!est || decide_establish_comm(kAll[t], kAll[c + 1], kAll[cc]));
                }
            }
}

TEST(DecideExtended, Examples) {
    EXPECT_EQ(decide_extended(Qual::High, Qual::Low, Qual::High, Qual::Low, Qual::Low), ExtendedDecision::SendTerminate);
    EXPECT_EQ(decide_extended(Qual::Low, Qual::Low, Qual::High, Qual::Low, Qual::High), ExtendedDecision::SendThreat);
    for (auto t : kAll)
        for (auto cn : kAll)
            EXPECT_EQ(decide_extended(Qual::Low, t, Qual::Low, Qual::Low, cn), ExtendedDecision::Silent);
}

TEST(DecideExtended, CertainDeltaReducesToTermination) {
    for (auto t : kAll)
        for (auto c : kAll)
            for (auto cc : kAll)
                for (auto cn : kAll) {
                    auto d = decide_extended(Qual::High, t, c, cc, cn);
                    EXPECT_NE(d, ExtendedDecision::SendThreat);
                    EXPECT_EQ(d == ExtendedDecision::SendTerminate, decide_termination_comm(t, c, cc));
                }
}

// In these four cells the numeric left side (1.25 or 6.25) clears Cc but not
// Cc plus the nuisance term; the qualitative nuisance term rounds down to Cc.
TEST(DecideExtended, OracleDisagreementsAreTheKnownFour) {
    std::vector<std::string> bad;
    int n = 0;
    for (auto d : kAll)
        for (auto t : kAll)
            for (auto c : kAll)
                for (auto cc : kAll)
                    for (auto cn : kAll) {
                        ++n;
                        if (decide_extended(d, t, c, cc, cn) != numeric_extended(d, t, c, cc, cn))
                            bad.push_back(std::string(to_string(d)) + "," + to_string(t) + "," + to_string(c) + "," +
                                          to_string(cc) + "," + to_string(cn));
                    }
    EXPECT_EQ(n, 1024);
    EXPECT_EQ(bad, (std::vector<std::string>{"low,medium,high,low,low", "medium,low,high,low,low",
                                             "medium,medium,medium,low,low", "medium,medium,high,medium,medium"}));
}

TEST(EstimateGamma, Rules) {
    Org o = nested_org();
    EXPECT_EQ(estimate_gamma(true, "company", "company", o), Qual::High);
    EXPECT_EQ(estimate_gamma(false, "", "company", o), Qual::Low);
    EXPECT_EQ(estimate_gamma(false, "company", "company", o), Qual::Low);
    EXPECT_EQ(estimate_gamma(false, "company", "A", o), Qual::Low);
    EXPECT_EQ(estimate_gamma(false, "B", "company", o), Qual::High);
    EXPECT_EQ(estimate_gamma(false, "a2", "company", o), Qual::High);
}

TEST(EstimateTau, Rules) {
    TauInputs in;
    in.team_alive = 1;
    EXPECT_EQ(estimate_tau(in), Qual::Zero);
    in.team_alive = 4;
    EXPECT_EQ(estimate_tau(in), Qual::Low);
    in.colocated_all = false;
    EXPECT_EQ(estimate_tau(in), Qual::Medium);
    in.poor_visibility = true;
    EXPECT_EQ(estimate_tau(in), Qual::High);
    in = TauInputs{};
    in.team_alive = 4;
    in.provenance = Provenance::PrivateChannel;
    EXPECT_EQ(estimate_tau(in), Qual::High);
    in.provenance = Provenance::SharedChannel;
    EXPECT_EQ(estimate_tau(in), Qual::Low);
    in.channel_override = Qual::Medium;
    EXPECT_EQ(estimate_tau(in), Qual::Medium);
    in.team_alive = 1;
    EXPECT_EQ(estimate_tau(in), Qual::Zero);
}

TEST(EstimateDelta, Rules) {
    auto orc = RoleConstraint::any({RoleConstraint::leaf("a"), RoleConstraint::leaf("b")});
    auto andc = RoleConstraint::all({RoleConstraint::leaf("a"), RoleConstraint::leaf("b")});
    for (auto t : {Termination::Achieved, Termination::Unachievable, Termination::Irrelevant})
        EXPECT_EQ(estimate_delta(t, std::nullopt, 4), Qual::High);
    EXPECT_EQ(estimate_delta(Termination::Threat, orc, 6), Qual::Low);
    EXPECT_EQ(estimate_delta(Termination::Threat, orc, 2), Qual::Medium);
    EXPECT_EQ(estimate_delta(Termination::Threat, andc, 6), Qual::High);
    EXPECT_EQ(estimate_delta(Termination::Threat, std::nullopt, 6), Qual::Low);
    EXPECT_EQ(estimate_delta(Termination::NoMatch, orc, 1), Qual::Low);
}

namespace {

IntentionInstance flight_plan(std::map<std::string, std::vector<std::string>> deps) {
    auto t = std::make_shared<OperatorTemplate>();
    t->id = "fly-flight-plan";
    t->conditions = {{"tank", Termination::Unachievable, parse_pattern("evade *"), "hostile"},
                     {"done", Termination::Achieved, parse_pattern("at holding"), "waypoint"}};
    t->info_dependency = std::move(deps);
    IntentionInstance in;
    in.tpl = t;
    in.executor = "company";
    in.team_op = true;
    return in;
}

const WorldView kWorld = {{"tank", {{"x", "61000"}, {"y", "41000"}, {"direction", "right"}, {"speed", "30"}}}};

}  // namespace

TEST(TerminationMessage, WireMatchesPublishedExample) {
    auto in = flight_plan({{"tank", {"x", "y", "direction"}}});
    auto built = build_termination_message("ν4", in, in.tpl->conditions[0], parse_fact("evade tank"), kWorld, 7);
    EXPECT_TRUE(built.warnings.empty());
    EXPECT_EQ(to_wire(built.msg), "ν4 terminate-JPG fly-flight-plan evade tank elaborations 61000 41000 right seq=7");
}

TEST(TerminationMessage, NoDependencyNoElaborations) {
    auto in = flight_plan({{"tank", {"x"}}});
    auto built = build_termination_message("a1", in, in.tpl->conditions[1], parse_fact("at holding"), kWorld, 1);
    EXPECT_TRUE(built.msg.elaborations.empty());
    EXPECT_EQ(to_wire(built.msg), "a1 terminate-JPG fly-flight-plan at holding seq=1");
}

TEST(TerminationMessage, DependencySpecSelectsFields) {
    auto a = flight_plan({{"tank", {"x", "y", "direction"}}});
    auto b = flight_plan({{"tank", {"speed", "tank.direction"}}});
    auto ma = build_termination_message("a4", a, a.tpl->conditions[0], parse_fact("evade tank"), kWorld, 1);
    auto mb = build_termination_message("a4", b, b.tpl->conditions[0], parse_fact("evade tank"), kWorld, 1);
    EXPECT_EQ(ma.msg.elaborations, (std::vector<std::string>{"61000", "41000", "right"}));
    EXPECT_EQ(mb.msg.elaborations, (std::vector<std::string>{"30", "right"}));
}

TEST(TerminationMessage, MissingFieldBecomesPlaceholder) {
    auto in = flight_plan({{"tank", {"x", "altitude"}}});
    auto built = build_termination_message("a4", in, in.tpl->conditions[0], parse_fact("evade tank"), kWorld, 1);
    EXPECT_EQ(built.msg.elaborations, (std::vector<std::string>{"61000", "?"}));
    ASSERT_EQ(built.warnings.size(), 1u);
}

TEST(Wire, RoundTrip) {
    Message m;
    m.kind = Message::Kind::TerminateJPG;
    m.sender = "a4";
    m.op = "fly-flight-plan";
    m.fact = parse_fact("evade tank");
    m.elaborations = {"61000", "41000", "right"};
    m.seq = 12;
    auto back = from_wire(to_wire(m));
    ASSERT_TRUE(back);
    EXPECT_EQ(back->kind, m.kind);
    EXPECT_EQ(back->sender, "a4");
    EXPECT_EQ(back->op, m.op);
    ASSERT_TRUE(back->fact);
    EXPECT_EQ(*back->fact, *m.fact);
    EXPECT_EQ(back->elaborations, m.elaborations);
    EXPECT_EQ(back->seq, 12);

    Message r;
    r.kind = Message::Kind::Request;
    r.sender = "a1";
    r.op = "engage";
    r.seq = 3;
    EXPECT_EQ(to_wire(r), "a1 request engage seq=3");
    auto rb = from_wire(to_wire(r));
    ASSERT_TRUE(rb);
    EXPECT_FALSE(rb->fact);
}

TEST(Wire, MalformedRejected) {
    EXPECT_FALSE(from_wire("a1 request"));
    EXPECT_FALSE(from_wire("a1 shout engage seq=1"));
    EXPECT_FALSE(from_wire("a1 request engage seq=x"));
    EXPECT_FALSE(from_wire("a1 request engage 4"));
    for (auto k : {"request", "confirm", "refuse", "terminate-JPG", "threat", "role-substitution"})
        EXPECT_TRUE(parse_kind(k));
}

TEST(GammaMismatch, Recovery) {
    EXPECT_EQ(recover_gamma_mismatch({Message::Kind::Request, true, false}), Recovery::ReEstablish);
    EXPECT_EQ(recover_gamma_mismatch({Message::Kind::TerminateJPG, false, true}), Recovery::LookaheadCatchUp);
    EXPECT_EQ(recover_gamma_mismatch({Message::Kind::Request, false, false}), Recovery::None);
    EXPECT_EQ(recover_gamma_mismatch({Message::Kind::Confirm, false, true}), Recovery::None);
}
