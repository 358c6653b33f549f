#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "steam/simworld.hpp"

using namespace steam;

namespace {

const char* kCosts = R"(
cost mission Cc Low Cmt Medium Cme High Cn Low Ceps Low B Medium
cost waypoint Cc Low Cmt Medium Cme Low Cn Low Ceps Low B Medium
cost hostile Cc Low Cmt High Cme Low Cn Low Ceps Low B Medium
cost default Cc Low Cmt Low Cme Low Cn Low Ceps Low B Medium
cost repair Cc Low Cmt High Cme Medium Cn Low Ceps Low B Medium
cost complete-failure Cc Low Cmt High Cme Low Cn Low Ceps Low B Medium
)";

const char* kFour = R"(
scenario four
agent a1 caps fly
agent a2 caps fly
agent a3 caps fly
agent a4 caps fly
team company leader a1 members a1 a2 a3 a4
channel radio shared company
)";

World run(const std::string& body, Policy p = Policy::Balanced, const std::string& head = kFour) {
    auto sc = parse_scenario(head + kCosts + body);
    RunOptions opt;
    opt.policy = p;
    World w = make_world(sc, opt);
    run_to_end(w);
    return w;
}

std::vector<TraceEvent> where(const World& w, const std::string& kind, const std::string& needle) {
    std::vector<TraceEvent> out;
    for (const auto& e : w.trace)
        if (e.kind == kind && e.payload.find(needle) != std::string::npos) out.push_back(e);
    return out;
}

int first_tick(const World& w, const std::string& agent, const std::string& kind, const std::string& needle) {
    for (const auto& e : w.trace)
        if (e.agent == agent && e.kind == kind && e.payload.find(needle) != std::string::npos) return e.tick;
    return -1;
}

const char* kMission = R"(
root execute-mission
template execute-mission
  exec team company
  establish mission
  children fly-to-bp
  achieve bp waypoint : reached bp
end
template fly-to-bp
  exec team company
  establish waypoint
  effect after 3 origin leader visible location move bp fact reached bp
end
)";

std::shared_ptr<OperatorTemplate> cand(const std::string& id, int prio, const std::string& group = "") {
    auto t = std::make_shared<OperatorTemplate>();
    t->id = id;
    t->priority = prio;
    t->group = group;
    return t;
}

}  // namespace

TEST(SelectBest, SingleCandidate) {
    std::mt19937_64 rng(1);
    bool random = true;
    auto t = select_best({cand("only", 0)}, rng, random);
    EXPECT_EQ(t->id, "only");
    EXPECT_FALSE(random);
}

TEST(SelectBest, ArgmaxOverAllPermutations) {
    for (int n = 1; n <= 4; ++n) {
        std::vector<int> prio(n);
        std::iota(prio.begin(), prio.end(), 1);
        do {
            std::vector<TemplatePtr> cs;
            for (int i = 0; i < n; ++i) cs.push_back(cand("c" + std::to_string(prio[i]), prio[i]));
            std::mt19937_64 rng(7);
            bool random = true;
            auto t = select_best(cs, rng, random);
            EXPECT_EQ(t->priority, n);
            EXPECT_FALSE(random);
        } while (std::next_permutation(prio.begin(), prio.end()));
    }
}

TEST(SelectBest, EquallyPreferableGroupDrawsSeeded) {
    std::vector<TemplatePtr> cs = {cand("halt", 3, "hold-or-go"), cand("go", 3, "hold-or-go"), cand("low", 1)};
    std::set<std::string> seen;
    for (unsigned s = 0; s < 32; ++s) {
        std::mt19937_64 a(s), b(s);
        bool ra = false, rb = false;
        auto x = select_best(cs, a, ra);
        auto y = select_best(cs, b, rb);
        EXPECT_TRUE(ra);
        EXPECT_EQ(x->id, y->id);
        EXPECT_NE(x->id, "low");
        seen.insert(x->id);
    }
    EXPECT_EQ(seen.size(), 2u);
}

TEST(SelectBest, TieWithoutGroupIsNotRandom) {
    std::mt19937_64 rng(1);
    bool random = true;
    auto t = select_best({cand("a", 2), cand("b", 2, "g")}, rng, random);
    EXPECT_EQ(t->id, "a");
    EXPECT_FALSE(random);
}

namespace {

// root team op -> team child -> individual leaf, all Active
AgentState three_deep() {
    AgentState a;
    a.id = "a1";
    TeamState ts;
    ts.id = "company";
    ts.members = {"a1", "a2"};
    a.team_states["company"] = ts;
    const char* ids[] = {"execute-mission", "engage", "employ-weapons"};
    for (int i = 1; i <= 3; ++i) {
        IntentionInstance in;
        in.id = i;
        in.tpl = cand(ids[i - 1], 0);
        in.team_op = i < 3;
        in.executor = i < 3 ? "company" : "a1";
        in.parent = i > 1 ? i - 1 : -1;
        in.child = i < 3 ? i + 1 : -1;
        in.status = Status::Active;
        a.intentions[i] = in;
    }
    a.root = 1;
    a.next_instance = 4;
    return a;
}

}  // namespace

TEST(TerminateIntention, CascadeMarksDescendantsIrrelevant) {
    auto a = three_deep();
    Fact f("mission-over", {});
    apply_team_state_update(a, "company", f, a.intentions[1]);
    std::vector<TraceEvent> ev;
    terminate_intention(a, 1, Status::Achieved, f, &ev, 5);
    EXPECT_EQ(a.intentions[1].status, Status::Achieved);
    EXPECT_EQ(a.intentions[2].status, Status::Irrelevant);
    EXPECT_EQ(a.intentions[3].status, Status::Irrelevant);
    for (const auto& [id, in] : a.intentions) EXPECT_FALSE(in.active()) << id;
    ASSERT_EQ(ev.size(), 3u);
    EXPECT_EQ(ev[0].payload, "engage company irrelevant");
    EXPECT_EQ(ev[2].payload, "execute-mission company achieved");
    EXPECT_TRUE(a.chain().empty());
}

TEST(TerminateIntention, PrivateFactIsMutualBeliefViolation) {
    auto a = three_deep();
    Fact f("enemy-tank", {"t1"});
    a.private_beliefs.insert(f);
    EXPECT_THROW(terminate_intention(a, 2, Status::Unachievable, f), MutualBeliefViolation);
    EXPECT_EQ(a.intentions[2].status, Status::Active);
    // individual intentions need no team-state fact
    EXPECT_NO_THROW(terminate_intention(a, 3, Status::Achieved, f));
    EXPECT_EQ(a.intentions[3].status, Status::Achieved);
}

TEST(TerminateIntention, ScopedFactsCleared) {
    auto a = three_deep();
    Fact f("engaging", {});
    apply_team_state_update(a, "company", f, a.intentions[2]);  // scoped to the parent, instance 1
    Fact g("target", {"t1"});
    apply_team_state_update(a, "company", g, a.intentions[2]);
    a.team_states["company"].scope[g] = 2;
    terminate_intention(a, 2, Status::Achieved, g);
    EXPECT_FALSE(a.team_states["company"].has(g));
    EXPECT_TRUE(a.team_states["company"].has(f));
}

TEST(StepAgent, QuiescentStepChangesNothing) {
    auto a = three_deep();
    a.intentions[3].action_started = true;
    Org org;
    org.agents = {"a1", "a2"};
    org.teams["company"] = {"company", "", "a1", {"a1", "a2"}, {}, {}, 1};
    std::map<std::string, CostModel> costs = {{"default", CostModel{}}};
    Env env;
    env.org = &org;
    env.costs = &costs;
    env.tick = 1;
    auto before = a.intentions.size();
    auto out = step_agent(a, {}, {}, env);
    EXPECT_TRUE(out.outbox.empty());
    EXPECT_TRUE(out.events.empty());
    EXPECT_EQ(a.intentions.size(), before);
    EXPECT_EQ(a.chain(), (std::vector<int>{1, 2, 3}));
}

TEST(Establish, RequestThenConfirmsInMemberOrder) {
    auto w = run(kMission, Policy::Balanced);
    EXPECT_EQ(w.outcome, "success");
    auto req = where(w, "msg-sent", "request execute-mission");
    auto conf = where(w, "msg-sent", "confirm execute-mission");
    ASSERT_EQ(req.size(), 1u);
    ASSERT_EQ(conf.size(), 3u);
    EXPECT_EQ(req[0].agent, "a1");
    EXPECT_EQ(conf[0].agent, "a2");
    EXPECT_EQ(conf[1].agent, "a3");
    EXPECT_EQ(conf[2].agent, "a4");
    EXPECT_LT(conf[0].tick, conf[1].tick);
    EXPECT_LT(conf[1].tick, conf[2].tick);
    for (const char* a : {"a1", "a2", "a3", "a4"}) {
        int active = first_tick(w, a, "intention-change", "execute-mission company active");
        EXPECT_GE(active, conf[2].tick) << a;
    }
}

TEST(Establish, HierarchyFormsTwoLevelChain) {
    auto w = run(kMission, Policy::Balanced);
    for (const char* a : {"a1", "a2", "a3", "a4"}) {
        int root = first_tick(w, a, "intention-change", "execute-mission company active");
        int child = first_tick(w, a, "intention-change", "fly-to-bp company active");
        EXPECT_GE(root, 0);
        EXPECT_GE(child, root) << a;
    }
    // Cme Low for the waypoint leg: no establishment under Balanced
    EXPECT_TRUE(where(w, "msg-sent", "request fly-to-bp").empty());
}

TEST(Establish, LossyRequestIsRebroadcast) {
    std::string head = std::string(kFour);
    head.replace(head.find("channel radio shared company"), 28, "channel radio shared company loss 1.0");
    auto sc = parse_scenario(head + kCosts + kMission);
    RunOptions opt;
    World w = make_world(sc, opt);
    run_to_end(w);
    auto req = where(w, "msg-sent", "request execute-mission");
    // first broadcast plus five retries, asked again twice by repair
    EXPECT_EQ(req.size(), 18u);
    EXPECT_EQ(where(w, "state-update", "no-confirm execute-mission").size(), 1u);
    EXPECT_TRUE(where(w, "msg-delivered", "").empty());
    EXPECT_EQ(w.agents[0].outcome, "complete-failure");
}

TEST(Termination, PerceptSendsOneTerminate) {
    const char* body = R"(
root execute-mission
event enemy-sighting tick 4 target a3 at nowhere fact enemy-tank t1
template execute-mission
  exec team company
  establish mission
  children fly-to-bp
  achieve bp waypoint : reached bp
  unachievable tank hostile : enemy-tank *
end
template fly-to-bp
  exec team company
  establish waypoint
  effect after 30 origin leader visible location move bp fact reached bp
end
)";
    auto w = run(body, Policy::Balanced);
    auto sent = where(w, "msg-sent", "terminate-JPG execute-mission");
    ASSERT_EQ(sent.size(), 1u);
    EXPECT_EQ(sent[0].agent, "a3");
    EXPECT_EQ(sent[0].payload.rfind("a3 terminate-JPG execute-mission enemy-tank t1 seq=", 0), 0u);
    for (const char* a : {"a1", "a2", "a4"}) {
        int t = first_tick(w, a, "intention-change", "execute-mission company unachievable");
        EXPECT_EQ(t, sent[0].tick + 1) << a;
        EXPECT_GE(first_tick(w, a, "state-update", "company enemy-tank t1"), 0) << a;
    }
    // the unachievable root goes to repair, which finds nothing else to try
    EXPECT_FALSE(where(w, "repair", "repair execute-mission cause=domain enemy-tank").empty());
    EXPECT_FALSE(where(w, "repair", "complete-failure execute-mission").empty());
    EXPECT_EQ(w.outcome, "complete-failure");
}

TEST(Termination, SingletonTeamStaysSilent) {
    const char* head = R"(
scenario solo
agent a1 caps fly
team company leader a1 members a1
channel radio shared company
)";
    const char* body = R"(
root execute-mission
event enemy-sighting tick 2 target a1 fact reached bp
template execute-mission
  exec team company
  establish mission
  children hover
  achieve bp hostile : reached bp
end
template hover
  exec self
  effect after 40 fact idle
end
)";
    for (auto p : {Policy::Balanced, Policy::Reckless}) {
        auto w = run(body, p, head);
        EXPECT_EQ(w.outcome, "success");
        EXPECT_EQ(w.sent_total, 0);
    }
}

TEST(IndividualRepair, EndsInInability) {
    const char* body = R"(
root execute-mission
event order-arrival tick 3 target a2 fact engine-failure a2
template execute-mission
  exec team company
  establish mission
  children fly-to-bp
  achieve bp waypoint : reached bp
end
template fly-to-bp
  exec team company
  establish waypoint
  children fly-leg
  achieve bp waypoint : reached bp
end
template fly-leg
  exec self
  unachievable engine default : engine-failure *
  effect after 20 origin leader visible location move bp fact reached bp
end
)";
    auto w = run(body, Policy::Balanced);
    int unach = first_tick(w, "a2", "intention-change", "fly-leg a2 unachievable");
    int rep = first_tick(w, "a2", "intention-change", "repair a2");
    int cf = first_tick(w, "a2", "intention-change", "complete-failure a2");
    EXPECT_GE(unach, 0);
    EXPECT_GE(rep, unach);
    EXPECT_GE(cf, rep);
    auto threat = where(w, "msg-sent", "a2 threat fly-leg inability a2");
    EXPECT_EQ(threat.size(), 1u);
}

TEST(Conform, SubordinateFollowsLeadersChoice) {
    const char* body = R"(
root execute-mission
event order-arrival tick 0 target a2 fact refuel-needed
template execute-mission
  exec team company
  establish mission
  children refuel depart
  achieve done waypoint : reached bp
end
template refuel
  exec team company
  pre refuel-needed
  priority 9
  establish waypoint
  effect after 30 origin leader visible location fact refuelled
  achieve ok waypoint : refuelled
end
template depart
  exec team company
  priority 1
  establish mission
  effect after 3 origin leader visible location move bp fact reached bp
end
)";
    auto w = run(body, Policy::Balanced);
    EXPECT_FALSE(where(w, "repair", "conform refuel -> depart").empty());
    EXPECT_EQ(w.outcome, "success");
}

TEST(Determinism, SameSeedSameTrace) {
    auto a = run(kMission, Policy::Cautious);
    auto b = run(kMission, Policy::Cautious);
    EXPECT_EQ(format_trace(a.trace), format_trace(b.trace));
}

TEST(Invariants, ActiveIntentionsFormOneChain) {
    auto sc = parse_scenario(std::string(kFour) + kCosts + kMission);
    RunOptions opt;
    opt.policy = Policy::Cautious;
    World w = make_world(sc, opt);
    while (tick(w)) {
        for (const auto& a : w.agents) {
            auto ch = a.chain();
            std::size_t live = 0;
            for (const auto& [id, in] : a.intentions)
                if (!terminal(in.status)) ++live;
            EXPECT_EQ(live, ch.size()) << a.id << " tick " << w.tick_now;
        }
    }
}
