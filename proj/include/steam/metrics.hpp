// Experiment harness: single runs, sweeps and per-phase collaboration
// metrics computed from traces.
#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "steam/simworld.hpp"

namespace steam {

inline constexpr const char* kMetricsHeader =
    "policy,team_size,seed,outcome,ticks,msgs_total,msgs_request,msgs_confirm,msgs_refuse,msgs_terminate,"
    "msgs_threat,msgs_substitution";

struct RunResult {
    std::string policy;
    int team_size = 0;
    unsigned long long seed = 0;
    std::string outcome;
    int ticks = 0;
    std::map<std::string, int> msgs;  // by kind token
    int msgs_total = 0;
    std::vector<TraceEvent> trace;
    std::string trace_text() const { return format_trace(trace); }
};

inline std::string csv_row(const RunResult& r) {
    auto k = [&](const char* kind) {
        auto it = r.msgs.find(kind);
        return std::to_string(it == r.msgs.end() ? 0 : it->second);
    };
    std::ostringstream o;
    o << r.policy << ',' << r.team_size << ',' << r.seed << ',' << r.outcome << ',' << r.ticks << ',' << r.msgs_total
      << ',' << k("request") << ',' << k("confirm") << ',' << k("refuse") << ',' << k("terminate-JPG") << ','
      << k("threat") << ',' << k("role-substitution");
    return o.str();
}

inline RunResult run_scenario(const ScenarioConfig& sc, const RunOptions& opt) {
    World w = make_world(sc, opt);
    run_to_end(w);
    RunResult r;
    r.policy = to_string(opt.policy);
    r.team_size = static_cast<int>(w.agents.size());
    r.seed = opt.seed ? *opt.seed : sc.seed;
    r.outcome = w.outcome;
    r.ticks = w.tick_now;
    r.msgs = w.sent_by_kind;
    r.msgs_total = w.sent_total;
    r.trace = std::move(w.trace);
    return r;
}

// Exit codes for `run`: 0 success, 2 complete-failure, 3 deadlock, 1 load error.
inline int exit_code_for(const std::string& outcome) {
    if (outcome == "success") return 0;
    if (outcome == "complete-failure") return 2;
    return 3;
}

struct PhaseReport {
    std::string phase;
    double degree = 0;           // team instances / all instances on the chain
    double degree_no_sub = 0;    // same, counting only top-level team operators
    double msg_share = 0;        // fraction of all messages sent in this phase
    int samples = 0;
    int messages = 0;
};

struct CollabReport {
    std::vector<PhaseReport> phases;
    double correlation = 0;  // Pearson(msg_share, degree) over phases
    bool single_phase = false;
};

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n < 2 || y.size() != n) return 0;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0;
    return sxy / std::sqrt(sxx * syy);
}

namespace metrics_detail {

inline double ratio(const std::string& s) {
    auto slash = s.find('/');
    if (slash == std::string::npos) return 0;
    double a = std::stod(s.substr(0, slash)), b = std::stod(s.substr(slash + 1));
    return b > 0 ? a / b : 0;
}

}  // namespace metrics_detail

// Degree samples are taken once per tick per agent currently inside a phase.
inline CollabReport collab_metrics(const std::vector<TraceEvent>& trace) {
    struct AgentNow {
        std::string phase;
        double deg = 0, deg_no_sub = 0;
        bool done = false;
    };
    std::map<std::string, AgentNow> now;
    std::vector<std::string> order;
    std::map<std::string, PhaseReport> acc;
    bool have_phase = false;
    for (const auto& e : trace)
        if (e.kind == "metric" && e.payload.rfind("phase ", 0) == 0) have_phase = true;
    const std::string single = "all";
    auto touch = [&](const std::string& ph) {
        if (!acc.count(ph)) {
            acc[ph].phase = ph;
            order.push_back(ph);
        }
    };
    if (!have_phase) touch(single);
    int total_msgs = 0;
    std::size_t i = 0;
    int last_tick = trace.empty() ? 0 : trace.back().tick;
    for (int t = 0; t <= last_tick; ++t) {
        for (; i < trace.size() && trace[i].tick == t; ++i) {
            const auto& e = trace[i];
            if (e.agent == "world") continue;
            auto& a = now[e.agent];
            if (e.kind == "metric") {
                if (e.payload.rfind("phase ", 0) == 0) {
                    a.phase = e.payload.substr(6);
                    touch(a.phase);
                } else if (e.payload.rfind("degree ", 0) == 0) {
                    auto parts = split_ws(e.payload.substr(7));
                    if (parts.size() == 2) {
                        a.deg = metrics_detail::ratio(parts[0]);
                        a.deg_no_sub = metrics_detail::ratio(parts[1]);
                    }
                } else if (e.payload.rfind("outcome ", 0) == 0) {
                    a.done = true;
                }
            } else if (e.kind == "msg-sent") {
                std::string ph = have_phase ? a.phase : single;
                if (ph.empty()) continue;
                acc[ph].messages++;
                total_msgs++;
            }
        }
        for (auto& [id, a] : now) {
            std::string ph = have_phase ? a.phase : single;
            if (a.done || ph.empty()) continue;
            auto& r = acc[ph];
            r.degree += a.deg;
            r.degree_no_sub += a.deg_no_sub;
            r.samples++;
        }
    }
    CollabReport rep;
    rep.single_phase = !have_phase;
    std::vector<double> xs, ys;
    for (const auto& ph : order) {
        auto r = acc[ph];
        if (r.samples > 0) {
            r.degree /= r.samples;
            r.degree_no_sub /= r.samples;
        }
        r.msg_share = total_msgs > 0 ? static_cast<double>(r.messages) / total_msgs : 0;
        rep.phases.push_back(r);
        xs.push_back(r.msg_share);
        ys.push_back(r.degree);
    }
    rep.correlation = pearson(xs, ys);
    return rep;
}

inline std::string format_collab(const CollabReport& r) {
    std::ostringstream o;
    o << "phase,degree,degree_without_subteams,msg_share,messages,samples\n";
    o << std::fixed << std::setprecision(4);
    for (const auto& p : r.phases)
        o << p.phase << ',' << p.degree << ',' << p.degree_no_sub << ',' << p.msg_share << ',' << p.messages << ','
          << p.samples << '\n';
    o << "correlation," << r.correlation << '\n';
    return o.str();
}

// Least-squares slope of log(y) against log(x).
inline double fit_exponent(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
        if (x[i] <= 0 || y[i] <= 0) continue;
        lx.push_back(std::log(x[i]));
        ly.push_back(std::log(y[i]));
    }
    if (lx.size() < 2) return 0;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= lx.size();
    my /= ly.size();
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    return sxx > 0 ? sxy / sxx : 0;
}

}  // namespace steam
