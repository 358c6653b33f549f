// steam: scenario runner and experiment harness.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "steam/metrics.hpp"

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string w;
    while (std::getline(in, w, ','))
        if (!w.empty()) out.push_back(w);
    return out;
}

// "2,3,4" or "2..8"
std::vector<long long> int_list(const std::string& s) {
    std::vector<long long> out;
    for (const auto& part : split_list(s)) {
        auto dots = part.find("..");
        if (dots == std::string::npos) {
            out.push_back(std::stoll(part));
            continue;
        }
        long long a = std::stoll(part.substr(0, dots)), b = std::stoll(part.substr(dots + 2));
        for (long long v = a; v <= b; ++v) out.push_back(v);
    }
    return out;
}

bool write_file(const std::string& path, const std::string& text) {
    if (path.empty()) return true;
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        std::cerr << "error: cannot write " << path << "\n";
        return false;
    }
    f << text;
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Team coordination simulator"};
    app.require_subcommand(1);

    std::string scenario, policy = "balanced", trace_out, metrics_out;
    unsigned long long seed = 0;
    int size = 0, condition = 1;
    std::vector<std::string> loss;
    auto* run = app.add_subcommand("run", "Run one scenario to mission end or deadlock");
    run->add_option("--scenario", scenario, "Scenario file")->required();
    run->add_option("--policy", policy, "cautious|balanced|reckless")
        ->check(CLI::IsMember({"cautious", "balanced", "reckless"}));
    run->add_option("--seed", seed, "Seed (defaults to the scenario seed)");
    run->add_option("--trace", trace_out, "Trace output path");
    run->add_option("--metrics", metrics_out, "Metrics CSV output path");
    run->add_option("--size", size, "Team size (first N agents)");
    run->add_option("--condition", condition, "Scenario condition id");
    run->add_option("--loss", loss, "CHANNEL=P loss override");

    std::string policies = "cautious,balanced,reckless", sizes, seeds = "1", out;
    auto* cmp = app.add_subcommand("compare", "Sweep policies, team sizes and seeds");
    cmp->add_option("--scenario", scenario, "Scenario file")->required();
    cmp->add_option("--policies", policies, "Comma-separated policies");
    cmp->add_option("--sizes", sizes, "Sizes, e.g. 2,4,8 or 2..8");
    cmp->add_option("--seeds", seeds, "Seeds, e.g. 1,2,3 or 1..10");
    cmp->add_option("--out", out, "CSV output path (stdout when omitted)");
    cmp->add_option("--condition", condition, "Scenario condition id");

    std::string trace_in;
    auto* collab = app.add_subcommand("collab", "Per-phase collaboration report from a trace");
    collab->add_option("--trace", trace_in, "Trace file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            auto sc = steam::load_scenario(scenario);
            steam::RunOptions opt;
            opt.policy = steam::parse_policy(policy);
            if (seed) opt.seed = seed;
            opt.size = size;
            opt.condition = condition;
            for (const auto& l : loss) {
                auto eq = l.find('=');
                if (eq == std::string::npos) throw steam::ConfigError("--loss expects CHANNEL=P");
                opt.loss[l.substr(0, eq)] = std::stod(l.substr(eq + 1));
            }
            auto r = steam::run_scenario(sc, opt);
            bool ok = write_file(trace_out, r.trace_text());
            ok = write_file(metrics_out, std::string(steam::kMetricsHeader) + "\n" + steam::csv_row(r) + "\n") && ok;
            std::cout << r.outcome << " ticks=" << r.ticks << " messages=" << r.msgs_total << "\n";
            if (!ok) return 1;
            return steam::exit_code_for(r.outcome);
        }
        if (*cmp) {
            auto sc = steam::load_scenario(scenario);
            std::vector<long long> size_list = sizes.empty() ? std::vector<long long>{static_cast<long long>(sc.agents.size())}
                                                             : int_list(sizes);
            std::string csv = std::string(steam::kMetricsHeader) + "\n";
            for (const auto& p : split_list(policies)) {
                for (long long n : size_list) {
                    if (n < sc.size_min || n > sc.size_max) {
                        std::cerr << "warning: size " << n << " outside " << sc.size_min << ".." << sc.size_max
                                  << ", skipped\n";
                        continue;
                    }
                    for (long long s : int_list(seeds)) {
                        steam::RunOptions opt;
                        opt.policy = steam::parse_policy(p);
                        opt.size = static_cast<int>(n);
                        opt.seed = static_cast<unsigned long long>(s);
                        opt.condition = condition;
                        csv += steam::csv_row(steam::run_scenario(sc, opt)) + "\n";
                    }
                }
            }
            if (out.empty()) std::cout << csv;
            return write_file(out, csv) ? 0 : 1;
        }
        if (*collab) {
            std::ifstream f(trace_in);
            if (!f) throw steam::ConfigError("cannot open trace '" + trace_in + "'");
            std::stringstream ss;
            ss << f.rdbuf();
            auto rep = steam::collab_metrics(steam::parse_trace(ss.str()));
            if (rep.single_phase) std::cerr << "warning: no phase markers, single-phase report\n";
            std::cout << steam::format_collab(rep);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
