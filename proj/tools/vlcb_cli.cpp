// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

// vlcb command line: run / report / export-traces / replay / spec.
// Links only the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlcb/vlcb.h"

namespace {

constexpr int kExitFailedCells = 3;
constexpr int kExitError = 2;

struct CommonFlags {
    std::optional<std::uint64_t> seed;
    int jobs = 0;
    std::vector<double> budgets;
    std::string out;

    vlcb_run_options options() const {
        vlcb_run_options o;
        vlcb_run_options_default(&o);
        if (seed) {
            o.has_seed = 1;
            o.seed = *seed;
        }
        o.jobs = jobs;
        if (!budgets.empty()) {
            o.budgets = budgets.data();
            o.n_budgets = budgets.size();
        }
        if (!out.empty()) o.out_dir = out.c_str();
        return o;
    }
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_budgets) {
    cmd->add_option("--seed", f.seed, "override the run seed");
    cmd->add_option("--jobs", f.jobs, "worker threads (default: spec value)")->check(CLI::PositiveNumber);
    if (with_budgets) {
        cmd->add_option("--budgets", f.budgets, "comma-separated budget list, e.g. 0.01,0.1")->delimiter(',');
    }
    cmd->add_option("--out", f.out, "output directory (default: $VLCB_OUT_ROOT/<name> or ./runs/<name>)");
}

int report_error(vlcb_status s) {
    const char* msg = vlcb_last_error();
    std::cerr << "vlcb: " << (*msg ? msg : vlcb_status_name(s)) << "\n";
    return kExitError;
}

std::string take(char* s) {
    std::string out = s ? s : "";
    vlcb_string_free(s);
    return out;
}

std::string read_policy(const std::string& arg) {
    if (!arg.empty() && arg.front() == '{') return arg;
    std::ifstream f(arg);
    if (!f) throw CLI::ValidationError("policy", "cannot read '" + arg + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void progress(const char* line, void* user) {
    if (*static_cast<bool*>(user)) std::cerr << line << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vlcb: compression benchmark harness for a toy vision-language transformer"};
    app.set_version_flag("--version", std::string(vlcb_version()));
    app.require_subcommand(1);

    CommonFlags run_flags;
    std::string run_spec;
    bool verbose = true;
    auto* run = app.add_subcommand("run", "execute a run spec and write a results archive");
    run->add_option("spec", run_spec, "run spec (JSON)")->required()->check(CLI::ExistingFile);
    run->add_flag("!--quiet", verbose, "suppress progress lines");
    add_common(run, run_flags, true);

    std::string archive, report_out;
    auto* rep = app.add_subcommand("report", "compute metrics from a results archive");
    rep->add_option("archive", archive, "archive directory")->required()->check(CLI::ExistingDirectory);
    rep->add_option("--out", report_out, "report directory (default: the archive)");

    CommonFlags exp_flags;
    std::string exp_spec;
    int samples = 1;
    bool float64 = false;
    auto* exp = app.add_subcommand("export-traces", "write prefill attention traces for a spec's tasks");
    exp->add_option("spec", exp_spec, "run spec (JSON)")->required()->check(CLI::ExistingFile);
    exp->add_option("--samples", samples, "samples per (model, task)")->check(CLI::PositiveNumber);
    exp->add_flag("--float64", float64, "store attention as float64 (exact round-trip)");
    add_common(exp, exp_flags, false);

    std::string trace_path, policy_arg, replay_out;
    std::optional<double> replay_budget;
    auto* rpl = app.add_subcommand("replay", "apply a KV policy to a stored trace");
    rpl->add_option("trace", trace_path, "trace file")->required()->check(CLI::ExistingFile);
    rpl->add_option("policy", policy_arg, "KV policy record: JSON file or inline JSON")->required();
    rpl->add_option("--budget", replay_budget, "override the policy budget")->check(CLI::Range(1e-9, 1.0));
    rpl->add_option("--out", replay_out, "write the replay JSON here instead of stdout");

    CommonFlags spec_flags;
    std::string spec_path;
    auto* spc = app.add_subcommand("spec", "validate a run spec and print its canonical form");
    spc->add_option("spec", spec_path, "run spec (JSON)")->required()->check(CLI::ExistingFile);
    add_common(spc, spec_flags, true);

    CLI11_PARSE(app, argc, argv);

    if (*run) {
        const vlcb_run_options o = run_flags.options();
        vlcb_run_summary sum{};
        const vlcb_status s = vlcb_harness_run(run_spec.c_str(), &o, progress, &verbose, &sum);
        if (s != VLCB_OK) return report_error(s);
        const std::string dir = take(sum.archive_dir);
        std::cout << "archive: " << dir << "\nrecords: " << sum.records << "\nfailed cells: " << sum.failed_cells
                  << "\n";
        return sum.failed_cells > 0 ? kExitFailedCells : 0;
    }
    if (*rep) {
        char* json = nullptr;
        int diags = 0;
        const vlcb_status s =
            vlcb_harness_report(archive.c_str(), report_out.empty() ? nullptr : report_out.c_str(), &json, &diags);
        if (s != VLCB_OK) return report_error(s);
        std::cout << take(json) << "\n";
        if (diags > 0) std::cerr << "vlcb: " << diags << " diagnostic(s); see report.json\n";
        return 0;
    }
    if (*exp) {
        const vlcb_run_options o = exp_flags.options();
        const std::string dir = exp_flags.out.empty() ? "traces" : exp_flags.out;
        char* paths = nullptr;
        const vlcb_status s =
            vlcb_harness_export_traces(exp_spec.c_str(), &o, samples, float64 ? 1 : 0, dir.c_str(), &paths);
        if (s != VLCB_OK) return report_error(s);
        std::cout << take(paths) << "\n";
        return 0;
    }
    if (*rpl) {
        const std::string policy = read_policy(policy_arg);
        vlcb_trace* trace = nullptr;
        vlcb_status s = vlcb_trace_load(trace_path.c_str(), &trace);
        if (s != VLCB_OK) return report_error(s);
        char* json = nullptr;
        s = vlcb_trace_replay(trace, policy.c_str(), replay_budget.value_or(0.0), &json);
        vlcb_trace_destroy(trace);
        if (s != VLCB_OK) return report_error(s);
        const std::string out = take(json);
        if (replay_out.empty()) {
            std::cout << out << "\n";
        } else {
            std::ofstream f(replay_out);
            f << out << "\n";
            if (!f) {
                std::cerr << "vlcb: cannot write '" << replay_out << "'\n";
                return kExitError;
            }
        }
        return 0;
    }
    if (*spc) {
        const vlcb_run_options o = spec_flags.options();
        char* json = nullptr;
        const vlcb_status s = vlcb_spec_canonical(spec_path.c_str(), &o, &json);
        if (s != VLCB_OK) return report_error(s);
        std::cout << take(json) << "\n";
        return 0;
    }
    return 0;
}
