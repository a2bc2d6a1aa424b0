// mdsafe: fit class-conditional Gaussians over softmax dumps, evaluate
// risk-coverage curves and safety gates, and generate synthetic datasets.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdsafe/mdsafe.hpp"

namespace {

mdsafe::SafetyRequirement parse_requirement(const std::string& text) {
    // ID=MAX_RISK,MIN_COVERAGE
    const auto eq = text.find('=');
    const auto comma = text.find(',', eq == std::string::npos ? 0 : eq);
    if (eq == std::string::npos || comma == std::string::npos) {
        throw mdsafe::ConfigError("--requirement expects ID=MAX_RISK,MIN_COVERAGE, got '" + text + "'");
    }
    mdsafe::SafetyRequirement r;
    r.id = text.substr(0, eq);
    try {
        r.max_risk = std::stod(text.substr(eq + 1, comma - eq - 1));
        r.min_coverage = std::stod(text.substr(comma + 1));
    } catch (const std::exception&) {
        throw mdsafe::ConfigError("--requirement has non-numeric bounds: '" + text + "'");
    }
    r.validate();
    return r;
}

void print_summary(const mdsafe::EvalOutcome& out) {
    std::printf("%-24s %9s %7s %14s %9s\n", "dataset", "IoU (%)", "AUC", "FS1 cov (%)", "verdict");
    for (const auto& d : out.datasets) {
        if (!d.ok) {
            std::printf("%-24s FAILED: %s\n", d.name.c_str(), d.error.c_str());
            continue;
        }
        const auto& v = d.verdicts.front();
        const std::string cov = v.fs_coverage ? std::to_string(100.0 * *v.fs_coverage).substr(0, 6) : "-";
        std::printf("%-24s %9.2f %7.2f %14s %9s\n", d.name.c_str(), 100.0 * d.curve.baseline_iou, d.auc.value,
                    cov.c_str(), v.pass ? "PASS" : "OOD");
        if (!d.risk_increase_indices.empty()) {
            std::printf("%-24s note: risk increases when tightening at %zu threshold index(es)\n", "",
                        d.risk_increase_indices.size());
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mahalanobis-distance safety evaluation for semantic segmentation outputs"};
    app.require_subcommand(1);

    // fit
    mdsafe::FitCommand fit;
    auto* fit_cmd = app.add_subcommand("fit", "Fit class-conditional Gaussians from a training manifest");
    fit_cmd->add_option("--manifest", fit.manifest, "Training manifest JSON")->required();
    fit_cmd->add_option("--out", fit.out, "Output bank JSON")->required();
    fit_cmd->add_option("--max-pixels", fit.config.max_pixels_per_class, "Pixel cap per class");
    fit_cmd->add_option("--max-per-image", fit.config.max_pixels_per_class_per_image, "Pixel cap per class per image");
    fit_cmd->add_option("--ridge", fit.config.ridge_scale, "Ridge scale (lambda = ridge * trace(S) / K)");
    fit_cmd->add_option("--seed", fit.config.rng_seed, "Subsampling seed");
    fit_cmd->add_option("--threads", fit.config.threads, "Worker threads");
    std::size_t min_samples = 0;
    fit_cmd->add_option("--min-samples", min_samples, "Minimum samples for a valid class (default K+1)");

    // eval
    mdsafe::EvalConfig ev;
    double max_risk = 0.15, min_cov = 0.5;
    std::vector<std::string> extra_reqs;
    std::string auc_mode = "pooled", grid = "per-image";
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate datasets against a fitted bank");
    eval_cmd->add_option("--bank", ev.bank, "Bank JSON")->required();
    eval_cmd->add_option("--manifest", ev.manifests, "Evaluation manifest(s)")->required();
    eval_cmd->add_option("--out", ev.out_dir, "Output directory")->required();
    eval_cmd->add_option("--points", ev.points, "Threshold points per image");
    eval_cmd->add_option("--abstain", ev.abstain_threshold, "Abstain when max softmax <= this (0 disables)");
    eval_cmd->add_option("--max-risk", max_risk, "FS1 maximum risk");
    eval_cmd->add_option("--min-coverage", min_cov, "FS1 minimum coverage");
    eval_cmd->add_option("--requirement", extra_reqs, "Additional requirement ID=MAX_RISK,MIN_COVERAGE");
    eval_cmd->add_option("--auc-mode", auc_mode, "pooled | per-image")->check(CLI::IsMember({"pooled", "per-image"}));
    eval_cmd->add_option("--auc-cap", ev.auc_subsample_cap, "Per-population AUC subsample cap");
    eval_cmd->add_option("--grid", grid, "per-image | global (fixed grid, not the reference protocol)")
        ->check(CLI::IsMember({"per-image", "global"}));
    eval_cmd->add_flag("--strict-per-image", ev.strict_per_image, "Also require every image to pass on its own curve");
    eval_cmd->add_flag("--export-distances", ev.export_distances, "Write per-image distance maps as NPY");
    eval_cmd->add_option("--seed", ev.seed, "AUC subsampling seed");
    eval_cmd->add_option("--threads", ev.threads, "Worker threads");

    // gate
    std::string curve_path;
    double gate_risk = 0.15, gate_cov = 0.5;
    auto* gate_cmd = app.add_subcommand("gate", "Re-evaluate safety requirements on a stored curve CSV");
    gate_cmd->add_option("--curve", curve_path, "Curve CSV")->required();
    gate_cmd->add_option("--max-risk", gate_risk, "Maximum risk");
    gate_cmd->add_option("--min-coverage", gate_cov, "Minimum coverage");

    // synth
    std::string spec_path, synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset from a spec JSON");
    synth_cmd->add_option("--spec", spec_path, "Synthetic dataset spec")->required();
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*fit_cmd) {
            if (min_samples > 0) fit.config.min_samples_per_class = min_samples;
            const auto out = mdsafe::cmd_fit(fit);
            std::cout << "bank: " << fit.out.string() << "\nsha256: " << out.bank_sha256
                      << "\ncorrelation: " << out.correlation_csv.string() << "\n";
            for (const auto& g : out.bank.gaussians) {
                if (!g.valid) {
                    std::cerr << "warning: class " << out.bank.registry.classes()[static_cast<std::size_t>(g.class_id)].name
                              << " has " << g.sample_count << " samples and is marked invalid\n";
                }
            }
            return 0;
        }
        if (*eval_cmd) {
            ev.requirements = {mdsafe::SafetyRequirement{"FS1", max_risk, min_cov}};
            for (const auto& r : extra_reqs) ev.requirements.push_back(parse_requirement(r));
            ev.auc_mode = auc_mode == "pooled" ? mdsafe::AucMode::pooled : mdsafe::AucMode::per_image;
            ev.grid = grid == "global" ? mdsafe::GridMode::global : mdsafe::GridMode::per_image;
            const auto out = mdsafe::cmd_eval(ev);
            print_summary(out);
            std::cout << "report: " << out.report_path.string() << "\n";
            return out.all_ok ? 0 : 2;
        }
        if (*gate_cmd) {
            const auto verdict = mdsafe::cmd_gate(curve_path, {mdsafe::SafetyRequirement{"FS1", gate_risk, gate_cov}});
            std::cout << verdict.dump(2) << "\n";
            return 0;
        }
        if (*synth_cmd) {
            const auto out = mdsafe::cmd_synth(spec_path, synth_out);
            std::cout << "manifest: " << out.manifest_path.string() << "\nground truth: " << out.ground_truth_path.string()
                      << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return mdsafe::exit_code(e);
    }
    return 1;
}
