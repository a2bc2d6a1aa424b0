#pragma once

// Pipeline orchestration behind the command-line tool: fitting a bank,
// evaluating datasets into curve CSVs plus a consolidated JSON report,
// re-gating stored curves, and generating synthetic datasets.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/detail/codec.hpp"
#include "mdsafe/detail/parallel.hpp"
#include "mdsafe/error.hpp"
#include "mdsafe/gaussian_bank.hpp"
#include "mdsafe/pixel_scoring.hpp"
#include "mdsafe/risk_coverage.hpp"
#include "mdsafe/safety_gate.hpp"
#include "mdsafe/synth.hpp"

namespace mdsafe {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kCurveCsvHeader = "threshold_index,epsilon_mean,risk_mean,coverage_mean,n_degenerate";

// ---- curve CSV -----------------------------------------------------------------

inline std::string curve_to_csv(const RiskCoverageCurve& curve) {
    std::string out = std::string(kCurveCsvHeader) + "\n";
    for (const auto& p : curve.points) {
        out += std::to_string(p.threshold_index) + "," + detail::format_double(p.epsilon_mean) + "," +
               detail::format_double(p.risk_mean) + "," + detail::format_double(p.coverage_mean) + "," +
               std::to_string(p.n_degenerate) + "\n";
    }
    return out;
}

/// Parses a curve CSV. Throws FormatError on any malformed line.
inline std::vector<CurvePoint> parse_curve_csv(std::string_view text) {
    std::vector<CurvePoint> points;
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw FormatError("curve csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCurveCsvHeader) throw FormatError("curve csv: unexpected header '" + line + "'");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (f.size() != 5) throw FormatError("curve csv: line " + std::to_string(lineno) + " has " + std::to_string(f.size()) + " fields");
        CurvePoint p;
        try {
            std::size_t used = 0;
            auto whole = [&](const std::string& s, auto conv) {
                auto v = conv(s, &used);
                if (used != s.size()) throw std::invalid_argument(s);
                return v;
            };
            p.threshold_index = whole(f[0], [](const std::string& s, std::size_t* u) { return std::stoull(s, u); });
            p.epsilon_mean = whole(f[1], [](const std::string& s, std::size_t* u) { return std::stod(s, u); });
            p.risk_mean = whole(f[2], [](const std::string& s, std::size_t* u) { return std::stod(s, u); });
            p.coverage_mean = whole(f[3], [](const std::string& s, std::size_t* u) { return std::stod(s, u); });
            p.n_degenerate = whole(f[4], [](const std::string& s, std::size_t* u) { return std::stoull(s, u); });
        } catch (const std::exception&) {
            throw FormatError("curve csv: line " + std::to_string(lineno) + " is not numeric");
        }
        if (p.threshold_index != points.size()) throw FormatError("curve csv: threshold_index out of sequence at line " + std::to_string(lineno));
        if (!(p.risk_mean >= 0.0 && p.risk_mean <= 1.0 && p.coverage_mean >= 0.0 && p.coverage_mean <= 1.0)) {
            throw FormatError("curve csv: risk/coverage outside [0, 1] at line " + std::to_string(lineno));
        }
        points.push_back(p);
    }
    if (points.empty()) throw FormatError("curve csv: no points");
    return points;
}

inline std::vector<CurvePoint> load_curve_csv(const fs::path& path) {
    const auto bytes = detail::read_file_bytes(path);
    return parse_curve_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// ---- fit -------------------------------------------------------------------------

struct FitCommand {
    fs::path manifest;
    fs::path out;  // bank JSON; the correlation CSV goes next to it
    FitConfig config;
};

struct FitOutcome {
    GaussianBank bank;
    std::string bank_sha256;  // of the written file
    fs::path correlation_csv;
};

inline fs::path correlation_path_for(const fs::path& bank_path) {
    auto p = bank_path;
    p.replace_extension(".correlation.csv");
    return p;
}

inline FitOutcome cmd_fit(const FitCommand& cmd) {
    const DatasetManifest manifest = load_manifest(cmd.manifest);
    FitOutcome out{fit_bank(manifest, cmd.config), {}, correlation_path_for(cmd.out)};
    const std::string text = serialize_bank(out.bank);
    if (cmd.out.has_parent_path()) fs::create_directories(cmd.out.parent_path());
    detail::write_file_atomic(cmd.out, text);
    out.bank_sha256 = detail::sha256_hex(text);
    std::string corr;
    try {
        corr = correlation_csv(class_correlation(out.bank), out.bank.registry);
    } catch (const SchemaError& e) {
        corr = std::string("# ") + e.what() + "\n";
    }
    detail::write_file_atomic(out.correlation_csv, corr);
    return out;
}

// ---- eval ------------------------------------------------------------------------

enum class GridMode { per_image, global };

struct EvalConfig {
    fs::path bank;
    std::vector<fs::path> manifests;
    fs::path out_dir;
    std::size_t points = kDefaultSweepPoints;
    double abstain_threshold = kDefaultAbstainThreshold;
    std::vector<SafetyRequirement> requirements{SafetyRequirement{}};
    AucMode auc_mode = AucMode::pooled;
    std::size_t auc_subsample_cap = kDefaultAucSubsampleCap;
    std::uint64_t seed = 0;
    GridMode grid = GridMode::per_image;
    bool strict_per_image = false;
    bool export_distances = false;
    double simplex_tolerance = kDefaultSimplexTolerance;
    unsigned threads = 1;  // execution only

    void validate() const {
        if (points < 2) throw ConfigError("eval: --points must be >= 2");
        if (!(abstain_threshold >= 0.0 && abstain_threshold < 1.0)) throw ConfigError("eval: --abstain must lie in [0, 1)");
        if (manifests.empty()) throw ConfigError("eval: at least one --manifest is required");
        if (requirements.empty()) throw ConfigError("eval: at least one requirement is required");
        for (const auto& r : requirements) r.validate();
        if (auc_subsample_cap == 0) throw ConfigError("eval: AUC subsample cap must be > 0");
        if (!fs::exists(bank)) throw ConfigError("eval: bank not found: " + bank.string());
        for (const auto& m : manifests) {
            if (!fs::exists(m)) throw ConfigError("eval: manifest not found: " + m.string());
        }
    }

    /// Everything that can influence results (threads and output paths excluded).
    nlohmann::json to_json() const {
        nlohmann::json reqs = nlohmann::json::array();
        for (const auto& r : requirements) reqs.push_back({{"id", r.id}, {"max_risk", r.max_risk}, {"min_coverage", r.min_coverage}});
        nlohmann::json ms = nlohmann::json::array();
        for (const auto& m : manifests) ms.push_back(m.generic_string());
        return {{"bank", bank.generic_string()},
                {"manifests", ms},
                {"points", points},
                {"abstain_threshold", abstain_threshold},
                {"requirements", reqs},
                {"auc_mode", to_string(auc_mode)},
                {"auc_subsample_cap", auc_subsample_cap},
                {"seed", seed},
                {"grid", grid == GridMode::per_image ? "per-image" : "global"},
                {"strict_per_image", strict_per_image},
                {"simplex_tolerance", simplex_tolerance}};
    }
};

struct DatasetResult {
    std::string name;
    std::string location_tag;
    bool ok = false;
    std::string error;
    RiskCoverageCurve curve;
    AucResult auc;
    bool auc_subsampled = false;
    std::vector<GateVerdict> verdicts;
    std::vector<StrictGateResult> strict;
    std::vector<std::size_t> risk_increase_indices;
    ConfusionTotals pooled_totals;
};

/// predict -> distance map -> sweep -> aggregate -> AUC -> gates for one
/// dataset. Images run in parallel batches; every reduction folds in
/// manifest order, so results do not depend on `cfg.threads`.
inline DatasetResult evaluate_dataset(const GaussianBank& bank, const DatasetManifest& manifest, const EvalConfig& cfg,
                                      const fs::path& distance_dir = {}) {
    if (!(manifest.registry == bank.registry)) throw SchemaError("eval: manifest registry differs from the bank's");
    if (manifest.samples.empty()) throw EmptyDatasetError("eval: manifest '" + manifest.name + "' has no samples");
    DatasetResult res;
    res.name = manifest.name;
    res.location_tag = manifest.location_tag;
    const std::size_t k = bank.num_classes();
    const std::size_t n = manifest.samples.size();

    struct Scored {
        Sample sample;
        PredictionMap pred;
        DistanceMap dmap;
    };
    auto score = [&](std::size_t i) {
        Sample s = load_sample(manifest.samples[i], manifest.registry, cfg.simplex_tolerance);
        PredictionMap pred = predict(s.tensor, cfg.abstain_threshold);
        DistanceMap dmap = mahalanobis_map(s.tensor, pred, bank);
        return Scored{std::move(s), std::move(pred), std::move(dmap)};
    };

    std::optional<std::vector<double>> global_grid;
    if (cfg.grid == GridMode::global) {
        std::vector<DistanceStats> stats(n);
        detail::parallel_for(n, cfg.threads, [&](std::size_t i) {
            const Scored sc = score(i);
            stats[i] = distance_stats(sc.dmap, sc.sample.mask);
        });
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& st : stats) {
            if (st.empty) continue;
            lo = std::min(lo, st.md_min);
            hi = std::max(hi, st.md_max);
        }
        if (std::isfinite(lo)) global_grid = threshold_grid(lo, hi, cfg.points);
    }

    std::vector<ImageSweep> sweeps(n);
    AucAccumulator auc(cfg.auc_mode, cfg.auc_subsample_cap, cfg.seed);
    const std::size_t batch = std::max<std::size_t>(1, 4 * static_cast<std::size_t>(cfg.threads));
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(start + batch, n);
        std::vector<ScoreSamples> scores(end - start);
        detail::parallel_for(end - start, cfg.threads, [&](std::size_t j) {
            const std::size_t i = start + j;
            const Scored sc = score(i);
            ImageSweep sw = global_grid ? sweep_image_on_grid(sc.dmap, sc.pred, sc.sample.mask, k, *global_grid)
                                        : sweep_image(sc.dmap, sc.pred, sc.sample.mask, k, cfg.points);
            sw.sample_id = manifest.samples[i].sample_id;
            sweeps[i] = std::move(sw);
            scores[j] = score_samples(sc.dmap, sc.pred, sc.sample.mask);
            if (!distance_dir.empty()) {
                write_float_image(distance_dir / (manifest.samples[i].sample_id + ".dist.npy"), sc.dmap.height,
                                  sc.dmap.width, sc.dmap.distances);
            }
        });
        for (const auto& s : scores) auc.add(s);
    }

    res.curve = aggregate_dataset(sweeps);
    res.auc = auc.result();
    res.auc_subsampled = auc.subsampled();
    res.pooled_totals = ConfusionTotals(k);
    for (const auto& s : sweeps) {
        if (!s.excluded) res.pooled_totals += s.baseline_totals;
    }
    for (const auto& req : cfg.requirements) {
        res.verdicts.push_back(evaluate_gate(res.curve, req));
        if (cfg.strict_per_image) res.strict.push_back(evaluate_gate_per_image(sweeps, req));
    }
    res.risk_increase_indices = risk_increases_when_tightening(res.curve);
    res.ok = true;
    return res;
}

inline std::string sanitize_name(const std::string& name) {
    std::string out;
    for (char c : name) {
        out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') ? c : '_');
    }
    return out.empty() ? "dataset" : out;
}

inline nlohmann::json json_number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json dataset_json(const DatasetResult& r, const EvalConfig& cfg, const std::string& curve_file,
                                   const std::string& totals_file) {
    nlohmann::json j = {{"name", r.name}, {"location_tag", r.location_tag}, {"status", r.ok ? "ok" : "failed"}};
    if (!r.ok) {
        j["error"] = r.error;
        return j;
    }
    nlohmann::json verdicts = nlohmann::json::array();
    for (std::size_t i = 0; i < r.verdicts.size(); ++i) {
        auto v = to_json(r.verdicts[i]);
        if (!r.strict.empty()) {
            v["strict_per_image"] = {{"pass", r.strict[i].pass},
                                     {"images_passed", r.strict[i].images_passed},
                                     {"images_evaluated", r.strict[i].images_evaluated}};
        }
        verdicts.push_back(v);
    }
    j["curve_file"] = curve_file;
    j["totals_file"] = totals_file;
    j["grid"] = cfg.grid == GridMode::per_image ? "per-image" : "global (fixed grid, online-monitor study)";
    j["n_images"] = r.curve.n_images;
    j["n_excluded"] = r.curve.n_excluded;
    j["warnings"] = r.curve.warnings;
    j["baseline_iou"] = r.curve.baseline_iou;
    j["baseline_coverage"] = r.curve.baseline_coverage;
    j["pooled_iou"] = r.curve.pooled_iou;
    j["miou_averaging"] = "macro over classes with nonzero union";
    j["auc"] = {{"value", json_number_or_null(r.auc.value)},
                {"mode", to_string(cfg.auc_mode)},
                {"n_pos", r.auc.n_pos},
                {"n_neg", r.auc.n_neg},
                {"subsampled", r.auc_subsampled}};
    if (!r.auc.reason.empty()) j["auc"]["reason"] = r.auc.reason;
    j["risk_non_monotone"] = !r.risk_increase_indices.empty();
    j["risk_increase_indices"] = r.risk_increase_indices;
    j["verdicts"] = verdicts;
    j["in_distribution"] = std::all_of(r.verdicts.begin(), r.verdicts.end(), [](const auto& v) { return v.pass; });
    return j;
}

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct EvalOutcome {
    nlohmann::json report;
    fs::path report_path;
    std::vector<DatasetResult> datasets;
    bool all_ok = true;
};

/// Writes one <dataset>.curve.csv and <dataset>.totals.json per manifest and a
/// consolidated report.json into cfg.out_dir. Dataset failures are recorded
/// in the report rather than aborting the run.
inline EvalOutcome cmd_eval(const EvalConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const GaussianBank bank = load_bank(cfg.bank);
    const auto bank_bytes = detail::read_file_bytes(cfg.bank);

    EvalOutcome out;
    out.report_path = cfg.out_dir / "report.json";
    nlohmann::json datasets = nlohmann::json::array();
    std::map<std::string, int> used_names;
    for (const auto& mpath : cfg.manifests) {
        DatasetResult r;
        std::string stem;
        try {
            const DatasetManifest manifest = load_manifest(mpath);
            r.name = manifest.name;
            stem = sanitize_name(manifest.name);
            if (const int seen = used_names[stem]++; seen > 0) stem += "_" + std::to_string(seen);
            fs::path dist_dir;
            if (cfg.export_distances) {
                dist_dir = cfg.out_dir / (stem + ".distances");
                fs::create_directories(dist_dir);
            }
            r = evaluate_dataset(bank, manifest, cfg, dist_dir);
        } catch (const Error& e) {
            r.ok = false;
            r.error = e.what();
            if (r.name.empty()) r.name = mpath.generic_string();
        }
        std::string curve_file, totals_file;
        if (r.ok) {
            curve_file = stem + ".curve.csv";
            totals_file = stem + ".totals.json";
            detail::write_file_atomic(cfg.out_dir / curve_file, curve_to_csv(r.curve));
            nlohmann::json totals = {{"tp", r.pooled_totals.tp}, {"fp", r.pooled_totals.fp}, {"fn", r.pooled_totals.fn},
                                     {"pooled_iou", r.curve.pooled_iou},
                                     {"auc", {{"value", json_number_or_null(r.auc.value)}, {"n_pos", r.auc.n_pos}, {"n_neg", r.auc.n_neg}}}};
            detail::write_file_atomic(cfg.out_dir / totals_file, totals.dump(1) + "\n");
        }
        out.all_ok = out.all_ok && r.ok;
        datasets.push_back(dataset_json(r, cfg, curve_file, totals_file));
        out.datasets.push_back(std::move(r));
    }

    const nlohmann::json config = cfg.to_json();
    out.report = {{"schema", 1},
                  {"metadata", {{"tool", "mdsafe"},
                                {"version", kToolVersion},
                                {"config_hash", detail::sha256_hex(config.dump())},
                                {"bank_sha256", detail::sha256_hex(bank_bytes)},
                                {"bank_provenance", {{"manifest_name", bank.provenance.manifest_name},
                                                     {"manifest_hash", bank.provenance.manifest_hash}}},
                                {"generated_at", utc_timestamp()}}},
                  {"config", config},
                  {"datasets", datasets}};
    detail::write_file_atomic(out.report_path, out.report.dump(2) + "\n");
    return out;
}

/// Report bytes with the timestamp removed; identical runs hash identically.
inline std::string report_fingerprint(nlohmann::json report) {
    report["metadata"].erase("generated_at");
    return detail::sha256_hex(report.dump());
}

// ---- gate ------------------------------------------------------------------------

inline nlohmann::json cmd_gate(const fs::path& curve_csv, const std::vector<SafetyRequirement>& requirements) {
    const auto points = load_curve_csv(curve_csv);
    nlohmann::json verdicts = nlohmann::json::array();
    bool all = true;
    for (const auto& r : requirements) {
        const GateVerdict v = evaluate_gate(points, r);
        all = all && v.pass;
        verdicts.push_back(to_json(v));
    }
    return {{"curve", curve_csv.generic_string()}, {"verdicts", verdicts}, {"in_distribution", all}};
}

// ---- synth -----------------------------------------------------------------------

inline synth::GeneratedDataset cmd_synth(const fs::path& spec_path, const fs::path& out_dir) {
    const auto bytes = detail::read_file_bytes(spec_path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("synth spec " + spec_path.string() + ": " + e.what());
    }
    return synth::generate(synth::spec_from_json(j), out_dir);
}

}  // namespace mdsafe
