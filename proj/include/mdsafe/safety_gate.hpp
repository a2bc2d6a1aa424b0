#pragma once

// Safety requirements over a risk-coverage curve: the largest coverage that
// keeps risk within bound, the smallest risk that keeps coverage above bound,
// and the combined pass/fail verdict. Only realized sweep points count; no
// interpolation, and degenerate (zero-acceptance) points never qualify.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdsafe/error.hpp"
#include "mdsafe/risk_coverage.hpp"

namespace mdsafe {

struct SafetyRequirement {
    std::string id = "FS1";
    double max_risk = 0.15;
    double min_coverage = 0.50;

    void validate() const {
        if (!(max_risk >= 0.0 && max_risk <= 1.0)) throw ConfigError("requirement " + id + ": max_risk outside [0, 1]");
        if (!(min_coverage >= 0.0 && min_coverage <= 1.0)) {
            throw ConfigError("requirement " + id + ": min_coverage outside [0, 1]");
        }
    }
};

struct OperatingPoint {
    double value = 0.0;  // coverage or risk, depending on the query
    std::size_t threshold_index = 0;
};

/// Max coverage over non-degenerate points with risk <= max_risk.
/// Ties prefer lower risk, then the lower index.
inline std::optional<OperatingPoint> max_coverage_at_risk(std::span<const CurvePoint> points, double max_risk) {
    const CurvePoint* best = nullptr;
    for (const auto& p : points) {
        if (p.degenerate() || !(p.risk_mean <= max_risk)) continue;
        if (best == nullptr || p.coverage_mean > best->coverage_mean ||
            (p.coverage_mean == best->coverage_mean &&
             (p.risk_mean < best->risk_mean ||
              (p.risk_mean == best->risk_mean && p.threshold_index < best->threshold_index)))) {
            best = &p;
        }
    }
    if (best == nullptr) return std::nullopt;
    return OperatingPoint{best->coverage_mean, best->threshold_index};
}

/// Min risk over non-degenerate points with coverage >= min_coverage.
/// Ties prefer higher coverage, then the lower index.
inline std::optional<OperatingPoint> min_risk_at_coverage(std::span<const CurvePoint> points, double min_coverage) {
    const CurvePoint* best = nullptr;
    for (const auto& p : points) {
        if (p.degenerate() || !(p.coverage_mean >= min_coverage)) continue;
        if (best == nullptr || p.risk_mean < best->risk_mean ||
            (p.risk_mean == best->risk_mean &&
             (p.coverage_mean > best->coverage_mean ||
              (p.coverage_mean == best->coverage_mean && p.threshold_index < best->threshold_index)))) {
            best = &p;
        }
    }
    if (best == nullptr) return std::nullopt;
    return OperatingPoint{best->risk_mean, best->threshold_index};
}

struct GateVerdict {
    SafetyRequirement requirement;
    bool pass = false;
    std::optional<double> fs_coverage;
    std::optional<std::size_t> threshold_index;
    std::optional<double> elicited_risk;
    std::optional<std::size_t> elicited_index;
    std::string aggregation = "dataset-mean-by-threshold-index";

    bool in_distribution() const { return pass; }
};

/// Passes iff some realized point meets both bounds; equivalently, the max
/// coverage within the risk bound reaches min_coverage.
inline GateVerdict evaluate_gate(std::span<const CurvePoint> points, const SafetyRequirement& req) {
    req.validate();
    GateVerdict v;
    v.requirement = req;
    if (auto fs = max_coverage_at_risk(points, req.max_risk)) {
        v.fs_coverage = fs->value;
        v.threshold_index = fs->threshold_index;
    }
    if (auto el = min_risk_at_coverage(points, req.min_coverage)) {
        v.elicited_risk = el->value;
        v.elicited_index = el->threshold_index;
    }
    v.pass = v.fs_coverage.has_value() && *v.fs_coverage >= req.min_coverage;
    return v;
}

inline GateVerdict evaluate_gate(const RiskCoverageCurve& curve, const SafetyRequirement& req) {
    return evaluate_gate(curve.points, req);
}

/// A single image's sweep viewed as a curve.
inline std::vector<CurvePoint> image_curve(const ImageSweep& s) {
    std::vector<CurvePoint> out;
    out.reserve(s.points.size());
    for (const auto& p : s.points) {
        out.push_back({p.threshold_index, p.epsilon, p.risk, p.coverage, static_cast<std::size_t>(p.degenerate)});
    }
    return out;
}

struct StrictGateResult {
    bool pass = false;
    std::size_t images_passed = 0;
    std::size_t images_evaluated = 0;
};

/// Strict mode (off by default): every usable image must pass on its own curve.
inline StrictGateResult evaluate_gate_per_image(std::span<const ImageSweep> sweeps, const SafetyRequirement& req) {
    StrictGateResult r;
    for (const auto& s : sweeps) {
        if (s.excluded) continue;
        ++r.images_evaluated;
        r.images_passed += evaluate_gate(image_curve(s), req).pass;
    }
    r.pass = r.images_evaluated > 0 && r.images_passed == r.images_evaluated;
    return r;
}

inline nlohmann::json to_json(const GateVerdict& v) {
    auto opt = [](const auto& o) { return o ? nlohmann::json(*o) : nlohmann::json(); };
    return {{"requirement", {{"id", v.requirement.id},
                             {"max_risk", v.requirement.max_risk},
                             {"min_coverage", v.requirement.min_coverage}}},
            {"pass", v.pass},
            {"fs_coverage", opt(v.fs_coverage)},
            {"elicited_risk", opt(v.elicited_risk)},
            {"threshold_index", opt(v.threshold_index)},
            {"elicited_threshold_index", opt(v.elicited_index)},
            {"in_distribution", v.in_distribution()},
            {"aggregation", v.aggregation}};
}

}  // namespace mdsafe
