#pragma once

// Discriminator thresholding, risk = 1 - mIoU over the accepted pixels,
// coverage, the per-image threshold sweep and its dataset aggregation, and
// the AUC separating correct from misclassified pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/error.hpp"
#include "mdsafe/gaussian_bank.hpp"
#include "mdsafe/pixel_scoring.hpp"

namespace mdsafe {

inline constexpr std::size_t kDefaultSweepPoints = 60;
inline constexpr double kFinalPointNudge = 1e-9;
inline constexpr std::size_t kDefaultAucSubsampleCap = 10'000'000;

using AcceptMask = std::vector<std::uint8_t>;

/// Pixel accepted iff the model did not abstain and distance < epsilon.
inline AcceptMask accepted_subset(const DistanceMap& dmap, const PredictionMap& pred, double epsilon) {
    AcceptMask accept(dmap.num_pixels());
    for (std::size_t p = 0; p < accept.size(); ++p) accept[p] = !pred.abstained[p] && dmap.distances[p] < epsilon;
    return accept;
}

struct ConfusionTotals {
    std::vector<std::uint64_t> tp, fp, fn;

    explicit ConfusionTotals(std::size_t k = 0) : tp(k, 0), fp(k, 0), fn(k, 0) {}

    std::size_t num_classes() const { return tp.size(); }

    ConfusionTotals& operator+=(const ConfusionTotals& o) {
        for (std::size_t c = 0; c < tp.size(); ++c) {
            tp[c] += o.tp[c];
            fp[c] += o.fp[c];
            fn[c] += o.fn[c];
        }
        return *this;
    }
};

struct IouResult {
    double miou = 0.0;
    bool degenerate = true;  // no class with a nonzero union
    std::size_t classes_present = 0;
    ConfusionTotals totals;
};

/// Macro mean of TP / (TP + FP + FN) over classes whose union is nonzero.
inline IouResult miou_from_totals(const ConfusionTotals& t) {
    IouResult r;
    r.totals = t;
    double sum = 0.0;
    for (std::size_t c = 0; c < t.num_classes(); ++c) {
        const std::uint64_t uni = t.tp[c] + t.fp[c] + t.fn[c];
        if (uni == 0) continue;
        sum += static_cast<double>(t.tp[c]) / static_cast<double>(uni);
        ++r.classes_present;
    }
    r.degenerate = r.classes_present == 0;
    r.miou = r.degenerate ? 0.0 : sum / static_cast<double>(r.classes_present);
    return r;
}

/// Confusion over pixels that are both accepted and labeled.
inline IouResult iou(const PredictionMap& pred, const LabelMask& mask, const AcceptMask& accept, std::size_t k) {
    ConfusionTotals t(k);
    for (std::size_t p = 0; p < accept.size(); ++p) {
        if (!accept[p] || !mask.labeled(p)) continue;
        const auto label = static_cast<std::size_t>(mask.at(p));
        const auto guess = static_cast<std::size_t>(pred.predicted[p]);
        if (label == guess) {
            ++t.tp[label];
        } else {
            ++t.fp[guess];
            ++t.fn[label];
        }
    }
    return miou_from_totals(t);
}

inline std::size_t count_labeled(const LabelMask& mask) {
    std::size_t n = 0;
    for (std::size_t p = 0; p < mask.num_pixels(); ++p) n += mask.labeled(p);
    return n;
}

struct SweepPoint {
    std::size_t threshold_index = 0;
    double epsilon = 0.0;
    double risk = 0.0;
    double coverage = 0.0;
    bool degenerate = false;  // nothing accepted among labeled pixels
};

struct ImageSweep {
    std::string sample_id;
    bool excluded = false;
    std::string warning;
    DistanceStats stats;
    std::vector<SweepPoint> points;
    double baseline_iou = 0.0;
    double baseline_coverage = 0.0;
    ConfusionTotals baseline_totals;
};

/// T thresholds spaced linearly over [lo, hi]; the last one is nudged just
/// above hi so the strict comparison still accepts the hi pixel.
inline std::vector<double> threshold_grid(double lo, double hi, std::size_t points) {
    if (points < 2) throw ConfigError("sweep: need at least 2 threshold points");
    std::vector<double> eps(points);
    for (std::size_t i = 0; i + 1 < points; ++i) {
        eps[i] = lo + (hi - lo) * (static_cast<double>(i) / static_cast<double>(points - 1));
    }
    double last = hi * (1.0 + kFinalPointNudge);
    if (!(last > hi)) last = std::nextafter(hi, std::numeric_limits<double>::infinity());
    eps[points - 1] = last;
    return eps;
}

/// Risk and coverage at each of the given thresholds for one image.
inline ImageSweep sweep_image_on_grid(const DistanceMap& dmap, const PredictionMap& pred, const LabelMask& mask,
                                      std::size_t k, std::span<const double> epsilons) {
    ImageSweep s;
    s.stats = distance_stats(dmap, mask);
    if (s.stats.empty) {
        s.excluded = true;
        s.warning = "no labeled, non-abstained pixel with a finite distance";
        return s;
    }
    const double labeled = static_cast<double>(count_labeled(mask));
    auto coverage_of = [&](const AcceptMask& a) {
        std::size_t n = 0;
        for (std::size_t p = 0; p < a.size(); ++p) n += a[p] && mask.labeled(p);
        return static_cast<double>(n) / labeled;
    };
    s.points.reserve(epsilons.size());
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
        const AcceptMask a = accepted_subset(dmap, pred, epsilons[i]);
        const IouResult r = iou(pred, mask, a, k);
        SweepPoint pt;
        pt.threshold_index = i;
        pt.epsilon = epsilons[i];
        pt.degenerate = r.degenerate;
        pt.risk = r.degenerate ? 0.0 : 1.0 - r.miou;
        pt.coverage = coverage_of(a);
        s.points.push_back(pt);
    }
    const AcceptMask all = accepted_subset(dmap, pred, std::numeric_limits<double>::infinity());
    const IouResult base = iou(pred, mask, all, k);
    s.baseline_iou = base.miou;
    s.baseline_coverage = coverage_of(all);
    s.baseline_totals = base.totals;
    return s;
}

/// Per-image sweep over T points between the image's own md_min and md_max.
inline ImageSweep sweep_image(const DistanceMap& dmap, const PredictionMap& pred, const LabelMask& mask,
                              std::size_t k, std::size_t points = kDefaultSweepPoints) {
    if (points < 2) throw ConfigError("sweep: need at least 2 threshold points");
    const DistanceStats st = distance_stats(dmap, mask);
    if (st.empty) return sweep_image_on_grid(dmap, pred, mask, k, {});
    const auto grid = threshold_grid(st.md_min, st.md_max, points);
    return sweep_image_on_grid(dmap, pred, mask, k, grid);
}

struct CurvePoint {
    std::size_t threshold_index = 0;
    double epsilon_mean = 0.0;
    double risk_mean = 0.0;
    double coverage_mean = 0.0;
    std::size_t n_degenerate = 0;

    // Every image degenerate at this index; equivalent to coverage_mean == 0.
    bool degenerate() const { return coverage_mean == 0.0; }
};

struct RiskCoverageCurve {
    std::vector<CurvePoint> points;
    double baseline_iou = 0.0;
    double baseline_coverage = 0.0;
    double pooled_iou = 0.0;  // mIoU of confusion totals summed over images
    std::size_t n_images = 0;
    std::size_t n_excluded = 0;
    std::vector<std::string> warnings;
};

/// Unweighted per-index means over the non-excluded images.
inline RiskCoverageCurve aggregate_dataset(std::span<const ImageSweep> sweeps) {
    RiskCoverageCurve curve;
    std::vector<const ImageSweep*> used;
    for (const auto& s : sweeps) {
        if (s.excluded) {
            ++curve.n_excluded;
            curve.warnings.push_back("image '" + s.sample_id + "' excluded: " + s.warning);
        } else {
            used.push_back(&s);
        }
    }
    if (used.empty()) throw EmptyDatasetError("aggregate: no usable images");
    const std::size_t t = used.front()->points.size();
    for (const auto* s : used) {
        if (s->points.size() != t) throw SchemaError("aggregate: images have different threshold counts");
    }
    const double n = static_cast<double>(used.size());
    curve.n_images = used.size();
    curve.points.resize(t);
    ConfusionTotals pooled(used.front()->baseline_totals.num_classes());
    for (const auto* s : used) {
        for (std::size_t i = 0; i < t; ++i) {
            auto& cp = curve.points[i];
            const auto& sp = s->points[i];
            cp.threshold_index = i;
            cp.epsilon_mean += sp.epsilon;
            cp.risk_mean += sp.risk;
            cp.coverage_mean += sp.coverage;
            cp.n_degenerate += sp.degenerate;
        }
        curve.baseline_iou += s->baseline_iou;
        curve.baseline_coverage += s->baseline_coverage;
        pooled += s->baseline_totals;
    }
    for (auto& cp : curve.points) {
        cp.epsilon_mean /= n;
        cp.risk_mean /= n;
        cp.coverage_mean /= n;
    }
    curve.baseline_iou /= n;
    curve.baseline_coverage /= n;
    curve.pooled_iou = miou_from_totals(pooled).miou;
    return curve;
}

/// Indices i where risk at i-1 exceeds risk at i, i.e. tightening the
/// threshold from i to i-1 increased risk. Degenerate points are skipped.
inline std::vector<std::size_t> risk_increases_when_tightening(const RiskCoverageCurve& curve) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < curve.points.size(); ++i) {
        const auto& a = curve.points[i - 1];
        const auto& b = curve.points[i];
        if (a.degenerate() || b.degenerate()) continue;
        if (a.risk_mean > b.risk_mean) out.push_back(i);
    }
    return out;
}

// ---- AUC -----------------------------------------------------------------------

struct AucResult {
    double value = std::numeric_limits<double>::quiet_NaN();
    std::string reason;  // set when value is NaN
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
};

/// Exact Mann-Whitney AUC with average ranks for ties:
/// P(pos > neg) + 0.5 P(pos == neg). NaN when a population is empty.
inline AucResult auc_mann_whitney(std::span<const double> pos, std::span<const double> neg) {
    AucResult r;
    r.n_pos = pos.size();
    r.n_neg = neg.size();
    if (pos.empty() || neg.empty()) {
        r.reason = pos.empty() ? "no positive (correctly classified) pixels" : "no negative (misclassified) pixels";
        return r;
    }
    struct Item {
        double score;
        bool positive;
    };
    std::vector<Item> all;
    all.reserve(pos.size() + neg.size());
    for (double s : pos) all.push_back({s, true});
    for (double s : neg) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

    // Twice the positive rank sum stays integral with average ranks.
    unsigned __int128 twice_rank_sum = 0;
    for (std::size_t lo = 0; lo < all.size();) {
        std::size_t hi = lo + 1;
        while (hi < all.size() && all[hi].score == all[lo].score) ++hi;
        const unsigned __int128 twice_rank = static_cast<unsigned __int128>(lo + 1 + hi);  // ranks lo+1..hi
        for (std::size_t i = lo; i < hi; ++i) twice_rank_sum += all[i].positive ? twice_rank : 0;
        lo = hi;
    }
    const auto np = static_cast<unsigned __int128>(pos.size());
    const auto nn = static_cast<unsigned __int128>(neg.size());
    const unsigned __int128 twice_u = twice_rank_sum - np * (np + 1);
    r.value = static_cast<double>(twice_u) / static_cast<double>(2 * np * nn);
    return r;
}

struct ScoreSamples {
    std::vector<double> pos;  // scores (-distance) of correctly classified pixels
    std::vector<double> neg;  // scores of misclassified pixels
};

/// Scores of labeled, non-abstained pixels split by correctness.
inline ScoreSamples score_samples(const DistanceMap& dmap, const PredictionMap& pred, const LabelMask& mask) {
    ScoreSamples s;
    for (std::size_t p = 0; p < dmap.num_pixels(); ++p) {
        if (pred.abstained[p] || !mask.labeled(p)) continue;
        (pred.predicted[p] == mask.at(p) ? s.pos : s.neg).push_back(-dmap.distances[p]);
    }
    return s;
}

enum class AucMode { pooled, per_image };

inline std::string to_string(AucMode m) { return m == AucMode::pooled ? "pooled" : "per-image"; }

/// Dataset AUC built incrementally. Pooled mode folds images, in the order
/// they are added, through one seeded reservoir per population (capacity
/// `subsample_cap`); per-image mode averages the defined per-image AUCs.
class AucAccumulator {
public:
    explicit AucAccumulator(AucMode mode, std::size_t subsample_cap = kDefaultAucSubsampleCap, std::uint64_t seed = 0)
        : mode_(mode), cap_(subsample_cap), rng_(seed) {}

    void add(const ScoreSamples& im) {
        total_pos_ += im.pos.size();
        total_neg_ += im.neg.size();
        if (mode_ == AucMode::per_image) {
            const AucResult a = auc_mann_whitney(im.pos, im.neg);
            if (!std::isnan(a.value)) {
                per_image_sum_ += a.value;
                ++per_image_n_;
            }
            return;
        }
        for (double v : im.pos) offer(pos_, seen_pos_, v);
        for (double v : im.neg) offer(neg_, seen_neg_, v);
    }

    AucResult result() const {
        if (mode_ == AucMode::pooled) {
            AucResult r = auc_mann_whitney(pos_, neg_);
            r.n_pos = total_pos_;
            r.n_neg = total_neg_;
            return r;
        }
        AucResult r;
        r.n_pos = total_pos_;
        r.n_neg = total_neg_;
        if (per_image_n_ == 0) {
            r.reason = "no image has both correct and misclassified pixels";
        } else {
            r.value = per_image_sum_ / static_cast<double>(per_image_n_);
        }
        return r;
    }

    AucMode mode() const { return mode_; }
    bool subsampled() const { return seen_pos_ > cap_ || seen_neg_ > cap_; }

private:
    void offer(std::vector<double>& pool, std::uint64_t& seen, double v) {
        ++seen;
        if (pool.size() < cap_) {
            pool.push_back(v);
            return;
        }
        std::uniform_int_distribution<std::uint64_t> pick(0, seen - 1);
        const auto j = pick(rng_);
        if (j < cap_) pool[j] = v;
    }

    AucMode mode_;
    std::size_t cap_;
    std::mt19937_64 rng_;
    std::vector<double> pos_, neg_;
    std::uint64_t seen_pos_ = 0, seen_neg_ = 0;
    std::size_t total_pos_ = 0, total_neg_ = 0;
    double per_image_sum_ = 0.0;
    std::size_t per_image_n_ = 0;
};

inline AucResult dataset_auc(std::span<const ScoreSamples> images, AucMode mode,
                             std::size_t subsample_cap = kDefaultAucSubsampleCap, std::uint64_t seed = 0) {
    AucAccumulator acc(mode, subsample_cap, seed);
    for (const auto& im : images) acc.add(im);
    return acc.result();
}

}  // namespace mdsafe
