#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mdsafe/dataset_io.hpp"
#include "mdsafe/detail/parallel.hpp"
#include "mdsafe/error.hpp"
#include "mdsafe/gaussian_bank.hpp"

namespace mdsafe {

inline constexpr ClassId kNoClass = -1;
inline constexpr double kDefaultAbstainThreshold = 0.5;
// Quadratic forms in [-kNegativeFormTolerance, 0) are rounding noise and clamp to 0.
inline constexpr double kNegativeFormTolerance = 1e-9;

struct PredictionMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<ClassId> predicted;  // kNoClass where abstained
    std::vector<std::uint8_t> abstained;
    std::vector<float> max_prob;

    std::size_t num_pixels() const { return predicted.size(); }
};

/// Argmax per pixel (lowest id wins ties). A pixel abstains when its
/// maximum probability does not exceed `abstain_threshold`; 0 disables it.
inline PredictionMap predict(const SoftmaxTensor& tensor, double abstain_threshold = kDefaultAbstainThreshold) {
    if (!(abstain_threshold >= 0.0 && abstain_threshold < 1.0)) {
        throw ConfigError("predict: abstain threshold must lie in [0, 1)");
    }
    PredictionMap m;
    m.height = tensor.height();
    m.width = tensor.width();
    const std::size_t n = tensor.num_pixels();
    m.predicted.resize(n);
    m.abstained.resize(n);
    m.max_prob.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        const auto o = tensor.pixel(p);
        const auto it = std::max_element(o.begin(), o.end());
        m.max_prob[p] = *it;
        m.abstained[p] = static_cast<double>(*it) <= abstain_threshold;
        m.predicted[p] = m.abstained[p] ? kNoClass : static_cast<ClassId>(it - o.begin());
    }
    return m;
}

struct DistanceMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> distances;  // +inf for abstained pixels and invalid classes

    std::size_t num_pixels() const { return distances.size(); }
};

/// Square root of the quadratic form (o - mean)^T P (o - mean). Throws
/// NumericalError if the form is meaningfully negative.
template <typename T>
double mahalanobis(std::span<const T> o, const VectorXd& mean, const MatrixXd& precision) {
    const auto k = static_cast<std::size_t>(mean.size());
    double diff_buf[64];
    std::vector<double> diff_heap;
    double* diff = diff_buf;
    if (k > 64) {
        diff_heap.resize(k);
        diff = diff_heap.data();
    }
    for (std::size_t i = 0; i < k; ++i) diff[i] = static_cast<double>(o[i]) - mean[static_cast<Eigen::Index>(i)];
    double q = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        if (diff[j] == 0.0) continue;
        double col = 0.0;
        const double* pj = precision.data() + j * k;  // column j (column-major)
        for (std::size_t i = 0; i < k; ++i) col += pj[i] * diff[i];
        q += diff[j] * col;
    }
    if (q < -kNegativeFormTolerance) {
        throw NumericalError("mahalanobis: quadratic form " + detail::format_double(q) + " is negative");
    }
    return q <= 0.0 ? 0.0 : std::sqrt(q);
}

inline double mahalanobis(std::span<const float> o, const ClassGaussian& g) {
    return mahalanobis<float>(o, g.mean, g.precision);
}

/// Builds a ClassGaussian around a given mean and covariance, computing the
/// precision exactly as fit_gaussian does.
inline ClassGaussian make_class_gaussian(const VectorXd& mean, const MatrixXd& covariance, double lambda,
                                         ClassId class_id = 0) {
    ClassGaussian g;
    g.class_id = class_id;
    g.mean = mean;
    g.covariance = covariance;
    g.lambda = lambda;
    g.valid = true;
    g.precision = regularized_precision(covariance, lambda, class_id);
    return g;
}

/// Distance of every pixel to the Gaussian of its predicted class. Rows are
/// processed independently, so any thread count gives identical output.
inline DistanceMap mahalanobis_map(const SoftmaxTensor& tensor, const PredictionMap& pred, const GaussianBank& bank,
                                   unsigned threads = 1) {
    if (bank.num_classes() != tensor.num_classes()) {
        throw SchemaError("scoring: bank has K=" + std::to_string(bank.num_classes()) + " but tensor has K=" +
                          std::to_string(tensor.num_classes()));
    }
    if (pred.num_pixels() != tensor.num_pixels()) throw SchemaError("scoring: prediction map does not match tensor");
    DistanceMap d;
    d.height = tensor.height();
    d.width = tensor.width();
    d.distances.assign(tensor.num_pixels(), std::numeric_limits<double>::infinity());
    detail::parallel_for(tensor.height(), threads, [&](std::size_t row) {
        for (std::size_t p = row * tensor.width(); p < (row + 1) * tensor.width(); ++p) {
            if (pred.abstained[p]) continue;
            const auto& g = bank[static_cast<std::size_t>(pred.predicted[p])];
            if (!g.valid) continue;
            d.distances[p] = mahalanobis(tensor.pixel(p), g);
        }
    });
    return d;
}

struct DistanceStats {
    double md_min = 0.0;
    double md_max = 0.0;
    bool empty = true;
    std::size_t eligible = 0;
};

/// Extrema over labeled pixels with a finite distance (abstained and
/// invalid-class pixels carry +inf and drop out).
inline DistanceStats distance_stats(const DistanceMap& dmap, const LabelMask& mask) {
    DistanceStats s;
    s.md_min = std::numeric_limits<double>::infinity();
    s.md_max = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < dmap.num_pixels(); ++p) {
        const double v = dmap.distances[p];
        if (!mask.labeled(p) || !std::isfinite(v)) continue;
        s.md_min = std::min(s.md_min, v);
        s.md_max = std::max(s.md_max, v);
        ++s.eligible;
    }
    s.empty = s.eligible == 0;
    if (s.empty) s.md_min = s.md_max = 0.0;
    return s;
}

}  // namespace mdsafe
