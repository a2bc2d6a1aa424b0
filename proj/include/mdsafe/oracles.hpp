#pragma once

// Independent brute-force reference implementations used by the test and
// acceptance suites. Deliberately self-contained: nothing here includes or
// calls the main implementation headers.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace mdsafe::oracle {

/// sqrt((o - mean) . x) where (cov + lambda I) x = (o - mean), solved by
/// Gaussian elimination with partial pivoting. `cov` is row-major k x k.
inline double mahalanobis(const std::vector<double>& o, const std::vector<double>& mean,
                          const std::vector<double>& cov, double lambda) {
    const std::size_t k = o.size();
    std::vector<std::vector<double>> a(k, std::vector<double>(k + 1));
    std::vector<double> r(k);
    for (std::size_t i = 0; i < k; ++i) {
        r[i] = o[i] - mean[i];
        for (std::size_t j = 0; j < k; ++j) a[i][j] = cov[i * k + j] + (i == j ? lambda : 0.0);
        a[i][k] = r[i];
    }
    for (std::size_t col = 0; col < k; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < k; ++i) {
            if (std::abs(a[i][col]) > std::abs(a[piv][col])) piv = i;
        }
        if (a[piv][col] == 0.0) throw std::runtime_error("oracle: singular system");
        std::swap(a[col], a[piv]);
        for (std::size_t i = col + 1; i < k; ++i) {
            const double f = a[i][col] / a[col][col];
            for (std::size_t j = col; j <= k; ++j) a[i][j] -= f * a[col][j];
        }
    }
    std::vector<double> x(k);
    for (std::size_t i = k; i-- > 0;) {
        double s = a[i][k];
        for (std::size_t j = i + 1; j < k; ++j) s -= a[i][j] * x[j];
        x[i] = s / a[i][i];
    }
    double q = 0.0;
    for (std::size_t i = 0; i < k; ++i) q += r[i] * x[i];
    return std::sqrt(std::max(q, 0.0));
}

/// O(n^2) pair count: (#pos > neg + 0.5 #ties) / (n_pos n_neg).
inline double auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.empty() || neg.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::uint64_t twice = 0;
    for (double p : pos) {
        for (double n : neg) twice += p > n ? 2 : (p == n ? 1 : 0);
    }
    return static_cast<double>(twice) / (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

struct IouOracle {
    double miou = 0.0;
    bool degenerate = true;
};

/// Set-based per-class |pred==c and label==c| / |pred==c or label==c| over
/// pixels that are accepted and not labeled `ignore`.
inline IouOracle iou(const std::vector<int>& pred, const std::vector<int>& label, const std::vector<bool>& accept,
                     int k, int ignore) {
    IouOracle out;
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t p = 0; p < pred.size(); ++p) {
            if (!accept[p] || label[p] == ignore) continue;
            const bool in_pred = pred[p] == c;
            const bool in_label = label[p] == c;
            inter += in_pred && in_label;
            uni += in_pred || in_label;
        }
        if (uni == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++present;
    }
    out.degenerate = present == 0;
    out.miou = present == 0 ? 0.0 : sum / present;
    return out;
}

/// Pearson correlation from explicit covariance and standard deviations.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb) / n;
        va += (a[i] - ma) * (a[i] - ma) / n;
        vb += (b[i] - mb) * (b[i] - mb) / n;
    }
    if (va == 0.0 || vb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return cov / (std::sqrt(va) * std::sqrt(vb));
}

}  // namespace mdsafe::oracle
