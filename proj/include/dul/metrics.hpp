#pragma once

// Matching scores and verification / identification statistics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <span>
#include <vector>

#include "dul/errors.hpp"

namespace dul {

/// dot(a, b) / (|a| |b|). Generic over the scalar so instrumented number
/// types can be plugged in.
template <typename T>
T cosine_score(std::span<const T> a, std::span<const T> b) {
    using std::sqrt;
    detail::require(a.size() == b.size() && !a.empty(), "cosine_score: length mismatch");
    T dot(0), na(0), nb(0);
    for (std::size_t l = 0; l < a.size(); ++l) {
        dot = dot + a[l] * b[l];
        na = na + a[l] * a[l];
        nb = nb + b[l] * b[l];
    }
    detail::require(na > T(0) && nb > T(0), "cosine_score: zero vector");
    return dot / (sqrt(na) * sqrt(nb));
}

/// Mutual likelihood score, log p(z1 = z2) for two diagonal Gaussians:
///   -1/2 sum_l [ (mu1 - mu2)^2 / (s1^2 + s2^2) + ln(s1^2 + s2^2) ] - D/2 ln 2pi
template <typename T>
T mls_score(std::span<const T> mu1, std::span<const T> sigma1, std::span<const T> mu2,
            std::span<const T> sigma2) {
    using std::log;
    const std::size_t d = mu1.size();
    detail::require(d > 0 && sigma1.size() == d && mu2.size() == d && sigma2.size() == d,
                    "mls_score: length mismatch");
    T acc(0);
    for (std::size_t l = 0; l < d; ++l) {
        detail::require(sigma1[l] > T(0) && sigma2[l] > T(0), "mls_score: sigma must be > 0");
        const T var = sigma1[l] * sigma1[l] + sigma2[l] * sigma2[l];
        const T diff = mu1[l] - mu2[l];
        acc = acc + diff * diff / var + log(var);
    }
    return T(-0.5) * acc - T(0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi));
}

struct ScorePair {
    double score = 0.0;
    bool genuine = false;
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocReport {
    std::vector<RocPoint> points;        // sorted by fpr, max-envelope applied
    std::map<double, double> tpr_at;     // target FPR -> TPR
    double interval_auc = 0.0;
};

inline constexpr double kAucFprLow = 1e-5;
inline constexpr double kAucFprHigh = 1e-3;

namespace detail {

// Max TPR over operating points with FPR <= target. Points must be sorted by
// fpr with non-decreasing tpr.
inline double envelope_tpr(const std::vector<RocPoint>& pts, double target) {
    double best = 0.0;
    for (const auto& p : pts) {
        if (p.fpr > target) break;
        best = std::max(best, p.tpr);
    }
    return best;
}

}  // namespace detail

/// Threshold sweep over every distinct score (accept when score >= threshold).
/// Interval AUC integrates the TPR step envelope over log10(FPR) on
/// [1e-5, 1e-3] and divides by the log-width.
inline RocReport roc(std::span<const ScorePair> pairs, std::span<const double> targets) {
    std::size_t n_gen = 0, n_imp = 0;
    for (const auto& p : pairs) {
        detail::require(std::isfinite(p.score), "roc: non-finite score");
        (p.genuine ? n_gen : n_imp) += 1;
    }
    detail::require(n_gen > 0 && n_imp > 0, "roc: need at least one genuine and one imposter pair");

    std::vector<ScorePair> sorted(pairs.begin(), pairs.end());
    std::sort(sorted.begin(), sorted.end(), [](const ScorePair& a, const ScorePair& b) { return a.score > b.score; });

    RocReport rep;
    rep.points.push_back({0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        const double v = sorted[i].score;
        for (; i < sorted.size() && sorted[i].score == v; ++i) (sorted[i].genuine ? tp : fp) += 1;
        rep.points.push_back({static_cast<double>(fp) / static_cast<double>(n_imp),
                              static_cast<double>(tp) / static_cast<double>(n_gen)});
    }
    // Both coordinates grow monotonically along a descending sweep, so the
    // points are already sorted and envelope-monotone.

    for (double t : targets) rep.tpr_at[t] = detail::envelope_tpr(rep.points, t);

    const double lo = std::log10(kAucFprLow), hi = std::log10(kAucFprHigh);
    // Step function breakpoints inside the interval.
    std::vector<double> knots{kAucFprLow};
    for (const auto& p : rep.points)
        if (p.fpr > kAucFprLow && p.fpr < kAucFprHigh) knots.push_back(p.fpr);
    knots.push_back(kAucFprHigh);
    double area = 0.0;
    for (std::size_t k = 0; k + 1 < knots.size(); ++k) {
        const double h = detail::envelope_tpr(rep.points, knots[k]);
        // Trapezoid over [knot_k, knot_k+1) on a flat step: exact.
        area += h * (std::log10(knots[k + 1]) - std::log10(knots[k]));
    }
    rep.interval_auc = std::clamp(area / (hi - lo), 0.0, 1.0);
    return rep;
}

/// Fraction of probes whose nearest gallery entry by cosine shares their
/// label. Ties go to the lowest gallery index.
template <typename T>
double rank1(const std::vector<std::vector<T>>& probes, std::span<const int> probe_labels,
             const std::vector<std::vector<T>>& gallery, std::span<const int> gallery_labels) {
    detail::require(!gallery.empty(), "rank1: empty gallery");
    detail::require(probes.size() == probe_labels.size() && gallery.size() == gallery_labels.size(),
                    "rank1: label count mismatch");
    detail::require(!probes.empty(), "rank1: no probes");
    std::size_t hits = 0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        std::size_t best = 0;
        T best_score = cosine_score<T>(probes[p], gallery[0]);
        for (std::size_t g = 1; g < gallery.size(); ++g) {
            const T s = cosine_score<T>(probes[p], gallery[g]);
            if (s > best_score) {
                best_score = s;
                best = g;
            }
        }
        if (gallery_labels[best] == probe_labels[p]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(probes.size());
}

}  // namespace dul
