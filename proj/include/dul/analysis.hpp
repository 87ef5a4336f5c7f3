#pragma once

// Diagnostics relating learned uncertainty to data quality: sigma versus
// true noise, error breakdown by sigma tertile, intra-class distances, and
// similarity under increasing corruption.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dul/encoder.hpp"
#include "dul/losses.hpp"
#include "dul/metrics.hpp"
#include "dul/rng.hpp"
#include "dul/synthdata.hpp"

namespace dul {

/// A trained encoder together with the classifier it predicts with.
struct Predictor {
    EncoderModel<double> model;
    Mat<double> classifier;  // D x C
    SoftmaxConfig softmax;

    Mat<double> embed(const Mat<double>& x) const { return model.forward(x).mu; }

    std::vector<int> predict(const Mat<double>& x) const {
        return argmax_rows(class_scores<double>(embed(x), classifier, softmax));
    }

    std::vector<double> sigma(const Mat<double>& x) const {
        detail::require(model.has_sigma_head(), "model has no sigma head");
        return harmonic_sigmas(model.forward(x).r);
    }
};

/// Probability that a random positive outranks a random negative (ties count
/// one half). Absent when either class is empty.
inline std::optional<double> ranking_auc(std::span<const double> scores, const std::vector<bool>& positive) {
    detail::require(scores.size() == positive.size(), "ranking_auc: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mann-Whitney U from mid-ranks.
    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (positive[order[k]]) {
                rank_sum += mid;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    const double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct NoiseBucket {
    double noise_level = 0.0;
    std::size_t count = 0;
    double mean_sigma = 0.0;
    double std_sigma = 0.0;
};

struct UncertaintyReport {
    std::vector<double> sigma;          // per-sample harmonic-mean sigma
    std::vector<NoiseBucket> buckets;   // one per distinct true noise level, ascending
    std::optional<double> corrupted_auc;
};

inline UncertaintyReport uncertainty_report(std::vector<double> sigma, std::span<const double> noise_level) {
    detail::require(!noise_level.empty(), "uncertainty_report: dataset lacks noise annotations");
    detail::require(sigma.size() == noise_level.size(), "uncertainty_report: length mismatch");
    UncertaintyReport rep;
    std::map<double, std::vector<double>> groups;
    for (std::size_t i = 0; i < sigma.size(); ++i) groups[noise_level[i]].push_back(sigma[i]);
    for (const auto& [level, vals] : groups) {
        NoiseBucket b;
        b.noise_level = level;
        b.count = vals.size();
        for (double v : vals) b.mean_sigma += v;
        b.mean_sigma /= static_cast<double>(vals.size());
        for (double v : vals) b.std_sigma += (v - b.mean_sigma) * (v - b.mean_sigma);
        b.std_sigma = std::sqrt(b.std_sigma / static_cast<double>(vals.size()));
        rep.buckets.push_back(b);
    }
    if (groups.size() > 1) {
        const double clean = groups.begin()->first;
        std::vector<bool> corrupted(sigma.size());
        for (std::size_t i = 0; i < sigma.size(); ++i) corrupted[i] = noise_level[i] > clean;
        rep.corrupted_auc = ranking_auc(sigma, corrupted);
    }
    rep.sigma = std::move(sigma);
    return rep;
}

inline UncertaintyReport uncertainty_report(const Predictor& p, const SyntheticIdentityDataset& ds) {
    detail::require(ds.noise_level.size() == ds.size() && ds.size() > 0,
                    "uncertainty_report: dataset lacks noise annotations");
    return uncertainty_report(p.sigma(ds.inputs), ds.noise_level);
}

enum class MatchMetric { Cosine, Mls };

/// Default cap on the number of verification pairs scored.
inline constexpr std::size_t kDefaultPairCap = 200000;

/// Scores every unordered pair (i < j) of samples, or a seeded uniform
/// subsample of `cap` pairs when there are more. `sigma` (N x D) is required
/// for MLS.
inline std::vector<ScorePair> verification_pairs(const Mat<double>& mu, const Mat<double>* sigma,
                                                 std::span<const int> labels, MatchMetric metric, std::size_t cap,
                                                 std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(mu.rows());
    detail::require(labels.size() == n && n >= 2, "verification_pairs: need >= 2 labelled embeddings");
    if (metric == MatchMetric::Mls)
        detail::require(sigma && sigma->rows() == mu.rows() && sigma->cols() == mu.cols(),
                        "verification_pairs: MLS needs sigma for every embedding");
    const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1) / 2;
    std::uint64_t want = std::min<std::uint64_t>(total, cap);
    Rng rng = make_rng(seed, 40);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t d = static_cast<std::size_t>(mu.cols());
    // Row-major copies so each embedding is a contiguous span.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m = mu;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sg;
    if (sigma) sg = *sigma;
    auto row = [&](const auto& mat, std::size_t i) { return std::span<const double>(mat.data() + i * d, d); };

    std::vector<ScorePair> out;
    out.reserve(static_cast<std::size_t>(want));
    std::uint64_t seen = 0;
    for (std::size_t i = 0; i < n && want > 0; ++i) {
        for (std::size_t j = i + 1; j < n && want > 0; ++j, ++seen) {
            // Selection sampling: keep with probability want / remaining.
            if (want < total - seen && u(rng) * static_cast<double>(total - seen) >= static_cast<double>(want)) continue;
            const double score = metric == MatchMetric::Cosine ? cosine_score<double>(row(m, i), row(m, j))
                                                               : mls_score<double>(row(m, i), row(sg, i), row(m, j), row(sg, j));
            out.push_back({score, labels[i] == labels[j]});
            --want;
        }
    }
    return out;
}

enum class Difficulty { Easy = 0, SemiHard = 1, Hard = 2 };

inline constexpr std::array<const char*, 3> kDifficultyNames{"easy", "semi-hard", "hard"};

/// Sigma tertiles by rank (ties broken by sample index): the lowest third is
/// easy, the highest third hard.
inline std::vector<Difficulty> sigma_tertiles(std::span<const double> sigma) {
    const std::size_t n = sigma.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sigma[a] < sigma[b]; });
    std::vector<Difficulty> cat(n);
    for (std::size_t rank = 0; rank < n; ++rank)
        cat[order[rank]] = static_cast<Difficulty>(std::min<std::size_t>(2, 3 * rank / n));
    return cat;
}

struct BadCaseReport {
    std::array<double, 2> thresholds{};  // largest sigma in easy, largest in semi-hard
    std::array<std::array<std::size_t, 3>, 2> errors{};
    std::array<std::optional<std::array<double, 3>>, 2> proportions;
};

/// Share of each model's misclassifications falling in each sigma tertile,
/// normalized per model.
inline BadCaseReport bad_case_report(std::span<const int> labels, std::span<const int> pred_a,
                                     std::span<const int> pred_b, std::span<const double> sigma) {
    const std::size_t n = labels.size();
    detail::require(n > 0 && pred_a.size() == n && pred_b.size() == n && sigma.size() == n,
                    "bad_case_report: length mismatch");
    const auto cat = sigma_tertiles(sigma);
    BadCaseReport rep;
    std::array<double, 2> th{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(cat[i]);
        if (k < 2) th[k] = std::max(th[k], sigma[i]);
        if (pred_a[i] != labels[i]) ++rep.errors[0][k];
        if (pred_b[i] != labels[i]) ++rep.errors[1][k];
    }
    rep.thresholds = th;
    for (std::size_t m = 0; m < 2; ++m) {
        const std::size_t total = rep.errors[m][0] + rep.errors[m][1] + rep.errors[m][2];
        if (total == 0) continue;
        std::array<double, 3> p{};
        for (std::size_t k = 0; k < 3; ++k) p[k] = static_cast<double>(rep.errors[m][k]) / static_cast<double>(total);
        rep.proportions[m] = p;
    }
    return rep;
}

inline BadCaseReport bad_case_report(const Predictor& a, const Predictor& b, const SyntheticIdentityDataset& ds,
                                     const Predictor& sigma_source) {
    const auto pa = a.predict(ds.inputs);
    const auto pb = b.predict(ds.inputs);
    return bad_case_report(ds.labels, pa, pb, sigma_source.sigma(ds.inputs));
}

struct IntraClassDistances {
    std::array<std::optional<double>, 3> by_category;
    double overall = 0.0;
};

/// Mean ||mu_i - w_{y_i}||, averaged within each class and then across
/// classes, separately for every difficulty category.
inline IntraClassDistances intra_class_distances(const Mat<double>& embeddings, const Mat<double>& w,
                                                 std::span<const int> labels, std::span<const Difficulty> categories) {
    const auto n = static_cast<std::size_t>(embeddings.rows());
    detail::require(labels.size() == n && categories.size() == n, "intra_class_distances: length mismatch");
    detail::require(embeddings.cols() == w.rows(), "intra_class_distances: dim mismatch");
    const auto classes = static_cast<std::size_t>(w.cols());
    std::vector<std::array<double, 4>> sum(classes, std::array<double, 4>{});
    std::vector<std::array<std::size_t, 4>> cnt(classes, std::array<std::size_t, 4>{});
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        detail::require(y >= 0 && static_cast<std::size_t>(y) < classes, "intra_class_distances: label out of range");
        const double dist = (embeddings.row(static_cast<Eigen::Index>(i)).transpose() - w.col(y)).norm();
        const auto k = static_cast<std::size_t>(categories[i]);
        sum[static_cast<std::size_t>(y)][k] += dist;
        cnt[static_cast<std::size_t>(y)][k] += 1;
        sum[static_cast<std::size_t>(y)][3] += dist;
        cnt[static_cast<std::size_t>(y)][3] += 1;
    }
    for (std::size_t c = 0; c < classes; ++c)
        detail::require(cnt[c][3] > 0, "intra_class_distances: class with zero samples");

    IntraClassDistances out;
    for (std::size_t k = 0; k < 4; ++k) {
        double acc = 0.0;
        std::size_t used = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            if (cnt[c][k] == 0) continue;
            acc += sum[c][k] / static_cast<double>(cnt[c][k]);
            ++used;
        }
        if (k == 3)
            out.overall = acc / static_cast<double>(used);
        else if (used > 0)
            out.by_category[k] = acc / static_cast<double>(used);
    }
    return out;
}

struct ProbePairs {
    Mat<double> genuine_a, genuine_b;    // P x input_dim
    Mat<double> imposter_a, imposter_b;  // P x input_dim
};

/// Genuine pairs: two different clean samples of one class. Imposter pairs:
/// clean samples of two different classes.
inline ProbePairs make_probe_pairs(const SyntheticIdentityDataset& ds, std::size_t count, std::uint64_t seed) {
    const auto clean = ds.corrupted_mask();
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (!clean[i]) by_class[ds.labels[i]].push_back(i);
    std::vector<int> usable;
    for (const auto& [c, v] : by_class)
        if (v.size() >= 2) usable.push_back(c);
    detail::require(usable.size() >= 2, "make_probe_pairs: need two classes with two clean samples each");

    Rng rng = make_rng(seed, 20);
    const auto d = ds.inputs.cols();
    const auto p = static_cast<Eigen::Index>(count);
    ProbePairs pairs{Mat<double>(p, d), Mat<double>(p, d), Mat<double>(p, d), Mat<double>(p, d)};
    std::uniform_int_distribution<std::size_t> pick_class(0, usable.size() - 1);
    for (Eigen::Index k = 0; k < p; ++k) {
        const auto& g = by_class[usable[pick_class(rng)]];
        std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
        const std::size_t a = pick(rng);
        std::size_t b = pick(rng);
        while (b == a) b = pick(rng);
        pairs.genuine_a.row(k) = ds.inputs.row(static_cast<Eigen::Index>(g[a]));
        pairs.genuine_b.row(k) = ds.inputs.row(static_cast<Eigen::Index>(g[b]));

        const std::size_t ca = pick_class(rng);
        std::size_t cb = pick_class(rng);
        while (cb == ca) cb = pick_class(rng);
        const auto& ga = by_class[usable[ca]];
        const auto& gb = by_class[usable[cb]];
        std::uniform_int_distribution<std::size_t> pa(0, ga.size() - 1), pb(0, gb.size() - 1);
        pairs.imposter_a.row(k) = ds.inputs.row(static_cast<Eigen::Index>(ga[pa(rng)]));
        pairs.imposter_b.row(k) = ds.inputs.row(static_cast<Eigen::Index>(gb[pb(rng)]));
    }
    return pairs;
}

struct ProbeRow {
    double corruption = 0.0;
    std::string model;
    double genuine_similarity = 0.0;
    double imposter_similarity = 0.0;
};

/// Cosine similarity of mu embeddings for (clean, corrupted) genuine and
/// imposter pairs at each corruption level. The second element of every pair
/// receives N(0, level^2 I) noise; the same noise draw is shared by all
/// models at a given level.
inline std::vector<ProbeRow> blur_pair_probe(const std::vector<std::pair<std::string, const Predictor*>>& models,
                                             const ProbePairs& pairs, std::span<const double> ladder,
                                             std::uint64_t seed) {
    std::vector<ProbeRow> rows;
    const auto p = pairs.genuine_a.rows();
    detail::require(p > 0, "blur_pair_probe: no pairs");
    for (std::size_t li = 0; li < ladder.size(); ++li) {
        const double level = ladder[li];
        Rng rng = make_rng(seed, 30 + li);
        std::normal_distribution<double> nd(0.0, 1.0);
        Mat<double> gb = pairs.genuine_b, ib = pairs.imposter_b;
        for (Eigen::Index i = 0; i < p; ++i)
            for (Eigen::Index l = 0; l < gb.cols(); ++l) gb(i, l) += level * nd(rng);
        for (Eigen::Index i = 0; i < p; ++i)
            for (Eigen::Index l = 0; l < ib.cols(); ++l) ib(i, l) += level * nd(rng);
        for (const auto& [name, pred] : models) {
            const Mat<double> ea = pred->embed(pairs.genuine_a), eb = pred->embed(gb);
            const Mat<double> fa = pred->embed(pairs.imposter_a), fb = pred->embed(ib);
            double g = 0.0, im = 0.0;
            for (Eigen::Index i = 0; i < p; ++i) {
                const Vec<double> a1 = ea.row(i).transpose(), b1 = eb.row(i).transpose();
                const Vec<double> a2 = fa.row(i).transpose(), b2 = fb.row(i).transpose();
                g += cosine_score<double>(std::span<const double>(a1.data(), a1.size()),
                                          std::span<const double>(b1.data(), b1.size()));
                im += cosine_score<double>(std::span<const double>(a2.data(), a2.size()),
                                           std::span<const double>(b2.data(), b2.size()));
            }
            rows.push_back({level, name, g / static_cast<double>(p), im / static_cast<double>(p)});
        }
    }
    return rows;
}

}  // namespace dul
