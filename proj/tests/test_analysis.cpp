#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dul/analysis.hpp"
#include "dul/trainer.hpp"

using namespace dul;

namespace {

// O(n^2) pairwise count, ties worth one half
double brute_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
    double win = 0, total = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (pos[i] && !pos[j]) {
                total += 1;
                win += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return win / total;
}

Predictor constant_sigma_predictor(int in, int d, int classes) {
    EncoderShape s;
    s.input_dim = in;
    s.hidden = {8};
    s.embedding_dim = d;
    Predictor p{EncoderModel<double>(s, 1), init_classifier<double>(d, classes, 1), SoftmaxConfig{}};
    p.model.sigma_head->weight.setZero();
    return p;
}

}  // namespace

// ---- ranking AUC / uncertainty report --------------------------------------

TEST(RankingAuc, MatchesPairwiseCount) {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> v(0, 6);
    std::bernoulli_distribution b(0.4);
    for (int t = 0; t < 300; ++t) {
        std::vector<double> s(2 + t % 40);
        std::vector<bool> pos(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = v(rng) * 0.5;
            pos[i] = b(rng);
        }
        pos[0] = true;
        pos[1] = false;
        EXPECT_NEAR(*ranking_auc(s, pos), brute_auc(s, pos), 1e-12);
    }
}

TEST(RankingAuc, InvariantToMonotoneTransforms) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    std::vector<double> s(200);
    std::vector<bool> pos(200);
    for (std::size_t i = 0; i < 200; ++i) {
        pos[i] = i % 3 == 0;
        s[i] = std::abs(nd(rng)) + (pos[i] ? 0.5 : 0.0);
    }
    const double base = *ranking_auc(s, pos);
    std::vector<double> a(200), b(200), c(200);
    for (std::size_t i = 0; i < 200; ++i) {
        a[i] = std::log(s[i] + 1e-9);
        b[i] = 3 * s[i] * s[i] * s[i] - 7;
        c[i] = std::exp(s[i] * 4);
    }
    EXPECT_DOUBLE_EQ(*ranking_auc(a, pos), base);
    EXPECT_DOUBLE_EQ(*ranking_auc(b, pos), base);
    EXPECT_DOUBLE_EQ(*ranking_auc(c, pos), base);
}

TEST(RankingAuc, ExtremesAndAbsence) {
    EXPECT_DOUBLE_EQ(*ranking_auc(std::vector<double>{1, 2, 3, 4}, {false, false, true, true}), 1.0);
    EXPECT_DOUBLE_EQ(*ranking_auc(std::vector<double>{1, 2, 3, 4}, {true, true, false, false}), 0.0);
    EXPECT_FALSE(ranking_auc(std::vector<double>{1, 2}, {true, true}).has_value());
    EXPECT_THROW(ranking_auc(std::vector<double>{1, 2}, {true}), ContractError);
}

TEST(UncertaintyReport, ConstantSigmaHeadGivesHalf) {
    auto ds = gen_identities(IdentitySpec{4, 25, 6, 0.5, 0.1, 1, {}});
    ds = corrupt_fraction(ds, 0.3, 2.0, 1);
    const auto p = constant_sigma_predictor(6, 3, 4);
    const auto rep = uncertainty_report(p, ds);
    ASSERT_TRUE(rep.corrupted_auc.has_value());
    EXPECT_DOUBLE_EQ(*rep.corrupted_auc, 0.5);
    ASSERT_EQ(rep.buckets.size(), 2u);
    EXPECT_EQ(rep.buckets[0].count + rep.buckets[1].count, ds.size());
    EXPECT_EQ(rep.buckets[1].count, 30u);
    EXPECT_NEAR(rep.buckets[0].std_sigma, 0.0, 1e-15);
}

TEST(UncertaintyReport, SingleNoiseLevelHasNoAuc) {
    const auto ds = gen_identities(IdentitySpec{3, 10, 6, 0.5, 0.1, 2, {}});
    const auto rep = uncertainty_report(constant_sigma_predictor(6, 3, 3), ds);
    EXPECT_FALSE(rep.corrupted_auc.has_value());
    ASSERT_EQ(rep.buckets.size(), 1u);
    EXPECT_EQ(rep.buckets[0].count, 30u);
}

TEST(UncertaintyReport, BucketsFromHandValues) {
    const std::vector<double> sigma{1, 2, 3, 10, 20, 5};
    const std::vector<double> noise{0.1, 0.1, 0.1, 2.0, 2.0, 1.0};
    const auto rep = uncertainty_report(sigma, noise);
    ASSERT_EQ(rep.buckets.size(), 3u);
    EXPECT_DOUBLE_EQ(rep.buckets[0].noise_level, 0.1);
    EXPECT_DOUBLE_EQ(rep.buckets[0].mean_sigma, 2.0);
    EXPECT_NEAR(rep.buckets[0].std_sigma, std::sqrt(2.0 / 3.0), 1e-15);
    EXPECT_DOUBLE_EQ(rep.buckets[1].mean_sigma, 5.0);
    EXPECT_DOUBLE_EQ(rep.buckets[2].mean_sigma, 15.0);
    EXPECT_DOUBLE_EQ(*rep.corrupted_auc, 1.0);
    EXPECT_THROW(uncertainty_report(std::vector<double>{}, std::vector<double>{}), ContractError);
    EXPECT_THROW(uncertainty_report(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ContractError);
}

TEST(UncertaintyReport, NeedsSigmaHead) {
    EncoderShape s;
    s.input_dim = 6;
    s.hidden = {4};
    s.embedding_dim = 3;
    s.sigma_head = false;
    const Predictor p{EncoderModel<double>(s, 1), init_classifier<double>(3, 3, 1), SoftmaxConfig{}};
    const auto ds = gen_identities(IdentitySpec{3, 10, 6, 0.5, 0.1, 2, {}});
    EXPECT_THROW(uncertainty_report(p, ds), ContractError);
}

// ---- tertiles / bad cases --------------------------------------------------

TEST(SigmaTertiles, RankBasedWithIndexTies) {
    const auto c = sigma_tertiles(std::vector<double>{0.6, 0.1, 0.5, 0.2, 0.4, 0.3});
    EXPECT_EQ(c, (std::vector<Difficulty>{Difficulty::Hard, Difficulty::Easy, Difficulty::Hard, Difficulty::Easy,
                                           Difficulty::SemiHard, Difficulty::SemiHard}));
    const auto t = sigma_tertiles(std::vector<double>{1, 1, 1});
    EXPECT_EQ(t, (std::vector<Difficulty>{Difficulty::Easy, Difficulty::SemiHard, Difficulty::Hard}));
    const auto seven = sigma_tertiles(std::vector<double>{1, 2, 3, 4, 5, 6, 7});
    EXPECT_EQ(std::count(seven.begin(), seven.end(), Difficulty::Easy), 3);
    EXPECT_EQ(std::count(seven.begin(), seven.end(), Difficulty::SemiHard), 2);
    EXPECT_EQ(std::count(seven.begin(), seven.end(), Difficulty::Hard), 2);
}

TEST(BadCaseReport, HandBuiltSixSamples) {
    const std::vector<double> sigma{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    const std::vector<int> y{0, 0, 0, 0, 0, 0};
    const std::vector<int> a{1, 0, 0, 0, 1, 1};  // wrong on 0, 4, 5
    const std::vector<int> b{0, 0, 2, 0, 0, 0};  // wrong on 2
    const auto r = bad_case_report(y, a, b, sigma);
    EXPECT_DOUBLE_EQ(r.thresholds[0], 0.2);
    EXPECT_DOUBLE_EQ(r.thresholds[1], 0.4);
    EXPECT_EQ(r.errors[0], (std::array<std::size_t, 3>{1, 0, 2}));
    EXPECT_EQ(r.errors[1], (std::array<std::size_t, 3>{0, 1, 0}));
    EXPECT_NEAR((*r.proportions[0])[0], 1.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ((*r.proportions[0])[1], 0.0);
    EXPECT_NEAR((*r.proportions[0])[2], 2.0 / 3.0, 1e-15);
    EXPECT_EQ(*r.proportions[1], (std::array<double, 3>{0, 1, 0}));
}

TEST(BadCaseReport, IdenticalModelsGiveIdenticalRowsThatSumToOne) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> cls(0, 3);
    std::uniform_real_distribution<double> us(0.1, 2.0);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 10 + static_cast<std::size_t>(t);
        std::vector<int> y(n), p(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = cls(rng), p[i] = cls(rng), s[i] = us(rng);
        const auto r = bad_case_report(y, p, p, s);
        EXPECT_EQ(r.errors[0], r.errors[1]);
        if (r.proportions[0]) {
            const auto& q = *r.proportions[0];
            EXPECT_NEAR(q[0] + q[1] + q[2], 1.0, 1e-12);
        }
    }
}

TEST(BadCaseReport, NoErrorsMeansAbsentProportions) {
    const std::vector<int> y{0, 1, 2};
    const auto r = bad_case_report(y, y, std::vector<int>{0, 1, 0}, std::vector<double>{1, 2, 3});
    EXPECT_FALSE(r.proportions[0].has_value());
    EXPECT_TRUE(r.proportions[1].has_value());
    EXPECT_THROW(bad_case_report(y, y, y, std::vector<double>{1, 2}), ContractError);
}

// ---- intra-class distances -------------------------------------------------

TEST(IntraClassDistances, AtCentersIsZero) {
    Mat<double> w(2, 2);
    w << 1, 0, 0, 1;
    Mat<double> e(4, 2);
    e << 1, 0, 0, 1, 1, 0, 0, 1;
    const std::vector<int> y{0, 1, 0, 1};
    const std::vector<Difficulty> c{Difficulty::Easy, Difficulty::SemiHard, Difficulty::Hard, Difficulty::Easy};
    const auto r = intra_class_distances(e, w, y, c);
    for (const auto& v : r.by_category) EXPECT_DOUBLE_EQ(*v, 0.0);
    EXPECT_DOUBLE_EQ(r.overall, 0.0);
}

TEST(IntraClassDistances, SingleClassTwoSamples) {
    Mat<double> w = Mat<double>::Zero(2, 1);
    Mat<double> e(2, 2);
    e << 1, 0, 0, 3;
    const std::vector<int> y{0, 0};
    const auto r = intra_class_distances(e, w, y, std::vector<Difficulty>{Difficulty::Easy, Difficulty::Easy});
    EXPECT_DOUBLE_EQ(*r.by_category[0], 2.0);
    EXPECT_FALSE(r.by_category[1].has_value());
    EXPECT_DOUBLE_EQ(r.overall, 2.0);
}

TEST(IntraClassDistances, AveragesWithinThenAcrossClasses) {
    // class 0: distances 1, 1, 1; class 1: distance 4 -> (1 + 4) / 2, not 7 / 4
    Mat<double> w = Mat<double>::Zero(1, 2);
    Mat<double> e(4, 1);
    e << 1, -1, 1, 4;
    const std::vector<int> y{0, 0, 0, 1};
    const std::vector<Difficulty> c(4, Difficulty::Hard);
    const auto r = intra_class_distances(e, w, y, c);
    EXPECT_DOUBLE_EQ(*r.by_category[2], 2.5);
    EXPECT_DOUBLE_EQ(r.overall, 2.5);
}

TEST(IntraClassDistances, PermutationInvariantWithinClass) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    Mat<double> w(3, 2), e(12, 3);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = nd(rng);
    for (Eigen::Index k = 0; k < e.size(); ++k) e.data()[k] = nd(rng);
    std::vector<int> y(12);
    std::vector<Difficulty> c(12);
    for (std::size_t i = 0; i < 12; ++i) {
        y[i] = static_cast<int>(i % 2);
        c[i] = static_cast<Difficulty>(i % 3);
    }
    const auto base = intra_class_distances(e, w, y, c);
    std::vector<std::size_t> perm{10, 1, 8, 3, 6, 5, 4, 7, 2, 9, 0, 11};
    Mat<double> e2(12, 3);
    std::vector<int> y2(12);
    std::vector<Difficulty> c2(12);
    for (std::size_t i = 0; i < 12; ++i) {
        e2.row(static_cast<Eigen::Index>(i)) = e.row(static_cast<Eigen::Index>(perm[i]));
        y2[i] = y[perm[i]];
        c2[i] = c[perm[i]];
    }
    const auto r = intra_class_distances(e2, w, y2, c2);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(*r.by_category[k], *base.by_category[k], 1e-14);
    EXPECT_NEAR(r.overall, base.overall, 1e-14);
}

TEST(IntraClassDistances, EmptyClassThrows) {
    Mat<double> w = Mat<double>::Zero(1, 3);
    Mat<double> e = Mat<double>::Zero(2, 1);
    EXPECT_THROW(intra_class_distances(e, w, std::vector<int>{0, 1},
                                       std::vector<Difficulty>{Difficulty::Easy, Difficulty::Easy}),
                 ContractError);
}

// ---- verification pairs ----------------------------------------------------

TEST(VerificationPairs, FullEnumerationBelowCap) {
    Mat<double> mu(4, 2);
    mu << 1, 0, 0, 1, 1, 1, -1, 0;
    const std::vector<int> y{0, 0, 1, 1};
    const auto p = verification_pairs(mu, nullptr, y, MatchMetric::Cosine, 100, 1);
    ASSERT_EQ(p.size(), 6u);
    EXPECT_TRUE(p[0].genuine);  // (0, 1)
    EXPECT_DOUBLE_EQ(p[0].score, 0.0);
    EXPECT_FALSE(p[1].genuine);  // (0, 2)
    EXPECT_NEAR(p[1].score, 1 / std::sqrt(2.0), 1e-15);
    EXPECT_TRUE(p[5].genuine);  // (2, 3)
    int genuine = 0;
    for (const auto& q : p) genuine += q.genuine;
    EXPECT_EQ(genuine, 2);
}

TEST(VerificationPairs, CapSubsamplesExactlyAndDeterministically) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    Mat<double> mu(60, 3);
    for (Eigen::Index k = 0; k < mu.size(); ++k) mu.data()[k] = nd(rng);
    std::vector<int> y(60);
    for (std::size_t i = 0; i < 60; ++i) y[i] = static_cast<int>(i % 6);
    const auto a = verification_pairs(mu, nullptr, y, MatchMetric::Cosine, 500, 7);
    const auto b = verification_pairs(mu, nullptr, y, MatchMetric::Cosine, 500, 7);
    const auto c = verification_pairs(mu, nullptr, y, MatchMetric::Cosine, 500, 8);
    ASSERT_EQ(a.size(), 500u);
    ASSERT_EQ(c.size(), 500u);
    bool same_c = true;
    for (std::size_t k = 0; k < 500; ++k) {
        EXPECT_EQ(a[k].score, b[k].score);
        same_c = same_c && a[k].score == c[k].score;
    }
    EXPECT_FALSE(same_c);
}

TEST(VerificationPairs, MlsNeedsSigmaAndMatchesConstantSigmaCosineOrdering) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    Mat<double> mu(20, 4);
    for (Eigen::Index k = 0; k < mu.size(); ++k) mu.data()[k] = nd(rng);
    for (Eigen::Index i = 0; i < 20; ++i) mu.row(i).normalize();
    std::vector<int> y(20);
    for (std::size_t i = 0; i < 20; ++i) y[i] = static_cast<int>(i % 4);
    EXPECT_THROW(verification_pairs(mu, nullptr, y, MatchMetric::Mls, 1000, 1), ContractError);
    const Mat<double> sg = Mat<double>::Constant(20, 4, 0.3);
    const auto pc = verification_pairs(mu, &sg, y, MatchMetric::Cosine, 1000, 1);
    const auto pm = verification_pairs(mu, &sg, y, MatchMetric::Mls, 1000, 1);
    const std::vector<double> targets{1e-3, 1e-2, 0.1, 0.5};
    // unit-norm means: squared distance = 2 - 2 cos, so both rank pairs the same
    const auto rc = roc(pc, targets), rm = roc(pm, targets);
    ASSERT_EQ(rc.points.size(), rm.points.size());
    for (std::size_t k = 0; k < rc.points.size(); ++k) {
        EXPECT_EQ(rc.points[k].fpr, rm.points[k].fpr);
        EXPECT_EQ(rc.points[k].tpr, rm.points[k].tpr);
    }
}

// ---- blur-pair probe -------------------------------------------------------

TEST(BlurPairProbe, IdenticalGenuinePairAtZeroCorruption) {
    const auto p = constant_sigma_predictor(6, 3, 4);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    ProbePairs pairs{Mat<double>(5, 6), Mat<double>(), Mat<double>(5, 6), Mat<double>(5, 6)};
    for (Eigen::Index k = 0; k < 30; ++k) {
        pairs.genuine_a.data()[k] = nd(rng);
        pairs.imposter_a.data()[k] = nd(rng);
        pairs.imposter_b.data()[k] = nd(rng);
    }
    pairs.genuine_b = pairs.genuine_a;
    const std::vector<double> ladder{0.0, 1.0};
    const auto rows = blur_pair_probe({{"m", &p}}, pairs, ladder, 1);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_NEAR(rows[0].genuine_similarity, 1.0, 1e-12);
    EXPECT_LT(rows[1].genuine_similarity, 1.0);
    EXPECT_EQ(rows[0].model, "m");
    // same seed, same table
    const auto again = blur_pair_probe({{"m", &p}}, pairs, ladder, 1);
    EXPECT_EQ(again[1].genuine_similarity, rows[1].genuine_similarity);
    EXPECT_EQ(again[1].imposter_similarity, rows[1].imposter_similarity);
}

TEST(BlurPairProbe, PairsComeFromCleanSamples) {
    auto ds = gen_identities(IdentitySpec{5, 20, 6, 0.5, 0.1, 3, {}});
    ds = corrupt_fraction(ds, 0.5, 3.0, 2);
    const auto mask = ds.corrupted_mask();
    const auto pairs = make_probe_pairs(ds, 40, 9);
    auto is_clean_row = [&](const Eigen::Ref<const Mat<double>>& row) {
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (!mask[i] && ds.inputs.row(static_cast<Eigen::Index>(i)) == row) return true;
        return false;
    };
    for (Eigen::Index k = 0; k < 40; ++k) {
        EXPECT_TRUE(is_clean_row(pairs.genuine_a.row(k)));
        EXPECT_TRUE(is_clean_row(pairs.genuine_b.row(k)));
        EXPECT_TRUE(is_clean_row(pairs.imposter_a.row(k)));
        EXPECT_TRUE(is_clean_row(pairs.imposter_b.row(k)));
        EXPECT_NE(pairs.genuine_a.row(k), pairs.genuine_b.row(k));
    }
}

TEST(BlurPairProbe, BaselineGenuineSimilarityFallsWithCorruption) {
    // averaged over ten seeds
    const std::vector<double> ladder{0.0, 0.5, 1.0, 2.0, 4.0};
    std::vector<double> mean(ladder.size(), 0.0);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto ds = gen_identities(IdentitySpec{10, 40, 16, 0.5, 0.2, seed, {}});
        EncoderShape s;
        s.input_dim = 16;
        s.hidden = {32};
        s.embedding_dim = 8;
        s.sigma_head = false;
        TrainConfig c;
        c.steps = 300;
        c.batch_size = 32;
        c.seed = seed;
        const auto r = train_baseline(ds, EncoderModel<double>(s, seed), init_classifier<double>(8, 10, seed), c);
        const Predictor p{r.model, r.classifier, c.cls.softmax};
        const auto rows = blur_pair_probe({{"baseline", &p}}, make_probe_pairs(ds, 100, seed), ladder, seed);
        for (std::size_t k = 0; k < ladder.size(); ++k) mean[k] += rows[k].genuine_similarity / 10.0;
    }
    for (std::size_t k = 1; k < ladder.size(); ++k) EXPECT_LT(mean[k], mean[k - 1]) << "level " << ladder[k];
}
