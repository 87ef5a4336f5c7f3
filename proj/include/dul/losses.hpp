#pragma once

// Training objectives with analytic gradients.
//
// Batches are row-major in the mathematical sense: an N x D matrix holds one
// embedding per row. Classifier weights are D x C with one column per class.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numbers>
#include <span>
#include <string>

#include "dul/embedding.hpp"
#include "dul/errors.hpp"

namespace dul {

enum class SoftmaxVariant { Plain, AmSoftmax, ArcFace, L2Softmax };

inline std::string to_string(SoftmaxVariant v) {
    switch (v) {
        case SoftmaxVariant::Plain: return "plain";
        case SoftmaxVariant::AmSoftmax: return "am-softmax";
        case SoftmaxVariant::ArcFace: return "arcface";
        case SoftmaxVariant::L2Softmax: return "l2-softmax";
    }
    return "?";
}

inline SoftmaxVariant softmax_variant_from_string(const std::string& s) {
    if (s == "plain") return SoftmaxVariant::Plain;
    if (s == "am-softmax") return SoftmaxVariant::AmSoftmax;
    if (s == "arcface") return SoftmaxVariant::ArcFace;
    if (s == "l2-softmax") return SoftmaxVariant::L2Softmax;
    throw ContractError("unknown softmax variant '" + s + "'");
}

struct SoftmaxConfig {
    SoftmaxVariant variant = SoftmaxVariant::AmSoftmax;
    double margin = 0.35;
    double scale = 30.0;
    /// Plain only: compute logits on l2-normalized features and weights
    /// (scaled by `scale`) instead of raw w_c . s.
    bool normalize_plain = false;

    static SoftmaxConfig defaults(SoftmaxVariant v) {
        switch (v) {
            case SoftmaxVariant::Plain: return {v, 0.0, 1.0, false};
            case SoftmaxVariant::AmSoftmax: return {v, 0.35, 30.0, false};
            case SoftmaxVariant::ArcFace: return {v, 0.5, 64.0, false};
            case SoftmaxVariant::L2Softmax: return {v, 0.0, 16.0, false};
        }
        return {};
    }

    bool normalizes() const noexcept { return variant != SoftmaxVariant::Plain || normalize_plain; }

    void validate() const {
        detail::require(std::isfinite(margin) && margin >= 0.0, "SoftmaxConfig: margin must be >= 0");
        detail::require(std::isfinite(scale) && scale > 0.0, "SoftmaxConfig: scale must be > 0");
        if (variant == SoftmaxVariant::Plain || variant == SoftmaxVariant::L2Softmax)
            detail::require(margin == 0.0, "SoftmaxConfig: plain/l2-softmax take no margin");
        if (variant == SoftmaxVariant::ArcFace)
            detail::require(margin < std::numbers::pi / 2, "SoftmaxConfig: arcface margin must be < pi/2");
    }
};

struct ClsLossConfig {
    SoftmaxConfig softmax;
    double lambda = 0.01;

    void validate() const {
        softmax.validate();
        detail::require(std::isfinite(lambda) && lambda >= 0.0, "ClsLossConfig: lambda must be finite and >= 0");
    }
};

template <std::floating_point T>
struct ClassifierWeights {
    Mat<T> w;  // D x C
    bool normalized = false;

    Eigen::Index dim() const noexcept { return w.rows(); }
    Eigen::Index classes() const noexcept { return w.cols(); }

    void validate() const {
        detail::require(w.cols() >= 1 && w.rows() >= 1, "ClassifierWeights: empty matrix");
        if (normalized) {
            for (Eigen::Index c = 0; c < w.cols(); ++c)
                detail::require(std::abs(w.col(c).norm() - T(1)) <= T(1e-6),
                                "ClassifierWeights: column not unit norm");
        }
    }

    /// Copy with every column scaled to unit length.
    ClassifierWeights normalized_copy() const {
        ClassifierWeights out{w, true};
        for (Eigen::Index c = 0; c < w.cols(); ++c) {
            const T n = w.col(c).norm();
            detail::require(n > T(0), "ClassifierWeights: zero-norm column");
            out.w.col(c) /= n;
        }
        return out;
    }
};

namespace detail {

inline void check_labels(std::span<const int> labels, Eigen::Index n, Eigen::Index classes) {
    require(static_cast<Eigen::Index>(labels.size()) == n, "label count does not match batch size");
    for (int y : labels) require(y >= 0 && y < classes, "label out of range");
}

template <typename T>
Vec<T> column_norms(const Mat<T>& m, const char* what) {
    Vec<T> n = m.colwise().norm().transpose();
    for (Eigen::Index c = 0; c < n.size(); ++c) require(n[c] > T(0), what);
    return n;
}

template <typename T>
Vec<T> row_norms(const Mat<T>& m, const char* what) {
    Vec<T> n = m.rowwise().norm();
    for (Eigen::Index i = 0; i < n.size(); ++i) require(n[i] > T(0), what);
    return n;
}

}  // namespace detail

/// Inference-time class scores: cosine (scaled) for normalizing variants,
/// w_c . s otherwise. No margin is applied.
template <std::floating_point T>
Mat<T> class_scores(const Mat<T>& s, const Mat<T>& w, const SoftmaxConfig& cfg) {
    detail::require(s.cols() == w.rows(), "class_scores: embedding/classifier dim mismatch");
    if (!cfg.normalizes()) return s * w;
    const Vec<T> sn = detail::row_norms(s, "zero-norm embedding row");
    const Vec<T> wn = detail::column_norms(w, "zero-norm classifier column");
    Mat<T> cos = (sn.cwiseInverse().asDiagonal() * s) * (w * wn.cwiseInverse().asDiagonal());
    return cos;
}

/// Argmax per row; the lowest class index wins ties.
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived>& scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < scores.cols(); ++c)
            if (scores(i, c) > scores(i, best)) best = c;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

template <std::floating_point T>
struct SoftmaxResult {
    T loss = 0;
    Mat<T> grad_s;  // N x D
    Mat<T> grad_w;  // D x C
};

/// Mean cross-entropy of the (margin) softmax over a batch of embeddings.
template <std::floating_point T>
SoftmaxResult<T> softmax_loss(const Mat<T>& s, std::span<const int> labels, const Mat<T>& w,
                              const SoftmaxConfig& cfg) {
    cfg.validate();
    const Eigen::Index n = s.rows(), d = s.cols(), classes = w.cols();
    detail::require(n >= 1, "softmax_loss: empty batch");
    detail::require(w.rows() == d, "softmax_loss: embedding/classifier dim mismatch");
    detail::check_labels(labels, n, classes);

    SoftmaxResult<T> out{T(0), Mat<T>::Zero(n, d), Mat<T>::Zero(d, classes)};
    const T inv_n = T(1) / static_cast<T>(n);
    const T scale = static_cast<T>(cfg.scale);
    const T m = static_cast<T>(cfg.margin);

    if (!cfg.normalizes()) {
        const Mat<T> logits = s * w;
        Mat<T> dlogits(n, classes);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int y = labels[static_cast<std::size_t>(i)];
            const T mx = logits.row(i).maxCoeff();
            const Vec<T> e = (logits.row(i).array() - mx).exp().transpose();
            const T z = e.sum();
            out.loss += (std::log(z) + mx - logits(i, y)) * inv_n;
            dlogits.row(i) = (e / z).transpose() * inv_n;
            dlogits(i, y) -= inv_n;
        }
        out.grad_s = dlogits * w.transpose();
        out.grad_w = s.transpose() * dlogits;
        return out;
    }

    const Vec<T> sn = detail::row_norms(s, "softmax_loss: zero-norm embedding row");
    const Vec<T> wn = detail::column_norms(w, "softmax_loss: zero-norm classifier column");
    const Mat<T> s_hat = sn.cwiseInverse().asDiagonal() * s;
    const Mat<T> w_hat = w * wn.cwiseInverse().asDiagonal();
    const Mat<T> cos = s_hat * w_hat;

    // dL/dcos for every (i, c), then chain through the two normalizations.
    Mat<T> dcos(n, classes);
    Vec<T> logits(classes);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        T target_slope = 1;  // d(logit_y / scale) / d cos_y
        for (Eigen::Index c = 0; c < classes; ++c) logits[c] = scale * cos(i, c);
        switch (cfg.variant) {
            case SoftmaxVariant::AmSoftmax: logits[y] = scale * (cos(i, y) - m); break;
            case SoftmaxVariant::ArcFace: {
                const T cy = std::clamp(cos(i, y), T(-1), T(1));
                const T sin_y = std::sqrt(std::max(T(1) - cy * cy, T(1e-12)));
                logits[y] = scale * (cy * std::cos(m) - sin_y * std::sin(m));
                target_slope = std::cos(m) + std::sin(m) * cy / sin_y;
                break;
            }
            default: break;
        }
        const T mx = logits.maxCoeff();
        const Vec<T> e = (logits.array() - mx).exp();
        const T z = e.sum();
        out.loss += (std::log(z) + mx - logits[y]) * inv_n;
        for (Eigen::Index c = 0; c < classes; ++c) {
            T g = e[c] / z - (c == y ? T(1) : T(0));
            g *= inv_n * scale;
            if (c == y) g *= target_slope;
            dcos(i, c) = g;
        }
    }

    // cos_ic = s_hat_i . w_hat_c
    // d cos / d s_i = (w_hat_c - cos_ic s_hat_i) / |s_i|
    // d cos / d w_c = (s_hat_i - cos_ic w_hat_c) / |w_c|
    const Mat<T> g_shat = dcos * w_hat.transpose();  // N x D
    const Mat<T> g_what = s_hat.transpose() * dcos;  // D x C
    for (Eigen::Index i = 0; i < n; ++i) {
        const T radial = g_shat.row(i).dot(s_hat.row(i));
        out.grad_s.row(i) = (g_shat.row(i) - radial * s_hat.row(i)) / sn[i];
    }
    for (Eigen::Index c = 0; c < classes; ++c) {
        const T radial = g_what.col(c).dot(w_hat.col(c));
        out.grad_w.col(c) = (g_what.col(c) - radial * w_hat.col(c)) / wn[c];
    }
    return out;
}

template <std::floating_point T>
SoftmaxResult<T> softmax_loss(const Mat<T>& s, std::span<const int> labels, const ClassifierWeights<T>& w,
                              const SoftmaxConfig& cfg) {
    return softmax_loss<T>(s, labels, w.w, cfg);
}

template <std::floating_point T>
struct KlResult {
    T value = 0;
    Vec<T> grad_mu;
    Vec<T> grad_sigma;
};

/// KL(N(mu, sigma^2) || N(0, I)) averaged over dimensions.
template <std::floating_point T>
KlResult<T> kl_regularizer(const GaussianEmbedding<T>& g) {
    const auto& mu = g.mu();
    const auto& sigma = g.sigma();
    const T inv_d = T(1) / static_cast<T>(g.dim());
    KlResult<T> out{T(0), Vec<T>(g.dim()), Vec<T>(g.dim())};
    for (Eigen::Index l = 0; l < g.dim(); ++l) {
        const T s2 = sigma[l] * sigma[l];
        out.value += T(-0.5) * (T(1) + std::log(s2) - mu[l] * mu[l] - s2);
        out.grad_mu[l] = mu[l] * inv_d;
        out.grad_sigma[l] = (sigma[l] - T(1) / sigma[l]) * inv_d;
    }
    out.value *= inv_d;
    return out;
}

template <std::floating_point T>
struct ClsLossResult {
    T loss = 0;
    T softmax_part = 0;
    T kl_part = 0;  // mean over batch, before lambda
    Mat<T> grad_mu;
    Mat<T> grad_sigma;
    Mat<T> grad_w;
};

/// L_softmax(mu + eps*sigma) + lambda * mean_i KL_i.
template <std::floating_point T>
ClsLossResult<T> cls_total_loss(const Mat<T>& mu, const Mat<T>& sigma, const Mat<T>& eps,
                                std::span<const int> labels, const Mat<T>& w, const ClsLossConfig& cfg) {
    cfg.validate();
    detail::require(mu.rows() == sigma.rows() && mu.cols() == sigma.cols(), "cls_total_loss: mu/sigma shape mismatch");
    detail::require(mu.rows() == eps.rows() && mu.cols() == eps.cols(), "cls_total_loss: mu/eps shape mismatch");
    const Eigen::Index n = mu.rows(), d = mu.cols();

    const Mat<T> s = mu + eps.cwiseProduct(sigma);
    auto sm = softmax_loss<T>(s, labels, w, cfg.softmax);

    ClsLossResult<T> out;
    out.softmax_part = sm.loss;
    out.grad_mu = sm.grad_s;
    out.grad_sigma = sm.grad_s.cwiseProduct(eps);
    out.grad_w = std::move(sm.grad_w);

    const T lambda = static_cast<T>(cfg.lambda);
    const T per_sample = lambda / static_cast<T>(n);
    T kl_sum = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const GaussianEmbedding<T> g(mu.row(i).transpose(), sigma.row(i).transpose());
        const auto kl = kl_regularizer(g);
        kl_sum += kl.value;
        for (Eigen::Index l = 0; l < d; ++l) {
            out.grad_mu(i, l) += per_sample * kl.grad_mu[l];
            out.grad_sigma(i, l) += per_sample * kl.grad_sigma[l];
        }
    }
    out.kl_part = kl_sum / static_cast<T>(n);
    out.loss = out.softmax_part + lambda * out.kl_part;
    return out;
}

/// Raw log-variance values are clamped to this range inside the regression
/// loss; clamped entries contribute a constant and no gradient.
inline constexpr double kLogVarianceClamp = 15.0;

template <std::floating_point T>
struct RgsResult {
    T value = 0;
    T residual_part = 0;  // 1/2 mean exp(-r) (w - mu)^2
    T logvar_part = 0;    // 1/2 mean r
    Vec<T> grad_mu;
    Vec<T> grad_r;
    std::size_t clamped = 0;
};

/// 1/2 * 1/D * sum_l [exp(-r_l) (w_l - mu_l)^2 + r_l], with r = ln sigma^2.
/// The constant (D/2) ln 2pi is omitted.
template <std::floating_point T>
RgsResult<T> heteroscedastic_nll(const Eigen::Ref<const Vec<T>>& mu, const Eigen::Ref<const Vec<T>>& r,
                                 const Eigen::Ref<const Vec<T>>& target) {
    const Eigen::Index d = mu.size();
    detail::require(d >= 1 && r.size() == d && target.size() == d, "heteroscedastic_nll: length mismatch");
    const T inv_d = T(1) / static_cast<T>(d);
    const T lim = static_cast<T>(kLogVarianceClamp);
    RgsResult<T> out{T(0), T(0), T(0), Vec<T>(d), Vec<T>(d), 0};
    for (Eigen::Index l = 0; l < d; ++l) {
        detail::require(std::isfinite(mu[l]) && std::isfinite(r[l]) && std::isfinite(target[l]),
                        "heteroscedastic_nll: non-finite input");
        const bool clamped = r[l] < -lim || r[l] > lim;
        const T rc = std::clamp(r[l], -lim, lim);
        const T diff = target[l] - mu[l];
        const T precision = std::exp(-rc);
        const T weighted = precision * diff * diff;
        out.residual_part += T(0.5) * weighted * inv_d;
        out.logvar_part += T(0.5) * rc * inv_d;
        out.grad_mu[l] = -precision * diff * inv_d;
        out.grad_r[l] = clamped ? T(0) : T(0.5) * (T(1) - weighted) * inv_d;
        if (clamped) ++out.clamped;
    }
    out.value = out.residual_part + out.logvar_part;
    return out;
}

template <std::floating_point T>
struct BatchRgsResult {
    T loss = 0;
    T residual_part = 0;
    T logvar_part = 0;
    Mat<T> grad_mu;  // N x D
    Mat<T> grad_r;   // N x D
    std::size_t clamped = 0;
};

/// Mean heteroscedastic NLL over a batch, each row regressed onto the
/// classifier column of its label.
template <std::floating_point T>
BatchRgsResult<T> batch_rgs_loss(const Mat<T>& mu, const Mat<T>& r, std::span<const int> labels, const Mat<T>& w) {
    const Eigen::Index n = mu.rows(), d = mu.cols();
    detail::require(n >= 1, "batch_rgs_loss: empty batch");
    detail::require(r.rows() == n && r.cols() == d, "batch_rgs_loss: mu/r shape mismatch");
    detail::require(w.rows() == d, "batch_rgs_loss: embedding/target dim mismatch");
    detail::check_labels(labels, n, w.cols());
    BatchRgsResult<T> out{T(0), T(0), T(0), Mat<T>(n, d), Mat<T>(n, d), 0};
    const T inv_n = T(1) / static_cast<T>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto one = heteroscedastic_nll<T>(mu.row(i).transpose(), r.row(i).transpose(),
                                                w.col(labels[static_cast<std::size_t>(i)]));
        out.loss += one.value * inv_n;
        out.residual_part += one.residual_part * inv_n;
        out.logvar_part += one.logvar_part * inv_n;
        out.grad_mu.row(i) = one.grad_mu.transpose() * inv_n;
        out.grad_r.row(i) = one.grad_r.transpose() * inv_n;
        out.clamped += one.clamped;
    }
    return out;
}

}  // namespace dul
