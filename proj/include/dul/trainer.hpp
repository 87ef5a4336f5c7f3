#pragma once

// SGD training loops: deterministic baseline, classification-based DUL
// (sampled embeddings + KL), and the two-stage regression-based DUL that
// regresses onto a frozen classifier's class centers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dul/encoder.hpp"
#include "dul/losses.hpp"
#include "dul/rng.hpp"
#include "dul/synthdata.hpp"

namespace dul {

/// Symmetric triangle over the whole run: base -> max over the first half,
/// max -> base over the second.
inline double triangular_lr(long step, long total_steps, double base_lr, double max_lr) {
    detail::require(total_steps > 0 && step >= 0 && step < total_steps, "triangular_lr: step out of range");
    const double half = static_cast<double>(total_steps) / 2.0;
    const double t = static_cast<double>(step);
    const double frac = t <= half ? t / half : (static_cast<double>(total_steps) - t) / half;
    return base_lr + (max_lr - base_lr) * frac;
}

/// Step decay used by the regression stage: lr0 until 40% of the run, lr0/10
/// until 60%, lr0/100 afterwards.
inline double step_decay_lr(long step, long total_steps, double lr0) {
    detail::require(total_steps > 0 && step >= 0 && step < total_steps, "step_decay_lr: step out of range");
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    if (frac < 0.4) return lr0;
    if (frac < 0.6) return lr0 * 0.1;
    return lr0 * 0.01;
}

enum class LossKind { Classification, Regression };

template <std::floating_point T>
using StepObserver = std::function<void(int step, const EncoderModel<T>& model, const Mat<T>& classifier)>;

struct TrainConfig {
    int steps = 2000;
    int batch_size = 64;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double max_lr = 0.1;
    double base_lr = 0.0;
    std::uint64_t seed = 1;
    LossKind loss = LossKind::Classification;
    ClsLossConfig cls;
    /// Forces eps = 0 in the DUL classification trainer.
    bool zero_eps = false;

    void validate() const {
        detail::require(steps > 0, "TrainConfig: steps must be > 0");
        detail::require(batch_size > 0, "TrainConfig: batch_size must be > 0");
        detail::require(momentum >= 0.0 && momentum < 1.0, "TrainConfig: momentum must be in [0, 1)");
        detail::require(weight_decay >= 0.0, "TrainConfig: weight_decay must be >= 0");
        detail::require(std::isfinite(max_lr) && std::isfinite(base_lr), "TrainConfig: non-finite learning rate");
        if (loss == LossKind::Classification) cls.validate();
    }
};

/// One row per step. For classification: part_a = softmax term, part_b = KL
/// term (before lambda). For regression: part_a = residual term, part_b =
/// log-variance term.
struct TrainLog {
    std::vector<double> loss;
    std::vector<double> part_a;
    std::vector<double> part_b;
    std::vector<double> sigma_bar;  // batch mean harmonic sigma; 0 without a trained sigma head
    std::vector<double> lr;
    std::size_t clamped = 0;

    std::size_t size() const noexcept { return loss.size(); }
};

template <std::floating_point T>
struct TrainResult {
    EncoderModel<T> model;
    Mat<T> classifier;
    TrainLog log;
};

namespace detail {

/// Classical SGD: v <- momentum v + (g + decay p);  p <- p - lr v.
template <typename T>
void sgd_update(Mat<T>& p, const Mat<T>& g, Mat<T>& v, double lr, double momentum, double decay) {
    v = T(momentum) * v + (g + T(decay) * p);
    p -= T(lr) * v;
}

template <typename T>
struct Optimizer {
    EncoderModel<T> velocity;
    Mat<T> classifier_velocity;

    Optimizer(const EncoderModel<T>& m, const Mat<T>& w) : velocity(m.zeros_like()), classifier_velocity(Mat<T>::Zero(w.rows(), w.cols())) {}

    void step(EncoderModel<T>& model, const EncoderModel<T>& grad, Mat<T>* w, const Mat<T>* grad_w,
              const TrainConfig& cfg, double lr, bool update_sigma_head) {
        using G = typename EncoderModel<T>::ParamGroup;
        std::vector<Mat<T>*> params, grads, vels;
        std::vector<G> groups;
        model.for_each_param([&](Mat<T>& m, G g) {
            params.push_back(&m);
            groups.push_back(g);
        });
        const_cast<EncoderModel<T>&>(grad).for_each_param([&](Mat<T>& m, G) { grads.push_back(&m); });
        velocity.for_each_param([&](Mat<T>& m, G) { vels.push_back(&m); });
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (groups[k] == G::Trunk && model.frozen_trunk) continue;
            if (groups[k] == G::SigmaHead && !update_sigma_head) continue;
            sgd_update(*params[k], *grads[k], *vels[k], lr, cfg.momentum, cfg.weight_decay);
        }
        if (w && grad_w) sgd_update(*w, *grad_w, classifier_velocity, lr, cfg.momentum, cfg.weight_decay);
    }
};

inline std::vector<int> draw_batch(Rng& rng, std::size_t n, int batch_size) {
    std::uniform_int_distribution<std::size_t> u(0, n - 1);
    std::vector<int> idx(static_cast<std::size_t>(batch_size));
    for (auto& i : idx) i = static_cast<int>(u(rng));
    return idx;
}

template <typename T>
Mat<T> gather_rows(const Mat<double>& x, std::span<const int> idx) {
    Mat<T> out(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(idx[k]).template cast<T>();
    return out;
}

inline std::vector<int> gather_labels(std::span<const int> labels, std::span<const int> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) out[k] = labels[static_cast<std::size_t>(idx[k])];
    return out;
}

inline void check_finite(double loss, int step) {
    if (!std::isfinite(loss))
        throw NumericalAbort("training diverged: non-finite loss at step " + std::to_string(step));
}

/// Diverged parameters show up as non-finite mu or a log-variance whose
/// sigma = exp(r / 2) no longer fits in a double.
template <typename T>
void check_forward(const EncoderForward<T>& fwd, int step) {
    const bool mu_ok = fwd.mu.allFinite();
    const bool r_ok = fwd.r.size() == 0 || (fwd.r.allFinite() && fwd.r.cwiseAbs().maxCoeff() < T(1400));
    if (!mu_ok || !r_ok)
        throw NumericalAbort("training diverged: non-finite " + std::string(mu_ok ? "log-variance" : "embedding") +
                             " at step " + std::to_string(step));
}

template <typename T>
double mean_harmonic_sigma(const Mat<T>& r) {
    const auto hs = harmonic_sigmas(r);
    double acc = 0.0;
    for (double h : hs) acc += h;
    return acc / static_cast<double>(hs.size());
}

inline void check_dataset(const SyntheticIdentityDataset& ds, Eigen::Index classes, Eigen::Index input_dim) {
    require(ds.size() > 0, "training: empty dataset");
    require(ds.inputs.cols() == input_dim, "training: dataset/model input dim mismatch");
    for (int y : ds.labels) require(y >= 0 && y < classes, "training: label out of classifier range");
}

// Shared loop for the baseline and classification DUL trainers. With
// `stochastic` false the embedding is mu itself and no KL is applied.
template <typename T>
TrainResult<T> train_classifier(const SyntheticIdentityDataset& ds, EncoderModel<T> model, Mat<T> w,
                                const TrainConfig& cfg, bool stochastic, const StepObserver<T>& observer) {
    cfg.validate();
    require(cfg.loss == LossKind::Classification, "classification trainer needs a classification loss");
    require(w.rows() == model.embedding_dim(), "classifier/embedding dim mismatch");
    check_dataset(ds, w.cols(), model.input_dim());
    if (stochastic) require(model.has_sigma_head(), "DUL classification training needs a sigma head");

    Rng batch_rng = make_rng(cfg.seed, 100);
    Rng noise_rng = make_rng(cfg.seed, 101);
    std::normal_distribution<double> nd(0.0, 1.0);
    Optimizer<T> opt(model, w);
    TrainLog log;

    for (int step = 0; step < cfg.steps; ++step) {
        const auto idx = draw_batch(batch_rng, ds.size(), cfg.batch_size);
        const Mat<T> x = gather_rows<T>(ds.inputs, idx);
        const auto y = gather_labels(ds.labels, idx);
        const auto fwd = model.forward(x);
        check_forward(fwd, step);

        EncoderModel<T> grad;
        Mat<T> grad_w;
        double loss = 0, part_a = 0, part_b = 0, sigma_bar = 0;
        if (stochastic) {
            const Mat<T> sigma = fwd.r.unaryExpr([](T r) { return std::exp(r / T(2)); });
            Mat<T> eps = Mat<T>::Zero(fwd.mu.rows(), fwd.mu.cols());
            if (!cfg.zero_eps)
                for (Eigen::Index i = 0; i < eps.rows(); ++i)
                    for (Eigen::Index l = 0; l < eps.cols(); ++l) eps(i, l) = static_cast<T>(nd(noise_rng));
            auto res = cls_total_loss<T>(fwd.mu, sigma, eps, y, w, cfg.cls);
            // d sigma / d r = sigma / 2
            const Mat<T> grad_r = res.grad_sigma.cwiseProduct(sigma) / T(2);
            grad = model.backward(fwd, res.grad_mu, grad_r);
            grad_w = std::move(res.grad_w);
            loss = res.loss;
            part_a = res.softmax_part;
            part_b = res.kl_part;
            sigma_bar = mean_harmonic_sigma(fwd.r);
        } else {
            auto res = softmax_loss<T>(fwd.mu, y, w, cfg.cls.softmax);
            grad = model.backward(fwd, res.grad_s, Mat<T>());
            grad_w = std::move(res.grad_w);
            loss = res.loss;
            part_a = res.loss;
        }
        check_finite(loss, step);

        const double lr = triangular_lr(step, cfg.steps, cfg.base_lr, cfg.max_lr);
        opt.step(model, grad, &w, &grad_w, cfg, lr, stochastic);

        log.loss.push_back(loss);
        log.part_a.push_back(part_a);
        log.part_b.push_back(part_b);
        log.sigma_bar.push_back(sigma_bar);
        log.lr.push_back(lr);
        if (observer) observer(step, model, w);
    }
    return {std::move(model), std::move(w), std::move(log)};
}

}  // namespace detail

/// Deterministic baseline: the embedding fed to the classifier is mu; the
/// sigma head, if present, is left untouched.
template <std::floating_point T>
TrainResult<T> train_baseline(const SyntheticIdentityDataset& ds, EncoderModel<T> model, Mat<T> w,
                              const TrainConfig& cfg, const StepObserver<T>& observer = {}) {
    return detail::train_classifier<T>(ds, std::move(model), std::move(w), cfg, false, observer);
}

/// Classification-based DUL: s = mu + eps * sigma with one seeded eps draw per
/// sample per step, loss = margin softmax(s) + lambda * KL.
template <std::floating_point T>
TrainResult<T> train_dul_cls(const SyntheticIdentityDataset& ds, EncoderModel<T> model, Mat<T> w,
                             const TrainConfig& cfg, const StepObserver<T>& observer = {}) {
    return detail::train_classifier<T>(ds, std::move(model), std::move(w), cfg, true, observer);
}

/// Regression-based DUL, stage 2: the pretrained trunk is frozen, fresh mu and
/// sigma heads regress each sample onto its class column of the frozen
/// classifier with the heteroscedastic NLL. The classifier is never updated.
/// Learning rate follows step_decay_lr starting at cfg.max_lr.
template <std::floating_point T>
TrainResult<T> train_dul_rgs(const SyntheticIdentityDataset& ds, const EncoderModel<T>& pretrained,
                             const ClassifierWeights<T>& targets, const TrainConfig& cfg,
                             const StepObserver<T>& observer = {}) {
    cfg.validate();
    detail::require(pretrained.parameter_count() > 0, "train_dul_rgs: missing pretrained model");
    detail::require(targets.w.size() > 0, "train_dul_rgs: missing pretrained classifier");
    detail::require(targets.w.rows() == pretrained.embedding_dim(), "train_dul_rgs: classifier/embedding dim mismatch");
    detail::check_dataset(ds, targets.w.cols(), pretrained.input_dim());

    EncoderModel<T> model = pretrained;
    model.frozen_trunk = true;
    model.reinit_heads(mix_seed(cfg.seed, 12), true);

    Rng batch_rng = make_rng(cfg.seed, 102);
    detail::Optimizer<T> opt(model, targets.w);
    TrainLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        const auto idx = detail::draw_batch(batch_rng, ds.size(), cfg.batch_size);
        const Mat<T> x = detail::gather_rows<T>(ds.inputs, idx);
        const auto y = detail::gather_labels(ds.labels, idx);
        const auto fwd = model.forward(x);
        detail::check_forward(fwd, step);
        const auto res = batch_rgs_loss<T>(fwd.mu, fwd.r, y, targets.w);
        detail::check_finite(static_cast<double>(res.loss), step);
        const auto grad = model.backward(fwd, res.grad_mu, res.grad_r);
        const double lr = step_decay_lr(step, cfg.steps, cfg.max_lr);
        opt.step(model, grad, nullptr, nullptr, cfg, lr, true);

        log.loss.push_back(res.loss);
        log.part_a.push_back(res.residual_part);
        log.part_b.push_back(res.logvar_part);
        log.sigma_bar.push_back(detail::mean_harmonic_sigma(fwd.r));
        log.lr.push_back(lr);
        log.clamped += res.clamped;
        if (observer) observer(step, model, targets.w);
    }
    return {std::move(model), targets.w, std::move(log)};
}

/// 1-D heteroscedastic regression: a scalar-input model with D = 1 regresses y
/// with the same NLL used by the regression stage. Whole model is trained,
/// learning rate follows step_decay_lr from cfg.max_lr.
template <std::floating_point T>
TrainResult<T> train_hetreg(const HetRegDataset& ds, EncoderModel<T> model, const TrainConfig& cfg,
                            const StepObserver<T>& observer = {}) {
    cfg.validate();
    detail::require(!ds.x.empty() && ds.x.size() == ds.y.size(), "train_hetreg: empty or ragged dataset");
    detail::require(model.input_dim() == 1 && model.embedding_dim() == 1 && model.has_sigma_head(),
                    "train_hetreg: model must map 1 -> 1 with a sigma head");
    Rng batch_rng = make_rng(cfg.seed, 103);
    detail::Optimizer<T> opt(model, Mat<T>::Zero(1, 1));
    TrainLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        const auto idx = detail::draw_batch(batch_rng, ds.x.size(), cfg.batch_size);
        Mat<T> x(cfg.batch_size, 1);
        Mat<T> target(1, cfg.batch_size);
        std::vector<int> cols(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            x(static_cast<Eigen::Index>(k), 0) = static_cast<T>(ds.x[static_cast<std::size_t>(idx[k])]);
            target(0, static_cast<Eigen::Index>(k)) = static_cast<T>(ds.y[static_cast<std::size_t>(idx[k])]);
            cols[k] = static_cast<int>(k);
        }
        const auto fwd = model.forward(x);
        detail::check_forward(fwd, step);
        // each sample gets its own one-column "class" holding its target
        const auto res = batch_rgs_loss<T>(fwd.mu, fwd.r, cols, target);
        detail::check_finite(static_cast<double>(res.loss), step);
        const auto grad = model.backward(fwd, res.grad_mu, res.grad_r);
        const double lr = step_decay_lr(step, cfg.steps, cfg.max_lr);
        opt.step(model, grad, nullptr, nullptr, cfg, lr, true);

        log.loss.push_back(res.loss);
        log.part_a.push_back(res.residual_part);
        log.part_b.push_back(res.logvar_part);
        log.sigma_bar.push_back(detail::mean_harmonic_sigma(fwd.r));
        log.lr.push_back(lr);
        log.clamped += res.clamped;
        if (observer) observer(step, model, Mat<T>());
    }
    return {std::move(model), Mat<T>(), std::move(log)};
}

/// Classifier columns initialized like the heads: uniform in +-1/sqrt(D).
template <std::floating_point T>
Mat<T> init_classifier(Eigen::Index dim, Eigen::Index classes, std::uint64_t seed) {
    Rng rng = make_rng(seed, 13);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    Mat<T> w(dim, classes);
    for (Eigen::Index c = 0; c < classes; ++c)
        for (Eigen::Index r = 0; r < dim; ++r) w(r, c) = static_cast<T>(u(rng));
    return w;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool passed = false;
};

/// Value and analytic gradient at a parameter vector.
using LossClosure = std::function<std::pair<double, std::vector<double>>(std::span<const double>)>;

/// Central differences with step h against the analytic gradient. Relative
/// error per coordinate is |a - n| / max(|a|, |n|, 1e-6).
inline GradCheckReport gradient_check(const LossClosure& loss, std::vector<double> params, double tolerance,
                                      double h = 1e-5) {
    GradCheckReport rep;
    const auto analytic = loss(params).second;
    if (analytic.size() != params.size()) {
        rep.max_rel_error = std::numeric_limits<double>::infinity();
        return rep;
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double saved = params[k];
        params[k] = saved + h;
        const double up = loss(params).first;
        params[k] = saved - h;
        const double down = loss(params).first;
        params[k] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[k]), std::abs(numeric), 1e-6});
        const double rel = std::isfinite(numeric) ? std::abs(analytic[k] - numeric) / denom
                                                  : std::numeric_limits<double>::infinity();
        if (rel > rep.max_rel_error || !std::isfinite(rel)) {
            rep.max_rel_error = rel;
            rep.worst_index = k;
        }
        ++rep.checked;
    }
    rep.passed = rep.max_rel_error < tolerance;
    return rep;
}

}  // namespace dul
