#pragma once

// Gaussian embeddings: a per-sample identity feature mu with a per-dimension
// uncertainty sigma, reparameterized sampling, and sigma summaries.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>

#include <Eigen/Core>

#include "dul/errors.hpp"

namespace dul {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// Diagonal Gaussian N(mu, diag(sigma^2)). Construction validates the
/// invariants; members are read-only afterwards.
template <std::floating_point T>
class GaussianEmbedding {
public:
    GaussianEmbedding(Vec<T> mu, Vec<T> sigma) : mu_(std::move(mu)), sigma_(std::move(sigma)) {
        detail::require(mu_.size() == sigma_.size(), "GaussianEmbedding: mu/sigma length mismatch");
        detail::require(mu_.size() >= 1, "GaussianEmbedding: empty embedding");
        for (Eigen::Index l = 0; l < sigma_.size(); ++l) {
            detail::require(std::isfinite(sigma_[l]) && sigma_[l] > T(0),
                            "GaussianEmbedding: sigma must be finite and > 0");
        }
    }

    const Vec<T>& mu() const noexcept { return mu_; }
    const Vec<T>& sigma() const noexcept { return sigma_; }
    Eigen::Index dim() const noexcept { return mu_.size(); }

private:
    Vec<T> mu_;
    Vec<T> sigma_;
};

template <std::floating_point T>
struct SampledEmbedding {
    Vec<T> s;
    Vec<T> eps;
};

enum class SigmaParameterization { LogVarianceExp };

struct LatentConfig {
    int dim = 16;
    SigmaParameterization sigma_parameterization = SigmaParameterization::LogVarianceExp;

    void validate() const { detail::require(dim >= 1, "LatentConfig: dim must be >= 1"); }
};

/// s = mu + eps * sigma (element-wise). ds/dmu = I, ds/dsigma = diag(eps).
template <std::floating_point T>
SampledEmbedding<T> sample_embedding(const GaussianEmbedding<T>& g, const Vec<T>& eps) {
    detail::require(eps.size() == g.dim(), "sample_embedding: eps length mismatch");
    return {g.mu() + eps.cwiseProduct(g.sigma()), eps};
}

/// D / sum_l (1 / sigma_l). The scalar uncertainty score used by every
/// report downstream.
template <typename Derived>
typename Derived::Scalar harmonic_mean_sigma(const Eigen::MatrixBase<Derived>& sigma) {
    using T = typename Derived::Scalar;
    detail::require(sigma.size() >= 1, "harmonic_mean_sigma: empty sigma");
    T inv_sum = 0;
    for (Eigen::Index l = 0; l < sigma.size(); ++l) {
        detail::require(sigma[l] > T(0), "harmonic_mean_sigma: sigma must be > 0");
        inv_sum += T(1) / sigma[l];
    }
    return static_cast<T>(sigma.size()) / inv_sum;
}

template <std::floating_point T>
T harmonic_mean_sigma(const GaussianEmbedding<T>& g) {
    return harmonic_mean_sigma(g.sigma());
}

/// Raw head output r = ln sigma^2  ->  sigma = exp(r / 2).
template <typename Derived>
Vec<typename Derived::Scalar> sigma_from_raw(const Eigen::MatrixBase<Derived>& r) {
    using T = typename Derived::Scalar;
    Vec<T> sigma(r.size());
    for (Eigen::Index l = 0; l < r.size(); ++l) {
        detail::require(std::isfinite(r[l]), "sigma_from_raw: non-finite raw value");
        sigma[l] = std::exp(r[l] / T(2));
    }
    return sigma;
}

}  // namespace dul
