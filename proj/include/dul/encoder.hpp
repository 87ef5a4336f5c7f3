#pragma once

// Small two-headed encoder: a tanh MLP trunk shared by an identity head (mu)
// and an uncertainty head producing raw log-variance r = ln sigma^2.

#include <cstdint>
#include <functional>
#include <istream>
#include <optional>
#include <span>
#include <ostream>
#include <string>
#include <vector>

#include "dul/embedding.hpp"
#include "dul/errors.hpp"
#include "dul/losses.hpp"
#include "dul/rng.hpp"
#include "dul/synthdata.hpp"

namespace dul {

template <std::floating_point T>
struct Affine {
    Mat<T> weight;  // out x in
    Mat<T> bias;    // out x 1

    Eigen::Index in() const noexcept { return weight.cols(); }
    Eigen::Index out() const noexcept { return weight.rows(); }

    Mat<T> forward(const Mat<T>& x) const {
        Mat<T> y = x * weight.transpose();
        y.rowwise() += bias.col(0).transpose();
        return y;
    }

    static Affine init(Eigen::Index in, Eigen::Index out, Rng& rng, T bias_value = T(0)) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        Affine a{Mat<T>(out, in), Mat<T>::Constant(out, 1, bias_value)};
        for (Eigen::Index r = 0; r < out; ++r)
            for (Eigen::Index c = 0; c < in; ++c) a.weight(r, c) = static_cast<T>(u(rng));
        return a;
    }

    Affine zeros_like() const { return {Mat<T>::Zero(weight.rows(), weight.cols()), Mat<T>::Zero(bias.rows(), 1)}; }
};

/// Initial bias of the uncertainty head: r = -2, sigma ~ 0.37.
inline constexpr double kSigmaHeadBiasInit = -2.0;

struct EncoderShape {
    int input_dim = 32;
    std::vector<int> hidden = {64, 64};
    int embedding_dim = 16;
    bool sigma_head = true;
};

template <std::floating_point T>
struct EncoderForward {
    std::vector<Mat<T>> activations;  // activations[0] = input, then tanh outputs of each trunk layer
    Mat<T> mu;                        // N x D
    Mat<T> r;                         // N x D, empty without a sigma head

    const Mat<T>& features() const { return activations.back(); }
};

template <std::floating_point T>
class EncoderModel {
public:
    EncoderModel() = default;

    EncoderModel(const EncoderShape& shape, std::uint64_t seed) {
        detail::require(shape.input_dim >= 1 && shape.embedding_dim >= 1, "EncoderModel: dims must be >= 1");
        Rng rng = make_rng(seed, 10);
        Eigen::Index prev = shape.input_dim;
        for (int h : shape.hidden) {
            detail::require(h >= 1, "EncoderModel: hidden widths must be >= 1");
            trunk.push_back(Affine<T>::init(prev, h, rng));
            prev = h;
        }
        mu_head = Affine<T>::init(prev, shape.embedding_dim, rng);
        if (shape.sigma_head) sigma_head = Affine<T>::init(prev, shape.embedding_dim, rng, T(kSigmaHeadBiasInit));
    }

    std::vector<Affine<T>> trunk;
    Affine<T> mu_head;
    std::optional<Affine<T>> sigma_head;
    bool frozen_trunk = false;

    Eigen::Index input_dim() const { return trunk.empty() ? mu_head.in() : trunk.front().in(); }
    Eigen::Index feature_dim() const { return mu_head.in(); }
    Eigen::Index embedding_dim() const { return mu_head.out(); }
    bool has_sigma_head() const noexcept { return sigma_head.has_value(); }

    EncoderShape shape() const {
        EncoderShape s;
        s.input_dim = static_cast<int>(input_dim());
        s.hidden.clear();
        for (const auto& l : trunk) s.hidden.push_back(static_cast<int>(l.out()));
        s.embedding_dim = static_cast<int>(embedding_dim());
        s.sigma_head = has_sigma_head();
        return s;
    }

    /// Fresh heads on top of the existing trunk.
    void reinit_heads(std::uint64_t seed, bool with_sigma = true) {
        Rng rng = make_rng(seed, 11);
        mu_head = Affine<T>::init(feature_dim(), embedding_dim(), rng);
        if (with_sigma)
            sigma_head = Affine<T>::init(feature_dim(), embedding_dim(), rng, T(kSigmaHeadBiasInit));
        else
            sigma_head.reset();
    }

    EncoderModel zeros_like() const {
        EncoderModel z;
        for (const auto& l : trunk) z.trunk.push_back(l.zeros_like());
        z.mu_head = mu_head.zeros_like();
        if (sigma_head) z.sigma_head = sigma_head->zeros_like();
        z.frozen_trunk = frozen_trunk;
        return z;
    }

    /// Visits every parameter block in declaration order: trunk layers
    /// (weight, bias), mu head, sigma head.
    template <typename F>
    void for_each_param(F&& f) {
        for (auto& l : trunk) {
            f(l.weight, ParamGroup::Trunk);
            f(l.bias, ParamGroup::Trunk);
        }
        f(mu_head.weight, ParamGroup::MuHead);
        f(mu_head.bias, ParamGroup::MuHead);
        if (sigma_head) {
            f(sigma_head->weight, ParamGroup::SigmaHead);
            f(sigma_head->bias, ParamGroup::SigmaHead);
        }
    }

    template <typename F>
    void for_each_param(F&& f) const {
        const_cast<EncoderModel*>(this)->for_each_param(
            [&](Mat<T>& m, ParamGroup g) { f(static_cast<const Mat<T>&>(m), g); });
    }

    enum class ParamGroup { Trunk, MuHead, SigmaHead };

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for_each_param([&](const Mat<T>& m, ParamGroup) { n += static_cast<std::size_t>(m.size()); });
        return n;
    }

    Mat<T> trunk_forward(const Mat<T>& x, std::vector<Mat<T>>* acts = nullptr) const {
        detail::require(x.cols() == input_dim(), "EncoderModel: input dim mismatch");
        Mat<T> h = x;
        if (acts) acts->push_back(h);
        for (const auto& l : trunk) {
            h = l.forward(h).array().tanh().matrix();
            if (acts) acts->push_back(h);
        }
        return h;
    }

    EncoderForward<T> forward(const Mat<T>& x) const {
        EncoderForward<T> out;
        const Mat<T> h = trunk_forward(x, &out.activations);
        out.mu = mu_head.forward(h);
        if (sigma_head) out.r = sigma_head->forward(h);
        return out;
    }

    /// Gradients of all parameters given upstream gradients w.r.t. mu and r.
    /// `grad_r` may be empty. Trunk gradients are skipped when the trunk is
    /// frozen.
    EncoderModel backward(const EncoderForward<T>& fwd, const Mat<T>& grad_mu, const Mat<T>& grad_r) const {
        EncoderModel g = zeros_like();
        const Mat<T>& h = fwd.features();
        g.mu_head.weight = grad_mu.transpose() * h;
        g.mu_head.bias = grad_mu.colwise().sum().transpose();
        const bool use_r = sigma_head && grad_r.size() > 0;
        if (use_r) {
            g.sigma_head->weight = grad_r.transpose() * h;
            g.sigma_head->bias = grad_r.colwise().sum().transpose();
        }
        if (frozen_trunk || trunk.empty()) return g;

        Mat<T> dh = grad_mu * mu_head.weight;
        if (use_r) dh += grad_r * sigma_head->weight;
        for (std::size_t k = trunk.size(); k-- > 0;) {
            const Mat<T>& out = fwd.activations[k + 1];
            const Mat<T> dpre = dh.cwiseProduct((T(1) - out.array().square()).matrix());
            g.trunk[k].weight = dpre.transpose() * fwd.activations[k];
            g.trunk[k].bias = dpre.colwise().sum().transpose();
            if (k > 0) dh = dpre * trunk[k].weight;
        }
        return g;
    }

    std::vector<T> flatten() const {
        std::vector<T> flat;
        flat.reserve(parameter_count());
        for_each_param([&](const Mat<T>& m, ParamGroup) {
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                for (Eigen::Index i = 0; i < m.rows(); ++i) flat.push_back(m(i, j));
        });
        return flat;
    }

    void unflatten(std::span<const T> flat) {
        detail::require(flat.size() == parameter_count(), "EncoderModel: flat parameter size mismatch");
        std::size_t k = 0;
        for_each_param([&](Mat<T>& m, ParamGroup) {
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = flat[k++];
        });
    }
};

/// Per-sample scalar uncertainty: harmonic mean of sigma = exp(r / 2).
template <std::floating_point T>
std::vector<double> harmonic_sigmas(const Mat<T>& r) {
    std::vector<double> out(static_cast<std::size_t>(r.rows()));
    for (Eigen::Index i = 0; i < r.rows(); ++i)
        out[static_cast<std::size_t>(i)] = static_cast<double>(harmonic_mean_sigma(sigma_from_raw(r.row(i).transpose())));
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint file (binary, little-endian):
//   "DULC" magic, u32 version (1)
//   u64 seed, u32 input_dim, u32 trunk_layers, u32 x trunk_layers hidden widths,
//   u32 embedding_dim, u8 has_sigma_head, u8 frozen_trunk,
//   u32 classes (0 when no classifier), u8 classifier_normalized,
//   u8 softmax variant (0 plain, 1 am-softmax, 2 arcface, 3 l2-softmax),
//   f64 margin, f64 scale, u8 normalize_plain,
//   then f64 parameters in declaration order (each matrix column-major):
//   trunk weight/bias pairs, mu head, sigma head, then the D x C classifier.
// ---------------------------------------------------------------------------

struct Checkpoint {
    EncoderModel<double> model;
    Mat<double> classifier;  // D x C, may be empty
    bool classifier_normalized = false;
    SoftmaxConfig softmax;
    std::uint64_t seed = 0;
};

inline void write_checkpoint(const Checkpoint& ck, std::ostream& os) {
    const auto& m = ck.model;
    os.write("DULC", 4);
    detail::put_le<std::uint32_t>(os, 1);
    detail::put_le<std::uint64_t>(os, ck.seed);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.input_dim()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.trunk.size()));
    for (const auto& l : m.trunk) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.embedding_dim()));
    detail::put_le<std::uint8_t>(os, m.has_sigma_head() ? 1 : 0);
    detail::put_le<std::uint8_t>(os, m.frozen_trunk ? 1 : 0);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.classifier.cols()));
    detail::put_le<std::uint8_t>(os, ck.classifier_normalized ? 1 : 0);
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(ck.softmax.variant));
    detail::put_le<double>(os, ck.softmax.margin);
    detail::put_le<double>(os, ck.softmax.scale);
    detail::put_le<std::uint8_t>(os, ck.softmax.normalize_plain ? 1 : 0);
    for (double v : m.flatten()) detail::put_le<double>(os, v);
    for (Eigen::Index j = 0; j < ck.classifier.cols(); ++j)
        for (Eigen::Index i = 0; i < ck.classifier.rows(); ++i) detail::put_le<double>(os, ck.classifier(i, j));
}

inline Checkpoint read_checkpoint(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DULC", 4) != 0) throw ContractError("checkpoint: bad magic");
    if (detail::get_le<std::uint32_t>(is) != 1) throw ContractError("checkpoint: unsupported version");
    Checkpoint ck;
    ck.seed = detail::get_le<std::uint64_t>(is);
    EncoderShape shape;
    shape.input_dim = static_cast<int>(detail::get_le<std::uint32_t>(is));
    const auto layers = detail::get_le<std::uint32_t>(is);
    shape.hidden.clear();
    for (std::uint32_t k = 0; k < layers; ++k) shape.hidden.push_back(static_cast<int>(detail::get_le<std::uint32_t>(is)));
    shape.embedding_dim = static_cast<int>(detail::get_le<std::uint32_t>(is));
    shape.sigma_head = detail::get_le<std::uint8_t>(is) != 0;
    const bool frozen = detail::get_le<std::uint8_t>(is) != 0;
    const auto classes = detail::get_le<std::uint32_t>(is);
    ck.classifier_normalized = detail::get_le<std::uint8_t>(is) != 0;
    const auto variant = detail::get_le<std::uint8_t>(is);
    if (variant > 3) throw ContractError("checkpoint: bad softmax variant");
    ck.softmax.variant = static_cast<SoftmaxVariant>(variant);
    ck.softmax.margin = detail::get_le<double>(is);
    ck.softmax.scale = detail::get_le<double>(is);
    ck.softmax.normalize_plain = detail::get_le<std::uint8_t>(is) != 0;
    ck.model = EncoderModel<double>(shape, 0);
    ck.model.frozen_trunk = frozen;
    std::vector<double> flat(ck.model.parameter_count());
    for (auto& v : flat) v = detail::get_le<double>(is);
    ck.model.unflatten(flat);
    ck.classifier.resize(shape.embedding_dim, classes);
    for (Eigen::Index j = 0; j < ck.classifier.cols(); ++j)
        for (Eigen::Index i = 0; i < ck.classifier.rows(); ++i) ck.classifier(i, j) = detail::get_le<double>(is);
    return ck;
}

}  // namespace dul
