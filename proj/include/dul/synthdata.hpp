#pragma once

// Synthetic data with known per-sample noise: identity clusters on the unit
// sphere, seeded corruption of a fraction of samples, and a 1-D
// heteroscedastic regression task.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dul/embedding.hpp"
#include "dul/errors.hpp"
#include "dul/rng.hpp"

namespace dul {

struct CorruptionSpec {
    double fraction = 0.0;
    double scale = 0.0;
    std::uint64_t seed = 0;
};

struct IdentitySpec {
    int classes = 10;
    int per_class = 100;
    int input_dim = 32;
    double center_spread = 0.5;  // minimum pairwise angle between centers, radians
    double base_noise = 0.1;     // per-coordinate std of the isotropic sample noise
    std::uint64_t seed = 1;
    std::vector<CorruptionSpec> corruptions;

    std::string canonical() const;
    std::uint64_t hash() const { return fnv1a(canonical()); }
};

namespace detail {

inline std::string fmt_double(double v) {
    std::array<char, 32> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

}  // namespace detail

inline std::string IdentitySpec::canonical() const {
    std::ostringstream os;
    os << "identities;C=" << classes << ";per_class=" << per_class << ";dim=" << input_dim
       << ";spread=" << detail::fmt_double(center_spread) << ";noise=" << detail::fmt_double(base_noise)
       << ";seed=" << seed;
    for (const auto& c : corruptions)
        os << "|corrupt;p=" << detail::fmt_double(c.fraction) << ";scale=" << detail::fmt_double(c.scale)
           << ";seed=" << c.seed;
    return os.str();
}

struct SyntheticIdentityDataset {
    Mat<double> inputs;                 // N x input_dim
    std::vector<int> labels;            // N
    std::vector<double> noise_level;    // N, true per-coordinate noise std
    Mat<double> centers;                // C x input_dim, empty when loaded from file
    int num_classes = 0;
    std::uint64_t seed = 0;
    std::uint64_t spec_hash = 0;
    IdentitySpec spec;

    std::size_t size() const noexcept { return labels.size(); }
    int input_dim() const noexcept { return static_cast<int>(inputs.cols()); }

    /// True for samples whose noise exceeds the smallest level in the set.
    std::vector<bool> corrupted_mask() const {
        std::vector<bool> out(size(), false);
        if (noise_level.empty()) return out;
        const double lo = *std::min_element(noise_level.begin(), noise_level.end());
        for (std::size_t i = 0; i < size(); ++i) out[i] = noise_level[i] > lo;
        return out;
    }

    std::size_t corrupted_count() const {
        const auto m = corrupted_mask();
        return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    }
};

inline Vec<double> standard_normal_vector(Rng& rng, Eigen::Index n) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Vec<double> v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = nd(rng);
    return v;
}

/// Class centers uniform on the unit sphere subject to a minimum pairwise
/// angle; samples are center + N(0, base_noise^2 I), stored class-major.
inline SyntheticIdentityDataset gen_identities(const IdentitySpec& spec) {
    detail::require(spec.classes >= 2, "gen_identities: need C >= 2");
    detail::require(spec.per_class >= 2, "gen_identities: need per_class >= 2");
    detail::require(spec.input_dim >= 1, "gen_identities: need input_dim >= 1");
    detail::require(spec.base_noise >= 0.0 && std::isfinite(spec.base_noise), "gen_identities: invalid base_noise");
    detail::require(spec.center_spread >= 0.0, "gen_identities: invalid center_spread");

    Rng rng = make_rng(spec.seed, 0);
    const int d = spec.input_dim;
    Mat<double> centers(spec.classes, d);
    const double max_cos = std::cos(spec.center_spread);
    constexpr int kMaxAttempts = 10000;
    for (int c = 0; c < spec.classes; ++c) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
            Vec<double> v = standard_normal_vector(rng, d);
            const double n = v.norm();
            if (n == 0.0) continue;
            v /= n;
            placed = true;
            for (int k = 0; k < c && placed; ++k)
                if (centers.row(k).dot(v) > max_cos) placed = false;
            if (placed) centers.row(c) = v.transpose();
        }
        if (!placed)
            throw ContractError("gen_identities: could not place class centers with the requested spread");
    }

    SyntheticIdentityDataset ds;
    const int n = spec.classes * spec.per_class;
    ds.inputs.resize(n, d);
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.noise_level.assign(static_cast<std::size_t>(n), spec.base_noise);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int c = 0, i = 0; c < spec.classes; ++c) {
        for (int k = 0; k < spec.per_class; ++k, ++i) {
            ds.labels[static_cast<std::size_t>(i)] = c;
            for (int l = 0; l < d; ++l) ds.inputs(i, l) = centers(c, l) + spec.base_noise * nd(rng);
        }
    }
    ds.centers = std::move(centers);
    ds.num_classes = spec.classes;
    ds.seed = spec.seed;
    ds.spec = spec;
    ds.spec.corruptions.clear();
    ds.spec_hash = ds.spec.hash();
    return ds;
}

/// Adds N(0, scale^2 I) to exactly floor(p N + 0.5) samples chosen by a seeded
/// shuffle; their noise level becomes sqrt(old^2 + scale^2). Labels untouched.
inline SyntheticIdentityDataset corrupt_fraction(const SyntheticIdentityDataset& ds, double fraction, double scale,
                                                 std::uint64_t seed) {
    detail::require(fraction >= 0.0 && fraction <= 1.0, "corrupt_fraction: fraction must be in [0, 1]");
    detail::require(scale >= 0.0 && std::isfinite(scale), "corrupt_fraction: invalid scale");
    SyntheticIdentityDataset out = ds;
    out.spec.corruptions.push_back({fraction, scale, seed});
    out.spec_hash = out.spec.hash();
    const std::size_t n = ds.size();
    const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    if (k == 0 || scale == 0.0) return out;

    Rng rng = make_rng(seed, 1);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i : idx) {
        for (Eigen::Index l = 0; l < out.inputs.cols(); ++l)
            out.inputs(static_cast<Eigen::Index>(i), l) += scale * nd(rng);
        out.noise_level[i] = std::sqrt(out.noise_level[i] * out.noise_level[i] + scale * scale);
    }
    return out;
}

/// Seeded per-class split into (train, test). Every class keeps
/// round(test_fraction * count) samples for the test side; centers are shared.
inline std::pair<SyntheticIdentityDataset, SyntheticIdentityDataset> split_dataset(const SyntheticIdentityDataset& ds,
                                                                                  double test_fraction,
                                                                                  std::uint64_t seed) {
    detail::require(test_fraction > 0.0 && test_fraction < 1.0, "split_dataset: test_fraction must be in (0, 1)");
    Rng rng = make_rng(seed, 3);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    std::vector<std::size_t> train_idx, test_idx;
    for (auto& members : by_class) {
        std::shuffle(members.begin(), members.end(), rng);
        const auto k = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(members.size()) + 0.5));
        std::sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
        test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
        train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
    }
    auto take = [&](const std::vector<std::size_t>& idx) {
        SyntheticIdentityDataset out;
        out.inputs.resize(static_cast<Eigen::Index>(idx.size()), ds.inputs.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            out.inputs.row(static_cast<Eigen::Index>(k)) = ds.inputs.row(static_cast<Eigen::Index>(idx[k]));
            out.labels.push_back(ds.labels[idx[k]]);
            out.noise_level.push_back(ds.noise_level[idx[k]]);
        }
        out.centers = ds.centers;
        out.num_classes = ds.num_classes;
        out.seed = ds.seed;
        out.spec = ds.spec;
        out.spec_hash = ds.spec_hash;
        return out;
    };
    return {take(train_idx), take(test_idx)};
}

/// a + b * x (linear) or a + b * sin(c * x) (sine).
struct ScalarFn {
    enum class Kind { Linear, Sine } kind = Kind::Linear;
    double a = 0.0, b = 1.0, c = 1.0;

    double operator()(double x) const { return kind == Kind::Linear ? a + b * x : a + b * std::sin(c * x); }
};

struct HetRegDataset {
    std::vector<double> x;
    std::vector<double> y;
    ScalarFn mean_fn;
    ScalarFn sigma_fn;
};

/// x ~ U[lo, hi], y = f(x) + eps * sigma(x), eps ~ N(0, 1).
inline HetRegDataset gen_hetreg(std::size_t n, const ScalarFn& f, const ScalarFn& sigma, double lo, double hi,
                                std::uint64_t seed) {
    detail::require(n >= 10, "gen_hetreg: need n >= 10");
    detail::require(lo < hi && std::isfinite(lo) && std::isfinite(hi), "gen_hetreg: invalid x range");
    // sigma must be non-negative over the range; checked on a fine grid and at
    // every drawn x.
    for (int k = 0; k <= 1000; ++k) {
        const double xv = lo + (hi - lo) * k / 1000.0;
        detail::require(sigma(xv) >= 0.0 && std::isfinite(sigma(xv)), "gen_hetreg: sigma(x) must be >= 0");
    }
    Rng rng = make_rng(seed, 2);
    std::uniform_real_distribution<double> ux(lo, hi);
    std::normal_distribution<double> nd(0.0, 1.0);
    HetRegDataset ds{{}, {}, f, sigma};
    ds.x.reserve(n);
    ds.y.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double xv = ux(rng);
        const double s = sigma(xv);
        detail::require(s >= 0.0, "gen_hetreg: sigma(x) must be >= 0");
        ds.x.push_back(xv);
        ds.y.push_back(f(xv) + nd(rng) * s);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset files.
//
// CSV:    first line  "N,dim,C,seed,spec_hash"  (hash as 16 lowercase hex digits)
//         then one line per sample: label,true_noise_level,x_0,...,x_{dim-1}
//         floats in shortest round-trip form.
// Binary: "DULD" magic, u32 version (1), u64 N, u64 dim, u64 C, u64 seed,
//         u64 spec_hash, then per sample i32 label, f64 noise, dim x f64.
//         All little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return s;
}

template <typename U>
void put_le(std::ostream& os, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<unsigned char, sizeof(U)> raw{};
    std::memcpy(raw.data(), &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

template <typename U>
U get_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> raw{};
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw MissingInput("truncated binary file");
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    U v;
    std::memcpy(&v, raw.data(), sizeof(U));
    return v;
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ContractError("malformed number '" + std::string(s) + "'");
    return v;
}

template <typename I>
I parse_int(std::string_view s, int base = 10) {
    I v{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), v, base);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ContractError("malformed integer '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        out.push_back(line.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace detail

inline void write_dataset_csv(const SyntheticIdentityDataset& ds, std::ostream& os) {
    os << ds.size() << ',' << ds.input_dim() << ',' << ds.num_classes << ',' << ds.seed << ','
       << detail::hex64(ds.spec_hash) << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        os << ds.labels[i] << ',' << detail::fmt_double(ds.noise_level[i]);
        for (Eigen::Index l = 0; l < ds.inputs.cols(); ++l)
            os << ',' << detail::fmt_double(ds.inputs(static_cast<Eigen::Index>(i), l));
        os << '\n';
    }
}

inline SyntheticIdentityDataset read_dataset_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw MissingInput("dataset CSV: empty file");
    const auto head = detail::split(line, ',');
    if (head.size() != 5) throw ContractError("dataset CSV: header must have 5 fields");
    SyntheticIdentityDataset ds;
    const auto n = detail::parse_int<std::size_t>(head[0]);
    const auto d = detail::parse_int<int>(head[1]);
    ds.num_classes = detail::parse_int<int>(head[2]);
    ds.seed = detail::parse_int<std::uint64_t>(head[3]);
    ds.spec_hash = detail::parse_int<std::uint64_t>(head[4], 16);
    ds.inputs.resize(static_cast<Eigen::Index>(n), d);
    ds.labels.resize(n);
    ds.noise_level.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(is, line)) throw ContractError("dataset CSV: fewer records than header N");
        const auto f = detail::split(line, ',');
        if (f.size() != static_cast<std::size_t>(d) + 2) throw ContractError("dataset CSV: wrong field count");
        ds.labels[i] = detail::parse_int<int>(f[0]);
        if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) throw ContractError("dataset CSV: label out of range");
        ds.noise_level[i] = detail::parse_double(f[1]);
        for (int l = 0; l < d; ++l)
            ds.inputs(static_cast<Eigen::Index>(i), l) = detail::parse_double(f[static_cast<std::size_t>(l) + 2]);
    }
    return ds;
}

inline void write_dataset_binary(const SyntheticIdentityDataset& ds, std::ostream& os) {
    os.write("DULD", 4);
    detail::put_le<std::uint32_t>(os, 1);
    detail::put_le<std::uint64_t>(os, ds.size());
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(ds.input_dim()));
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(ds.num_classes));
    detail::put_le<std::uint64_t>(os, ds.seed);
    detail::put_le<std::uint64_t>(os, ds.spec_hash);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        detail::put_le<std::int32_t>(os, ds.labels[i]);
        detail::put_le<double>(os, ds.noise_level[i]);
        for (Eigen::Index l = 0; l < ds.inputs.cols(); ++l)
            detail::put_le<double>(os, ds.inputs(static_cast<Eigen::Index>(i), l));
    }
}

inline SyntheticIdentityDataset read_dataset_binary(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DULD", 4) != 0) throw ContractError("dataset binary: bad magic");
    if (detail::get_le<std::uint32_t>(is) != 1) throw ContractError("dataset binary: unsupported version");
    SyntheticIdentityDataset ds;
    const auto n = detail::get_le<std::uint64_t>(is);
    const auto d = detail::get_le<std::uint64_t>(is);
    ds.num_classes = static_cast<int>(detail::get_le<std::uint64_t>(is));
    ds.seed = detail::get_le<std::uint64_t>(is);
    ds.spec_hash = detail::get_le<std::uint64_t>(is);
    ds.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    ds.labels.resize(n);
    ds.noise_level.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = detail::get_le<std::int32_t>(is);
        if (ds.labels[i] < 0 || ds.labels[i] >= ds.num_classes) throw ContractError("dataset binary: label out of range");
        ds.noise_level[i] = detail::get_le<double>(is);
        for (Eigen::Index l = 0; l < static_cast<Eigen::Index>(d); ++l)
            ds.inputs(static_cast<Eigen::Index>(i), l) = detail::get_le<double>(is);
    }
    return ds;
}

}  // namespace dul
