#pragma once

// Command implementations behind the dul command-line tool. Every command is
// a function of (RunConfig, input files); wall-clock timings go to stderr only.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "json.hpp"

#include "dul/analysis.hpp"
#include "dul/encoder.hpp"
#include "dul/errors.hpp"
#include "dul/metrics.hpp"
#include "dul/synthdata.hpp"
#include "dul/trainer.hpp"

namespace dul::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int {
    kOk = 0,
    kUnexpected = 1,
    kConfigError = 2,
    kMissingInput = 3,
    kNumericalAbort = 4,
    kOutputError = 5,
};

struct OutputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

struct KeyDefault {
    const char* section;
    const char* key;
    const char* value;
};

// Every accepted key, in the order the resolved config is written.
inline constexpr std::array kKnownKeys{
    KeyDefault{"run", "seed", "1"},
    KeyDefault{"run", "out", "out"},
    KeyDefault{"dataset", "classes", "20"},
    KeyDefault{"dataset", "per_class", "200"},
    KeyDefault{"dataset", "input_dim", "32"},
    KeyDefault{"dataset", "center_spread", "0.5"},
    KeyDefault{"dataset", "base_noise", "0.2"},
    KeyDefault{"dataset", "corrupt_fraction", "0"},
    KeyDefault{"dataset", "corrupt_scale", "4"},
    KeyDefault{"dataset", "test_fraction", "0"},
    KeyDefault{"dataset", "path", ""},
    KeyDefault{"model", "hidden", "64,64"},
    KeyDefault{"model", "embedding_dim", "16"},
    KeyDefault{"train", "mode", "dul-cls"},
    KeyDefault{"train", "steps", "2000"},
    KeyDefault{"train", "batch_size", "64"},
    KeyDefault{"train", "momentum", "0.9"},
    KeyDefault{"train", "weight_decay", "0.0001"},
    KeyDefault{"train", "max_lr", "0.1"},
    KeyDefault{"train", "base_lr", "0"},
    KeyDefault{"train", "variant", "am-softmax"},
    KeyDefault{"train", "margin", ""},
    KeyDefault{"train", "scale", ""},
    KeyDefault{"train", "normalize_plain", "false"},
    KeyDefault{"train", "lambda", "0.01"},
    KeyDefault{"train", "zero_eps", "false"},
    KeyDefault{"train", "rgs_lr", "0.01"},
    KeyDefault{"train", "baseline_checkpoint", ""},
    KeyDefault{"eval", "checkpoint", ""},
    KeyDefault{"eval", "metric", "cosine"},
    KeyDefault{"eval", "targets", "1e-5,1e-4,1e-3,1e-2"},
    KeyDefault{"eval", "pair_cap", "200000"},
    KeyDefault{"analyze", "baseline_checkpoint", ""},
    KeyDefault{"analyze", "dul_checkpoint", ""},
    KeyDefault{"analyze", "rgs_checkpoint", ""},
    KeyDefault{"analyze", "ladder", "0,0.5,1,2,4"},
    KeyDefault{"analyze", "probe_pairs", "500"},
    KeyDefault{"sweep", "kind", "lambda"},
    KeyDefault{"sweep", "values", "0,1e-4,1e-3,1e-2,0.1,0.5,1"},
    KeyDefault{"sweep", "seeds", "1"},
};

class RunConfig {
public:
    RunConfig() {
        for (const auto& k : kKnownKeys) values_[full(k.section, k.key)] = k.value;
    }

    /// INI text with [section] headers. Unknown sections or keys are errors.
    static RunConfig parse(std::istream& is) {
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(is, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        RunConfig cfg;
        for (const auto& [section, body] : tree) {
            if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
            if (!known_section(section)) throw ConfigError("config: unknown section [" + section + "]");
            for (const auto& [key, val] : body) cfg.set(section, key, val.data());
        }
        return cfg;
    }

    static RunConfig load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw MissingInput("config file not found: " + path.string());
        return parse(in);
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        const auto name = full(section, key);
        if (!values_.contains(name)) throw ConfigError("config: unknown key [" + section + "] " + key);
        values_[name] = value;
    }

    const std::string& str(const std::string& section, const std::string& key) const {
        const auto it = values_.find(full(section, key));
        if (it == values_.end()) throw ConfigError("config: unknown key [" + section + "] " + key);
        return it->second;
    }

    double real(const std::string& section, const std::string& key) const {
        const auto& s = str(section, key);
        try {
            return detail::parse_double(s);
        } catch (const std::exception&) {
            throw ConfigError("config: [" + section + "] " + key + " = '" + s + "' is not a number");
        }
    }

    long integer(const std::string& section, const std::string& key) const {
        const auto& s = str(section, key);
        try {
            return detail::parse_int<long>(s);
        } catch (const std::exception&) {
            throw ConfigError("config: [" + section + "] " + key + " = '" + s + "' is not an integer");
        }
    }

    bool flag(const std::string& section, const std::string& key) const {
        const auto& s = str(section, key);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        throw ConfigError("config: [" + section + "] " + key + " = '" + s + "' is not a boolean");
    }

    std::vector<double> reals(const std::string& section, const std::string& key) const {
        std::vector<double> out;
        const auto& s = str(section, key);
        if (s.empty()) return out;
        for (auto part : detail::split(s, ',')) {
            try {
                out.push_back(detail::parse_double(trim(part)));
            } catch (const std::exception&) {
                throw ConfigError("config: [" + section + "] " + key + " has a non-numeric entry");
            }
        }
        return out;
    }

    std::uint64_t seed() const {
        const long s = integer("run", "seed");
        if (s < 0) throw ConfigError("config: [run] seed must be >= 0");
        return static_cast<std::uint64_t>(s);
    }

    fs::path out() const { return fs::path(str("run", "out")); }

    /// Canonical INI text with every key, defaults filled in.
    std::string resolved() const {
        std::ostringstream os;
        std::string section;
        for (const auto& k : kKnownKeys) {
            if (section != k.section) {
                if (!section.empty()) os << '\n';
                section = k.section;
                os << '[' << section << "]\n";
            }
            os << k.key << " = " << values_.at(full(k.section, k.key)) << '\n';
        }
        return os.str();
    }

private:
    static bool known_section(const std::string& s) {
        for (const auto& k : kKnownKeys)
            if (s == k.section) return true;
        return false;
    }
    static std::string full(const std::string& s, const std::string& k) { return s + '.' + k; }
    static std::string_view trim(std::string_view v) {
        while (!v.empty() && (v.front() == ' ' || v.front() == '\t')) v.remove_prefix(1);
        while (!v.empty() && (v.back() == ' ' || v.back() == '\t')) v.remove_suffix(1);
        return v;
    }
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Writes through a sibling temp file and renames it into place.
inline void write_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw OutputError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw OutputError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw OutputError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline void prepare_out(const RunConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.out(), ec);
    if (ec || !fs::is_directory(cfg.out())) throw OutputError("cannot create output directory " + cfg.out().string());
    write_atomic(cfg.out() / "resolved_config.ini", cfg.resolved());
}

inline std::string num(double v) { return detail::fmt_double(v); }

inline json num_or_null(std::optional<double> v) {
    if (v && std::isfinite(*v)) return *v;
    return nullptr;
}

inline SyntheticIdentityDataset load_dataset(const fs::path& path) {
    if (path.empty()) throw ConfigError("config: [dataset] path is required for this command");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInput("dataset not found: " + path.string());
    return path.extension() == ".bin" ? read_dataset_binary(in) : read_dataset_csv(in);
}

inline Checkpoint load_checkpoint(const std::string& path, const char* what) {
    if (path.empty()) throw ConfigError(std::string("config: ") + what + " is required");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInput(std::string(what) + " not found: " + path);
    return read_checkpoint(in);
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
    std::ostringstream os(std::ios::binary);
    write_checkpoint(ck, os);
    return os.str();
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces
// ---------------------------------------------------------------------------

struct Datasets {
    SyntheticIdentityDataset train;
    std::optional<SyntheticIdentityDataset> test;
    std::size_t total = 0;
};

/// Generate, split off the clean test part, then corrupt the training part.
inline Datasets build_datasets(const RunConfig& cfg, std::uint64_t seed, double corrupt_fraction_value) {
    IdentitySpec spec;
    spec.classes = static_cast<int>(cfg.integer("dataset", "classes"));
    spec.per_class = static_cast<int>(cfg.integer("dataset", "per_class"));
    spec.input_dim = static_cast<int>(cfg.integer("dataset", "input_dim"));
    spec.center_spread = cfg.real("dataset", "center_spread");
    spec.base_noise = cfg.real("dataset", "base_noise");
    spec.seed = seed;
    const double test_fraction = cfg.real("dataset", "test_fraction");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("config: [dataset] test_fraction must be in [0, 1)");
    const double scale = cfg.real("dataset", "corrupt_scale");

    Datasets out;
    auto full = gen_identities(spec);
    out.total = full.size();
    if (test_fraction > 0.0) {
        auto [tr, te] = split_dataset(full, test_fraction, seed);
        out.train = std::move(tr);
        out.test = std::move(te);
    } else {
        out.train = std::move(full);
    }
    out.train = corrupt_fraction(out.train, corrupt_fraction_value, scale, seed);
    return out;
}

inline SoftmaxConfig softmax_from(const RunConfig& cfg) {
    SoftmaxConfig sm = SoftmaxConfig::defaults(softmax_variant_from_string(cfg.str("train", "variant")));
    if (!cfg.str("train", "margin").empty()) sm.margin = cfg.real("train", "margin");
    if (!cfg.str("train", "scale").empty()) sm.scale = cfg.real("train", "scale");
    sm.normalize_plain = cfg.flag("train", "normalize_plain");
    sm.validate();
    return sm;
}

inline TrainConfig train_config_from(const RunConfig& cfg, std::uint64_t seed) {
    TrainConfig tc;
    tc.steps = static_cast<int>(cfg.integer("train", "steps"));
    tc.batch_size = static_cast<int>(cfg.integer("train", "batch_size"));
    tc.momentum = cfg.real("train", "momentum");
    tc.weight_decay = cfg.real("train", "weight_decay");
    tc.max_lr = cfg.real("train", "max_lr");
    tc.base_lr = cfg.real("train", "base_lr");
    tc.seed = seed;
    tc.cls.softmax = softmax_from(cfg);
    tc.cls.lambda = cfg.real("train", "lambda");
    tc.zero_eps = cfg.flag("train", "zero_eps");
    tc.validate();
    return tc;
}

inline EncoderShape shape_from(const RunConfig& cfg, int input_dim, bool sigma_head) {
    EncoderShape sh;
    sh.input_dim = input_dim;
    sh.hidden.clear();
    for (double h : cfg.reals("model", "hidden")) {
        if (h < 1 || h != std::floor(h)) throw ConfigError("config: [model] hidden must list positive integers");
        sh.hidden.push_back(static_cast<int>(h));
    }
    sh.embedding_dim = static_cast<int>(cfg.integer("model", "embedding_dim"));
    sh.sigma_head = sigma_head;
    return sh;
}

struct TrainedRun {
    Checkpoint checkpoint;
    TrainLog log;
};

/// Trains one model in the given mode. `baseline` is required for dul-rgs.
inline TrainedRun run_training(const RunConfig& cfg, const std::string& mode, const SyntheticIdentityDataset& ds,
                               std::uint64_t seed, const Checkpoint* baseline = nullptr) {
    TrainConfig tc = train_config_from(cfg, seed);
    const int classes = ds.num_classes;
    if (mode == "baseline" || mode == "dul-cls") {
        const bool dul = mode == "dul-cls";
        EncoderModel<double> model(shape_from(cfg, ds.input_dim(), dul), seed);
        auto w = init_classifier<double>(model.embedding_dim(), classes, seed);
        auto res = dul ? train_dul_cls(ds, std::move(model), std::move(w), tc)
                       : train_baseline(ds, std::move(model), std::move(w), tc);
        return {{std::move(res.model), std::move(res.classifier), false, tc.cls.softmax, seed}, std::move(res.log)};
    }
    if (mode == "dul-rgs") {
        if (!baseline) throw ConfigError("config: dul-rgs needs [train] baseline_checkpoint");
        tc.loss = LossKind::Regression;
        tc.max_lr = cfg.real("train", "rgs_lr");
        ClassifierWeights<double> targets{baseline->classifier, baseline->classifier_normalized};
        auto res = train_dul_rgs(ds, baseline->model, targets.normalized_copy(), tc);
        return {{std::move(res.model), std::move(res.classifier), true, baseline->softmax, seed}, std::move(res.log)};
    }
    throw ConfigError("config: [train] mode must be baseline, dul-cls or dul-rgs (got '" + mode + "')");
}

inline std::vector<double> targets_from(const RunConfig& cfg) {
    auto t = cfg.reals("eval", "targets");
    for (double v : t)
        if (!(v > 0.0 && v <= 1.0)) throw ConfigError("config: [eval] targets must be in (0, 1]");
    return t;
}

inline std::size_t pair_cap_from(const RunConfig& cfg) {
    const long cap = cfg.integer("eval", "pair_cap");
    if (cap < 1) throw ConfigError("config: [eval] pair_cap must be >= 1");
    return static_cast<std::size_t>(cap);
}

inline double accuracy(const Predictor& p, const SyntheticIdentityDataset& ds) {
    const auto pred = p.predict(ds.inputs);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == ds.labels[i];
    return static_cast<double>(ok) / static_cast<double>(pred.size());
}

inline std::optional<double> mean_sigma(const Predictor& p, const SyntheticIdentityDataset& ds) {
    if (!p.model.has_sigma_head()) return std::nullopt;
    const auto s = p.sigma(ds.inputs);
    double acc = 0.0;
    for (double v : s) acc += v;
    return acc / static_cast<double>(s.size());
}

inline RocReport verify(const Predictor& p, const SyntheticIdentityDataset& ds, MatchMetric metric,
                        std::span<const double> targets, std::size_t cap, std::uint64_t seed) {
    const auto fwd = p.model.forward(ds.inputs);
    Mat<double> sigma;
    if (metric == MatchMetric::Mls) sigma = fwd.r.unaryExpr([](double r) { return std::exp(r / 2.0); });
    const auto pairs = verification_pairs(fwd.mu, metric == MatchMetric::Mls ? &sigma : nullptr, ds.labels, metric,
                                          cap, seed);
    return roc(pairs, targets);
}

inline json tpr_json(const RocReport& rep) {
    json t = json::object();
    for (const auto& [fpr, tpr] : rep.tpr_at) t[num(fpr)] = tpr;
    return t;
}

/// The frozen summary schema for a trained model evaluated on its own
/// training set.
inline json train_summary(const TrainedRun& run, const SyntheticIdentityDataset& ds, std::span<const double> targets,
                          std::size_t cap, std::uint64_t seed) {
    const Predictor p{run.checkpoint.model, run.checkpoint.classifier, run.checkpoint.softmax};
    const auto rep = verify(p, ds, MatchMetric::Cosine, targets, cap, seed);
    json s;
    s["final_loss"] = run.log.loss.back();
    s["sigma_bar"] = num_or_null(mean_sigma(p, ds));
    s["train_acc"] = accuracy(p, ds);
    s["tpr_at"] = tpr_json(rep);
    s["interval_auc"] = rep.interval_auc;
    return s;
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline void log_elapsed(const char* what, std::chrono::steady_clock::time_point t0) {
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "[dul] " << what << " finished in " << ms << " ms\n";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// dataset.csv / dataset.bin (+ test.csv / test.bin) and manifest.json.
inline void cmd_gen(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    prepare_out(cfg);
    const auto ds = build_datasets(cfg, cfg.seed(), cfg.real("dataset", "corrupt_fraction"));
    auto write_pair = [&](const SyntheticIdentityDataset& d, const std::string& stem) {
        std::ostringstream csv, bin(std::ios::binary);
        write_dataset_csv(d, csv);
        write_dataset_binary(d, bin);
        write_atomic(cfg.out() / (stem + ".csv"), csv.str());
        write_atomic(cfg.out() / (stem + ".bin"), bin.str());
    };
    write_pair(ds.train, "dataset");
    if (ds.test) write_pair(*ds.test, "test");

    json m;
    m["N"] = ds.total;
    m["n_train"] = ds.train.size();
    m["n_test"] = ds.test ? ds.test->size() : 0;
    m["dim"] = ds.train.input_dim();
    m["C"] = ds.train.num_classes;
    m["seed"] = cfg.seed();
    m["spec_hash"] = detail::hex64(ds.train.spec_hash);
    m["spec"] = ds.train.spec.canonical();
    m["corrupted"] = ds.train.corrupted_count();
    write_atomic(cfg.out() / "manifest.json", dump(m));
    log_elapsed("gen", t0);
}

/// checkpoint.bin, train_log.csv, summary.json.
inline void cmd_train(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string mode = cfg.str("train", "mode");
    const auto targets = targets_from(cfg);
    const auto cap = pair_cap_from(cfg);
    train_config_from(cfg, cfg.seed());  // validate before touching the output directory
    std::optional<Checkpoint> base;
    if (mode == "dul-rgs") base = load_checkpoint(cfg.str("train", "baseline_checkpoint"), "[train] baseline_checkpoint");
    const auto ds = load_dataset(cfg.str("dataset", "path"));
    prepare_out(cfg);

    const auto run = run_training(cfg, mode, ds, cfg.seed(), base ? &*base : nullptr);
    write_atomic(cfg.out() / "checkpoint.bin", checkpoint_bytes(run.checkpoint));

    std::ostringstream log;
    log << "step,lr,loss,part_a,part_b,sigma_bar\n";
    for (std::size_t k = 0; k < run.log.size(); ++k)
        log << k << ',' << num(run.log.lr[k]) << ',' << num(run.log.loss[k]) << ',' << num(run.log.part_a[k]) << ','
            << num(run.log.part_b[k]) << ',' << num(run.log.sigma_bar[k]) << '\n';
    write_atomic(cfg.out() / "train_log.csv", log.str());

    auto s = train_summary(run, ds, targets, cap, cfg.seed());
    s["mode"] = mode;
    s["clamped"] = run.log.clamped;
    write_atomic(cfg.out() / "summary.json", dump(s));
    log_elapsed("train", t0);
}

/// roc.csv, summary.json.
inline void cmd_eval(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto targets = targets_from(cfg);
    const auto cap = pair_cap_from(cfg);
    const std::string metric_name = cfg.str("eval", "metric");
    if (metric_name != "cosine" && metric_name != "mls") throw ConfigError("config: [eval] metric must be cosine or mls");
    const auto metric = metric_name == "mls" ? MatchMetric::Mls : MatchMetric::Cosine;
    const auto ck = load_checkpoint(cfg.str("eval", "checkpoint"), "[eval] checkpoint");
    if (metric == MatchMetric::Mls && !ck.model.has_sigma_head())
        throw ConfigError("config: metric=mls needs a checkpoint with a sigma head");
    const auto ds = load_dataset(cfg.str("dataset", "path"));
    prepare_out(cfg);

    const Predictor p{ck.model, ck.classifier, ck.softmax};
    const auto rep = verify(p, ds, metric, targets, cap, cfg.seed());
    std::ostringstream csv;
    csv << "fpr,tpr\n";
    for (const auto& pt : rep.points) csv << num(pt.fpr) << ',' << num(pt.tpr) << '\n';
    write_atomic(cfg.out() / "roc.csv", csv.str());

    // rank-1: first sample of each class is the gallery, the rest probe it
    const auto mu = p.embed(ds.inputs);
    std::vector<std::vector<double>> gallery, probes;
    std::vector<int> gallery_labels, probe_labels;
    std::vector<bool> seen(static_cast<std::size_t>(std::max(ds.num_classes, 1)), false);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::vector<double> v(static_cast<std::size_t>(mu.cols()));
        for (Eigen::Index l = 0; l < mu.cols(); ++l) v[static_cast<std::size_t>(l)] = mu(static_cast<Eigen::Index>(i), l);
        const auto y = static_cast<std::size_t>(ds.labels[i]);
        if (y < seen.size() && !seen[y]) {
            seen[y] = true;
            gallery.push_back(std::move(v));
            gallery_labels.push_back(ds.labels[i]);
        } else {
            probes.push_back(std::move(v));
            probe_labels.push_back(ds.labels[i]);
        }
    }

    json s;
    s["final_loss"] = nullptr;
    s["sigma_bar"] = num_or_null(mean_sigma(p, ds));
    s["train_acc"] = nullptr;
    s["tpr_at"] = tpr_json(rep);
    s["interval_auc"] = rep.interval_auc;
    s["metric"] = metric_name;
    s["pairs"] = [&] {
        std::size_t n = ds.size();
        return std::min<std::size_t>(n * (n - 1) / 2, cap);
    }();
    s["accuracy"] = ck.classifier.cols() == ds.num_classes ? json(accuracy(p, ds)) : json(nullptr);
    s["rank1"] = probes.empty() ? json(nullptr) : json(rank1<double>(probes, probe_labels, gallery, gallery_labels));
    write_atomic(cfg.out() / "summary.json", dump(s));
    log_elapsed("eval", t0);
}

/// report.json plus uncertainty.csv, bad_case.csv, blur_probe.csv and, when a
/// regression checkpoint is given, intra_class.csv.
inline void cmd_analyze(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto base = load_checkpoint(cfg.str("analyze", "baseline_checkpoint"), "[analyze] baseline_checkpoint");
    const auto dul = load_checkpoint(cfg.str("analyze", "dul_checkpoint"), "[analyze] dul_checkpoint");
    if (!dul.model.has_sigma_head()) throw ConfigError("config: [analyze] dul_checkpoint has no sigma head");
    std::optional<Checkpoint> rgs;
    if (!cfg.str("analyze", "rgs_checkpoint").empty())
        rgs = load_checkpoint(cfg.str("analyze", "rgs_checkpoint"), "[analyze] rgs_checkpoint");
    const auto ladder = cfg.reals("analyze", "ladder");
    const long probe_count = cfg.integer("analyze", "probe_pairs");
    if (probe_count < 1) throw ConfigError("config: [analyze] probe_pairs must be >= 1");
    const auto ds = load_dataset(cfg.str("dataset", "path"));
    prepare_out(cfg);

    const Predictor pb{base.model, base.classifier, base.softmax};
    const Predictor pd{dul.model, dul.classifier, dul.softmax};
    json report;

    const auto ur = uncertainty_report(pd, ds);
    {
        std::ostringstream csv;
        csv << "noise_level,count,mean_sigma,std_sigma\n";
        json buckets = json::array();
        for (const auto& b : ur.buckets) {
            csv << num(b.noise_level) << ',' << b.count << ',' << num(b.mean_sigma) << ',' << num(b.std_sigma) << '\n';
            buckets.push_back({{"noise_level", b.noise_level}, {"count", b.count}, {"mean_sigma", b.mean_sigma},
                               {"std_sigma", b.std_sigma}});
        }
        write_atomic(cfg.out() / "uncertainty.csv", csv.str());
        report["uncertainty"] = {{"buckets", buckets}, {"corrupted_auc", num_or_null(ur.corrupted_auc)}};
    }

    const auto bc = bad_case_report(pb, pd, ds, pd);
    {
        std::ostringstream csv;
        csv << "category,baseline_errors,dul_errors,baseline_share,dul_share\n";
        json cats = json::array();
        for (std::size_t k = 0; k < 3; ++k) {
            auto share = [&](std::size_t m) -> std::optional<double> {
                if (!bc.proportions[m]) return std::nullopt;
                return (*bc.proportions[m])[k];
            };
            auto cell = [&](std::optional<double> v) { return v ? num(*v) : std::string(); };
            csv << kDifficultyNames[k] << ',' << bc.errors[0][k] << ',' << bc.errors[1][k] << ',' << cell(share(0))
                << ',' << cell(share(1)) << '\n';
            cats.push_back({{"category", kDifficultyNames[k]}, {"baseline_errors", bc.errors[0][k]},
                            {"dul_errors", bc.errors[1][k]}, {"baseline_share", num_or_null(share(0))},
                            {"dul_share", num_or_null(share(1))}});
        }
        write_atomic(cfg.out() / "bad_case.csv", csv.str());
        report["bad_case"] = {{"thresholds", {bc.thresholds[0], bc.thresholds[1]}}, {"categories", cats}};
    }

    if (rgs) {
        const Predictor pr{rgs->model, rgs->classifier, rgs->softmax};
        const auto fr = pr.model.forward(ds.inputs);
        const auto cats = sigma_tertiles(harmonic_sigmas(fr.r));
        Mat<double> bmu = pb.embed(ds.inputs);
        for (Eigen::Index i = 0; i < bmu.rows(); ++i) bmu.row(i).normalize();
        const auto db = intra_class_distances(bmu, rgs->classifier, ds.labels, cats);
        const auto dr = intra_class_distances(fr.mu, rgs->classifier, ds.labels, cats);
        std::ostringstream csv;
        csv << "category,baseline,rgs\n";
        json rows = json::array();
        for (std::size_t k = 0; k < 3; ++k) {
            auto cell = [](std::optional<double> v) { return v ? num(*v) : std::string(); };
            csv << kDifficultyNames[k] << ',' << cell(db.by_category[k]) << ',' << cell(dr.by_category[k]) << '\n';
            rows.push_back({{"category", kDifficultyNames[k]}, {"baseline", num_or_null(db.by_category[k])},
                            {"rgs", num_or_null(dr.by_category[k])}});
        }
        write_atomic(cfg.out() / "intra_class.csv", csv.str());
        report["intra_class"] = {{"categories", rows}, {"baseline_overall", db.overall}, {"rgs_overall", dr.overall}};
    }

    {
        const auto pairs = make_probe_pairs(ds, static_cast<std::size_t>(probe_count), cfg.seed());
        std::vector<std::pair<std::string, const Predictor*>> models{{"baseline", &pb}, {"dul-cls", &pd}};
        const auto rows = blur_pair_probe(models, pairs, ladder, cfg.seed());
        std::ostringstream csv;
        csv << "corruption,model,genuine,imposter\n";
        json arr = json::array();
        for (const auto& r : rows) {
            csv << num(r.corruption) << ',' << r.model << ',' << num(r.genuine_similarity) << ','
                << num(r.imposter_similarity) << '\n';
            arr.push_back({{"corruption", r.corruption}, {"model", r.model}, {"genuine", r.genuine_similarity},
                           {"imposter", r.imposter_similarity}});
        }
        write_atomic(cfg.out() / "blur_probe.csv", csv.str());
        report["blur_probe"] = arr;
    }

    write_atomic(cfg.out() / "report.json", dump(report));
    log_elapsed("analyze", t0);
}

/// sweep.csv: one row per (grid value, model), metrics averaged over seeds
/// run.seed, run.seed + 1, ...
inline void cmd_sweep(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string kind = cfg.str("sweep", "kind");
    if (kind != "lambda" && kind != "noise") throw ConfigError("config: [sweep] kind must be lambda or noise");
    const auto values = cfg.reals("sweep", "values");
    if (values.empty()) throw ConfigError("config: [sweep] values must be non-empty");
    const long seeds = cfg.integer("sweep", "seeds");
    if (seeds < 1) throw ConfigError("config: [sweep] seeds must be >= 1");
    const auto targets = targets_from(cfg);
    const auto cap = pair_cap_from(cfg);
    std::vector<std::string> modes;
    if (kind == "noise") {
        modes = {"baseline", "dul-cls"};
    } else {
        if (cfg.str("train", "mode") == "dul-rgs") throw ConfigError("config: lambda sweeps need a classification mode");
        modes = {cfg.str("train", "mode")};
    }
    train_config_from(cfg, cfg.seed());
    prepare_out(cfg);

    std::ostringstream csv;
    csv << "kind,value,model,seeds_ok,final_loss,sigma_bar,train_acc,test_acc";
    for (double t : targets) csv << ",tpr@" << num(t);
    csv << ",interval_auc,error\n";

    for (double value : values) {
        RunConfig point = cfg;
        if (kind == "lambda") point.set("train", "lambda", num(value));
        const double fraction = kind == "noise" ? value : cfg.real("dataset", "corrupt_fraction");
        for (const auto& mode : modes) {
            struct Acc {
                double loss = 0, sigma = 0, acc = 0, test = 0, auc = 0;
                std::vector<double> tpr;
                bool sigma_defined = true, test_defined = true;
            } a;
            a.tpr.assign(targets.size(), 0.0);
            long ok = 0;
            std::string error;
            for (long j = 0; j < seeds; ++j) {
                const auto seed = cfg.seed() + static_cast<std::uint64_t>(j);
                try {
                    const auto ds = build_datasets(point, seed, fraction);
                    const auto run = run_training(point, mode, ds.train, seed);
                    const auto s = train_summary(run, ds.train, targets, cap, seed);
                    a.loss += s["final_loss"].get<double>();
                    if (s["sigma_bar"].is_null()) a.sigma_defined = false;
                    else a.sigma += s["sigma_bar"].get<double>();
                    a.acc += s["train_acc"].get<double>();
                    a.auc += s["interval_auc"].get<double>();
                    for (std::size_t k = 0; k < targets.size(); ++k) a.tpr[k] += s["tpr_at"][num(targets[k])].get<double>();
                    if (ds.test) {
                        const Predictor p{run.checkpoint.model, run.checkpoint.classifier, run.checkpoint.softmax};
                        a.test += accuracy(p, *ds.test);
                    } else {
                        a.test_defined = false;
                    }
                    ++ok;
                } catch (const std::exception& e) {
                    if (error.empty()) error = "seed " + std::to_string(seed) + ": " + e.what();
                    std::cerr << "[dul] sweep point " << kind << '=' << num(value) << ' ' << mode << " failed: " << e.what()
                              << '\n';
                }
            }
            auto mean = [&](double v) { return ok > 0 ? num(v / static_cast<double>(ok)) : std::string(); };
            for (char& c : error)
                if (c == ',' || c == '\n') c = ';';
            csv << kind << ',' << num(value) << ',' << mode << ',' << ok << ',' << mean(a.loss) << ','
                << (a.sigma_defined ? mean(a.sigma) : std::string()) << ',' << mean(a.acc) << ','
                << (a.test_defined ? mean(a.test) : std::string());
            for (double t : a.tpr) csv << ',' << mean(t);
            csv << ',' << mean(a.auc) << ',' << error << '\n';
        }
    }
    write_atomic(cfg.out() / "sweep.csv", csv.str());
    log_elapsed("sweep", t0);
}

/// Maps library exceptions onto the documented exit codes.
template <typename F>
int run_guarded(F&& f) {
    try {
        f();
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const MissingInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kMissingInput;
    } catch (const NumericalAbort& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumericalAbort;
    } catch (const OutputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOutputError;
    } catch (const ContractError& e) {
        // invalid values reaching the library came from the config
        std::cerr << "error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUnexpected;
    }
}

}  // namespace dul::cli
