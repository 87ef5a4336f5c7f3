#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "dul/cli.hpp"

int main(int argc, char** argv) {
    using namespace dul::cli;
    CLI::App app{"dul: data uncertainty learning on synthetic identity data"};
    app.require_subcommand(1);

    std::string config_path;
    long seed = -1;
    std::string out;
    bool zero_eps = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run config (INI)")->required();
        sub->add_option("--seed", seed, "overrides [run] seed");
        sub->add_option("--out", out, "overrides [run] out");
        sub->add_flag("--debug-zero-eps", zero_eps, "force eps = 0 in dul-cls training");
    };
    auto* gen = app.add_subcommand("gen", "generate datasets");
    auto* train = app.add_subcommand("train", "train baseline / dul-cls / dul-rgs");
    auto* eval = app.add_subcommand("eval", "verification ROC and rank-1");
    auto* analyze = app.add_subcommand("analyze", "uncertainty, bad-case, intra-class and blur-pair reports");
    auto* sweep = app.add_subcommand("sweep", "lambda or noise-fraction grid");
    for (auto* s : {gen, train, eval, analyze, sweep}) add_common(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }

    return run_guarded([&] {
        auto cfg = RunConfig::load(config_path);
        // flags win over the config file
        if (seed >= 0) cfg.set("run", "seed", std::to_string(seed));
        if (!out.empty()) cfg.set("run", "out", out);
        if (zero_eps) cfg.set("train", "zero_eps", "true");

        if (gen->parsed()) cmd_gen(cfg);
        else if (train->parsed()) cmd_train(cfg);
        else if (eval->parsed()) cmd_eval(cfg);
        else if (analyze->parsed()) cmd_analyze(cfg);
        else cmd_sweep(cfg);
    });
}
