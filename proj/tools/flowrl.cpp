// flowrl command-line front end: data generation, staged training, evaluation,
// the built-in verification suite, and ablation sweeps.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flowrl/pipeline.hpp"
#include "flowrl/verify.hpp"

using namespace flowrl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitData = 2;
constexpr int kExitResume = 3;

// FLOWRL_RUN_ROOT prefixes relative output directories
std::string resolve_out(const std::string& dir) {
    const char* root = std::getenv("FLOWRL_RUN_ROOT");
    if (root && *root && fs::path(dir).is_relative()) return (fs::path(root) / dir).string();
    return dir;
}

RunConfig base_config(const std::string& config_path) {
    if (!config_path.empty()) return load_run_config(config_path);
    return RunConfig{};
}

std::vector<Episode> load_episodes(const RunConfig& cfg) {
    if (cfg.dataset_dir.empty()) throw DataError("no dataset directory configured");
    std::vector<Episode> eps = load_corpus(cfg.dataset_dir);
    if (eps.empty()) throw DataError("empty corpus: " + cfg.dataset_dir);
    return eps;
}

int cmd_gen_data(const std::string& env_name, int n, double fail_frac, std::uint64_t seed,
                 const std::string& out, bool overwrite) {
    auto env = make_env(env_name);
    auto demos = gen_demos(*env, n, fail_frac, seed);
    std::string dir = resolve_out(out);
    save_corpus(dir, demos, overwrite);
    int succ = 0;
    for (const auto& ep : demos) succ += ep.success ? 1 : 0;
    std::cout << "episodes=" << demos.size() << " successful=" << succ
              << " dir=" << dir << " manifest_hash=" << corpus_manifest_hash(dir) << "\n";
    return 0;
}

void apply_stage(RunConfig& cfg, const std::string& stage) {
    if (stage == "all") return;  // honor config toggles
    cfg.stage_il = cfg.stage_warmup = cfg.stage_offline = cfg.stage_online = false;
    cfg.stage_distill = false;
    if (stage == "il")
        cfg.stage_il = true;
    else if (stage == "warmup")
        cfg.stage_warmup = true;
    else if (stage == "offline")
        cfg.stage_offline = true;
    else if (stage == "online")
        cfg.stage_online = true;
    else if (stage == "distill")
        cfg.stage_distill = true;
    else
        throw ConfigError("unknown stage: " + stage);
}

int cmd_train(RunConfig cfg, const std::string& stage) {
    apply_stage(cfg, stage);
    cfg.out_dir = resolve_out(cfg.out_dir);
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    save_run_config(cfg, (fs::path(cfg.out_dir) / "config.json").string());

    auto env = make_env(cfg.env);
    Pipeline pipe(cfg, env->obs_dim(), env->action_dim());
    std::vector<Episode> eps;
    bool needs_data = cfg.stage_il || cfg.stage_warmup || cfg.stage_offline || cfg.stage_online;
    if (needs_data && !cfg.stage_distill) eps = load_episodes(cfg);
    auto reports = pipe.run_full(eps.empty() ? nullptr : &eps);
    for (const auto& r : reports) std::cout << r.to_jsonl() << "\n";
    if (reports.empty()) std::cout << "nothing to do (checkpoints already present)\n";
    return 0;
}

int cmd_eval(RunConfig cfg, const std::string& checkpoint, int episodes, std::uint64_t seed,
             std::vector<int> candidates, const std::string& metrics_path) {
    if (episodes < 1) throw ArgumentError("eval: episodes must be >= 1");
    cfg.out_dir = resolve_out(cfg.out_dir);
    auto env = make_env(cfg.env);
    Pipeline pipe(cfg, env->obs_dim(), env->action_dim());
    std::string stage = pipe.load_checkpoint(checkpoint);
    bool have_critic = stage != "il" && stage != "distill";

    if (candidates.empty()) candidates = {1, cfg.train.n_pi_rl};
    fs::path mpath = metrics_path.empty() ? fs::path(cfg.out_dir) / "metrics.jsonl"
                                          : fs::path(metrics_path);
    fs::create_directories(mpath.parent_path().empty() ? "." : mpath.parent_path());
    std::ofstream out(mpath, std::ios::trunc);
    for (int n : candidates) {
        SelectionConfig sel{n, cfg.train.sigma_sample, have_critic && n > 1};
        EvalMetrics m = pipe.eval_policy(*env, sel, episodes, seed);
        json j{{"checkpoint", checkpoint}, {"stage", stage},      {"n_candidates", n},
               {"episodes", episodes},    {"seed", seed},         {"use_critic", sel.use_critic},
               {"success_rate", m.success_rate}, {"mean_return", m.mean_return},
               {"mean_length", m.mean_length}};
        out << j.dump() << "\n";
        std::cout << j.dump() << "\n";
    }
    return 0;
}

int cmd_check(const std::string& filter) {
    auto results = verify::run_all(filter);
    if (results.empty()) {
        std::cerr << "no suites matched filter: " << filter << "\n";
        return 1;
    }
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

int cmd_sweep(RunConfig base, const std::string& axis, std::vector<double> values,
              int demo_count, int eval_episodes, std::uint64_t seed) {
    std::vector<double> grid;
    if (axis == "H")
        grid = {6, 8, 10, 12, 14};
    else if (axis == "depth")
        grid = {8, 12, 16, 20, 24};
    else if (axis == "lambda")
        grid = {0.01, 0.03, 0.1, 0.3, 1.0};
    else
        throw ArgumentError("sweep: axis must be H, depth, or lambda");
    if (!values.empty()) grid = values;

    std::string root = resolve_out(base.out_dir);
    fs::create_directories(root);
    std::ofstream table(fs::path(root) / "sweep.jsonl", std::ios::trunc);

    auto env = make_env(base.env);
    auto demos = gen_demos(*env, demo_count, 0.3, seed);
    for (double v : grid) {
        RunConfig cfg = base;
        std::string tag;
        if (axis == "H") {
            cfg.train.chunk_len = int(v);
            tag = "H_" + std::to_string(int(v));
        } else if (axis == "depth") {
            cfg.train.flow_depth = int(v);
            tag = "depth_" + std::to_string(int(v));
        } else {
            cfg.train.lambda_bc = v;
            tag = "lambda_" + std::to_string(v);
        }
        cfg.out_dir = (fs::path(root) / tag).string();
        cfg.stage_online = false;  // offline ablation
        cfg.stage_distill = false;
        fs::create_directories(cfg.out_dir);

        Pipeline pipe(cfg, env->obs_dim(), env->action_dim());
        pipe.run_full(&demos);
        SelectionConfig sel{cfg.train.n_pi_rl, cfg.train.sigma_sample, true};
        EvalMetrics m = pipe.eval_policy(*env, sel, eval_episodes, seed + 1);
        json j{{"axis", axis},
               {"value", v},
               {"success_rate", m.success_rate},
               {"mean_return", m.mean_return}};
        table << j.dump() << "\n";
        std::cout << j.dump() << "\n";
    }
    return 0;
}

// small-model profile so default sweeps and smoke runs finish quickly
void toy_profile(TrainConfig& t) {
    t.flow_depth = 4;
    t.hidden = 32;
    t.heads = 4;
    t.critic_hidden = 32;
    t.critic_heads = 4;
    t.critic_layers = 1;
    t.num_bins = 51;
    t.batch_il = 64;
    t.batch_rl = 16;
    t.steps_il = 800;
    t.steps_warmup = 300;
    t.steps_offline = 200;
    t.online_iters = 2;
    t.online_episodes_per_iter = 5;
    t.steps_online_per_iter = 100;
    t.n_pi = 16;
    t.n_pi_rl = 8;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"normalizing-flow chunk policies with distributional critics"};
    app.require_subcommand(1);

    // gen-data
    std::string gd_env = "pointmass", gd_out = "data";
    int gd_n = 121;
    double gd_fail = 0.41;
    std::uint64_t gd_seed = 0;
    bool gd_overwrite = false;
    auto* gen = app.add_subcommand("gen-data", "generate a scripted demonstration corpus");
    gen->add_option("--env", gd_env, "environment name");
    gen->add_option("--n", gd_n, "number of episodes");
    gen->add_option("--fail-frac", gd_fail, "fraction of failed episodes");
    gen->add_option("--seed", gd_seed, "generation seed");
    gen->add_option("--out", gd_out, "output corpus directory");
    gen->add_flag("--overwrite", gd_overwrite, "replace an existing corpus");

    // shared config options for train / eval / sweep
    std::string config_path, env_override, out_override, data_override;
    std::int64_t seed_override = -1;
    bool toy = false;
    auto add_cfg_opts = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config file");
        cmd->add_option("--env", env_override, "environment override");
        cmd->add_option("--out", out_override, "output directory override");
        cmd->add_option("--data", data_override, "corpus directory override");
        cmd->add_option("--seed", seed_override, "seed override");
        cmd->add_flag("--toy", toy, "small-model fast profile");
    };
    auto build_cfg = [&]() {
        RunConfig cfg = base_config(config_path);
        if (toy) toy_profile(cfg.train);
        if (!env_override.empty()) cfg.env = env_override;
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (!data_override.empty()) cfg.dataset_dir = data_override;
        if (seed_override >= 0) cfg.train.seed = std::uint64_t(seed_override);
        return cfg;
    };

    std::string stage = "all";
    auto* train = app.add_subcommand("train", "run training stages");
    add_cfg_opts(train);
    train->add_option("--stage", stage, "il|warmup|offline|online|distill|all");

    std::string ev_checkpoint, ev_metrics;
    int ev_episodes = 0;
    std::uint64_t ev_seed = 1000;
    std::vector<int> ev_candidates;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_cfg_opts(ev);
    ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file")->required();
    ev->add_option("--episodes", ev_episodes, "evaluation episodes (0 = config value)");
    ev->add_option("--eval-seed", ev_seed, "evaluation seed");
    ev->add_option("--n", ev_candidates, "candidate counts to report (repeatable)");
    ev->add_option("--metrics", ev_metrics, "metrics output file");

    std::string ck_filter;
    auto* check = app.add_subcommand("check", "run the built-in verification suite");
    check->add_option("--filter", ck_filter, "run only suites whose name contains this");

    std::string sw_axis;
    std::vector<double> sw_values;
    int sw_demos = 40, sw_eval = 30;
    auto* sweep = app.add_subcommand("sweep", "ablation sweep over H, depth, or lambda");
    add_cfg_opts(sweep);
    sweep->add_option("--axis", sw_axis, "H|depth|lambda")->required();
    sweep->add_option("--values", sw_values, "override the default grid");
    sweep->add_option("--demos", sw_demos, "demo episodes per sweep");
    sweep->add_option("--eval-episodes", sw_eval, "evaluation episodes per value");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(gd_env, gd_n, gd_fail, gd_seed, gd_out, gd_overwrite);
        if (train->parsed()) return cmd_train(build_cfg(), stage);
        if (ev->parsed()) {
            RunConfig cfg = build_cfg();
            if (ev_episodes == 0) ev_episodes = cfg.eval_episodes;
            return cmd_eval(cfg, ev_checkpoint, ev_episodes, ev_seed, ev_candidates, ev_metrics);
        }
        if (check->parsed()) return cmd_check(ck_filter);
        if (sweep->parsed()) {
            RunConfig cfg = build_cfg();
            if (!toy && config_path.empty()) toy_profile(cfg.train);
            return cmd_sweep(cfg, sw_axis, sw_values, sw_demos, sw_eval,
                             seed_override >= 0 ? std::uint64_t(seed_override) : 7);
        }
    } catch (const ResumeError& e) {
        std::cerr << "resume error: " << e.what() << "\n";
        return kExitResume;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
