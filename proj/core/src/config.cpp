#include "flowrl/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "flowrl/errors.hpp"

namespace flowrl {

using nlohmann::json;

void TrainConfig::validate() const {
    if (chunk_len < 1) throw ConfigError("chunk_len must be >= 1");
    if (prefix_len < 0) throw ConfigError("prefix_len must be >= 0");
    if (flow_depth < 1) throw ConfigError("flow_depth must be >= 1");
    if (hidden < 1 || heads < 1 || hidden % heads != 0)
        throw ConfigError("hidden must be a positive multiple of heads");
    if (critic_hidden < 1 || critic_heads < 1 || critic_hidden % critic_heads != 0)
        throw ConfigError("critic_hidden must be a positive multiple of critic_heads");
    if (sigma_noise < 0.0) throw ConfigError("sigma_noise must be >= 0");
    if (sigma_sample <= 0.0 || sigma_sample > 1.0)
        throw ConfigError("sigma_sample must be in (0, 1]");
    if (lambda_bc < 0.0) throw ConfigError("lambda_bc must be >= 0");
    if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("gamma must be in (0, 1)");
    if (tau <= 0.0 || tau > 1.0) throw ConfigError("tau must be in (0, 1]");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("rho must be in [0, 1]");
    if (n_pi < 1 || n_pi_rl < 1) throw ConfigError("n_pi must be >= 1");
    if (batch_il < 1 || batch_rl < 1) throw ConfigError("batch sizes must be >= 1");
    if (steps_il < 0 || steps_warmup < 0 || steps_offline < 0 || online_iters < 0 ||
        steps_online_per_iter < 0 || distill_iters < 0 || distill_steps_per_iter < 0)
        throw ConfigError("stage step counts must be >= 0");
    if (num_bins < 2) throw ConfigError("num_bins must be >= 2");
    if (hl_sigma_ratio <= 0.0) throw ConfigError("hl_sigma_ratio must be > 0");
    if (num_critics < 1) throw ConfigError("num_critics must be >= 1");
    if (dropout_il < 0.0 || dropout_il >= 1.0 || dropout_rl < 0.0 || dropout_rl >= 1.0 ||
        prefix_dropout < 0.0 || prefix_dropout >= 1.0)
        throw ConfigError("dropout rates must be in [0, 1)");
}

void RunConfig::validate() const {
    train.validate();
    if (env.empty()) throw ConfigError("env must be set");
    if (out_dir.empty()) throw ConfigError("out_dir must be set");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError(std::string("unknown config key '") + it.key() + "' in " + where);
}

template <typename T>
void get_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
    j = json{{"chunk_len", c.chunk_len},
             {"prefix_len", c.prefix_len},
             {"flow_depth", c.flow_depth},
             {"hidden", c.hidden},
             {"heads", c.heads},
             {"sigma_noise", c.sigma_noise},
             {"sigma_sample", c.sigma_sample},
             {"lambda_bc", c.lambda_bc},
             {"gamma", c.gamma},
             {"tau", c.tau},
             {"rho", c.rho},
             {"n_pi", c.n_pi},
             {"n_pi_rl", c.n_pi_rl},
             {"batch_il", c.batch_il},
             {"batch_rl", c.batch_rl},
             {"steps_il", c.steps_il},
             {"steps_warmup", c.steps_warmup},
             {"steps_offline", c.steps_offline},
             {"online_iters", c.online_iters},
             {"online_episodes_per_iter", c.online_episodes_per_iter},
             {"steps_online_per_iter", c.steps_online_per_iter},
             {"distill_iters", c.distill_iters},
             {"distill_episodes_per_iter", c.distill_episodes_per_iter},
             {"distill_steps_per_iter", c.distill_steps_per_iter},
             {"p_teacher_decay", c.p_teacher_decay},
             {"lr_init", c.lr_init},
             {"lr_rl", c.lr_rl},
             {"weight_decay", c.weight_decay},
             {"dropout_il", c.dropout_il},
             {"dropout_rl", c.dropout_rl},
             {"prefix_dropout", c.prefix_dropout},
             {"num_bins", c.num_bins},
             {"hl_sigma_ratio", c.hl_sigma_ratio},
             {"critic_hidden", c.critic_hidden},
             {"critic_heads", c.critic_heads},
             {"critic_layers", c.critic_layers},
             {"num_critics", c.num_critics},
             {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
    static const std::set<std::string> known = {
        "chunk_len", "prefix_len", "flow_depth", "hidden", "heads", "sigma_noise",
        "sigma_sample", "lambda_bc", "gamma", "tau", "rho", "n_pi", "n_pi_rl", "batch_il",
        "batch_rl", "steps_il", "steps_warmup", "steps_offline", "online_iters",
        "online_episodes_per_iter", "steps_online_per_iter", "distill_iters",
        "distill_episodes_per_iter", "distill_steps_per_iter", "p_teacher_decay", "lr_init",
        "lr_rl", "weight_decay",
        "dropout_il", "dropout_rl", "prefix_dropout", "num_bins", "hl_sigma_ratio", "critic_hidden",
        "critic_heads", "critic_layers", "num_critics", "seed"};
    reject_unknown(j, known, "train");
    get_opt(j, "chunk_len", c.chunk_len);
    get_opt(j, "prefix_len", c.prefix_len);
    get_opt(j, "flow_depth", c.flow_depth);
    get_opt(j, "hidden", c.hidden);
    get_opt(j, "heads", c.heads);
    get_opt(j, "sigma_noise", c.sigma_noise);
    get_opt(j, "sigma_sample", c.sigma_sample);
    get_opt(j, "lambda_bc", c.lambda_bc);
    get_opt(j, "gamma", c.gamma);
    get_opt(j, "tau", c.tau);
    get_opt(j, "rho", c.rho);
    get_opt(j, "n_pi", c.n_pi);
    get_opt(j, "n_pi_rl", c.n_pi_rl);
    get_opt(j, "batch_il", c.batch_il);
    get_opt(j, "batch_rl", c.batch_rl);
    get_opt(j, "steps_il", c.steps_il);
    get_opt(j, "steps_warmup", c.steps_warmup);
    get_opt(j, "steps_offline", c.steps_offline);
    get_opt(j, "online_iters", c.online_iters);
    get_opt(j, "online_episodes_per_iter", c.online_episodes_per_iter);
    get_opt(j, "steps_online_per_iter", c.steps_online_per_iter);
    get_opt(j, "distill_iters", c.distill_iters);
    get_opt(j, "distill_episodes_per_iter", c.distill_episodes_per_iter);
    get_opt(j, "distill_steps_per_iter", c.distill_steps_per_iter);
    get_opt(j, "p_teacher_decay", c.p_teacher_decay);
    get_opt(j, "lr_init", c.lr_init);
    get_opt(j, "lr_rl", c.lr_rl);
    get_opt(j, "weight_decay", c.weight_decay);
    get_opt(j, "dropout_il", c.dropout_il);
    get_opt(j, "dropout_rl", c.dropout_rl);
    get_opt(j, "prefix_dropout", c.prefix_dropout);
    get_opt(j, "num_bins", c.num_bins);
    get_opt(j, "hl_sigma_ratio", c.hl_sigma_ratio);
    get_opt(j, "critic_hidden", c.critic_hidden);
    get_opt(j, "critic_heads", c.critic_heads);
    get_opt(j, "critic_layers", c.critic_layers);
    get_opt(j, "num_critics", c.num_critics);
    get_opt(j, "seed", c.seed);
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"train", c.train},
             {"env", c.env},
             {"dataset_dir", c.dataset_dir},
             {"out_dir", c.out_dir},
             {"stage_il", c.stage_il},
             {"stage_warmup", c.stage_warmup},
             {"stage_offline", c.stage_offline},
             {"stage_online", c.stage_online},
             {"stage_distill", c.stage_distill},
             {"eval_episodes", c.eval_episodes}};
}

void from_json(const json& j, RunConfig& c) {
    static const std::set<std::string> known = {
        "train", "env", "dataset_dir", "out_dir", "stage_il", "stage_warmup",
        "stage_offline", "stage_online", "stage_distill", "eval_episodes"};
    reject_unknown(j, known, "run");
    if (j.contains("train")) j.at("train").get_to(c.train);
    get_opt(j, "env", c.env);
    get_opt(j, "dataset_dir", c.dataset_dir);
    get_opt(j, "out_dir", c.out_dir);
    get_opt(j, "stage_il", c.stage_il);
    get_opt(j, "stage_warmup", c.stage_warmup);
    get_opt(j, "stage_offline", c.stage_offline);
    get_opt(j, "stage_online", c.stage_online);
    get_opt(j, "stage_distill", c.stage_distill);
    get_opt(j, "eval_episodes", c.eval_episodes);
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig cfg = j.get<RunConfig>();
    cfg.validate();
    return cfg;
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write config file: " + path);
    json j = cfg;
    out << j.dump(2) << '\n';
}

std::uint64_t config_hash(const RunConfig& cfg) {
    json j = cfg;
    std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace flowrl
