#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

namespace flowrl {

/// All training hyperparameters with their defaults. Serialized into the run
/// config file and embedded (as a hash) in every artifact.
struct TrainConfig {
    int chunk_len = 10;   // H
    int prefix_len = 3;   // P
    int flow_depth = 16;  // coupling blocks
    int hidden = 256;     // flow token width
    int heads = 8;

    double sigma_noise = 0.05;
    double sigma_sample = 0.7;
    double lambda_bc = 0.1;
    double gamma = 0.997;
    double tau = 0.05;
    double rho = 0.5;

    int n_pi = 128;     // candidate chunks for post-IL inference
    int n_pi_rl = 24;   // candidate chunks during RL fine-tuning

    int batch_il = 256;
    int batch_rl = 48;

    std::int64_t steps_il = 30000;
    std::int64_t steps_warmup = 5000;
    std::int64_t steps_offline = 1000;
    std::int64_t online_iters = 5;
    std::int64_t online_episodes_per_iter = 10;
    std::int64_t steps_online_per_iter = 500;
    std::int64_t distill_iters = 200;
    std::int64_t distill_episodes_per_iter = 4;
    std::int64_t distill_steps_per_iter = 50;
    double p_teacher_decay = 0.999;

    double lr_init = 1e-4;
    double lr_rl = 2e-4;
    double weight_decay = 1e-4;
    double dropout_il = 0.5;
    double dropout_rl = 0.1;
    // per-row chance of blanking the prefix during imitation, so the policy
    // also works from the empty queue it sees at episode start
    double prefix_dropout = 0.1;

    int num_bins = 101;
    double hl_sigma_ratio = 0.75;  // hl_sigma = ratio * bin width
    int critic_hidden = 256;
    int critic_heads = 8;
    int critic_layers = 2;
    int num_critics = 2;

    std::uint64_t seed = 0;

    void validate() const;
};

/// Full run description: hyperparameters plus environment, data locations,
/// and which stages to execute.
struct RunConfig {
    TrainConfig train;
    std::string env = "pointmass";
    std::string dataset_dir;
    std::string out_dir = "run";
    bool stage_il = true;
    bool stage_warmup = true;
    bool stage_offline = true;
    bool stage_online = true;
    bool stage_distill = false;
    int eval_episodes = 200;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);

/// FNV-1a over the canonical JSON dump; used to detect resume mismatches.
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace flowrl
