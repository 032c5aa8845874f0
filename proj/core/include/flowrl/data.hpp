#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/tensor.hpp"

namespace flowrl {

enum class Source : std::uint8_t { demo = 0, offline_extra = 1, online = 2 };

/// One recorded episode in raw (environment) units.
struct Episode {
    Tensor observations;          // [1, T, D]
    Tensor actions;               // [1, T, A]
    std::vector<double> rewards;  // length T
    bool success = false;
    Source source = Source::demo;

    int length() const { return observations.t; }
    int obs_dim() const { return observations.c; }
    int action_dim() const { return actions.c; }
    void check() const;
};

/// One decision-boundary transition: the unit of critic/actor training.
struct TransitionChunk {
    std::vector<double> obs;          // D
    std::vector<double> prefix;       // P*A row-major
    std::vector<double> chunk;        // H*A row-major, normalized actions
    std::vector<double> rewards;      // H
    std::vector<double> next_obs;     // D
    std::vector<double> next_prefix;  // P*A
    bool done = false;
    Source source = Source::demo;
};

/// Batched transitions as rank-3 tensors ready for the models.
struct TransitionBatch {
    Tensor obs;          // [B, 1, D]
    Tensor prefix;       // [B, P, A]
    Tensor chunk;        // [B, H, A]
    Tensor rewards;      // [B, H, 1]
    Tensor next_obs;     // [B, 1, D]
    Tensor next_prefix;  // [B, P, A]
    std::vector<double> done;        // 0/1 per row
    std::vector<std::uint8_t> offline;  // 1 if the row came from offline data

    int size() const { return obs.b; }
};

/// Dataset statistics: actions mapped to (-1,1) by min/max, observations
/// standardized by mean/std.
struct NormStats {
    std::vector<double> action_min, action_max;
    std::vector<double> obs_mean, obs_std;

    double apply_action(double v, int dim) const;
    double unapply_action(double v, int dim) const;
    double apply_obs(double v, int dim) const;
    std::vector<double> apply_obs_vec(const std::vector<double>& o) const;
    Tensor apply_actions(const Tensor& a) const;   // [*, *, A]
    Tensor unapply_actions(const Tensor& a) const;
};

NormStats fit_norm_stats(const std::vector<Episode>& episodes);

/// Slide a decision window over the episode: obs at t, P prefix actions, then
/// the H-action chunk. Episodes that end mid-chunk are padded by repeating the
/// final action with zero reward and done=true. Episodes with T < P+1 yield
/// an empty list.
std::vector<TransitionChunk> extract_chunks(const Episode& episode, const NormStats& stats, int H,
                                            int P, int stride);

class ReplayBuffer {
public:
    ReplayBuffer() = default;
    ReplayBuffer(int obs_dim, int prefix_len, int action_dim, int chunk_len);

    void append(TransitionChunk tc);
    std::size_t size() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }
    const TransitionChunk& row(std::size_t i) const { return rows_.at(i); }

    TransitionBatch sample(int batch_size, Rng& rng) const;
    TransitionBatch gather(const std::vector<std::size_t>& idx) const;

    void save(const std::string& path) const;
    static ReplayBuffer load(const std::string& path);

    int obs_dim() const { return obs_dim_; }
    int prefix_len() const { return prefix_len_; }
    int action_dim() const { return action_dim_; }
    int chunk_len() const { return chunk_len_; }

private:
    void check_row(const TransitionChunk& tc) const;
    int obs_dim_ = 0, prefix_len_ = 0, action_dim_ = 0, chunk_len_ = 0;
    std::vector<TransitionChunk> rows_;
};

/// Row-level Bernoulli(rho) mix of the offline and online buffers.
class MixedSampler {
public:
    MixedSampler(const ReplayBuffer* offline, const ReplayBuffer* online, double rho);
    TransitionBatch sample(int batch_size, Rng& rng) const;

private:
    const ReplayBuffer* offline_;
    const ReplayBuffer* online_;
    double rho_;
};

// Episode corpus: a directory of binary episode files plus a JSON manifest.
void save_corpus(const std::string& dir, const std::vector<Episode>& episodes, bool overwrite);
std::vector<Episode> load_corpus(const std::string& dir);
std::string corpus_manifest_hash(const std::string& dir);

// Sparse reward labeling by task rule ("pointmass", "bandit", "rotator");
// defined alongside the environments. Idempotent.
void label_rewards(Episode& episode, const std::string& rule);

}  // namespace flowrl
