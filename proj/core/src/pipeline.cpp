#include "flowrl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace flowrl {

using nlohmann::json;

namespace {

constexpr double kClipMargin = 1e-4;

double now_sec() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

/// Hash over the parts of the config that define the artifact (training
/// hyperparameters and environment); stage toggles and paths may differ
/// between the producing and resuming invocation.
std::uint64_t artifact_hash(const RunConfig& cfg) {
    RunConfig canon = cfg;
    canon.dataset_dir.clear();
    canon.out_dir = "run";
    canon.stage_il = canon.stage_warmup = canon.stage_offline = canon.stage_online = true;
    canon.stage_distill = false;
    canon.eval_episodes = 200;
    return config_hash(canon);
}

class CurveRecorder {
public:
    explicit CurveRecorder(std::int64_t total) : every_(std::max<std::int64_t>(1, total / 100)) {}
    void add(StageReport& rep, double loss) {
        rep.final_loss = loss;
        if (rep.steps % every_ == 0) rep.loss_curve.push_back(loss);
        ++rep.steps;
    }

private:
    std::int64_t every_;
};

}  // namespace

std::string StageReport::to_jsonl() const {
    json j{{"stage", stage},
           {"steps", steps},
           {"wall_time_sec", wall_time_sec},
           {"final_loss", final_loss},
           {"loss_curve", loss_curve},
           {"metrics", metrics}};
    return j.dump();
}

ValueSupport support_from_chunks(const ReplayBuffer& data, const TrainConfig& cfg) {
    if (data.empty()) throw ArgumentError("support_from_chunks: empty buffer");
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const TransitionChunk& tc = data.row(i);
        double acc = 0.0, g = 1.0;
        for (double r : tc.rewards) {
            acc += g * r;
            g *= cfg.gamma;
        }
        lo = std::min(lo, acc);
        hi = std::max(hi, acc);
    }
    double gH = std::pow(cfg.gamma, cfg.chunk_len);
    hi = hi / (1.0 - gH);
    if (hi - lo < 1e-6) hi = lo + 1.0;
    double margin = 0.1 * (hi - lo);
    return ValueSupport::make(lo - margin, hi + margin, cfg.num_bins, cfg.hl_sigma_ratio);
}

ValueSupport support_from_episodes(const std::vector<Episode>& episodes, const TrainConfig& cfg) {
    if (episodes.empty()) throw ArgumentError("support_from_episodes: empty corpus");
    double lo = 0.0, hi = 0.0;
    for (const Episode& ep : episodes) {
        double rtg = 0.0;
        for (int t = ep.length() - 1; t >= 0; --t) {
            rtg = ep.rewards[t] + cfg.gamma * rtg;
            lo = std::min(lo, rtg);
            hi = std::max(hi, rtg);
        }
    }
    if (hi - lo < 1e-6) hi = lo + 1.0;
    double margin = 0.1 * (hi - lo);
    return ValueSupport::make(lo - margin, hi + margin, cfg.num_bins, cfg.hl_sigma_ratio);
}

Teacher scripted_teacher(const std::string& env_name, int chunk_len) {
    if (env_name == "pointmass") {
        return [chunk_len](const std::vector<double>& obs) {
            double x = obs.at(0), y = obs.at(1), gx = obs.at(2), gy = obs.at(3);
            Tensor chunk(1, chunk_len, 2);
            for (int j = 0; j < chunk_len; ++j) {
                double ax = std::clamp(3.0 * (gx - x), -1.0, 1.0);
                double ay = std::clamp(3.0 * (gy - y), -1.0, 1.0);
                chunk.at(0, j, 0) = ax;
                chunk.at(0, j, 1) = ay;
                x = std::clamp(x + ChunkedPointMass::kStepScale * ax, -1.0, 1.0);
                y = std::clamp(y + ChunkedPointMass::kStepScale * ay, -1.0, 1.0);
            }
            return chunk;
        };
    }
    if (env_name == "rotator") {
        return [chunk_len](const std::vector<double>&) {
            Tensor chunk(1, chunk_len, 1);
            chunk.fill(0.45);
            return chunk;
        };
    }
    throw ConfigError("no scripted teacher for environment: " + env_name);
}

Pipeline::Pipeline(const RunConfig& cfg, int obs_dim, int action_dim)
    : cfg_(cfg),
      obs_dim_(obs_dim),
      action_dim_(action_dim),
      rng_(cfg.train.seed ^ 0xf1ee7a9ull) {
    cfg_.validate();
    policy_ = std::make_unique<FlowModel>(cfg_.train, obs_dim, action_dim);
    const TrainConfig& t = cfg_.train;
    il_data_ = ReplayBuffer(obs_dim, t.prefix_len, action_dim, t.chunk_len);
    offline_ = ReplayBuffer(obs_dim, t.prefix_len, action_dim, t.chunk_len);
    online_ = ReplayBuffer(obs_dim, t.prefix_len, action_dim, t.chunk_len);
}

void Pipeline::require(bool ok, const std::string& what) const {
    if (!ok) throw ResumeError("missing prerequisite: " + what);
}

void Pipeline::load_dataset(const std::vector<Episode>& episodes) {
    stats_ = fit_norm_stats(episodes);
    have_stats_ = true;
    const TrainConfig& t = cfg_.train;
    for (const Episode& ep : episodes) {
        auto chunks = extract_chunks(ep, stats_, t.chunk_len, t.prefix_len, t.chunk_len);
        for (auto& tc : chunks) {
            if (ep.success) il_data_.append(tc);
            offline_.append(std::move(tc));
        }
    }
    if (offline_.empty()) throw DataError("load_dataset: no usable transitions");
    support_ = support_from_episodes(episodes, t);
    have_support_ = true;
}

void Pipeline::set_norm_stats(const NormStats& stats) {
    stats_ = stats;
    have_stats_ = true;
}

void Pipeline::ensure_critics() {
    if (critics_) return;
    if (!have_support_) {
        // no dataset yet (distillation path): generic sparse-reward support
        double gH = std::pow(cfg_.train.gamma, cfg_.train.chunk_len);
        double hi = std::max(1.0, 1.0 / (1.0 - gH));
        support_ = ValueSupport::make(-0.1 * hi, 1.1 * hi, cfg_.train.num_bins,
                                      cfg_.train.hl_sigma_ratio);
        have_support_ = true;
    }
    critics_ = std::make_unique<CriticEnsemble>(cfg_.train, obs_dim_, action_dim_, support_);
}

CriticEnsemble& Pipeline::critics() {
    ensure_critics();
    return *critics_;
}

StageReport Pipeline::stage_il() {
    if (il_data_.empty()) throw ArgumentError("stage_il: empty demo dataset");
    const TrainConfig& t = cfg_.train;
    StageReport rep;
    rep.stage = "il";
    double t0 = now_sec();
    CurveRecorder curve(t.steps_il);
    AdamWConfig oc{t.lr_init, 0.9, 0.999, 1e-8, t.weight_decay, 1.0};
    auto params = policy_->params().all();
    for (std::int64_t i = 0; i < t.steps_il; ++i) {
        TransitionBatch batch = il_data_.sample(t.batch_il, rng_);
        policy_->params().zero_grads();
        Tape tape;
        Var loss = policy_->il_loss_t(tape, batch.obs, batch.prefix, batch.chunk, t.dropout_il,
                                      rng_);
        tape.backward(loss);
        actor_opt_.step(params, oc);
        curve.add(rep, tape.val(loss).item());
    }
    rep.wall_time_sec = now_sec() - t0;
    return rep;
}

double Pipeline::critic_step(const TransitionBatch& batch,
                             const CriticEnsemble::ChunkSampler& bootstrap) {
    const TrainConfig& t = cfg_.train;
    std::vector<double> y = critics_->td_targets(batch, bootstrap, rng_);
    std::vector<Param*> params;
    for (int j = 0; j < critics_->num_members(); ++j) {
        auto p = critics_->member(j).params().all();
        params.insert(params.end(), p.begin(), p.end());
    }
    for (Param* p : params) p->zero_grad();
    Tape tape;
    Var loss = critics_->critic_loss_t(tape, batch, y, t.dropout_rl, rng_);
    tape.backward(loss);
    AdamWConfig oc{t.lr_rl, 0.9, 0.999, 1e-8, t.weight_decay, 1.0};
    critic_opt_.step(params, oc);
    critics_->polyak_update(t.tau);
    return tape.val(loss).item();
}

StageReport Pipeline::run_critic_stage(const std::string& name, const ReplayBuffer& data,
                                       const CriticEnsemble::ChunkSampler& bootstrap,
                                       std::int64_t steps) {
    if (data.empty()) throw DataError(name + ": empty dataset");
    ensure_critics();
    StageReport rep;
    rep.stage = name;
    double t0 = now_sec();
    CurveRecorder curve(steps);
    for (std::int64_t i = 0; i < steps; ++i) {
        TransitionBatch batch = data.sample(cfg_.train.batch_rl, rng_);
        curve.add(rep, critic_step(batch, bootstrap));
    }
    rep.wall_time_sec = now_sec() - t0;
    return rep;
}

StageReport Pipeline::stage_warmup_with(const ReplayBuffer& data,
                                        const CriticEnsemble::ChunkSampler& bootstrap,
                                        std::int64_t steps) {
    return run_critic_stage("warmup", data, bootstrap, steps);
}

StageReport Pipeline::stage_warmup() {
    auto bootstrap = [this](const Tensor& next_obs, const Tensor& next_prefix, Rng& r) {
        ConditioningContext ctx = policy_->encode_context(next_obs, next_prefix);
        return policy_->sample(ctx, cfg_.train.sigma_sample, next_obs.b, r).actions;
    };
    return run_critic_stage("warmup", offline_, bootstrap, cfg_.train.steps_warmup);
}

double Pipeline::actor_rl_step(const TransitionBatch& batch, const TransitionBatch& bc_batch) {
    const TrainConfig& t = cfg_.train;
    int B = batch.size();
    policy_->params().zero_grads();
    for (int j = 0; j < critics_->num_members(); ++j) critics_->member(j).params().zero_grads();

    Tape tape;
    Var obs = tape.constant(batch.obs);
    Var prefix = tape.constant(batch.prefix);
    Var ctx = policy_->encode_context_t(tape, obs, prefix);

    Tensor z0 = Tensor::randn(B, t.chunk_len, action_dim_, rng_, t.sigma_sample);
    auto [a_pi, ld] = policy_->inverse_t(tape, tape.constant(z0), ctx, t.dropout_rl, rng_);
    Var q = critics_->min_q_t(tape, obs, prefix, a_pi, 0.0, rng_);
    Var loss = tape.scale(tape.mean_all(q), -1.0);

    // likelihood regularization toward the imitation distribution; the BC
    // rows come from the success-filtered buffer, not the RL batch
    if (t.lambda_bc > 0.0 && bc_batch.size() > 0) {
        Tensor perturbed = bc_batch.chunk;
        double lim = 1.0 - kClipMargin;
        for (auto& v : perturbed.data) {
            v += rng_.normal(0.0, t.sigma_noise);
            v = std::clamp(v, -lim, lim);
        }
        Var bc_ctx = policy_->encode_context_t(tape, tape.constant(bc_batch.obs),
                                               tape.constant(bc_batch.prefix));
        Var lp = policy_->log_prob_t(tape, tape.constant(std::move(perturbed)), bc_ctx,
                                     t.dropout_rl, rng_);
        Var bc = tape.scale(tape.mean_all(lp), -1.0);
        loss = tape.add(loss, tape.scale(bc, t.lambda_bc));
    }
    tape.backward(loss);
    AdamWConfig oc{t.lr_rl, 0.9, 0.999, 1e-8, t.weight_decay, 1.0};
    actor_opt_.step(policy_->params().all(), oc);
    return tape.val(loss).item();
}

StageReport Pipeline::stage_offline() {
    if (offline_.empty()) throw DataError("stage_offline: empty dataset");
    ensure_critics();
    const TrainConfig& t = cfg_.train;
    auto bootstrap = [this](const Tensor& next_obs, const Tensor& next_prefix, Rng& r) {
        ConditioningContext ctx = policy_->encode_context(next_obs, next_prefix);
        return policy_->sample(ctx, cfg_.train.sigma_sample, next_obs.b, r).actions;
    };
    StageReport rep;
    rep.stage = "offline";
    double t0 = now_sec();
    CurveRecorder curve(t.steps_offline);
    const ReplayBuffer& bc_src = il_data_.empty() ? offline_ : il_data_;
    for (std::int64_t i = 0; i < t.steps_offline; ++i) {
        TransitionBatch batch = offline_.sample(t.batch_rl, rng_);
        TransitionBatch bc = bc_src.sample(t.batch_rl, rng_);
        critic_step(batch, bootstrap);
        curve.add(rep, actor_rl_step(batch, bc));
    }
    rep.wall_time_sec = now_sec() - t0;
    return rep;
}

StageReport Pipeline::stage_online(ChunkEnv& env) {
    if (offline_.empty()) throw DataError("stage_online: empty offline dataset");
    ensure_critics();
    const TrainConfig& t = cfg_.train;
    auto bootstrap = [this](const Tensor& next_obs, const Tensor& next_prefix, Rng& r) {
        ConditioningContext ctx = policy_->encode_context(next_obs, next_prefix);
        return policy_->sample(ctx, cfg_.train.sigma_sample, next_obs.b, r).actions;
    };
    SelectionConfig sel{t.n_pi_rl, t.sigma_sample, true};
    StageReport rep;
    rep.stage = "online";
    double t0 = now_sec();
    CurveRecorder curve(t.online_iters * t.steps_online_per_iter);
    double successes = 0.0, collected = 0.0;
    for (std::int64_t it = 0; it < t.online_iters; ++it) {
        for (std::int64_t e = 0; e < t.online_episodes_per_iter; ++e) {
            Episode ep = rollout_episode(*policy_, critics_.get(), env, stats_, sel,
                                         rng_.next_u64(), rng_);
            successes += ep.success ? 1.0 : 0.0;
            collected += 1.0;
            for (auto& tc : extract_chunks(ep, stats_, t.chunk_len, t.prefix_len, t.chunk_len))
                online_.append(std::move(tc));
        }
        MixedSampler mixer(&offline_, &online_, t.rho);
        const ReplayBuffer& bc_src = il_data_.empty() ? offline_ : il_data_;
        for (std::int64_t i = 0; i < t.steps_online_per_iter; ++i) {
            TransitionBatch batch = mixer.sample(t.batch_rl, rng_);
            TransitionBatch bc = bc_src.sample(t.batch_rl, rng_);
            critic_step(batch, bootstrap);
            curve.add(rep, actor_rl_step(batch, bc));
        }
    }
    if (collected > 0.0) rep.metrics["collect_success_rate"] = successes / collected;
    rep.metrics["online_rows"] = double(online_.size());
    rep.wall_time_sec = now_sec() - t0;
    return rep;
}

StageReport Pipeline::stage_distill(ChunkEnv& env, const Teacher& teacher) {
    const TrainConfig& t = cfg_.train;
    int H = t.chunk_len, P = t.prefix_len, A = action_dim_, D = obs_dim_;
    StageReport rep;
    rep.stage = "distill";
    double t0 = now_sec();

    // roll one episode, executing the teacher's chunk with probability
    // p_teacher; record an imitation pair at every decision point
    auto roll = [&](double p_teacher, ReplayBuffer* pairs, std::vector<Episode>* out_eps) {
        std::vector<double> obs = env.reset(rng_.next_u64());
        std::deque<std::vector<double>> queue;
        for (int i = 0; i < P; ++i) queue.emplace_back(A, 0.0);
        std::vector<std::vector<double>> obs_rows, act_rows;
        std::vector<double> rewards;
        bool done = false;
        while (!done && int(obs_rows.size()) < env.horizon()) {
            Tensor teacher_raw = teacher(obs);
            Tensor teacher_norm = have_stats_ ? stats_.apply_actions(teacher_raw) : teacher_raw;
            for (auto& v : teacher_norm.data) v = std::clamp(v, -0.999, 0.999);
            if (pairs) {
                TransitionChunk tc;
                tc.obs = have_stats_ ? stats_.apply_obs_vec(obs) : obs;
                tc.prefix.clear();
                for (int j = 0; j < P; ++j)
                    tc.prefix.insert(tc.prefix.end(), queue[j].begin(), queue[j].end());
                tc.chunk.assign(teacher_norm.data.begin(), teacher_norm.data.end());
                tc.rewards.assign(H, 0.0);
                tc.next_obs.assign(D, 0.0);
                tc.next_prefix.assign(std::size_t(P) * A, 0.0);
                tc.done = true;
                tc.source = Source::offline_extra;
                pairs->append(std::move(tc));
            }
            Tensor exec_norm;
            if (rng_.uniform() < p_teacher) {
                exec_norm = teacher_norm;
            } else {
                Tensor obs_t(1, 1, D);
                std::vector<double> no = have_stats_ ? stats_.apply_obs_vec(obs) : obs;
                std::copy(no.begin(), no.end(), obs_t.data.begin());
                Tensor prefix(1, P, A);
                for (int j = 0; j < P; ++j)
                    for (int k = 0; k < A; ++k) prefix.at(0, j, k) = queue[j][k];
                ConditioningContext ctx = policy_->encode_context(obs_t, prefix);
                exec_norm = policy_->sample(ctx, t.sigma_sample, 1, rng_).actions;
            }
            for (int j = 0; j < H; ++j) {
                std::vector<double> a(A);
                for (int k = 0; k < A; ++k) a[k] = exec_norm.at(0, j, k);
                queue.push_back(std::move(a));
            }
            for (int j = 0; j < H && !done && int(obs_rows.size()) < env.horizon(); ++j) {
                std::vector<double> anorm = queue.front();
                queue.pop_front();
                std::vector<double> araw(A);
                for (int k = 0; k < A; ++k) {
                    double v = anorm[k];
                    if (have_stats_) v = stats_.unapply_action(v, k);
                    araw[k] = std::clamp(v, -1.0, 1.0);
                }
                obs_rows.push_back(obs);
                act_rows.push_back(araw);
                auto [r, d] = env.step(araw);
                rewards.push_back(r);
                obs = env.observe();
                done = d;
            }
        }
        if (out_eps) {
            int n = int(obs_rows.size());
            Episode ep;
            ep.observations = Tensor(1, n, D);
            ep.actions = Tensor(1, n, A);
            for (int ti = 0; ti < n; ++ti) {
                for (int k = 0; k < D; ++k) ep.observations.at(0, ti, k) = obs_rows[ti][k];
                for (int k = 0; k < A; ++k) ep.actions.at(0, ti, k) = act_rows[ti][k];
            }
            ep.rewards = rewards;
            ep.success = env.success();
            ep.source = Source::offline_extra;
            out_eps->push_back(std::move(ep));
        }
    };

    if (!have_stats_) {
        // bootstrap normalization from pure-teacher rollouts
        std::vector<Episode> warm;
        for (int i = 0; i < 5; ++i) roll(1.0, nullptr, &warm);
        stats_ = fit_norm_stats(warm);
        have_stats_ = true;
    }

    ReplayBuffer pairs(D, P, A, H);
    std::vector<Episode> collected;
    AdamWConfig oc{t.lr_init, 0.9, 0.999, 1e-8, t.weight_decay, 1.0};
    auto params = policy_->params().all();
    CurveRecorder curve(t.distill_iters * t.distill_steps_per_iter);
    double p_teacher = 1.0;
    for (std::int64_t it = 0; it < t.distill_iters; ++it) {
        for (std::int64_t e = 0; e < t.distill_episodes_per_iter; ++e)
            roll(p_teacher, &pairs, &collected);
        for (std::int64_t i = 0; i < t.distill_steps_per_iter; ++i) {
            TransitionBatch batch = pairs.sample(std::min<int>(t.batch_il, int(pairs.size())),
                                                 rng_);
            policy_->params().zero_grads();
            Tape tape;
            Var loss = policy_->il_loss_t(tape, batch.obs, batch.prefix, batch.chunk,
                                          t.dropout_il, rng_);
            tape.backward(loss);
            actor_opt_.step(params, oc);
            curve.add(rep, tape.val(loss).item());
        }
        p_teacher *= t.p_teacher_decay;
    }
    // collected experience doubles as the offline dataset for later stages
    for (const Episode& ep : collected)
        for (auto& tc : extract_chunks(ep, stats_, H, P, H)) offline_.append(std::move(tc));
    if (!have_support_ && !offline_.empty()) {
        support_ = support_from_chunks(offline_, t);
        have_support_ = true;
    }
    rep.metrics["p_teacher_final"] = p_teacher;
    rep.metrics["pairs"] = double(pairs.size());
    rep.wall_time_sec = now_sec() - t0;
    return rep;
}

EvalMetrics Pipeline::eval_policy(ChunkEnv& env, const SelectionConfig& sel, int episodes,
                                  std::uint64_t seed) {
    const CriticEnsemble* ens = sel.use_critic ? &critics() : critics_.get();
    return evaluate(*policy_, ens, env, stats_, sel, episodes, seed);
}

void Pipeline::save_checkpoint(const std::string& path, const std::string& stage) const {
    Checkpoint ck;
    ck.config_hash = artifact_hash(cfg_);
    json j = cfg_;
    ck.config_json = j.dump();
    ck.strings["stage"] = stage;
    ck.strings["rng"] = rng_.serialize();
    ck.strings["flow.partitions"] =
        encode_partitions(policy_->partitions(), policy_->partitions_k2());
    checkpoint_put_params(ck, "policy.", policy_->params());
    ck.ints["actor_opt.step"] = actor_opt_.step_count();
    ck.ints["critic_opt.step"] = critic_opt_.step_count();
    ck.ints["has_stats"] = have_stats_ ? 1 : 0;
    if (have_stats_) checkpoint_put_norm(ck, stats_);
    ck.ints["has_critics"] = critics_ ? 1 : 0;
    if (critics_) {
        ck.arrays["support"] = Tensor::from_vector(
            {critics_->support().v_min, critics_->support().v_max, critics_->support().hl_sigma});
        ck.ints["support.bins"] = critics_->support().num_bins;
        for (int jx = 0; jx < critics_->num_members(); ++jx) {
            checkpoint_put_params(ck, "critic." + std::to_string(jx) + ".",
                                  critics_->member(jx).params());
            checkpoint_put_params(ck, "critic_t." + std::to_string(jx) + ".",
                                  critics_->target(jx).params());
        }
    }
    ck.save(path);
}

std::string Pipeline::load_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.config_hash != artifact_hash(cfg_))
        throw ResumeError("config hash mismatch for checkpoint: " + path);
    std::vector<std::vector<int>> k1, k2;
    decode_partitions(ck.get_string("flow.partitions"), k1, k2);
    policy_->set_partitions(k1, k2);
    checkpoint_get_params(ck, "policy.", policy_->params());
    actor_opt_.set_step_count(ck.get_int("actor_opt.step"));
    critic_opt_.set_step_count(ck.get_int("critic_opt.step"));
    rng_.deserialize(ck.get_string("rng"));
    if (ck.get_int("has_stats")) {
        stats_ = checkpoint_get_norm(ck);
        have_stats_ = true;
    }
    if (ck.get_int("has_critics")) {
        const Tensor& sup = ck.array("support");
        ValueSupport s;
        s.v_min = sup.data.at(0);
        s.v_max = sup.data.at(1);
        s.hl_sigma = sup.data.at(2);
        s.num_bins = int(ck.get_int("support.bins"));
        support_ = s;
        have_support_ = true;
        critics_.reset();
        ensure_critics();
        for (int jx = 0; jx < critics_->num_members(); ++jx) {
            checkpoint_get_params(ck, "critic." + std::to_string(jx) + ".",
                                  critics_->member(jx).params());
            checkpoint_get_params(ck, "critic_t." + std::to_string(jx) + ".",
                                  critics_->target(jx).params());
        }
    }
    return ck.get_string("stage");
}

std::vector<StageReport> Pipeline::run_full(const std::vector<Episode>* episodes) {
    if (episodes && offline_.empty() && !episodes->empty()) load_dataset(*episodes);
    fs::create_directories(cfg_.out_dir);
    std::vector<StageReport> reports;
    std::ofstream report_out(fs::path(cfg_.out_dir) / "reports.jsonl", std::ios::app);

    std::unique_ptr<ChunkEnv> env;
    auto need_env = [&]() -> ChunkEnv& {
        if (!env) env = make_env(cfg_.env);
        return *env;
    };

    struct StageDef {
        std::string name;
        bool enabled;
    };
    std::vector<StageDef> order;
    if (cfg_.stage_distill)
        order.push_back({"distill", true});
    else
        order.push_back({"il", cfg_.stage_il});
    order.push_back({"warmup", cfg_.stage_warmup});
    order.push_back({"offline", cfg_.stage_offline});
    order.push_back({"online", cfg_.stage_online});

    bool policy_ready = false, critic_ready = false;
    for (const StageDef& sd : order) {
        fs::path ck = fs::path(cfg_.out_dir) / (sd.name + ".ck");
        fs::path buf = fs::path(cfg_.out_dir) / (sd.name + ".online.buf");
        if (fs::exists(ck)) {
            load_checkpoint(ck.string());
            if (fs::exists(buf)) online_ = ReplayBuffer::load(buf.string());
            policy_ready = true;
            if (sd.name != "il" && sd.name != "distill") critic_ready = true;
            continue;
        }
        if (!sd.enabled) continue;

        StageReport rep;
        if (sd.name == "il") {
            rep = stage_il();
            policy_ready = true;
        } else if (sd.name == "distill") {
            rep = stage_distill(need_env(), scripted_teacher(cfg_.env, cfg_.train.chunk_len));
            policy_ready = true;
        } else if (sd.name == "warmup") {
            require(policy_ready, "warmup requires an imitation or distillation checkpoint");
            rep = stage_warmup();
            critic_ready = true;
        } else if (sd.name == "offline") {
            require(policy_ready && critic_ready, "offline requires a warmed critic");
            rep = stage_offline();
        } else {
            require(policy_ready && critic_ready, "online requires a warmed critic");
            rep = stage_online(need_env());
            online_.save(buf.string());
        }
        save_checkpoint(ck.string(), sd.name);
        report_out << rep.to_jsonl() << '\n';
        reports.push_back(std::move(rep));
    }
    return reports;
}

}  // namespace flowrl
