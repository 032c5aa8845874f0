#include "flowrl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace flowrl {

using nlohmann::json;

namespace {

constexpr double kActionLimit = 0.999;
constexpr double kWidenEps = 1e-6;
constexpr std::uint32_t kBufferMagic = 0x42'4C'52'46;   // "FRLB"
constexpr std::uint32_t kEpisodeMagic = 0x45'4C'52'46;  // "FRLE"
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("unexpected end of file");
    return v;
}

void write_vec(std::ostream& out, const std::vector<double>& v) {
    write_pod<std::uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              std::streamsize(v.size() * sizeof(double)));
}

std::vector<double> read_vec(std::istream& in) {
    auto n = read_pod<std::uint64_t>(in);
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(double)));
    if (!in) throw DataError("unexpected end of file");
    return v;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

void Episode::check() const {
    int T = observations.t;
    if (observations.b != 1 || actions.b != 1) throw ShapeError("episode tensors must have b=1");
    if (actions.t != T || static_cast<int>(rewards.size()) != T)
        throw ShapeError("episode: inconsistent lengths");
    for (double r : rewards)
        if (!std::isfinite(r)) throw DataError("episode: non-finite reward");
}

double NormStats::apply_action(double v, int dim) const {
    double lo = action_min[dim], hi = action_max[dim];
    return kActionLimit * (2.0 * (v - lo) / (hi - lo) - 1.0);
}

double NormStats::unapply_action(double v, int dim) const {
    double lo = action_min[dim], hi = action_max[dim];
    return lo + (v / kActionLimit + 1.0) * 0.5 * (hi - lo);
}

double NormStats::apply_obs(double v, int dim) const { return (v - obs_mean[dim]) / obs_std[dim]; }

std::vector<double> NormStats::apply_obs_vec(const std::vector<double>& o) const {
    std::vector<double> out(o.size());
    for (std::size_t i = 0; i < o.size(); ++i) out[i] = apply_obs(o[i], int(i));
    return out;
}

Tensor NormStats::apply_actions(const Tensor& a) const {
    Tensor out = a;
    for (int i = 0; i < a.b; ++i)
        for (int j = 0; j < a.t; ++j)
            for (int k = 0; k < a.c; ++k) out.at(i, j, k) = apply_action(a.at(i, j, k), k);
    return out;
}

Tensor NormStats::unapply_actions(const Tensor& a) const {
    Tensor out = a;
    for (int i = 0; i < a.b; ++i)
        for (int j = 0; j < a.t; ++j)
            for (int k = 0; k < a.c; ++k) out.at(i, j, k) = unapply_action(a.at(i, j, k), k);
    return out;
}

NormStats fit_norm_stats(const std::vector<Episode>& episodes) {
    if (episodes.empty()) throw ArgumentError("fit_norm_stats: empty corpus");
    int D = episodes[0].obs_dim();
    int A = episodes[0].action_dim();
    NormStats s;
    s.action_min.assign(A, std::numeric_limits<double>::infinity());
    s.action_max.assign(A, -std::numeric_limits<double>::infinity());
    s.obs_mean.assign(D, 0.0);
    s.obs_std.assign(D, 0.0);

    std::size_t n_obs = 0;
    for (const Episode& ep : episodes) {
        ep.check();
        if (ep.obs_dim() != D || ep.action_dim() != A)
            throw ShapeError("fit_norm_stats: inconsistent dims across episodes");
        for (int t = 0; t < ep.length(); ++t) {
            for (int k = 0; k < A; ++k) {
                double v = ep.actions.at(0, t, k);
                s.action_min[k] = std::min(s.action_min[k], v);
                s.action_max[k] = std::max(s.action_max[k], v);
            }
            for (int k = 0; k < D; ++k) s.obs_mean[k] += ep.observations.at(0, t, k);
            ++n_obs;
        }
    }
    for (int k = 0; k < D; ++k) s.obs_mean[k] /= double(n_obs);
    for (const Episode& ep : episodes)
        for (int t = 0; t < ep.length(); ++t)
            for (int k = 0; k < D; ++k) {
                double d = ep.observations.at(0, t, k) - s.obs_mean[k];
                s.obs_std[k] += d * d;
            }
    for (int k = 0; k < D; ++k) s.obs_std[k] = std::sqrt(s.obs_std[k] / double(n_obs));

    // widen degenerate dimensions so the maps stay invertible
    for (int k = 0; k < A; ++k)
        if (s.action_max[k] - s.action_min[k] < kWidenEps) {
            s.action_min[k] -= kWidenEps;
            s.action_max[k] += kWidenEps;
        }
    for (int k = 0; k < D; ++k)
        if (s.obs_std[k] < kWidenEps) s.obs_std[k] = 1.0;
    return s;
}

std::vector<TransitionChunk> extract_chunks(const Episode& episode, const NormStats& stats, int H,
                                            int P, int stride) {
    if (H < 1 || P < 0 || stride < 1) throw ArgumentError("extract_chunks: bad window");
    episode.check();
    int T = episode.length();
    std::vector<TransitionChunk> out;
    if (T < P + 1) return out;  // too short; caller may warn

    int D = episode.obs_dim();
    int A = episode.action_dim();
    auto action_at = [&](int t, int k) {
        int tt = std::min(t, T - 1);  // repeat-last-action padding
        return episode.actions.at(0, tt, k);
    };

    for (int t = 0; t + P < T; t += stride) {
        TransitionChunk tc;
        tc.source = episode.source;
        tc.obs.resize(D);
        for (int k = 0; k < D; ++k) tc.obs[k] = stats.apply_obs(episode.observations.at(0, t, k), k);
        tc.prefix.resize(std::size_t(P) * A);
        for (int j = 0; j < P; ++j)
            for (int k = 0; k < A; ++k)
                tc.prefix[std::size_t(j) * A + k] = stats.apply_action(action_at(t + j, k), k);
        tc.chunk.resize(std::size_t(H) * A);
        tc.rewards.assign(H, 0.0);
        for (int j = 0; j < H; ++j) {
            int step = t + P + j;
            for (int k = 0; k < A; ++k)
                tc.chunk[std::size_t(j) * A + k] = stats.apply_action(action_at(step, k), k);
            if (step < T) tc.rewards[j] = episode.rewards[step];
        }
        // the next decision happens H steps later: obs o_{t+H} with committed
        // prefix a_{t+H..t+H+P-1}, whose Q covers returns from t+P+H onward --
        // exactly where this chunk's reward window ends
        int next = t + H;
        tc.done = t + P + H > T - 1;
        int next_t = std::min(next, T - 1);
        tc.next_obs.resize(D);
        for (int k = 0; k < D; ++k)
            tc.next_obs[k] = stats.apply_obs(episode.observations.at(0, next_t, k), k);
        tc.next_prefix.resize(std::size_t(P) * A);
        for (int j = 0; j < P; ++j)
            for (int k = 0; k < A; ++k)
                tc.next_prefix[std::size_t(j) * A + k] =
                    stats.apply_action(action_at(next + j, k), k);
        out.push_back(std::move(tc));
    }
    return out;
}

ReplayBuffer::ReplayBuffer(int obs_dim, int prefix_len, int action_dim, int chunk_len)
    : obs_dim_(obs_dim), prefix_len_(prefix_len), action_dim_(action_dim), chunk_len_(chunk_len) {
    if (obs_dim < 1 || action_dim < 1 || chunk_len < 1 || prefix_len < 0)
        throw ConfigError("replay buffer: bad shape");
}

void ReplayBuffer::check_row(const TransitionChunk& tc) const {
    if (int(tc.obs.size()) != obs_dim_ || int(tc.next_obs.size()) != obs_dim_ ||
        int(tc.prefix.size()) != prefix_len_ * action_dim_ ||
        int(tc.next_prefix.size()) != prefix_len_ * action_dim_ ||
        int(tc.chunk.size()) != chunk_len_ * action_dim_ ||
        int(tc.rewards.size()) != chunk_len_)
        throw ShapeError("replay buffer: row shape mismatch");
}

void ReplayBuffer::append(TransitionChunk tc) {
    check_row(tc);
    rows_.push_back(std::move(tc));
}

TransitionBatch ReplayBuffer::gather(const std::vector<std::size_t>& idx) const {
    int B = int(idx.size());
    if (B < 1) throw ArgumentError("gather: empty index list");
    TransitionBatch b;
    b.obs = Tensor(B, 1, obs_dim_);
    b.next_obs = Tensor(B, 1, obs_dim_);
    b.prefix = Tensor(B, prefix_len_, action_dim_);
    b.next_prefix = Tensor(B, prefix_len_, action_dim_);
    b.chunk = Tensor(B, chunk_len_, action_dim_);
    b.rewards = Tensor(B, chunk_len_, 1);
    b.done.resize(B);
    b.offline.resize(B);
    for (int i = 0; i < B; ++i) {
        const TransitionChunk& tc = rows_.at(idx[i]);
        std::copy(tc.obs.begin(), tc.obs.end(), &b.obs.at(i, 0, 0));
        std::copy(tc.next_obs.begin(), tc.next_obs.end(), &b.next_obs.at(i, 0, 0));
        if (prefix_len_ > 0) {
            std::copy(tc.prefix.begin(), tc.prefix.end(), &b.prefix.at(i, 0, 0));
            std::copy(tc.next_prefix.begin(), tc.next_prefix.end(), &b.next_prefix.at(i, 0, 0));
        }
        std::copy(tc.chunk.begin(), tc.chunk.end(), &b.chunk.at(i, 0, 0));
        std::copy(tc.rewards.begin(), tc.rewards.end(), &b.rewards.at(i, 0, 0));
        b.done[i] = tc.done ? 1.0 : 0.0;
        b.offline[i] = tc.source == Source::online ? 0 : 1;
    }
    return b;
}

TransitionBatch ReplayBuffer::sample(int batch_size, Rng& rng) const {
    if (batch_size < 1) throw ArgumentError("sample: batch_size must be >= 1");
    if (rows_.empty()) throw DataError("sample: empty buffer");
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = rng.index(rows_.size());
    return gather(idx);
}

void ReplayBuffer::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write buffer: " + path);
    write_pod(out, kBufferMagic);
    write_pod(out, kFormatVersion);
    write_pod<std::int32_t>(out, obs_dim_);
    write_pod<std::int32_t>(out, prefix_len_);
    write_pod<std::int32_t>(out, action_dim_);
    write_pod<std::int32_t>(out, chunk_len_);
    write_pod<std::uint64_t>(out, rows_.size());
    for (const TransitionChunk& tc : rows_) {
        out.write(reinterpret_cast<const char*>(tc.obs.data()),
                  std::streamsize(tc.obs.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(tc.prefix.data()),
                  std::streamsize(tc.prefix.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(tc.chunk.data()),
                  std::streamsize(tc.chunk.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(tc.rewards.data()),
                  std::streamsize(tc.rewards.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(tc.next_obs.data()),
                  std::streamsize(tc.next_obs.size() * sizeof(double)));
        out.write(reinterpret_cast<const char*>(tc.next_prefix.data()),
                  std::streamsize(tc.next_prefix.size() * sizeof(double)));
        write_pod<std::uint8_t>(out, tc.done ? 1 : 0);
        write_pod<std::uint8_t>(out, std::uint8_t(tc.source));
    }
    if (!out) throw DataError("short write: " + path);
}

ReplayBuffer ReplayBuffer::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open buffer: " + path);
    if (read_pod<std::uint32_t>(in) != kBufferMagic) throw DataError("not a buffer file: " + path);
    if (read_pod<std::uint32_t>(in) != kFormatVersion)
        throw DataError("unsupported buffer version: " + path);
    int D = read_pod<std::int32_t>(in);
    int P = read_pod<std::int32_t>(in);
    int A = read_pod<std::int32_t>(in);
    int H = read_pod<std::int32_t>(in);
    ReplayBuffer buf(D, P, A, H);
    auto n = read_pod<std::uint64_t>(in);
    auto read_block = [&](std::vector<double>& v, std::size_t len) {
        v.resize(len);
        in.read(reinterpret_cast<char*>(v.data()), std::streamsize(len * sizeof(double)));
    };
    for (std::uint64_t i = 0; i < n; ++i) {
        TransitionChunk tc;
        read_block(tc.obs, D);
        read_block(tc.prefix, std::size_t(P) * A);
        read_block(tc.chunk, std::size_t(H) * A);
        read_block(tc.rewards, H);
        read_block(tc.next_obs, D);
        read_block(tc.next_prefix, std::size_t(P) * A);
        tc.done = read_pod<std::uint8_t>(in) != 0;
        tc.source = Source(read_pod<std::uint8_t>(in));
        if (!in) throw DataError("truncated buffer: " + path);
        buf.rows_.push_back(std::move(tc));
    }
    return buf;
}

MixedSampler::MixedSampler(const ReplayBuffer* offline, const ReplayBuffer* online, double rho)
    : offline_(offline), online_(online), rho_(rho) {
    if (rho < 0.0 || rho > 1.0) throw ConfigError("mixed sampler: rho must be in [0, 1]");
}

TransitionBatch MixedSampler::sample(int batch_size, Rng& rng) const {
    bool have_off = offline_ && !offline_->empty();
    bool have_on = online_ && !online_->empty();
    if (!have_off && !have_on) throw DataError("mixed sampler: both buffers empty");
    std::vector<std::size_t> off_idx, on_idx, order;
    order.reserve(batch_size);
    for (int i = 0; i < batch_size; ++i) {
        bool from_offline = have_off && (!have_on || rng.uniform(0.0, 1.0) < rho_);
        if (from_offline) {
            order.push_back(off_idx.size() * 2);
            off_idx.push_back(rng.index(offline_->size()));
        } else {
            order.push_back(on_idx.size() * 2 + 1);
            on_idx.push_back(rng.index(online_->size()));
        }
    }
    TransitionBatch off_b, on_b;
    if (!off_idx.empty()) off_b = offline_->gather(off_idx);
    if (!on_idx.empty()) on_b = online_->gather(on_idx);
    const TransitionBatch& shape_src = !off_idx.empty() ? off_b : on_b;

    int B = batch_size;
    TransitionBatch b;
    b.obs = Tensor(B, 1, shape_src.obs.c);
    b.next_obs = Tensor(B, 1, shape_src.next_obs.c);
    b.prefix = Tensor(B, shape_src.prefix.t, shape_src.prefix.c);
    b.next_prefix = Tensor(B, shape_src.next_prefix.t, shape_src.next_prefix.c);
    b.chunk = Tensor(B, shape_src.chunk.t, shape_src.chunk.c);
    b.rewards = Tensor(B, shape_src.rewards.t, 1);
    b.done.resize(B);
    b.offline.resize(B);
    auto copy_row = [](Tensor& dst, int di, const Tensor& src, int si) {
        std::size_t per = std::size_t(src.t) * src.c;
        std::copy(src.data.begin() + si * per, src.data.begin() + (si + 1) * per,
                  dst.data.begin() + di * per);
    };
    for (int i = 0; i < B; ++i) {
        bool off = order[i] % 2 == 0;
        int si = int(order[i] / 2);
        const TransitionBatch& src = off ? off_b : on_b;
        copy_row(b.obs, i, src.obs, si);
        copy_row(b.next_obs, i, src.next_obs, si);
        copy_row(b.prefix, i, src.prefix, si);
        copy_row(b.next_prefix, i, src.next_prefix, si);
        copy_row(b.chunk, i, src.chunk, si);
        copy_row(b.rewards, i, src.rewards, si);
        b.done[i] = src.done[si];
        b.offline[i] = src.offline[si];
    }
    return b;
}

void save_corpus(const std::string& dir, const std::vector<Episode>& episodes, bool overwrite) {
    fs::path root(dir);
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!overwrite) throw DataError("corpus directory not empty: " + dir);
        fs::remove_all(root);
    }
    fs::create_directories(root);
    json manifest;
    manifest["version"] = kFormatVersion;
    manifest["episodes"] = json::array();
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        const Episode& ep = episodes[i];
        ep.check();
        char name[32];
        std::snprintf(name, sizeof(name), "ep_%05zu.bin", i);
        std::ofstream out(root / name, std::ios::binary);
        if (!out) throw DataError("cannot write episode file");
        write_pod(out, kEpisodeMagic);
        write_pod(out, kFormatVersion);
        write_pod<std::int32_t>(out, ep.length());
        write_pod<std::int32_t>(out, ep.obs_dim());
        write_pod<std::int32_t>(out, ep.action_dim());
        write_pod<std::uint8_t>(out, ep.success ? 1 : 0);
        write_pod<std::uint8_t>(out, std::uint8_t(ep.source));
        write_vec(out, ep.observations.data);
        write_vec(out, ep.actions.data);
        write_vec(out, ep.rewards);
        manifest["episodes"].push_back(
            {{"file", name}, {"success", ep.success}, {"source", int(ep.source)}});
    }
    std::ofstream mout(root / "manifest.json");
    mout << manifest.dump(2) << '\n';
    if (!mout) throw DataError("cannot write manifest");
}

std::vector<Episode> load_corpus(const std::string& dir) {
    fs::path root(dir);
    std::ifstream min(root / "manifest.json");
    if (!min) throw DataError("missing manifest: " + dir);
    json manifest = json::parse(min, nullptr, /*allow_exceptions=*/false);
    if (manifest.is_discarded()) throw DataError("corrupt manifest: " + dir);
    std::vector<Episode> out;
    for (const auto& entry : manifest.at("episodes")) {
        fs::path p = root / entry.at("file").get<std::string>();
        std::ifstream in(p, std::ios::binary);
        if (!in) throw DataError("missing episode file: " + p.string());
        if (read_pod<std::uint32_t>(in) != kEpisodeMagic)
            throw DataError("not an episode file: " + p.string());
        if (read_pod<std::uint32_t>(in) != kFormatVersion)
            throw DataError("unsupported episode version");
        int T = read_pod<std::int32_t>(in);
        int D = read_pod<std::int32_t>(in);
        int A = read_pod<std::int32_t>(in);
        Episode ep;
        ep.success = read_pod<std::uint8_t>(in) != 0;
        ep.source = Source(read_pod<std::uint8_t>(in));
        ep.observations = Tensor(1, T, D);
        ep.observations.data = read_vec(in);
        ep.actions = Tensor(1, T, A);
        ep.actions.data = read_vec(in);
        ep.rewards = read_vec(in);
        ep.check();
        if (bool(entry.at("success").get<bool>()) != ep.success)
            throw DataError("manifest/episode success mismatch: " + p.string());
        out.push_back(std::move(ep));
    }
    return out;
}

std::string corpus_manifest_hash(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!in) throw DataError("missing manifest: " + dir);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(s)));
    return buf;
}

}  // namespace flowrl
