#include "flowrl/checkpoint.hpp"

#include <fstream>
#include <sstream>

namespace flowrl {

namespace {

constexpr std::uint32_t kMagic = 0x43'4C'52'46;  // "FRLC"
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: unexpected end of file");
    return v;
}

void write_str(std::ostream& out, const std::string& s) {
    write_pod<std::uint64_t>(out, s.size());
    out.write(s.data(), std::streamsize(s.size()));
}

std::string read_str(std::istream& in) {
    auto n = read_pod<std::uint64_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), std::streamsize(n));
    if (!in) throw DataError("checkpoint: unexpected end of file");
    return s;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    write_pod(out, kMagic);
    write_pod(out, kVersion);
    write_pod(out, config_hash);
    write_str(out, config_json);
    write_pod<std::uint64_t>(out, ints.size());
    for (const auto& [k, v] : ints) {
        write_str(out, k);
        write_pod<std::int64_t>(out, v);
    }
    write_pod<std::uint64_t>(out, strings.size());
    for (const auto& [k, v] : strings) {
        write_str(out, k);
        write_str(out, v);
    }
    write_pod<std::uint64_t>(out, arrays.size());
    for (const auto& [k, v] : arrays) {
        write_str(out, k);
        write_pod<std::int32_t>(out, v.b);
        write_pod<std::int32_t>(out, v.t);
        write_pod<std::int32_t>(out, v.c);
        out.write(reinterpret_cast<const char*>(v.data.data()),
                  std::streamsize(v.data.size() * sizeof(double)));
    }
    if (!out) throw DataError("short write: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    if (read_pod<std::uint32_t>(in) != kMagic) throw DataError("not a checkpoint file: " + path);
    if (read_pod<std::uint32_t>(in) != kVersion)
        throw DataError("unsupported checkpoint version: " + path);
    Checkpoint ck;
    ck.config_hash = read_pod<std::uint64_t>(in);
    ck.config_json = read_str(in);
    auto ni = read_pod<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < ni; ++i) {
        std::string k = read_str(in);
        ck.ints[k] = read_pod<std::int64_t>(in);
    }
    auto ns = read_pod<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < ns; ++i) {
        std::string k = read_str(in);
        ck.strings[k] = read_str(in);
    }
    auto na = read_pod<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < na; ++i) {
        std::string k = read_str(in);
        int b = read_pod<std::int32_t>(in);
        int t = read_pod<std::int32_t>(in);
        int c = read_pod<std::int32_t>(in);
        Tensor v(b, t, c);
        in.read(reinterpret_cast<char*>(v.data.data()),
                std::streamsize(v.data.size() * sizeof(double)));
        if (!in) throw DataError("truncated checkpoint: " + path);
        ck.arrays[k] = std::move(v);
    }
    return ck;
}

const Tensor& Checkpoint::array(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw ResumeError("checkpoint missing array: " + name);
    return it->second;
}

std::int64_t Checkpoint::get_int(const std::string& name) const {
    auto it = ints.find(name);
    if (it == ints.end()) throw ResumeError("checkpoint missing counter: " + name);
    return it->second;
}

const std::string& Checkpoint::get_string(const std::string& name) const {
    auto it = strings.find(name);
    if (it == strings.end()) throw ResumeError("checkpoint missing entry: " + name);
    return it->second;
}

void checkpoint_put_params(Checkpoint& ck, const std::string& prefix, const ParamStore& store) {
    for (const Param* p : store.all()) {
        ck.arrays[prefix + p->name + ".value"] = p->value;
        ck.arrays[prefix + p->name + ".m"] = p->m;
        ck.arrays[prefix + p->name + ".v"] = p->v;
    }
}

void checkpoint_get_params(const Checkpoint& ck, const std::string& prefix, ParamStore& store) {
    for (Param* p : store.all()) {
        const Tensor& val = ck.array(prefix + p->name + ".value");
        const Tensor& m = ck.array(prefix + p->name + ".m");
        const Tensor& v = ck.array(prefix + p->name + ".v");
        if (!val.same_shape(p->value) || !m.same_shape(p->m) || !v.same_shape(p->v))
            throw ResumeError("checkpoint shape mismatch: " + prefix + p->name);
        p->value = val;
        p->m = m;
        p->v = v;
    }
}

void checkpoint_put_norm(Checkpoint& ck, const NormStats& stats) {
    ck.arrays["norm.action_min"] = Tensor::from_vector(stats.action_min);
    ck.arrays["norm.action_max"] = Tensor::from_vector(stats.action_max);
    ck.arrays["norm.obs_mean"] = Tensor::from_vector(stats.obs_mean);
    ck.arrays["norm.obs_std"] = Tensor::from_vector(stats.obs_std);
}

NormStats checkpoint_get_norm(const Checkpoint& ck) {
    NormStats s;
    s.action_min = ck.array("norm.action_min").data;
    s.action_max = ck.array("norm.action_max").data;
    s.obs_mean = ck.array("norm.obs_mean").data;
    s.obs_std = ck.array("norm.obs_std").data;
    return s;
}

std::string encode_partitions(const std::vector<std::vector<int>>& k1,
                              const std::vector<std::vector<int>>& k2) {
    std::ostringstream os;
    for (std::size_t b = 0; b < k1.size(); ++b) {
        if (b) os << ';';
        for (std::size_t i = 0; i < k1[b].size(); ++i) os << (i ? "," : "") << k1[b][i];
        os << '|';
        for (std::size_t i = 0; i < k2[b].size(); ++i) os << (i ? "," : "") << k2[b][i];
    }
    return os.str();
}

void decode_partitions(const std::string& s, std::vector<std::vector<int>>& k1,
                       std::vector<std::vector<int>>& k2) {
    k1.clear();
    k2.clear();
    std::istringstream blocks(s);
    std::string block;
    while (std::getline(blocks, block, ';')) {
        auto bar = block.find('|');
        if (bar == std::string::npos) throw DataError("bad partition encoding");
        auto parse = [](const std::string& part) {
            std::vector<int> out;
            std::istringstream is(part);
            std::string tok;
            while (std::getline(is, tok, ',')) {
                if (!tok.empty()) out.push_back(std::stoi(tok));
            }
            return out;
        };
        k1.push_back(parse(block.substr(0, bar)));
        k2.push_back(parse(block.substr(bar + 1)));
    }
}

}  // namespace flowrl
