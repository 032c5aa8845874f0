#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "flowrl/data.hpp"
#include "flowrl/nn.hpp"

namespace flowrl {

/// Unified checkpoint container: a config snapshot (with hash), named f64
/// arrays (parameters, optimizer moments, normalization stats, partition
/// masks), integer counters, and opaque strings (RNG state). The on-disk
/// format is little-endian and byte-stable: identical contents produce
/// identical files.
struct Checkpoint {
    std::uint64_t config_hash = 0;
    std::string config_json;
    std::map<std::string, std::int64_t> ints;
    std::map<std::string, std::string> strings;
    std::map<std::string, Tensor> arrays;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    const Tensor& array(const std::string& name) const;
    std::int64_t get_int(const std::string& name) const;
    const std::string& get_string(const std::string& name) const;
};

/// Store parameter values and AdamW moments under `prefix` + param name.
void checkpoint_put_params(Checkpoint& ck, const std::string& prefix, const ParamStore& store);
/// Restore into an existing, identically shaped store; throws ResumeError on
/// any missing or mismatched entry.
void checkpoint_get_params(const Checkpoint& ck, const std::string& prefix, ParamStore& store);

void checkpoint_put_norm(Checkpoint& ck, const NormStats& stats);
NormStats checkpoint_get_norm(const Checkpoint& ck);

std::string encode_partitions(const std::vector<std::vector<int>>& k1,
                              const std::vector<std::vector<int>>& k2);
void decode_partitions(const std::string& s, std::vector<std::vector<int>>& k1,
                       std::vector<std::vector<int>>& k2);

}  // namespace flowrl
