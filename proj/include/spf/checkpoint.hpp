#pragma once

// Single-file container for named float32 arrays plus a JSON metadata record.
//
// Layout: "SPFCKPT1" | u64 header length | header JSON | float32 payload.
// The header lists every array as {name, group, shape, offset} where offset
// counts floats into the payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace spf {

struct NamedArray {
    std::string name;
    std::string group;
    std::vector<std::int64_t> shape;
    std::vector<float> data;
};

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

NamedArray to_named_array(const std::string& name, const std::string& group, const torch::Tensor& t);
torch::Tensor to_tensor(const NamedArray& a);

/// Copies every named parameter and buffer of `module` into `ckpt` under `prefix`.
void append_module(Checkpoint& ckpt, const torch::nn::Module& module, const std::string& prefix,
                   const std::function<std::string(const std::string&)>& group_of);

/// Loads arrays stored under `prefix` into the module's parameters and buffers.
/// Throws StateError on a missing name or shape mismatch.
void load_module(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix);

/// SHA-256 over parameter names, shapes and raw bytes, in registration order.
std::string parameter_digest(const torch::nn::Module& module);

}  // namespace spf
