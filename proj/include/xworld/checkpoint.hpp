#pragma once

#include <map>
#include <string>

#include "xworld/tensor.hpp"

#include "json.hpp"

namespace xworld {

// Versioned named-tensor container shared by the codec and the denoiser:
//   magic "XWCK" | u32 version | u64 header_len | JSON header | raw f32 LE
// The JSON header carries tensor names/shapes/offsets plus free-form "meta"
// (config hash, causal flag, ...).
struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    nlohmann::json meta;
    std::map<std::string, Tensor<float>> tensors;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// FNV-1a over bytes, used for config/checkpoint identity in reports.
uint64_t fnv1a(const void* data, size_t len);
std::string hash_hex(const std::string& bytes);
std::string file_hash_hex(const std::string& path);

}  // namespace xworld
