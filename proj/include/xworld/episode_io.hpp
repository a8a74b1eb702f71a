#pragma once

#include <string>

#include "xworld/synthworld.hpp"

#include "json.hpp"

namespace xworld {

// Episode container:
//   magic "XWEP" | u32 version | u64 header_len | JSON header | raw f32 LE frames
// The header carries everything except pixels, so save(load(x)) is
// byte-identical.
void save_episode(const Episode& ep, const std::string& path);
Episode load_episode(const std::string& path);

nlohmann::json episode_header_json(const Episode& ep);

struct DatasetManifest {
    std::string config_hash;
    int n = 0;
    std::vector<uint64_t> seeds;
    std::vector<std::string> files;
    std::vector<std::string> families;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

// Writes n episodes (seeds seed0..seed0+n-1) plus manifest.json into out_dir.
DatasetManifest export_dataset(const WorldConfig& cfg, int n, uint64_t seed0,
                               const std::string& out_dir);

DatasetManifest load_manifest(const std::string& dir);

}  // namespace xworld
