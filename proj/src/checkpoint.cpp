#include "xworld/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace xworld {

namespace {
constexpr char kMagic[4] = {'X', 'W', 'C', 'K'};
}

void Checkpoint::save(const std::string& path) const {
    nlohmann::json header;
    header["meta"] = meta;
    nlohmann::json tl = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["offset"] = offset;
        offset += uint64_t(t.numel()) * sizeof(float);
        tl.push_back(e);
    }
    header["tensors"] = tl;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(kMagic, 4);
    uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, t] : tensors)
        f.write(reinterpret_cast<const char*>(t.ptr()), std::streamsize(t.numel() * 4));
    if (!f) throw std::runtime_error("write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad checkpoint magic: " + path);
    uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kVersion) throw std::runtime_error("unsupported checkpoint version");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    uint64_t data_start = 4 + 4 + 8 + hlen;
    for (const auto& e : header["tensors"]) {
        std::string name = e["name"];
        std::vector<int64_t> shape = e["shape"].get<std::vector<int64_t>>();
        uint64_t offset = e["offset"];
        Tensor<float> t(shape);
        f.seekg(std::streamoff(data_start + offset));
        f.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(t.numel() * 4));
        if (!f) throw std::runtime_error("truncated checkpoint: " + path);
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    return ck;
}

uint64_t fnv1a(const void* data, size_t len) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hash_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes.data(), bytes.size())));
    return std::string(buf);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for hashing: " + path);
    std::string contents((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hash_hex(contents);
}

}  // namespace xworld
