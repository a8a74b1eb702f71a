#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "worldgen.h"

namespace {

std::string tmp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

// Smallest config the pipeline accepts: 1 view, 5 frames (3 latent frames =
// one chunk), 16x16 pixels, a 2-episode dataset, 2 optimizer steps.
std::string write_tiny_config(const std::string& dir) {
    nlohmann::json j = {
        {"world",
         {{"views", 1}, {"frames", 5}, {"image_h", 16}, {"image_w", 16}, {"max_agents", 1}}},
        {"backbone",
         {{"d_model", 32}, {"heads", 2}, {"blocks", 1}, {"d_ff", 32}, {"chunk_size", 3},
          {"d_cond", 32}}},
        {"data", {{"episodes", 2}, {"seed0", 100000}}},
        {"stage1", {{"steps", 2}, {"log_every", 1}, {"ckpt_every", 100}}},
        {"rollout", {{"capacity", 3}, {"denoise_steps", 2}}},
    };
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/config.json";
    std::ofstream f(path);
    f << j.dump(2) << "\n";
    return path;
}

std::string take(char* s) {
    REQUIRE(s != nullptr);
    std::string out = s;
    wg_string_free(s);
    return out;
}

}  // namespace

TEST_CASE("c api: version and error strings are always available") {
    CHECK(wg_version() != nullptr);
    CHECK(wg_last_error() != nullptr);
}

TEST_CASE("c api: NULL arguments map to config errors, not crashes") {
    CHECK(wg_config_default(nullptr) == WG_ERR_CONFIG);
    CHECK(wg_config_load(nullptr, nullptr) == WG_ERR_CONFIG);
    CHECK(wg_config_save(nullptr, "x") == WG_ERR_CONFIG);
    CHECK(wg_config_hash(nullptr, nullptr) == WG_ERR_CONFIG);
    CHECK(wg_gen_data(nullptr, 1, 0, "x") == WG_ERR_CONFIG);
    CHECK(wg_train_stage1(nullptr, nullptr, "x") == WG_ERR_CONFIG);
    CHECK(wg_run_eval(nullptr, "c", "stage1", nullptr, "x") == WG_ERR_CONFIG);
    CHECK(wg_report_summary(nullptr, nullptr) == WG_ERR_CONFIG);
    CHECK(wg_service_open(nullptr, "c", "x", nullptr) == WG_ERR_CONFIG);
    CHECK(wg_service_handle(nullptr, "{}", nullptr) == WG_ERR_CONFIG);
    CHECK(std::strlen(wg_last_error()) > 0);
    wg_config_free(nullptr);   // no-ops
    wg_service_free(nullptr);
    wg_string_free(nullptr);
}

TEST_CASE("c api: config default/load/save/hash round trip") {
    wg_config* def = nullptr;
    REQUIRE(wg_config_default(&def) == WG_OK);
    char* h1 = nullptr;
    REQUIRE(wg_config_hash(def, &h1) == WG_OK);
    const std::string hash_default = take(h1);
    CHECK(!hash_default.empty());

    const std::string dir = tmp_dir("xw_capi_cfg");
    std::filesystem::create_directories(dir);
    REQUIRE(wg_config_save(def, (dir + "/saved.json").c_str()) == WG_OK);

    wg_config* loaded = nullptr;
    REQUIRE(wg_config_load((dir + "/saved.json").c_str(), &loaded) == WG_OK);
    char* h2 = nullptr;
    REQUIRE(wg_config_hash(loaded, &h2) == WG_OK);
    CHECK(take(h2) == hash_default);

    wg_config_free(def);
    wg_config_free(loaded);
    std::filesystem::remove_all(dir);
}

TEST_CASE("c api: bad config files report config errors with a message") {
    wg_config* c = nullptr;
    CHECK(wg_config_load("/nonexistent/path/config.json", &c) == WG_ERR_CONFIG);
    CHECK(std::strlen(wg_last_error()) > 0);

    const std::string dir = tmp_dir("xw_capi_badcfg");
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir + "/bad.json");
        f << "{broken";
    }
    CHECK(wg_config_load((dir + "/bad.json").c_str(), &c) == WG_ERR_CONFIG);
    {
        // structurally valid JSON, semantically invalid (chunk misalignment)
        std::ofstream f(dir + "/misaligned.json");
        f << R"({"world": {"frames": 17}, "backbone": {"chunk_size": 4}})";
    }
    CHECK(wg_config_load((dir + "/misaligned.json").c_str(), &c) == WG_ERR_CONFIG);
    std::filesystem::remove_all(dir);
}

TEST_CASE("c api: report summary validates against the schema") {
    const std::string dir = tmp_dir("xw_capi_report");
    std::filesystem::create_directories(dir);
    {
        nlohmann::json rep = {{"mode", "stage1"},
                              {"config_hash", "abc"},
                              {"checkpoint_hash", "def"},
                              {"metrics", {{"velocity_mae", 0.2}}},
                              {"per_episode", nlohmann::json::array()},
                              {"series", nlohmann::json::object()}};
        std::ofstream f(dir + "/report.json");
        f << rep.dump(2) << "\n";
    }
    char* sum = nullptr;
    REQUIRE(wg_report_summary((dir + "/report.json").c_str(), &sum) == WG_OK);
    const std::string s = take(sum);
    CHECK(s.find("stage1") != std::string::npos);
    CHECK(s.find("velocity_mae") != std::string::npos);

    {
        std::ofstream f(dir + "/invalid.json");
        f << R"({"mode": "stage1"})";
    }
    CHECK(wg_report_summary((dir + "/invalid.json").c_str(), &sum) == WG_ERR_CONFIG);
    CHECK(wg_report_summary((dir + "/missing.json").c_str(), &sum) == WG_ERR_CONFIG);
    std::filesystem::remove_all(dir);
}

TEST_CASE("c api: end-to-end pipeline on a tiny config") {
    const std::string root = tmp_dir("xw_capi_pipeline");
    const std::string cfg_path = write_tiny_config(root);
    wg_config* cfg = nullptr;
    REQUIRE(wg_config_load(cfg_path.c_str(), &cfg) == WG_OK);

    // data export honors config defaults for n/seed
    const std::string data_dir = root + "/data";
    REQUIRE(wg_gen_data(cfg, -1, UINT64_MAX, data_dir.c_str()) == WG_OK);
    CHECK(std::filesystem::exists(data_dir + "/manifest.json"));
    CHECK(std::filesystem::exists(data_dir + "/episode_000000.xwep"));
    CHECK(std::filesystem::exists(data_dir + "/episode_000001.xwep"));
    CHECK(std::filesystem::exists(data_dir + "/resolved_config.json"));
    CHECK_FALSE(std::filesystem::exists(data_dir + "/episode_000002.xwep"));

    // codec training on a patchify-baseline config is a config error
    CHECK(wg_train_codec(cfg, (root + "/codec").c_str()) == WG_ERR_CONFIG);

    // a short optimization run produces a loadable checkpoint
    const std::string train_dir = root + "/stage1";
    REQUIRE(wg_train_stage1(cfg, nullptr, train_dir.c_str()) == WG_OK);
    const std::string ckpt = train_dir + "/stage1_final.xwck";
    CHECK(std::filesystem::exists(ckpt));
    CHECK(std::filesystem::exists(train_dir + "/stage1_loss.csv"));

    wg_service* svc = nullptr;
    REQUIRE(wg_service_open(cfg, ckpt.c_str(), (root + "/serve").c_str(), &svc) == WG_OK);

    auto handle = [&](const std::string& req) {
        char* res = nullptr;
        REQUIRE(wg_service_handle(svc, req.c_str(), &res) == WG_OK);
        return nlohmann::json::parse(take(res));
    };

    // malformed requests come back as structured error objects, status OK
    CHECK(handle("{broken").contains("error"));
    CHECK(handle(R"({"op":"nope"})").at("error").at("type") == "request-error");
    CHECK(handle(R"({"op":"step","session":"ghost","actions":"episode"})")
              .at("error")
              .at("type") == "state-error");

    nlohmann::json opened = handle(R"({"op":"open","episode_ref":")" + data_dir +
                                   R"(/episode_000000.xwep","history_frames":0,"seed":7})");
    REQUIRE(opened.contains("session"));
    CHECK(opened.at("next_latent_frame") == 0);
    const std::string sid = opened.at("session");

    // replay the pinned episode's own action track (one chunk = whole clip)
    nlohmann::json step1 = handle(R"({"op":"step","session":")" + sid +
                                  R"(","actions":"episode"})");
    REQUIRE(step1.contains("frames_ref"));
    CHECK(step1.at("chunk_index") == 0);
    CHECK(std::filesystem::exists(step1.at("frames_ref").get<std::string>()));

    // fork inherits the action track; the 5-frame track is now exhausted
    nlohmann::json forked = handle(R"({"op":"fork","session":")" + sid + R"("})");
    REQUIRE(forked.contains("session"));
    const std::string fid = forked.at("session");
    nlohmann::json step2 = handle(R"({"op":"step","session":")" + fid +
                                  R"(","actions":"episode"})");
    CHECK(step2.at("error").at("type") == "request-error");
    // explicit mid-stream actions continue past the track (2 per latent frame)
    nlohmann::json step3 = handle(
        R"({"op":"step","session":")" + sid +
        R"(","actions":[[0.5,0.0,0.0,0.0],[0.5,0.0,0.0,0.0],[0.5,0.0,0.0,0.0],)"
        R"([0.5,0.0,0.0,0.0],[0.5,0.0,0.0,0.0],[0.5,0.0,0.0,0.0]]})");
    CHECK(step3.contains("frames_ref"));

    CHECK(handle(R"({"op":"close","session":")" + sid + R"("})").at("closed") == true);
    CHECK(handle(R"({"op":"close","session":")" + fid + R"("})").at("closed") == true);
    // a session opened on raw history only cannot replay an episode track
    nlohmann::json hist = handle(R"({"op":"open","history_ref":")" + data_dir +
                                 R"(/episode_000001.xwep","history_frames":1,"seed":8})");
    REQUIRE(hist.contains("session"));
    CHECK(handle(R"({"op":"step","session":")" + hist.at("session").get<std::string>() +
                 R"(","actions":"episode"})")
              .at("error")
              .at("type") == "state-error");

    wg_service_free(svc);

    // opening a service on a missing checkpoint fails cleanly
    CHECK(wg_service_open(cfg, (root + "/nope.xwck").c_str(), (root + "/s2").c_str(), &svc) !=
          WG_OK);
    wg_config_free(cfg);
    std::filesystem::remove_all(root);
}
