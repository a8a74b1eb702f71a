#include "worldgen.h"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "xworld/eval.hpp"
#include "xworld/protocol.hpp"

using namespace xworld;

namespace {

thread_local std::string g_last_error = "no error";

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

// Maps the C++ error taxonomy onto ABI status codes.
template <typename Fn>
wg_status guarded(Fn&& fn) {
    try {
        fn();
        return WG_OK;
    } catch (const ShapeError& e) {
        g_last_error = e.what();
        return WG_ERR_SHAPE;
    } catch (const ConfigError& e) {
        g_last_error = e.what();
        return WG_ERR_CONFIG;
    } catch (const VocabularyError& e) {
        g_last_error = e.what();
        return WG_ERR_VOCABULARY;
    } catch (const CacheError& e) {
        g_last_error = e.what();
        return WG_ERR_CACHE;
    } catch (const StateError& e) {
        g_last_error = e.what();
        return WG_ERR_STATE;
    } catch (const RequestError& e) {
        g_last_error = e.what();
        return WG_ERR_REQUEST;
    } catch (const InvariantError& e) {
        g_last_error = e.what();
        return WG_ERR_INVARIANT;
    } catch (const DivergenceError& e) {
        g_last_error = e.what();
        return WG_ERR_DIVERGENCE;
    } catch (const std::ios_base::failure& e) {
        g_last_error = e.what();
        return WG_ERR_IO;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return WG_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown failure";
        return WG_ERR_INTERNAL;
    }
}

wg_status bad_arg(const char* what) {
    g_last_error = what;
    return WG_ERR_CONFIG;
}

}  // namespace

struct wg_config {
    ExperimentConfig cfg;
};

struct wg_service {
    WorldModel<float> model;
    RolloutService<float> service;
    wg_service(const ExperimentConfig& c, const std::string& ckpt, const std::string& out_dir)
        : model(c.model, c.stage1.seed), service(model, out_dir, c.rollout) {
        model.load(ckpt);
    }
};

extern "C" {

const char* wg_last_error(void) { return g_last_error.c_str(); }

const char* wg_version(void) { return "0.1.0"; }

void wg_string_free(char* s) { std::free(s); }

wg_status wg_config_default(wg_config** out) {
    if (!out) return bad_arg("wg_config_default: out is NULL");
    return guarded([&] {
        auto* c = new wg_config{};
        c->cfg.finalize();
        *out = c;
    });
}

wg_status wg_config_load(const char* path, wg_config** out) {
    if (!path || !out) return bad_arg("wg_config_load: NULL argument");
    return guarded([&] { *out = new wg_config{ExperimentConfig::load(path)}; });
}

wg_status wg_config_save(const wg_config* cfg, const char* path) {
    if (!cfg || !path) return bad_arg("wg_config_save: NULL argument");
    return guarded([&] { cfg->cfg.save(path); });
}

wg_status wg_config_hash(const wg_config* cfg, char** out) {
    if (!cfg || !out) return bad_arg("wg_config_hash: NULL argument");
    return guarded([&] { *out = dup_string(cfg->cfg.hash()); });
}

void wg_config_free(wg_config* cfg) { delete cfg; }

wg_status wg_gen_data(const wg_config* cfg, int n, uint64_t seed0, const char* out_dir) {
    if (!cfg || !out_dir) return bad_arg("wg_gen_data: NULL argument");
    return guarded([&] {
        const int count = n >= 0 ? n : cfg->cfg.data.episodes;
        const uint64_t s0 = seed0 != UINT64_MAX ? seed0 : cfg->cfg.data.seed0;
        export_dataset(cfg->cfg.model.world, count, s0, out_dir);
        cfg->cfg.write_resolved(out_dir);
    });
}

wg_status wg_train_codec(const wg_config* cfg, const char* out_dir) {
    if (!cfg || !out_dir) return bad_arg("wg_train_codec: NULL argument");
    return guarded([&] {
        const ExperimentConfig& c = cfg->cfg;
        if (c.model.codec.kind != CodecConfig::Kind::Learned)
            throw ConfigError("codec training requires codec.kind = learned");
        LearnedCodec<float> codec(c.model.codec, c.codec_train.seed ^ 0x10dec);
        CodecTrainConfig tc = c.codec_train;
        tc.out_dir = out_dir;
        train_codec(codec, c.model.world, c.train_seeds(), tc);
        c.write_resolved(out_dir);
    });
}

wg_status wg_train_stage1(const wg_config* cfg, const char* codec_ckpt, const char* out_dir) {
    if (!cfg || !out_dir) return bad_arg("wg_train_stage1: NULL argument");
    return guarded([&] {
        const ExperimentConfig& c = cfg->cfg;
        WorldModel<float> model(c.model, c.stage1.seed);
        if (codec_ckpt) load_codec_checkpoint(model, codec_ckpt);
        Stage1Config sc = c.stage1;
        sc.out_dir = out_dir;
        train_stage1(model, c.train_seeds(), sc);
        c.write_resolved(out_dir);
    });
}

wg_status wg_distill_stage2(const wg_config* cfg, const char* teacher_ckpt,
                            const char* out_dir) {
    if (!cfg || !teacher_ckpt || !out_dir) return bad_arg("wg_distill_stage2: NULL argument");
    return guarded([&] {
        const ExperimentConfig& c = cfg->cfg;
        WorldModel<float> teacher(c.model, c.stage1.seed);
        teacher.load(teacher_ckpt);
        WorldModel<float> student(c.model, c.stage2.seed ^ 0x57);
        WorldModel<float> critic(c.model, c.stage2.seed ^ 0xc1);
        Stage2Config sc = c.stage2;
        sc.out_dir = out_dir;
        distill_stage2(teacher, student, critic, c.train_seeds(), sc);
        c.write_resolved(out_dir);
    });
}

wg_status wg_train_probe(const wg_config* cfg, const char* out_path) {
    if (!cfg || !out_path) return bad_arg("wg_train_probe: NULL argument");
    return guarded([&] {
        MotionProbe probe = train_probe(cfg->cfg.model.world, cfg->cfg.eval.probe);
        std::ofstream f(out_path);
        if (!f) throw ConfigError(std::string("cannot write probe file: ") + out_path);
        f << probe.to_json().dump(2) << "\n";
    });
}

wg_status wg_run_eval(const wg_config* cfg, const char* ckpt, const char* mode,
                      const char* probe_path, const char* out_dir) {
    if (!cfg || !ckpt || !mode || !out_dir) return bad_arg("wg_run_eval: NULL argument");
    return guarded([&] {
        const ExperimentConfig& c = cfg->cfg;
        if (probe_path) {
            std::ifstream f(probe_path);
            if (!f) throw ConfigError(std::string("cannot open probe file: ") + probe_path);
            nlohmann::json j;
            f >> j;
            MotionProbe probe = MotionProbe::from_json(j);
            EvalContext ctx = make_eval_context(c, &probe);
            run_eval(c, ckpt, mode, out_dir, &ctx);
        } else {
            run_eval(c, ckpt, mode, out_dir);
        }
    });
}

wg_status wg_report_summary(const char* report_json_path, char** out) {
    if (!report_json_path || !out) return bad_arg("wg_report_summary: NULL argument");
    return guarded([&] {
        std::ifstream f(report_json_path);
        if (!f)
            throw ConfigError(std::string("cannot open report: ") + report_json_path);
        nlohmann::json j;
        f >> j;
        std::string why;
        if (!validate_report(j, eval_report_schema(), &why))
            throw ConfigError("report does not match the published schema: " + why);
        *out = dup_string(report_summary(j));
    });
}

wg_status wg_service_open(const wg_config* cfg, const char* ckpt, const char* out_dir,
                          wg_service** out) {
    if (!cfg || !ckpt || !out_dir || !out) return bad_arg("wg_service_open: NULL argument");
    return guarded([&] { *out = new wg_service(cfg->cfg, ckpt, out_dir); });
}

wg_status wg_service_handle(wg_service* svc, const char* request_line, char** response) {
    if (!svc || !request_line || !response)
        return bad_arg("wg_service_handle: NULL argument");
    return guarded([&] { *response = dup_string(svc->service.handle_line(request_line)); });
}

void wg_service_free(wg_service* svc) { delete svc; }

}  // extern "C"
