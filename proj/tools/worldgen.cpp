// Command-line umbrella for the world-generation toolkit. Talks to the core
// exclusively through the public C ABI in worldgen.h.
#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"

#include "worldgen.h"

namespace {

struct ConfigHandle {
    wg_config* c = nullptr;
    ~ConfigHandle() { wg_config_free(c); }
};

struct ServiceHandle {
    wg_service* s = nullptr;
    ~ServiceHandle() { wg_service_free(s); }
};

[[noreturn]] void die(const std::string& what) {
    std::cerr << what << ": " << wg_last_error() << "\n";
    std::exit(1);
}

void check(wg_status st, const std::string& what) {
    if (st != WG_OK) die(what);
}

ConfigHandle load_config(const std::string& path) {
    ConfigHandle h;
    if (path.empty())
        check(wg_config_default(&h.c), "default config");
    else
        check(wg_config_load(path.c_str(), &h.c), "load config " + path);
    return h;
}

// One request line in, one response line out; returns false once the client
// goes away.
void pump_lines(wg_service* svc, std::istream& in, std::ostream& out) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        char* res = nullptr;
        check(wg_service_handle(svc, line.c_str(), &res), "handle request");
        out << res << "\n" << std::flush;
        wg_string_free(res);
    }
}

int serve_tcp(wg_service* svc, const std::string& listen_addr) {
    std::string host = "127.0.0.1";
    std::string port_s = listen_addr;
    auto colon = listen_addr.rfind(':');
    if (colon != std::string::npos) {
        host = listen_addr.substr(0, colon);
        port_s = listen_addr.substr(colon + 1);
    }
    const int port = std::stoi(port_s);

    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) {
        std::perror("socket");
        return 1;
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(uint16_t(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        std::cerr << "bad listen address: " << host << "\n";
        return 1;
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 ||
        ::listen(fd, 1) < 0) {
        std::perror("bind/listen");
        return 1;
    }
    std::cerr << "listening on " << host << ":" << port << "\n";
    for (;;) {
        int cfd = ::accept(fd, nullptr, nullptr);
        if (cfd < 0) continue;
        std::string buf;
        char chunk[4096];
        ssize_t n;
        while ((n = ::read(cfd, chunk, sizeof chunk)) > 0) {
            buf.append(chunk, size_t(n));
            size_t nl;
            while ((nl = buf.find('\n')) != std::string::npos) {
                std::string line = buf.substr(0, nl);
                buf.erase(0, nl + 1);
                if (line.empty()) continue;
                char* res = nullptr;
                if (wg_service_handle(svc, line.c_str(), &res) != WG_OK) {
                    std::cerr << "handle request: " << wg_last_error() << "\n";
                    continue;
                }
                std::string out = std::string(res) + "\n";
                wg_string_free(res);
                for (size_t off = 0; off < out.size();) {
                    ssize_t w = ::write(cfd, out.data() + off, out.size() - off);
                    if (w <= 0) break;
                    off += size_t(w);
                }
            }
        }
        ::close(cfd);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Procedural driving-world generation toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt, codec_ckpt, teacher, mode = "stage1";
    std::string probe_path, episode, report_path, listen_addr;
    int n = -1, chunks = 4, history_frames = 0;
    uint64_t seed = UINT64_MAX;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file (JSON)");
    };

    auto* gen = app.add_subcommand("gen-data", "export ground-truth episodes + manifest");
    add_config(gen);
    gen->add_option("--n", n, "episode count (default: config data.episodes)");
    gen->add_option("--seed", seed, "first seed (default: config data.seed0)");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* tc = app.add_subcommand("train-codec", "train the learned latent codec");
    add_config(tc);
    tc->add_option("--out", out_dir, "output directory")->required();

    auto* t1 = app.add_subcommand("train-stage1", "flow-matching pretraining");
    add_config(t1);
    t1->add_option("--codec", codec_ckpt, "learned-codec checkpoint to load");
    t1->add_option("--out", out_dir, "output directory")->required();

    auto* t2 = app.add_subcommand("distill-stage2", "few-step distillation from a teacher");
    add_config(t2);
    t2->add_option("--teacher", teacher, "stage-1 checkpoint")->required();
    t2->add_option("--out", out_dir, "output directory")->required();

    auto* tp = app.add_subcommand("train-probe", "train + gate the action probe");
    add_config(tp);
    tp->add_option("--out", out_dir, "probe JSON path")->required();

    auto* ro = app.add_subcommand("rollout", "closed-loop replay of an episode's actions");
    add_config(ro);
    ro->add_option("--ckpt", ckpt, "model checkpoint")->required();
    ro->add_option("--episode", episode, "episode file to open on")->required();
    ro->add_option("--chunks", chunks, "number of chunks to generate");
    ro->add_option("--history", history_frames,
                   "pixel frames to prime the session with (0 keeps chunk-aligned replay)");
    ro->add_option("--seed", seed, "session noise seed");
    ro->add_option("--out", out_dir, "output directory")->required();

    auto* sv = app.add_subcommand("serve", "streaming session service (NDJSON)");
    add_config(sv);
    sv->add_option("--ckpt", ckpt, "model checkpoint")->required();
    sv->add_option("--listen", listen_addr, "host:port for TCP (default: stdio)");
    sv->add_option("--out", out_dir, "directory for generated frame files")->required();

    auto* ev = app.add_subcommand("eval", "run the metric suite on a checkpoint");
    add_config(ev);
    ev->add_option("--ckpt", ckpt, "model checkpoint")->required();
    ev->add_option("--mode", mode, "stage1 or stage2")->required();
    ev->add_option("--probe", probe_path, "pretrained probe JSON (optional)");
    ev->add_option("--out", out_dir, "output directory")->required();

    auto* rp = app.add_subcommand("report", "summarize a written report.json");
    rp->add_option("report", report_path, "path to report.json")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_gen_data(cfg.c, n, seed, out_dir.c_str()), "gen-data");
    } else if (tc->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_train_codec(cfg.c, out_dir.c_str()), "train-codec");
    } else if (t1->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_train_stage1(cfg.c, codec_ckpt.empty() ? nullptr : codec_ckpt.c_str(),
                              out_dir.c_str()),
              "train-stage1");
    } else if (t2->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_distill_stage2(cfg.c, teacher.c_str(), out_dir.c_str()), "distill-stage2");
    } else if (tp->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_train_probe(cfg.c, out_dir.c_str()), "train-probe");
    } else if (ro->parsed()) {
        auto cfg = load_config(config_path);
        ServiceHandle svc;
        check(wg_service_open(cfg.c, ckpt.c_str(), out_dir.c_str(), &svc.s), "open service");
        const uint64_t s = seed == UINT64_MAX ? 0 : seed;
        auto request = [&](const std::string& req, const char* what) {
            char* res = nullptr;
            check(wg_service_handle(svc.s, req.c_str(), &res), what);
            std::string r = res;
            wg_string_free(res);
            if (r.find("\"error\"") != std::string::npos) {
                std::cerr << what << ": " << r << "\n";
                std::exit(1);
            }
            std::cout << r << "\n";
            return r;
        };
        std::string open_res = request(
            std::string("{\"op\":\"open\",\"episode_ref\":\"") + episode +
                "\",\"history_frames\":" + std::to_string(history_frames) +
                ",\"seed\":" + std::to_string(s) + "}",
            "open session");
        auto at = open_res.find("\"session\":\"");
        if (at == std::string::npos) die("open session");
        at += 11;
        std::string sid = open_res.substr(at, open_res.find('"', at) - at);
        for (int i = 0; i < chunks; ++i)
            request("{\"op\":\"step\",\"session\":\"" + sid + "\",\"actions\":\"episode\"}",
                    "step");
        request("{\"op\":\"close\",\"session\":\"" + sid + "\"}", "close");
    } else if (sv->parsed()) {
        auto cfg = load_config(config_path);
        ServiceHandle svc;
        check(wg_service_open(cfg.c, ckpt.c_str(), out_dir.c_str(), &svc.s), "open service");
        if (listen_addr.empty()) {
            pump_lines(svc.s, std::cin, std::cout);
        } else {
            return serve_tcp(svc.s, listen_addr);
        }
    } else if (ev->parsed()) {
        auto cfg = load_config(config_path);
        check(wg_run_eval(cfg.c, ckpt.c_str(), mode.c_str(),
                          probe_path.empty() ? nullptr : probe_path.c_str(), out_dir.c_str()),
              "eval");
        char* sum = nullptr;
        if (wg_report_summary((out_dir + "/report.json").c_str(), &sum) == WG_OK) {
            std::cout << sum;
            wg_string_free(sum);
        }
    } else if (rp->parsed()) {
        char* sum = nullptr;
        check(wg_report_summary(report_path.c_str(), &sum), "report");
        std::cout << sum;
        wg_string_free(sum);
    }
    return 0;
}
