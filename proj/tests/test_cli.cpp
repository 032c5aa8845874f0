// End-to-end checks of the command-line front end via subprocesses.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    std::string cmd = std::string(FLOWRL_BIN) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("flowrl_cli_" + std::to_string(std::rand()) + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

std::string grab(const std::string& text, const std::string& key) {
    auto pos = text.find(key + "=");
    REQUIRE(pos != std::string::npos);
    pos += key.size() + 1;
    auto end = text.find_first_of(" \n", pos);
    return text.substr(pos, end - pos);
}

void write_tiny_config(const std::string& path, const std::string& data_dir,
                       const std::string& out_dir) {
    std::ofstream f(path);
    f << R"({"env":"pointmass","dataset_dir":")" << data_dir << R"(","out_dir":")" << out_dir
      << R"(","eval_episodes":4,"stage_warmup":false,"stage_offline":false,"stage_online":false,
          "train":{"chunk_len":3,"prefix_len":1,"flow_depth":2,"hidden":8,"heads":2,
                   "critic_hidden":8,"critic_heads":2,"critic_layers":1,"num_bins":11,
                   "batch_il":8,"steps_il":10,"steps_warmup":5,"steps_offline":5,
                   "online_iters":1,"online_episodes_per_iter":1,"steps_online_per_iter":2,
                   "n_pi":4,"n_pi_rl":2,"seed":3}})";
}

}  // namespace

TEST_CASE("gen-data is deterministic in the manifest hash") {
    TempDir tmp;
    auto r1 = run_cli("gen-data --env pointmass --n 8 --fail-frac 0.25 --seed 4 --out " +
                      (tmp / "c1"));
    auto r2 = run_cli("gen-data --env pointmass --n 8 --fail-frac 0.25 --seed 4 --out " +
                      (tmp / "c2"));
    REQUIRE(r1.exit_code == 0);
    REQUIRE(r2.exit_code == 0);
    CHECK(grab(r1.output, "manifest_hash") == grab(r2.output, "manifest_hash"));
    CHECK(grab(r1.output, "episodes") == "8");
    CHECK(grab(r1.output, "successful") == "6");

    auto r3 = run_cli("gen-data --env pointmass --n 8 --fail-frac 0.25 --seed 5 --out " +
                      (tmp / "c3"));
    REQUIRE(r3.exit_code == 0);
    CHECK(grab(r3.output, "manifest_hash") != grab(r1.output, "manifest_hash"));
}

TEST_CASE("gen-data rejects bad arguments") {
    TempDir tmp;
    CHECK(run_cli("gen-data --env pointmass --n 0 --out " + (tmp / "c")).exit_code != 0);
    CHECK(run_cli("gen-data --env nosuch --n 4 --out " + (tmp / "c")).exit_code != 0);
    // refuses to clobber without --overwrite
    auto r1 = run_cli("gen-data --env pointmass --n 4 --seed 1 --out " + (tmp / "c4"));
    REQUIRE(r1.exit_code == 0);
    CHECK(run_cli("gen-data --env pointmass --n 4 --seed 1 --out " + (tmp / "c4")).exit_code != 0);
    CHECK(run_cli("gen-data --env pointmass --n 4 --seed 1 --overwrite --out " + (tmp / "c4"))
              .exit_code == 0);
}

TEST_CASE("train runs the enabled stage and reruns are no-ops") {
    TempDir tmp;
    REQUIRE(run_cli("gen-data --env pointmass --n 6 --fail-frac 0.0 --seed 2 --out " +
                    (tmp / "data"))
                .exit_code == 0);
    write_tiny_config(tmp / "cfg.json", tmp / "data", tmp / "run");

    auto r = run_cli("train --config " + (tmp / "cfg.json"));
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("\"stage\":\"il\"") != std::string::npos);
    CHECK(fs::exists(fs::path(tmp / "run") / "il.ck"));

    auto r2 = run_cli("train --config " + (tmp / "cfg.json"));
    REQUIRE(r2.exit_code == 0);
    CHECK(r2.output.find("nothing to do") != std::string::npos);
}

TEST_CASE("train --stage with a missing prerequisite exits 3") {
    TempDir tmp;
    REQUIRE(run_cli("gen-data --env pointmass --n 6 --fail-frac 0.0 --seed 2 --out " +
                    (tmp / "data"))
                .exit_code == 0);
    write_tiny_config(tmp / "cfg.json", tmp / "data", tmp / "run");
    auto r = run_cli("train --config " + (tmp / "cfg.json") + " --stage warmup");
    CHECK(r.exit_code == 3);
}

TEST_CASE("eval exits 2 on a missing checkpoint and works on a real one") {
    TempDir tmp;
    REQUIRE(run_cli("gen-data --env pointmass --n 6 --fail-frac 0.0 --seed 2 --out " +
                    (tmp / "data"))
                .exit_code == 0);
    write_tiny_config(tmp / "cfg.json", tmp / "data", tmp / "run");
    auto missing = run_cli("eval --config " + (tmp / "cfg.json") + " --checkpoint " +
                           (tmp / "run") + "/nope.ck --episodes 2");
    CHECK(missing.exit_code == 2);

    REQUIRE(run_cli("train --config " + (tmp / "cfg.json")).exit_code == 0);
    auto r = run_cli("eval --config " + (tmp / "cfg.json") + " --checkpoint " + (tmp / "run") +
                     "/il.ck --episodes 2 --n 1");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("\"success_rate\"") != std::string::npos);
    CHECK(r.output.find("\"use_critic\":false") != std::string::npos);
}

TEST_CASE("eval rejects a corrupt checkpoint") {
    TempDir tmp;
    write_tiny_config(tmp / "cfg.json", tmp / "data", tmp / "run");
    fs::create_directories(tmp / "run");
    std::ofstream(tmp / "run" + std::string("/bad.ck")) << "not a checkpoint";
    auto r = run_cli("eval --config " + (tmp / "cfg.json") + " --checkpoint " + (tmp / "run") +
                     "/bad.ck --episodes 1");
    CHECK(r.exit_code == 2);
}

TEST_CASE("check --filter runs a single suite") {
    auto r = run_cli("check --filter hl-gauss");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("[PASS] hl-gauss") != std::string::npos);
    CHECK(r.output.find("round-trip") == std::string::npos);

    CHECK(run_cli("check --filter no-such-suite").exit_code == 1);
}
