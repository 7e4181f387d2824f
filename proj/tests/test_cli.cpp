#include <doctest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "speclab/runconfig.hpp"

using namespace speclab;
namespace fs = std::filesystem;

namespace {

#ifdef SPECLAB_CLI_PATH
const char* kCli = SPECLAB_CLI_PATH;
#else
const char* kCli = "./speclab";
#endif

int run_cli(const std::string& args) {
    const std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct CliDirs {
    fs::path root, weights, out;
    std::string cfg_path;
};

CliDirs make_dirs(const std::string& name, uint64_t seed) {
    CliDirs d;
    d.root = fs::temp_directory_path() / name;
    fs::remove_all(d.root);
    d.weights = d.root / "weights";
    d.out = d.root / "out";
    fs::create_directories(d.root);
    RunConfig cfg;
    cfg.model.vocab_size = 128;
    cfg.model.hidden_size = 16;
    cfg.model.num_layers = 1;
    cfg.model.num_heads = 2;
    cfg.model.intermediate_size = 32;
    cfg.model.max_seq_len = 128;
    cfg.model.head_groups = 8;
    cfg.model.router_top_n = 2;
    cfg.train.steps = 2;
    cfg.train.batch = 4;
    cfg.train.seq = 16;
    cfg.train.epochs = 1;
    cfg.train.w_csra = 0.15;
    cfg.engine.gamma = 3;
    cfg.engine.max_new_tokens = 12;
    cfg.corpus_len = 3000;
    cfg.weights_dir = d.weights.string();
    cfg.out_dir = d.out.string();
    cfg.seed = seed;
    cfg.propagate_seed();
    d.cfg_path = (d.root / "run.cfg").string();
    cfg.save(d.cfg_path);
    return d;
}

}  // namespace

TEST_CASE("run config round-trips through its file form") {
    RunConfig cfg;
    cfg.model.vocab_size = 128;
    cfg.train.w_csra = 0.2;
    cfg.engine.mode = DraftMode::Tree;
    cfg.seed = 99;
    cfg.propagate_seed();
    const std::string path = (fs::temp_directory_path() / "speclab_cfg_roundtrip.cfg").string();
    cfg.save(path);
    RunConfig back = RunConfig::from_file(path);
    CHECK(back.model.vocab_size == 128);
    CHECK(back.train.w_csra == 0.2);
    CHECK(back.engine.mode == DraftMode::Tree);
    CHECK(back.seed == 99);
    CHECK(back.train.seed == 99);
    CHECK(back.to_string() == cfg.to_string());

    CHECK_THROWS_AS(cfg.set("no_such_key", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.set("batch", "abc"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_file("/nonexistent/cfg"), ConfigError);
}

TEST_CASE("cli pipeline: train, generate, bench, diagnose") {
    CliDirs d = make_dirs("speclab_cli_pipe", 11);

    CHECK(run_cli("train-target --config " + d.cfg_path) == 0);
    CHECK(fs::exists(d.weights / "target.bin"));
    CHECK(fs::exists(d.out / "train_target_log.csv"));

    CHECK(run_cli("train-draft --method csra --config " + d.cfg_path) == 0);
    CHECK(fs::exists(d.weights / "draft.bin"));
    {
        std::ifstream log((d.out / "train_draft_log.csv").string());
        std::string header;
        std::getline(log, header);
        CHECK(header == "epoch,step,loss_total,loss_reg,loss_cls,loss_csra");
    }

    CHECK(run_cli("train-router --config " + d.cfg_path) == 0);
    CHECK(fs::exists(d.weights / "router.bin"));

    CHECK(run_cli("generate --config " + d.cfg_path + " --prompt \"hello there \"") == 0);
    CHECK(fs::exists(d.out / "trace.jsonl"));
    {
        std::ifstream trace((d.out / "trace.jsonl").string());
        std::string line;
        REQUIRE(std::getline(trace, line));
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("cycle"));
        CHECK(j.contains("drafted"));
        CHECK(j.contains("accepted"));
        CHECK(j.contains("emitted_tokens"));
        CHECK(j.contains("active_groups"));
        CHECK(j.contains("draft_ms"));
        CHECK(j.contains("verify_ms"));
    }

    CHECK(run_cli("bench --config " + d.cfg_path + " --n-prompts 2") == 0);
    {
        auto j = nlohmann::json::parse(file_bytes((d.out / "metrics.json").string()));
        CHECK(j.contains("tau"));
        CHECK(j.contains("alpha"));
        CHECK(j.contains("speedup_measured"));
        CHECK(j.contains("activated_fraction"));
        CHECK(j["tau"].get<double>() >= 1.0);
    }
    CHECK(fs::exists(d.out / "metrics_alpha.csv"));
    CHECK(fs::exists(d.out / "metrics_run.csv"));

    CHECK(run_cli("diag-infonce --config " + d.cfg_path) == 0);
    CHECK(fs::exists(d.out / "infonce.csv"));

    // explicit prompt file
    {
        std::ofstream pf((d.root / "prompts.txt").string());
        pf << "first prompt line\nsecond prompt line\n";
    }
    CHECK(run_cli("bench --config " + d.cfg_path + " --prompt-file " +
                  (d.root / "prompts.txt").string()) == 0);

    // router-enabled generation consumes router.bin
    CHECK(run_cli("generate --config " + d.cfg_path + " --use-router true --prompt \"abc \"") == 0);
}

TEST_CASE("cli exit codes: config, dependency, and format errors") {
    CliDirs d = make_dirs("speclab_cli_errs", 13);

    // config: csra with steps=1 (single-step caveat)
    CHECK(run_cli("train-draft --method csra --steps 1 --config " + d.cfg_path) == 2);

    // dependency: draft before target
    CHECK(run_cli("train-draft --method eagle --config " + d.cfg_path) == 3);

    // config: unknown method and bad flag values
    CHECK(run_cli("train-draft --method nope --config " + d.cfg_path) == 2);
    CHECK(run_cli("train-target --config " + d.cfg_path + " --seed notanumber") == 2);

    // format: corrupt weight file
    CHECK(run_cli("train-target --config " + d.cfg_path) == 0);
    {
        std::ofstream bad((d.weights / "draft.bin").string(), std::ios::binary);
        bad << "garbage";
    }
    CHECK(run_cli("generate --config " + d.cfg_path + " --prompt \"xy \"") == 4);
}

TEST_CASE("cli generate with max_new_tokens=0 is a successful no-op") {
    CliDirs d = make_dirs("speclab_cli_noop", 17);
    CHECK(run_cli("train-target --config " + d.cfg_path) == 0);
    CHECK(run_cli("train-draft --method hass --config " + d.cfg_path) == 0);
    CHECK(run_cli("generate --config " + d.cfg_path + " --max-new-tokens 0 --prompt \"ab \"") == 0);
    CHECK(file_bytes((d.out / "generation.txt").string()).empty());
}

TEST_CASE("cli reruns with the same config and seed are byte-identical") {
    CliDirs a = make_dirs("speclab_cli_det_a", 23);
    CliDirs b = make_dirs("speclab_cli_det_b", 23);
    CHECK(run_cli("train-target --config " + a.cfg_path) == 0);
    CHECK(run_cli("train-target --config " + b.cfg_path) == 0);
    CHECK(file_bytes((a.weights / "target.bin").string()) ==
          file_bytes((b.weights / "target.bin").string()));
    CHECK(run_cli("train-draft --method eagle --config " + a.cfg_path) == 0);
    CHECK(run_cli("train-draft --method eagle --config " + b.cfg_path) == 0);
    CHECK(file_bytes((a.weights / "draft.bin").string()) ==
          file_bytes((b.weights / "draft.bin").string()));
}
