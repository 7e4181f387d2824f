#include <CLI11.hpp>
#include <json.hpp>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "speclab/analytics.hpp"
#include "speclab/corpus.hpp"
#include "speclab/runconfig.hpp"
#include "speclab/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace speclab;

namespace {

struct CliState {
    std::string config_path;
    RunConfig cfg;
    // optional overrides; applied after the config file is read
    std::vector<std::pair<std::string, std::string>> overrides;
};

void load_config(CliState& st) {
    if (!st.config_path.empty()) st.cfg = RunConfig::from_file(st.config_path);
    for (const auto& [k, v] : st.overrides) st.cfg.set(k, v);
    st.cfg.model.validate();
}

std::string target_path(const RunConfig& cfg) { return cfg.weights_dir + "/target.bin"; }
std::string draft_path(const RunConfig& cfg) { return cfg.weights_dir + "/draft.bin"; }
std::string router_path(const RunConfig& cfg) { return cfg.weights_dir + "/router.bin"; }

void require_file(const std::string& path, const std::string& stage) {
    if (!fs::exists(path))
        throw DependencyError("missing " + path + " — run '" + stage + "' first");
}

std::vector<int32_t> corpus_of(const RunConfig& cfg) {
    return load_corpus(cfg.corpus_path, cfg.seed, cfg.corpus_len);
}

std::string printable(std::span<const int32_t> tokens) {
    std::string out;
    for (int32_t t : tokens) {
        const auto c = static_cast<unsigned char>(t);
        if (c == '\n' || c == '\t' || (c >= 0x20 && c < 0x7f)) {
            out.push_back(static_cast<char>(c));
        } else {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

void write_trace(const std::string& path, std::span<const CycleRecord> records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write trace: " + path);
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        json j;
        j["cycle"] = i;
        j["drafted"] = r.drafted;
        j["accepted"] = r.accepted;
        j["emitted_tokens"] = r.emitted;
        j["active_groups"] = r.active_groups;
        j["draft_ms"] = r.draft_ms;
        j["verify_ms"] = r.verify_ms;
        os << j.dump() << "\n";
    }
}

json metrics_json(const Metrics& m) {
    json j;
    j["tau"] = m.tau;
    j["alpha"] = m.alpha.alpha;
    j["speedup_measured"] = m.speedup_measured;
    j["speedup_modeled"] = m.speedup_modeled;
    j["activated_fraction"] = m.activated_fraction;
    j["cycles"] = m.cycles;
    j["tokens"] = m.tokens;
    j["vanilla_ms"] = m.vanilla_ms;
    j["spec_ms"] = m.spec_ms;
    j["draft_phase_ms"] = m.draft_phase_ms;
    j["verify_phase_ms"] = m.verify_phase_ms;
    j["lmhead_rows_draft"] = m.lmhead_rows_draft;
    j["draft_rows"] = m.draft_rows;
    j["warning"] = m.warning;
    return j;
}

void cmd_train_target(CliState& st) {
    load_config(st);
    fs::create_directories(st.cfg.weights_dir);
    fs::create_directories(st.cfg.out_dir);
    auto corpus = corpus_of(st.cfg);
    PretrainResult res = pretrain_target(corpus, st.cfg.model, st.cfg.train);
    save_target(target_path(st.cfg), res.model);
    write_train_log(st.cfg.out_dir + "/train_target_log.csv", res.log);
    st.cfg.save(st.cfg.out_dir + "/train_target_config.cfg");
    std::cout << "target saved to " << target_path(st.cfg) << " held_out_ce=" << res.held_out_ce
              << "\n";
}

void cmd_train_draft(CliState& st, const std::string& method) {
    load_config(st);
    TrainConfig tc = st.cfg.train;
    if (method == "eagle") {
        tc.steps = 1;
        tc.w_csra = 0.0;
    } else if (method == "hass") {
        if (tc.steps < 2) throw ConfigError("hass training requires steps >= 2");
        tc.w_csra = 0.0;
    } else if (method == "csra") {
        if (tc.steps < 2) throw ConfigError("csra training requires steps >= 2");
        if (tc.w_csra <= 0) throw ConfigError("csra training requires w_csra > 0");
    } else {
        throw ConfigError("unknown method '" + method + "' (eagle|hass|csra)");
    }
    require_file(target_path(st.cfg), "train-target");
    fs::create_directories(st.cfg.weights_dir);
    fs::create_directories(st.cfg.out_dir);
    TargetModel target = load_target(target_path(st.cfg));
    auto corpus = corpus_of(st.cfg);
    DraftTrainResult res = train_draft(target, corpus, tc);
    save_draft(draft_path(st.cfg), res.model);
    write_train_log(st.cfg.out_dir + "/train_draft_log.csv", res.log);
    st.cfg.save(st.cfg.out_dir + "/train_draft_config.cfg");
    std::cout << "draft saved to " << draft_path(st.cfg) << " method=" << method << "\n";
}

void cmd_train_router(CliState& st) {
    load_config(st);
    require_file(target_path(st.cfg), "train-target");
    require_file(draft_path(st.cfg), "train-draft");
    fs::create_directories(st.cfg.out_dir);
    TargetModel target = load_target(target_path(st.cfg));
    DraftModel draft = load_draft(draft_path(st.cfg), target);
    auto corpus = corpus_of(st.cfg);
    RouterHead router =
        train_router(target, draft, corpus, st.cfg.train, st.cfg.weights_dir + "/router_cache.bin");
    save_router(router_path(st.cfg), router);
    st.cfg.save(st.cfg.out_dir + "/train_router_config.cfg");
    std::cout << "router saved to " << router_path(st.cfg) << "\n";
}

std::vector<int32_t> prompt_tokens(const std::string& prompt) {
    std::vector<int32_t> out;
    for (unsigned char c : prompt) out.push_back(static_cast<int32_t>(c));
    if (out.empty()) throw ConfigError("prompt must be nonempty");
    return out;
}

void cmd_generate(CliState& st, const std::string& prompt) {
    load_config(st);
    require_file(target_path(st.cfg), "train-target");
    require_file(draft_path(st.cfg), "train-draft");
    fs::create_directories(st.cfg.out_dir);
    TargetModel target = load_target(target_path(st.cfg));
    DraftModel draft = load_draft(draft_path(st.cfg), target);
    RouterHead router;
    std::unique_ptr<EagleDrafter> drafter;
    if (st.cfg.engine.use_router) {
        require_file(router_path(st.cfg), "train-router");
        router = load_router(router_path(st.cfg));
        drafter = std::make_unique<EagleDrafter>(draft, &router);
    } else {
        drafter = std::make_unique<EagleDrafter>(draft, nullptr);
    }
    auto tokens = prompt_tokens(prompt);
    GenerateResult res = generate(target, *drafter, st.cfg.engine, tokens);
    write_trace(st.cfg.out_dir + "/trace.jsonl", res.records);
    std::ofstream text(st.cfg.out_dir + "/generation.txt", std::ios::binary | std::ios::trunc);
    for (int32_t t : res.tokens) text.put(static_cast<char>(static_cast<unsigned char>(t)));
    std::cout << printable(res.tokens) << "\n";
}

void cmd_bench(CliState& st, const std::string& prompt_file, int64_t n_prompts) {
    load_config(st);
    require_file(target_path(st.cfg), "train-target");
    require_file(draft_path(st.cfg), "train-draft");
    fs::create_directories(st.cfg.out_dir);
    TargetModel target = load_target(target_path(st.cfg));
    DraftModel draft = load_draft(draft_path(st.cfg), target);
    RouterHead router;
    std::unique_ptr<EagleDrafter> drafter;
    if (st.cfg.engine.use_router) {
        require_file(router_path(st.cfg), "train-router");
        router = load_router(router_path(st.cfg));
        drafter = std::make_unique<EagleDrafter>(draft, &router);
    } else {
        drafter = std::make_unique<EagleDrafter>(draft, nullptr);
    }

    std::vector<std::vector<int32_t>> prompts;
    if (!prompt_file.empty()) {
        std::ifstream is(prompt_file);
        if (!is) throw DataError("cannot open prompt file: " + prompt_file);
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty()) prompts.push_back(prompt_tokens(line));
        }
        if (prompts.empty()) throw DataError("prompt file holds no prompts: " + prompt_file);
    } else {
        // deterministic prompts from the tail of the corpus
        auto corpus = corpus_of(st.cfg);
        const int64_t plen = 16;
        for (int64_t i = 0; i < n_prompts; ++i) {
            const int64_t at = static_cast<int64_t>(corpus.size()) - (i + 1) * (plen + 7);
            if (at < 0) break;
            prompts.emplace_back(corpus.begin() + at, corpus.begin() + at + plen);
        }
        if (prompts.empty()) throw DataError("corpus too short to derive bench prompts");
    }

    Metrics m = measured_speedup(target, *drafter, st.cfg.engine, prompts, &draft);
    std::ofstream os(st.cfg.out_dir + "/metrics.json", std::ios::trunc);
    os << metrics_json(m).dump(2) << "\n";
    std::ofstream alpha_csv(st.cfg.out_dir + "/metrics_alpha.csv", std::ios::trunc);
    alpha_csv << "depth,alpha,reached,accepted\n";
    for (size_t d = 0; d < m.alpha.alpha.size(); ++d) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%lld,%lld\n", d + 1, m.alpha.alpha[d],
                      static_cast<long long>(m.alpha.reached[d]),
                      static_cast<long long>(m.alpha.accepted[d]));
        alpha_csv << buf;
    }
    std::ofstream run_csv(st.cfg.out_dir + "/metrics_run.csv", std::ios::trunc);
    run_csv << "tau,speedup_measured,speedup_modeled,activated_fraction,cycles,tokens\n";
    {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%lld,%lld\n", m.tau,
                      m.speedup_measured, m.speedup_modeled, m.activated_fraction,
                      static_cast<long long>(m.cycles), static_cast<long long>(m.tokens));
        run_csv << buf;
    }
    std::cout << "tau=" << m.tau << " speedup_measured=" << m.speedup_measured
              << " speedup_modeled=" << m.speedup_modeled
              << " activated_fraction=" << m.activated_fraction << "\n";
}

void cmd_diag_infonce(CliState& st) {
    load_config(st);
    require_file(target_path(st.cfg), "train-target");
    require_file(draft_path(st.cfg), "train-draft");
    fs::create_directories(st.cfg.out_dir);
    TargetModel target = load_target(target_path(st.cfg));
    DraftModel draft = load_draft(draft_path(st.cfg), target);
    auto corpus = corpus_of(st.cfg);
    const int64_t steps = std::max<int64_t>(2, st.cfg.train.steps);
    auto m = cross_step_infonce(target, draft, corpus, steps, st.cfg.train.csra_temperature,
                                st.cfg.train.batch, st.cfg.train.seq, st.cfg.seed);
    std::ofstream os(st.cfg.out_dir + "/infonce.csv", std::ios::trunc);
    if (!os) throw DataError("cannot write infonce.csv");
    for (int64_t i = 0; i < steps; ++i) {
        for (int64_t j = 0; j < steps; ++j) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", m[i][j]);
            os << (j ? "," : "") << (i > j ? buf : "");
        }
        os << "\n";
    }
    for (int64_t i = 1; i < steps; ++i) {
        for (int64_t j = 0; j < i; ++j)
            std::cout << "infonce[" << i << "][" << j << "]=" << m[i][j] << " ";
        std::cout << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speclab — desk-scale speculative decoding laboratory"};
    app.require_subcommand(1);
    CliState st;

    std::string method = "csra";
    std::string prompt = "the quick brown fox ";
    std::string prompt_file;
    int64_t n_prompts = 8;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", st.config_path, "run configuration file");
        auto push = [&st](const std::string& key) {
            return [&st, key](const std::string& v) { st.overrides.emplace_back(key, v); };
        };
        sub->add_option_function<std::string>("--seed", push("seed"), "run seed");
        sub->add_option_function<std::string>("--steps", push("steps"), "training rollout steps");
        sub->add_option_function<std::string>("--groups", push("groups"), "lm head groups N");
        sub->add_option_function<std::string>("--top-n", push("top_n"), "router groups to activate");
        sub->add_option_function<std::string>("--tree-depth", push("tree_depth"), "tree draft depth");
        sub->add_option_function<std::string>("--tree-budget", push("tree_budget"),
                                              "tree candidate budget");
        sub->add_option_function<std::string>("--temperature", push("temperature"),
                                              "sampling temperature");
        sub->add_option_function<std::string>("--use-router", push("use_router"),
                                              "route the draft lm head (true/false)");
        sub->add_option_function<std::string>("--mode", push("mode"), "chain|tree");
        sub->add_option_function<std::string>("--gamma", push("gamma"), "chain draft depth");
        sub->add_option_function<std::string>("--max-new-tokens", push("max_new_tokens"),
                                              "tokens to generate");
        sub->add_option_function<std::string>("--corpus", push("corpus"), "corpus file (raw bytes)");
        sub->add_option_function<std::string>("--corpus-len", push("corpus_len"),
                                              "built-in corpus length");
        sub->add_option_function<std::string>("--weights-dir", push("weights_dir"), "weights directory");
        sub->add_option_function<std::string>("--out-dir", push("out_dir"), "output directory");
        sub->add_option_function<std::string>("--epochs", push("epochs"), "training epochs");
        sub->add_option_function<std::string>("--w-csra", push("w_csra"), "CSRA loss weight");
    };

    auto* tt = app.add_subcommand("train-target", "pretrain the target model on the corpus");
    add_common(tt);
    auto* td = app.add_subcommand("train-draft", "train the draft model (eagle|hass|csra)");
    add_common(td);
    td->add_option("--method", method, "eagle|hass|csra");
    auto* tr = app.add_subcommand("train-router", "train the lm-head router on a frozen draft");
    add_common(tr);
    auto* gen = app.add_subcommand("generate", "speculative generation with trace output");
    add_common(gen);
    gen->add_option("--prompt", prompt, "prompt text (bytes)");
    auto* bench = app.add_subcommand("bench", "vanilla vs speculative benchmark");
    add_common(bench);
    bench->add_option("--prompt-file", prompt_file, "one prompt per line");
    bench->add_option("--n-prompts", n_prompts, "derived prompts when no file is given");
    auto* diag = app.add_subcommand("diag-infonce", "cross-step InfoNCE matrix");
    add_common(diag);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (tt->parsed()) cmd_train_target(st);
        else if (td->parsed()) cmd_train_draft(st, method);
        else if (tr->parsed()) cmd_train_router(st);
        else if (gen->parsed()) cmd_generate(st, prompt);
        else if (bench->parsed()) cmd_bench(st, prompt_file, n_prompts);
        else if (diag->parsed()) cmd_diag_infonce(st);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
