#include "speclab/runconfig.hpp"

#include <fstream>
#include <sstream>

namespace speclab {

namespace {

int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int64_t v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": '" + value + "'");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("config: bad boolean for " + key + ": '" + value + "'");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::propagate_seed() {
    train.seed = seed;
    engine.seed = seed;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "vocab_size") model.vocab_size = parse_int(key, value);
    else if (key == "hidden_size") model.hidden_size = parse_int(key, value);
    else if (key == "num_layers") model.num_layers = parse_int(key, value);
    else if (key == "num_heads") model.num_heads = parse_int(key, value);
    else if (key == "intermediate_size") model.intermediate_size = parse_int(key, value);
    else if (key == "max_seq_len") model.max_seq_len = parse_int(key, value);
    else if (key == "groups") model.head_groups = parse_int(key, value);
    else if (key == "top_n") { model.router_top_n = parse_int(key, value); engine.router_top_n = model.router_top_n; }
    else if (key == "router_act") {
        if (value == "silu") model.router_act = RouterAct::Silu;
        else if (value == "relu") model.router_act = RouterAct::Relu;
        else throw ConfigError("config: router_act must be silu or relu");
    }
    else if (key == "w_reg") train.w_reg = parse_double(key, value);
    else if (key == "w_cls") train.w_cls = parse_double(key, value);
    else if (key == "w_csra") train.w_csra = parse_double(key, value);
    else if (key == "csra_temperature") train.csra_temperature = parse_double(key, value);
    else if (key == "steps") train.steps = parse_int(key, value);
    else if (key == "batch") train.batch = parse_int(key, value);
    else if (key == "seq") train.seq = parse_int(key, value);
    else if (key == "lr") train.lr = parse_double(key, value);
    else if (key == "epochs") train.epochs = parse_int(key, value);
    else if (key == "weight_decay") train.weight_decay = parse_double(key, value);
    else if (key == "clip_norm") train.clip_norm = parse_double(key, value);
    else if (key == "warmup") train.warmup = parse_int(key, value);
    else if (key == "include_target_positives") train.include_target_positives = parse_bool(key, value);
    else if (key == "smooth_l1_beta") train.smooth_l1_beta = parse_double(key, value);
    else if (key == "mode") {
        if (value == "chain") engine.mode = DraftMode::Chain;
        else if (value == "tree") engine.mode = DraftMode::Tree;
        else throw ConfigError("config: mode must be chain or tree");
    }
    else if (key == "gamma") engine.gamma = parse_int(key, value);
    else if (key == "tree_depth") engine.tree_depth = parse_int(key, value);
    else if (key == "tree_budget") engine.tree_budget = parse_int(key, value);
    else if (key == "temperature") engine.temperature = parse_double(key, value);
    else if (key == "use_router") engine.use_router = parse_bool(key, value);
    else if (key == "max_new_tokens") engine.max_new_tokens = parse_int(key, value);
    else if (key == "eos_token") engine.eos_token = static_cast<int32_t>(parse_int(key, value));
    else if (key == "corpus") corpus_path = value;
    else if (key == "corpus_len") corpus_len = parse_int(key, value);
    else if (key == "weights_dir") weights_dir = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "seed") { seed = static_cast<uint64_t>(parse_int(key, value)); propagate_seed(); }
    else throw ConfigError("config: unknown key '" + key + "'");
}

std::string RunConfig::to_string() const {
    std::ostringstream os;
    os << "# speclab run configuration\n";
    os << "vocab_size = " << model.vocab_size << "\n";
    os << "hidden_size = " << model.hidden_size << "\n";
    os << "num_layers = " << model.num_layers << "\n";
    os << "num_heads = " << model.num_heads << "\n";
    os << "intermediate_size = " << model.intermediate_size << "\n";
    os << "max_seq_len = " << model.max_seq_len << "\n";
    os << "groups = " << model.head_groups << "\n";
    os << "top_n = " << model.router_top_n << "\n";
    os << "router_act = " << (model.router_act == RouterAct::Silu ? "silu" : "relu") << "\n";
    os << "w_reg = " << train.w_reg << "\n";
    os << "w_cls = " << train.w_cls << "\n";
    os << "w_csra = " << train.w_csra << "\n";
    os << "csra_temperature = " << train.csra_temperature << "\n";
    os << "steps = " << train.steps << "\n";
    os << "batch = " << train.batch << "\n";
    os << "seq = " << train.seq << "\n";
    os << "lr = " << train.lr << "\n";
    os << "epochs = " << train.epochs << "\n";
    os << "weight_decay = " << train.weight_decay << "\n";
    os << "clip_norm = " << train.clip_norm << "\n";
    os << "warmup = " << train.warmup << "\n";
    os << "include_target_positives = " << (train.include_target_positives ? "true" : "false") << "\n";
    os << "smooth_l1_beta = " << train.smooth_l1_beta << "\n";
    os << "mode = " << (engine.mode == DraftMode::Chain ? "chain" : "tree") << "\n";
    os << "gamma = " << engine.gamma << "\n";
    os << "tree_depth = " << engine.tree_depth << "\n";
    os << "tree_budget = " << engine.tree_budget << "\n";
    os << "temperature = " << engine.temperature << "\n";
    os << "use_router = " << (engine.use_router ? "true" : "false") << "\n";
    os << "max_new_tokens = " << engine.max_new_tokens << "\n";
    os << "eos_token = " << engine.eos_token << "\n";
    os << "corpus = " << corpus_path << "\n";
    os << "corpus_len = " << corpus_len << "\n";
    os << "weights_dir = " << weights_dir << "\n";
    os << "out_dir = " << out_dir << "\n";
    os << "seed = " << seed << "\n";
    return os.str();
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: missing '=' at " + path + ":" + std::to_string(lineno));
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write config file: " + path);
    os << to_string();
}

}  // namespace speclab
