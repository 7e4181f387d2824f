#include "speclab/serialize.hpp"

#include <cstring>
#include <fstream>

namespace speclab {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'E', 'C', 'L', 'A', 'B', 'T'};
constexpr uint32_t kVersion = 1;

// Model kinds stored in the config block.
constexpr int64_t kKindTarget = 1;
constexpr int64_t kKindDraft = 2;
constexpr int64_t kKindRouter = 3;

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("truncated weight file: " + path);
    return v;
}

void write_string(std::ofstream& os, const std::string& s) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& is, const std::string& path) {
    const auto n = read_pod<uint32_t>(is, path);
    if (n > (1u << 20)) throw DataError("corrupt weight file (oversized string): " + path);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataError("truncated weight file: " + path);
    return s;
}

}  // namespace

const Tensor& TensorFile::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw DataError("weight file is missing tensor '" + name + "'");
}

int64_t TensorFile::config_value(const std::string& key) const {
    auto it = config.find(key);
    if (it == config.end()) throw DataError("weight file is missing config key '" + key + "'");
    return it->second;
}

void save_tensor_file(const std::string& path, const TensorFile& file) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, kVersion);
    write_pod<uint32_t>(os, static_cast<uint32_t>(file.config.size()));
    for (const auto& [k, v] : file.config) {
        write_string(os, k);
        write_pod<int64_t>(os, v);
    }
    write_pod<uint32_t>(os, static_cast<uint32_t>(file.tensors.size()));
    for (const auto& [name, t] : file.tensors) {
        write_string(os, name);
        write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
        for (int64_t dim : t.shape()) write_pod<uint64_t>(os, static_cast<uint64_t>(dim));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw DataError("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DependencyError("missing weight file: " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("bad magic in weight file: " + path);
    const auto version = read_pod<uint32_t>(is, path);
    if (version != kVersion)
        throw DataError("unsupported weight file version " + std::to_string(version) + ": " + path);
    TensorFile out;
    const auto ncfg = read_pod<uint32_t>(is, path);
    for (uint32_t i = 0; i < ncfg; ++i) {
        std::string key = read_string(is, path);
        out.config[key] = read_pod<int64_t>(is, path);
    }
    const auto ntensors = read_pod<uint32_t>(is, path);
    for (uint32_t i = 0; i < ntensors; ++i) {
        std::string name = read_string(is, path);
        const auto rank = read_pod<uint32_t>(is, path);
        if (rank > 8) throw DataError("corrupt weight file (rank too large): " + path);
        Shape shape(rank);
        for (auto& dim : shape) dim = static_cast<int64_t>(read_pod<uint64_t>(is, path));
        const int64_t n = shape_numel(shape);
        std::vector<double> data(static_cast<size_t>(n));
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
        if (!is) throw DataError("truncated weight file: " + path);
        out.tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return out;
}

std::map<std::string, int64_t> config_to_entries(const ModelConfig& cfg) {
    return {
        {"vocab_size", cfg.vocab_size},
        {"hidden_size", cfg.hidden_size},
        {"num_layers", cfg.num_layers},
        {"num_heads", cfg.num_heads},
        {"intermediate_size", cfg.intermediate_size},
        {"max_seq_len", cfg.max_seq_len},
        {"head_groups", cfg.head_groups},
        {"router_top_n", cfg.router_top_n},
        {"router_act", cfg.router_act == RouterAct::Silu ? 0 : 1},
    };
}

ModelConfig config_from_entries(const std::map<std::string, int64_t>& entries) {
    ModelConfig cfg;
    auto get = [&](const char* key) {
        auto it = entries.find(key);
        if (it == entries.end()) throw DataError(std::string("weight file config missing key ") + key);
        return it->second;
    };
    cfg.vocab_size = get("vocab_size");
    cfg.hidden_size = get("hidden_size");
    cfg.num_layers = get("num_layers");
    cfg.num_heads = get("num_heads");
    cfg.intermediate_size = get("intermediate_size");
    cfg.max_seq_len = get("max_seq_len");
    cfg.head_groups = get("head_groups");
    cfg.router_top_n = get("router_top_n");
    cfg.router_act = get("router_act") == 0 ? RouterAct::Silu : RouterAct::Relu;
    cfg.validate();
    return cfg;
}

namespace {

void add_block(TensorFile& f, const std::string& prefix, const DecoderBlock& b) {
    f.tensors.emplace_back(prefix + ".wq", b.wq);
    f.tensors.emplace_back(prefix + ".wk", b.wk);
    f.tensors.emplace_back(prefix + ".wv", b.wv);
    f.tensors.emplace_back(prefix + ".wo", b.wo);
    f.tensors.emplace_back(prefix + ".w_gate", b.w_gate);
    f.tensors.emplace_back(prefix + ".w_up", b.w_up);
    f.tensors.emplace_back(prefix + ".w_down", b.w_down);
    f.tensors.emplace_back(prefix + ".norm_attn", b.norm_attn);
    f.tensors.emplace_back(prefix + ".norm_mlp", b.norm_mlp);
}

DecoderBlock read_block(const TensorFile& f, const std::string& prefix) {
    DecoderBlock b;
    b.wq = f.tensor(prefix + ".wq");
    b.wk = f.tensor(prefix + ".wk");
    b.wv = f.tensor(prefix + ".wv");
    b.wo = f.tensor(prefix + ".wo");
    b.w_gate = f.tensor(prefix + ".w_gate");
    b.w_up = f.tensor(prefix + ".w_up");
    b.w_down = f.tensor(prefix + ".w_down");
    b.norm_attn = f.tensor(prefix + ".norm_attn");
    b.norm_mlp = f.tensor(prefix + ".norm_mlp");
    return b;
}

void check_kind(const TensorFile& f, int64_t expected, const std::string& path) {
    if (f.config_value("kind") != expected)
        throw DataError("weight file holds a different model kind: " + path);
}

}  // namespace

void save_target(const std::string& path, const TargetModel& model) {
    TensorFile f;
    f.config = config_to_entries(model.config);
    f.config["kind"] = kKindTarget;
    f.tensors.emplace_back("embedding", model.embedding);
    for (size_t i = 0; i < model.blocks.size(); ++i)
        add_block(f, "block" + std::to_string(i), model.blocks[i]);
    f.tensors.emplace_back("final_norm", model.final_norm);
    f.tensors.emplace_back("lm_head", model.lm_head);
    save_tensor_file(path, f);
}

TargetModel load_target(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    check_kind(f, kKindTarget, path);
    TargetModel m;
    m.config = config_from_entries(f.config);
    m.embedding = f.tensor("embedding");
    for (int64_t i = 0; i < m.config.num_layers; ++i)
        m.blocks.push_back(read_block(f, "block" + std::to_string(i)));
    m.final_norm = f.tensor("final_norm");
    m.lm_head = f.tensor("lm_head");
    return m;
}

void save_draft(const std::string& path, const DraftModel& model) {
    TensorFile f;
    f.config = config_to_entries(model.config);
    f.config["kind"] = kKindDraft;
    f.tensors.emplace_back("fusion", model.fusion);
    add_block(f, "block", model.block);
    save_tensor_file(path, f);
}

DraftModel load_draft(const std::string& path, const TargetModel& target) {
    TensorFile f = load_tensor_file(path);
    check_kind(f, kKindDraft, path);
    DraftModel m;
    m.config = config_from_entries(f.config);
    if (m.config.vocab_size != target.config.vocab_size ||
        m.config.hidden_size != target.config.hidden_size) {
        throw DataError("draft weight file does not match the target model: " + path);
    }
    m.embedding = target.embedding;
    m.lm_head = target.lm_head;
    m.fusion = f.tensor("fusion");
    m.block = read_block(f, "block");
    return m;
}

void save_router(const std::string& path, const RouterHead& router) {
    TensorFile f;
    f.config = config_to_entries(router.config);
    f.config["kind"] = kKindRouter;
    f.tensors.emplace_back("w1", router.w1);
    f.tensors.emplace_back("w2", router.w2);
    save_tensor_file(path, f);
}

RouterHead load_router(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    check_kind(f, kKindRouter, path);
    RouterHead r;
    r.config = config_from_entries(f.config);
    r.w1 = f.tensor("w1");
    r.w2 = f.tensor("w2");
    return r;
}

}  // namespace speclab
