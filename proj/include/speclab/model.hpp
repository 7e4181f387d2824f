#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speclab/tensor.hpp"

namespace speclab {

enum class RouterAct { Silu, Relu };

struct ModelConfig {
    int64_t vocab_size = 256;
    int64_t hidden_size = 64;
    int64_t num_layers = 4;
    int64_t num_heads = 4;
    int64_t intermediate_size = 256;
    int64_t max_seq_len = 512;
    int64_t head_groups = 16;   // N
    int64_t router_top_n = 2;   // n
    RouterAct router_act = RouterAct::Silu;

    int64_t group_size() const { return vocab_size / head_groups; }  // v = V/N
    void validate() const;
};

// One pre-norm decoder block: attention + SwiGLU MLP, RMSNorm, no biases.
struct DecoderBlock {
    Tensor wq, wk, wv, wo;          // [d×d]
    Tensor w_gate, w_up, w_down;    // [d×m], [d×m], [m×d]
    Tensor norm_attn, norm_mlp;     // [d]

    static DecoderBlock init(const ModelConfig& cfg, Rng& rng);
    std::vector<Tensor> parameters() const;
};

// Per-layer appended key/value rows plus token/position bookkeeping.
struct KvCache {
    struct Layer {
        Tensor k, v;  // [P×d]
    };
    std::vector<Layer> layers;
    std::vector<int32_t> tokens;
    std::vector<int64_t> positions;

    explicit KvCache(size_t num_layers = 0) : layers(num_layers) {}
    int64_t rows() const { return static_cast<int64_t>(tokens.size()); }
    void append_rows(std::span<const int32_t> toks, std::span<const int64_t> pos);
    void append_layer(size_t layer, const Tensor& k_new, const Tensor& v_new);
    void keep_rows(std::span<const int64_t> keep);
    void truncate(int64_t n);
    KvCache clone() const;
    uint64_t checksum() const;
};

struct TargetModel {
    ModelConfig config;
    Tensor embedding;  // [V×d]
    std::vector<DecoderBlock> blocks;
    Tensor final_norm;  // [d]
    Tensor lm_head;     // [d×V]

    static TargetModel init(const ModelConfig& cfg, uint64_t seed);
    std::vector<Tensor> parameters() const;
    void set_requires_grad(bool value);
};

// EAGLE-style drafter: shared frozen embedding and lm_head, a fusion layer
// reducing [embedding ; previous feature] to d, and one target-shaped block.
struct DraftModel {
    ModelConfig config;
    Tensor embedding;  // tied to the target's (same storage)
    Tensor lm_head;    // tied to the target's (same storage)
    Tensor fusion;     // [2d×d]
    DecoderBlock block;

    static DraftModel init(const TargetModel& target, uint64_t seed);
    std::vector<Tensor> own_parameters() const;  // trainable: fusion + block
    void set_requires_grad(bool value);          // own parameters only
};

struct RouterHead {
    ModelConfig config;
    Tensor w1;  // [d×d]
    Tensor w2;  // [N×d]

    static RouterHead init(const ModelConfig& cfg, uint64_t seed);
    std::vector<Tensor> parameters() const;
};

struct ParamReport {
    std::vector<std::pair<std::string, int64_t>> components;
    int64_t total_with_embedding = 0;
    int64_t total_without_embedding = 0;

    int64_t total(bool include_embedding) const {
        return include_embedding ? total_with_embedding : total_without_embedding;
    }
};

ParamReport count_params(const TargetModel& model);
ParamReport count_params(const DraftModel& model);
ParamReport count_params(const RouterHead& router);

// Fixed sinusoidal position encoding rows, [R×d].
Tensor positional_rows(std::span<const int64_t> positions, int64_t d);

// Core block forward over new rows. `mask` is row-major [R × (P+R)] over
// previous cache rows then the new rows; k/v rows for the new positions are
// returned for the caller to append.
struct BlockOut {
    Tensor y;  // [R×d]
    Tensor k;  // [R×d]
    Tensor v;  // [R×d]
};
BlockOut block_forward(const DecoderBlock& block, const Tensor& x_new, const Tensor& k_prev,
                       const Tensor& v_prev, std::span<const uint8_t> mask, int64_t num_heads);

struct ForwardRows {
    Tensor features;  // [R×d] post final-norm hidden states
    Tensor logits;    // [R×V]
};

// Processes new rows against a cache with an explicit attention mask; appends
// the new rows' K/V to the cache.
ForwardRows target_forward_rows(const TargetModel& model, std::span<const int32_t> tokens,
                                std::span<const int64_t> positions, KvCache& cache,
                                std::span<const uint8_t> mask);

// Causal forward. With a cache, `tokens` must extend the cached prefix and
// only the new suffix is processed; outputs cover the processed rows.
ForwardRows target_forward(const TargetModel& model, std::span<const int32_t> tokens,
                           KvCache* cache = nullptr);

// Draft rows: row i consumes (tokens[i], prev_features[i]) at positions[i].
Tensor draft_forward_rows(const DraftModel& model, std::span<const int32_t> tokens,
                          const Tensor& prev_features, std::span<const int64_t> positions,
                          KvCache& cache, std::span<const uint8_t> mask);

struct DraftStep {
    Tensor feature;  // block output, chained as the next step's prev feature
    Tensor hidden;   // what lm_head / router consume (same vector here)
};

// Single autoregressive draft step with causal attention over the cache.
DraftStep draft_forward(const DraftModel& model, const Tensor& prev_feature, int32_t token,
                        int64_t position, KvCache& cache);

// p_router = softmax(W2 (act(W1 h) + h)); accepts [d] or [R×d].
Tensor router_forward(const RouterHead& router, const Tensor& h);

struct GroupedDistribution {
    std::vector<double> probs;      // dense over V; zero outside active groups
    std::vector<int> active_groups; // sorted group ids
    double active_mass = 0.0;       // unrenormalized Σ p_router over active groups
};

// Eq-style factorized distribution p(x) = p_router(n) · softmax-within-group-n.
GroupedDistribution grouped_head_prob(const Tensor& h, const Tensor& p_router,
                                      std::span<const int> active_groups, const Tensor& lm_head,
                                      const ModelConfig& cfg);

uint64_t weights_checksum(std::span<const Tensor> tensors);

}  // namespace speclab
