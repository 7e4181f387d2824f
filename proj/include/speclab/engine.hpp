#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "speclab/model.hpp"
#include "speclab/rng.hpp"

namespace speclab {

enum class DraftMode { Chain, Tree };

struct EngineConfig {
    DraftMode mode = DraftMode::Chain;
    int64_t gamma = 6;        // chain draft depth per cycle
    int64_t tree_depth = 6;
    int64_t tree_budget = 60;
    double temperature = 0.0;
    bool use_router = false;
    int64_t router_top_n = 2;
    uint64_t seed = 0;
    int64_t max_new_tokens = 64;
    int32_t eos_token = -1;   // -1: none
    bool validate_caches = false;

    void validate() const;
};

struct DraftTreeNode {
    int32_t token = 0;
    int32_t parent = -1;  // -1 = root (the last verified token's row)
    int32_t depth = 1;
    double cum_logprob = 0.0;
    int32_t dist_id = -1;  // proposal distribution the token was drawn from
};

// Candidate structure produced by drafting. A chain is the degenerate case
// with one node per depth.
struct DraftTree {
    std::vector<DraftTreeNode> nodes;
    std::vector<std::vector<double>> dists;  // recorded proposals, dense over V
    std::vector<int64_t> active_union_per_depth;  // router mode only
    int64_t max_depth() const;
    std::vector<std::vector<int32_t>> children() const;  // per node incl. root at index -1 handled separately
    std::vector<int32_t> root_children() const;
    std::vector<int32_t> greedy_path() const;  // node ids, best child by proposal prob per depth
};

struct CycleRecord {
    int64_t drafted = 0;
    int64_t accepted = 0;
    std::vector<int32_t> emitted;          // accepted tokens + one bonus token
    std::vector<int8_t> depth_flags;       // 1 accepted, 0 rejected, -1 unreached
    std::vector<int64_t> active_groups;    // per draft step (chain) / per depth union (tree)
    int64_t draft_rows = 0;                // draft-model row evaluations
    int64_t lm_apps = 0;                   // lm-head applications (proposal rows)
    int64_t lmhead_rows_draft = 0;         // lm-head weight rows applied while drafting
    int64_t verify_rows = 0;               // target rows in the verify pass
    double draft_ms = 0.0;
    double verify_ms = 0.0;
};

// ---- verification cores ----
// Split from the session so exhaustive-enumeration tests can drive the exact
// production acceptance logic with table distributions.

struct VerifyCoreResult {
    std::vector<int32_t> emitted;
    int64_t accepted = 0;
    std::vector<int8_t> depth_flags;
    std::vector<int32_t> accepted_nodes;  // tree node ids along the accepted path
};

// Greedy walk on scores (raw logits suffice); ties break to the lowest token.
VerifyCoreResult verify_tree_greedy(const DraftTree& tree, std::span<const double> root_scores,
                                    const std::vector<std::vector<double>>& node_scores);

// Lossless stochastic verification: accept-with-min(1, q/p), residual
// update q <- norm(max(q - p, 0)) across a depth's siblings, residual bonus
// sampling at the stop point.
VerifyCoreResult verify_tree_stochastic(const DraftTree& tree, std::span<const double> root_probs,
                                        const std::vector<std::vector<double>>& node_probs,
                                        RandomSource& rs);

int32_t argmax_token(std::span<const double> scores);

// ---- drafters ----

class Drafter {
public:
    virtual ~Drafter() = default;
    virtual void reset() = 0;
    // Append verified tokens. tokens[i] sits at absolute position start_pos+i;
    // prev_features row i holds the target feature at start_pos+i-1 (a zero
    // row when that position is -1).
    virtual void extend_context(std::span<const int32_t> tokens, const Tensor& prev_features,
                                int64_t start_pos) = 0;
    virtual DraftTree draft(const EngineConfig& cfg, RandomSource& rs, CycleRecord& rec) = 0;
    virtual void rollback() = 0;  // drop rows added by the last draft()
};

struct RoutedProposal {
    std::vector<double> probs;       // renormalized proposal over the active support
    std::vector<double> factorized;  // unrenormalized p_router(n) * p_group(x|n)
    std::vector<int> active_groups;
    double active_mass = 0.0;
    int64_t lmhead_rows = 0;
};

RoutedProposal routed_proposal(const DraftModel& draft, const RouterHead& router, const Tensor& h,
                               int64_t top_n, double temperature);

// EAGLE-style drafter over a DraftModel, optionally routing the lm_head.
class EagleDrafter final : public Drafter {
public:
    EagleDrafter(const DraftModel& model, const RouterHead* router = nullptr);
    void reset() override;
    void extend_context(std::span<const int32_t> tokens, const Tensor& prev_features,
                        int64_t start_pos) override;
    DraftTree draft(const EngineConfig& cfg, RandomSource& rs, CycleRecord& rec) override;
    void rollback() override;

private:
    struct Proposal {
        std::vector<double> sample_probs;  // proposal used for drawing tokens
        std::vector<int> active_groups;    // empty = full lm_head
        int64_t lmhead_rows = 0;
    };
    Proposal propose(const Tensor& h, const EngineConfig& cfg);

    const DraftModel& model_;
    const RouterHead* router_;
    KvCache cache_;
    Tensor last_feature_;  // output of the last permanent row
    int64_t last_position_ = -1;
    int64_t perm_rows_ = 0;
    int64_t pending_rows_ = 0;  // context rows not yet charged to a cycle
};

// Drafts with the target model itself; the perfect-drafter oracle.
class MirrorDrafter final : public Drafter {
public:
    explicit MirrorDrafter(const TargetModel& model);
    void reset() override;
    void extend_context(std::span<const int32_t> tokens, const Tensor& prev_features,
                        int64_t start_pos) override;
    DraftTree draft(const EngineConfig& cfg, RandomSource& rs, CycleRecord& rec) override;
    void rollback() override;

private:
    const TargetModel& model_;
    KvCache cache_;
    std::vector<double> last_logits_;
    int64_t last_position_ = -1;
    int64_t perm_rows_ = 0;
};

// ---- generation ----

struct GenerateResult {
    std::vector<int32_t> tokens;  // emitted continuation (prompt excluded)
    std::vector<CycleRecord> records;
};

class GenerationSession {
public:
    GenerationSession(const TargetModel& target, Drafter& drafter, const EngineConfig& cfg);
    void prefill(std::span<const int32_t> prompt);
    CycleRecord run_cycle();
    // Same cycle with an injected randomness source (enumeration tests).
    CycleRecord run_cycle_with(RandomSource& rs);
    GenerateResult run(std::span<const int32_t> prompt);
    const std::vector<int32_t>& sequence() const { return seq_; }
    // Recomputes the target cache from scratch and compares; throws on drift.
    void validate_target_cache(double tol = 1e-10) const;

private:
    const TargetModel& target_;
    Drafter& drafter_;
    EngineConfig cfg_;
    Rng rng_;
    RngSource rs_;
    KvCache target_cache_;
    std::vector<int32_t> seq_;
    // verified tokens not yet in the drafter's permanent context
    std::vector<int32_t> pending_tokens_;
    Tensor pending_features_;
    int64_t pending_start_ = 0;
};

GenerateResult generate(const TargetModel& target, Drafter& drafter, const EngineConfig& cfg,
                        std::span<const int32_t> prompt);

std::vector<int32_t> vanilla_generate(const TargetModel& target, std::span<const int32_t> prompt,
                                      int64_t max_new_tokens, double temperature, uint64_t seed,
                                      int32_t eos_token = -1);

}  // namespace speclab
