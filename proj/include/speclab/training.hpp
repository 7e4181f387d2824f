#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speclab/model.hpp"

namespace speclab {

struct TrainConfig {
    double w_reg = 0.5;
    double w_cls = 0.1;
    double w_csra = 0.15;
    double csra_temperature = 0.07;
    int64_t steps = 3;  // multi-step rollout depth
    int64_t batch = 4;
    int64_t seq = 32;
    double lr = 1e-3;
    int64_t epochs = 2;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    int64_t warmup = 0;
    uint64_t seed = 0;
    bool include_target_positives = true;  // targets as extra positive views
    double smooth_l1_beta = 1.0;

    void validate() const;
};

// Aligned teacher data for one batch of token windows.
// Draft rows cover positions 1..S-1 of each window (position 0 has no
// previous feature); target_features keeps all S positions per window.
struct TrainBatch {
    std::vector<int32_t> tokens;  // [B×S]
    Tensor target_features;       // [B·S × d]
    Tensor target_probs;          // [B·(S-1) × V], next-token distributions
    int64_t batch = 0;
    int64_t seq = 0;

    int64_t rows() const { return batch * (seq - 1); }
};

TrainBatch make_train_batch(const TargetModel& target, std::span<const int32_t> tokens, int64_t batch,
                            int64_t seq);

// Target features gathered at positions 1..S-1, aligned with step outputs.
Tensor batch_target_rows(const TrainBatch& batch);

// HASS-style multi-step rollout. Step 1 consumes target features; step j>1
// consumes step j-1 outputs shifted one position. Attention keys at distance
// delta come from step max(1, j-delta), matching what the drafter sees at
// inference depth j. Returns one [B·(S-1) × d] feature matrix per step.
std::vector<Tensor> multi_step_rollout(const TrainBatch& batch, const DraftModel& draft, int64_t steps);

// Cross-step InfoNCE over normalized features. For each query (a step
// feature at one position), positives are the other steps' features at the
// same position (plus the target feature when configured); the denominator
// holds the pair's positive and every non-positive candidate.
Tensor csra_loss(const std::vector<Tensor>& step_features, const Tensor& target_rows,
                 const TrainConfig& cfg);

struct LossBreakdown {
    double total = 0.0;
    double reg = 0.0;
    double cls = 0.0;
    double csra = 0.0;
};

class AdamW {
public:
    AdamW(std::vector<Tensor> params, double lr, double weight_decay = 0.0, double clip_norm = 1.0);
    void set_lr(double lr);
    double lr() const { return lr_; }
    void step();

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, weight_decay_, clip_norm_;
    double beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8;
    int64_t t_ = 0;
};

// One combined-loss optimizer step on a batch; embedding and lm_head stay
// frozen (they are not in the optimizer and carry no grad requirement).
LossBreakdown draft_train_step(const TrainBatch& batch, DraftModel& draft, const TrainConfig& cfg,
                               AdamW& opt);

// Loss evaluation without an update, for first-batch decomposition checks.
LossBreakdown draft_loss_eval(const TrainBatch& batch, const DraftModel& draft, const TrainConfig& cfg);

struct TrainLogRow {
    int64_t epoch = 0;
    int64_t step = 0;
    double loss_total = 0.0;
    double loss_reg = 0.0;
    double loss_cls = 0.0;
    double loss_csra = 0.0;
};

void write_train_log(const std::string& path, std::span<const TrainLogRow> rows);

struct PretrainResult {
    TargetModel model;
    std::vector<TrainLogRow> log;
    double held_out_ce = 0.0;
};

PretrainResult pretrain_target(std::span<const int32_t> corpus, const ModelConfig& mcfg,
                               const TrainConfig& tcfg);

double held_out_ce(const TargetModel& model, std::span<const int32_t> corpus, int64_t seq);

struct DraftTrainResult {
    DraftModel model;
    std::vector<TrainLogRow> log;
};

DraftTrainResult train_draft(const TargetModel& target, std::span<const int32_t> corpus,
                             const TrainConfig& cfg);

// Group-marginal router target: q_router(n) = sum of q over group n's tokens.
Tensor router_target(const Tensor& q, int64_t head_groups);

// Cross-entropy between distributions; p is clamped below at 1e-12. Accepts
// single vectors or row batches (mean over rows).
Tensor router_loss(const Tensor& q_router, const Tensor& p_router);

// Frozen-draft hidden states and router targets for stage-1 caching.
struct RouterData {
    Tensor hidden;    // [n × d]
    Tensor q_router;  // [n × N]
};

RouterData router_stage1(const TargetModel& target, const DraftModel& draft,
                         std::span<const int32_t> corpus, const TrainConfig& cfg);
void save_router_data(const std::string& path, const RouterData& data);
RouterData load_router_data(const std::string& path);
RouterHead train_router_stage2(const ModelConfig& mcfg, const RouterData& data, const TrainConfig& cfg);

// Two-stage training: the draft (and target) stay frozen; a checksum guard
// enforces the contract. Stage-1 rows are cached to `cache_path` when given.
RouterHead train_router(const TargetModel& target, const DraftModel& draft,
                        std::span<const int32_t> corpus, const TrainConfig& cfg,
                        const std::string& cache_path = "");

}  // namespace speclab
