#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speclab/engine.hpp"
#include "speclab/training.hpp"

namespace speclab {

// Mean emitted tokens per drafting-verification cycle (accepted + bonus).
double acceptance_length(std::span<const CycleRecord> records);

// Conditional per-depth acceptance rates: alpha[n] counts only cycles that
// reached depth n+1; depths never reached are absent from the vectors.
struct AlphaReport {
    std::vector<double> alpha;
    std::vector<int64_t> reached;
    std::vector<int64_t> accepted;
};

AlphaReport acceptance_rates(std::span<const CycleRecord> records);

// Single-token target latency, parallel-verify latency and per-step draft
// latency, in milliseconds.
struct LatencyModel {
    double target_ms = 0.0;
    double target_parallel_ms = 0.0;
    double draft_ms = 0.0;
};

double speedup_from_latency(double tau, int64_t gamma, const LatencyModel& model);
double speedup_from_params(double tau, int64_t gamma, double w_draft, double w_target);
double latency_ratio_estimate(double w_draft, double w_target);

// Pairwise InfoNCE between two steps' features (queries = step j, sole
// positive = step i at the same position, candidates = both steps' rows).
std::vector<std::vector<double>> cross_step_infonce_features(const std::vector<Tensor>& step_features,
                                                             double tau_c);

// Rolls `steps` multi-step features over seeded evaluation batches and
// averages the pairwise InfoNCE matrix. Entry (i,j), i > j, uses step j as
// queries; labels 0..steps-1 correspond to rollout steps 1..steps.
std::vector<std::vector<double>> cross_step_infonce(const TargetModel& target, const DraftModel& draft,
                                                    std::span<const int32_t> corpus, int64_t steps,
                                                    double tau_c, int64_t batch, int64_t seq,
                                                    uint64_t seed, int64_t max_batches = 8);

struct Metrics {
    double tau = 0.0;
    AlphaReport alpha;
    int64_t cycles = 0;
    int64_t tokens = 0;
    double speedup_measured = 0.0;  // wall-clock vanilla / speculative
    double speedup_modeled = 0.0;   // parameter-weighted memory-traffic model
    double vanilla_ms = 0.0;
    double spec_ms = 0.0;
    double draft_phase_ms = 0.0;
    double verify_phase_ms = 0.0;
    double activated_fraction = 1.0;  // mean activated lm_head fraction while drafting
    int64_t lmhead_rows_draft = 0;
    int64_t draft_rows = 0;
    std::string warning;
};

Metrics metrics_from_records(std::span<const CycleRecord> records, const ModelConfig& cfg,
                             double w_draft_nonhead, double w_target);

// Runs vanilla and speculative decoding on identical prompts and seeds.
Metrics measured_speedup(const TargetModel& target, Drafter& drafter, const EngineConfig& cfg,
                         const std::vector<std::vector<int32_t>>& prompts, const DraftModel* draft);

// Upper-tail chi-square p-value (regularized incomplete gamma Q(k/2, x/2)).
double chi_square_p_value(double stat, double dof);

// Goodness-of-fit statistic with small-expectation bins merged; returns the
// statistic and writes the effective degrees of freedom.
double chi_square_statistic(std::span<const int64_t> counts, std::span<const double> expected_probs,
                            double min_expected, int64_t* dof_out);

}  // namespace speclab
