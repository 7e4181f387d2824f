#include "speclab/analytics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace speclab {

double acceptance_length(std::span<const CycleRecord> records) {
    if (records.empty()) throw ConfigError("acceptance_length: no cycle records");
    double total = 0.0;
    for (const auto& r : records) total += static_cast<double>(r.emitted.size());
    return total / static_cast<double>(records.size());
}

AlphaReport acceptance_rates(std::span<const CycleRecord> records) {
    if (records.empty()) throw ConfigError("acceptance_rates: no cycle records");
    size_t max_depth = 0;
    for (const auto& r : records) max_depth = std::max(max_depth, r.depth_flags.size());
    std::vector<int64_t> reached(max_depth, 0), accepted(max_depth, 0);
    for (const auto& r : records) {
        for (size_t d = 0; d < r.depth_flags.size(); ++d) {
            if (r.depth_flags[d] < 0) continue;
            ++reached[d];
            if (r.depth_flags[d] == 1) ++accepted[d];
        }
    }
    while (!reached.empty() && reached.back() == 0) {
        reached.pop_back();
        accepted.pop_back();
    }
    AlphaReport out;
    out.reached = reached;
    out.accepted = accepted;
    for (size_t d = 0; d < reached.size(); ++d)
        out.alpha.push_back(reached[d] > 0 ? static_cast<double>(accepted[d]) / reached[d] : 0.0);
    return out;
}

// Vanilla spends tau * L_t per cycle's worth of tokens; the speculative cycle
// spends gamma draft steps plus one parallel verification (L_t').
double speedup_from_latency(double tau, int64_t gamma, const LatencyModel& model) {
    if (model.target_ms <= 0 || model.target_parallel_ms <= 0 || model.draft_ms < 0)
        throw ConfigError("speedup_from_latency: latencies must be positive");
    if (tau <= 0 || gamma < 0) throw ConfigError("speedup_from_latency: bad tau/gamma");
    return tau * model.target_ms /
           (static_cast<double>(gamma) * model.draft_ms + model.target_parallel_ms);
}

double speedup_from_params(double tau, int64_t gamma, double w_draft, double w_target) {
    if (w_target <= 0) throw ConfigError("speedup_from_params: target parameter count must be positive");
    if (w_draft < 0 || tau <= 0 || gamma < 0) throw ConfigError("speedup_from_params: bad inputs");
    return tau * w_target / (static_cast<double>(gamma) * w_draft + w_target);
}

double latency_ratio_estimate(double w_draft, double w_target) {
    if (w_target <= 0) throw ConfigError("latency_ratio_estimate: target parameter count must be positive");
    return w_draft / w_target;
}

// ---- cross-step InfoNCE ----

std::vector<std::vector<double>> cross_step_infonce_features(const std::vector<Tensor>& step_features,
                                                             double tau_c) {
    const auto t = static_cast<int64_t>(step_features.size());
    if (t < 2) throw ConfigError("cross_step_infonce: at least 2 steps required");
    if (tau_c <= 0) throw ConfigError("cross_step_infonce: temperature must be positive");
    NoGradGuard ng;
    const int64_t R = step_features[0].dim(0);
    std::vector<Tensor> normed;
    for (const auto& f : step_features) {
        if (f.dim(0) != R) throw ContractError("cross_step_infonce: row mismatch");
        normed.push_back(l2_normalize_rows(f));
    }
    std::vector<std::vector<double>> out(t, std::vector<double>(t, 0.0));
    for (int64_t i = 1; i < t; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            Tensor s_pos = scale(matmul(normed[j], transpose(normed[i])), 1.0 / tau_c);  // [R×R]
            Tensor s_own = scale(matmul(normed[j], transpose(normed[j])), 1.0 / tau_c);
            auto sp = s_pos.data();
            auto so = s_own.data();
            double loss = 0.0;
            for (int64_t r = 0; r < R; ++r) {
                double mx = -1e300;
                for (int64_t k = 0; k < R; ++k) {
                    mx = std::max(mx, sp[r * R + k]);
                    if (k != r) mx = std::max(mx, so[r * R + k]);
                }
                double denom = 0.0;
                for (int64_t k = 0; k < R; ++k) {
                    denom += std::exp(sp[r * R + k] - mx);
                    if (k != r) denom += std::exp(so[r * R + k] - mx);
                }
                loss -= sp[r * R + r] - mx - std::log(denom);
            }
            out[i][j] = loss / static_cast<double>(R);
        }
    }
    return out;
}

std::vector<std::vector<double>> cross_step_infonce(const TargetModel& target, const DraftModel& draft,
                                                    std::span<const int32_t> corpus, int64_t steps,
                                                    double tau_c, int64_t batch, int64_t seq,
                                                    uint64_t seed, int64_t max_batches) {
    if (steps < 2) throw ConfigError("cross_step_infonce: steps must be >= 2");
    NoGradGuard ng;
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + seq <= static_cast<int64_t>(corpus.size()); s += seq) starts.push_back(s);
    if (starts.empty()) throw DataError("cross_step_infonce: corpus too short");
    Rng rng(seed ^ 0x1234995511ull);
    for (int64_t i = static_cast<int64_t>(starts.size()) - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(starts[i], starts[j]);
    }
    std::vector<std::vector<double>> acc(steps, std::vector<double>(steps, 0.0));
    int64_t batches = 0;
    for (size_t i = 0; i + batch <= starts.size() && batches < max_batches; i += batch, ++batches) {
        std::vector<int32_t> tokens;
        for (int64_t b = 0; b < batch; ++b) {
            auto w = corpus.subspan(starts[i + b], seq);
            tokens.insert(tokens.end(), w.begin(), w.end());
        }
        TrainBatch tb = make_train_batch(target, tokens, batch, seq);
        auto feats = multi_step_rollout(tb, draft, steps);
        auto m = cross_step_infonce_features(feats, tau_c);
        for (int64_t a = 0; a < steps; ++a)
            for (int64_t b = 0; b < steps; ++b) acc[a][b] += m[a][b];
    }
    if (batches == 0) throw DataError("cross_step_infonce: corpus yields no batches");
    for (auto& row : acc)
        for (auto& v : row) v /= static_cast<double>(batches);
    return acc;
}

// ---- measured speedup ----

Metrics metrics_from_records(std::span<const CycleRecord> records, const ModelConfig& cfg,
                             double w_draft_nonhead, double w_target) {
    Metrics m;
    m.tau = acceptance_length(records);
    m.alpha = acceptance_rates(records);
    m.cycles = static_cast<int64_t>(records.size());
    int64_t lm_apps = 0;
    double modeled_spec = 0.0;
    for (const auto& r : records) {
        m.tokens += static_cast<int64_t>(r.emitted.size());
        m.draft_phase_ms += r.draft_ms;
        m.verify_phase_ms += r.verify_ms;
        m.lmhead_rows_draft += r.lmhead_rows_draft;
        m.draft_rows += r.draft_rows;
        lm_apps += r.lm_apps;
        // memory-traffic model: one full-target pass per cycle (parallel
        // verify) plus the draft rows actually touched
        modeled_spec += w_target + static_cast<double>(r.draft_rows) * w_draft_nonhead +
                        static_cast<double>(r.lmhead_rows_draft) * static_cast<double>(cfg.hidden_size);
    }
    const double modeled_vanilla = static_cast<double>(m.tokens) * w_target;
    m.speedup_modeled = modeled_spec > 0 ? modeled_vanilla / modeled_spec : 0.0;
    m.activated_fraction =
        lm_apps > 0 ? static_cast<double>(m.lmhead_rows_draft) /
                          (static_cast<double>(lm_apps) * static_cast<double>(cfg.vocab_size))
                    : 1.0;
    m.warning = "desk-scale CPU wall-clock; not comparable to GPU latency figures";
    return m;
}

Metrics measured_speedup(const TargetModel& target, Drafter& drafter, const EngineConfig& cfg,
                         const std::vector<std::vector<int32_t>>& prompts, const DraftModel* draft) {
    if (prompts.empty()) throw ConfigError("measured_speedup: no prompts");
    using clock = std::chrono::steady_clock;
    std::vector<CycleRecord> all_records;
    double vanilla_ms = 0.0, spec_ms = 0.0;
    for (const auto& prompt : prompts) {
        const auto t0 = clock::now();
        auto vanilla = vanilla_generate(target, prompt, cfg.max_new_tokens, cfg.temperature, cfg.seed,
                                        cfg.eos_token);
        const auto t1 = clock::now();
        GenerateResult spec = generate(target, drafter, cfg, prompt);
        const auto t2 = clock::now();
        (void)vanilla;
        vanilla_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        spec_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
        all_records.insert(all_records.end(), spec.records.begin(), spec.records.end());
    }
    ParamReport tp = count_params(target);
    double w_draft_nonhead = 0.0;
    if (draft) {
        ParamReport dp = count_params(*draft);
        w_draft_nonhead = static_cast<double>(dp.total_without_embedding -
                                              target.config.hidden_size * target.config.vocab_size);
    } else {
        // mirror-style drafters run the target itself
        w_draft_nonhead = static_cast<double>(tp.total_without_embedding -
                                              target.config.hidden_size * target.config.vocab_size);
    }
    Metrics m = metrics_from_records(all_records, target.config, w_draft_nonhead,
                                     static_cast<double>(tp.total_without_embedding));
    m.vanilla_ms = vanilla_ms;
    m.spec_ms = spec_ms;
    m.speedup_measured = spec_ms > 0 ? vanilla_ms / spec_ms : 0.0;
    return m;
}

// ---- chi-square ----

namespace {

// Regularized incomplete gamma functions (series + continued fraction).
double gamma_p_series(double a, double x) {
    double sum = 1.0 / a, term = sum, ap = a;
    for (int i = 0; i < 500; ++i) {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

double gamma_q_contfrac(double a, double x) {
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace

double chi_square_p_value(double stat, double dof) {
    if (dof <= 0) throw ConfigError("chi_square_p_value: dof must be positive");
    if (stat <= 0) return 1.0;
    const double a = dof / 2.0, x = stat / 2.0;
    if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
    return gamma_q_contfrac(a, x);
}

double chi_square_statistic(std::span<const int64_t> counts, std::span<const double> expected_probs,
                            double min_expected, int64_t* dof_out) {
    if (counts.size() != expected_probs.size() || counts.empty())
        throw ConfigError("chi_square_statistic: size mismatch");
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    if (n <= 0) throw ConfigError("chi_square_statistic: empty sample");
    // Merge bins whose expectation falls below the threshold into one.
    double stat = 0.0;
    int64_t bins = 0;
    double merged_expected = 0.0;
    int64_t merged_count = 0;
    for (size_t i = 0; i < counts.size(); ++i) {
        const double expected = expected_probs[i] * static_cast<double>(n);
        if (expected < min_expected) {
            merged_expected += expected;
            merged_count += counts[i];
            continue;
        }
        const double diff = static_cast<double>(counts[i]) - expected;
        stat += diff * diff / expected;
        ++bins;
    }
    if (merged_expected > 0.0) {
        const double diff = static_cast<double>(merged_count) - merged_expected;
        stat += diff * diff / merged_expected;
        ++bins;
    }
    if (bins < 2) throw ConfigError("chi_square_statistic: not enough bins");
    if (dof_out) *dof_out = bins - 1;
    return stat;
}

}  // namespace speclab
