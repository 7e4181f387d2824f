#include "speclab/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "speclab/serialize.hpp"

namespace speclab {

void TrainConfig::validate() const {
    if (w_reg < 0 || w_cls < 0 || w_csra < 0) throw ConfigError("TrainConfig: loss weights must be >= 0");
    if (csra_temperature <= 0) throw ConfigError("TrainConfig: csra_temperature must be positive");
    if (steps < 1) throw ConfigError("TrainConfig: steps must be >= 1");
    if (w_csra > 0 && steps < 2)
        throw ConfigError("TrainConfig: csra loss requires steps >= 2 (single-step caveat)");
    if (batch < 1 || seq < 2) throw ConfigError("TrainConfig: batch must be >= 1 and seq >= 2");
    if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (smooth_l1_beta <= 0) throw ConfigError("TrainConfig: smooth_l1_beta must be positive");
}

// ---- batches ----

TrainBatch make_train_batch(const TargetModel& target, std::span<const int32_t> tokens, int64_t batch,
                            int64_t seq) {
    if (static_cast<int64_t>(tokens.size()) != batch * seq)
        throw ContractError("make_train_batch: token count mismatch");
    if (seq < 2) throw ContractError("make_train_batch: seq must be >= 2");
    NoGradGuard ng;
    TrainBatch out;
    out.tokens.assign(tokens.begin(), tokens.end());
    out.batch = batch;
    out.seq = seq;
    std::vector<Tensor> feats, probs;
    for (int64_t b = 0; b < batch; ++b) {
        ForwardRows fwd = target_forward(target, tokens.subspan(b * seq, seq), nullptr);
        feats.push_back(fwd.features);
        probs.push_back(slice_rows(softmax(fwd.logits, -1), 1, seq));
    }
    out.target_features = concat_rows(feats).detach();
    out.target_probs = concat_rows(probs).detach();
    return out;
}

Tensor batch_target_rows(const TrainBatch& batch) {
    std::vector<int64_t> idx;
    idx.reserve(batch.rows());
    for (int64_t b = 0; b < batch.batch; ++b)
        for (int64_t s = 1; s < batch.seq; ++s) idx.push_back(b * batch.seq + s);
    return gather_rows(batch.target_features, idx);
}

// ---- multi-step rollout ----

namespace {

struct RolloutMasks {
    std::vector<uint8_t> allowed;        // [R×R] causal within each sequence
    std::vector<Tensor> step_selectors;  // per source step m (1-based), 0/1
};

// Key at distance delta = s - p comes from step max(1, j - delta); the
// selector for source m marks the (query,key) pairs owned by step m.
RolloutMasks rollout_masks(int64_t batch, int64_t seq, int64_t j) {
    const int64_t rows_per = seq - 1;
    const int64_t rows = batch * rows_per;
    RolloutMasks out;
    out.allowed.assign(rows * rows, 0);
    std::vector<std::vector<double>> sel(j, std::vector<double>(rows * rows, 0.0));
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t rq = 0; rq < rows_per; ++rq) {
            for (int64_t rk = 0; rk <= rq; ++rk) {
                const int64_t q = b * rows_per + rq;
                const int64_t k = b * rows_per + rk;
                out.allowed[q * rows + k] = 1;
                const int64_t m = std::max<int64_t>(1, j - (rq - rk));
                sel[m - 1][q * rows + k] = 1.0;
            }
        }
    }
    for (auto& s : sel) out.step_selectors.push_back(Tensor::from_data({rows, rows}, std::move(s)));
    return out;
}

}  // namespace

std::vector<Tensor> multi_step_rollout(const TrainBatch& batch, const DraftModel& draft, int64_t steps) {
    if (steps < 1) throw ConfigError("multi_step_rollout: steps must be >= 1");
    if (steps > batch.seq) throw ConfigError("multi_step_rollout: steps exceed the sequence length");
    const auto& cfg = draft.config;
    const int64_t B = batch.batch, S = batch.seq, d = cfg.hidden_size;
    const int64_t rows_per = S - 1;
    const int64_t R = B * rows_per;
    const int64_t heads = cfg.num_heads;
    const int64_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<int64_t> token_idx(R), positions(R);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t s = 1; s < S; ++s) {
            token_idx[b * rows_per + (s - 1)] = batch.tokens[b * S + s];
            positions[b * rows_per + (s - 1)] = s;
        }
    Tensor e = add(gather_rows(draft.embedding, token_idx), positional_rows(positions, d));

    std::vector<Tensor> features;          // per-step outputs
    std::vector<Tensor> ks, vs;            // per-step key/value rows
    for (int64_t j = 1; j <= steps; ++j) {
        // input feature rows: position s consumes step j-1's output at s-1,
        // falling back to the target feature where no step output exists
        std::vector<int64_t> feat_idx(R);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t s = 1; s < S; ++s) {
                const int64_t r = b * rows_per + (s - 1);
                if (j == 1 || s == 1) {
                    feat_idx[r] = b * S + (s - 1);
                } else {
                    feat_idx[r] = B * S + b * rows_per + (s - 2);
                }
            }
        Tensor g;
        if (j == 1) {
            g = gather_rows(batch.target_features, feat_idx);
        } else {
            g = gather_rows(concat_rows({batch.target_features, features[j - 2]}), feat_idx);
        }

        Tensor fused = matmul(concat_cols(e, g), draft.fusion);
        Tensor xn = rms_norm(fused, draft.block.norm_attn);
        Tensor q = matmul(xn, draft.block.wq);
        ks.push_back(matmul(xn, draft.block.wk));
        vs.push_back(matmul(xn, draft.block.wv));

        RolloutMasks masks = rollout_masks(B, S, j);
        Tensor ctx;
        for (int64_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor scores;
            for (int64_t m = 1; m <= j; ++m) {
                Tensor km = slice_cols(ks[m - 1], h * dh, (h + 1) * dh);
                Tensor sm = mul(scale(matmul(qh, transpose(km)), inv_sqrt_dh), masks.step_selectors[m - 1]);
                scores = (m == 1) ? sm : add(scores, sm);
            }
            Tensor probs = masked_softmax_rows(scores, masks.allowed);
            Tensor ch;
            for (int64_t m = 1; m <= j; ++m) {
                Tensor vm = slice_cols(vs[m - 1], h * dh, (h + 1) * dh);
                Tensor cm = matmul(mul(probs, masks.step_selectors[m - 1]), vm);
                ch = (m == 1) ? cm : add(ch, cm);
            }
            ctx = (h == 0) ? ch : concat_cols(ctx, ch);
        }
        Tensor x = add(fused, matmul(ctx, draft.block.wo));
        Tensor xm = rms_norm(x, draft.block.norm_mlp);
        Tensor mlp = matmul(mul(silu(matmul(xm, draft.block.w_gate)), matmul(xm, draft.block.w_up)),
                            draft.block.w_down);
        features.push_back(add(x, mlp));
    }
    return features;
}

// ---- CSRA ----

Tensor csra_loss(const std::vector<Tensor>& step_features, const Tensor& target_rows,
                 const TrainConfig& cfg) {
    const int64_t t = static_cast<int64_t>(step_features.size());
    if (t < 2) throw ConfigError("csra_loss: at least 2 steps of features are required");
    const int64_t R = step_features[0].dim(0);
    for (const auto& f : step_features)
        if (f.dim(0) != R) throw ContractError("csra_loss: step feature row mismatch");
    if (target_rows.dim(0) != R) throw ContractError("csra_loss: target feature row mismatch");

    std::vector<Tensor> all = step_features;
    all.push_back(target_rows);
    Tensor normed = l2_normalize_rows(concat_rows(all));
    Tensor sim = scale(matmul(normed, transpose(normed)), 1.0 / cfg.csra_temperature);

    const int64_t cols = (t + 1) * R;
    std::vector<int64_t> pair_rows;
    std::vector<uint8_t> pair_mask;
    std::vector<std::pair<int64_t, int64_t>> picks;
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t r = 0; r < R; ++r) {
            const int64_t q = i * R + r;
            std::vector<int64_t> positives;
            for (int64_t o = 0; o < t; ++o)
                if (o != i) positives.push_back(o * R + r);
            if (cfg.include_target_positives) positives.push_back(t * R + r);
            for (int64_t pos : positives) {
                const int64_t pr = static_cast<int64_t>(pair_rows.size());
                pair_rows.push_back(q);
                pair_mask.resize((pr + 1) * cols, 1);
                uint8_t* row = &pair_mask[pr * cols];
                row[q] = 0;  // the query itself never appears in the denominator
                for (int64_t other : positives)
                    if (other != pos) row[other] = 0;
                picks.emplace_back(pr, pos);
            }
        }
    }
    Tensor gathered = gather_rows(sim, pair_rows);
    Tensor logp = masked_log_softmax_rows(gathered, pair_mask);
    return scale(pick_mean(logp, picks), -1.0);
}

// ---- optimizer ----

AdamW::AdamW(std::vector<Tensor> params, double lr, double weight_decay, double clip_norm)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), clip_norm_(clip_norm) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::set_lr(double lr) { lr_ = lr; }

void AdamW::step() {
    ++t_;
    double sq = 0.0;
    for (const auto& p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = (clip_norm_ > 0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) continue;
        auto grad = p.grad();
        auto data = p.mutable_data();
        for (int64_t k = 0; k < p.numel(); ++k) {
            const double g = grad[k] * clip;
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
            const double mh = m_[i][k] / bc1;
            const double vh = v_[i][k] / bc2;
            data[k] -= lr_ * (mh / (std::sqrt(vh) + eps_) + weight_decay_ * data[k]);
        }
        p.zero_grad();
    }
}

// ---- draft training ----

namespace {

struct DraftLosses {
    Tensor total, reg, cls, csra;
};

DraftLosses draft_losses(const TrainBatch& batch, const DraftModel& draft, const TrainConfig& cfg) {
    auto steps = multi_step_rollout(batch, draft, cfg.steps);
    Tensor target_rows = batch_target_rows(batch);
    DraftLosses out;
    for (const auto& f : steps) {
        Tensor r = smooth_l1(f, target_rows, cfg.smooth_l1_beta);
        Tensor c = cross_entropy(log_softmax(matmul(f, draft.lm_head), -1), batch.target_probs);
        out.reg = out.reg.defined() ? add(out.reg, r) : r;
        out.cls = out.cls.defined() ? add(out.cls, c) : c;
    }
    out.total = add(scale(out.reg, cfg.w_reg), scale(out.cls, cfg.w_cls));
    if (cfg.w_csra > 0) {
        out.csra = csra_loss(steps, target_rows, cfg);
        out.total = add(out.total, scale(out.csra, cfg.w_csra));
    }
    return out;
}

LossBreakdown to_breakdown(const DraftLosses& l) {
    LossBreakdown b;
    b.total = l.total.item();
    b.reg = l.reg.item();
    b.cls = l.cls.item();
    b.csra = l.csra.defined() ? l.csra.item() : 0.0;
    return b;
}

}  // namespace

LossBreakdown draft_train_step(const TrainBatch& batch, DraftModel& draft, const TrainConfig& cfg,
                               AdamW& opt) {
    DraftLosses l = draft_losses(batch, draft, cfg);
    backward(l.total);
    opt.step();
    return to_breakdown(l);
}

LossBreakdown draft_loss_eval(const TrainBatch& batch, const DraftModel& draft, const TrainConfig& cfg) {
    NoGradGuard ng;
    return to_breakdown(draft_losses(batch, draft, cfg));
}

// ---- shared loop helpers ----

namespace {

std::vector<int64_t> window_starts(int64_t usable, int64_t window, int64_t stride) {
    std::vector<int64_t> starts;
    for (int64_t s = 0; s + window <= usable; s += stride) starts.push_back(s);
    return starts;
}

void shuffle_indices(std::vector<int64_t>& v, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(v[i], v[j]);
    }
}

int64_t eval_split_len(int64_t corpus_len, int64_t seq) {
    return std::min(std::max(seq + 1, corpus_len / 10), corpus_len / 2);
}

double warmup_lr(const TrainConfig& cfg, int64_t t) {
    if (cfg.warmup <= 0 || t >= cfg.warmup) return cfg.lr;
    return cfg.lr * static_cast<double>(t + 1) / static_cast<double>(cfg.warmup);
}

}  // namespace

// ---- target pretraining ----

PretrainResult pretrain_target(std::span<const int32_t> corpus, const ModelConfig& mcfg,
                               const TrainConfig& tcfg) {
    mcfg.validate();
    tcfg.validate();
    const int64_t S = tcfg.seq;
    if (static_cast<int64_t>(corpus.size()) < S + 1)
        throw DataError("corpus shorter than seq+1 tokens");
    const int64_t eval_len = eval_split_len(corpus.size(), S);
    const int64_t train_len = static_cast<int64_t>(corpus.size()) - eval_len;
    if (train_len < S + 1) throw DataError("corpus too short to split for training");

    PretrainResult result;
    result.model = TargetModel::init(mcfg, tcfg.seed);
    result.model.set_requires_grad(true);
    AdamW opt(result.model.parameters(), tcfg.lr, tcfg.weight_decay, tcfg.clip_norm);

    Rng shuffle_rng(tcfg.seed ^ 0xabcdef12345ull);
    auto starts = window_starts(train_len, S + 1, S);
    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        shuffle_indices(starts, shuffle_rng);
        for (size_t i = 0; i < starts.size(); i += tcfg.batch) {
            const int64_t bsz = std::min<int64_t>(tcfg.batch, starts.size() - i);
            opt.set_lr(warmup_lr(tcfg, global_step));
            Tensor loss;
            for (int64_t b = 0; b < bsz; ++b) {
                auto window = corpus.subspan(starts[i + b], S + 1);
                ForwardRows fwd = target_forward(result.model, window.first(S), nullptr);
                std::vector<std::pair<int64_t, int64_t>> picks(S);
                for (int64_t s = 0; s < S; ++s) picks[s] = {s, window[s + 1]};
                Tensor ce = scale(pick_mean(log_softmax(fwd.logits, -1), picks), -1.0);
                loss = loss.defined() ? add(loss, ce) : ce;
            }
            loss = scale(loss, 1.0 / static_cast<double>(bsz));
            backward(loss);
            opt.step();
            result.log.push_back({epoch, global_step, loss.item(), 0.0, loss.item(), 0.0});
            ++global_step;
        }
    }
    result.model.set_requires_grad(false);
    result.held_out_ce = held_out_ce(result.model, corpus.subspan(train_len), S);
    return result;
}

double held_out_ce(const TargetModel& model, std::span<const int32_t> corpus, int64_t seq) {
    if (static_cast<int64_t>(corpus.size()) < seq + 1) throw DataError("held-out slice too short");
    NoGradGuard ng;
    auto starts = window_starts(corpus.size(), seq + 1, seq);
    double total = 0.0;
    int64_t count = 0;
    for (int64_t s0 : starts) {
        auto window = corpus.subspan(s0, seq + 1);
        ForwardRows fwd = target_forward(model, window.first(seq), nullptr);
        Tensor logp = log_softmax(fwd.logits, -1);
        for (int64_t s = 0; s < seq; ++s) {
            total -= logp.at(s, window[s + 1]);
            ++count;
        }
    }
    if (count == 0) throw DataError("held-out slice yields no windows");
    return total / static_cast<double>(count);
}

// ---- draft training loop ----

DraftTrainResult train_draft(const TargetModel& target, std::span<const int32_t> corpus,
                             const TrainConfig& cfg) {
    cfg.validate();
    const int64_t S = cfg.seq;
    if (static_cast<int64_t>(corpus.size()) < S) throw DataError("corpus shorter than seq tokens");

    DraftTrainResult result;
    result.model = DraftModel::init(target, cfg.seed);
    for (auto t : result.model.own_parameters()) t.set_requires_grad(true);
    // tied tensors stay frozen
    result.model.embedding.set_requires_grad(false);
    result.model.lm_head.set_requires_grad(false);
    AdamW opt(result.model.own_parameters(), cfg.lr, cfg.weight_decay, cfg.clip_norm);

    Rng shuffle_rng(cfg.seed ^ 0x5134ab99821ull);
    auto starts = window_starts(corpus.size(), S, S);
    if (starts.empty()) throw DataError("corpus yields no training windows");
    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(starts, shuffle_rng);
        for (size_t i = 0; i < starts.size(); i += cfg.batch) {
            const int64_t bsz = std::min<int64_t>(cfg.batch, starts.size() - i);
            std::vector<int32_t> tokens;
            tokens.reserve(bsz * S);
            for (int64_t b = 0; b < bsz; ++b) {
                auto w = corpus.subspan(starts[i + b], S);
                tokens.insert(tokens.end(), w.begin(), w.end());
            }
            TrainBatch batch = make_train_batch(target, tokens, bsz, S);
            opt.set_lr(warmup_lr(cfg, global_step));
            LossBreakdown l;
            try {
                l = draft_train_step(batch, result.model, cfg, opt);
            } catch (const ContractError& e) {
                throw ContractError("draft training failed at epoch " + std::to_string(epoch) +
                                    " step " + std::to_string(global_step) + ": " + e.what());
            }
            result.log.push_back({epoch, global_step, l.total, l.reg, l.cls, l.csra});
            ++global_step;
        }
    }
    for (auto t : result.model.own_parameters()) t.set_requires_grad(false);
    return result;
}

// ---- router ----

Tensor router_target(const Tensor& q, int64_t head_groups) {
    const bool single = q.rank() == 1;
    const int64_t rows = single ? 1 : q.dim(0);
    const int64_t V = single ? q.dim(0) : q.dim(1);
    if (head_groups <= 0 || V % head_groups != 0)
        throw ConfigError("router_target: vocab must divide evenly into groups");
    const int64_t v = V / head_groups;
    auto qd = q.data();
    std::vector<double> out(rows * head_groups, 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (int64_t x = 0; x < V; ++x) {
            const double p = qd[r * V + x];
            if (p < 0) throw DataError("router_target: negative probability");
            total += p;
            out[r * head_groups + x / v] += p;
        }
        if (std::abs(total - 1.0) > 1e-8)
            throw DataError("router_target: distribution does not sum to 1");
    }
    if (single) return Tensor::from_data({head_groups}, std::move(out));
    return Tensor::from_data({rows, head_groups}, std::move(out));
}

Tensor router_loss(const Tensor& q_router, const Tensor& p_router) {
    if (q_router.shape() != p_router.shape()) throw ContractError("router_loss: shape mismatch");
    const int64_t rows = q_router.rank() == 1 ? 1 : q_router.dim(0);
    Tensor ce = sum(mul(q_router, log_clamped(p_router, 1e-12)));
    return scale(ce, -1.0 / static_cast<double>(rows));
}

RouterData router_stage1(const TargetModel& target, const DraftModel& draft,
                         std::span<const int32_t> corpus, const TrainConfig& cfg) {
    cfg.validate();
    NoGradGuard ng;
    const int64_t S = cfg.seq;
    constexpr int64_t kMaxRows = 16384;
    auto starts = window_starts(corpus.size(), S, S);
    if (starts.empty()) throw DataError("corpus yields no router windows");
    std::vector<Tensor> hs, qs;
    int64_t rows = 0;
    for (int64_t s0 : starts) {
        if (rows >= kMaxRows) break;
        auto window = corpus.subspan(s0, S);
        ForwardRows fwd = target_forward(target, window, nullptr);
        Tensor probs = slice_rows(softmax(fwd.logits, -1), 1, S);
        qs.push_back(router_target(probs, draft.config.head_groups));

        std::vector<int32_t> toks(window.begin() + 1, window.end());
        std::vector<int64_t> pos(S - 1);
        for (int64_t i = 0; i < S - 1; ++i) pos[i] = i + 1;
        Tensor prev = slice_rows(fwd.features, 0, S - 1);
        KvCache cache(1);
        std::vector<uint8_t> mask((S - 1) * (S - 1), 0);
        for (int64_t i = 0; i < S - 1; ++i)
            for (int64_t j = 0; j <= i; ++j) mask[i * (S - 1) + j] = 1;
        hs.push_back(draft_forward_rows(draft, toks, prev, pos, cache, mask));
        rows += S - 1;
    }
    RouterData out;
    out.hidden = concat_rows(hs).detach();
    out.q_router = concat_rows(qs).detach();
    return out;
}

void save_router_data(const std::string& path, const RouterData& data) {
    TensorFile f;
    f.config["kind"] = 4;
    f.tensors.emplace_back("hidden", data.hidden);
    f.tensors.emplace_back("q_router", data.q_router);
    save_tensor_file(path, f);
}

RouterData load_router_data(const std::string& path) {
    TensorFile f = load_tensor_file(path);
    if (f.config_value("kind") != 4) throw DataError("not a router cache file: " + path);
    return {f.tensor("hidden"), f.tensor("q_router")};
}

RouterHead train_router_stage2(const ModelConfig& mcfg, const RouterData& data, const TrainConfig& cfg) {
    cfg.validate();
    RouterHead router = RouterHead::init(mcfg, cfg.seed);
    for (auto t : router.parameters()) t.set_requires_grad(true);
    AdamW opt(router.parameters(), cfg.lr, cfg.weight_decay, cfg.clip_norm);
    const int64_t rows = data.hidden.dim(0);
    constexpr int64_t kBatchRows = 256;
    std::vector<int64_t> order(rows);
    for (int64_t i = 0; i < rows; ++i) order[i] = i;
    Rng rng(cfg.seed ^ 0x77aa55ee11ull);
    int64_t t_step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_indices(order, rng);
        for (int64_t i = 0; i < rows; i += kBatchRows) {
            const int64_t n = std::min(kBatchRows, rows - i);
            std::vector<int64_t> idx(order.begin() + i, order.begin() + i + n);
            Tensor h = gather_rows(data.hidden, idx);
            Tensor q = gather_rows(data.q_router, idx);
            opt.set_lr(warmup_lr(cfg, t_step));
            Tensor loss = router_loss(q, router_forward(router, h));
            backward(loss);
            opt.step();
            ++t_step;
        }
    }
    for (auto t : router.parameters()) t.set_requires_grad(false);
    return router;
}

RouterHead train_router(const TargetModel& target, const DraftModel& draft,
                        std::span<const int32_t> corpus, const TrainConfig& cfg,
                        const std::string& cache_path) {
    std::vector<Tensor> frozen = target.parameters();
    auto own = draft.own_parameters();
    frozen.insert(frozen.end(), own.begin(), own.end());
    const uint64_t before = weights_checksum(frozen);

    RouterData data;
    bool have_cache = false;
    if (!cache_path.empty()) {
        std::ifstream probe(cache_path, std::ios::binary);
        have_cache = probe.good();
    }
    if (have_cache) {
        data = load_router_data(cache_path);
    } else {
        data = router_stage1(target, draft, corpus, cfg);
        if (!cache_path.empty()) save_router_data(cache_path, data);
    }
    RouterHead router = train_router_stage2(draft.config, data, cfg);

    if (weights_checksum(frozen) != before)
        throw ContractError("router training mutated frozen draft/target weights");
    return router;
}

// ---- logging ----

void write_train_log(const std::string& path, std::span<const TrainLogRow> rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot open training log for writing: " + path);
    os << "epoch,step,loss_total,loss_reg,loss_cls,loss_csra\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%.17g,%.17g,%.17g\n",
                      static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.loss_total,
                      r.loss_reg, r.loss_cls, r.loss_csra);
        os << buf;
    }
}

}  // namespace speclab
