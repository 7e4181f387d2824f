#include "speclab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace speclab {

void ModelConfig::validate() const {
    if (vocab_size <= 0 || hidden_size <= 0 || num_layers <= 0 || num_heads <= 0 ||
        intermediate_size <= 0 || max_seq_len <= 0) {
        throw ConfigError("ModelConfig: sizes must be positive");
    }
    if (hidden_size % num_heads != 0) throw ConfigError("ModelConfig: hidden_size must divide by num_heads");
    if (head_groups <= 0 || vocab_size % head_groups != 0)
        throw ConfigError("ModelConfig: vocab_size must divide evenly into head_groups");
    if (router_top_n < 1 || router_top_n > head_groups)
        throw ConfigError("ModelConfig: router_top_n must lie in [1, head_groups]");
}

namespace {
constexpr double kInitStd = 0.02;
}

DecoderBlock DecoderBlock::init(const ModelConfig& cfg, Rng& rng) {
    const int64_t d = cfg.hidden_size, m = cfg.intermediate_size;
    DecoderBlock b;
    b.wq = Tensor::randn({d, d}, rng, kInitStd);
    b.wk = Tensor::randn({d, d}, rng, kInitStd);
    b.wv = Tensor::randn({d, d}, rng, kInitStd);
    b.wo = Tensor::randn({d, d}, rng, kInitStd);
    b.w_gate = Tensor::randn({d, m}, rng, kInitStd);
    b.w_up = Tensor::randn({d, m}, rng, kInitStd);
    b.w_down = Tensor::randn({m, d}, rng, kInitStd);
    b.norm_attn = Tensor::full({d}, 1.0);
    b.norm_mlp = Tensor::full({d}, 1.0);
    return b;
}

std::vector<Tensor> DecoderBlock::parameters() const {
    return {wq, wk, wv, wo, w_gate, w_up, w_down, norm_attn, norm_mlp};
}

// ---- KvCache ----

void KvCache::append_rows(std::span<const int32_t> toks, std::span<const int64_t> pos) {
    if (toks.size() != pos.size()) throw ContractError("KvCache: token/position count mismatch");
    tokens.insert(tokens.end(), toks.begin(), toks.end());
    positions.insert(positions.end(), pos.begin(), pos.end());
}

void KvCache::append_layer(size_t layer, const Tensor& k_new, const Tensor& v_new) {
    if (layer >= layers.size()) throw ContractError("KvCache: layer out of range");
    auto& l = layers[layer];
    if (!l.k.defined()) {
        l.k = k_new.detach();
        l.v = v_new.detach();
    } else {
        l.k = concat_rows({l.k, k_new}).detach();
        l.v = concat_rows({l.v, v_new}).detach();
    }
}

void KvCache::keep_rows(std::span<const int64_t> keep) {
    for (auto& l : layers) {
        if (!l.k.defined()) {
            if (!keep.empty()) throw ContractError("KvCache::keep_rows: empty layer");
            continue;
        }
        if (keep.empty()) {
            l.k = Tensor();
            l.v = Tensor();
        } else {
            l.k = gather_rows(l.k, keep).detach();
            l.v = gather_rows(l.v, keep).detach();
        }
    }
    std::vector<int32_t> new_tokens;
    std::vector<int64_t> new_positions;
    for (int64_t i : keep) {
        if (i < 0 || i >= static_cast<int64_t>(tokens.size()))
            throw ContractError("KvCache::keep_rows: index out of range");
        new_tokens.push_back(tokens[i]);
        new_positions.push_back(positions[i]);
    }
    tokens = std::move(new_tokens);
    positions = std::move(new_positions);
}

void KvCache::truncate(int64_t n) {
    if (n < 0 || n > rows()) throw ContractError("KvCache::truncate: bad length");
    if (n == rows()) return;
    std::vector<int64_t> keep(n);
    for (int64_t i = 0; i < n; ++i) keep[i] = i;
    keep_rows(keep);
}

KvCache KvCache::clone() const {
    KvCache out(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].k.defined()) {
            out.layers[i].k = layers[i].k.detach();
            out.layers[i].v = layers[i].v.detach();
        }
    }
    out.tokens = tokens;
    out.positions = positions;
    return out;
}

namespace {
uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}
}  // namespace

uint64_t KvCache::checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& l : layers) {
        if (!l.k.defined()) continue;
        h = fnv1a(h, l.k.data().data(), l.k.data().size() * sizeof(double));
        h = fnv1a(h, l.v.data().data(), l.v.data().size() * sizeof(double));
    }
    h = fnv1a(h, tokens.data(), tokens.size() * sizeof(int32_t));
    h = fnv1a(h, positions.data(), positions.size() * sizeof(int64_t));
    return h;
}

uint64_t weights_checksum(std::span<const Tensor> tensors) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& t : tensors) h = fnv1a(h, t.data().data(), t.data().size() * sizeof(double));
    return h;
}

// ---- models ----

TargetModel TargetModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    TargetModel m;
    m.config = cfg;
    m.embedding = Tensor::randn({cfg.vocab_size, cfg.hidden_size}, rng, kInitStd);
    for (int64_t i = 0; i < cfg.num_layers; ++i) m.blocks.push_back(DecoderBlock::init(cfg, rng));
    m.final_norm = Tensor::full({cfg.hidden_size}, 1.0);
    m.lm_head = Tensor::randn({cfg.hidden_size, cfg.vocab_size}, rng, kInitStd);
    return m;
}

std::vector<Tensor> TargetModel::parameters() const {
    std::vector<Tensor> out{embedding};
    for (const auto& b : blocks) {
        auto p = b.parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    out.push_back(final_norm);
    out.push_back(lm_head);
    return out;
}

void TargetModel::set_requires_grad(bool value) {
    for (auto t : parameters()) t.set_requires_grad(value);
}

DraftModel DraftModel::init(const TargetModel& target, uint64_t seed) {
    Rng rng(seed);
    DraftModel m;
    m.config = target.config;
    m.embedding = target.embedding;  // tied storage, frozen
    m.lm_head = target.lm_head;      // tied storage, frozen
    m.fusion = Tensor::randn({2 * m.config.hidden_size, m.config.hidden_size}, rng, kInitStd);
    m.block = DecoderBlock::init(m.config, rng);
    return m;
}

std::vector<Tensor> DraftModel::own_parameters() const {
    std::vector<Tensor> out{fusion};
    auto p = block.parameters();
    out.insert(out.end(), p.begin(), p.end());
    return out;
}

void DraftModel::set_requires_grad(bool value) {
    for (auto t : own_parameters()) t.set_requires_grad(value);
}

RouterHead RouterHead::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    RouterHead r;
    r.config = cfg;
    r.w1 = Tensor::randn({cfg.hidden_size, cfg.hidden_size}, rng, kInitStd);
    r.w2 = Tensor::randn({cfg.head_groups, cfg.hidden_size}, rng, kInitStd);
    return r;
}

std::vector<Tensor> RouterHead::parameters() const { return {w1, w2}; }

// ---- parameter accounting ----

namespace {
int64_t block_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.hidden_size, m = cfg.intermediate_size;
    return 4 * d * d + 2 * d * m + m * d + 2 * d;
}

void fill_totals(ParamReport& r) {
    for (const auto& [name, n] : r.components) {
        r.total_with_embedding += n;
        if (name != "embedding") r.total_without_embedding += n;
    }
}
}  // namespace

ParamReport count_params(const TargetModel& model) {
    const auto& cfg = model.config;
    ParamReport r;
    r.components.emplace_back("embedding", cfg.vocab_size * cfg.hidden_size);
    r.components.emplace_back("blocks", cfg.num_layers * block_param_count(cfg));
    r.components.emplace_back("final_norm", cfg.hidden_size);
    r.components.emplace_back("lm_head", cfg.hidden_size * cfg.vocab_size);
    fill_totals(r);
    return r;
}

ParamReport count_params(const DraftModel& model) {
    const auto& cfg = model.config;
    ParamReport r;
    r.components.emplace_back("embedding", cfg.vocab_size * cfg.hidden_size);  // tied, frozen
    r.components.emplace_back("fusion", 2 * cfg.hidden_size * cfg.hidden_size);
    r.components.emplace_back("block", block_param_count(cfg));
    r.components.emplace_back("lm_head", cfg.hidden_size * cfg.vocab_size);  // tied, frozen
    fill_totals(r);
    return r;
}

ParamReport count_params(const RouterHead& router) {
    const auto& cfg = router.config;
    ParamReport r;
    r.components.emplace_back("w1", cfg.hidden_size * cfg.hidden_size);
    r.components.emplace_back("w2", cfg.head_groups * cfg.hidden_size);
    fill_totals(r);
    return r;
}

// ---- forward passes ----

Tensor positional_rows(std::span<const int64_t> positions, int64_t d) {
    std::vector<double> data(positions.size() * static_cast<size_t>(d));
    for (size_t r = 0; r < positions.size(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (int64_t i = 0; i < d; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
            data[r * d + i] = std::sin(pos * freq);
            if (i + 1 < d) data[r * d + i + 1] = std::cos(pos * freq);
        }
    }
    return Tensor::from_data({static_cast<int64_t>(positions.size()), d}, std::move(data));
}

BlockOut block_forward(const DecoderBlock& block, const Tensor& x_new, const Tensor& k_prev,
                       const Tensor& v_prev, std::span<const uint8_t> mask, int64_t num_heads) {
    const int64_t rows = x_new.dim(0), d = x_new.dim(1);
    const int64_t dh = d / num_heads;
    const int64_t prev = k_prev.defined() ? k_prev.dim(0) : 0;
    if (static_cast<int64_t>(mask.size()) != rows * (prev + rows))
        throw ContractError("block_forward: mask size mismatch");

    Tensor xn = rms_norm(x_new, block.norm_attn);
    Tensor q = matmul(xn, block.wq);
    Tensor k = matmul(xn, block.wk);
    Tensor v = matmul(xn, block.wv);
    Tensor k_all = prev ? concat_rows({k_prev, k}) : k;
    Tensor v_all = prev ? concat_rows({v_prev, v}) : v;

    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor ctx;
    for (int64_t h = 0; h < num_heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k_all, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v_all, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor probs = masked_softmax_rows(scores, mask);
        Tensor ch = matmul(probs, vh);
        ctx = (h == 0) ? ch : concat_cols(ctx, ch);
    }
    Tensor x = add(x_new, matmul(ctx, block.wo));
    Tensor xm = rms_norm(x, block.norm_mlp);
    Tensor mlp = matmul(mul(silu(matmul(xm, block.w_gate)), matmul(xm, block.w_up)), block.w_down);
    return {add(x, mlp), k, v};
}

namespace {

void check_tokens(std::span<const int32_t> tokens, const ModelConfig& cfg) {
    for (int32_t t : tokens) {
        if (t < 0 || t >= cfg.vocab_size)
            throw DataError("token id " + std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
}

void check_positions(std::span<const int64_t> positions, const ModelConfig& cfg) {
    for (int64_t p : positions) {
        if (p < 0 || p >= cfg.max_seq_len)
            throw ContractError("position " + std::to_string(p) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
    }
}

std::vector<uint8_t> causal_mask(int64_t prev, int64_t rows) {
    std::vector<uint8_t> mask(rows * (prev + rows), 0);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j <= prev + i; ++j) mask[i * (prev + rows) + j] = 1;
    return mask;
}

}  // namespace

ForwardRows target_forward_rows(const TargetModel& model, std::span<const int32_t> tokens,
                                std::span<const int64_t> positions, KvCache& cache,
                                std::span<const uint8_t> mask) {
    check_tokens(tokens, model.config);
    check_positions(positions, model.config);
    if (cache.layers.size() != static_cast<size_t>(model.config.num_layers))
        throw ContractError("target_forward_rows: cache layer count mismatch");
    std::vector<int64_t> token_rows(tokens.begin(), tokens.end());
    Tensor x = add(gather_rows(model.embedding, token_rows),
                   positional_rows(positions, model.config.hidden_size));
    for (size_t l = 0; l < model.blocks.size(); ++l) {
        BlockOut out = block_forward(model.blocks[l], x, cache.layers[l].k, cache.layers[l].v, mask,
                                     model.config.num_heads);
        cache.append_layer(l, out.k, out.v);
        x = out.y;
    }
    cache.append_rows(tokens, positions);
    Tensor features = rms_norm(x, model.final_norm);
    Tensor logits = matmul(features, model.lm_head);
    return {features, logits};
}

ForwardRows target_forward(const TargetModel& model, std::span<const int32_t> tokens, KvCache* cache) {
    KvCache local(model.config.num_layers);
    KvCache& c = cache ? *cache : local;
    if (c.layers.size() != static_cast<size_t>(model.config.num_layers))
        throw ContractError("target_forward: cache layer count mismatch");
    const int64_t prev = c.rows();
    if (prev > static_cast<int64_t>(tokens.size()))
        throw ContractError("target_forward: cache longer than provided tokens");
    for (int64_t i = 0; i < prev; ++i) {
        if (c.tokens[i] != tokens[i])
            throw ContractError("target_forward: cache is not a prefix of the provided tokens");
    }
    const int64_t rows = static_cast<int64_t>(tokens.size()) - prev;
    if (rows == 0) throw ContractError("target_forward: no new tokens to process");
    std::vector<int64_t> positions(rows);
    for (int64_t i = 0; i < rows; ++i) positions[i] = prev + i;
    auto mask = causal_mask(prev, rows);
    return target_forward_rows(model, tokens.subspan(prev), positions, c, mask);
}

Tensor draft_forward_rows(const DraftModel& model, std::span<const int32_t> tokens,
                          const Tensor& prev_features, std::span<const int64_t> positions,
                          KvCache& cache, std::span<const uint8_t> mask) {
    check_tokens(tokens, model.config);
    check_positions(positions, model.config);
    if (cache.layers.size() != 1) throw ContractError("draft cache must have exactly one layer");
    if (prev_features.dim(0) != static_cast<int64_t>(tokens.size()))
        throw ContractError("draft_forward_rows: feature row count mismatch");
    std::vector<int64_t> token_rows(tokens.begin(), tokens.end());
    Tensor e = add(gather_rows(model.embedding, token_rows),
                   positional_rows(positions, model.config.hidden_size));
    Tensor fused = matmul(concat_cols(e, prev_features), model.fusion);
    BlockOut out = block_forward(model.block, fused, cache.layers[0].k, cache.layers[0].v, mask,
                                 model.config.num_heads);
    cache.append_layer(0, out.k, out.v);
    cache.append_rows(tokens, positions);
    return out.y;
}

DraftStep draft_forward(const DraftModel& model, const Tensor& prev_feature, int32_t token,
                        int64_t position, KvCache& cache) {
    if (prev_feature.numel() != model.config.hidden_size)
        throw ContractError("draft_forward: prev_feature must hold hidden_size values");
    Tensor prev = reshape(prev_feature, {1, model.config.hidden_size});
    const int32_t toks[1] = {token};
    const int64_t pos[1] = {position};
    auto mask = causal_mask(cache.rows(), 1);
    Tensor f = draft_forward_rows(model, toks, prev, pos, cache, mask);
    Tensor row = reshape(f, {model.config.hidden_size});
    return {row, row};
}

Tensor router_forward(const RouterHead& router, const Tensor& h) {
    const int64_t d = router.config.hidden_size;
    const bool single = h.rank() == 1;
    if ((single && h.dim(0) != d) || (!single && h.dim(1) != d))
        throw ContractError("router_forward: hidden size mismatch");
    Tensor rows = single ? reshape(h, {1, d}) : h;
    Tensor pre = matmul(rows, transpose(router.w1));
    Tensor act;
    if (router.config.router_act == RouterAct::Silu) {
        act = silu(pre);
    } else {
        std::vector<double> m(pre.numel());
        auto pd = pre.data();
        for (size_t i = 0; i < m.size(); ++i) m[i] = pd[i] > 0 ? 1.0 : 0.0;
        act = mul(pre, Tensor::from_data(pre.shape(), std::move(m)));
    }
    Tensor logits = matmul(add(act, rows), transpose(router.w2));
    Tensor p = softmax(logits, -1);
    return single ? reshape(p, {router.config.head_groups}) : p;
}

GroupedDistribution grouped_head_prob(const Tensor& h, const Tensor& p_router,
                                      std::span<const int> active_groups, const Tensor& lm_head,
                                      const ModelConfig& cfg) {
    if (active_groups.empty()) throw ConfigError("grouped_head_prob: empty active group set");
    const int64_t d = cfg.hidden_size, v = cfg.group_size();
    if (h.numel() != d) throw ContractError("grouped_head_prob: hidden state must be [d]");
    if (p_router.numel() != cfg.head_groups)
        throw ContractError("grouped_head_prob: router distribution must be [N]");
    GroupedDistribution out;
    out.probs.assign(cfg.vocab_size, 0.0);
    out.active_groups.assign(active_groups.begin(), active_groups.end());
    std::sort(out.active_groups.begin(), out.active_groups.end());
    auto hd = h.data();
    auto head = lm_head.data();
    auto pr = p_router.data();
    for (int g : out.active_groups) {
        if (g < 0 || g >= cfg.head_groups) throw ContractError("grouped_head_prob: group id out of range");
        out.active_mass += pr[g];
        const int64_t c0 = g * v;
        std::vector<double> logits(v, 0.0);
        for (int64_t p = 0; p < d; ++p) {
            const double hv = hd[p];
            if (hv == 0.0) continue;
            const double* row = &head[p * cfg.vocab_size + c0];
            for (int64_t j = 0; j < v; ++j) logits[j] += hv * row[j];
        }
        double mx = logits[0];
        for (double x : logits) mx = std::max(mx, x);
        double denom = 0.0;
        for (double x : logits) denom += std::exp(x - mx);
        for (int64_t j = 0; j < v; ++j) out.probs[c0 + j] = pr[g] * (std::exp(logits[j] - mx) / denom);
    }
    return out;
}

}  // namespace speclab
