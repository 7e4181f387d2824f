#include "speclab/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

namespace speclab {

void EngineConfig::validate() const {
    if (gamma < 1) throw ConfigError("EngineConfig: gamma must be >= 1");
    if (tree_depth < 1) throw ConfigError("EngineConfig: tree_depth must be >= 1");
    if (tree_budget < tree_depth)
        throw ConfigError("EngineConfig: tree_budget must be >= tree_depth");
    if (temperature < 0) throw ConfigError("EngineConfig: temperature must be >= 0");
    if (max_new_tokens < 0) throw ConfigError("EngineConfig: max_new_tokens must be >= 0");
    if (router_top_n < 1) throw ConfigError("EngineConfig: router_top_n must be >= 1");
}

int64_t DraftTree::max_depth() const {
    int64_t d = 0;
    for (const auto& n : nodes) d = std::max<int64_t>(d, n.depth);
    return d;
}

std::vector<std::vector<int32_t>> DraftTree::children() const {
    std::vector<std::vector<int32_t>> out(nodes.size());
    for (size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].parent >= 0) out[nodes[i].parent].push_back(static_cast<int32_t>(i));
    }
    return out;
}

std::vector<int32_t> DraftTree::root_children() const {
    std::vector<int32_t> out;
    for (size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i].parent < 0) out.push_back(static_cast<int32_t>(i));
    return out;
}

std::vector<int32_t> DraftTree::greedy_path() const {
    auto kids = children();
    std::vector<int32_t> path;
    int32_t cur = -1;
    while (true) {
        const std::vector<int32_t>& cands = (cur < 0) ? root_children() : kids[cur];
        if (cands.empty()) break;
        int32_t best = cands[0];
        for (int32_t c : cands) {
            const double pc = dists[nodes[c].dist_id][nodes[c].token];
            const double pb = dists[nodes[best].dist_id][nodes[best].token];
            if (pc > pb) best = c;
        }
        path.push_back(best);
        cur = best;
    }
    return path;
}

int32_t argmax_token(std::span<const double> scores) {
    int32_t best = 0;
    for (size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = static_cast<int32_t>(i);
    return best;
}

// ---- verification cores ----

VerifyCoreResult verify_tree_greedy(const DraftTree& tree, std::span<const double> root_scores,
                                    const std::vector<std::vector<double>>& node_scores) {
    if (node_scores.size() != tree.nodes.size())
        throw ContractError("verify_tree_greedy: score row count mismatch");
    auto kids = tree.children();
    VerifyCoreResult res;
    res.depth_flags.assign(tree.max_depth(), -1);

    std::span<const double> cur = root_scores;
    int32_t cur_node = -1;
    int64_t depth = 1;
    while (true) {
        const std::vector<int32_t>& cands = (cur_node < 0) ? tree.root_children() : kids[cur_node];
        const int32_t want = argmax_token(cur);
        if (cands.empty()) {
            res.emitted.push_back(want);  // bonus token
            break;
        }
        int32_t match = -1;
        for (int32_t c : cands) {
            if (tree.nodes[c].token == want) {
                match = c;
                break;
            }
        }
        if (match < 0) {
            res.depth_flags[depth - 1] = 0;
            res.emitted.push_back(want);  // bonus token
            break;
        }
        res.depth_flags[depth - 1] = 1;
        res.emitted.push_back(want);
        res.accepted_nodes.push_back(match);
        ++res.accepted;
        cur_node = match;
        cur = node_scores[match];
        ++depth;
    }
    return res;
}

namespace {

// q <- norm(max(q - p, 0)); falls back to zeroing the rejected token when the
// residual underflows to numerical dust.
void residual_update(std::vector<double>& q, std::span<const double> p, int32_t rejected) {
    double total = 0.0;
    for (size_t i = 0; i < q.size(); ++i) {
        q[i] = std::max(q[i] - p[i], 0.0);
        total += q[i];
    }
    if (total <= 1e-15) {
        double fallback = 0.0;
        for (size_t i = 0; i < q.size(); ++i) fallback += (i == static_cast<size_t>(rejected)) ? 0.0 : q[i];
        if (fallback <= 0.0) throw ContractError("verify: residual distribution vanished");
        q[rejected] = 0.0;
        total = fallback;
    }
    for (auto& v : q) v /= total;
}

}  // namespace

VerifyCoreResult verify_tree_stochastic(const DraftTree& tree, std::span<const double> root_probs,
                                        const std::vector<std::vector<double>>& node_probs,
                                        RandomSource& rs) {
    if (node_probs.size() != tree.nodes.size())
        throw ContractError("verify_tree_stochastic: probability row count mismatch");
    auto kids = tree.children();
    VerifyCoreResult res;
    res.depth_flags.assign(tree.max_depth(), -1);

    std::vector<double> q(root_probs.begin(), root_probs.end());
    int32_t cur_node = -1;
    int64_t depth = 1;
    while (true) {
        const std::vector<int32_t>& cands = (cur_node < 0) ? tree.root_children() : kids[cur_node];
        if (cands.empty()) break;
        bool descended = false;
        for (int32_t c : cands) {
            const auto& p = tree.dists[tree.nodes[c].dist_id];
            const int32_t x = tree.nodes[c].token;
            if (p[x] <= 0.0)
                throw ContractError("verify: drafted token has zero recorded draft probability");
            if (rs.bernoulli(q[x] / p[x])) {
                res.emitted.push_back(x);
                res.accepted_nodes.push_back(c);
                ++res.accepted;
                res.depth_flags[depth - 1] = 1;
                q.assign(node_probs[c].begin(), node_probs[c].end());
                cur_node = c;
                descended = true;
                break;
            }
            residual_update(q, p, x);
        }
        if (!descended) {
            res.depth_flags[depth - 1] = 0;
            break;
        }
        ++depth;
    }
    res.emitted.push_back(static_cast<int32_t>(rs.categorical(q)));  // bonus token
    return res;
}

// ---- proposal helpers ----

namespace {

std::vector<double> temp_softmax(std::span<const double> logits, double temperature) {
    const double t = temperature > 0 ? temperature : 1.0;
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> out(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp((logits[i] - mx) / t);
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return out;
}

std::vector<double> logits_of(const Tensor& h, const Tensor& lm_head) {
    Tensor row = reshape(h, {1, h.numel()});
    Tensor logits = matmul(row, lm_head);
    return {logits.data().begin(), logits.data().end()};
}

std::vector<int> top_groups(std::span<const double> p_router, int64_t top_n) {
    std::vector<int> ids(p_router.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return p_router[a] > p_router[b]; });
    ids.resize(std::min<size_t>(ids.size(), static_cast<size_t>(top_n)));
    std::sort(ids.begin(), ids.end());
    return ids;
}

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

}  // namespace

RoutedProposal routed_proposal(const DraftModel& draft, const RouterHead& router, const Tensor& h,
                               int64_t top_n, double temperature) {
    NoGradGuard ng;
    if (top_n < 1 || top_n > draft.config.head_groups)
        throw ConfigError("routed_proposal: top_n out of range");
    Tensor p_router = router_forward(router, h);
    auto active = top_groups(p_router.data(), top_n);
    Tensor h_scaled = temperature > 0 ? scale(h, 1.0 / temperature) : h;
    GroupedDistribution g = grouped_head_prob(h_scaled, p_router, active, draft.lm_head, draft.config);
    RoutedProposal out;
    out.factorized = g.probs;
    out.active_groups = g.active_groups;
    out.active_mass = g.active_mass;
    out.lmhead_rows = static_cast<int64_t>(active.size()) * draft.config.group_size();
    out.probs = g.probs;
    if (g.active_mass <= 0.0) throw ContractError("routed_proposal: active mass is zero");
    for (auto& v : out.probs) v /= g.active_mass;
    return out;
}

// ---- shared tree-building machinery ----

namespace {

// Largest-remainder apportionment of `total` children among frontier nodes,
// weighted by exp(cum_logprob). Value-independent of the children drawn.
std::vector<int64_t> allocate_children(const std::vector<double>& weights, int64_t total) {
    const size_t n = weights.size();
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    std::vector<int64_t> counts(n, 0);
    std::vector<std::pair<double, size_t>> frac;
    int64_t assigned = 0;
    for (size_t i = 0; i < n; ++i) {
        const double share = wsum > 0 ? weights[i] / wsum * static_cast<double>(total)
                                      : static_cast<double>(total) / static_cast<double>(n);
        counts[i] = static_cast<int64_t>(share);
        assigned += counts[i];
        frac.emplace_back(share - static_cast<double>(counts[i]), i);
    }
    std::stable_sort(frac.begin(), frac.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (size_t k = 0; assigned < total; ++k, ++assigned) counts[frac[k % n].second] += 1;
    return counts;
}

struct TreeBuilder {
    const EngineConfig& cfg;
    RandomSource& rs;
    DraftTree tree;
    // frontier node ids (-1 for the root) paired with proposal dist ids
    std::vector<int32_t> frontier;

    int32_t add_dist(std::vector<double> probs) {
        tree.dists.push_back(std::move(probs));
        return static_cast<int32_t>(tree.dists.size()) - 1;
    }

    // Greedy expansion: global top-k candidates by cumulative log prob.
    // `dist_of[f]` is the dist id of frontier entry f.
    std::vector<int32_t> expand_greedy(const std::vector<int32_t>& dist_of, int64_t k, int64_t depth) {
        struct Cand {
            int32_t frontier_idx;
            int32_t token;
            double cum;
        };
        std::vector<Cand> cands;
        for (size_t f = 0; f < frontier.size(); ++f) {
            const double base = frontier[f] < 0 ? 0.0 : tree.nodes[frontier[f]].cum_logprob;
            const auto& probs = tree.dists[dist_of[f]];
            for (size_t x = 0; x < probs.size(); ++x) {
                if (probs[x] <= 0.0) continue;
                cands.push_back({static_cast<int32_t>(f), static_cast<int32_t>(x),
                                 base + std::log(probs[x])});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.cum != b.cum) return a.cum > b.cum;
            if (a.frontier_idx != b.frontier_idx) return a.frontier_idx < b.frontier_idx;
            return a.token < b.token;
        });
        std::vector<int32_t> added;
        const int64_t take = std::min<int64_t>(k, cands.size());
        for (int64_t i = 0; i < take; ++i) {
            const auto& c = cands[i];
            tree.nodes.push_back({c.token, frontier[c.frontier_idx], static_cast<int32_t>(depth),
                                  c.cum, dist_of[c.frontier_idx]});
            added.push_back(static_cast<int32_t>(tree.nodes.size()) - 1);
        }
        return added;
    }

    // Stochastic expansion: children are i.i.d. samples from each frontier
    // node's proposal; counts fixed by ancestor weights only, so multi-round
    // rejection over the siblings stays lossless.
    std::vector<int32_t> expand_sampled(const std::vector<int32_t>& dist_of, int64_t k, int64_t depth) {
        std::vector<double> weights(frontier.size());
        for (size_t f = 0; f < frontier.size(); ++f)
            weights[f] = frontier[f] < 0 ? 1.0 : std::exp(tree.nodes[frontier[f]].cum_logprob);
        auto counts = allocate_children(weights, k);
        std::vector<int32_t> added;
        for (size_t f = 0; f < frontier.size(); ++f) {
            const auto& probs = tree.dists[dist_of[f]];
            const double base = frontier[f] < 0 ? 0.0 : tree.nodes[frontier[f]].cum_logprob;
            for (int64_t c = 0; c < counts[f]; ++c) {
                const auto tok = static_cast<int32_t>(rs.categorical(probs));
                tree.nodes.push_back({tok, frontier[f], static_cast<int32_t>(depth),
                                      base + std::log(probs[tok]), dist_of[f]});
                added.push_back(static_cast<int32_t>(tree.nodes.size()) - 1);
            }
        }
        return added;
    }

    // Keep the best `budget` nodes; ancestors always rank at least as high as
    // their descendants, so the kept set is closed under parents.
    void rerank_to_budget() {
        if (static_cast<int64_t>(tree.nodes.size()) <= cfg.tree_budget) return;
        std::vector<int32_t> order(tree.nodes.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int32_t>(i);
        std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
            if (tree.nodes[a].cum_logprob != tree.nodes[b].cum_logprob)
                return tree.nodes[a].cum_logprob > tree.nodes[b].cum_logprob;
            return a < b;
        });
        order.resize(cfg.tree_budget);
        std::sort(order.begin(), order.end());  // preserve creation order
        std::vector<int32_t> remap(tree.nodes.size(), -1);
        std::vector<DraftTreeNode> kept;
        for (size_t i = 0; i < order.size(); ++i) {
            DraftTreeNode n = tree.nodes[order[i]];
            if (n.parent >= 0) {
                if (remap[n.parent] < 0)
                    throw ContractError("tree re-rank dropped an ancestor");
                n.parent = remap[n.parent];
            }
            remap[order[i]] = static_cast<int32_t>(i);
            kept.push_back(n);
        }
        tree.nodes = std::move(kept);
    }
};

}  // namespace

// ---- EagleDrafter ----

EagleDrafter::EagleDrafter(const DraftModel& model, const RouterHead* router)
    : model_(model), router_(router), cache_(1) {}

void EagleDrafter::reset() {
    cache_ = KvCache(1);
    last_feature_ = Tensor();
    last_position_ = -1;
    perm_rows_ = 0;
}

void EagleDrafter::extend_context(std::span<const int32_t> tokens, const Tensor& prev_features,
                                  int64_t start_pos) {
    NoGradGuard ng;
    if (tokens.empty()) return;
    if (cache_.rows() != perm_rows_) throw ContractError("EagleDrafter: transient rows not rolled back");
    // Rows exist for positions >= 1: position 0 has no previous feature. A
    // one-token context bootstraps with a zero feature so drafting can start.
    int64_t skip = 0;
    if (start_pos == 0 && tokens.size() > 1) skip = 1;
    const int64_t n = static_cast<int64_t>(tokens.size()) - skip;
    std::vector<int32_t> toks(tokens.begin() + skip, tokens.end());
    std::vector<int64_t> pos(n);
    for (int64_t i = 0; i < n; ++i) pos[i] = start_pos + skip + i;
    std::vector<int64_t> feat_rows(n);
    for (int64_t i = 0; i < n; ++i) feat_rows[i] = skip + i;
    Tensor prev = gather_rows(prev_features, feat_rows);

    const int64_t p = cache_.rows();
    std::vector<uint8_t> mask(n * (p + n), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= p + i; ++j) mask[i * (p + n) + j] = 1;
    Tensor feats = draft_forward_rows(model_, toks, prev, pos, cache_, mask);
    last_feature_ = reshape(slice_rows(feats, n - 1, n), {model_.config.hidden_size}).detach();
    last_position_ = pos[n - 1];
    perm_rows_ = cache_.rows();
    pending_rows_ += n;
}

EagleDrafter::Proposal EagleDrafter::propose(const Tensor& h, const EngineConfig& cfg) {
    Proposal out;
    if (router_ && cfg.use_router) {
        RoutedProposal rp = routed_proposal(model_, *router_, h, cfg.router_top_n, cfg.temperature);
        out.sample_probs = std::move(rp.probs);
        out.active_groups = std::move(rp.active_groups);
        out.lmhead_rows = rp.lmhead_rows;
    } else {
        auto logits = logits_of(h, model_.lm_head);
        out.sample_probs = temp_softmax(logits, cfg.temperature);
        out.lmhead_rows = model_.config.vocab_size;
    }
    return out;
}

DraftTree EagleDrafter::draft(const EngineConfig& cfg, RandomSource& rs, CycleRecord& rec) {
    NoGradGuard ng;
    if (!last_feature_.defined()) throw ContractError("EagleDrafter: no context to draft from");
    rec.draft_rows += pending_rows_;
    pending_rows_ = 0;

    TreeBuilder tb{cfg, rs, {}, {}};
    const int64_t depth_limit = cfg.mode == DraftMode::Chain ? cfg.gamma : cfg.tree_depth;
    const int64_t per_depth = cfg.mode == DraftMode::Chain
                                  ? 1
                                  : (cfg.tree_budget + cfg.tree_depth - 1) / cfg.tree_depth;

    auto account = [&](const std::vector<Proposal>& props, int64_t rows) {
        int64_t rows_total = 0;
        std::vector<uint8_t> in_union(model_.config.head_groups, 0);
        bool routed = false;
        for (const auto& p : props) {
            rows_total += p.lmhead_rows;
            if (!p.active_groups.empty()) {
                routed = true;
                for (int g : p.active_groups) in_union[g] = 1;
            }
        }
        rec.lmhead_rows_draft += rows_total;
        rec.lm_apps += static_cast<int64_t>(props.size());
        if (routed) {
            int64_t u = 0;
            for (uint8_t b : in_union) u += b;
            rec.active_groups.push_back(u);
            tb.tree.active_union_per_depth.push_back(u);
        } else {
            rec.active_groups.push_back(model_.config.head_groups);
            tb.tree.active_union_per_depth.push_back(model_.config.head_groups);
        }
        rec.draft_rows += rows;
    };

    // Root proposal comes from the last permanent row's feature.
    Proposal root_prop = propose(last_feature_, cfg);
    account({root_prop}, 0);
    tb.frontier = {-1};
    std::vector<int32_t> dist_of = {tb.add_dist(root_prop.sample_probs)};

    // node id -> feature of its processed row (input for its children)
    std::vector<Tensor> node_features(0);

    int64_t created = 0;
    for (int64_t depth = 1; depth <= depth_limit; ++depth) {
        const int64_t remaining = cfg.mode == DraftMode::Chain
                                      ? 1
                                      : std::min<int64_t>(per_depth, cfg.tree_budget - created);
        if (remaining <= 0) break;
        std::vector<int32_t> added;
        if (cfg.temperature > 0 && cfg.mode == DraftMode::Tree) {
            added = tb.expand_sampled(dist_of, remaining, depth);
        } else if (cfg.temperature > 0) {
            // chain sampling: one draw from the single frontier proposal
            const auto& probs = tb.tree.dists[dist_of[0]];
            const auto tok = static_cast<int32_t>(rs.categorical(probs));
            const double base = tb.frontier[0] < 0 ? 0.0 : tb.tree.nodes[tb.frontier[0]].cum_logprob;
            tb.tree.nodes.push_back({tok, tb.frontier[0], static_cast<int32_t>(depth),
                                     base + std::log(probs[tok]), dist_of[0]});
            added = {static_cast<int32_t>(tb.tree.nodes.size()) - 1};
        } else {
            added = tb.expand_greedy(dist_of, remaining, depth);
        }
        if (added.empty()) break;
        created += static_cast<int64_t>(added.size());

        if (depth == depth_limit) break;  // no proposals needed past the last depth

        // Process the new frontier rows to obtain their output features.
        const int64_t n = static_cast<int64_t>(added.size());
        std::vector<int32_t> toks(n);
        std::vector<int64_t> pos(n);
        std::vector<Tensor> prev_rows(n);
        for (int64_t i = 0; i < n; ++i) {
            const auto& node = tb.tree.nodes[added[i]];
            toks[i] = node.token;
            pos[i] = last_position_ + node.depth;
            prev_rows[i] = node.parent < 0 ? reshape(last_feature_, {1, model_.config.hidden_size})
                                           : reshape(node_features[node.parent],
                                                     {1, model_.config.hidden_size});
        }
        Tensor prev = concat_rows(prev_rows);
        // mask: permanent rows + transient ancestor rows + self
        const int64_t p = cache_.rows();
        std::vector<uint8_t> mask(n * (p + n), 0);
        std::vector<int64_t> cache_row_of_node(tb.tree.nodes.size(), -1);
        // transient rows were appended in node order for all previous depths
        {
            int64_t next_row = perm_rows_;
            for (size_t i = 0; i < node_features.size(); ++i)
                if (node_features[i].defined()) cache_row_of_node[i] = next_row++;
        }
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < perm_rows_; ++j) mask[i * (p + n) + j] = 1;
            int32_t anc = tb.tree.nodes[added[i]].parent;
            while (anc >= 0) {
                const int64_t row = cache_row_of_node[anc];
                if (row < 0) throw ContractError("EagleDrafter: ancestor row missing");
                mask[i * (p + n) + row] = 1;
                anc = tb.tree.nodes[anc].parent;
            }
            mask[i * (p + n) + p + i] = 1;
        }
        Tensor feats = draft_forward_rows(model_, toks, prev, pos, cache_, mask);
        rec.draft_rows += n;

        node_features.resize(tb.tree.nodes.size());
        std::vector<Proposal> props(n);
        tb.frontier.clear();
        dist_of.clear();
        for (int64_t i = 0; i < n; ++i) {
            node_features[added[i]] =
                reshape(slice_rows(feats, i, i + 1), {model_.config.hidden_size}).detach();
            props[i] = propose(node_features[added[i]], cfg);
            tb.frontier.push_back(added[i]);
            dist_of.push_back(tb.add_dist(props[i].sample_probs));
        }
        account(props, 0);
    }

    if (cfg.temperature == 0 && cfg.mode == DraftMode::Tree) tb.rerank_to_budget();
    rec.drafted += static_cast<int64_t>(tb.tree.nodes.size());
    return tb.tree;
}

void EagleDrafter::rollback() {
    cache_.truncate(perm_rows_);
}

// ---- MirrorDrafter ----

MirrorDrafter::MirrorDrafter(const TargetModel& model)
    : model_(model), cache_(model.config.num_layers) {}

void MirrorDrafter::reset() {
    cache_ = KvCache(model_.config.num_layers);
    last_logits_.clear();
    last_position_ = -1;
    perm_rows_ = 0;
}

void MirrorDrafter::extend_context(std::span<const int32_t> tokens, const Tensor& prev_features,
                                   int64_t start_pos) {
    (void)prev_features;  // the mirror runs the target itself
    NoGradGuard ng;
    if (tokens.empty()) return;
    if (cache_.rows() != perm_rows_) throw ContractError("MirrorDrafter: transient rows not rolled back");
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t p = cache_.rows();
    std::vector<int64_t> pos(n);
    for (int64_t i = 0; i < n; ++i) pos[i] = start_pos + i;
    std::vector<uint8_t> mask(n * (p + n), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= p + i; ++j) mask[i * (p + n) + j] = 1;
    ForwardRows fwd = target_forward_rows(model_, tokens, pos, cache_, mask);
    Tensor last = slice_rows(fwd.logits, n - 1, n);
    last_logits_.assign(last.data().begin(), last.data().end());
    last_position_ = pos[n - 1];
    perm_rows_ = cache_.rows();
}

DraftTree MirrorDrafter::draft(const EngineConfig& cfg, RandomSource& rs, CycleRecord& rec) {
    NoGradGuard ng;
    if (last_logits_.empty()) throw ContractError("MirrorDrafter: no context to draft from");

    TreeBuilder tb{cfg, rs, {}, {}};
    const int64_t depth_limit = cfg.mode == DraftMode::Chain ? cfg.gamma : cfg.tree_depth;
    const int64_t per_depth = cfg.mode == DraftMode::Chain
                                  ? 1
                                  : (cfg.tree_budget + cfg.tree_depth - 1) / cfg.tree_depth;

    tb.frontier = {-1};
    tb.tree.dists.push_back(temp_softmax(last_logits_, cfg.temperature));
    std::vector<int32_t> dist_of = {0};
    rec.lmhead_rows_draft += model_.config.vocab_size;
    rec.lm_apps += 1;
    rec.active_groups.push_back(model_.config.head_groups);

    std::vector<int64_t> cache_row_of_node;
    int64_t created = 0;
    for (int64_t depth = 1; depth <= depth_limit; ++depth) {
        const int64_t remaining = cfg.mode == DraftMode::Chain
                                      ? 1
                                      : std::min<int64_t>(per_depth, cfg.tree_budget - created);
        if (remaining <= 0) break;
        std::vector<int32_t> added;
        if (cfg.temperature > 0 && cfg.mode == DraftMode::Tree) {
            added = tb.expand_sampled(dist_of, remaining, depth);
        } else if (cfg.temperature > 0) {
            const auto& probs = tb.tree.dists[dist_of[0]];
            const auto tok = static_cast<int32_t>(rs.categorical(probs));
            const double base = tb.frontier[0] < 0 ? 0.0 : tb.tree.nodes[tb.frontier[0]].cum_logprob;
            tb.tree.nodes.push_back({tok, tb.frontier[0], static_cast<int32_t>(depth),
                                     base + std::log(probs[tok]), dist_of[0]});
            added = {static_cast<int32_t>(tb.tree.nodes.size()) - 1};
        } else {
            added = tb.expand_greedy(dist_of, remaining, depth);
        }
        if (added.empty()) break;
        created += static_cast<int64_t>(added.size());
        if (depth == depth_limit) break;

        const int64_t n = static_cast<int64_t>(added.size());
        std::vector<int32_t> toks(n);
        std::vector<int64_t> pos(n);
        for (int64_t i = 0; i < n; ++i) {
            toks[i] = tb.tree.nodes[added[i]].token;
            pos[i] = last_position_ + tb.tree.nodes[added[i]].depth;
        }
        const int64_t p = cache_.rows();
        std::vector<uint8_t> mask(n * (p + n), 0);
        cache_row_of_node.resize(tb.tree.nodes.size(), -1);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < perm_rows_; ++j) mask[i * (p + n) + j] = 1;
            int32_t anc = tb.tree.nodes[added[i]].parent;
            while (anc >= 0) {
                const int64_t row = cache_row_of_node[anc];
                if (row < 0) throw ContractError("MirrorDrafter: ancestor row missing");
                mask[i * (p + n) + row] = 1;
                anc = tb.tree.nodes[anc].parent;
            }
            mask[i * (p + n) + p + i] = 1;
        }
        ForwardRows fwd = target_forward_rows(model_, toks, pos, cache_, mask);
        rec.draft_rows += n;
        rec.lm_apps += n;
        rec.lmhead_rows_draft += n * model_.config.vocab_size;
        rec.active_groups.push_back(model_.config.head_groups);

        tb.frontier.clear();
        dist_of.clear();
        for (int64_t i = 0; i < n; ++i) {
            cache_row_of_node[added[i]] = p + i;
            Tensor row = slice_rows(fwd.logits, i, i + 1);
            std::vector<double> logits(row.data().begin(), row.data().end());
            tb.tree.dists.push_back(temp_softmax(logits, cfg.temperature));
            tb.frontier.push_back(added[i]);
            dist_of.push_back(static_cast<int32_t>(tb.tree.dists.size()) - 1);
        }
    }

    if (cfg.temperature == 0 && cfg.mode == DraftMode::Tree) tb.rerank_to_budget();
    rec.drafted += static_cast<int64_t>(tb.tree.nodes.size());
    return tb.tree;
}

void MirrorDrafter::rollback() { cache_.truncate(perm_rows_); }

// ---- session ----

GenerationSession::GenerationSession(const TargetModel& target, Drafter& drafter,
                                     const EngineConfig& cfg)
    : target_(target), drafter_(drafter), cfg_(cfg), rng_(cfg.seed), rs_(rng_),
      target_cache_(target.config.num_layers) {
    cfg_.validate();
}

void GenerationSession::prefill(std::span<const int32_t> prompt) {
    if (prompt.empty()) throw ConfigError("prompt must be nonempty");
    NoGradGuard ng;
    seq_.assign(prompt.begin(), prompt.end());
    target_cache_ = KvCache(target_.config.num_layers);
    drafter_.reset();
    const int64_t m = static_cast<int64_t>(prompt.size());
    const int64_t d = target_.config.hidden_size;
    Tensor prev_feats;
    if (m >= 2) {
        ForwardRows fwd = target_forward(target_, prompt.first(m - 1), &target_cache_);
        prev_feats = concat_rows({Tensor::zeros({1, d}), fwd.features}).detach();
    } else {
        prev_feats = Tensor::zeros({1, d});
    }
    pending_tokens_.assign(prompt.begin(), prompt.end());
    pending_features_ = prev_feats;
    pending_start_ = 0;
}

CycleRecord GenerationSession::run_cycle() { return run_cycle_with(rs_); }

CycleRecord GenerationSession::run_cycle_with(RandomSource& rs) {
    NoGradGuard ng;
    CycleRecord rec;
    const double t0 = now_ms();
    if (!pending_tokens_.empty()) {
        drafter_.extend_context(pending_tokens_, pending_features_, pending_start_);
        pending_tokens_.clear();
    }
    DraftTree tree = drafter_.draft(cfg_, rs, rec);
    rec.draft_ms = now_ms() - t0;

    const double t1 = now_ms();
    const int64_t L = static_cast<int64_t>(seq_.size());
    const int64_t n = 1 + static_cast<int64_t>(tree.nodes.size());
    std::vector<int32_t> toks(n);
    std::vector<int64_t> pos(n);
    toks[0] = seq_.back();
    pos[0] = L - 1;
    for (size_t i = 0; i < tree.nodes.size(); ++i) {
        toks[1 + i] = tree.nodes[i].token;
        pos[1 + i] = L - 1 + tree.nodes[i].depth;
    }
    const int64_t p = target_cache_.rows();
    std::vector<uint8_t> mask(n * (p + n), 0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < p; ++j) mask[i * (p + n) + j] = 1;
        mask[i * (p + n) + p] = 1;  // the root row anchors every node
        if (i > 0) {
            int32_t anc = tree.nodes[i - 1].parent;
            while (anc >= 0) {
                mask[i * (p + n) + p + 1 + anc] = 1;
                anc = tree.nodes[anc].parent;
            }
            mask[i * (p + n) + p + i] = 1;
        }
    }
    ForwardRows fwd = target_forward_rows(target_, toks, pos, target_cache_, mask);
    rec.verify_rows = n;

    VerifyCoreResult res;
    if (cfg_.temperature == 0) {
        std::vector<double> root(fwd.logits.data().begin(),
                                 fwd.logits.data().begin() + target_.config.vocab_size);
        std::vector<std::vector<double>> node_scores(tree.nodes.size());
        for (size_t i = 0; i < tree.nodes.size(); ++i) {
            auto base = fwd.logits.data().begin() + (1 + i) * target_.config.vocab_size;
            node_scores[i].assign(base, base + target_.config.vocab_size);
        }
        res = verify_tree_greedy(tree, root, node_scores);
    } else {
        auto row_probs = [&](int64_t r) {
            std::span<const double> logits(fwd.logits.data().data() + r * target_.config.vocab_size,
                                           target_.config.vocab_size);
            return temp_softmax(logits, cfg_.temperature);
        };
        std::vector<double> root = row_probs(0);
        std::vector<std::vector<double>> node_probs(tree.nodes.size());
        for (size_t i = 0; i < tree.nodes.size(); ++i) node_probs[i] = row_probs(1 + i);
        res = verify_tree_stochastic(tree, root, node_probs, rs);
    }

    // Keep the root row and the accepted path; drop rejected branches.
    std::vector<int64_t> keep(p);
    for (int64_t i = 0; i < p; ++i) keep[i] = i;
    keep.push_back(p);
    std::vector<Tensor> feat_rows{slice_rows(fwd.features, 0, 1)};
    for (int32_t nid : res.accepted_nodes) {
        keep.push_back(p + 1 + nid);
        feat_rows.push_back(slice_rows(fwd.features, 1 + nid, 2 + nid));
    }
    target_cache_.keep_rows(keep);

    drafter_.rollback();
    pending_tokens_ = res.emitted;
    pending_features_ = concat_rows(feat_rows).detach();
    pending_start_ = L;
    seq_.insert(seq_.end(), res.emitted.begin(), res.emitted.end());

    rec.accepted = res.accepted;
    rec.emitted = res.emitted;
    rec.depth_flags = res.depth_flags;
    rec.verify_ms = now_ms() - t1;
    if (cfg_.validate_caches) validate_target_cache();
    return rec;
}

GenerateResult GenerationSession::run(std::span<const int32_t> prompt) {
    GenerateResult out;
    if (cfg_.max_new_tokens == 0) return out;
    const int64_t depth = cfg_.mode == DraftMode::Chain ? cfg_.gamma : cfg_.tree_depth;
    if (static_cast<int64_t>(prompt.size()) + cfg_.max_new_tokens + depth + 2 >
        target_.config.max_seq_len)
        throw ConfigError("generation would exceed max_seq_len");
    prefill(prompt);
    bool done = false;
    while (!done && static_cast<int64_t>(out.tokens.size()) < cfg_.max_new_tokens) {
        CycleRecord rec = run_cycle();
        for (int32_t t : rec.emitted) {
            if (static_cast<int64_t>(out.tokens.size()) >= cfg_.max_new_tokens) break;
            out.tokens.push_back(t);
            if (cfg_.eos_token >= 0 && t == cfg_.eos_token) {
                done = true;
                break;
            }
        }
        out.records.push_back(std::move(rec));
    }
    return out;
}

void GenerationSession::validate_target_cache(double tol) const {
    NoGradGuard ng;
    const int64_t rows = target_cache_.rows();
    if (rows == 0) return;
    KvCache fresh(target_.config.num_layers);
    target_forward(target_, std::span<const int32_t>(seq_.data(), rows), &fresh);
    for (size_t l = 0; l < fresh.layers.size(); ++l) {
        auto a = fresh.layers[l].k.data();
        auto b = target_cache_.layers[l].k.data();
        auto av = fresh.layers[l].v.data();
        auto bv = target_cache_.layers[l].v.data();
        if (a.size() != b.size()) throw ContractError("cache divergence: row count mismatch");
        for (size_t i = 0; i < a.size(); ++i) {
            if (std::abs(a[i] - b[i]) > tol || std::abs(av[i] - bv[i]) > tol)
                throw ContractError("cache divergence detected");
        }
    }
    for (int64_t i = 0; i < rows; ++i) {
        if (target_cache_.tokens[i] != seq_[i] || target_cache_.positions[i] != i)
            throw ContractError("cache divergence: token/position bookkeeping");
    }
}

GenerateResult generate(const TargetModel& target, Drafter& drafter, const EngineConfig& cfg,
                        std::span<const int32_t> prompt) {
    GenerationSession session(target, drafter, cfg);
    return session.run(prompt);
}

std::vector<int32_t> vanilla_generate(const TargetModel& target, std::span<const int32_t> prompt,
                                      int64_t max_new_tokens, double temperature, uint64_t seed,
                                      int32_t eos_token) {
    if (prompt.empty()) throw ConfigError("prompt must be nonempty");
    NoGradGuard ng;
    Rng rng(seed);
    RngSource rs(rng);
    KvCache cache(target.config.num_layers);
    std::vector<int32_t> seq(prompt.begin(), prompt.end());
    std::vector<int32_t> out;
    if (max_new_tokens == 0) return out;
    ForwardRows fwd = target_forward(target, seq, &cache);
    const int64_t V = target.config.vocab_size;
    std::vector<double> logits(fwd.logits.data().end() - V, fwd.logits.data().end());
    while (static_cast<int64_t>(out.size()) < max_new_tokens) {
        int32_t tok;
        if (temperature == 0) {
            tok = argmax_token(logits);
        } else {
            auto probs = temp_softmax(logits, temperature);
            tok = static_cast<int32_t>(rs.categorical(probs));
        }
        out.push_back(tok);
        seq.push_back(tok);
        if (eos_token >= 0 && tok == eos_token) break;
        if (static_cast<int64_t>(out.size()) >= max_new_tokens) break;
        ForwardRows step = target_forward(target, seq, &cache);
        logits.assign(step.logits.data().begin(), step.logits.data().end());
    }
    return out;
}

}  // namespace speclab
