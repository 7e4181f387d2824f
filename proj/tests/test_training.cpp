#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "speclab/corpus.hpp"
#include "speclab/training.hpp"
#include "testutil.hpp"

using namespace speclab;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.hidden_size = 16;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.intermediate_size = 32;
    cfg.max_seq_len = 64;
    cfg.head_groups = 8;
    cfg.router_top_n = 2;
    return cfg;
}

TrainBatch random_batch(const TargetModel& target, int64_t batch, int64_t seq, uint64_t seed) {
    Rng rng(seed);
    std::vector<int32_t> tokens(batch * seq);
    for (auto& t : tokens) t = static_cast<int32_t>(rng.uniform_int(target.config.vocab_size));
    return make_train_batch(target, tokens, batch, seq);
}

}  // namespace

TEST_CASE("TrainConfig guards") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.steps = 1;
    cfg.w_csra = 0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);  // single-step caveat
    cfg.w_csra = 0.0;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("multi_step_rollout step 1 matches the causal draft forward") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 2);
    TrainBatch batch = random_batch(target, 2, 6, 3);

    auto steps = multi_step_rollout(batch, draft, 1);
    REQUIRE(steps.size() == 1);

    // independent route: the engine-style causal rows per sequence
    const int64_t S = batch.seq;
    for (int64_t b = 0; b < batch.batch; ++b) {
        std::vector<int32_t> toks(batch.tokens.begin() + b * S + 1, batch.tokens.begin() + (b + 1) * S);
        std::vector<int64_t> pos(S - 1);
        for (int64_t i = 0; i < S - 1; ++i) pos[i] = i + 1;
        Tensor prev = slice_rows(batch.target_features, b * S, b * S + S - 1);
        KvCache cache(1);
        std::vector<uint8_t> mask((S - 1) * (S - 1), 0);
        for (int64_t i = 0; i < S - 1; ++i)
            for (int64_t j = 0; j <= i; ++j) mask[i * (S - 1) + j] = 1;
        Tensor f = draft_forward_rows(draft, toks, prev, pos, cache, mask);
        for (int64_t r = 0; r < S - 1; ++r)
            for (int64_t c = 0; c < cfg.hidden_size; ++c)
                CHECK(std::abs(f.at(r, c) - steps[0].at(b * (S - 1) + r, c)) < 1e-12);
    }
}

TEST_CASE("multi_step_rollout matches sequential draft_forward chaining") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 5);
    DraftModel draft = DraftModel::init(target, 6);
    const int64_t S = 7;
    TrainBatch batch = random_batch(target, 1, S, 7);

    for (int64_t chain_len : {2, 3}) {
        auto steps = multi_step_rollout(batch, draft, chain_len);
        const int64_t s = S - 1;  // deepest position
        // sequential oracle: rows 1..s-chain_len built from target features,
        // then draft_forward chained chain_len times
        KvCache cache(1);
        for (int64_t p = 1; p <= s - chain_len; ++p) {
            Tensor prev = reshape(slice_rows(batch.target_features, p - 1, p), {cfg.hidden_size});
            draft_forward(draft, prev, batch.tokens[p], p, cache);
        }
        Tensor feat = reshape(
            slice_rows(batch.target_features, s - chain_len, s - chain_len + 1), {cfg.hidden_size});
        DraftStep out;
        for (int64_t j = 1; j <= chain_len; ++j) {
            const int64_t pos = s - chain_len + j;
            out = draft_forward(draft, feat, batch.tokens[pos], pos, cache);
            feat = out.feature;
        }
        for (int64_t c = 0; c < cfg.hidden_size; ++c)
            CHECK(std::abs(out.feature.at(c) - steps[chain_len - 1].at(s - 1, c)) < 1e-10);
    }
}

TEST_CASE("multi_step_rollout degenerate and error cases") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 2);

    // one usable position: no self-feedback is possible, steps coincide
    TrainBatch batch = random_batch(target, 2, 2, 11);
    auto steps = multi_step_rollout(batch, draft, 2);
    CHECK(testutil::bit_equal(steps[0].data(), steps[1].data()));

    TrainBatch batch2 = random_batch(target, 1, 4, 12);
    CHECK_THROWS_AS(multi_step_rollout(batch2, draft, 5), ConfigError);
}

TEST_CASE("csra_loss hand-computable examples") {
    TrainConfig cfg;
    cfg.csra_temperature = 0.07;
    cfg.include_target_positives = true;

    const int64_t d = 8;
    // two positions with orthogonal directions; all views identical per position
    std::vector<double> e1(d, 0.0), e2(d, 0.0);
    e1[0] = 1.0;
    e2[1] = 1.0;
    auto rows = [&](const std::vector<double>& a, const std::vector<double>& b) {
        std::vector<double> data = a;
        data.insert(data.end(), b.begin(), b.end());
        return Tensor::from_data({2, d}, std::move(data));
    };
    std::vector<Tensor> step_feats = {rows(e1, e2), rows(e1, e2)};
    Tensor target_rows = rows(e1, e2);
    const double loss = csra_loss(step_feats, target_rows, cfg).item();
    // per pair: -log(e^{1/tau} / (e^{1/tau} + 3)), K = 4 candidates
    const double expect = std::log(1.0 + 3.0 * std::exp(-1.0 / cfg.csra_temperature));
    CHECK(std::abs(loss - expect) < 1e-12);
    CHECK(loss < 1e-5);

    // every feature identical: uniform softmax over K = (t+1)R - positives
    std::vector<Tensor> same = {rows(e1, e1), rows(e1, e1)};
    Tensor same_target = rows(e1, e1);
    const double loss_same = csra_loss(same, same_target, cfg).item();
    CHECK(loss_same == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("csra_loss norm invariance and configuration guard") {
    TrainConfig cfg;
    Rng rng(3);
    std::vector<Tensor> feats = {Tensor::randn({3, 8}, rng), Tensor::randn({3, 8}, rng)};
    Tensor targets = Tensor::randn({3, 8}, rng);
    const double base = csra_loss(feats, targets, cfg).item();

    // scale one feature row by 7: cosine similarity ignores the norm
    Tensor scaled = feats[0].clone();
    auto data = scaled.mutable_data();
    for (int64_t c = 0; c < 8; ++c) data[1 * 8 + c] *= 7.0;
    const double after = csra_loss({scaled, feats[1]}, targets, cfg).item();
    CHECK(std::abs(base - after) < 1e-10);

    CHECK_THROWS_AS(csra_loss({feats[0]}, targets, cfg), ConfigError);
}

TEST_CASE("csra_loss gradient vs finite differences") {
    TrainConfig cfg;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 80);
        Tensor f1 = Tensor::randn({3, 8}, rng, 1.0, true);
        Tensor f2 = Tensor::randn({3, 8}, rng);
        Tensor targets = Tensor::randn({3, 8}, rng);
        const double err = testutil::gradcheck(
            [&](const Tensor& v) { return csra_loss({v, f2}, targets, cfg); }, f1);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("draft_train_step: eagle reduction, nonnegative terms, descent") {
    ModelConfig mcfg = tiny_config();
    TargetModel target = TargetModel::init(mcfg, 21);
    TrainBatch batch = random_batch(target, 2, 8, 22);

    TrainConfig eagle;
    eagle.steps = 1;
    eagle.w_csra = 0.0;
    DraftModel d1 = DraftModel::init(target, 23);
    LossBreakdown l1 = draft_loss_eval(batch, d1, eagle);
    CHECK(l1.csra == 0.0);
    CHECK(l1.reg >= 0.0);
    CHECK(l1.cls >= 0.0);
    CHECK(l1.total == doctest::Approx(eagle.w_reg * l1.reg + eagle.w_cls * l1.cls).epsilon(1e-12));

    TrainConfig csra;
    csra.steps = 3;
    csra.w_csra = 0.15;
    DraftModel d2 = DraftModel::init(target, 23);
    for (auto t : d2.own_parameters()) t.set_requires_grad(true);
    AdamW opt(d2.own_parameters(), 1e-3);
    LossBreakdown before = draft_train_step(batch, d2, csra, opt);
    CHECK(before.reg >= 0.0);
    CHECK(before.cls >= 0.0);
    CHECK(before.csra >= 0.0);
    LossBreakdown after = draft_loss_eval(batch, d2, csra);
    CHECK(after.total < before.total);

    // frozen tied tensors keep zero gradients and identical bits
    const Tensor tied[] = {d2.embedding, d2.lm_head};
    CHECK(weights_checksum(tied) == weights_checksum(std::array<Tensor, 2>{
                                        target.embedding, target.lm_head}));
    CHECK_FALSE(d2.embedding.has_grad());
    CHECK_FALSE(d2.lm_head.has_grad());
}

TEST_CASE("hass and csra differ only in the csra loss term on the first batch") {
    ModelConfig mcfg = tiny_config();
    TargetModel target = TargetModel::init(mcfg, 31);
    TrainBatch batch = random_batch(target, 2, 8, 32);

    TrainConfig hass;
    hass.steps = 3;
    hass.w_csra = 0.0;
    TrainConfig csra = hass;
    csra.w_csra = 0.15;

    DraftModel da = DraftModel::init(target, 33);
    DraftModel db = DraftModel::init(target, 33);
    LossBreakdown la = draft_loss_eval(batch, da, hass);
    LossBreakdown lb = draft_loss_eval(batch, db, csra);
    CHECK(la.reg == lb.reg);
    CHECK(la.cls == lb.cls);
    CHECK(la.csra == 0.0);
    CHECK(lb.csra > 0.0);
    CHECK(lb.total == doctest::Approx(la.total + csra.w_csra * lb.csra).epsilon(1e-12));
}

TEST_CASE("pretrain_target learns a deterministic corpus") {
    std::vector<int32_t> corpus;
    for (int i = 0; i < 1500; ++i) corpus.push_back(i % 2 == 0 ? 'a' : 'b');
    ModelConfig mcfg;
    mcfg.vocab_size = 256;
    mcfg.hidden_size = 16;
    mcfg.num_layers = 1;
    mcfg.num_heads = 2;
    mcfg.intermediate_size = 32;
    mcfg.max_seq_len = 64;
    mcfg.head_groups = 16;
    mcfg.router_top_n = 2;
    TrainConfig tcfg;
    tcfg.seq = 8;
    tcfg.batch = 4;
    tcfg.epochs = 4;
    tcfg.lr = 3e-3;
    tcfg.seed = 7;
    PretrainResult res = pretrain_target(corpus, mcfg, tcfg);
    CHECK(res.held_out_ce < 0.1);
    CHECK(res.held_out_ce < std::log(256.0));
}

TEST_CASE("pretrain_target is deterministic and rejects short corpora") {
    std::vector<int32_t> corpus;
    for (int i = 0; i < 400; ++i) corpus.push_back('a' + (i * 7) % 5);
    ModelConfig mcfg = tiny_config();
    mcfg.vocab_size = 128;
    TrainConfig tcfg;
    tcfg.seq = 8;
    tcfg.batch = 2;
    tcfg.epochs = 1;
    tcfg.seed = 9;
    PretrainResult a = pretrain_target(corpus, mcfg, tcfg);
    PretrainResult b = pretrain_target(corpus, mcfg, tcfg);
    CHECK(weights_checksum(a.model.parameters()) == weights_checksum(b.model.parameters()));

    std::vector<int32_t> tiny(5, 'a');
    CHECK_THROWS_AS(pretrain_target(tiny, mcfg, tcfg), DataError);
}

TEST_CASE("router_target group sums") {
    Tensor q = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.4});
    Tensor r = router_target(q, 2);
    CHECK(r.at(0) == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(r.at(1) == doctest::Approx(0.7).epsilon(1e-12));

    Tensor onehot = Tensor::from_data({4}, {0.0, 0.0, 1.0, 0.0});
    Tensor r2 = router_target(onehot, 2);
    CHECK(r2.at(0) == 0.0);
    CHECK(r2.at(1) == 1.0);

    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor logits = Tensor::randn({16}, rng);
        Tensor dist = softmax(logits, -1);
        Tensor rt = router_target(dist, 4);
        double acc = 0.0;
        for (int64_t i = 0; i < 4; ++i) acc += rt.at(i);
        CHECK(std::abs(acc - 1.0) < 1e-12);
    }

    Tensor bad = Tensor::from_data({4}, {0.1, 0.2, 0.3, 0.3});
    CHECK_THROWS_AS(router_target(bad, 2), DataError);
}

TEST_CASE("router_loss values and gradient") {
    Tensor q = Tensor::from_data({2}, {0.3, 0.7});
    CHECK(router_loss(q, q).item() == doctest::Approx(0.6109).epsilon(1e-4));
    Tensor onehot = Tensor::from_data({2}, {1.0, 0.0});
    CHECK(router_loss(onehot, onehot).item() == 0.0);

    ModelConfig cfg = tiny_config();
    for (uint64_t seed = 0; seed < 5; ++seed) {
        RouterHead router = RouterHead::init(cfg, seed + 60);
        Rng rng(seed + 70);
        Tensor h = Tensor::randn({2, cfg.hidden_size}, rng);
        Tensor logits = Tensor::randn({2, cfg.head_groups}, rng);
        Tensor qr = softmax(logits, -1).detach();
        router.w1.set_requires_grad(true);
        const double err = testutil::gradcheck(
            [&](const Tensor&) { return router_loss(qr, router_forward(router, h)); }, router.w1);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("train_router: freeze contract, accuracy above chance, caching determinism") {
    namespace fs = std::filesystem;
    ModelConfig mcfg = tiny_config();
    mcfg.vocab_size = 128;  // markov corpus bytes are printable ascii
    auto corpus = markov_corpus(11, 6000);
    TrainConfig pre;
    pre.seq = 16;
    pre.batch = 4;
    pre.epochs = 1;
    pre.seed = 12;
    TargetModel target = pretrain_target(corpus, mcfg, pre).model;
    TrainConfig dcfg = pre;
    dcfg.steps = 2;
    dcfg.w_csra = 0.0;
    dcfg.epochs = 1;
    DraftModel draft = train_draft(target, corpus, dcfg).model;

    std::vector<Tensor> frozen = target.parameters();
    auto own = draft.own_parameters();
    frozen.insert(frozen.end(), own.begin(), own.end());
    const uint64_t before = weights_checksum(frozen);

    const std::string cache_path =
        (fs::temp_directory_path() / "speclab_router_cache.bin").string();
    fs::remove(cache_path);
    TrainConfig rcfg = pre;
    rcfg.epochs = 8;
    RouterHead router = train_router(target, draft, corpus, rcfg, cache_path);
    CHECK(weights_checksum(frozen) == before);

    // top-1 accuracy vs argmax(q_router) beats the 1/N baseline on held-out rows
    RouterData data = load_router_data(cache_path);
    double acc = 0.0;
    {
    NoGradGuard ng;
    const int64_t rows = data.hidden.dim(0);
    const int64_t eval_rows = std::min<int64_t>(rows, 512);
    Tensor p = router_forward(router, slice_rows(data.hidden, rows - eval_rows, rows));
    Tensor q = slice_rows(data.q_router, rows - eval_rows, rows);
    int64_t hits = 0;
    for (int64_t r = 0; r < eval_rows; ++r) {
        int64_t pa = 0, qa = 0;
        for (int64_t n = 1; n < mcfg.head_groups; ++n) {
            if (p.at(r, n) > p.at(r, pa)) pa = n;
            if (q.at(r, n) > q.at(r, qa)) qa = n;
        }
        if (pa == qa) ++hits;
    }
    acc = static_cast<double>(hits) / static_cast<double>(eval_rows);
    }
    CHECK(acc > 1.0 / static_cast<double>(mcfg.head_groups));

    // rerun from the cached stage-1 rows: bit-identical router
    RouterHead router2 = train_router(target, draft, corpus, rcfg, cache_path);
    CHECK(weights_checksum(router.parameters()) == weights_checksum(router2.parameters()));
}

TEST_CASE("train_draft determinism and frozen ties") {
    ModelConfig mcfg = tiny_config();
    mcfg.vocab_size = 128;  // markov corpus bytes are printable ascii
    auto corpus = markov_corpus(21, 2500);
    TrainConfig pre;
    pre.seq = 12;
    pre.batch = 2;
    pre.epochs = 1;
    pre.seed = 5;
    TargetModel target = pretrain_target(corpus, mcfg, pre).model;

    const Tensor tied[] = {target.embedding, target.lm_head};
    const uint64_t tied_before = weights_checksum(tied);

    TrainConfig dcfg = pre;
    dcfg.steps = 2;
    dcfg.w_csra = 0.1;
    dcfg.epochs = 1;
    DraftTrainResult a = train_draft(target, corpus, dcfg);
    DraftTrainResult b = train_draft(target, corpus, dcfg);
    CHECK(weights_checksum(a.model.own_parameters()) == weights_checksum(b.model.own_parameters()));
    CHECK(weights_checksum(tied) == tied_before);
    CHECK(!a.log.empty());
    CHECK(a.log[0].loss_total == b.log[0].loss_total);
}

TEST_CASE("combined draft loss gradient through the whole model matches finite differences") {
    ModelConfig mcfg = tiny_config();
    mcfg.hidden_size = 8;
    mcfg.intermediate_size = 16;
    mcfg.vocab_size = 16;
    mcfg.head_groups = 4;
    TargetModel target = TargetModel::init(mcfg, 41);
    TrainBatch batch = random_batch(target, 1, 5, 42);
    TrainConfig cfg;
    cfg.steps = 2;
    cfg.w_csra = 0.15;

    DraftModel draft = DraftModel::init(target, 43);
    auto loss_fn = [&]() {
        auto steps = multi_step_rollout(batch, draft, cfg.steps);
        Tensor target_rows = batch_target_rows(batch);
        Tensor reg, cls;
        for (const auto& f : steps) {
            Tensor r = smooth_l1(f, target_rows, cfg.smooth_l1_beta);
            Tensor c = cross_entropy(log_softmax(matmul(f, draft.lm_head), -1), batch.target_probs);
            reg = reg.defined() ? add(reg, r) : r;
            cls = cls.defined() ? add(cls, c) : c;
        }
        Tensor total = add(scale(reg, cfg.w_reg), scale(cls, cfg.w_cls));
        return add(total, scale(csra_loss(steps, target_rows, cfg), cfg.w_csra));
    };

    draft.fusion.set_requires_grad(true);
    CHECK(testutil::gradcheck([&](const Tensor&) { return loss_fn(); }, draft.fusion) < 1e-4);
    draft.fusion.set_requires_grad(false);
    draft.block.wq.set_requires_grad(true);
    CHECK(testutil::gradcheck([&](const Tensor&) { return loss_fn(); }, draft.block.wq) < 1e-4);
    draft.block.wq.set_requires_grad(false);
    draft.block.w_gate.set_requires_grad(true);
    CHECK(testutil::gradcheck([&](const Tensor&) { return loss_fn(); }, draft.block.w_gate) < 1e-4);
}
