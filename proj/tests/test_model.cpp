#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "speclab/model.hpp"
#include "speclab/serialize.hpp"
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

std::vector<int32_t> random_tokens(Rng& rng, int64_t n, int64_t vocab) {
    std::vector<int32_t> out(n);
    for (auto& t : out) t = static_cast<int32_t>(rng.uniform_int(vocab));
    return out;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.head_groups = 7;  // 64 % 7 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.router_top_n = 9;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("target_forward cache consistency and shape") {
    ModelConfig cfg = tiny_config();
    TargetModel model = TargetModel::init(cfg, 1);
    Rng rng(2);
    auto tokens = random_tokens(rng, 5, cfg.vocab_size);

    ForwardRows full = target_forward(model, tokens, nullptr);
    CHECK(full.logits.dim(0) == 5);
    CHECK(full.logits.dim(1) == cfg.vocab_size);
    CHECK(full.features.dim(1) == cfg.hidden_size);

    KvCache cache(cfg.num_layers);
    target_forward(model, std::span<const int32_t>(tokens.data(), 4), &cache);
    ForwardRows inc = target_forward(model, tokens, &cache);
    CHECK(inc.logits.dim(0) == 1);
    for (int64_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(std::abs(inc.logits.at(0, v) - full.logits.at(4, v)) < 1e-10);
}

TEST_CASE("target_forward rejects bad tokens, positions and cache prefixes") {
    ModelConfig cfg = tiny_config();
    TargetModel model = TargetModel::init(cfg, 1);
    std::vector<int32_t> bad = {0, static_cast<int32_t>(cfg.vocab_size)};
    CHECK_THROWS_AS(target_forward(model, bad, nullptr), DataError);

    std::vector<int32_t> long_seq(cfg.max_seq_len + 1, 1);
    CHECK_THROWS_AS(target_forward(model, long_seq, nullptr), ContractError);

    Rng rng(3);
    auto tokens = random_tokens(rng, 4, cfg.vocab_size);
    KvCache cache(cfg.num_layers);
    target_forward(model, tokens, &cache);
    auto mismatched = tokens;
    mismatched[1] = (mismatched[1] + 1) % cfg.vocab_size;
    mismatched.push_back(0);
    CHECK_THROWS_AS(target_forward(model, mismatched, &cache), ContractError);
}

TEST_CASE("causality: permuting future tokens leaves past logits unchanged") {
    ModelConfig cfg = tiny_config();
    TargetModel model = TargetModel::init(cfg, 7);
    Rng rng(8);
    for (int trial = 0; trial < 5; ++trial) {
        auto tokens = random_tokens(rng, 6, cfg.vocab_size);
        ForwardRows a = target_forward(model, tokens, nullptr);
        std::swap(tokens[4], tokens[5]);
        ForwardRows b = target_forward(model, tokens, nullptr);
        for (int64_t s = 0; s < 4; ++s)
            for (int64_t v = 0; v < cfg.vocab_size; ++v)
                CHECK(a.logits.at(s, v) == b.logits.at(s, v));
    }
}

TEST_CASE("draft_forward determinism and shape") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 2);
    Rng rng(5);
    Tensor feat = Tensor::randn({cfg.hidden_size}, rng);

    KvCache c1(1), c2(1);
    DraftStep s1 = draft_forward(draft, feat, 3, 1, c1);
    DraftStep s2 = draft_forward(draft, feat, 3, 1, c2);
    CHECK(s1.feature.numel() == cfg.hidden_size);
    CHECK(testutil::bit_equal(s1.feature.data(), s2.feature.data()));
    CHECK(testutil::bit_equal(s1.feature.data(), s1.hidden.data()));
}

TEST_CASE("draft model ties embedding and lm_head to the target") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 9);
    CHECK(draft.embedding.storage_id() == target.embedding.storage_id());
    CHECK(draft.lm_head.storage_id() == target.lm_head.storage_id());
}

TEST_CASE("router_forward uniform at zero weights and normalized for random input") {
    ModelConfig cfg = tiny_config();
    RouterHead router = RouterHead::init(cfg, 3);
    router.w1 = Tensor::zeros({cfg.hidden_size, cfg.hidden_size});
    router.w2 = Tensor::zeros({cfg.head_groups, cfg.hidden_size});
    Rng rng(4);
    Tensor h = Tensor::randn({cfg.hidden_size}, rng);
    Tensor p = router_forward(router, h);
    for (int64_t n = 0; n < cfg.head_groups; ++n)
        CHECK(p.at(n) == doctest::Approx(1.0 / cfg.head_groups).epsilon(1e-12));

    RouterHead router2 = RouterHead::init(cfg, 5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor h2 = Tensor::randn({cfg.hidden_size}, rng);
        Tensor p2 = router_forward(router2, h2);
        double acc = 0.0;
        for (int64_t n = 0; n < cfg.head_groups; ++n) acc += p2.at(n);
        CHECK(std::abs(acc - 1.0) < 1e-12);
    }
}

TEST_CASE("router_forward gradient vs finite differences") {
    ModelConfig cfg = tiny_config();
    for (uint64_t seed = 0; seed < 5; ++seed) {
        RouterHead router = RouterHead::init(cfg, seed + 20);
        Rng rng(seed + 50);
        Tensor h = Tensor::randn({cfg.hidden_size}, rng);
        const int64_t n_star = static_cast<int64_t>(rng.uniform_int(cfg.head_groups));
        auto loss = [&](const RouterHead& r) {
            Tensor p = router_forward(r, h);
            std::vector<std::pair<int64_t, int64_t>> pick = {{0, n_star}};
            return scale(pick_mean(log_clamped(reshape(p, {1, cfg.head_groups})), pick), -1.0);
        };
        router.w1.set_requires_grad(true);
        CHECK(testutil::gradcheck([&](const Tensor&) { return loss(router); }, router.w1) < 1e-4);
        router.w1.set_requires_grad(false);
        router.w2.set_requires_grad(true);
        CHECK(testutil::gradcheck([&](const Tensor&) { return loss(router); }, router.w2) < 1e-4);
    }
}

TEST_CASE("grouped_head_prob full activation sums to one") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 2);
    RouterHead router = RouterHead::init(cfg, 3);
    Rng rng(6);
    std::vector<int> all_groups(cfg.head_groups);
    for (int i = 0; i < cfg.head_groups; ++i) all_groups[i] = i;
    for (int trial = 0; trial < 20; ++trial) {
        Tensor h = Tensor::randn({cfg.hidden_size}, rng);
        Tensor p_router = router_forward(router, h);
        GroupedDistribution g = grouped_head_prob(h, p_router, all_groups, draft.lm_head, cfg);
        double acc = 0.0;
        for (double v : g.probs) acc += v;
        CHECK(std::abs(acc - 1.0) < 1e-10);
        CHECK(g.active_mass == doctest::Approx(1.0).epsilon(1e-10));
    }
    CHECK_THROWS_AS(grouped_head_prob(Tensor::zeros({cfg.hidden_size}),
                                      Tensor::full({cfg.head_groups}, 1.0 / cfg.head_groups), {},
                                      draft.lm_head, cfg),
                    ConfigError);
}

TEST_CASE("grouped_head_prob with N=1 reproduces the full softmax exactly") {
    ModelConfig cfg = tiny_config();
    cfg.head_groups = 1;
    cfg.router_top_n = 1;
    TargetModel target = TargetModel::init(cfg, 11);
    Rng rng(12);
    Tensor h = Tensor::randn({cfg.hidden_size}, rng);
    Tensor full = softmax(matmul(reshape(h, {1, cfg.hidden_size}), target.lm_head), -1);
    std::vector<int> groups = {0};
    GroupedDistribution g =
        grouped_head_prob(h, Tensor::from_data({1}, {1.0}), groups, target.lm_head, cfg);
    for (int64_t v = 0; v < cfg.vocab_size; ++v) CHECK(g.probs[v] == full.at(0, v));
}

TEST_CASE("grouped_head_prob with oracle marginals reproduces the full softmax") {
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 13);
    Rng rng(14);
    std::vector<int> all_groups(cfg.head_groups);
    for (int i = 0; i < cfg.head_groups; ++i) all_groups[i] = i;
    const int64_t v = cfg.group_size();
    for (int trial = 0; trial < 100; ++trial) {
        Tensor h = Tensor::randn({cfg.hidden_size}, rng);
        Tensor full = softmax(matmul(reshape(h, {1, cfg.hidden_size}), target.lm_head), -1);
        std::vector<double> marg(cfg.head_groups, 0.0);
        for (int64_t x = 0; x < cfg.vocab_size; ++x) marg[x / v] += full.at(0, x);
        GroupedDistribution g = grouped_head_prob(
            h, Tensor::from_data({cfg.head_groups}, std::move(marg)), all_groups, target.lm_head, cfg);
        for (int64_t x = 0; x < cfg.vocab_size; ++x)
            CHECK(std::abs(g.probs[x] - full.at(0, x)) < 1e-10);
    }
}

TEST_CASE("count_params hand tally and embedding toggle") {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.hidden_size = 64;
    cfg.num_layers = 4;
    cfg.num_heads = 4;
    cfg.intermediate_size = 256;
    cfg.max_seq_len = 128;
    cfg.head_groups = 16;
    cfg.router_top_n = 2;
    TargetModel target = TargetModel::init(cfg, 1);
    DraftModel draft = DraftModel::init(target, 2);

    ParamReport dr = count_params(draft);
    int64_t fusion = 0, lm_head = 0, block = 0, embedding = 0;
    for (const auto& [name, n] : dr.components) {
        if (name == "fusion") fusion = n;
        if (name == "lm_head") lm_head = n;
        if (name == "block") block = n;
        if (name == "embedding") embedding = n;
    }
    CHECK(fusion == 2 * 64 * 64);  // 8192
    CHECK(lm_head == 64 * 256);    // 16384
    // block: 4 d^2 attention + SwiGLU (2 d m up, m d down) + two norm gains
    CHECK(block == 4 * 64 * 64 + 2 * 64 * 256 + 256 * 64 + 2 * 64);
    CHECK(embedding == 256 * 64);
    CHECK(dr.total_with_embedding - dr.total_without_embedding == cfg.vocab_size * cfg.hidden_size);
    CHECK(dr.total(true) - dr.total(false) == cfg.vocab_size * cfg.hidden_size);

    ParamReport tr = count_params(target);
    CHECK(tr.total_with_embedding - tr.total_without_embedding == cfg.vocab_size * cfg.hidden_size);

    // published Llama3-8B sizes: ratio rounds to 10.4%
    CHECK(741.0 / 7157.0 == doctest::Approx(0.104).epsilon(0.005));
}

TEST_CASE("weight serialization round-trips bit-exactly") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "speclab_ser_test").string();
    fs::create_directories(dir);
    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 42);
    DraftModel draft = DraftModel::init(target, 43);
    RouterHead router = RouterHead::init(cfg, 44);

    save_target(dir + "/t.bin", target);
    save_draft(dir + "/d.bin", draft);
    save_router(dir + "/r.bin", router);

    TargetModel t2 = load_target(dir + "/t.bin");
    DraftModel d2 = load_draft(dir + "/d.bin", t2);
    RouterHead r2 = load_router(dir + "/r.bin");

    auto tp = target.parameters();
    auto tp2 = t2.parameters();
    REQUIRE(tp.size() == tp2.size());
    for (size_t i = 0; i < tp.size(); ++i) CHECK(testutil::bit_equal(tp[i].data(), tp2[i].data()));
    auto dp = draft.own_parameters();
    auto dp2 = d2.own_parameters();
    for (size_t i = 0; i < dp.size(); ++i) CHECK(testutil::bit_equal(dp[i].data(), dp2[i].data()));
    CHECK(testutil::bit_equal(router.w1.data(), r2.w1.data()));
    CHECK(testutil::bit_equal(router.w2.data(), r2.w2.data()));

    // loaded draft re-ties to the target it is loaded against
    CHECK(d2.embedding.storage_id() == t2.embedding.storage_id());
    CHECK(d2.lm_head.storage_id() == t2.lm_head.storage_id());

    // save twice: byte-identical files
    save_target(dir + "/t2.bin", target);
    std::ifstream a(dir + "/t.bin", std::ios::binary), b(dir + "/t2.bin", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("corrupt weight files raise format errors") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "speclab_ser_bad").string();
    fs::create_directories(dir);
    {
        std::ofstream os(dir + "/bad.bin", std::ios::binary);
        os << "NOTMAGIC and some garbage";
    }
    CHECK_THROWS_AS(load_tensor_file(dir + "/bad.bin"), DataError);
    CHECK_THROWS_AS(load_tensor_file(dir + "/missing.bin"), DependencyError);

    ModelConfig cfg = tiny_config();
    TargetModel target = TargetModel::init(cfg, 1);
    save_target(dir + "/t.bin", target);
    CHECK_THROWS_AS(load_router(dir + "/t.bin"), DataError);  // wrong kind
}

TEST_CASE("KvCache keep_rows and clone") {
    KvCache cache(1);
    Rng rng(1);
    cache.append_layer(0, Tensor::randn({4, 8}, rng), Tensor::randn({4, 8}, rng));
    std::vector<int32_t> toks = {1, 2, 3, 4};
    std::vector<int64_t> pos = {0, 1, 2, 3};
    cache.append_rows(toks, pos);
    KvCache copy = cache.clone();
    std::vector<int64_t> keep = {0, 2};
    cache.keep_rows(keep);
    CHECK(cache.rows() == 2);
    CHECK(cache.tokens[1] == 3);
    CHECK(cache.positions[1] == 2);
    CHECK(copy.rows() == 4);
    CHECK(cache.checksum() != copy.checksum());
    cache.truncate(1);
    CHECK(cache.rows() == 1);
}
