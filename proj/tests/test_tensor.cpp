#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "speclab/tensor.hpp"
#include "testutil.hpp"

using namespace speclab;

TEST_CASE("matmul identity cases") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor r = matmul(a, eye);
    CHECK(r.at(0, 0) == 1.0);
    CHECK(r.at(0, 1) == 2.0);
    CHECK(r.at(1, 0) == 3.0);
    CHECK(r.at(1, 1) == 4.0);

    Tensor col = Tensor::from_data({2, 1}, {5, 7});
    Tensor r2 = matmul(eye, col);
    CHECK(r2.at(0, 0) == 5.0);
    CHECK(r2.at(1, 0) == 7.0);
}

TEST_CASE("matmul shape mismatch raises") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(a, b), ContractError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
    const double err = testutil::gradcheck([&](const Tensor& x) { return sum(matmul(x, b)); }, a);
    CHECK(err < 1e-6);

    Tensor a2 = Tensor::randn({3, 4}, rng);
    Tensor b2 = Tensor::randn({4, 2}, rng, 1.0, true);
    const double err2 = testutil::gradcheck([&](const Tensor& x) { return sum(matmul(a2, x)); }, b2);
    CHECK(err2 < 1e-6);
}

TEST_CASE("softmax basics") {
    Tensor t = Tensor::from_data({3}, {0, 0, 0});
    Tensor s = softmax(t.clone(), -1);
    for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Tensor t2 = Tensor::from_data({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor s2 = softmax(t2, -1);
    CHECK(s2.at(0) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(s2.at(1) == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
    CHECK(s2.at(2) == doctest::Approx(3.0 / 6.0).epsilon(1e-12));

    Tensor t3 = Tensor::from_data({2}, {1000.0, 0.0});
    Tensor s3 = softmax(t3, -1);
    CHECK(s3.at(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s3.at(1) < 1e-300);
}

TEST_CASE("softmax rows sum to one under large magnitudes") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor t = Tensor::randn({5, 16}, rng, 1e3);
        Tensor s = softmax(t, -1);
        for (int64_t r = 0; r < 5; ++r) {
            double acc = 0.0;
            for (int64_t c = 0; c < 16; ++c) acc += s.at(r, c);
            CHECK(std::abs(acc - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax axis 0 on 2-D") {
    Tensor t = Tensor::from_data({2, 2}, {0, 1, 0, 1});
    Tensor s = softmax(t, 0);
    CHECK(s.at(0, 0) == doctest::Approx(0.5));
    CHECK(s.at(1, 0) == doctest::Approx(0.5));
}

TEST_CASE("cross_entropy hand value") {
    Tensor q = Tensor::from_data({2}, {0.3, 0.7});
    Tensor logq = Tensor::from_data({2}, {std::log(0.3), std::log(0.7)});
    CHECK(cross_entropy(logq, q).item() == doctest::Approx(0.6109).epsilon(1e-4));
}

TEST_CASE("smooth_l1 zero and parameter guard") {
    Rng rng(3);
    Tensor x = Tensor::randn({4, 4}, rng);
    CHECK(smooth_l1(x, x, 1.0).item() == 0.0);
    CHECK_THROWS_AS(smooth_l1(x, x, 0.0), ConfigError);
    CHECK_THROWS_AS(smooth_l1(x, x, -1.0), ConfigError);
}

TEST_CASE("cosine_similarity symmetry and degenerate input") {
    Rng rng(5);
    Tensor v = Tensor::randn({8}, rng);
    CHECK(cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_similarity(v, scale(v, -1.0)).item() == doctest::Approx(-1.0).epsilon(1e-12));
    Tensor zero = Tensor::zeros({8});
    CHECK_THROWS_AS(cosine_similarity(v, zero), ContractError);
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Rng rng(9);
    Tensor x = Tensor::randn({3, 5}, rng, 1.0, true);
    Tensor loss = sum(x);
    backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::zeros({2, 2}, true);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("backward is deterministic on the same graph") {
    Rng rng(21);
    Tensor x = Tensor::randn({6, 6}, rng, 1.0, true);
    Tensor w = Tensor::randn({6, 6}, rng, 1.0, true);
    Tensor loss = smooth_l1(silu(matmul(x, w)), Tensor::zeros({6, 6}), 1.0);
    backward(loss);
    std::vector<double> first(x.grad().begin(), x.grad().end());
    x.zero_grad();
    w.zero_grad();
    loss.zero_grad();
    backward(loss);
    CHECK(testutil::bit_equal(first, x.grad()));
}

TEST_CASE("finite-difference agreement across ops and seeds") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed + 100);
        {
            Tensor x = Tensor::randn({3, 4}, rng, 1.0, true);
            Tensor t = Tensor::randn({3, 4}, rng);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return smooth_l1(v, t, 1.0); }, x) < 1e-4);
        }
        {
            Tensor x = Tensor::randn({2, 5}, rng, 1.0, true);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return sum(softmax(v, -1)); }, x) < 1e-4);
            Tensor q = softmax(Tensor::randn({2, 5}, rng), -1).detach();
            CHECK(testutil::gradcheck(
                      [&](const Tensor& v) { return cross_entropy(log_softmax(v, -1), q); }, x) < 1e-4);
        }
        {
            Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
            Tensor g = Tensor::randn({6}, rng);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return sum(rms_norm(v, g)); }, x) < 1e-4);
            Tensor x2 = Tensor::randn({3, 6}, rng, 1.0, true);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return sum(mul(l2_normalize_rows(v), v)); },
                                      x2) < 1e-4);
        }
        {
            Tensor a = Tensor::randn({7}, rng, 1.0, true);
            Tensor b = Tensor::randn({7}, rng);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return cosine_similarity(v, b); }, a) < 1e-4);
        }
        {
            Tensor x = Tensor::randn({4, 4}, rng, 1.0, true);
            CHECK(testutil::gradcheck([&](const Tensor& v) { return mean(silu(v)); }, x) < 1e-4);
        }
    }
}

TEST_CASE("masked softmax ignores masked entries") {
    Tensor t = Tensor::from_data({1, 4}, {5.0, 1.0, 2.0, 100.0});
    std::vector<uint8_t> mask = {1, 1, 1, 0};
    Tensor s = masked_softmax_rows(t, mask);
    CHECK(s.at(0, 3) == 0.0);
    double acc = s.at(0, 0) + s.at(0, 1) + s.at(0, 2);
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<uint8_t> none = {0, 0, 0, 0};
    CHECK_THROWS_AS(masked_softmax_rows(t, none), ContractError);
}

TEST_CASE("gather, concat and slice round trips") {
    Tensor t = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    std::vector<int64_t> rows = {2, 0};
    Tensor g = gather_rows(t, rows);
    CHECK(g.at(0, 0) == 5.0);
    CHECK(g.at(1, 1) == 2.0);

    Tensor c = concat_cols(t, t);
    CHECK(c.dim(1) == 4);
    Tensor s = slice_cols(c, 2, 4);
    CHECK(testutil::bit_equal(s.data(), t.data()));

    Tensor r = concat_rows({t, t});
    CHECK(r.dim(0) == 6);
    Tensor sr = slice_rows(r, 3, 6);
    CHECK(testutil::bit_equal(sr.data(), t.data()));
}

TEST_CASE("non-finite values are rejected") {
    CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), ContractError);
    CHECK_THROWS_AS(Tensor::from_data({1}, {INFINITY}), ContractError);
}

TEST_CASE("pick_mean selects and averages entries") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    std::vector<std::pair<int64_t, int64_t>> picks = {{0, 0}, {1, 2}};
    CHECK(pick_mean(t, picks).item() == doctest::Approx(3.5));
}

TEST_CASE("no-grad mode suppresses graph construction") {
    Tensor x = Tensor::zeros({2, 2}, true);
    {
        NoGradGuard guard;
        Tensor y = add(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor y = add(x, x);
    CHECK(y.requires_grad());
}
