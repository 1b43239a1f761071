#include <doctest.h>

#include <cmath>

#include "crowdmlp/tensor.hpp"

using namespace crowdmlp;

namespace {

// Independent triple-loop product, kept separate from the engine's kernels.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int n, int k, int m) {
    std::vector<double> c(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) {
                acc += a[i * k + t] * b[t * m + j];
            }
            c[i * m + j] = acc;
        }
    }
    return c;
}

// Direct cross-correlation, written from the definition.
std::vector<double> conv_oracle(const std::vector<double>& x, int ci, int h, int w,
                                const std::vector<double>& kern, int co, int k,
                                const std::vector<double>& bias, int stride, int pad,
                                int oh, int ow) {
    std::vector<double> y(static_cast<std::size_t>(co) * oh * ow, 0.0);
    for (int oc = 0; oc < co; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias[oc];
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride - pad + ky;
                            const int ix = ox * stride - pad + kx;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                                continue;
                            }
                            acc += x[(ic * h + iy) * w + ix] * kern[((oc * ci + ic) * k + ky) * k + kx];
                        }
                    }
                }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return y;
}

} // namespace

TEST_CASE("linear: identity and zero inputs") {
    Tape tape;
    Tensor x = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor w = Tensor::from_data({2, 2}, {3, 0, 0, 5});
    Tensor b = Tensor::zeros({2});
    Tensor y = linear(tape, x, w, b);
    CHECK(y.at({0, 0}) == 3.0);
    CHECK(y.at({0, 1}) == 0.0);
    CHECK(y.at({1, 1}) == 5.0);

    Tensor zeros = Tensor::zeros({3, 2});
    Tensor bias = Tensor::from_data({2}, {0.5, -1.5});
    Tensor rows = linear(tape, zeros, w, bias);
    for (int i = 0; i < 3; ++i) {
        CHECK(rows.at({i, 0}) == 0.5);
        CHECK(rows.at({i, 1}) == -1.5);
    }
}

TEST_CASE("linear: random case matches the triple-loop oracle") {
    RngState rng(11);
    Tensor x = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    Tensor w = Tensor::uniform({4, 2}, -1.0, 1.0, rng);
    Tensor b = Tensor::zeros({2});
    Tape tape;
    Tensor y = linear(tape, x, w, b);
    const auto expected = matmul_oracle(x.data(), w.data(), 3, 4, 2);
    for (int i = 0; i < 6; ++i) {
        CHECK(std::abs(y.data()[i] - expected[i]) < 1e-12);
    }
}

TEST_CASE("linear: shape mismatch raises a dimension error") {
    Tape tape;
    Tensor x = Tensor::zeros({2, 3});
    Tensor w = Tensor::zeros({4, 2});
    Tensor b = Tensor::zeros({2});
    CHECK_THROWS_AS(linear(tape, x, w, b), DimensionError);
}

TEST_CASE("conv2d: identity kernel and constant field") {
    Tape tape;
    RngState rng(3);
    Tensor x = Tensor::uniform({1, 4, 4}, 0.0, 1.0, rng);
    Tensor ident = Tensor::from_data({1, 1, 1, 1}, {1.0});
    Tensor zero_bias = Tensor::zeros({1});
    Tensor y = conv2d(tape, x, ident, zero_bias, 1, 0);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(y.data()[i] == x.data()[i]);
    }

    Tensor c = Tensor::full({1, 5, 5}, 2.0);
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor interior = conv2d(tape, c, ones, zero_bias, 1, 0);
    for (double v : interior.data()) {
        CHECK(v == doctest::Approx(18.0));   // 9 taps * 2
    }
}

TEST_CASE("conv2d: random case matches the nested-loop oracle") {
    RngState rng(5);
    Tensor x = Tensor::uniform({2, 5, 5}, -1.0, 1.0, rng);
    Tensor k = Tensor::uniform({3, 2, 3, 3}, -1.0, 1.0, rng);
    Tensor b = Tensor::uniform({3}, -0.5, 0.5, rng);

    for (const auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
        const int oh = (5 + 2 * pad - 3) / stride + 1;
        Tape tape;
        Tensor y = conv2d(tape, x, k, b, stride, pad);
        REQUIRE(y.dim(1) == oh);
        const auto expected = conv_oracle(x.data(), 2, 5, 5, k.data(), 3, 3, b.data(),
                                          stride, pad, oh, oh);
        for (std::size_t i = 0; i < expected.size(); ++i) {
            CHECK(std::abs(y.data()[i] - expected[i]) < 1e-12);
        }
    }
}

TEST_CASE("conv2d: non-integral output extent raises a dimension error") {
    Tape tape;
    Tensor x = Tensor::zeros({1, 6, 6});
    Tensor k = Tensor::zeros({1, 1, 3, 3});
    Tensor b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(tape, x, k, b, 2, 0), DimensionError);   // (6-3)%2 != 0
    Tensor even = Tensor::zeros({1, 1, 2, 2});
    CHECK_THROWS_AS(conv2d(tape, x, even, b, 1, 0), DimensionError);
}

TEST_CASE("relu clamps negatives") {
    Tape tape;
    Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
    Tensor y = relu(tape, x);
    CHECK(y.data() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("dropout: p=0 and eval mode are exact identities") {
    RngState rng(9);
    Tensor x = Tensor::uniform({4, 5}, -2.0, 2.0, rng);
    Tape tape;
    RngState d1(123);
    Tensor y = dropout(tape, x, 0.0, d1, Mode::Train);
    CHECK(y.data() == x.data());

    RngState d2(123);
    Tensor z = dropout(tape, x, 0.9, d2, Mode::Eval);
    CHECK(z.data() == x.data());

    RngState d3(123);
    CHECK_THROWS_AS(dropout(tape, x, 1.0, d3, Mode::Train), ParameterError);
}

TEST_CASE("dropout: fixed seed reproduces the mask bit for bit") {
    RngState rng(10);
    Tensor x = Tensor::uniform({16, 8}, -1.0, 1.0, rng);
    Tape tape;
    RngState a(77), b(77);
    Tensor ya = dropout(tape, x, 0.4, a, Mode::Train);
    Tensor yb = dropout(tape, x, 0.4, b, Mode::Train);
    CHECK(ya.data() == yb.data());
}

TEST_CASE("batch_norm: train mode normalizes each column") {
    RngState rng(21);
    Tensor x = Tensor::uniform({8, 4}, -3.0, 3.0, rng);
    BatchNorm bn = BatchNorm::make(4);
    Tape tape;
    Tensor y = batch_norm(tape, x, bn, Mode::Train);
    // gamma=1, beta=0 at init, so the output is the normalized value itself
    for (int j = 0; j < 4; ++j) {
        double mean = 0.0, var = 0.0;
        for (int i = 0; i < 8; ++i) {
            mean += y.at({i, j});
        }
        mean /= 8.0;
        for (int i = 0; i < 8; ++i) {
            var += (y.at({i, j}) - mean) * (y.at({i, j}) - mean);
        }
        var /= 8.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-4);   // eps shifts the variance slightly
    }
}

TEST_CASE("batch_norm: running statistics feed eval mode") {
    RngState rng(22);
    Tensor x = Tensor::uniform({16, 3}, 1.0, 3.0, rng);
    BatchNorm bn = BatchNorm::make(3);
    for (int i = 0; i < 300; ++i) {
        Tape tape(false);
        batch_norm(tape, x, bn, Mode::Train);
    }
    // after many identical batches the running stats approach the batch stats,
    // so eval output approaches train output
    Tape tape(false);
    Tensor train_out = batch_norm(tape, x, bn, Mode::Train);
    Tensor eval_out = batch_norm(tape, x, bn, Mode::Eval);
    for (std::size_t i = 0; i < train_out.data().size(); ++i) {
        CHECK(train_out.data()[i] == doctest::Approx(eval_out.data()[i]).epsilon(0.01));
    }
}

TEST_CASE("backward: sum gives unit gradients and closed forms hold") {
    Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 4, -5, 6}, true);
    {
        Tape tape;
        Tensor loss = reduce_sum(tape, x);
        tape.backward(loss);
        for (double g : x.grad()) {
            CHECK(g == 1.0);
        }
    }

    // loss = (x*w)^2 for scalars: dloss/dx = 2*x*w^2
    Tensor xs = Tensor::scalar(1.7, true);
    Tensor ws = Tensor::scalar(-0.6, true);
    Tape tape;
    Tensor prod = mul(tape, xs, ws);
    Tensor loss = mul(tape, prod, prod);
    tape.backward(loss);
    CHECK(xs.grad()[0] == doctest::Approx(2.0 * 1.7 * 0.6 * 0.6));
    CHECK(ws.grad()[0] == doctest::Approx(2.0 * (-0.6) * 1.7 * 1.7));
}

TEST_CASE("backward: gradients accumulate across uses and tapes") {
    Tensor w = Tensor::from_data({2}, {0.3, -0.4}, true);
    {
        Tape tape;
        Tensor y = add(tape, w, w);   // dy/dw = 2 per use sum
        Tensor loss = reduce_sum(tape, y);
        tape.backward(loss);
        CHECK(w.grad() == std::vector<double>{2.0, 2.0});
    }
    {
        Tape tape;
        Tensor loss = reduce_sum(tape, w);
        tape.backward(loss);
        // second tape adds on top of the first
        CHECK(w.grad() == std::vector<double>{3.0, 3.0});
    }
}

TEST_CASE("tape contract errors") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = relu(tape, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);   // not scalar

    Tape tape2;
    Tensor loss = reduce_sum(tape2, x);
    tape2.backward(loss);
    CHECK_THROWS_AS(tape2.backward(loss), ContractError);   // already replayed

    Tape tape3;
    CHECK_THROWS_AS(tape3.backward(Tensor::scalar(1.0, true)), ContractError);   // leaf loss
}

TEST_CASE("finite differences: quadratic and relu-sum reference points") {
    auto sum_of_squares = [](Tape& tape, const Tensor& x) {
        return reduce_sum(tape, mul(tape, x, x));
    };
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    CHECK(finite_diff_check(sum_of_squares, x, 1e-5) < 1e-7);

    auto relu_sum = [](Tape& tape, const Tensor& x) {
        return reduce_sum(tape, relu(tape, x));
    };
    Tensor away = Tensor::from_data({4}, {0.5, -0.7, 1.2, -2.0});   // no zero coordinate
    CHECK(finite_diff_check(relu_sum, away, 1e-5) < 1e-6);
}

TEST_CASE("finite differences: every primitive") {
    RngState rng(31);
    const double tol = 1e-4;

    Tensor x = Tensor::uniform({3, 4}, 0.2, 1.5, rng);
    Tensor w = Tensor::uniform({4, 2}, -1.0, 1.0, rng);
    Tensor b = Tensor::uniform({2}, -0.5, 0.5, rng);
    auto lin = [&](Tape& t, const Tensor&) {
        Tensor y = linear(t, x, w, b);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(lin, x, 1e-5) < tol);
    CHECK(finite_diff_check(lin, w, 1e-5) < tol);
    CHECK(finite_diff_check(lin, b, 1e-5) < tol);

    Tensor mm_a = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    Tensor mm_b = Tensor::uniform({3, 2}, -1.0, 1.0, rng);
    auto mm = [&](Tape& t, const Tensor&) {
        Tensor y = matmul(t, mm_a, mm_b);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(mm, mm_a, 1e-5) < tol);
    CHECK(finite_diff_check(mm, mm_b, 1e-5) < tol);

    Tensor cx = Tensor::uniform({2, 6, 6}, -1.0, 1.0, rng);
    Tensor ck = Tensor::uniform({3, 2, 3, 3}, -0.7, 0.7, rng);
    Tensor cb = Tensor::uniform({3}, -0.3, 0.3, rng);
    auto conv = [&](Tape& t, const Tensor&) {
        Tensor y = conv2d(t, cx, ck, cb, 1, 1);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(conv, cx, 1e-5) < tol);
    CHECK(finite_diff_check(conv, ck, 1e-5) < tol);
    CHECK(finite_diff_check(conv, cb, 1e-5) < tol);

    Tensor rx = Tensor::uniform({12}, 0.3, 2.0, rng);   // away from the kink
    auto relu_path = [&](Tape& t, const Tensor&) {
        Tensor y = relu(t, rx);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(relu_path, rx, 1e-6) < tol);

    Tensor bx = Tensor::uniform({6, 3}, -1.0, 1.0, rng);
    BatchNorm bn = BatchNorm::make(3);
    RngState gscale(4);
    bn.gamma = Tensor::uniform({3}, 0.5, 1.5, gscale, true);
    bn.beta = Tensor::uniform({3}, -0.5, 0.5, gscale, true);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        auto bnf = [&, mode](Tape& t, const Tensor&) {
            Tensor y = batch_norm(t, bx, bn, mode);
            return reduce_sum(t, mul(t, y, y));
        };
        CHECK(finite_diff_check(bnf, bx, 1e-5) < tol);
        CHECK(finite_diff_check(bnf, bn.gamma, 1e-5) < tol);
        CHECK(finite_diff_check(bnf, bn.beta, 1e-5) < tol);
    }

    Tensor bx2 = Tensor::uniform({2, 4, 4}, -1.0, 1.0, rng);
    BatchNorm bn2 = BatchNorm::make(2);
    auto bn2f = [&](Tape& t, const Tensor&) {
        Tensor y = batch_norm2d(t, bx2, bn2, Mode::Train);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(bn2f, bx2, 1e-5) < tol);
    CHECK(finite_diff_check(bn2f, bn2.gamma, 1e-5) < tol);

    Tensor dx = Tensor::uniform({5, 4}, 0.5, 1.5, rng);
    auto drop = [&](Tape& t, const Tensor&) {
        RngState fixed(99);   // same mask on every call
        Tensor y = dropout(t, dx, 0.3, fixed, Mode::Train);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(drop, dx, 1e-5) < tol);

    auto rdrop = [&](Tape& t, const Tensor&) {
        RngState fixed(101);
        Tensor y = row_dropout(t, dx, 0.3, fixed, Mode::Train);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(rdrop, dx, 1e-5) < tol);

    Tensor px = Tensor::uniform({2, 4, 4}, -1.0, 1.0, rng);
    auto pool = [&](Tape& t, const Tensor&) {
        Tensor y = max_pool2(t, px);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(pool, px, 1e-6) < tol);

    Tensor tx = Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng);
    auto trans = [&](Tape& t, const Tensor&) {
        Tensor y = transpose(t, tx, 0, 2);
        y = reshape(t, y, {6, 4});
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(trans, tx, 1e-5) < tol);

    Tensor ca = Tensor::uniform({2, 3}, -1.0, 1.0, rng);
    Tensor cb2 = Tensor::uniform({4, 3}, -1.0, 1.0, rng);
    auto cat = [&](Tape& t, const Tensor&) {
        Tensor y = concat(t, {ca, cb2}, 0);
        y = reduce_mean(t, y, 0);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(cat, ca, 1e-5) < tol);
    CHECK(finite_diff_check(cat, cb2, 1e-5) < tol);

    Tensor aa = Tensor::scalar(1.4);
    Tensor ab = Tensor::scalar(-2.2);
    auto abs_path = [&](Tape& t, const Tensor&) {
        return abs_err(t, aa, ab);
    };
    CHECK(finite_diff_check(abs_path, aa, 1e-6) < tol);
    CHECK(finite_diff_check(abs_path, ab, 1e-6) < tol);

    Tensor sa = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    Tensor sb = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    auto mixed = [&](Tape& t, const Tensor&) {
        Tensor y = add(t, scale(t, sa, 0.7), mul(t, sa, sb));
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(mixed, sa, 1e-5) < tol);
    CHECK(finite_diff_check(mixed, sb, 1e-5) < tol);
}

TEST_CASE("concat then slicing reconstructs the inputs exactly") {
    RngState rng(41);
    Tensor a = Tensor::uniform({2, 3}, -1.0, 1.0, rng);
    Tensor b = Tensor::uniform({2, 2}, -1.0, 1.0, rng);
    Tensor c = Tensor::uniform({2, 4}, -1.0, 1.0, rng);
    Tape tape;
    Tensor y = concat(tape, {a, b, c}, 1);
    REQUIRE(y.shape() == Shape{2, 9});
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 3; ++j) {
            CHECK(y.at({i, j}) == a.at({i, j}));
        }
        for (int j = 0; j < 2; ++j) {
            CHECK(y.at({i, 3 + j}) == b.at({i, j}));
        }
        for (int j = 0; j < 4; ++j) {
            CHECK(y.at({i, 5 + j}) == c.at({i, j}));
        }
    }
}

TEST_CASE("transpose and reduce_mean forward values") {
    Tape tape;
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = transpose(tape, x, 0, 1);
    REQUIRE(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 1}) == 4.0);
    CHECK(t.at({2, 0}) == 3.0);

    Tensor m0 = reduce_mean(tape, x, 0);
    REQUIRE(m0.shape() == Shape{3});
    CHECK(m0.data() == std::vector<double>{2.5, 3.5, 4.5});
    Tensor m1 = reduce_mean(tape, x, 1);
    CHECK(m1.data() == std::vector<double>{2.0, 5.0});
}

TEST_CASE("max_pool2 picks the 2x2 maxima") {
    Tape tape;
    Tensor x = Tensor::from_data({1, 2, 4}, {1, 5, 2, 0,
                                             3, 4, 1, 7});
    Tensor y = max_pool2(tape, x);
    REQUIRE(y.shape() == Shape{1, 1, 2});
    CHECK(y.data() == std::vector<double>{5.0, 7.0});
}

TEST_CASE("gradient accumulation: sub-batches equal one shot") {
    RngState rng(55);
    Tensor w = Tensor::uniform({4, 3}, -1.0, 1.0, rng, true);
    Tensor b = Tensor::uniform({3}, -0.5, 0.5, rng, true);
    Tensor batch = Tensor::uniform({8, 4}, 0.1, 1.0, rng);

    auto loss_for = [&](Tape& tape, const Tensor& rows) {
        Tensor y = relu(tape, linear(tape, rows, w, b));
        return reduce_sum(tape, mul(tape, y, y));
    };

    w.zero_grad();
    b.zero_grad();
    {
        Tape tape;
        tape.backward(loss_for(tape, batch));
    }
    const auto gw_full = w.grad();
    const auto gb_full = b.grad();

    w.zero_grad();
    b.zero_grad();
    for (int half = 0; half < 2; ++half) {
        std::vector<double> rows(batch.data().begin() + half * 16,
                                 batch.data().begin() + (half + 1) * 16);
        Tensor sub = Tensor::from_data({4, 4}, std::move(rows));
        Tape tape;
        tape.backward(loss_for(tape, sub));
    }
    for (std::size_t i = 0; i < gw_full.size(); ++i) {
        CHECK(std::abs(w.grad()[i] - gw_full[i]) < 1e-10);
    }
    for (std::size_t i = 0; i < gb_full.size(); ++i) {
        CHECK(std::abs(b.grad()[i] - gb_full[i]) < 1e-10);
    }
}

TEST_CASE("rng: determinism, splitting, and frequencies") {
    RngState a(123), b(123);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }

    // child streams depend on the seed, not on parent consumption
    RngState parent1(7), parent2(7);
    parent2.next_u64();
    CHECK(parent1.split(3).next_u64() == parent2.split(3).next_u64());

    RngState freq(2024);
    int hits = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        if (freq.bernoulli(0.2)) {
            ++hits;
        }
    }
    CHECK(hits > trials * 0.18);
    CHECK(hits < trials * 0.22);

    RngState restored = RngState::restore(a.seed(), a.state());
    CHECK(restored.next_u64() == b.next_u64());
}
