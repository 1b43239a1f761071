#include <doctest.h>

#include <cmath>

#include "crowdmlp/model.hpp"
#include "crowdmlp/regressor.hpp"

using namespace crowdmlp;

namespace {

std::vector<TokenStream> random_streams(const std::vector<int>& counts, int dim, RngState& rng) {
    const Granularity kinds[4] = {Granularity::Feat16, Granularity::Feat8,
                                  Granularity::Feat4, Granularity::Raw};
    std::vector<TokenStream> streams;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        streams.push_back({Tensor::uniform({counts[i], dim}, -1.0, 1.0, rng),
                           kinds[i % 4], granularity_patch_size(kinds[i % 4])});
    }
    return streams;
}

void zero_all(CrowdMlp& model) {
    for (auto& p : model.parameters()) {
        std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
    }
}

// Nudge every parameter so no preactivation sits exactly on a relu kink
// (zero-initialized biases otherwise do when their unit is dead).
void jitter_params(CrowdMlp& model, std::uint64_t seed) {
    RngState rng(seed);
    for (auto& p : model.parameters()) {
        for (double& v : p.tensor.data()) {
            v += rng.uniform(-0.05, 0.05);
        }
    }
}

} // namespace

TEST_CASE("mixing block: zero weights leave the normalized residual") {
    RngState rng(1);
    MixingBlock block = MixingBlock::init(5, 7, 0.1, rng);
    std::fill(block.w0.data().begin(), block.w0.data().end(), 0.0);
    std::fill(block.w1.data().begin(), block.w1.data().end(), 0.0);
    std::fill(block.b0.data().begin(), block.b0.data().end(), 0.0);
    std::fill(block.b1.data().begin(), block.b1.data().end(), 0.0);

    Tensor x = Tensor::uniform({4, 5}, -2.0, 2.0, rng);
    Tape tape(false);
    RngState drop_rng(2);
    Tensor y = mixing_forward(tape, block, x, drop_rng, Mode::Eval);

    // eval BN at init: (x - 0) / sqrt(1 + eps), gamma=1, beta=0
    const double inv = 1.0 / std::sqrt(1.0 + block.bn.eps);
    for (std::size_t i = 0; i < x.data().size(); ++i) {
        CHECK(y.data()[i] == doctest::Approx(x.data()[i] * inv).epsilon(1e-12));
    }
}

TEST_CASE("mixing block and tmlp block preserve shapes") {
    RngState rng(3);
    MixingBlock block = MixingBlock::init(256, 64, 0.1, rng);
    Tensor x = Tensor::uniform({16, 256}, -1.0, 1.0, rng);
    Tape tape(false);
    RngState drop_rng(4);
    CHECK(mixing_forward(tape, block, x, drop_rng, Mode::Eval).shape() == Shape{16, 256});

    TmlpBlock tmlp = TmlpBlock::init(64, 32, 2, 0.1, rng);
    Tensor tokens = Tensor::uniform({64, 32}, -1.0, 1.0, rng);
    CHECK(tmlp_forward(tape, tmlp, tokens, drop_rng, Mode::Eval).shape() == Shape{64, 32});

    CHECK_THROWS_AS(mixing_forward(tape, block, tokens, drop_rng, Mode::Eval), DimensionError);
}

TEST_CASE("tmlp block: a single-token stream degenerates cleanly") {
    RngState rng(5);
    TmlpBlock tmlp = TmlpBlock::init(1, 8, 2, 0.1, rng);
    Tensor tokens = Tensor::uniform({1, 8}, -1.0, 1.0, rng);
    Tape tape(false);
    RngState drop_rng(6);
    Tensor out = tmlp_forward(tape, tmlp, tokens, drop_rng, Mode::Eval);
    CHECK(out.shape() == Shape{1, 8});
    for (double v : out.data()) {
        CHECK(std::isfinite(v));
    }
}

TEST_CASE("gradcheck through mixing and tmlp blocks (eval mode)") {
    RngState rng(7);
    MixingBlock block = MixingBlock::init(4, 6, 0.1, rng);
    Tensor x = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    auto through_block = [&](Tape& t, const Tensor&) {
        RngState drop_rng(1);
        Tensor y = mixing_forward(t, block, x, drop_rng, Mode::Eval);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(through_block, x, 1e-5) < 1e-4);
    CHECK(finite_diff_check(through_block, block.w0, 1e-5) < 1e-4);
    CHECK(finite_diff_check(through_block, block.bn.gamma, 1e-5) < 1e-4);

    TmlpBlock tmlp = TmlpBlock::init(5, 4, 2, 0.1, rng);
    Tensor tokens = Tensor::uniform({5, 4}, -1.0, 1.0, rng);
    auto through_tmlp = [&](Tape& t, const Tensor&) {
        RngState drop_rng(2);
        Tensor y = tmlp_forward(t, tmlp, tokens, drop_rng, Mode::Eval);
        return reduce_sum(t, mul(t, y, y));
    };
    CHECK(finite_diff_check(through_tmlp, tokens, 1e-5) < 1e-4);
    CHECK(finite_diff_check(through_tmlp, tmlp.token_mix.w1, 1e-5) < 1e-4);
    CHECK(finite_diff_check(through_tmlp, tmlp.channel_mix.w0, 1e-5) < 1e-4);
}

TEST_CASE("regress_count: the joined embedding covers 340 tokens at H=256") {
    const std::vector<int> counts = {4, 16, 64, 256};
    RegressorConfig cfg;
    cfg.token_dim = 8;
    RngState rng(9);
    RegressorParams params = RegressorParams::init(counts, cfg, rng);
    auto streams = random_streams(counts, 8, rng);
    Tape tape(false);
    RngState drop_rng(3);
    const auto out = regress_count(tape, streams, params, drop_rng, Mode::Eval);
    CHECK(out.embedding.shape() == Shape{340, 8});
    CHECK(out.count.size() == 1);   // one scalar, sign unconstrained
}

TEST_CASE("regress_count: stream/head mismatch is a configuration error") {
    RegressorConfig cfg;
    cfg.token_dim = 8;
    RngState rng(10);
    RegressorParams params = RegressorParams::init({4, 16}, cfg, rng);
    auto streams = random_streams({4}, 8, rng);
    Tape tape(false);
    RngState drop_rng(4);
    CHECK_THROWS_AS(regress_count(tape, streams, params, drop_rng, Mode::Eval), ConfigError);
}

TEST_CASE("model: bias-only path returns the count-head bias for any input") {
    RngState rng(11);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    zero_all(model);
    model.regressor_params().count_head.b2.data()[0] = 7.25;

    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        RngState img_rng(seed);
        Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
        for (Mode mode : {Mode::Eval, Mode::Train}) {
            Tape tape(false);
            RngState fwd_rng(17);
            CHECK(model.forward(tape, image, fwd_rng, mode).count.item() == 7.25);
        }
    }
}

TEST_CASE("model: eval forward is bitwise deterministic") {
    RngState rng(12);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    RngState img_rng(4);
    Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
    RngState r1(0), r2(0);
    Tape t1(false), t2(false);
    const double a = model.forward(t1, image, r1, Mode::Eval).count.item();
    const double b = model.forward(t2, image, r2, Mode::Eval).count.item();
    CHECK(a == b);
}

TEST_CASE("model: every stream ablation strictly shrinks the parameter count") {
    RngState rng(13);
    CrowdMlp full = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    const auto full_count = full.parameter_count();
    for (int drop = 0; drop < 4; ++drop) {
        ModelConfig cfg = ModelConfig::micro_profile();
        cfg.streams.feat16 = drop != 0;
        cfg.streams.feat8 = drop != 1;
        cfg.streams.feat4 = drop != 2;
        cfg.streams.raw = drop != 3;
        RngState ablate_rng(13);
        CrowdMlp ablated = CrowdMlp::init(cfg, ablate_rng);
        CHECK(ablated.parameter_count() < full_count);
    }
}

TEST_CASE("model: exhaustive finite differences on a reduced micro model") {
    // Two-stream micro variant: small enough to check every coordinate of
    // every parameter against central differences.
    ModelConfig cfg = ModelConfig::micro_profile();
    cfg.streams.feat16 = false;
    cfg.streams.raw = false;
    cfg.top_depth = 1;
    RngState rng(14);
    CrowdMlp model = CrowdMlp::init(cfg, rng);
    jitter_params(model, 70);

    RngState img_rng(23);
    Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
    auto loss = [&](Tape& tape, const Tensor&) {
        RngState fwd_rng(31);   // fixed dropout masks per evaluation
        return model.forward(tape, image, fwd_rng, Mode::Eval).count;
    };

    for (auto& p : model.parameters()) {
        const double err = finite_diff_check(loss, p.tensor, 1e-5);
        INFO("parameter ", p.name);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("model: sampled finite differences on the full micro model") {
    RngState rng(15);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    jitter_params(model, 71);
    RngState img_rng(29);
    Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
    auto loss = [&](Tape& tape, const Tensor&) {
        RngState fwd_rng(37);
        return model.forward(tape, image, fwd_rng, Mode::Eval).count;
    };
    for (auto& p : model.parameters()) {
        const double err = finite_diff_check(loss, p.tensor, 1e-5, 12, 99);
        INFO("parameter ", p.name);
        CHECK(err < 1e-4);
    }
}
