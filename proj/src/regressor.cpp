#include "crowdmlp/regressor.hpp"

#include <cmath>

namespace crowdmlp {

MixingBlock MixingBlock::init(int width, int hidden, double drop_rate, RngState& rng) {
    if (width < 1 || hidden < 1) {
        throw ConfigError("mixing block width and hidden size must be positive");
    }
    MixingBlock block;
    block.w0 = Tensor::normal({width, hidden}, 0.0, std::sqrt(2.0 / width), rng, true);
    block.b0 = Tensor::zeros({hidden}, true);
    block.w1 = Tensor::normal({hidden, width}, 0.0, std::sqrt(2.0 / hidden), rng, true);
    block.b1 = Tensor::zeros({width}, true);
    block.bn = BatchNorm::make(width);
    block.drop_rate = drop_rate;
    return block;
}

TmlpBlock TmlpBlock::init(int tokens, int dim, int channel_hidden_factor,
                          double drop_rate, RngState& rng) {
    TmlpBlock block;
    // token-mix hidden = token count, channel-mix hidden = factor * D
    block.token_mix = MixingBlock::init(tokens, tokens, drop_rate, rng);
    block.channel_mix = MixingBlock::init(dim, channel_hidden_factor * dim, drop_rate, rng);
    return block;
}

CountHead CountHead::init(int dim, RngState& rng) {
    if (dim < 2) {
        throw ConfigError("count head needs token dimension >= 2");
    }
    const int hidden = dim / 2;
    CountHead head;
    head.w1 = Tensor::normal({dim, hidden}, 0.0, std::sqrt(2.0 / dim), rng, true);
    head.b1 = Tensor::zeros({hidden}, true);
    head.w2 = Tensor::normal({hidden, 1}, 0.0, std::sqrt(1.0 / hidden), rng, true);
    head.b2 = Tensor::zeros({1}, true);
    return head;
}

RegressorParams RegressorParams::init(const std::vector<int>& stream_token_counts,
                                      const RegressorConfig& config, RngState& rng) {
    if (stream_token_counts.empty()) {
        throw ConfigError("regressor needs at least one token stream");
    }
    if (config.top_depth < 1 || config.channel_hidden_factor < 1) {
        throw ConfigError("regressor depths and hidden factors must be positive");
    }
    RegressorParams params;
    int total_tokens = 0;
    for (int count : stream_token_counts) {
        if (count < 1) {
            throw ConfigError("every stream must contribute at least one token");
        }
        params.heads.push_back(TmlpBlock::init(count, config.token_dim,
                                               config.channel_hidden_factor,
                                               config.drop_rate, rng));
        total_tokens += count;
    }
    for (int i = 0; i < config.top_depth; ++i) {
        params.top.push_back(TmlpBlock::init(total_tokens, config.token_dim,
                                             config.channel_hidden_factor,
                                             config.drop_rate, rng));
    }
    params.count_head = CountHead::init(config.token_dim, rng);
    return params;
}

Tensor mixing_forward(Tape& tape, MixingBlock& block, const Tensor& x, RngState& rng, Mode mode) {
    if (x.ndim() != 2 || x.dim(1) != block.width()) {
        throw DimensionError("mixing block of width " + std::to_string(block.width()) +
                             " cannot consume " + shape_str(x.shape()));
    }
    Tensor f = dropout(tape, relu(tape, linear(tape, x, block.w0, block.b0)),
                       block.drop_rate, rng, mode);
    f = dropout(tape, relu(tape, linear(tape, f, block.w1, block.b1)),
                block.drop_rate, rng, mode);
    return batch_norm(tape, add(tape, f, x), block.bn, mode);
}

Tensor tmlp_forward(Tape& tape, TmlpBlock& block, const Tensor& tokens, RngState& rng, Mode mode) {
    Tensor t = transpose(tape, tokens, 0, 1);           // [D, count]
    t = mixing_forward(tape, block.token_mix, t, rng, mode);
    t = transpose(tape, t, 0, 1);                       // [count, D]
    return mixing_forward(tape, block.channel_mix, t, rng, mode);
}

RegressorOutput regress_count(Tape& tape, const std::vector<TokenStream>& streams,
                              RegressorParams& params, RngState& rng, Mode mode) {
    if (streams.empty()) {
        throw ConfigError("regress_count received no streams");
    }
    if (streams.size() != params.heads.size()) {
        throw ConfigError("regressor has " + std::to_string(params.heads.size()) +
                          " heads but received " + std::to_string(streams.size()) +
                          " streams; ablation flags must match");
    }
    std::vector<Tensor> embeddings;
    embeddings.reserve(streams.size());
    for (std::size_t i = 0; i < streams.size(); ++i) {
        embeddings.push_back(tmlp_forward(tape, params.heads[i], streams[i].tokens, rng, mode));
    }
    Tensor joined = embeddings.size() == 1 ? embeddings[0] : concat(tape, embeddings, 0);

    Tensor refined = joined;
    for (auto& block : params.top) {
        refined = tmlp_forward(tape, block, refined, rng, mode);
    }

    // The hidden relu runs per token before the pool: the trailing batch norm
    // gives every column a zero mean over tokens, so pooling the tokens
    // directly would collapse the head to a constant.
    Tensor hidden = relu(tape, linear(tape, refined, params.count_head.w1, params.count_head.b1));
    Tensor pooled = reshape(tape, reduce_mean(tape, hidden, 0), {1, hidden.dim(1)});
    Tensor count = linear(tape, pooled, params.count_head.w2, params.count_head.b2);
    return RegressorOutput{count, joined};
}

} // namespace crowdmlp
