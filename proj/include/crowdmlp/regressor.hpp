#pragma once

#include <vector>

#include "crowdmlp/tensor.hpp"
#include "crowdmlp/tokenizer.hpp"

namespace crowdmlp {

// One mixing MLP: two fully-connected layers with relu + dropout, then a
// batch-normalized residual. Width is the mixed axis; w1 maps back to it so
// the residual typechecks.
struct MixingBlock {
    Tensor w0;   // [width, hidden]
    Tensor b0;
    Tensor w1;   // [hidden, width]
    Tensor b1;
    BatchNorm bn;
    double drop_rate = 0.1;

    int width() const { return w0.dim(0); }
    static MixingBlock init(int width, int hidden, double drop_rate, RngState& rng);
};

// Token mixing (along the sequence axis, via transposes) followed by channel
// mixing; preserves the [count, D] shape.
struct TmlpBlock {
    MixingBlock token_mix;
    MixingBlock channel_mix;

    static TmlpBlock init(int tokens, int dim, int channel_hidden_factor,
                          double drop_rate, RngState& rng);
};

struct CountHead {
    Tensor w1;   // [D, D/2]
    Tensor b1;
    Tensor w2;   // [D/2, 1]
    Tensor b2;

    static CountHead init(int dim, RngState& rng);
};

struct RegressorConfig {
    int token_dim = 256;
    int top_depth = 3;                // paper: heads depth 1, top encoder depth 3
    double drop_rate = 0.1;
    int channel_hidden_factor = 2;    // channel-mix hidden = factor * D
};

struct RegressorParams {
    std::vector<TmlpBlock> heads;     // one depth-1 head per enabled stream
    std::vector<TmlpBlock> top;       // shared encoder over the concatenated tokens
    CountHead count_head;

    // stream_token_counts lists the per-stream token counts in stream order.
    static RegressorParams init(const std::vector<int>& stream_token_counts,
                                const RegressorConfig& config, RngState& rng);
};

Tensor mixing_forward(Tape& tape, MixingBlock& block, const Tensor& x, RngState& rng, Mode mode);
Tensor tmlp_forward(Tape& tape, TmlpBlock& block, const Tensor& tokens, RngState& rng, Mode mode);

struct RegressorOutput {
    Tensor count;       // [1,1], unclamped
    Tensor embedding;   // concatenated per-stream embeddings, [total_tokens, D]
};

RegressorOutput regress_count(Tape& tape, const std::vector<TokenStream>& streams,
                              RegressorParams& params, RngState& rng, Mode mode);

} // namespace crowdmlp
