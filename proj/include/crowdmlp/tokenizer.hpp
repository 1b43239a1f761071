#pragma once

#include <string>
#include <vector>

#include "crowdmlp/tensor.hpp"

namespace crowdmlp {

// The four coarse-to-fine token streams. The three feature streams patch the
// H/8 frontend map at 16/8/4; the raw stream patches the image itself at 16.
enum class Granularity { Feat16, Feat8, Feat4, Raw };

const char* granularity_name(Granularity g);
int granularity_patch_size(Granularity g);

// Per-granularity ablation switches, mirroring the stream-removal table.
struct StreamSpec {
    bool feat16 = true;
    bool feat8 = true;
    bool feat4 = true;
    bool raw = true;

    std::vector<Granularity> enabled() const;
    int enabled_count() const;
};

struct TokenizerConfig {
    int image_size = 128;       // H
    int feature_channels = 32;  // channels of the frontend output
    int token_dim = 256;        // D
    double raw_drop_rate = 0.2;
    StreamSpec streams;

    void validate() const;
};

// Token count and flattened patch width for one stream at a given config.
int stream_token_count(Granularity g, int image_size);
int stream_patch_dim(Granularity g, int feature_channels);

struct TokenStream {
    Tensor tokens;       // [count, D]
    Granularity granularity;
    int patch_size;      // pixels on the stream's source grid
};

// One independent linear projection per enabled stream.
struct ProjectionParams {
    struct Proj {
        Granularity granularity;
        Tensor weight;   // [patch_dim, D]
        Tensor bias;     // [D]
    };
    std::vector<Proj> projections;

    static ProjectionParams init(const TokenizerConfig& config, RngState& rng);
};

// Rows are the non-overlapping p x p patches of x[C,S,S] in row-major patch
// order; each row flattens its patch as (channel, y, x). Invertible.
Tensor split_reshape(Tape& tape, const Tensor& x, int patch);

// Whole-token dropout on the raw stream; eval mode is the identity.
Tensor raw_token_dropout(Tape& tape, const Tensor& tokens, double rate, RngState& rng, Mode mode);

std::vector<TokenStream> build_streams(Tape& tape, const Tensor& image, const Tensor& features,
                                       const ProjectionParams& proj, const TokenizerConfig& config,
                                       RngState& rng, Mode mode);

} // namespace crowdmlp
