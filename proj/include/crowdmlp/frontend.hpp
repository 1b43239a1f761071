#pragma once

#include <string>
#include <vector>

#include "crowdmlp/tensor.hpp"

namespace crowdmlp {

// Local convolutional feature extractor. Three conv blocks, each ending in a
// 2x2 max pool, take an H x H image down to H/8 x H/8; a final 1x1 conv
// shortens the channel width.
struct FrontendConfig {
    std::vector<int> block_channels = {16, 32, 64};
    int convs_per_block = 2;
    int reduced_channels = 32;
    std::string weights_path;   // optional checkpoint to load instead of random init

    void validate() const;
};

struct ConvUnit {
    Tensor kernel;   // [out, in, 3, 3]
    Tensor bias;     // [out]
    BatchNorm bn;
};

struct FrontendParams {
    std::vector<std::vector<ConvUnit>> blocks;
    Tensor reduce_kernel;   // [reduced, last_width, 1, 1]
    Tensor reduce_bias;

    static FrontendParams init(const FrontendConfig& config, RngState& rng);
};

// image must be [3, H, H] with H divisible by 8; output is
// [reduced_channels, H/8, H/8] and differentiable end to end. Train mode
// updates the batch-norm running statistics, so train-mode calls must be
// serialized per parameter set.
Tensor extract_features(Tape& tape, const Tensor& image, FrontendParams& params, Mode mode);

} // namespace crowdmlp
