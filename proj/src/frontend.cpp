#include "crowdmlp/frontend.hpp"

#include <cmath>

namespace crowdmlp {

void FrontendConfig::validate() const {
    if (block_channels.size() != 3) {
        throw ConfigError("frontend needs exactly 3 blocks (3 pooling stages give the /8 resolution), got " +
                          std::to_string(block_channels.size()));
    }
    for (int c : block_channels) {
        if (c < 1) {
            throw ConfigError("frontend block widths must be positive");
        }
    }
    if (convs_per_block < 1) {
        throw ConfigError("frontend needs at least one conv per block");
    }
    if (reduced_channels < 1) {
        throw ConfigError("frontend reduced_channels must be >= 1");
    }
}

FrontendParams FrontendParams::init(const FrontendConfig& config, RngState& rng) {
    config.validate();
    FrontendParams params;
    int in_channels = 3;
    for (int width : config.block_channels) {
        std::vector<ConvUnit> block;
        for (int i = 0; i < config.convs_per_block; ++i) {
            ConvUnit unit;
            const int fan_in = in_channels * 9;
            unit.kernel = Tensor::normal({width, in_channels, 3, 3}, 0.0,
                                         std::sqrt(2.0 / fan_in), rng, true);
            unit.bias = Tensor::zeros({width}, true);
            unit.bn = BatchNorm::make(width);
            block.push_back(std::move(unit));
            in_channels = width;
        }
        params.blocks.push_back(std::move(block));
    }
    params.reduce_kernel = Tensor::normal({config.reduced_channels, in_channels, 1, 1}, 0.0,
                                          std::sqrt(1.0 / in_channels), rng, true);
    params.reduce_bias = Tensor::zeros({config.reduced_channels}, true);
    return params;
}

Tensor extract_features(Tape& tape, const Tensor& image, FrontendParams& params, Mode mode) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw DimensionError("frontend expects a [3,H,H] image, got " + shape_str(image.shape()));
    }
    if (image.dim(1) != image.dim(2)) {
        throw DimensionError("frontend expects a square image, got " + shape_str(image.shape()));
    }
    if (image.dim(1) % 8 != 0) {
        throw DimensionError("frontend input extent must be divisible by 8, got " +
                             std::to_string(image.dim(1)));
    }
    Tensor x = image;
    for (auto& block : params.blocks) {
        for (auto& unit : block) {
            x = conv2d(tape, x, unit.kernel, unit.bias, 1, 1);
            x = batch_norm2d(tape, x, unit.bn, mode);
            x = relu(tape, x);
        }
        x = max_pool2(tape, x);
    }
    return conv2d(tape, x, params.reduce_kernel, params.reduce_bias, 1, 0);
}

} // namespace crowdmlp
