#include "crowdmlp/tokenizer.hpp"

#include <cmath>

namespace crowdmlp {

const char* granularity_name(Granularity g) {
    switch (g) {
    case Granularity::Feat16: return "feat16";
    case Granularity::Feat8: return "feat8";
    case Granularity::Feat4: return "feat4";
    case Granularity::Raw: return "raw";
    }
    return "?";
}

int granularity_patch_size(Granularity g) {
    switch (g) {
    case Granularity::Feat16: return 16;
    case Granularity::Feat8: return 8;
    case Granularity::Feat4: return 4;
    case Granularity::Raw: return 16;
    }
    return 0;
}

std::vector<Granularity> StreamSpec::enabled() const {
    std::vector<Granularity> out;
    if (feat16) out.push_back(Granularity::Feat16);
    if (feat8) out.push_back(Granularity::Feat8);
    if (feat4) out.push_back(Granularity::Feat4);
    if (raw) out.push_back(Granularity::Raw);
    return out;
}

int StreamSpec::enabled_count() const {
    return static_cast<int>(enabled().size());
}

int stream_token_count(Granularity g, int image_size) {
    const int p = granularity_patch_size(g);
    const int grid = g == Granularity::Raw ? image_size : image_size / 8;
    return (grid / p) * (grid / p);
}

int stream_patch_dim(Granularity g, int feature_channels) {
    const int p = granularity_patch_size(g);
    const int channels = g == Granularity::Raw ? 3 : feature_channels;
    return channels * p * p;
}

void TokenizerConfig::validate() const {
    if (token_dim < 2) {
        throw ConfigError("token dimension must be >= 2");
    }
    if (raw_drop_rate < 0.0 || raw_drop_rate >= 1.0) {
        throw ConfigError("raw token drop rate must lie in [0, 1)");
    }
    if (streams.enabled_count() == 0) {
        throw ConfigError("at least one token stream must be enabled");
    }
    for (Granularity g : streams.enabled()) {
        const int p = granularity_patch_size(g);
        const int grid = g == Granularity::Raw ? image_size : image_size / 8;
        if (image_size % 8 != 0 || grid % p != 0 || grid / p < 1) {
            throw ConfigError(std::string("image size ") + std::to_string(image_size) +
                              " cannot be tokenized by stream " + granularity_name(g) +
                              " (grid " + std::to_string(grid) + ", patch " + std::to_string(p) +
                              "); minimum is 128 with all streams enabled");
        }
    }
}

ProjectionParams ProjectionParams::init(const TokenizerConfig& config, RngState& rng) {
    config.validate();
    ProjectionParams params;
    for (Granularity g : config.streams.enabled()) {
        const int patch_dim = stream_patch_dim(g, config.feature_channels);
        ProjectionParams::Proj proj;
        proj.granularity = g;
        proj.weight = Tensor::normal({patch_dim, config.token_dim}, 0.0,
                                     std::sqrt(1.0 / patch_dim), rng, true);
        proj.bias = Tensor::zeros({config.token_dim}, true);
        params.projections.push_back(std::move(proj));
    }
    return params;
}

Tensor split_reshape(Tape& tape, const Tensor& x, int patch) {
    if (x.ndim() != 3 || x.dim(1) != x.dim(2)) {
        throw DimensionError("split_reshape expects x[C,S,S], got " + shape_str(x.shape()));
    }
    const int c = x.dim(0), s = x.dim(1);
    if (patch < 1 || s % patch != 0) {
        throw DimensionError("split_reshape: extent " + std::to_string(s) +
                             " is not divisible by patch " + std::to_string(patch));
    }
    const int g = s / patch;
    // (C, gy*p, gx*p) -> (gy, gx, C, p, p) -> (g^2, C*p^2)
    Tensor v = reshape(tape, x, {c, g, patch, g, patch});
    v = transpose(tape, v, 0, 1);   // (gy, C, py, gx, px)
    v = transpose(tape, v, 2, 3);   // (gy, C, gx, py, px)
    v = transpose(tape, v, 1, 2);   // (gy, gx, C, py, px)
    return reshape(tape, v, {g * g, c * patch * patch});
}

Tensor raw_token_dropout(Tape& tape, const Tensor& tokens, double rate, RngState& rng, Mode mode) {
    return row_dropout(tape, tokens, rate, rng, mode);
}

std::vector<TokenStream> build_streams(Tape& tape, const Tensor& image, const Tensor& features,
                                       const ProjectionParams& proj, const TokenizerConfig& config,
                                       RngState& rng, Mode mode) {
    config.validate();
    const int h = config.image_size;
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != h || image.dim(2) != h) {
        throw DimensionError("build_streams expects a [3," + std::to_string(h) + "," +
                             std::to_string(h) + "] image, got " + shape_str(image.shape()));
    }
    if (features.ndim() != 3 || features.dim(0) != config.feature_channels ||
        features.dim(1) != h / 8 || features.dim(2) != h / 8) {
        throw DimensionError("build_streams expects [" + std::to_string(config.feature_channels) +
                             "," + std::to_string(h / 8) + "," + std::to_string(h / 8) +
                             "] features, got " + shape_str(features.shape()));
    }
    const auto enabled = config.streams.enabled();
    if (proj.projections.size() != enabled.size()) {
        throw ConfigError("projection parameters cover " + std::to_string(proj.projections.size()) +
                          " streams but " + std::to_string(enabled.size()) + " are enabled");
    }

    std::vector<TokenStream> streams;
    for (std::size_t i = 0; i < enabled.size(); ++i) {
        const Granularity g = enabled[i];
        if (proj.projections[i].granularity != g) {
            throw ConfigError("projection order does not match enabled streams");
        }
        const int p = granularity_patch_size(g);
        Tensor rows = g == Granularity::Raw ? split_reshape(tape, image, p)
                                            : split_reshape(tape, features, p);
        Tensor tokens = linear(tape, rows, proj.projections[i].weight, proj.projections[i].bias);
        if (g == Granularity::Raw) {
            tokens = raw_token_dropout(tape, tokens, config.raw_drop_rate, rng, mode);
        }
        streams.push_back(TokenStream{tokens, g, p});
    }
    return streams;
}

} // namespace crowdmlp
