#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdmlp/frontend.hpp"
#include "crowdmlp/regressor.hpp"
#include "crowdmlp/tensor.hpp"
#include "crowdmlp/tokenizer.hpp"

namespace crowdmlp {

struct ModelConfig {
    int input_size = 128;      // native square input extent (crop and window size)
    int token_dim = 64;        // D
    FrontendConfig frontend;
    StreamSpec streams;
    double mix_drop_rate = 0.1;
    double raw_drop_rate = 0.2;
    int top_depth = 3;
    int channel_hidden_factor = 2;

    void validate() const;
    TokenizerConfig tokenizer_config() const;
    RegressorConfig regressor_config() const;
    std::vector<int> stream_token_counts() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    // Small profile trainable on a few CPU cores in minutes.
    static ModelConfig desk_profile();
    // The reported configuration: 256 crops, D = 256. Compute-heavy.
    static ModelConfig paper_profile();
    // Gradient-check profile: H=128, D=16, widths [4,8,8].
    static ModelConfig tiny_profile();
    // Smallest legal model; cheap enough for exhaustive finite differences.
    static ModelConfig micro_profile();
};

struct ParamRef {
    std::string name;
    Tensor tensor;
};

// Frontend + projections + regressor behind one parameter set (the shared
// weights all three split-counting passes run through).
class CrowdMlp {
public:
    static CrowdMlp init(const ModelConfig& config, RngState& rng);

    const ModelConfig& config() const { return config_; }

    struct Output {
        Tensor count;              // [1,1] scalar, any sign
        Tensor pooled_embedding;   // [D] mean over the concatenated tokens
    };
    Output forward(Tape& tape, const Tensor& image, RngState& rng, Mode mode);

    // Learnable tensors / running statistics, in a fixed registry order.
    std::vector<ParamRef> parameters();
    std::vector<ParamRef> buffers();
    std::int64_t parameter_count();
    void zero_grad();

    FrontendParams& frontend_params() { return frontend_; }
    ProjectionParams& projection_params() { return projections_; }
    RegressorParams& regressor_params() { return regressor_; }

private:
    ModelConfig config_;
    FrontendParams frontend_;
    ProjectionParams projections_;
    RegressorParams regressor_;
};

} // namespace crowdmlp
