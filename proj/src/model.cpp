#include "crowdmlp/model.hpp"

namespace crowdmlp {

void ModelConfig::validate() const {
    frontend.validate();
    tokenizer_config().validate();
    if (top_depth < 1) {
        throw ConfigError("top encoder depth must be >= 1");
    }
    if (channel_hidden_factor < 1) {
        throw ConfigError("channel hidden factor must be >= 1");
    }
    if (mix_drop_rate < 0.0 || mix_drop_rate >= 1.0) {
        throw ConfigError("mixing drop rate must lie in [0, 1)");
    }
}

TokenizerConfig ModelConfig::tokenizer_config() const {
    TokenizerConfig tok;
    tok.image_size = input_size;
    tok.feature_channels = frontend.reduced_channels;
    tok.token_dim = token_dim;
    tok.raw_drop_rate = raw_drop_rate;
    tok.streams = streams;
    return tok;
}

RegressorConfig ModelConfig::regressor_config() const {
    RegressorConfig reg;
    reg.token_dim = token_dim;
    reg.top_depth = top_depth;
    reg.drop_rate = mix_drop_rate;
    reg.channel_hidden_factor = channel_hidden_factor;
    return reg;
}

std::vector<int> ModelConfig::stream_token_counts() const {
    std::vector<int> counts;
    for (Granularity g : streams.enabled()) {
        counts.push_back(stream_token_count(g, input_size));
    }
    return counts;
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{
        {"input_size", input_size},
        {"token_dim", token_dim},
        {"block_channels", frontend.block_channels},
        {"convs_per_block", frontend.convs_per_block},
        {"reduced_channels", frontend.reduced_channels},
        {"streams", {{"feat16", streams.feat16},
                     {"feat8", streams.feat8},
                     {"feat4", streams.feat4},
                     {"raw", streams.raw}}},
        {"mix_drop_rate", mix_drop_rate},
        {"raw_drop_rate", raw_drop_rate},
        {"top_depth", top_depth},
        {"channel_hidden_factor", channel_hidden_factor},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.input_size = j.at("input_size").get<int>();
        cfg.token_dim = j.at("token_dim").get<int>();
        cfg.frontend.block_channels = j.at("block_channels").get<std::vector<int>>();
        cfg.frontend.convs_per_block = j.at("convs_per_block").get<int>();
        cfg.frontend.reduced_channels = j.at("reduced_channels").get<int>();
        const auto& s = j.at("streams");
        cfg.streams.feat16 = s.at("feat16").get<bool>();
        cfg.streams.feat8 = s.at("feat8").get<bool>();
        cfg.streams.feat4 = s.at("feat4").get<bool>();
        cfg.streams.raw = s.at("raw").get<bool>();
        cfg.mix_drop_rate = j.at("mix_drop_rate").get<double>();
        cfg.raw_drop_rate = j.at("raw_drop_rate").get<double>();
        cfg.top_depth = j.at("top_depth").get<int>();
        cfg.channel_hidden_factor = j.at("channel_hidden_factor").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed model configuration: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::desk_profile() {
    ModelConfig cfg;
    cfg.input_size = 128;
    cfg.token_dim = 64;
    cfg.frontend.block_channels = {4, 8, 16};
    cfg.frontend.convs_per_block = 2;
    cfg.frontend.reduced_channels = 16;
    return cfg;
}

ModelConfig ModelConfig::paper_profile() {
    ModelConfig cfg;
    cfg.input_size = 256;
    cfg.token_dim = 256;
    cfg.frontend.block_channels = {16, 32, 64};
    cfg.frontend.convs_per_block = 2;
    cfg.frontend.reduced_channels = 32;
    return cfg;
}

ModelConfig ModelConfig::tiny_profile() {
    ModelConfig cfg;
    cfg.input_size = 128;
    cfg.token_dim = 16;
    cfg.frontend.block_channels = {4, 8, 8};
    cfg.frontend.convs_per_block = 2;
    cfg.frontend.reduced_channels = 4;
    return cfg;
}

ModelConfig ModelConfig::micro_profile() {
    ModelConfig cfg;
    cfg.input_size = 128;
    cfg.token_dim = 4;
    cfg.frontend.block_channels = {2, 2, 2};
    cfg.frontend.convs_per_block = 1;
    cfg.frontend.reduced_channels = 2;
    return cfg;
}

CrowdMlp CrowdMlp::init(const ModelConfig& config, RngState& rng) {
    config.validate();
    CrowdMlp model;
    model.config_ = config;
    model.frontend_ = FrontendParams::init(config.frontend, rng);
    model.projections_ = ProjectionParams::init(config.tokenizer_config(), rng);
    model.regressor_ = RegressorParams::init(config.stream_token_counts(),
                                             config.regressor_config(), rng);
    return model;
}

CrowdMlp::Output CrowdMlp::forward(Tape& tape, const Tensor& image, RngState& rng, Mode mode) {
    const int h = config_.input_size;
    if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != h || image.dim(2) != h) {
        throw DimensionError("model expects a [3," + std::to_string(h) + "," + std::to_string(h) +
                             "] image, got " + shape_str(image.shape()));
    }
    Tensor features = extract_features(tape, image, frontend_, mode);
    auto streams = build_streams(tape, image, features, projections_,
                                 config_.tokenizer_config(), rng, mode);
    RegressorOutput out = regress_count(tape, streams, regressor_, rng, mode);
    Tensor pooled = reduce_mean(tape, out.embedding, 0);
    return Output{out.count, pooled};
}

namespace {

void visit_mixing(const std::string& prefix, MixingBlock& block,
                  std::vector<ParamRef>& params, std::vector<ParamRef>* buffers) {
    params.push_back({prefix + ".w0", block.w0});
    params.push_back({prefix + ".b0", block.b0});
    params.push_back({prefix + ".w1", block.w1});
    params.push_back({prefix + ".b1", block.b1});
    params.push_back({prefix + ".bn.gamma", block.bn.gamma});
    params.push_back({prefix + ".bn.beta", block.bn.beta});
    if (buffers) {
        buffers->push_back({prefix + ".bn.running_mean", block.bn.running_mean});
        buffers->push_back({prefix + ".bn.running_var", block.bn.running_var});
    }
}

void visit_tmlp(const std::string& prefix, TmlpBlock& block,
                std::vector<ParamRef>& params, std::vector<ParamRef>* buffers) {
    visit_mixing(prefix + ".token_mix", block.token_mix, params, buffers);
    visit_mixing(prefix + ".channel_mix", block.channel_mix, params, buffers);
}

} // namespace

static void collect(CrowdMlp& model, std::vector<ParamRef>& params, std::vector<ParamRef>* buffers) {
    auto& fe = model.frontend_params();
    for (std::size_t b = 0; b < fe.blocks.size(); ++b) {
        for (std::size_t i = 0; i < fe.blocks[b].size(); ++i) {
            const std::string prefix =
                "frontend.block" + std::to_string(b) + ".conv" + std::to_string(i);
            ConvUnit& unit = fe.blocks[b][i];
            params.push_back({prefix + ".kernel", unit.kernel});
            params.push_back({prefix + ".bias", unit.bias});
            params.push_back({prefix + ".bn.gamma", unit.bn.gamma});
            params.push_back({prefix + ".bn.beta", unit.bn.beta});
            if (buffers) {
                buffers->push_back({prefix + ".bn.running_mean", unit.bn.running_mean});
                buffers->push_back({prefix + ".bn.running_var", unit.bn.running_var});
            }
        }
    }
    params.push_back({"frontend.reduce.kernel", fe.reduce_kernel});
    params.push_back({"frontend.reduce.bias", fe.reduce_bias});

    for (auto& proj : model.projection_params().projections) {
        const std::string prefix = std::string("proj.") + granularity_name(proj.granularity);
        params.push_back({prefix + ".weight", proj.weight});
        params.push_back({prefix + ".bias", proj.bias});
    }

    auto& reg = model.regressor_params();
    const auto enabled = model.config().streams.enabled();
    for (std::size_t i = 0; i < reg.heads.size(); ++i) {
        visit_tmlp(std::string("head.") + granularity_name(enabled[i]), reg.heads[i],
                   params, buffers);
    }
    for (std::size_t i = 0; i < reg.top.size(); ++i) {
        visit_tmlp("top." + std::to_string(i), reg.top[i], params, buffers);
    }
    params.push_back({"count_head.w1", reg.count_head.w1});
    params.push_back({"count_head.b1", reg.count_head.b1});
    params.push_back({"count_head.w2", reg.count_head.w2});
    params.push_back({"count_head.b2", reg.count_head.b2});
}

std::vector<ParamRef> CrowdMlp::parameters() {
    std::vector<ParamRef> params;
    collect(*this, params, nullptr);
    return params;
}

std::vector<ParamRef> CrowdMlp::buffers() {
    std::vector<ParamRef> params;
    std::vector<ParamRef> buffers;
    collect(*this, params, &buffers);
    return buffers;
}

std::int64_t CrowdMlp::parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : parameters()) {
        n += p.tensor.size();
    }
    return n;
}

void CrowdMlp::zero_grad() {
    for (auto& p : parameters()) {
        p.tensor.zero_grad();
    }
}

} // namespace crowdmlp
