#include "crowdmlp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "crowdmlp/image_io.hpp"
#include "crowdmlp/split_counting.hpp"

namespace crowdmlp {

void TrainConfig::validate() const {
    model.validate();
    if (lr <= 0.0) {
        throw ConfigError("learning rate must be positive");
    }
    if (gamma <= 0.0 || gamma > 1.0) {
        throw ConfigError("scheduler gamma must lie in (0, 1]");
    }
    for (std::size_t i = 1; i < milestones.size(); ++i) {
        if (milestones[i] <= milestones[i - 1]) {
            throw ConfigError("scheduler milestones must be strictly increasing");
        }
    }
    if (batch_size < 1 || epochs < 1 || max_steps < 0) {
        throw ConfigError("batch size and epochs must be positive");
    }
    if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
        throw ConfigError("validation fraction must lie in [0, 1)");
    }
    if (grad_clip < 0.0) {
        throw ConfigError("gradient clip must be non-negative");
    }
    if (synth.has_value() == manifest_path.has_value()) {
        throw ConfigError("configure exactly one dataset source (synthetic or manifest)");
    }
    if (synth.has_value()) {
        synth->validate();
        if (synth_scenes < 1) {
            throw ConfigError("synthetic dataset needs at least one scene");
        }
    }
}

std::vector<int> TrainConfig::effective_milestones() const {
    if (!milestones.empty()) {
        return milestones;
    }
    const int m1 = static_cast<int>(std::lround(0.60 * epochs));
    const int m2 = static_cast<int>(std::lround(0.85 * epochs));
    std::vector<int> out;
    if (m1 > 0) {
        out.push_back(m1);
    }
    if (m2 > m1) {
        out.push_back(m2);
    }
    return out;
}

AdamState AdamState::make(const std::vector<ParamRef>& params) {
    AdamState state;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const auto& p : params) {
        state.m.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
        state.v.emplace_back(static_cast<std::size_t>(p.tensor.size()), 0.0);
    }
    return state;
}

void adam_step(std::vector<ParamRef>& params, AdamState& state, double lr) {
    if (state.m.size() != params.size()) {
        throw ContractError("optimizer state does not match the parameter registry");
    }
    state.step += 1;
    const double bias1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bias2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].tensor;
        if (!t.requires_grad() || t.grad().size() != t.data().size()) {
            throw ContractError("parameter '" + params[i].name + "' has no gradients to step");
        }
        auto& data = t.data();
        const auto& grad = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[j] / bias1;
            const double v_hat = v[j] / bias2;
            data[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

double schedule_lr(int epoch, double base_lr, const std::vector<int>& milestones, double gamma) {
    int passed = 0;
    for (int m : milestones) {
        if (m <= epoch) {
            ++passed;
        }
    }
    return base_lr * std::pow(gamma, static_cast<double>(passed));
}

namespace {

std::vector<SceneSample> load_training_set(const TrainConfig& config) {
    if (config.synth.has_value()) {
        return generate_dataset(*config.synth, config.synth_scenes);
    }
    const auto records = load_manifest(*config.manifest_path);
    std::vector<SceneSample> scenes;
    scenes.reserve(records.size());
    const std::string root = config.manifest_root.empty() ? "." : config.manifest_root;
    const int side = config.model.input_size;
    for (const auto& rec : records) {
        SceneSample sample;
        // Manifest data carries counts only, so there are no crop-level
        // labels; train on the whole image squashed to the model extent.
        sample.image = resize_bilinear(read_png(root + "/" + rec.image_path), side, side);
        sample.count = rec.count;
        scenes.push_back(std::move(sample));
    }
    return scenes;
}

double clip_gradients(std::vector<ParamRef>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        for (double g : p.tensor.grad()) {
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double factor = max_norm / norm;
        for (auto& p : params) {
            for (double& g : p.tensor.grad()) {
                g *= factor;
            }
        }
    }
    return norm;
}

double validation_mae(CrowdMlp& model, const std::vector<SceneSample>& scenes,
                      const std::vector<int>& indices) {
    if (indices.empty()) {
        return 0.0;
    }
    double abs_sum = 0.0;
    RngState eval_rng(0);   // eval mode consumes no randomness
    for (int idx : indices) {
        const SceneSample& sample = scenes[static_cast<std::size_t>(idx)];
        Tape tape(false);
        Tensor image = sample.image;
        if (image.dim(1) != model.config().input_size || image.dim(2) != model.config().input_size) {
            image = resize_bilinear(image, model.config().input_size, model.config().input_size);
        }
        const double pred = model.forward(tape, image, eval_rng, Mode::Eval).count.item();
        abs_sum += std::abs(pred - sample.count);
    }
    return abs_sum / static_cast<double>(indices.size());
}

} // namespace

TrainResult train(const TrainConfig& config, const std::string& log_path) {
    config.validate();

    std::ofstream log_file;
    if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) {
            throw IoError("cannot open training log " + log_path);
        }
    }

    const auto scenes = load_training_set(config);
    if (scenes.empty()) {
        throw ConfigError("training dataset is empty");
    }

    RngState root(config.seed);
    RngState init_rng = root.split(1);
    RngState order_rng = root.split(2);
    RngState step_rng = root.split(3);

    CrowdMlp model = CrowdMlp::init(config.model, init_rng);
    auto params = model.parameters();
    AdamState adam = AdamState::make(params);

    // validation holdout chosen by seed
    std::vector<int> indices(scenes.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        indices[i] = static_cast<int>(i);
    }
    RngState split_rng = root.split(4);
    for (std::size_t i = indices.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        std::swap(indices[i - 1], indices[j]);
    }
    std::size_t n_val = 0;
    if (config.validation_fraction > 0.0 && scenes.size() > 1) {
        n_val = std::min(scenes.size() - 1,
                         std::max<std::size_t>(1, static_cast<std::size_t>(
                             std::floor(config.validation_fraction * scenes.size()))));
    }
    std::vector<int> val_idx(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<int> train_idx(indices.begin() + static_cast<std::ptrdiff_t>(n_val), indices.end());

    const auto milestones = config.effective_milestones();
    const int crop = config.model.input_size;

    TrainResult result;
    result.best_val_mae = std::numeric_limits<double>::infinity();
    int global_step = 0;
    bool stop = false;

    for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
        const double lr = schedule_lr(epoch, config.lr, milestones, config.gamma);

        RngState shuffle_rng = order_rng.split(static_cast<std::uint64_t>(epoch));
        std::vector<int> order = train_idx;
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(
                shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }

        for (std::size_t start = 0; start < order.size() && !stop; start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(end - start);

            model.zero_grad();
            StepResult batch_mean;
            for (std::size_t k = start; k < end; ++k) {
                const SceneSample& scene = scenes[static_cast<std::size_t>(order[k])];
                SceneSample sample = scene;
                const bool needs_crop = scene.image.dim(1) > crop || scene.image.dim(2) > crop;
                if (needs_crop) {
                    sample = random_crop(scene, crop, step_rng);
                }
                if (config.augment_enabled) {
                    sample = augment(sample, step_rng);
                }
                const StepResult r = split_counting_step(model, sample.image, sample.count,
                                                         step_rng, config.proxy_enabled, inv_batch);
                batch_mean.count_loss += r.count_loss * inv_batch;
                batch_mean.consistency_loss += r.consistency_loss * inv_batch;
                batch_mean.integral_loss += r.integral_loss * inv_batch;
                batch_mean.total_loss += r.total_loss * inv_batch;
            }

            if (config.grad_clip > 0.0) {
                clip_gradients(params, config.grad_clip);
            }
            adam_step(params, adam, lr);

            TrainLogEntry entry{epoch, global_step, batch_mean.count_loss,
                                batch_mean.consistency_loss, batch_mean.integral_loss,
                                batch_mean.total_loss, lr};
            result.log.push_back(entry);
            if (log_file) {
                nlohmann::json j{{"epoch", entry.epoch}, {"step", entry.step},
                                 {"L_C", entry.l_c}, {"L_SS", entry.l_ss},
                                 {"L_I", entry.l_i}, {"L", entry.l}, {"lr", entry.lr}};
                log_file << j.dump() << "\n";
            }

            ++global_step;
            if (config.max_steps > 0 && global_step >= config.max_steps) {
                stop = true;
            }
        }

        const double val_mae = validation_mae(model, scenes, val_idx.empty() ? train_idx : val_idx);
        if (val_mae < result.best_val_mae) {
            result.best_val_mae = val_mae;
            result.best_epoch = epoch;
            result.best_checkpoint = make_checkpoint(model, step_rng, epoch);
        }
    }

    if (result.best_epoch < 0) {
        result.best_checkpoint = make_checkpoint(model, step_rng, 0);
    }
    return result;
}

} // namespace crowdmlp
