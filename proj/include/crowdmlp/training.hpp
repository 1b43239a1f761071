#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crowdmlp/checkpoint.hpp"
#include "crowdmlp/data.hpp"
#include "crowdmlp/model.hpp"

namespace crowdmlp {

struct TrainConfig {
    ModelConfig model = ModelConfig::desk_profile();

    double lr = 1e-5;            // paper default; the desk profile trains with a larger rate
    int batch_size = 4;          // paper uses 12
    int epochs = 30;
    int max_steps = 0;           // 0 = run all epochs
    std::vector<int> milestones; // empty = {60%, 85% of epochs}
    double gamma = 0.5;
    std::uint64_t seed = 0;
    bool proxy_enabled = true;
    bool augment_enabled = true;
    double validation_fraction = 0.1;
    double grad_clip = 0.0;      // global L2 clip; 0 = off

    // exactly one dataset source
    std::optional<SynthConfig> synth;
    int synth_scenes = 32;
    std::optional<std::string> manifest_path;
    std::string manifest_root;

    void validate() const;
    std::vector<int> effective_milestones() const;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState make(const std::vector<ParamRef>& params);
};

// Standard bias-corrected Adam update over the parameter registry.
void adam_step(std::vector<ParamRef>& params, AdamState& state, double lr);

// base_lr * gamma^(number of milestones <= epoch)
double schedule_lr(int epoch, double base_lr, const std::vector<int>& milestones, double gamma);

struct TrainLogEntry {
    int epoch = 0;
    int step = 0;
    double l_c = 0.0;
    double l_ss = 0.0;
    double l_i = 0.0;
    double l = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Checkpoint best_checkpoint;
    double best_val_mae = 0.0;
    int best_epoch = -1;
    std::vector<TrainLogEntry> log;
};

// Runs split-counting epochs over the configured dataset, logs one entry per
// optimizer step (batch means), and keeps the checkpoint with the best
// validation MAE. When log_path is non-empty the entries are also streamed to
// it as JSON lines.
TrainResult train(const TrainConfig& config, const std::string& log_path = "");

} // namespace crowdmlp
