#pragma once

#include <utility>
#include <vector>

#include "crowdmlp/model.hpp"
#include "crowdmlp/tensor.hpp"

namespace crowdmlp {

struct Rect {
    int top = 0;
    int left = 0;
    int height = 0;
    int width = 0;
};

struct MaskPair {
    Tensor mask;   // [H, H], entries exactly 0 or 1
    Rect rect;
};

// Rectangle with each side uniform in [ceil(H/8), floor(7H/8)] and position
// uniform subject to fitting, so the masked area fraction stays inside
// (0.0156, 0.766). Requires H >= 16.
MaskPair sample_mask(RngState& rng, int image_size);

// Deterministic mask for a given rectangle (tests and degenerate cases).
MaskPair mask_from_rect(const Rect& rect, int image_size);

// I_P = image * M and I_N = image * (1 - M), both at full extent. The two
// parts are disjoint and sum back to the image exactly.
std::pair<Tensor, Tensor> apply_decoupling(const Tensor& image, const MaskPair& mask);

struct LossBundle {
    Tensor count;         // L_C  = |P_I - C_gt|
    Tensor consistency;   // L_SS = |(P_P + P_N) - P_I|
    Tensor integral;      // L_I  = |(P_P + P_N) - C_gt|
    Tensor total;         // L    = L_C + (L_SS + L_I) / 2
};

LossBundle compute_losses(Tape& tape, const Tensor& pred_full, const Tensor& pred_positive,
                          const Tensor& pred_negative, double gt_count);

struct EnsembleSample {
    double full;        // M1 prediction
    double split_sum;   // M2 + M3 prediction
    double target;      // Y
};

// Max over samples of |(M_hat - y)^2 - [((m1-y)^2 + (m23-y)^2)/2 - (m1-M_hat)^2]|
// with M_hat = (m1 + m23)/2. The identity is exact; only float rounding remains.
double verify_decomposition(const std::vector<EnsembleSample>& samples);

std::vector<EnsembleSample> sample_ensemble_triples(int n, double lo, double hi, RngState& rng);

struct StepResult {
    double count_loss = 0.0;
    double consistency_loss = 0.0;
    double integral_loss = 0.0;
    double total_loss = 0.0;
};

// One training example: forward the image and (when the proxy is on) its two
// decouplings through the same parameter snapshot, then backprop the combined
// objective. loss_scale multiplies the objective before backward (use
// 1/batch for batch-mean gradients); the reported losses are unscaled.
StepResult split_counting_step(CrowdMlp& model, const Tensor& image, double gt_count,
                               RngState& rng, bool proxy_enabled, double loss_scale = 1.0);

// Same, with a caller-supplied mask.
StepResult split_counting_step_with_mask(CrowdMlp& model, const Tensor& image, double gt_count,
                                         const MaskPair& mask, RngState& rng,
                                         bool proxy_enabled, double loss_scale = 1.0);

} // namespace crowdmlp
