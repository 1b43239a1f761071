#include "crowdmlp/split_counting.hpp"

#include <algorithm>
#include <cmath>

namespace crowdmlp {

MaskPair sample_mask(RngState& rng, int image_size) {
    if (image_size < 16) {
        throw ParameterError("sample_mask needs an image extent of at least 16, got " +
                             std::to_string(image_size));
    }
    const int lo = (image_size + 7) / 8;        // ceil(H/8)
    const int hi = (7 * image_size) / 8;        // floor(7H/8)
    Rect rect;
    rect.height = static_cast<int>(rng.uniform_int(lo, hi));
    rect.width = static_cast<int>(rng.uniform_int(lo, hi));
    rect.top = static_cast<int>(rng.uniform_int(0, image_size - rect.height));
    rect.left = static_cast<int>(rng.uniform_int(0, image_size - rect.width));
    return mask_from_rect(rect, image_size);
}

MaskPair mask_from_rect(const Rect& rect, int image_size) {
    if (rect.height < 1 || rect.width < 1 ||
        rect.top < 0 || rect.left < 0 ||
        rect.top + rect.height > image_size || rect.left + rect.width > image_size) {
        throw ParameterError("rectangle does not fit inside the image");
    }
    Tensor mask = Tensor::zeros({image_size, image_size});
    auto& m = mask.data();
    for (int y = rect.top; y < rect.top + rect.height; ++y) {
        std::fill_n(m.begin() + static_cast<std::int64_t>(y) * image_size + rect.left,
                    rect.width, 1.0);
    }
    return MaskPair{mask, rect};
}

std::pair<Tensor, Tensor> apply_decoupling(const Tensor& image, const MaskPair& mask) {
    if (image.ndim() != 3 || mask.mask.ndim() != 2 ||
        image.dim(1) != mask.mask.dim(0) || image.dim(2) != mask.mask.dim(1)) {
        throw DimensionError("decoupling mask " + shape_str(mask.mask.shape()) +
                             " does not match image " + shape_str(image.shape()));
    }
    const int channels = image.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(image.dim(1)) * image.dim(2);
    Tensor positive = Tensor::zeros(image.shape());
    Tensor negative = Tensor::zeros(image.shape());
    const auto& src = image.data();
    const auto& m = mask.mask.data();
    auto& pos = positive.data();
    auto& neg = negative.data();
    for (int c = 0; c < channels; ++c) {
        const std::int64_t base = c * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            pos[base + i] = src[base + i] * m[i];
            neg[base + i] = src[base + i] * (1.0 - m[i]);
        }
    }
    return {positive, negative};
}

LossBundle compute_losses(Tape& tape, const Tensor& pred_full, const Tensor& pred_positive,
                          const Tensor& pred_negative, double gt_count) {
    const Tensor target = Tensor::scalar(gt_count);
    LossBundle bundle;
    bundle.count = abs_err(tape, pred_full, target);
    Tensor part_sum = add(tape, pred_positive, pred_negative);
    bundle.consistency = abs_err(tape, part_sum, pred_full);
    bundle.integral = abs_err(tape, part_sum, target);
    bundle.total = add(tape, bundle.count,
                       scale(tape, add(tape, bundle.consistency, bundle.integral), 0.5));
    return bundle;
}

double verify_decomposition(const std::vector<EnsembleSample>& samples) {
    if (samples.empty()) {
        throw ParameterError("verify_decomposition needs at least one sample");
    }
    double worst = 0.0;
    for (const auto& s : samples) {
        const double ensemble = 0.5 * (s.full + s.split_sum);
        const double lhs = (ensemble - s.target) * (ensemble - s.target);
        const double avg_err = 0.5 * ((s.full - s.target) * (s.full - s.target) +
                                      (s.split_sum - s.target) * (s.split_sum - s.target));
        const double diversity = (s.full - ensemble) * (s.full - ensemble);
        worst = std::max(worst, std::abs(lhs - (avg_err - diversity)));
    }
    return worst;
}

std::vector<EnsembleSample> sample_ensemble_triples(int n, double lo, double hi, RngState& rng) {
    if (n < 1) {
        throw ParameterError("sample count must be positive");
    }
    std::vector<EnsembleSample> samples;
    samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        samples.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
    }
    return samples;
}

StepResult split_counting_step(CrowdMlp& model, const Tensor& image, double gt_count,
                               RngState& rng, bool proxy_enabled, double loss_scale) {
    if (proxy_enabled) {
        MaskPair mask = sample_mask(rng, image.dim(1));
        return split_counting_step_with_mask(model, image, gt_count, mask, rng,
                                             true, loss_scale);
    }
    MaskPair unused = mask_from_rect({0, 0, 1, 1}, image.dim(1));
    return split_counting_step_with_mask(model, image, gt_count, unused, rng,
                                         false, loss_scale);
}

StepResult split_counting_step_with_mask(CrowdMlp& model, const Tensor& image, double gt_count,
                                         const MaskPair& mask, RngState& rng,
                                         bool proxy_enabled, double loss_scale) {
    Tape tape;
    StepResult result;
    Tensor objective;
    Tensor pred_full = model.forward(tape, image, rng, Mode::Train).count;
    if (proxy_enabled) {
        auto [positive, negative] = apply_decoupling(image, mask);
        Tensor pred_positive = model.forward(tape, positive, rng, Mode::Train).count;
        Tensor pred_negative = model.forward(tape, negative, rng, Mode::Train).count;
        LossBundle bundle = compute_losses(tape, pred_full, pred_positive, pred_negative, gt_count);
        result.count_loss = bundle.count.item();
        result.consistency_loss = bundle.consistency.item();
        result.integral_loss = bundle.integral.item();
        result.total_loss = bundle.total.item();
        objective = bundle.total;
    } else {
        Tensor count_loss = abs_err(tape, pred_full, Tensor::scalar(gt_count));
        result.count_loss = count_loss.item();
        result.total_loss = result.count_loss;
        objective = count_loss;
    }
    tape.backward(scale(tape, objective, loss_scale));
    return result;
}

} // namespace crowdmlp
