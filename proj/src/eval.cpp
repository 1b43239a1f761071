#include "crowdmlp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "crowdmlp/image_io.hpp"

namespace crowdmlp {

namespace {

std::vector<int> axis_origins(int extent, int window) {
    std::vector<int> origins;
    for (int o = 0; o + window <= extent; o += window) {
        origins.push_back(o);
    }
    if (extent % window != 0) {
        origins.push_back(extent - window);
    }
    return origins;
}

} // namespace

WindowPlan plan_windows(int image_height, int image_width, int window) {
    if (window < 1) {
        throw ParameterError("window size must be positive");
    }
    if (window > image_height || window > image_width) {
        throw ParameterError("window " + std::to_string(window) + " is larger than the image " +
                             std::to_string(image_width) + "x" + std::to_string(image_height));
    }
    const auto rows = axis_origins(image_height, window);
    const auto cols = axis_origins(image_width, window);
    WindowPlan plan;
    plan.window = window;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int own_top = rows[r];
        const int own_bottom = r + 1 < rows.size() ? rows[r + 1] : image_height;
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const int own_left = cols[c];
            const int own_right = c + 1 < cols.size() ? cols[c + 1] : image_width;
            plan.cells.push_back({rows[r], cols[c], own_top, own_left,
                                  own_bottom - own_top, own_right - own_left});
        }
    }
    return plan;
}

namespace {

Tensor extract_window(const Tensor& image, const WindowPlan::Cell& cell, int window) {
    Tensor patch = Tensor::zeros({3, window, window});
    const int h = image.dim(1), w = image.dim(2);
    const auto& src = image.data();
    auto& dst = patch.data();
    const std::int64_t src_plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t dst_plane = static_cast<std::int64_t>(window) * window;
    // Pixels outside the owned region stay zero: they belong to a flush
    // neighbour and must contribute only once across the tiling.
    const int y_begin = cell.own_top - cell.row;
    const int y_end = y_begin + cell.own_height;
    const int x_begin = cell.own_left - cell.col;
    const int x_end = x_begin + cell.own_width;
    for (int c = 0; c < 3; ++c) {
        for (int y = y_begin; y < y_end; ++y) {
            const double* row = src.data() + c * src_plane +
                                static_cast<std::int64_t>(cell.row + y) * w + cell.col;
            double* out = dst.data() + c * dst_plane + static_cast<std::int64_t>(y) * window;
            for (int x = x_begin; x < x_end; ++x) {
                out[x] = row[x];
            }
        }
    }
    return patch;
}

WindowInference run_windows(CrowdMlp& model, const Tensor& image, bool want_embedding) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw DimensionError("sliding window expects a [3,H,W] image, got " +
                             shape_str(image.shape()));
    }
    const int window = model.config().input_size;
    const WindowPlan plan = plan_windows(image.dim(1), image.dim(2), window);

    WindowInference result;
    result.grid.window = window;
    std::vector<double> pooled(static_cast<std::size_t>(model.config().token_dim), 0.0);
    RngState eval_rng(0);   // eval mode draws nothing
    for (const auto& cell : plan.cells) {
        const Tensor patch = extract_window(image, cell, window);
        Tape tape(false);
        const auto out = model.forward(tape, patch, eval_rng, Mode::Eval);
        const double count = out.count.item();
        result.grid.cells.push_back({cell.row, cell.col, count});
        result.grid.total += count;
        if (want_embedding) {
            const auto& emb = out.pooled_embedding.data();
            for (std::size_t i = 0; i < pooled.size(); ++i) {
                pooled[i] += emb[i];
            }
        }
    }
    if (want_embedding) {
        for (double& v : pooled) {
            v /= static_cast<double>(plan.cells.size());
        }
        result.embedding = std::move(pooled);
    }
    return result;
}

} // namespace

WindowGrid sliding_window_count(CrowdMlp& model, const Tensor& image) {
    return run_windows(model, image, false).grid;
}

WindowInference sliding_window_inference(CrowdMlp& model, const Tensor& image) {
    return run_windows(model, image, true);
}

MetricsReport compute_metrics(const std::vector<double>& predictions,
                              const std::vector<double>& ground_truth) {
    if (predictions.size() != ground_truth.size()) {
        throw ParameterError("metrics need equal-length prediction and ground-truth lists, got " +
                             std::to_string(predictions.size()) + " vs " +
                             std::to_string(ground_truth.size()));
    }
    if (predictions.empty()) {
        throw ParameterError("metrics need at least one image");
    }
    MetricsReport report;
    report.n = static_cast<int>(predictions.size());
    double abs_sum = 0.0, sq_sum = 0.0;
    report.residuals.reserve(predictions.size());
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double r = predictions[i] - ground_truth[i];
        report.residuals.push_back(r);
        abs_sum += std::abs(r);
        sq_sum += r * r;
    }
    report.mae = abs_sum / report.n;
    report.mse = sq_sum / report.n;
    report.rmse = std::sqrt(report.mse);
    return report;
}

nlohmann::json MetricsReport::to_json() const {
    return nlohmann::json{{"N", n}, {"MAE", mae}, {"MSE", mse}, {"RMSE", rmse}};
}

std::string MetricsReport::table() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "%-8s %12s %12s %12s\n%-8d %12.4f %12.4f %12.4f",
                  "N", "MAE", "MSE", "RMSE", n, mae, mse, rmse);
    return std::string(buf);
}

ManifestEval evaluate_manifest(CrowdMlp& model, const std::vector<ManifestRecord>& records,
                               const std::string& root, const EvalOptions& options) {
    if (records.empty()) {
        throw ParameterError("manifest holds no images to evaluate");
    }
    std::vector<double> predictions, truths;
    predictions.reserve(records.size());
    truths.reserve(records.size());
    const std::string base = root.empty() ? "." : root;
    for (const auto& rec : records) {
        Tensor image = read_png(base + "/" + rec.image_path);
        if (options.resize) {
            image = resize_policy(image, options.resize_long, options.resize_short);
        }
        predictions.push_back(sliding_window_count(model, image).total);
        truths.push_back(rec.count);
    }
    ManifestEval out;
    out.metrics = compute_metrics(predictions, truths);
    out.predictions = std::move(predictions);
    return out;
}

void export_embeddings(CrowdMlp& model, const std::vector<ManifestRecord>& records,
                       const std::string& root, const EvalOptions& options,
                       const std::string& out_csv) {
    std::ofstream out(out_csv);
    if (!out) {
        throw IoError("cannot open embedding output " + out_csv);
    }
    out.precision(17);
    const std::string base = root.empty() ? "." : root;
    for (const auto& rec : records) {
        Tensor image = read_png(base + "/" + rec.image_path);
        if (options.resize) {
            image = resize_policy(image, options.resize_long, options.resize_short);
        }
        const WindowInference inf = sliding_window_inference(model, image);
        out << rec.image_path << "," << inf.grid.total;
        for (double v : inf.embedding) {
            out << "," << v;
        }
        out << "\n";
    }
    if (!out) {
        throw IoError("failed writing embeddings to " + out_csv);
    }
}

} // namespace crowdmlp
