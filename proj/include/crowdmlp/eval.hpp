#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "crowdmlp/data.hpp"
#include "crowdmlp/model.hpp"

namespace crowdmlp {

// Window placement over an image. Regular origins step by the window size;
// when the extent does not divide, the final window sits flush against the
// border and owns the overlap, while the preceding window's overlapping strip
// is zeroed before its pass. The owned regions partition the image exactly.
struct WindowPlan {
    int window = 0;
    struct Cell {
        int row = 0;
        int col = 0;
        int own_top = 0;
        int own_left = 0;
        int own_height = 0;
        int own_width = 0;
    };
    std::vector<Cell> cells;
};

WindowPlan plan_windows(int image_height, int image_width, int window);

struct WindowGrid {
    int window = 0;
    struct Cell {
        int row = 0;
        int col = 0;
        double count = 0.0;
    };
    std::vector<Cell> cells;
    double total = 0.0;   // exact sum of sub-counts in row-major order
};

// Eval-mode forward per window; window size is the model's native extent.
WindowGrid sliding_window_count(CrowdMlp& model, const Tensor& image);

// Window counts plus the mean of the per-window pooled embeddings.
struct WindowInference {
    WindowGrid grid;
    std::vector<double> embedding;   // length D
};
WindowInference sliding_window_inference(CrowdMlp& model, const Tensor& image);

struct MetricsReport {
    int n = 0;
    double mae = 0.0;
    double mse = 0.0;    // mean of squared errors, as printed in the formulas
    double rmse = 0.0;   // sqrt(mse), reported alongside
    std::vector<double> residuals;   // pred - gt per image

    nlohmann::json to_json() const;
    std::string table() const;
};

MetricsReport compute_metrics(const std::vector<double>& predictions,
                              const std::vector<double>& ground_truth);

struct EvalOptions {
    bool resize = true;
    int resize_long = 1024;
    int resize_short = 768;
};

struct ManifestEval {
    MetricsReport metrics;
    std::vector<double> predictions;
};

ManifestEval evaluate_manifest(CrowdMlp& model, const std::vector<ManifestRecord>& records,
                               const std::string& root, const EvalOptions& options);

// One CSV row per image: path, count_pred, then the D pooled embedding
// components. count_pred matches sliding_window_count for the same image.
void export_embeddings(CrowdMlp& model, const std::vector<ManifestRecord>& records,
                       const std::string& root, const EvalOptions& options,
                       const std::string& out_csv);

} // namespace crowdmlp
