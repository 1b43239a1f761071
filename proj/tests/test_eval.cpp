#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crowdmlp/eval.hpp"
#include "crowdmlp/image_io.hpp"

using namespace crowdmlp;

TEST_CASE("plan_windows: exact tiling at 1024x768 with window 256") {
    const WindowPlan plan = plan_windows(768, 1024, 256);
    CHECK(plan.cells.size() == 12);   // 4 x 3
    // owned regions partition the image exactly
    std::vector<int> covered(768 * 1024, 0);
    for (const auto& cell : plan.cells) {
        CHECK(cell.own_height == 256);
        CHECK(cell.own_width == 256);
        for (int y = cell.own_top; y < cell.own_top + cell.own_height; ++y) {
            for (int x = cell.own_left; x < cell.own_left + cell.own_width; ++x) {
                covered[y * 1024 + x] += 1;
            }
        }
    }
    for (int v : covered) {
        CHECK(v == 1);
    }
}

TEST_CASE("plan_windows: flush edge at 1000x768 owns the overlap once") {
    const WindowPlan plan = plan_windows(768, 1000, 256);
    CHECK(plan.cells.size() == 12);   // cols at 0,256,512,744; rows at 0,256,512
    std::vector<int> covered(768 * 1000, 0);
    bool saw_flush = false, saw_trimmed = false;
    for (const auto& cell : plan.cells) {
        if (cell.col == 744) {
            saw_flush = true;
            CHECK(cell.own_left == 744);
            CHECK(cell.own_width == 256);
        }
        if (cell.col == 512) {
            saw_trimmed = true;
            CHECK(cell.own_width == 232);   // ends where the flush window starts
        }
        for (int y = cell.own_top; y < cell.own_top + cell.own_height; ++y) {
            for (int x = cell.own_left; x < cell.own_left + cell.own_width; ++x) {
                covered[y * 1000 + x] += 1;
            }
        }
    }
    CHECK(saw_flush);
    CHECK(saw_trimmed);
    for (int v : covered) {
        CHECK(v == 1);
    }

    CHECK_THROWS_AS(plan_windows(100, 100, 128), ParameterError);
}

TEST_CASE("sliding_window_count: one window equals the direct forward pass") {
    RngState rng(1);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    RngState img_rng(2);
    Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
    const WindowGrid grid = sliding_window_count(model, image);
    REQUIRE(grid.cells.size() == 1);
    Tape tape(false);
    RngState fwd(0);
    CHECK(grid.total == model.forward(tape, image, fwd, Mode::Eval).count.item());
    CHECK(grid.total == grid.cells[0].count);
}

TEST_CASE("sliding_window_count: totals are the exact ordered sum") {
    RngState rng(3);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);
    RngState img_rng(4);
    Tensor image = Tensor::uniform({3, 256, 384}, 0.0, 1.0, img_rng);
    const WindowGrid grid = sliding_window_count(model, image);
    REQUIRE(grid.cells.size() == 6);
    double total = 0.0;
    for (const auto& cell : grid.cells) {
        total += cell.count;
    }
    CHECK(total == grid.total);
}

TEST_CASE("compute_metrics: formulas and the loop oracle") {
    {
        const MetricsReport r = compute_metrics({10, 20}, {10, 20});
        CHECK(r.mae == 0.0);
        CHECK(r.mse == 0.0);
        CHECK(r.rmse == 0.0);
    }
    {
        const MetricsReport r = compute_metrics({10, 20}, {12, 18});
        CHECK(r.mae == 2.0);
        CHECK(r.mse == 4.0);
        CHECK(r.rmse == 2.0);
        CHECK(r.n == 2);
    }
    {
        RngState rng(5);
        std::vector<double> pred(100), gt(100);
        for (int i = 0; i < 100; ++i) {
            pred[i] = rng.uniform(0, 500);
            gt[i] = rng.uniform(0, 500);
        }
        const MetricsReport r = compute_metrics(pred, gt);
        double abs_sum = 0.0, sq_sum = 0.0;
        for (int i = 0; i < 100; ++i) {
            abs_sum += std::abs(pred[i] - gt[i]);
            sq_sum += (pred[i] - gt[i]) * (pred[i] - gt[i]);
        }
        CHECK(std::abs(r.mae - abs_sum / 100.0) < 1e-12);
        CHECK(std::abs(r.mse - sq_sum / 100.0) < 1e-12);
        CHECK(r.rmse == doctest::Approx(std::sqrt(r.mse)).epsilon(1e-15));
        CHECK(r.mae <= r.rmse);   // Jensen
    }
    CHECK_THROWS_AS(compute_metrics({1.0}, {1.0, 2.0}), ParameterError);
    CHECK_THROWS_AS(compute_metrics({}, {}), ParameterError);
}

TEST_CASE("export_embeddings: stable rows that match the window totals") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "crowdmlp_embed_test";
    fs::create_directories(dir);

    RngState rng(6);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);

    RngState img_rng(7);
    Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
    // quantize so the PNG round trip is exact
    for (double& v : image.data()) {
        v = std::lround(v * 255.0) / 255.0;
    }
    write_png((dir / "one.png").string(), image);
    write_png((dir / "two.png").string(), image);
    std::vector<ManifestRecord> records{{"one.png", 10.0}, {"two.png", 10.0}};

    EvalOptions options;
    options.resize = false;
    const std::string csv = (dir / "embeddings.csv").string();
    export_embeddings(model, records, dir.string(), options, csv);

    std::ifstream in(csv);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        rows.push_back(fields);
    }
    REQUIRE(rows.size() == 2);
    // path, count_pred, then exactly D embedding components
    CHECK(rows[0].size() == 2 + static_cast<std::size_t>(model.config().token_dim));
    // identical images give identical rows apart from the path
    for (std::size_t i = 1; i < rows[0].size(); ++i) {
        CHECK(rows[0][i] == rows[1][i]);
    }
    // the exported count matches the sliding-window total
    const double exported = std::stod(rows[0][1]);
    const double direct = sliding_window_count(model, read_png((dir / "one.png").string())).total;
    CHECK(exported == direct);
}

TEST_CASE("evaluate_manifest: end to end on a small synthetic set") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "crowdmlp_eval_test";
    fs::create_directories(dir);

    RngState rng(8);
    CrowdMlp model = CrowdMlp::init(ModelConfig::micro_profile(), rng);

    std::vector<ManifestRecord> records;
    RngState img_rng(9);
    for (int i = 0; i < 3; ++i) {
        Tensor image = Tensor::uniform({3, 128, 128}, 0.0, 1.0, img_rng);
        const std::string name = "img" + std::to_string(i) + ".png";
        write_png((dir / name).string(), image);
        records.push_back({name, 5.0 + i});
    }

    EvalOptions options;
    options.resize = false;
    const ManifestEval result = evaluate_manifest(model, records, dir.string(), options);
    CHECK(result.metrics.n == 3);
    CHECK(result.predictions.size() == 3);
    CHECK(result.metrics.mae <= result.metrics.rmse);
    const auto j = result.metrics.to_json();
    CHECK(j.contains("MAE"));
    CHECK(j.contains("MSE"));
    CHECK(j.contains("RMSE"));
}
