#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crowdmlp/tensor.hpp"

namespace crowdmlp {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct SceneSample {
    Tensor image;    // [3, H, W], values in [0, 1]
    double count = 0.0;
    // Object centers; present for synthetic scenes, absent for manifest data.
    // Needed to derive exact crop-level counts.
    std::optional<std::vector<Point>> points;
};

struct SynthConfig {
    int height = 128;
    int width = 128;
    int count_min = 20;
    int count_max = 80;
    double radius_min = 2.0;
    double radius_max = 5.0;
    double perspective = 0.5;   // blob radius shrinks towards the top of the frame
    double texture = 0.15;      // background amplitude
    std::uint64_t seed = 0;

    void validate() const;
};

// Renders soft blobs on a textured background; the count label and the point
// list are exact by construction.
SceneSample generate_scene(const SynthConfig& config, RngState& rng);

// n scenes with per-index derived rng streams, so the set does not depend on
// generation order.
std::vector<SceneSample> generate_dataset(const SynthConfig& config, int n);

// Square crop at a fixed origin; the returned count recounts the points
// falling in the half-open crop window, so disjoint tilings partition the
// total exactly.
SceneSample crop_at(const SceneSample& sample, int left, int top, int size);

// Uniform random placement of crop_at.
SceneSample random_crop(const SceneSample& sample, int size, RngState& rng);

SceneSample flip_horizontal(const SceneSample& sample);
SceneSample apply_lighting(const SceneSample& sample, double gain, double offset);

// Horizontal flip with p = 0.5 and lighting jitter with p = 0.5
// (gain ~ U[0.8, 1.2], offset ~ U[-0.1, 0.1], clamped). Count is unchanged.
SceneSample augment(const SceneSample& sample, RngState& rng);

struct ManifestRecord {
    std::string image_path;
    double count = 0.0;
};

// Text manifest: required header line "image,count", then one
// relative_path,count record per line.
std::vector<ManifestRecord> load_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records);

// Output (width, height) under the fixed reshape rule: the longer input side
// maps to long_side, the other to short_side (aspect distortion accepted).
std::pair<int, int> resolve_resize_dims(int width, int height, int long_side, int short_side);

Tensor resize_bilinear(const Tensor& image, int out_height, int out_width);
Tensor resize_policy(const Tensor& image, int long_side = 1024, int short_side = 768);

// Writes scene_NNNN.png files plus manifest.csv into dir.
void export_dataset(const SynthConfig& config, int n, const std::string& dir);

} // namespace crowdmlp
