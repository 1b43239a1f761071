#include "crowdmlp/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "crowdmlp/image_io.hpp"

namespace crowdmlp {

void SynthConfig::validate() const {
    if (height < 16 || width < 16) {
        throw ConfigError("synthetic scenes must be at least 16x16");
    }
    if (count_min < 0 || count_min > count_max) {
        throw ConfigError("synthetic count range requires 0 <= count_min <= count_max");
    }
    if (radius_min <= 0.0 || radius_min > radius_max) {
        throw ConfigError("blob radii must be positive with radius_min <= radius_max");
    }
    if (perspective < 0.0 || perspective >= 1.0) {
        throw ConfigError("perspective strength must lie in [0, 1)");
    }
    if (texture < 0.0) {
        throw ConfigError("texture amplitude must be non-negative");
    }
}

SceneSample generate_scene(const SynthConfig& config, RngState& rng) {
    config.validate();
    const int h = config.height, w = config.width;
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    Tensor image = Tensor::zeros({3, h, w});
    auto& px = image.data();

    // low-frequency background with a mild per-channel tint and pixel noise
    const double base = rng.uniform(0.25, 0.45);
    const double fx = rng.uniform(1.0, 4.0), fy = rng.uniform(1.0, 4.0);
    const double phx = rng.uniform(0.0, 6.2831853), phy = rng.uniform(0.0, 6.2831853);
    double tint[3];
    for (double& t : tint) {
        t = rng.uniform(-0.03, 0.03);
    }
    const double noise_amp = 0.2 * config.texture;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double wave = 0.5 * (std::sin(6.2831853 * fx * x / w + phx) +
                                       std::sin(6.2831853 * fy * y / h + phy));
            const double noise = rng.uniform(-noise_amp, noise_amp);
            const double v = base + config.texture * 0.5 * wave + noise;
            for (int c = 0; c < 3; ++c) {
                px[c * plane + static_cast<std::int64_t>(y) * w + x] = v + tint[c];
            }
        }
    }

    const int n = static_cast<int>(rng.uniform_int(config.count_min, config.count_max));
    std::vector<Point> points;
    points.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Point p{rng.uniform(0.0, w), rng.uniform(0.0, h)};
        const double base_radius = rng.uniform(config.radius_min, config.radius_max);
        const double scale = 1.0 - config.perspective * (1.0 - p.y / h);
        const double sigma = std::max(0.6, base_radius * scale);
        const double amp = rng.uniform(0.35, 0.85);
        double blob_tint[3];
        for (double& t : blob_tint) {
            t = rng.uniform(0.85, 1.0);
        }
        const int reach = static_cast<int>(std::ceil(3.0 * sigma));
        const int y0 = std::max(0, static_cast<int>(std::floor(p.y)) - reach);
        const int y1 = std::min(h - 1, static_cast<int>(std::ceil(p.y)) + reach);
        const int x0 = std::max(0, static_cast<int>(std::floor(p.x)) - reach);
        const int x1 = std::min(w - 1, static_cast<int>(std::ceil(p.x)) + reach);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
                const double g = amp * std::exp(-d2 / (2.0 * sigma * sigma));
                for (int c = 0; c < 3; ++c) {
                    px[c * plane + static_cast<std::int64_t>(y) * w + x] += g * blob_tint[c];
                }
            }
        }
        points.push_back(p);
    }

    for (double& v : px) {
        v = std::clamp(v, 0.0, 1.0);
    }

    SceneSample sample;
    sample.image = image;
    sample.count = static_cast<double>(n);
    sample.points = std::move(points);
    return sample;
}

std::vector<SceneSample> generate_dataset(const SynthConfig& config, int n) {
    if (n < 0) {
        throw ParameterError("dataset size must be non-negative");
    }
    const RngState root(config.seed);
    std::vector<SceneSample> scenes;
    scenes.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        RngState scene_rng = root.split(static_cast<std::uint64_t>(i));
        scenes.push_back(generate_scene(config, scene_rng));
    }
    return scenes;
}

SceneSample crop_at(const SceneSample& sample, int left, int top, int size) {
    if (!sample.points.has_value()) {
        throw UnsupportedError("cropping needs point annotations to derive the crop count");
    }
    const int h = sample.image.dim(1), w = sample.image.dim(2);
    if (size < 1 || size > std::min(h, w)) {
        throw ParameterError("crop size " + std::to_string(size) + " does not fit in " +
                             std::to_string(w) + "x" + std::to_string(h));
    }
    if (left < 0 || top < 0 || left + size > w || top + size > h) {
        throw ParameterError("crop window lies outside the image");
    }
    const int x0 = left;
    const int y0 = top;

    Tensor crop = Tensor::zeros({3, size, size});
    const auto& src = sample.image.data();
    auto& dst = crop.data();
    const std::int64_t src_plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t dst_plane = static_cast<std::int64_t>(size) * size;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < size; ++y) {
            const double* row = src.data() + c * src_plane + static_cast<std::int64_t>(y0 + y) * w + x0;
            std::copy(row, row + size, dst.data() + c * dst_plane + static_cast<std::int64_t>(y) * size);
        }
    }

    std::vector<Point> kept;
    for (const Point& p : *sample.points) {
        // half-open window, so disjoint tilings partition points exactly
        if (p.x >= x0 && p.x < x0 + size && p.y >= y0 && p.y < y0 + size) {
            kept.push_back({p.x - x0, p.y - y0});
        }
    }

    SceneSample out;
    out.image = crop;
    out.count = static_cast<double>(kept.size());
    out.points = std::move(kept);
    return out;
}

SceneSample random_crop(const SceneSample& sample, int size, RngState& rng) {
    if (!sample.points.has_value()) {
        throw UnsupportedError("random_crop needs point annotations to derive the crop count");
    }
    const int h = sample.image.dim(1), w = sample.image.dim(2);
    if (size < 1 || size > std::min(h, w)) {
        throw ParameterError("crop size " + std::to_string(size) + " does not fit in " +
                             std::to_string(w) + "x" + std::to_string(h));
    }
    const int x0 = static_cast<int>(rng.uniform_int(0, w - size));
    const int y0 = static_cast<int>(rng.uniform_int(0, h - size));
    return crop_at(sample, x0, y0, size);
}

SceneSample flip_horizontal(const SceneSample& sample) {
    const int h = sample.image.dim(1), w = sample.image.dim(2);
    Tensor flipped = Tensor::zeros(sample.image.shape());
    const auto& src = sample.image.data();
    auto& dst = flipped.data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            const std::int64_t row = c * plane + static_cast<std::int64_t>(y) * w;
            for (int x = 0; x < w; ++x) {
                dst[row + x] = src[row + (w - 1 - x)];
            }
        }
    }
    SceneSample out;
    out.image = flipped;
    out.count = sample.count;
    if (sample.points.has_value()) {
        std::vector<Point> pts;
        pts.reserve(sample.points->size());
        for (const Point& p : *sample.points) {
            pts.push_back({static_cast<double>(w - 1) - p.x, p.y});
        }
        out.points = std::move(pts);
    }
    return out;
}

SceneSample apply_lighting(const SceneSample& sample, double gain, double offset) {
    SceneSample out;
    out.image = Tensor::zeros(sample.image.shape());
    const auto& src = sample.image.data();
    auto& dst = out.image.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = std::clamp(gain * src[i] + offset, 0.0, 1.0);
    }
    out.count = sample.count;
    out.points = sample.points;
    return out;
}

SceneSample augment(const SceneSample& sample, RngState& rng) {
    SceneSample out = sample;
    if (rng.bernoulli(0.5)) {
        out = flip_horizontal(out);
    }
    if (rng.bernoulli(0.5)) {
        const double gain = rng.uniform(0.8, 1.2);
        const double offset = rng.uniform(-0.1, 0.1);
        out = apply_lighting(out, gain, offset);
    }
    return out;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

} // namespace

std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open manifest " + path);
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError("manifest " + path + " is empty; expected header line 'image,count'");
    }
    if (trim(line) != "image,count") {
        throw FormatError("manifest " + path + " line 1: header must be 'image,count'");
    }
    std::vector<ManifestRecord> records;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string row = trim(line);
        if (row.empty()) {
            continue;
        }
        const std::size_t comma = row.find_last_of(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 >= row.size()) {
            throw FormatError("manifest " + path + " line " + std::to_string(line_no) +
                              ": expected 'relative_image_path,count'");
        }
        ManifestRecord rec;
        rec.image_path = trim(row.substr(0, comma));
        const std::string count_text = trim(row.substr(comma + 1));
        try {
            std::size_t used = 0;
            rec.count = std::stod(count_text, &used);
            if (used != count_text.size()) {
                throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw FormatError("manifest " + path + " line " + std::to_string(line_no) +
                              ": count '" + count_text + "' is not a number");
        }
        if (!(rec.count >= 0.0) || !std::isfinite(rec.count)) {
            throw FormatError("manifest " + path + " line " + std::to_string(line_no) +
                              ": count must be a non-negative number");
        }
        records.push_back(std::move(rec));
    }
    return records;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write manifest " + path);
    }
    out << "image,count\n";
    for (const auto& rec : records) {
        const double rounded = std::round(rec.count);
        if (std::abs(rec.count - rounded) < 1e-9) {
            out << rec.image_path << "," << static_cast<long long>(rounded) << "\n";
        } else {
            out << rec.image_path << "," << rec.count << "\n";
        }
    }
}

std::pair<int, int> resolve_resize_dims(int width, int height, int long_side, int short_side) {
    if (width < 1 || height < 1 || long_side < 1 || short_side < 1) {
        throw ParameterError("resize dimensions must be positive");
    }
    if (long_side < short_side) {
        throw ParameterError("long_side must be >= short_side");
    }
    return width >= height ? std::make_pair(long_side, short_side)
                           : std::make_pair(short_side, long_side);
}

Tensor resize_bilinear(const Tensor& image, int out_height, int out_width) {
    if (image.ndim() != 3) {
        throw DimensionError("resize expects a [C,H,W] image, got " + shape_str(image.shape()));
    }
    if (out_height < 1 || out_width < 1) {
        throw ParameterError("resize target must be positive");
    }
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out = Tensor::zeros({c, out_height, out_width});
    const auto& src = image.data();
    auto& dst = out.data();
    const std::int64_t src_plane = static_cast<std::int64_t>(h) * w;
    const std::int64_t dst_plane = static_cast<std::int64_t>(out_height) * out_width;
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < out_height; ++oy) {
            double sy = (oy + 0.5) * h / out_height - 0.5;
            sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
            const int y0 = static_cast<int>(sy);
            const int y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - y0;
            for (int ox = 0; ox < out_width; ++ox) {
                double sx = (ox + 0.5) * w / out_width - 0.5;
                sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
                const int x0 = static_cast<int>(sx);
                const int x1 = std::min(x0 + 1, w - 1);
                const double fxr = sx - x0;
                const double v00 = src[ch * src_plane + static_cast<std::int64_t>(y0) * w + x0];
                const double v01 = src[ch * src_plane + static_cast<std::int64_t>(y0) * w + x1];
                const double v10 = src[ch * src_plane + static_cast<std::int64_t>(y1) * w + x0];
                const double v11 = src[ch * src_plane + static_cast<std::int64_t>(y1) * w + x1];
                dst[ch * dst_plane + static_cast<std::int64_t>(oy) * out_width + ox] =
                    (1 - fy) * ((1 - fxr) * v00 + fxr * v01) + fy * ((1 - fxr) * v10 + fxr * v11);
            }
        }
    }
    return out;
}

Tensor resize_policy(const Tensor& image, int long_side, int short_side) {
    const auto [out_w, out_h] = resolve_resize_dims(image.dim(2), image.dim(1),
                                                    long_side, short_side);
    if (out_w == image.dim(2) && out_h == image.dim(1)) {
        return image;
    }
    return resize_bilinear(image, out_h, out_w);
}

void export_dataset(const SynthConfig& config, int n, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir + ": " + ec.message());
    }
    const auto scenes = generate_dataset(config, n);
    std::vector<ManifestRecord> records;
    records.reserve(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04zu.png", i);
        write_png((fs::path(dir) / name).string(), scenes[i].image);
        records.push_back({name, scenes[i].count});
    }
    write_manifest((fs::path(dir) / "manifest.csv").string(), records);
}

} // namespace crowdmlp
