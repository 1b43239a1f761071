#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "crowdmlp/data.hpp"
#include "crowdmlp/image_io.hpp"

using namespace crowdmlp;

namespace {

SynthConfig tiny_synth() {
    SynthConfig cfg;
    cfg.height = 64;
    cfg.width = 64;
    cfg.count_min = 10;
    cfg.count_max = 30;
    return cfg;
}

std::filesystem::path temp_dir(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("generate_scene: exact counts, bounds, determinism") {
    SynthConfig cfg = tiny_synth();
    cfg.count_min = cfg.count_max = 0;
    RngState rng(1);
    SceneSample empty = generate_scene(cfg, rng);
    CHECK(empty.count == 0.0);
    CHECK(empty.points->empty());
    for (double v : empty.image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    cfg.count_min = cfg.count_max = 50;
    RngState rng2(2);
    SceneSample fifty = generate_scene(cfg, rng2);
    CHECK(fifty.count == 50.0);
    CHECK(fifty.points->size() == 50);
    for (const Point& p : *fifty.points) {
        CHECK(p.x >= 0.0);
        CHECK(p.x < 64.0);
        CHECK(p.y >= 0.0);
        CHECK(p.y < 64.0);
    }

    RngState a(7), b(7);
    SceneSample s1 = generate_scene(tiny_synth(), a);
    SceneSample s2 = generate_scene(tiny_synth(), b);
    CHECK(s1.count == s2.count);
    CHECK(s1.image.data() == s2.image.data());
}

TEST_CASE("crop_at: full-image crop and disjoint tiling additivity") {
    RngState rng(3);
    SceneSample scene = generate_scene(tiny_synth(), rng);

    SceneSample full = crop_at(scene, 0, 0, 64);
    CHECK(full.count == scene.count);
    CHECK(full.image.data() == scene.image.data());

    double tiled = 0.0;
    for (int ty = 0; ty < 2; ++ty) {
        for (int tx = 0; tx < 2; ++tx) {
            tiled += crop_at(scene, tx * 32, ty * 32, 32).count;
        }
    }
    CHECK(tiled == scene.count);
}

TEST_CASE("crops: counts agree with an independent point-in-rectangle recount") {
    RngState rng(4);
    SceneSample scene = generate_scene(tiny_synth(), rng);
    RngState origin_rng(5);
    const int size = 16;
    for (int trial = 0; trial < 1000; ++trial) {
        const int x0 = static_cast<int>(origin_rng.uniform_int(0, 64 - size));
        const int y0 = static_cast<int>(origin_rng.uniform_int(0, 64 - size));
        SceneSample crop = crop_at(scene, x0, y0, size);
        int recount = 0;
        for (const Point& p : *scene.points) {
            if (p.x >= x0 && p.x < x0 + size && p.y >= y0 && p.y < y0 + size) {
                ++recount;
            }
        }
        CHECK(crop.count == static_cast<double>(recount));
        CHECK(crop.points->size() == static_cast<std::size_t>(recount));
    }

    RngState crop_rng(6);
    SceneSample random = random_crop(scene, size, crop_rng);
    CHECK(random.image.shape() == Shape{3, size, size});
    CHECK(random.count == static_cast<double>(random.points->size()));

    SceneSample no_points = scene;
    no_points.points.reset();
    RngState r(1);
    CHECK_THROWS_AS(random_crop(no_points, 16, r), UnsupportedError);
    CHECK_THROWS_AS(random_crop(scene, 65, r), ParameterError);
}

TEST_CASE("augment: count-preserving, involution, identity paths") {
    RngState rng(8);
    SceneSample scene = generate_scene(tiny_synth(), rng);

    SceneSample flipped = flip_horizontal(scene);
    CHECK(flipped.count == scene.count);
    SceneSample twice = flip_horizontal(flipped);
    CHECK(twice.image.data() == scene.image.data());
    for (std::size_t i = 0; i < scene.points->size(); ++i) {
        CHECK((*twice.points)[i].x == (*scene.points)[i].x);
        CHECK((*twice.points)[i].y == (*scene.points)[i].y);
    }

    SceneSample same = apply_lighting(scene, 1.0, 0.0);
    CHECK(same.image.data() == scene.image.data());

    SceneSample lit = apply_lighting(scene, 1.2, 0.05);
    CHECK(lit.count == scene.count);
    for (double v : lit.image.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    RngState aug_rng(9);
    for (int i = 0; i < 20; ++i) {
        SceneSample out = augment(scene, aug_rng);
        CHECK(out.count == scene.count);
    }
}

TEST_CASE("manifest: parsing, blank case, and error reporting") {
    const auto dir = temp_dir("crowdmlp_manifest_test");
    const auto good = dir / "good.csv";
    {
        std::ofstream f(good);
        f << "image,count\n";
        f << "a.png,12\n";
        f << "sub/b.png,0\n";
        f << "\n";
        f << "c.png,31.5\n";
    }
    const auto records = load_manifest(good.string());
    REQUIRE(records.size() == 3);
    CHECK(records[0].image_path == "a.png");
    CHECK(records[0].count == 12.0);
    CHECK(records[1].image_path == "sub/b.png");
    CHECK(records[2].count == 31.5);

    const auto header_only = dir / "empty.csv";
    {
        std::ofstream f(header_only);
        f << "image,count\n";
    }
    CHECK(load_manifest(header_only.string()).empty());

    CHECK_THROWS_AS(load_manifest((dir / "missing.csv").string()), IoError);

    const auto bad_row = dir / "bad.csv";
    {
        std::ofstream f(bad_row);
        f << "image,count\n";
        f << "a.png,12\n";
        f << "b.png,notanumber\n";
    }
    try {
        load_manifest(bad_row.string());
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }

    const auto bad_header = dir / "hdr.csv";
    {
        std::ofstream f(bad_header);
        f << "path,n\n";
    }
    CHECK_THROWS_AS(load_manifest(bad_header.string()), FormatError);

    const auto negative = dir / "neg.csv";
    {
        std::ofstream f(negative);
        f << "image,count\na.png,-3\n";
    }
    CHECK_THROWS_AS(load_manifest(negative.string()), FormatError);
}

TEST_CASE("resize policy: the fixed reshape rule") {
    CHECK(resolve_resize_dims(2048, 1536, 1024, 768) == std::pair{1024, 768});
    CHECK(resolve_resize_dims(500, 400, 1024, 768) == std::pair{1024, 768});   // upscale
    CHECK(resolve_resize_dims(400, 500, 1024, 768) == std::pair{768, 1024});
    CHECK(resolve_resize_dims(100, 100, 256, 192) == std::pair{256, 192});

    Tensor constant = Tensor::full({3, 40, 60}, 0.25);
    Tensor resized = resize_policy(constant, 96, 64);
    CHECK(resized.shape() == Shape{3, 64, 96});
    for (double v : resized.data()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }

    RngState rng(10);
    Tensor image = Tensor::uniform({3, 30, 20}, 0.0, 1.0, rng);
    Tensor tall = resize_policy(image, 128, 96);
    CHECK(tall.shape() == Shape{3, 128, 96});
}

TEST_CASE("png: quantized round trip is exact") {
    const auto dir = temp_dir("crowdmlp_png_test");
    const auto path = (dir / "scene.png").string();

    RngState rng(11);
    SceneSample scene = generate_scene(tiny_synth(), rng);
    // quantize exactly the way the writer does
    Tensor quantized = Tensor::zeros(scene.image.shape());
    for (std::size_t i = 0; i < scene.image.data().size(); ++i) {
        quantized.data()[i] = std::lround(scene.image.data()[i] * 255.0) / 255.0;
    }
    write_png(path, quantized);
    Tensor loaded = read_png(path);
    REQUIRE(loaded.shape() == quantized.shape());
    for (std::size_t i = 0; i < loaded.data().size(); ++i) {
        CHECK(loaded.data()[i] == doctest::Approx(quantized.data()[i]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(read_png((dir / "nope.png").string()), IoError);
}

TEST_CASE("export_dataset writes a loadable manifest") {
    const auto dir = temp_dir("crowdmlp_export_test");
    SynthConfig cfg = tiny_synth();
    cfg.seed = 99;
    export_dataset(cfg, 4, dir.string());
    const auto records = load_manifest((dir / "manifest.csv").string());
    REQUIRE(records.size() == 4);
    for (const auto& rec : records) {
        Tensor img = read_png((dir / rec.image_path).string());
        CHECK(img.shape() == Shape{3, 64, 64});
        CHECK(rec.count >= 10.0);
        CHECK(rec.count <= 30.0);
    }
    // per-index streams: regenerating gives the same counts
    const auto again = generate_dataset(cfg, 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(again[i].count == records[i].count);
    }
}
