#include "crowdmlp/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>

#include <png.h>

namespace crowdmlp {

// libpng reports errors through longjmp, so the code inside the setjmp region
// is kept free of objects with destructors; buffers are malloc'd and handed
// back to the C++ wrappers below.

namespace {

unsigned char* read_rgb8(const char* path, int* out_w, int* out_h, const char** err) {
    *err = nullptr;
    FILE* fp = std::fopen(path, "rb");
    if (!fp) {
        *err = "cannot open file";
        return nullptr;
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) {
            png_destroy_read_struct(&png, &info, nullptr);
        }
        std::fclose(fp);
        *err = "libpng init failed";
        return nullptr;
    }

    unsigned char* pixels = nullptr;
    png_bytep* rows = nullptr;
    if (setjmp(png_jmpbuf(png))) {
        std::free(pixels);
        std::free(rows);
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        *err = "malformed PNG data";
        return nullptr;
    }

    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        png_set_tRNS_to_alpha(png);
    }
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(w) * 3) {
        longjmp(png_jmpbuf(png), 1);
    }

    pixels = static_cast<unsigned char*>(std::malloc(static_cast<std::size_t>(w) * h * 3));
    rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * h));
    if (!pixels || !rows) {
        longjmp(png_jmpbuf(png), 1);
    }
    for (png_uint_32 y = 0; y < h; ++y) {
        rows[y] = pixels + static_cast<std::size_t>(y) * rowbytes;
    }
    png_read_image(png, rows);
    png_read_end(png, nullptr);

    std::free(rows);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    *out_w = static_cast<int>(w);
    *out_h = static_cast<int>(h);
    return pixels;
}

bool write_rgb8(const char* path, const unsigned char* pixels, int w, int h, const char** err) {
    *err = nullptr;
    FILE* fp = std::fopen(path, "wb");
    if (!fp) {
        *err = "cannot open file for writing";
        return false;
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) {
            png_destroy_write_struct(&png, &info);
        }
        std::fclose(fp);
        *err = "libpng init failed";
        return false;
    }
    png_bytep* rows = nullptr;
    if (setjmp(png_jmpbuf(png))) {
        std::free(rows);
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        *err = "PNG write failed";
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    rows = static_cast<png_bytep*>(std::malloc(sizeof(png_bytep) * h));
    if (!rows) {
        longjmp(png_jmpbuf(png), 1);
    }
    for (int y = 0; y < h; ++y) {
        rows[y] = const_cast<png_bytep>(pixels + static_cast<std::size_t>(y) * w * 3);
    }
    png_write_image(png, rows);
    png_write_end(png, nullptr);
    std::free(rows);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    return true;
}

} // namespace

Tensor read_png(const std::string& path) {
    int w = 0, h = 0;
    const char* err = nullptr;
    unsigned char* pixels = read_rgb8(path.c_str(), &w, &h, &err);
    if (!pixels) {
        if (err && std::strcmp(err, "cannot open file") == 0) {
            throw IoError("cannot open image " + path);
        }
        throw FormatError("cannot decode PNG " + path + ": " + (err ? err : "unknown error"));
    }
    Tensor image = Tensor::zeros({3, h, w});
    auto& data = image.data();
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < plane; ++i) {
        data[i] = pixels[i * 3 + 0] / 255.0;
        data[plane + i] = pixels[i * 3 + 1] / 255.0;
        data[2 * plane + i] = pixels[i * 3 + 2] / 255.0;
    }
    std::free(pixels);
    return image;
}

void write_png(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) {
        throw DimensionError("write_png expects a [3,H,W] image, got " + shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<unsigned char> pixels(static_cast<std::size_t>(plane) * 3);
    const auto& data = image.data();
    for (std::int64_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) {
            const double v = data[c * plane + i];
            const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            pixels[i * 3 + c] = static_cast<unsigned char>(std::lround(clamped * 255.0));
        }
    }
    const char* err = nullptr;
    if (!write_rgb8(path.c_str(), pixels.data(), w, h, &err)) {
        throw IoError("cannot write PNG " + path + ": " + (err ? err : "unknown error"));
    }
}

} // namespace crowdmlp
