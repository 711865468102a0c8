#include "spf/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

namespace spf {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

void write_png(const std::filesystem::path& path, int height, int width, int color_type, int channels,
               const std::uint8_t* data) {
    auto file = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng write failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& height, int& width, int want_channels) {
    auto file = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng read failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color_type = png_get_color_type(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    if (bit_depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("expected 8-bit png: " + path.string());
    }
    const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : color_type == PNG_COLOR_TYPE_GRAY ? 1 : 0;
    if (channels != want_channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("unexpected png color type: " + path.string());
    }
    std::vector<std::uint8_t> data(static_cast<std::size_t>(height) * width * channels);
    for (int y = 0; y < height; ++y) {
        png_read_row(png, data.data() + static_cast<std::size_t>(y) * width * channels, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return data;
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const RgbImage& image) {
    write_png(path, image.height, image.width, PNG_COLOR_TYPE_RGB, 3, image.rgb.data());
}

RgbImage read_png_rgb(const std::filesystem::path& path) {
    RgbImage image;
    image.rgb = read_png(path, image.height, image.width, 3);
    return image;
}

void write_png_gray(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> pixels) {
    if (pixels.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("write_png_gray: size mismatch");
    }
    write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 1, pixels.data());
}

std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& height, int& width) {
    return read_png(path, height, width, 1);
}

void write_png_mask(const std::filesystem::path& path, const Mask& mask) {
    std::vector<std::uint8_t> px(mask.bits.size());
    std::transform(mask.bits.begin(), mask.bits.end(), px.begin(), [](std::uint8_t b) { return b ? 255 : 0; });
    write_png_gray(path, mask.height, mask.width, px);
}

Mask read_png_mask(const std::filesystem::path& path) {
    Mask mask;
    auto px = read_png_gray(path, mask.height, mask.width);
    mask.bits.resize(px.size());
    std::transform(px.begin(), px.end(), mask.bits.begin(), [](std::uint8_t v) { return v >= 128 ? 1 : 0; });
    return mask;
}

void write_png_heatmap(const std::filesystem::path& path, int height, int width, std::span<const float> values) {
    std::vector<std::uint8_t> px(values.size());
    std::transform(values.begin(), values.end(), px.begin(), [](float v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    });
    write_png_gray(path, height, width, px);
}

}  // namespace spf
