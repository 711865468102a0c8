#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "spf/spriteworld.hpp"

namespace spf {

void write_png_rgb(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png_rgb(const std::filesystem::path& path);

/// 8-bit grayscale, row-major.
void write_png_gray(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& height, int& width);

void write_png_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_png_mask(const std::filesystem::path& path);

/// Values are clamped to [0,1] and quantized to 8 bits.
void write_png_heatmap(const std::filesystem::path& path, int height, int width, std::span<const float> values);

}  // namespace spf
