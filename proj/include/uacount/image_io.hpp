#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "uacount/grid.hpp"

namespace uacount {

// 16-bit binary PGM, intensities in [0,1] quantized to 65535 levels.
void write_pgm16(const std::filesystem::path& path, const Grid& image);
Grid read_pgm(const std::filesystem::path& path);

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<Rgb> pixels;
};

void write_ppm(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_ppm(const std::filesystem::path& path);

// Jet-style colormap on [0,1]; values outside are clamped.
Rgb colormap_jet(double v);

// Normalizes by [lo, hi] and maps through the jet colormap. A degenerate range
// renders every pixel at the colormap floor.
RgbImage render_colormap(const Grid& values, double lo, double hi);

// Two-colour rendering of a {0,1} map.
RgbImage render_binary(const Grid& values);

}  // namespace uacount
