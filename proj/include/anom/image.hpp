#pragma once

#include <filesystem>
#include <string>

#include "anom/tensor.hpp"

namespace anom {

// Images are float tensors in [0,1], shape (C,H,W) with C = 1 or 3.

TensorF load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const TensorF& img);

// Grayscale of an RGB or gray image, (1,H,W).
TensorF to_gray(const TensorF& img);

// 16-bit PGM, linear [0,1] -> [0,65535].
void save_pgm16(const std::filesystem::path& path, const TensorF& map);
TensorF load_pgm16(const std::filesystem::path& path);

// Score heat map rendered over a gray copy of the image, written as PNG.
void save_heat_overlay(const std::filesystem::path& path, const TensorF& img, const TensorF& score);

}  // namespace anom
