#pragma once

#include <string>

#include "storyframe/tensor.hpp"

namespace sf {

// 8-bit RGB PNG files. Tensors are {H,W,3} floats in [0,1]; writing clamps
// and quantizes, so a write/read round trip is exact only on the 256-level
// grid.
void write_png(const std::string& path, const num::Tensor& img);
num::Tensor read_png(const std::string& path);

}  // namespace sf
