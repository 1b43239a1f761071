#pragma once

#include <string>

#include "crowdmlp/tensor.hpp"

namespace crowdmlp {

// Reads an 8-bit PNG (palette/gray/alpha variants are expanded to RGB) into a
// [3, H, W] tensor with values in [0, 1] (byte / 255).
Tensor read_png(const std::string& path);

// Writes a [3, H, W] tensor in [0, 1] as an 8-bit RGB PNG.
void write_png(const std::string& path, const Tensor& image);

} // namespace crowdmlp
