#pragma once

#include <string>

#include "ribsr/tensor.hpp"

namespace ribsr {

// Binary PPM/PGM (P6 color / P5 gray), maxval 255 only. Images load as
// [H,W,3] or [H,W,1] f32 in [0,1]; save quantizes with round-to-nearest, so
// values that are exact multiples of 1/255 round-trip bit-identically.

Tensor load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Tensor& img);

}  // namespace ribsr
