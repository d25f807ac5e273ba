#pragma once

#include <string>

#include "hgpe/tensor.hpp"

namespace hgpe {

// Binary PPM (P6, maxval <= 255) -> [1, 3, H, W] with values in [0, 255].
Tensor load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Tensor& img);  // [1,3,H,W], values 0..255

Tensor resize_nearest(const Tensor& img, int out_h, int out_w);

// [0,255] -> [0,1] -> (x - 0.5) / 0.5 per channel.
Tensor normalize_image(const Tensor& img);

}  // namespace hgpe
