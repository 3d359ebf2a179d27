#pragma once

#include <string>

#include "functakit/common.hpp"

namespace functakit {

// 1- or 3-channel image: channels x (height*width), row-major pixel order,
// values in [0,1].
struct ImageData {
  int width = 0;
  int height = 0;
  int channels = 0;
  MatXf pixels;
};

// 8-bit PNG IO; palette/16-bit/alpha inputs are folded down to gray or RGB.
ImageData load_png(const std::string& path);
void save_png(const ImageData& img, const std::string& path);

// Wrap a decoded signal (out_dim x side^2) as a square image.
ImageData as_image(const MatXf& decoded, int side);

}  // namespace functakit
