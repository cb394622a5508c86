#pragma once

#include <string>
#include <vector>

#include "granudet/nn/tensor.hpp"

namespace granudet {

// RGB image with channel values in [0, 1], stored row-major and interleaved.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {}
  double& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  // (H*W) x 3 network input, centred and scaled.
  nn::Tensor tensor() const;
};

Image read_image(const std::string& path);
void write_image(const Image& image, const std::string& path);
// Bilinear resize.
Image resize_image(const Image& image, int height, int width);

}  // namespace granudet
