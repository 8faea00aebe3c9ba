#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "flowdistill/tensor.hpp"

namespace flowdistill {

// 8-bit interleaved raster, channels = 1 (gray) or 3 (RGB).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

// Format is picked by extension: .png, .ppm (RGB), .pgm (gray).
Image load_image(const std::string& path);
void save_image(const std::string& path, const Image& img);

// Maps 8-bit pixels to a (1,C,H,W) tensor in [-1,1].
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  check(img.channels == 1 || img.channels == 3,
        "image_to_tensor: unsupported channel count " + std::to_string(img.channels));
  Tensor<T> t(Shape{1, img.channels, img.height, img.width});
  auto d = t.data();
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        d[(static_cast<std::size_t>(c) * img.height + y) * img.width + x] =
            static_cast<T>(img.at(y, x, c)) / T(127.5) - T(1);
  return t;
}

// Inverse of image_to_tensor for one batch element; values are clamped.
template <typename T>
Image tensor_to_image(const Tensor<T>& t, int batch_index = 0) {
  check(t.ndim() == 4, "tensor_to_image: expects NCHW, got " + shape_str(t.shape()));
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  check(c == 1 || c == 3, "tensor_to_image: unsupported channel count " + std::to_string(c));
  check(batch_index >= 0 && batch_index < t.dim(0), "tensor_to_image: batch index out of range");
  Image img{w, h, c, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * c)};
  const auto d = t.data();
  const std::size_t base = static_cast<std::size_t>(batch_index) * c * h * w;
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const T v = d[base + (static_cast<std::size_t>(ci) * h + y) * w + x];
        const T scaled = (std::clamp(v, T(-1), T(1)) + T(1)) * T(127.5);
        img.at(y, x, ci) = static_cast<std::uint8_t>(std::lround(static_cast<double>(scaled)));
      }
  return img;
}

}  // namespace flowdistill
