#pragma once

#include <cstddef>
#include <vector>

namespace hatnet {

// Plain row-major pixel buffer (h x w x c interleaved). Pixels live outside
// the autodiff tape: augmentation and tiling happen before the encoder.
struct ImageBuf {
  std::size_t h = 0, w = 0, c = 1;
  std::vector<float> data;

  ImageBuf() = default;
  ImageBuf(std::size_t h_, std::size_t w_, std::size_t c_ = 1)
      : h(h_), w(w_), c(c_), data(h_ * w_ * c_, 0.0f) {}

  float& at(std::size_t y, std::size_t x, std::size_t ch = 0) {
    return data[(y * w + x) * c + ch];
  }
  float at(std::size_t y, std::size_t x, std::size_t ch = 0) const {
    return data[(y * w + x) * c + ch];
  }
  std::size_t numel() const { return data.size(); }
};

// Bilinear resize with center-aligned sampling; resizing to the source size
// reproduces the input bit-exactly.
ImageBuf resize_bilinear(const ImageBuf& src, std::size_t out_h, std::size_t out_w);

ImageBuf flip_horizontal(const ImageBuf& src);
ImageBuf flip_vertical(const ImageBuf& src);

// Rotation about the image center by `degrees` (counter-clockwise), bilinear
// sampling with reflected edges; 0 degrees reproduces the input bit-exactly.
ImageBuf rotate_deg(const ImageBuf& src, double degrees);

double pixel_mean(const ImageBuf& img);

}  // namespace hatnet
