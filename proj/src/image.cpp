#include "hatnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "hatnet/tensor.hpp"

namespace hatnet {

namespace {

// Mirror an out-of-range coordinate back into [0, size-1] about the edge
// pixel centers (…, 2, 1, 0 | 0', 1', 2', … maps -1 -> 1, size -> size-2).
double reflect_coord(double t, std::size_t size) {
  if (size == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(size - 1);
  t = std::fmod(std::abs(t), period);
  if (t > static_cast<double>(size - 1)) t = period - t;
  return t;
}

float sample_bilinear(const ImageBuf& img, double y, double x, std::size_t ch) {
  const std::size_t y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.h - 1);
  const std::size_t x1 = std::min(x0 + 1, img.w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const double top = (1.0 - fx) * img.at(y0, x0, ch) + fx * img.at(y0, x1, ch);
  const double bot = (1.0 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch);
  return static_cast<float>((1.0 - fy) * top + fy * bot);
}

}  // namespace

ImageBuf resize_bilinear(const ImageBuf& src, std::size_t out_h, std::size_t out_w) {
  if (src.h == 0 || src.w == 0 || out_h == 0 || out_w == 0)
    throw ConfigError("resize_bilinear: image dims must be positive");
  if (out_h == src.h && out_w == src.w) return src;
  ImageBuf dst(out_h, out_w, src.c);
  const double sy = static_cast<double>(src.h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double src_y =
        std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.h - 1));
    for (std::size_t x = 0; x < out_w; ++x) {
      const double src_x = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                      static_cast<double>(src.w - 1));
      for (std::size_t ch = 0; ch < src.c; ++ch)
        dst.at(y, x, ch) = sample_bilinear(src, src_y, src_x, ch);
    }
  }
  return dst;
}

ImageBuf flip_horizontal(const ImageBuf& src) {
  ImageBuf dst(src.h, src.w, src.c);
  for (std::size_t y = 0; y < src.h; ++y)
    for (std::size_t x = 0; x < src.w; ++x)
      for (std::size_t ch = 0; ch < src.c; ++ch) dst.at(y, x, ch) = src.at(y, src.w - 1 - x, ch);
  return dst;
}

ImageBuf flip_vertical(const ImageBuf& src) {
  ImageBuf dst(src.h, src.w, src.c);
  for (std::size_t y = 0; y < src.h; ++y)
    for (std::size_t x = 0; x < src.w; ++x)
      for (std::size_t ch = 0; ch < src.c; ++ch) dst.at(y, x, ch) = src.at(src.h - 1 - y, x, ch);
  return dst;
}

ImageBuf rotate_deg(const ImageBuf& src, double degrees) {
  if (degrees == 0.0) return src;
  ImageBuf dst(src.h, src.w, src.c);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = 0.5 * static_cast<double>(src.h - 1);
  const double cx = 0.5 * static_cast<double>(src.w - 1);
  for (std::size_t y = 0; y < dst.h; ++y)
    for (std::size_t x = 0; x < dst.w; ++x) {
      // Inverse mapping: rotate the destination coordinate back by -angle.
      const double dy = static_cast<double>(y) - cy;
      const double dx = static_cast<double>(x) - cx;
      const double src_y = reflect_coord(cy + cs * dy + sn * dx, src.h);
      const double src_x = reflect_coord(cx - sn * dy + cs * dx, src.w);
      for (std::size_t ch = 0; ch < src.c; ++ch) dst.at(y, x, ch) = sample_bilinear(src, src_y, src_x, ch);
    }
  return dst;
}

double pixel_mean(const ImageBuf& img) {
  double acc = 0.0;
  for (float v : img.data) acc += v;
  return img.data.empty() ? 0.0 : acc / static_cast<double>(img.data.size());
}

}  // namespace hatnet
