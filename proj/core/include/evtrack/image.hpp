#pragma once

// Image-plane geometry: boxes, context crops with bilinear resampling, and
// the affine patch<->image mapping used to project tracker output back to
// image coordinates. Images are [3, H, W] arrays with values in [0,1].

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "evtrack/errors.hpp"
#include "evtrack/nd_array.hpp"

namespace evtrack {

// Axis-aligned box in image pixels, top-left origin.
struct RectF {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + w / 2; }
  double cy() const { return y + h / 2; }
  double area() const { return w * h; }
  static RectF from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, w, h};
  }
};

struct CropSpec {
  double cx = 0, cy = 0;   // crop center, image pixels
  double box_w = 0, box_h = 0;
  double context = 2.0;    // crop side = context * sqrt(box_w * box_h)
  std::size_t out_side = 128;
};

// Linear patch->image map per axis: image = scale * patch + offset, in
// pixel-center coordinates.
struct CropAffine {
  double scale_x = 1, scale_y = 1;
  double offset_x = 0, offset_y = 0;

  double to_image_x(double patch_x) const { return scale_x * patch_x + offset_x; }
  double to_image_y(double patch_y) const { return scale_y * patch_y + offset_y; }
  double to_patch_x(double image_x) const { return (image_x - offset_x) / scale_x; }
  double to_patch_y(double image_y) const { return (image_y - offset_y) / scale_y; }
};

template <typename T>
T bilinear_sample(const NdArray<T>& img, std::size_t ch, double u, double v) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(img.dim(1));
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(img.dim(2));
  const double fi = std::floor(v);
  const double fj = std::floor(u);
  const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(fi);
  const std::ptrdiff_t j0 = static_cast<std::ptrdiff_t>(fj);
  const double dv = v - fi;
  const double du = u - fj;
  auto pix = [&](std::ptrdiff_t i, std::ptrdiff_t j) -> double {
    if (i < 0 || i >= H || j < 0 || j >= W) return 0.0;
    return static_cast<double>(
        img.at(ch, static_cast<std::size_t>(i), static_cast<std::size_t>(j)));
  };
  const double top = pix(i0, j0) * (1 - du) + pix(i0, j0 + 1) * du;
  const double bot = pix(i0 + 1, j0) * (1 - du) + pix(i0 + 1, j0 + 1) * du;
  return static_cast<T>(top * (1 - dv) + bot * dv);
}

// Square context crop centered at (cx, cy) with side context*sqrt(w*h),
// zero-padded outside the image and bilinearly resized to out_side^2.
// The patch center pixel ((S-1)/2, (S-1)/2) maps exactly back to (cx, cy).
template <typename T>
NdArray<T> crop_region(const NdArray<T>& image, const CropSpec& spec,
                       CropAffine* affine_out = nullptr) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("crop_region: image must be [3,H,W], got " +
                     shape_str(image.shape()));
  }
  if (!(spec.box_w > 0) || !(spec.box_h > 0)) {
    throw InputError("crop_region: zero-area box");
  }
  if (!(spec.context > 0)) {
    throw ParamError("crop_region: context factor must be positive");
  }
  const std::size_t S = spec.out_side;
  const double side = spec.context * std::sqrt(spec.box_w * spec.box_h);
  const double scale = side / static_cast<double>(S);
  const double half = static_cast<double>(S - 1) / 2.0;

  CropAffine aff;
  aff.scale_x = scale;
  aff.scale_y = scale;
  aff.offset_x = spec.cx - scale * half;
  aff.offset_y = spec.cy - scale * half;
  if (affine_out) *affine_out = aff;

  NdArray<T> patch({3, S, S});
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < S; ++i) {
      const double v = aff.to_image_y(static_cast<double>(i));
      for (std::size_t j = 0; j < S; ++j) {
        const double u = aff.to_image_x(static_cast<double>(j));
        patch.at(ch, i, j) = bilinear_sample(image, ch, u, v);
      }
    }
  return patch;
}

// Binary PPM (P6) with 8-bit channels; values clamp to [0,1] on write.
void write_ppm(const std::string& path, const NdArray<double>& image);
NdArray<double> read_ppm(const std::string& path);

}  // namespace evtrack
