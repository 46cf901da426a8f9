#include "amieod/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace amieod {

Image::Image(torch::Tensor chw) : data_(std::move(chw)) {
  if (!data_.defined() || data_.dim() != 3 || data_.size(0) != 3) {
    throw InvalidArgument("Image: expected a 3xHxW tensor");
  }
  if (data_.size(1) < kMinImageSide || data_.size(2) < kMinImageSide) {
    throw InvalidArgument("Image: height and width must be >= " + std::to_string(kMinImageSide));
  }
  data_ = data_.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(data_).all().item<bool>()) {
    throw InvalidArgument("Image: non-finite pixel values");
  }
  if (data_.min().item<float>() < 0.0F || data_.max().item<float>() > 1.0F) {
    throw InvalidArgument("Image: pixel values outside [0,1]");
  }
}

namespace {

void require_valid(const BBox& b, const char* op) {
  if (!b.valid() || !std::isfinite(b.x1) || !std::isfinite(b.y1) || !std::isfinite(b.x2) ||
      !std::isfinite(b.y2)) {
    throw InvalidArgument(std::string(op) + ": degenerate box");
  }
}

double intersection(const BBox& a, const BBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double inter = intersection(a, b);
  return inter / (a.area() + b.area() - inter);
}

double ciou(const BBox& a, const BBox& b) {
  require_valid(a, "ciou");
  require_valid(b, "ciou");
  const double overlap = iou(a, b);

  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double diag2 = cw * cw + ch * ch;
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  const double center_term = (dx * dx + dy * dy) / diag2;

  const double dv = std::atan(b.width() / b.height()) - std::atan(a.width() / a.height());
  const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * dv * dv;
  const double alpha = v > 0 ? v / ((1.0 - overlap) + v) : 0.0;

  return overlap - (center_term + alpha * v);
}

void check_finite(const torch::Tensor& t, std::string_view where) {
  torch::NoGradGuard no_grad;
  // Any NaN/Inf element makes the sum non-finite, so a finite sum settles it
  // in one pass; overflow of a large but finite tensor falls through to the
  // elementwise test.
  if (std::isfinite(t.sum().item<double>())) return;
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericalError("non-finite activations in " + std::string(where));
  }
}

torch::Tensor resize_bilinear(const torch::Tensor& images, int64_t height, int64_t width) {
  if (images.size(-2) == height && images.size(-1) == width) return images;
  namespace F = torch::nn::functional;
  return F::interpolate(images, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
}

torch::Tensor stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw InvalidArgument("stack_images: empty list");
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& im : images) {
    if (im.height() != images.front().height() || im.width() != images.front().width()) {
      throw InvalidArgument("stack_images: shape mismatch");
    }
    ts.push_back(im.tensor());
  }
  return torch::stack(ts);
}

}  // namespace amieod
