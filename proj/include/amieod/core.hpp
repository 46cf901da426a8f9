#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string_view>
#include <vector>

#include "amieod/errors.hpp"

namespace amieod {

/// Smallest side accepted by the Image invariant.
inline constexpr int64_t kMinImageSide = 32;

/// Normalized 3-channel raster, shape 3xHxW, float32, values in [0,1].
///
/// Construction validates the invariants once; afterwards the wrapped tensor
/// is treated as immutable (copies share storage, so callers that need to
/// mutate must clone).
class Image {
 public:
  Image() = default;
  explicit Image(torch::Tensor chw);

  const torch::Tensor& tensor() const { return data_; }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }
  bool empty() const { return !data_.defined(); }

  /// 1x3xHxW view for batched ops.
  torch::Tensor batch() const { return data_.unsqueeze(0); }

 private:
  torch::Tensor data_;
};

/// Axis-aligned box in corner form, pixel units.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  static BBox from_center(double cx, double cy, double w, double h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return (x1 + x2) / 2; }
  double cy() const { return (y1 + y2) / 2; }
  bool valid() const { return x1 < x2 && y1 < y2; }

  bool operator==(const BBox&) const = default;
};

struct Annotation {
  BBox box;
  int class_id = 0;

  bool operator==(const Annotation&) const = default;
};

struct Detection {
  BBox box;
  int class_id = 0;
  double score = 0;

  bool operator==(const Detection&) const = default;
};

/// Per-image detection loss split into its three terms.
/// `total` is the lambda-weighted sum of the components.
struct LossBreakdown {
  double box_loss = 0;
  double obj_loss = 0;
  double cls_loss = 0;
  double total = 0;
};

double iou(const BBox& a, const BBox& b);

/// Complete-IoU: IoU minus the normalized center distance and the
/// aspect-ratio consistency term. Range (-1, 1].
double ciou(const BBox& a, const BBox& b);

/// Throws NumericalError naming `where` when `t` holds NaN or Inf.
void check_finite(const torch::Tensor& t, std::string_view where);

/// Bilinear resize of an NxCxHxW batch (half-pixel centers).
torch::Tensor resize_bilinear(const torch::Tensor& images, int64_t height, int64_t width);

/// Stack images into an Nx3xHxW batch; all must share one shape.
torch::Tensor stack_images(const std::vector<Image>& images);

}  // namespace amieod
