#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

#include "amieod/core.hpp"

namespace amieod {

struct LossWeights {
  double box = 0.05;
  double obj = 1.0;
  double cls = 0.5;
};

struct DetectorConfig {
  int num_classes = 3;
  /// Anchor (w, h) in pixels.
  std::vector<std::pair<double, double>> anchors{{14, 14}, {26, 26}, {44, 44}};
  int grid_stride = 16;
  int backbone_width = 32;
  LossWeights loss_weights;

  int num_anchors() const { return static_cast<int>(anchors.size()); }
  int channels_per_anchor() const { return 5 + num_classes; }
  /// Throws InvalidArgument on a broken invariant.
  void validate() const;
};

/// Stride-2 Conv-BN-ReLU blocks (log2(stride) of them) followed by a 1x1
/// head. Output is N x A x (5+C) x H/stride x W/stride: box offsets
/// (tx, ty, tw, th), objectness logit, class logits.
class ToyDetectorImpl : public torch::nn::Module {
 public:
  explicit ToyDetectorImpl(DetectorConfig config = {});

  torch::Tensor forward(const torch::Tensor& images);

  const DetectorConfig& config() const { return config_; }

  torch::nn::Sequential backbone{nullptr};
  torch::nn::Conv2d head{nullptr};

 private:
  DetectorConfig config_;
};
TORCH_MODULE(ToyDetector);

/// Single-image raw predictions, A x (5+C) x gh x gw.
torch::Tensor detect(const Image& image, ToyDetector& detector);

/// Decoded predicted boxes in corner form for every slot: N x A x gh x gw x 4.
torch::Tensor decode_boxes(const torch::Tensor& raw, const DetectorConfig& cfg);

/// Vectorized CIoU between two corner-form box tensors (..., 4), fully
/// differentiable (the aspect weight is not detached).
torch::Tensor ciou_tensor(const torch::Tensor& pred, const torch::Tensor& target);

/// Per-image loss components, each shaped N and differentiable w.r.t. raw.
struct DetectionLoss {
  torch::Tensor box;
  torch::Tensor obj;
  torch::Tensor cls;
  torch::Tensor total;

  LossBreakdown breakdown(int64_t i) const;
};

/// raw is N x A x (5+C) x gh x gw; gts holds one annotation list per image.
DetectionLoss detection_loss(const torch::Tensor& raw,
                             const std::vector<std::vector<Annotation>>& gts,
                             const DetectorConfig& cfg);
/// Single-image form; raw is A x (5+C) x gh x gw.
LossBreakdown detection_loss(const torch::Tensor& raw, const std::vector<Annotation>& gts,
                             const DetectorConfig& cfg);

/// Sigmoid-decodes one image's raw predictions (A x (5+C) x gh x gw) and
/// keeps detections with score >= conf_thresh (score = obj * best class).
std::vector<Detection> decode(const torch::Tensor& raw, double conf_thresh,
                              const DetectorConfig& cfg);

/// Greedy per-class NMS by descending score.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

}  // namespace amieod
