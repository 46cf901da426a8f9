#pragma once

#include <torch/torch.h>

#include <span>
#include <string>
#include <vector>

#include "amieod/core.hpp"
#include "amieod/detector.hpp"
#include "amieod/enhance.hpp"

namespace amieod {

struct EsmOptions {
  int64_t input_size = 224;
  /// "small" (4-stage residual CNN, no normalization) or "resnet50".
  std::string backbone = "small";
  int64_t width = 16;
  int64_t num_routes = ExpertBundleImpl::kNumRoutes;
};

/// Expert Selection Module: resize -> residual backbone -> global pool -> FC.
/// Emits one logit per route (original image + each expert).
class EsmImpl : public torch::nn::Module {
 public:
  explicit EsmImpl(EsmOptions options = {});

  torch::Tensor forward(const torch::Tensor& images);

  const EsmOptions& options() const { return options_; }

  torch::nn::Sequential backbone{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  EsmOptions options_;
};
TORCH_MODULE(Esm);

/// Logits for a single image.
std::vector<double> esm_forward(const Image& image, Esm& esm);

struct RoutingDecision {
  std::vector<double> logits;
  std::vector<double> probs;
  int chosen = 0;
};

/// argmax of the logits, lowest index on ties. NaN -> NumericalError.
RoutingDecision route(std::span<const double> logits);

/// Pseudo-label b for each image in the batch: the route whose output gets
/// the smallest detection loss under the (frozen) detector.
std::vector<int64_t> assign_pseudo_labels(const torch::Tensor& images,
                                          const std::vector<std::vector<Annotation>>& gts,
                                          ExpertBundle& experts, ToyDetector& detector);
int assign_pseudo_label(const Image& image, const std::vector<Annotation>& gts,
                        ExpertBundle& experts, ToyDetector& detector);

/// Per-route detection totals for each image, K x N.
torch::Tensor route_losses(const torch::Tensor& images,
                           const std::vector<std::vector<Annotation>>& gts,
                           ExpertBundle& experts, ToyDetector& detector);

/// -log softmax(logits)[b]. logits is N x K, labels N; returns the mean.
torch::Tensor dgce_loss(const torch::Tensor& logits, const torch::Tensor& labels);
double dgce_loss(std::span<const double> logits, int label);

struct InferOptions {
  double conf_thresh = 0.001;
  double nms_thresh = 0.5;
};

/// Detections for the image routed through `route_index`.
std::vector<Detection> detect_with_route(const Image& image, int route_index,
                                         ExpertBundle& experts, ToyDetector& detector,
                                         const InferOptions& options);

/// route -> one enhancement forward -> detect -> decode -> nms.
std::vector<Detection> infer(const Image& image, Esm& esm, ExpertBundle& experts,
                             ToyDetector& detector, const InferOptions& options,
                             RoutingDecision* decision = nullptr);

}  // namespace amieod
