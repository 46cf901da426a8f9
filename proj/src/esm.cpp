#include "amieod/esm.hpp"

#include <cmath>
#include <limits>

namespace amieod {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

class BasicBlockImpl : public nn::Module {
 public:
  /// Without `norm` the block is conv-only with biases.
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride, bool norm = true) {
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(!norm)));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(!norm)));
    if (norm) {
      bn1 = register_module("bn1", nn::BatchNorm2d(out));
      bn2 = register_module("bn2", nn::BatchNorm2d(out));
    }
    if (stride != 1 || in != out) {
      shortcut = register_module("shortcut", nn::Sequential(nn::Conv2d(
                                                 nn::Conv2dOptions(in, out, 1).stride(stride).bias(!norm))));
      if (norm) shortcut->push_back(nn::BatchNorm2d(out));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = conv1(x);
    if (bn1) y = bn1(y);
    y = conv2(torch::relu(y));
    if (bn2) y = bn2(y);
    return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public nn::Module {
 public:
  static constexpr int64_t kExpansion = 4;

  BottleneckImpl(int64_t in, int64_t planes, int64_t stride) {
    const int64_t out = planes * kExpansion;
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, planes, 1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(planes));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(stride).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, out, 1).bias(false)));
    bn3 = register_module("bn3", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      shortcut = register_module(
          "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                     nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = torch::relu(bn2(conv2(y)));
    y = bn3(conv3(y));
    return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(Bottleneck);

// Normalization-free: stage 2 trains at batch size 1, where batch statistics
// would be one image's own and would erase its global brightness, the main
// cue for choosing an enhancer.
int64_t build_small(nn::Sequential& seq, int64_t width) {
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(3, width, 3).stride(2).padding(1)));
  seq->push_back(nn::ReLU());
  int64_t in = width;
  for (int64_t mult : {1, 2, 4, 4}) {
    const int64_t out = width * mult;
    seq->push_back(BasicBlock(in, out, 2, /*norm=*/false));
    in = out;
  }
  return in;
}

int64_t build_resnet50(nn::Sequential& seq) {
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  seq->push_back(nn::BatchNorm2d(64));
  seq->push_back(nn::ReLU());
  seq->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1)));
  int64_t in = 64;
  const int64_t planes[] = {64, 128, 256, 512};
  const int64_t blocks[] = {3, 4, 6, 3};
  for (int s = 0; s < 4; ++s) {
    for (int64_t b = 0; b < blocks[s]; ++b) {
      seq->push_back(Bottleneck(in, planes[s], (b == 0 && s > 0) ? 2 : 1));
      in = planes[s] * BottleneckImpl::kExpansion;
    }
  }
  return in;
}

}  // namespace

EsmImpl::EsmImpl(EsmOptions options) : options_(std::move(options)) {
  // total stride is 32; the BatchNorm layers of resnet50 need at least 2x2
  // cells at batch 1
  if (options_.backbone == "resnet50" && options_.input_size < 64) {
    throw InvalidArgument("esm: resnet50 needs input_size >= 64");
  }
  if (options_.input_size < 32) throw InvalidArgument("esm: input_size must be >= 32");
  if (options_.num_routes < 1) throw InvalidArgument("esm: num_routes must be >= 1");
  backbone = register_module("backbone", nn::Sequential());
  int64_t features = 0;
  if (options_.backbone == "small") {
    features = build_small(backbone, options_.width);
  } else if (options_.backbone == "resnet50") {
    features = build_resnet50(backbone);
  } else {
    throw InvalidArgument("esm: unknown backbone '" + options_.backbone + "'");
  }
  backbone->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
  backbone->push_back(nn::Flatten());
  head = register_module("head", nn::Linear(features, options_.num_routes));
}

torch::Tensor EsmImpl::forward(const torch::Tensor& images) {
  auto x = resize_bilinear(images, options_.input_size, options_.input_size);
  return head(backbone->forward(x));
}

std::vector<double> esm_forward(const Image& image, Esm& esm) {
  torch::NoGradGuard no_grad;
  auto logits = esm->forward(image.batch()).squeeze(0).to(torch::kFloat64).contiguous();
  return {logits.data_ptr<double>(), logits.data_ptr<double>() + logits.numel()};
}

RoutingDecision route(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("route: empty logits");
  RoutingDecision d;
  d.logits.assign(logits.begin(), logits.end());
  double max_logit = -std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < logits.size(); ++k) {
    if (!std::isfinite(logits[k])) throw NumericalError("route: non-finite logit at index " + std::to_string(k));
    if (logits[k] > max_logit) {
      max_logit = logits[k];
      d.chosen = static_cast<int>(k);
    }
  }
  double z = 0;
  d.probs.resize(logits.size());
  for (size_t k = 0; k < logits.size(); ++k) {
    d.probs[k] = std::exp(logits[k] - max_logit);
    z += d.probs[k];
  }
  for (auto& p : d.probs) p /= z;
  return d;
}

torch::Tensor route_losses(const torch::Tensor& images,
                           const std::vector<std::vector<Annotation>>& gts,
                           ExpertBundle& experts, ToyDetector& detector) {
  if (experts->is_training() || detector->is_training()) {
    throw InvalidArgument("pseudo-labels require frozen (eval-mode) experts and detector");
  }
  torch::NoGradGuard no_grad;
  auto outs = experts->forward(images);
  const auto k = static_cast<int64_t>(outs.size());
  const auto n = images.size(0);
  std::vector<std::vector<Annotation>> all_gts;
  all_gts.reserve(k * n);
  for (int64_t i = 0; i < k; ++i) all_gts.insert(all_gts.end(), gts.begin(), gts.end());
  auto raw = detector->forward(torch::cat(outs));
  return detection_loss(raw, all_gts, detector->config()).total.view({k, n});
}

std::vector<int64_t> assign_pseudo_labels(const torch::Tensor& images,
                                          const std::vector<std::vector<Annotation>>& gts,
                                          ExpertBundle& experts, ToyDetector& detector) {
  auto totals = route_losses(images, gts, experts, detector);
  std::vector<int64_t> labels;
  auto t = totals.to(torch::kFloat64).contiguous();
  auto acc = t.accessor<double, 2>();
  for (int64_t j = 0; j < t.size(1); ++j) {
    int64_t best = 0;
    for (int64_t i = 0; i < t.size(0); ++i) {
      if (std::isnan(acc[i][j])) throw NumericalError("assign_pseudo_label: NaN detection loss");
      if (acc[i][j] < acc[best][j]) best = i;
    }
    labels.push_back(best);
  }
  return labels;
}

int assign_pseudo_label(const Image& image, const std::vector<Annotation>& gts,
                        ExpertBundle& experts, ToyDetector& detector) {
  return static_cast<int>(assign_pseudo_labels(image.batch(), {gts}, experts, detector).front());
}

torch::Tensor dgce_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  return F::cross_entropy(logits, labels);
}

double dgce_loss(std::span<const double> logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size())) {
    throw InvalidArgument("dgce_loss: label out of range");
  }
  double m = -std::numeric_limits<double>::infinity();
  for (double v : logits) m = std::max(m, v);
  double z = 0;
  for (double v : logits) z += std::exp(v - m);
  return std::max(0.0, m + std::log(z) - logits[label]);
}

std::vector<Detection> detect_with_route(const Image& image, int route_index,
                                         ExpertBundle& experts, ToyDetector& detector,
                                         const InferOptions& options) {
  torch::NoGradGuard no_grad;
  auto enhanced = experts->apply(route_index, image.batch());
  auto raw = detector->forward(enhanced).squeeze(0);
  return nms(decode(raw, options.conf_thresh, detector->config()), options.nms_thresh);
}

std::vector<Detection> infer(const Image& image, Esm& esm, ExpertBundle& experts,
                             ToyDetector& detector, const InferOptions& options,
                             RoutingDecision* decision) {
  auto d = route(esm_forward(image, esm));
  auto dets = detect_with_route(image, d.chosen, experts, detector, options);
  if (decision) *decision = std::move(d);
  return dets;
}

}  // namespace amieod
