#include "amieod/detector.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <string>
#include <tuple>

namespace amieod {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void DetectorConfig::validate() const {
  if (num_classes < 1) throw InvalidArgument("detector: num_classes must be >= 1");
  if (anchors.empty()) throw InvalidArgument("detector: anchors must be nonempty");
  for (const auto& [w, h] : anchors) {
    if (!(w > 0 && h > 0)) throw InvalidArgument("detector: anchor sizes must be positive");
  }
  if (grid_stride < 2 || (grid_stride & (grid_stride - 1)) != 0) {
    throw InvalidArgument("detector: grid_stride must be a power of two >= 2");
  }
  if (backbone_width < 1) throw InvalidArgument("detector: backbone_width must be >= 1");
  if (loss_weights.box < 0 || loss_weights.obj < 0 || loss_weights.cls < 0) {
    throw InvalidArgument("detector: loss weights must be nonnegative");
  }
}

namespace {

void push_cbr(nn::Sequential& seq, int64_t in, int64_t out, int64_t stride) {
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  seq->push_back(nn::BatchNorm2d(out));
  seq->push_back(nn::ReLU());
}

}  // namespace

ToyDetectorImpl::ToyDetectorImpl(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  backbone = register_module("backbone", nn::Sequential());
  const int64_t width = config_.backbone_width;
  int64_t in = 3;
  for (int s = config_.grid_stride; s > 1; s /= 2) {
    const int64_t out = (in == 3) ? std::max<int64_t>(width / 2, 1) : width;
    push_cbr(backbone, in, out, 2);
    in = out;
  }
  // stride-1 neck so the head sees past a single cell
  push_cbr(backbone, in, width, 1);
  head = register_module(
      "head", nn::Conv2d(nn::Conv2dOptions(width, config_.num_anchors() * config_.channels_per_anchor(), 1)));

  torch::NoGradGuard no_grad;
  auto bias = head->bias.view({config_.num_anchors(), config_.channels_per_anchor()});
  bias.select(1, 4).fill_(-4.5);
  bias.slice(1, 5).fill_(std::log(0.6 / (config_.num_classes - 0.99 + 1e-9)));
}

torch::Tensor ToyDetectorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4) throw InvalidArgument("detect: expected an NxCxHxW batch");
  const auto h = images.size(2);
  const auto w = images.size(3);
  if (h % config_.grid_stride != 0 || w % config_.grid_stride != 0) {
    throw InvalidArgument("detect: image size " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by stride " + std::to_string(config_.grid_stride) +
                          " (letterbox first)");
  }
  auto y = head(backbone->forward(images));
  return y.view({images.size(0), config_.num_anchors(), config_.channels_per_anchor(), y.size(2),
                 y.size(3)});
}

torch::Tensor detect(const Image& image, ToyDetector& detector) {
  torch::NoGradGuard no_grad;
  return detector->forward(image.batch()).squeeze(0);
}

torch::Tensor decode_boxes(const torch::Tensor& raw, const DetectorConfig& cfg) {
  const auto gh = raw.size(3);
  const auto gw = raw.size(4);
  const double stride = cfg.grid_stride;
  auto opts = raw.options().requires_grad(false);
  auto gx = torch::arange(gw, opts).view({1, 1, 1, gw});
  auto gy = torch::arange(gh, opts).view({1, 1, gh, 1});
  std::vector<double> aw, ah;
  for (const auto& [w, h] : cfg.anchors) {
    aw.push_back(w);
    ah.push_back(h);
  }
  auto anchor_w = torch::tensor(aw, torch::kFloat64).to(opts).view({1, -1, 1, 1});
  auto anchor_h = torch::tensor(ah, torch::kFloat64).to(opts).view({1, -1, 1, 1});

  auto cx = (2.0 * torch::sigmoid(raw.select(2, 0)) - 0.5 + gx) * stride;
  auto cy = (2.0 * torch::sigmoid(raw.select(2, 1)) - 0.5 + gy) * stride;
  auto w = anchor_w * (2.0 * torch::sigmoid(raw.select(2, 2))).pow(2);
  auto h = anchor_h * (2.0 * torch::sigmoid(raw.select(2, 3))).pow(2);
  return torch::stack({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, -1);
}

torch::Tensor ciou_tensor(const torch::Tensor& pred, const torch::Tensor& target) {
  const double eps = 1e-9;
  auto px1 = pred.select(-1, 0), py1 = pred.select(-1, 1);
  auto px2 = pred.select(-1, 2), py2 = pred.select(-1, 3);
  auto tx1 = target.select(-1, 0), ty1 = target.select(-1, 1);
  auto tx2 = target.select(-1, 2), ty2 = target.select(-1, 3);

  auto pw = px2 - px1, ph = py2 - py1;
  auto tw = tx2 - tx1, th = ty2 - ty1;
  auto iw = (torch::min(px2, tx2) - torch::max(px1, tx1)).clamp_min(0);
  auto ih = (torch::min(py2, ty2) - torch::max(py1, ty1)).clamp_min(0);
  auto inter = iw * ih;
  auto uni = pw * ph + tw * th - inter + eps;
  auto overlap = inter / uni;

  auto cw = torch::max(px2, tx2) - torch::min(px1, tx1);
  auto ch = torch::max(py2, ty2) - torch::min(py1, ty1);
  auto diag2 = cw * cw + ch * ch + eps;
  auto center2 = ((px1 + px2 - tx1 - tx2).pow(2) + (py1 + py2 - ty1 - ty2).pow(2)) / 4.0;

  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  auto v = k * (torch::atan(tw / (th + eps)) - torch::atan(pw / (ph + eps))).pow(2);
  auto alpha = v / (v - overlap + (1.0 + eps));
  return overlap - (center2 / diag2 + alpha * v);
}

LossBreakdown DetectionLoss::breakdown(int64_t i) const {
  return {box[i].item<double>(), obj[i].item<double>(), cls[i].item<double>(),
          total[i].item<double>()};
}

namespace {

struct Targets {
  std::vector<int64_t> flat_index;  // into N*A*gh*gw
  std::vector<int64_t> image_index;
  std::vector<double> boxes;  // 4 per positive
  std::vector<int64_t> classes;
};

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

Targets build_targets(const std::vector<std::vector<Annotation>>& gts, const DetectorConfig& cfg,
                      int64_t gh, int64_t gw) {
  const int64_t num_anchors = cfg.num_anchors();
  Targets t;
  for (size_t img = 0; img < gts.size(); ++img) {
    // canonical order, so the assignment is independent of GT order
    auto sorted = gts[img];
    std::sort(sorted.begin(), sorted.end(), [](const Annotation& a, const Annotation& b) {
      return std::tie(a.class_id, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
             std::tie(b.class_id, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
    });
    // slot -> (anchor iou, annotation)
    std::map<int64_t, std::pair<double, const Annotation*>> slots;
    for (const auto& gt : sorted) {
      if (!gt.box.valid()) throw InvalidArgument("detection_loss: degenerate ground-truth box");
      if (gt.class_id < 0 || gt.class_id >= cfg.num_classes) {
        throw InvalidArgument("detection_loss: class id " + std::to_string(gt.class_id) +
                              " out of range");
      }
      const auto cell_x = std::clamp<int64_t>(
          static_cast<int64_t>(std::floor(gt.box.cx() / cfg.grid_stride)), 0, gw - 1);
      const auto cell_y = std::clamp<int64_t>(
          static_cast<int64_t>(std::floor(gt.box.cy() / cfg.grid_stride)), 0, gh - 1);
      int64_t best_anchor = 0;
      double best = -1.0;
      for (int64_t a = 0; a < num_anchors; ++a) {
        const double s = shape_iou(cfg.anchors[a].first, cfg.anchors[a].second, gt.box.width(),
                                   gt.box.height());
        if (s > best) {
          best = s;
          best_anchor = a;
        }
      }
      const int64_t flat =
          ((static_cast<int64_t>(img) * num_anchors + best_anchor) * gh + cell_y) * gw + cell_x;
      auto it = slots.find(flat);
      if (it == slots.end() || best > it->second.first) slots[flat] = {best, &gt};
    }
    for (const auto& [flat, entry] : slots) {
      const auto& b = entry.second->box;
      t.flat_index.push_back(flat);
      t.image_index.push_back(static_cast<int64_t>(img));
      t.boxes.insert(t.boxes.end(), {b.x1, b.y1, b.x2, b.y2});
      t.classes.push_back(entry.second->class_id);
    }
  }
  return t;
}

torch::Tensor per_image_mean(const torch::Tensor& values, const torch::Tensor& image_index,
                             int64_t n) {
  auto sums = torch::zeros({n}, values.options()).index_add(0, image_index, values);
  auto counts = torch::zeros({n}, values.options())
                    .index_add(0, image_index, torch::ones_like(values).detach());
  return sums / counts.clamp_min(1.0);
}

}  // namespace

DetectionLoss detection_loss(const torch::Tensor& raw,
                             const std::vector<std::vector<Annotation>>& gts,
                             const DetectorConfig& cfg) {
  if (raw.dim() != 5 || raw.size(1) != cfg.num_anchors() ||
      raw.size(2) != cfg.channels_per_anchor()) {
    throw InvalidArgument("detection_loss: raw predictions do not match the detector config");
  }
  const auto n = raw.size(0);
  if (static_cast<int64_t>(gts.size()) != n) {
    throw InvalidArgument("detection_loss: need one annotation list per image");
  }
  const auto gh = raw.size(3);
  const auto gw = raw.size(4);
  const auto targets = build_targets(gts, cfg, gh, gw);
  const auto npos = static_cast<int64_t>(targets.flat_index.size());

  auto obj_logit = raw.select(2, 4);
  auto obj_target = torch::zeros_like(obj_logit).detach();
  torch::Tensor box = torch::zeros({n}, raw.options());
  torch::Tensor cls = torch::zeros({n}, raw.options());

  if (npos > 0) {
    auto long_opts = torch::TensorOptions().dtype(torch::kLong);
    auto index = torch::tensor(targets.flat_index, long_opts);
    auto image_index = torch::tensor(targets.image_index, long_opts);
    auto tbox = torch::tensor(targets.boxes, torch::kFloat64).to(raw.scalar_type()).view({npos, 4});
    auto tcls = torch::tensor(targets.classes, long_opts);

    obj_target.view({-1}).index_fill_(0, index, 1.0);

    auto pbox = decode_boxes(raw, cfg).reshape({-1, 4}).index_select(0, index);
    box = per_image_mean(1.0 - ciou_tensor(pbox, tbox), image_index, n);

    auto cls_logits = raw.slice(2, 5).permute({0, 1, 3, 4, 2}).reshape({-1, cfg.num_classes});
    auto picked = cls_logits.index_select(0, index);
    auto onehot = F::one_hot(tcls, cfg.num_classes).to(raw.scalar_type());
    auto bce = F::binary_cross_entropy_with_logits(
                   picked, onehot,
                   F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                   .mean(1);
    cls = per_image_mean(bce, image_index, n);
  }

  auto obj = F::binary_cross_entropy_with_logits(
                 obj_logit, obj_target,
                 F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
                 .mean({1, 2, 3});

  const auto& w = cfg.loss_weights;
  DetectionLoss out{box, obj, cls, w.box * box + w.obj * obj + w.cls * cls};
  check_finite(out.total.detach(), "detection_loss");
  return out;
}

LossBreakdown detection_loss(const torch::Tensor& raw, const std::vector<Annotation>& gts,
                             const DetectorConfig& cfg) {
  torch::NoGradGuard no_grad;
  return detection_loss(raw.unsqueeze(0), std::vector<std::vector<Annotation>>{gts}, cfg).breakdown(0);
}

std::vector<Detection> decode(const torch::Tensor& raw, double conf_thresh,
                              const DetectorConfig& cfg) {
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0)) {
    throw InvalidArgument("decode: conf_thresh must be in [0,1]");
  }
  torch::NoGradGuard no_grad;
  auto r = raw.detach().to(torch::kFloat64).unsqueeze(0);
  auto boxes = decode_boxes(r, cfg).squeeze(0).contiguous();   // A x gh x gw x 4
  auto obj = torch::sigmoid(r.select(2, 4)).squeeze(0);        // A x gh x gw
  auto cls = torch::sigmoid(r.slice(2, 5)).squeeze(0);         // A x C x gh x gw
  auto [cls_best, cls_arg] = cls.max(1);
  auto score = (obj * cls_best).contiguous();
  cls_arg = cls_arg.contiguous();

  const auto na = score.size(0), gh = score.size(1), gw = score.size(2);
  const double img_w = static_cast<double>(gw * cfg.grid_stride);
  const double img_h = static_cast<double>(gh * cfg.grid_stride);
  auto sa = score.accessor<double, 3>();
  auto ca = cls_arg.accessor<int64_t, 3>();
  auto ba = boxes.accessor<double, 4>();

  std::vector<Detection> out;
  for (int64_t a = 0; a < na; ++a) {
    for (int64_t y = 0; y < gh; ++y) {
      for (int64_t x = 0; x < gw; ++x) {
        // the product of two sigmoids is strictly below one
        const double s = std::min(sa[a][y][x], 1.0 - DBL_EPSILON);
        if (s < conf_thresh) continue;
        Detection d;
        d.box = {std::clamp(ba[a][y][x][0], 0.0, img_w), std::clamp(ba[a][y][x][1], 0.0, img_h),
                 std::clamp(ba[a][y][x][2], 0.0, img_w), std::clamp(ba[a][y][x][3], 0.0, img_h)};
        if (!d.box.valid()) continue;
        d.class_id = static_cast<int>(ca[a][y][x]);
        d.score = s;
        out.push_back(d);
      }
    }
  }
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
    throw InvalidArgument("nms: iou_thresh must be in (0,1)");
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (!suppressed[j] && dets[j].class_id == dets[i].class_id &&
          iou(dets[i].box, dets[j].box) >= iou_thresh) {
        suppressed[j] = true;
      }
    }
  }
  return kept;
}

}  // namespace amieod
