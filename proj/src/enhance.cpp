#include "amieod/enhance.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace amieod {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Curve enhancer
// ---------------------------------------------------------------------------

CurveEnhancerImpl::CurveEnhancerImpl(CurveEnhancerOptions options) : options_(options) {
  if (options_.width < 1) throw InvalidArgument("curve enhancer width must be >= 1");
  const auto c = options_.width;
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(3, c, 3).padding(1)));
  bn1 = register_module("bn1", nn::BatchNorm2d(c));
  conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
  bn2 = register_module("bn2", nn::BatchNorm2d(c));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
}

torch::Tensor CurveEnhancerImpl::illumination_offset(const torch::Tensor& images) {
  auto b1 = torch::relu(bn1(conv1(images)));
  check_finite(b1, "curve_enhance/block1");
  auto b2 = torch::relu(bn2(conv2(b1)));
  check_finite(b2, "curve_enhance/block2");
  auto s = torch::sigmoid(head(b1 + b2));
  check_finite(s, "curve_enhance/head");
  return s;
}

torch::Tensor CurveEnhancerImpl::forward(const torch::Tensor& images) {
  auto illum = torch::clamp(images + illumination_offset(images), options_.eps, 1.0);
  return torch::clamp(images / illum, 0.0, 1.0);
}

void CurveEnhancerImpl::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) p.set_requires_grad(!frozen);
  if (frozen) Module::train(false);
}

void CurveEnhancerImpl::train(bool on) { Module::train(on && !frozen_); }

Image curve_enhance(const Image& image, CurveEnhancer& enhancer) {
  torch::NoGradGuard no_grad;
  return Image(enhancer->forward(image.batch()).squeeze(0));
}

// ---------------------------------------------------------------------------
// Parameter vector
// ---------------------------------------------------------------------------

ParamVector15 ParamVector15::from_tensor(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kFloat64).contiguous().reshape({-1});
  if (flat.numel() < kNumDipParams) throw InvalidArgument("ParamVector15: need 15 values");
  std::array<double, kNumDipParams> v{};
  auto acc = flat.accessor<double, 1>();
  for (int64_t i = 0; i < kNumDipParams; ++i) v[i] = acc[i];
  return ParamVector15(v);
}

ParamVector15 ParamVector15::identity() {
  std::array<double, kNumDipParams> v{};
  v[slot::kGainR] = v[slot::kGainG] = v[slot::kGainB] = 1.0;
  v[slot::kGamma] = 1.0;
  v[slot::kContrast] = 1.0;
  for (int64_t i = 0; i < kNumToneKnots; ++i) v[slot::kToneFirst + i] = 1.0;
  v[slot::kSharpen] = 0.0;
  v[slot::kAux] = kParamRanges[slot::kAux].mid();
  return ParamVector15(v);
}

void ParamVector15::validate() const {
  for (size_t i = 0; i < values_.size(); ++i) {
    const auto& r = kParamRanges[i];
    if (!std::isfinite(values_[i]) || values_[i] < r.lo || values_[i] > r.hi) {
      std::ostringstream os;
      os << "DIP parameter slot " << i << " = " << values_[i] << " outside [" << r.lo << ", "
         << r.hi << "]";
      throw InvalidArgument(os.str());
    }
  }
}

torch::Tensor ParamVector15::to_tensor() const {
  return torch::tensor(std::vector<double>(values_.begin(), values_.end()), torch::kFloat64)
      .reshape({1, kNumDipParams});
}

namespace {

std::pair<torch::Tensor, torch::Tensor> range_tensors(const torch::Tensor& like) {
  std::vector<double> lo, span;
  for (const auto& r : kParamRanges) {
    lo.push_back(r.lo);
    span.push_back(r.hi - r.lo);
  }
  auto opts = torch::TensorOptions().dtype(like.scalar_type()).device(like.device());
  return {torch::tensor(lo, torch::kFloat64).to(opts), torch::tensor(span, torch::kFloat64).to(opts)};
}

}  // namespace

torch::Tensor map_params(const torch::Tensor& raw) {
  if (raw.size(-1) != kNumDipParams) throw InvalidArgument("map_params: last dim must be 15");
  auto [lo, span] = range_tensors(raw);
  return lo + span * torch::sigmoid(raw);
}

torch::Tensor unmap_params(const torch::Tensor& mapped) {
  auto [lo, span] = range_tensors(mapped);
  return torch::logit((mapped - lo) / span);
}

// ---------------------------------------------------------------------------
// DIP filters
// ---------------------------------------------------------------------------

std::string to_string(DipStage s) {
  switch (s) {
    case DipStage::kWhiteBalance: return "white_balance";
    case DipStage::kGamma: return "gamma";
    case DipStage::kContrast: return "contrast";
    case DipStage::kTone: return "tone";
    case DipStage::kSharpen: return "sharpen";
  }
  return "?";
}

DipStage parse_dip_stage(const std::string& name) {
  for (auto s : kDefaultDipOrder) {
    if (to_string(s) == name) return s;
  }
  throw InvalidArgument("unknown DIP stage '" + name + "'");
}

DipOrder parse_dip_order(const std::string& text) {
  DipOrder order{};
  std::set<DipStage> seen;
  std::stringstream ss(text);
  std::string item;
  size_t n = 0;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (n >= order.size()) throw InvalidArgument("DIP order lists more than five stages");
    order[n] = parse_dip_stage(item);
    if (!seen.insert(order[n]).second) throw InvalidArgument("DIP stage repeated: " + item);
    ++n;
  }
  if (n != order.size()) throw InvalidArgument("DIP order must list all five stages");
  return order;
}

std::string to_string(const DipOrder& order) {
  std::string out;
  for (auto s : order) {
    if (!out.empty()) out += ",";
    out += to_string(s);
  }
  return out;
}

namespace dip {

namespace {
torch::Tensor per_image(const torch::Tensor& p) { return p.reshape({-1, 1, 1, 1}); }
}  // namespace

torch::Tensor white_balance(const torch::Tensor& x, const torch::Tensor& gains) {
  return x * gains.reshape({-1, 3, 1, 1});
}

torch::Tensor gamma(const torch::Tensor& x, const torch::Tensor& exponent) {
  // The floor keeps d/d(exponent) = x^g ln x finite at black pixels.
  return torch::pow(x.clamp_min(1e-6), per_image(exponent));
}

torch::Tensor contrast(const torch::Tensor& x, const torch::Tensor& gain) {
  auto mean = x.mean({1, 2, 3}, /*keepdim=*/true);
  return mean + per_image(gain) * (x - mean);
}

torch::Tensor tone(const torch::Tensor& x, const torch::Tensor& knots) {
  // Piecewise-linear curve: sum_j clamp(n*x - j, 0, 1) * k_j, evaluated as the
  // knots below x's segment plus the covered fraction of that segment.
  const auto n = knots.size(1);
  const auto batch = x.size(0);
  auto v = x * static_cast<double>(n);
  auto seg = v.detach().floor().clamp(0, static_cast<double>(n - 1));
  auto frac = (v - seg).clamp(0.0, 1.0);
  auto below = torch::cat({torch::zeros({batch, 1}, knots.options()), knots.cumsum(1).slice(1, 0, n - 1)}, 1);
  auto idx = seg.to(torch::kLong).reshape({batch, -1});
  auto base = below.gather(1, idx).view_as(x);
  auto slope = knots.gather(1, idx).view_as(x);
  return (base + frac * slope) / per_image(knots.sum(1));
}

torch::Tensor sharpen(const torch::Tensor& x, const torch::Tensor& strength) {
  const double e = std::exp(-0.5);
  auto k1 = torch::tensor({e, 1.0, e}, x.options());
  k1 = k1 / k1.sum();
  auto kernel = torch::outer(k1, k1).reshape({1, 1, 3, 3}).repeat({3, 1, 1, 1});
  auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReplicate));
  auto blur = F::conv2d(padded, kernel, F::Conv2dFuncOptions().groups(3));
  return x + per_image(strength) * (x - blur);
}

}  // namespace dip

torch::Tensor dip_apply(const torch::Tensor& images, const torch::Tensor& params,
                        const DipOrder& order) {
  if (params.dim() != 2 || params.size(1) != kNumDipParams || params.size(0) != images.size(0)) {
    throw InvalidArgument("dip_apply: params must be Nx15 with N matching the batch");
  }
  auto p = params.to(images.scalar_type());
  auto x = images;
  for (auto stage : order) {
    switch (stage) {
      case DipStage::kWhiteBalance:
        x = dip::white_balance(x, p.slice(1, slot::kGainR, slot::kGainB + 1));
        break;
      case DipStage::kGamma:
        x = dip::gamma(x, p.select(1, slot::kGamma));
        break;
      case DipStage::kContrast:
        x = dip::contrast(x, p.select(1, slot::kContrast));
        break;
      case DipStage::kTone:
        x = dip::tone(x, p.slice(1, slot::kToneFirst, slot::kToneFirst + kNumToneKnots));
        break;
      case DipStage::kSharpen:
        x = dip::sharpen(x, p.select(1, slot::kSharpen));
        break;
    }
    x = torch::clamp(x, 0.0, 1.0);
  }
  return x;
}

Image dip_apply(const Image& image, const ParamVector15& params, const DipOrder& order) {
  params.validate();
  torch::NoGradGuard no_grad;
  return Image(dip_apply(image.batch(), params.to_tensor(), order).squeeze(0));
}

// ---------------------------------------------------------------------------
// PP net / IAEM
// ---------------------------------------------------------------------------

PPNetImpl::PPNetImpl() {
  features = register_module("features", nn::Sequential());
  int64_t in = 3;
  for (int64_t out : {16, 32, 32, 32, 32}) {
    features->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
    features->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.1)));
    in = out;
  }
  const int64_t spatial = kPPInputSize / 32;
  fc1 = register_module("fc1", nn::Linear(32 * spatial * spatial, 64));
  fc2 = register_module("fc2", nn::Linear(64, kNumDipParams));

  // Start near the identity pipeline so an untrained IAEM passes images through.
  torch::NoGradGuard no_grad;
  fc2->weight.mul_(0.1);
  fc2->bias.copy_(unmap_params(ParamVector15::identity().to_tensor()).reshape({-1}).to(torch::kFloat32));
}

torch::Tensor PPNetImpl::forward(const torch::Tensor& images) {
  auto x = resize_bilinear(images, kPPInputSize, kPPInputSize);
  x = features->forward(x).flatten(1);
  x = F::leaky_relu(fc1(x), F::LeakyReLUFuncOptions().negative_slope(0.1));
  return fc2(x);
}

ParamVector15 pp_forward(const Image& image, PPNet& net) {
  torch::NoGradGuard no_grad;
  return ParamVector15::from_tensor(map_params(net->forward(image.batch())));
}

IaemImpl::IaemImpl(DipOrder order) : order_(order) { pp = register_module("pp", PPNet()); }

torch::Tensor IaemImpl::predict_params(const torch::Tensor& images) {
  return map_params(pp->forward(images));
}

torch::Tensor IaemImpl::forward(const torch::Tensor& images) {
  auto out = dip_apply(images, predict_params(images), order_);
  check_finite(out, "iaem/dip");
  return out;
}

// ---------------------------------------------------------------------------
// Expert bundle
// ---------------------------------------------------------------------------

ExpertBundleImpl::ExpertBundleImpl(ExpertOptions options) : options_(options) {
  piem = register_module("piem", CurveEnhancer(options_.curve));
  jiem = register_module("jiem", CurveEnhancer(options_.curve));
  iaem = register_module("iaem", Iaem(options_.dip_order));
  piem->set_frozen(true);
}

std::vector<torch::Tensor> ExpertBundleImpl::forward(const torch::Tensor& images) {
  std::vector<torch::Tensor> out;
  out.reserve(kNumRoutes);
  for (int k = 0; k < kNumRoutes; ++k) out.push_back(apply(k, images));
  return out;
}

torch::Tensor ExpertBundleImpl::apply(int k, const torch::Tensor& images) {
  switch (k) {
    case 0: return images;
    case 1: return piem->forward(images);
    case 2: return jiem->forward(images);
    case 3: return iaem->forward(images);
    default: throw InvalidArgument("expert index must be in [0, 3]");
  }
}

std::vector<torch::Tensor> ExpertBundleImpl::trainable_parameters() {
  auto params = jiem->parameters();
  for (auto& p : iaem->parameters()) params.push_back(p);
  return params;
}

void ExpertBundleImpl::train(bool on) {
  Module::train(on);
  piem->train(on);  // no-op while frozen
}

std::vector<Image> meiem_forward(const Image& image, ExpertBundle& experts) {
  torch::NoGradGuard no_grad;
  std::vector<Image> out;
  for (auto& t : experts->forward(image.batch())) out.emplace_back(t.squeeze(0));
  return out;
}

void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard no_grad;
  auto src_params = src.named_parameters();
  for (auto& item : dst.named_parameters()) item.value().copy_(src_params[item.key()]);
  auto src_buffers = src.named_buffers();
  for (auto& item : dst.named_buffers()) item.value().copy_(src_buffers[item.key()]);
}

}  // namespace amieod
