#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "amieod/core.hpp"

namespace amieod {

// ---------------------------------------------------------------------------
// Curve enhancer (PIEM / JIEM)
// ---------------------------------------------------------------------------

struct CurveEnhancerOptions {
  int64_t width = 16;
  double eps = 1e-3;
};

/// Two cascaded Conv-BN-ReLU blocks whose outputs are summed and projected to
/// three channels. The sigmoid of that projection is added to the input to
/// form an illumination estimate L = clamp(I + s, eps, 1); the output is
/// clamp(I / L, 0, 1).
///
/// A frozen enhancer keeps every parameter at requires_grad=false and stays in
/// eval mode regardless of train() calls.
class CurveEnhancerImpl : public torch::nn::Module {
 public:
  explicit CurveEnhancerImpl(CurveEnhancerOptions options = {});

  torch::Tensor forward(const torch::Tensor& images);
  /// sigmoid(head(b1 + b2(b1))), the per-pixel illumination offset.
  torch::Tensor illumination_offset(const torch::Tensor& images);

  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }
  void train(bool on = true) override;

  const CurveEnhancerOptions& options() const { return options_; }

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, head{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};

 private:
  CurveEnhancerOptions options_;
  bool frozen_ = false;
};
TORCH_MODULE(CurveEnhancer);

Image curve_enhance(const Image& image, CurveEnhancer& enhancer);

// ---------------------------------------------------------------------------
// DIP parameter vector
// ---------------------------------------------------------------------------

inline constexpr int64_t kNumDipParams = 15;
inline constexpr int64_t kNumToneKnots = 8;

/// Slot layout of the 15-dim parameter vector.
namespace slot {
inline constexpr int64_t kGainR = 0;
inline constexpr int64_t kGainG = 1;
inline constexpr int64_t kGainB = 2;
inline constexpr int64_t kGamma = 3;
inline constexpr int64_t kContrast = 4;
inline constexpr int64_t kToneFirst = 5;  // 8 knots: 5..12
inline constexpr int64_t kSharpen = 13;
inline constexpr int64_t kAux = 14;  // reserved (USM radius / defog); no-op
}  // namespace slot

struct ParamRange {
  double lo;
  double hi;
  double mid() const { return 0.5 * (lo + hi); }
};

/// Legal interval of every slot after range mapping.
inline constexpr std::array<ParamRange, kNumDipParams> kParamRanges{{
    {0.5, 4.0}, {0.5, 4.0}, {0.5, 4.0},  // white-balance gains
    {0.3, 3.0},                          // gamma exponent
    {0.5, 2.0},                          // contrast gain around the image mean
    {0.5, 2.0}, {0.5, 2.0}, {0.5, 2.0}, {0.5, 2.0},
    {0.5, 2.0}, {0.5, 2.0}, {0.5, 2.0}, {0.5, 2.0},  // tone knots
    {-0.5, 1.5},                                      // unsharp-mask strength
    {0.0, 1.0},                                       // reserved
}};

/// Named view over the 15 mapped DIP parameters.
class ParamVector15 {
 public:
  ParamVector15() = default;
  explicit ParamVector15(const std::array<double, kNumDipParams>& values) : values_(values) {}
  /// Takes the first row of an Nx15 (or a flat 15) tensor.
  static ParamVector15 from_tensor(const torch::Tensor& t);
  /// Parameters under which every DIP stage is the identity.
  static ParamVector15 identity();

  const std::array<double, kNumDipParams>& values() const { return values_; }
  double& operator[](size_t i) { return values_.at(i); }
  double operator[](size_t i) const { return values_.at(i); }

  std::array<double, 3> gains() const { return {values_[0], values_[1], values_[2]}; }
  double gamma() const { return values_[slot::kGamma]; }
  double contrast() const { return values_[slot::kContrast]; }
  double sharpen() const { return values_[slot::kSharpen]; }

  /// Throws InvalidArgument naming the first slot outside its legal range.
  void validate() const;
  /// 1x15 float64 tensor.
  torch::Tensor to_tensor() const;

 private:
  std::array<double, kNumDipParams> values_{};
};

/// lo + (hi - lo) * sigmoid(raw), per slot. raw is Nx15.
torch::Tensor map_params(const torch::Tensor& raw);
/// Inverse of map_params for values strictly inside the ranges.
torch::Tensor unmap_params(const torch::Tensor& mapped);

// ---------------------------------------------------------------------------
// Differentiable image processing
// ---------------------------------------------------------------------------

enum class DipStage { kWhiteBalance, kGamma, kContrast, kTone, kSharpen };
using DipOrder = std::array<DipStage, 5>;
inline constexpr DipOrder kDefaultDipOrder{DipStage::kWhiteBalance, DipStage::kGamma,
                                           DipStage::kContrast, DipStage::kTone,
                                           DipStage::kSharpen};

std::string to_string(DipStage s);
DipStage parse_dip_stage(const std::string& name);
/// Comma-separated list of the five stage names, each exactly once.
DipOrder parse_dip_order(const std::string& text);
std::string to_string(const DipOrder& order);

namespace dip {
// Each filter takes an Nx3xHxW batch and per-image parameters; all are
// differentiable in both arguments. Inputs are expected in [0,1].
torch::Tensor white_balance(const torch::Tensor& x, const torch::Tensor& gains);  // gains Nx3
torch::Tensor gamma(const torch::Tensor& x, const torch::Tensor& exponent);       // N
torch::Tensor contrast(const torch::Tensor& x, const torch::Tensor& gain);        // N
torch::Tensor tone(const torch::Tensor& x, const torch::Tensor& knots);           // Nx8
torch::Tensor sharpen(const torch::Tensor& x, const torch::Tensor& strength);     // N
}  // namespace dip

/// Applies the five filters in `order` using mapped params (Nx15), clamping
/// to [0,1] after every stage. No range validation.
torch::Tensor dip_apply(const torch::Tensor& images, const torch::Tensor& params,
                        const DipOrder& order = kDefaultDipOrder);
/// Validating single-image form.
Image dip_apply(const Image& image, const ParamVector15& params,
                const DipOrder& order = kDefaultDipOrder);

// ---------------------------------------------------------------------------
// Parameter prediction net + IAEM
// ---------------------------------------------------------------------------

inline constexpr int64_t kPPInputSize = 256;

/// Five stride-2 Conv-LeakyReLU blocks (16, 32, 32, 32, 32) and two FC layers
/// (64, 15) over a 256x256 bilinear thumbnail. Returns the raw Nx15 vector.
class PPNetImpl : public torch::nn::Module {
 public:
  PPNetImpl();
  torch::Tensor forward(const torch::Tensor& images);

  torch::nn::Sequential features{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(PPNet);

/// Mapped parameters for one image.
ParamVector15 pp_forward(const Image& image, PPNet& net);

class IaemImpl : public torch::nn::Module {
 public:
  explicit IaemImpl(DipOrder order = kDefaultDipOrder);
  torch::Tensor forward(const torch::Tensor& images);
  /// Mapped Nx15 parameters.
  torch::Tensor predict_params(const torch::Tensor& images);

  const DipOrder& order() const { return order_; }

  PPNet pp{nullptr};

 private:
  DipOrder order_;
};
TORCH_MODULE(Iaem);

// ---------------------------------------------------------------------------
// Expert bundle
// ---------------------------------------------------------------------------

struct ExpertOptions {
  CurveEnhancerOptions curve;
  DipOrder dip_order = kDefaultDipOrder;
};

/// Index 0 is the untouched input; 1..3 are PIEM, JIEM and IAEM.
class ExpertBundleImpl : public torch::nn::Module {
 public:
  static constexpr int kNumExperts = 3;
  static constexpr int kNumRoutes = kNumExperts + 1;

  explicit ExpertBundleImpl(ExpertOptions options = {});

  /// [I_0, PIEM(I_0), JIEM(I_0), IAEM(I_0)].
  std::vector<torch::Tensor> forward(const torch::Tensor& images);
  /// Runs exactly one expert (or the identity for k = 0).
  torch::Tensor apply(int k, const torch::Tensor& images);

  /// Parameters optimized in stage 1 (JIEM + IAEM). PIEM is never included.
  std::vector<torch::Tensor> trainable_parameters();
  void train(bool on = true) override;

  const ExpertOptions& options() const { return options_; }

  CurveEnhancer piem{nullptr};
  CurveEnhancer jiem{nullptr};
  Iaem iaem{nullptr};

 private:
  ExpertOptions options_;
};
TORCH_MODULE(ExpertBundle);

std::vector<Image> meiem_forward(const Image& image, ExpertBundle& experts);

/// Copies every parameter and buffer of `src` into `dst` (same architecture).
void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace amieod
