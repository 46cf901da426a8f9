#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amieod/core.hpp"

namespace amieod {

struct Sample {
  Image image;
  std::vector<Annotation> annotations;
  /// Well-lit counterpart when one exists (synthetic data); undefined otherwise.
  torch::Tensor reference;
  std::string name;
};

using Dataset = std::vector<Sample>;

enum class LabelFormat { kYoloTxt, kCocoJson };
enum class MissingLabels { kFail, kSkip };

LabelFormat parse_label_format(const std::string& s);

/// On-disk layout:
///   yolo-txt:  <root>/images/<split>/*.{png,jpg,...} + <root>/labels/<split>/<stem>.txt
///   coco-json: <root>/images/<split>/... + <root>/annotations/instances_<split>.json
struct DatasetSpec {
  std::filesystem::path root;
  std::string split = "train";
  LabelFormat format = LabelFormat::kYoloTxt;
  std::vector<std::string> class_names;
  MissingLabels missing_labels = MissingLabels::kFail;
};

/// Images normalized to [0,1], boxes in corner-form pixels, samples sorted by
/// file name.
Dataset load_dataset(const DatasetSpec& spec);

/// Parses one yolo-txt label body ("class cx cy w h" per line, normalized).
std::vector<Annotation> parse_yolo_labels(const std::string& text, int64_t image_width,
                                          int64_t image_height, int num_classes,
                                          const std::string& source = "<memory>");

/// Reads RGB; 8- and 16-bit sources are both scaled to [0,1].
Image read_image(const std::filesystem::path& path);
/// 16-bit PNG unless the extension says otherwise (then 8-bit).
void write_image(const std::filesystem::path& path, const Image& image);

// ---------------------------------------------------------------------------
// Synthetic low-light data
// ---------------------------------------------------------------------------

enum class ShapeKind { kRectangle = 0, kEllipse = 1, kTriangle = 2 };
inline constexpr int kNumShapeKinds = 3;
std::vector<std::string> shape_class_names();

/// Axis-aligned extent of a shape; the class id is the shape kind.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::kRectangle;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  BBox box() const { return {x1, y1, x2, y2}; }
};

/// H x W boolean mask, a pixel belongs to the shape iff its center does.
torch::Tensor rasterize(const ShapeSpec& shape, int64_t height, int64_t width);

struct SynthConfig {
  int num_images = 250;
  int canvas_size = 128;
  int shapes_per_image = 3;  // upper bound; each image draws 1..this
  double gamma_lo = 2.0, gamma_hi = 5.0;
  double gain_lo = 0.1, gain_hi = 0.5;
  double noise_sigma = 0.01;
  uint64_t seed = 0;

  void validate() const;
};

/// Bright canvases with colored shapes, darkened per image. When `shapes` is
/// given it receives the geometry behind every annotation.
Dataset synth_generate(const SynthConfig& cfg, std::vector<std::vector<ShapeSpec>>* shapes = nullptr);

/// clamp(gain * image^gamma + N(0, sigma^2), 0, 1) with a seeded noise field.
torch::Tensor darken(const torch::Tensor& images, double gamma, double gain, double noise_sigma,
                     uint64_t seed);
Image darken(const Image& image, double gamma, double gain, double noise_sigma, uint64_t seed);

/// Writes `<root>/images/<split>`, `<root>/labels/<split>` and, when present,
/// `<root>/references/<split>`, plus `<root>/classes.txt`.
void write_yolo_dataset(const Dataset& data, const std::filesystem::path& root,
                        const std::string& split, const std::vector<std::string>& class_names);

// ---------------------------------------------------------------------------
// Geometry transforms
// ---------------------------------------------------------------------------

struct LetterboxTransform {
  double scale_x = 1, scale_y = 1;
  double pad_x = 0, pad_y = 0;  // left / top padding in target pixels
  int64_t source_width = 0, source_height = 0;
  int64_t target = 0;

  BBox to_letterboxed(const BBox& b) const;
  BBox to_original(const BBox& b) const;
};

inline constexpr double kLetterboxPad = 0.5;

/// Aspect-preserving resize into a target x target square, padded with 0.5.
std::pair<Image, LetterboxTransform> letterbox(const Image& image, int64_t target);
/// Letterboxes the image, its reference and its annotations together.
Sample letterbox(const Sample& sample, int64_t target);

Sample hflip(const Sample& sample);

}  // namespace amieod
