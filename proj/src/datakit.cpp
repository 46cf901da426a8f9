#include "amieod/datakit.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace amieod {

namespace fs = std::filesystem;
using nlohmann::json;

LabelFormat parse_label_format(const std::string& s) {
  if (s == "yolo-txt") return LabelFormat::kYoloTxt;
  if (s == "coco-json") return LabelFormat::kCocoJson;
  throw InvalidArgument("unknown label format '" + s + "' (expected yolo-txt or coco-json)");
}

// ---------------------------------------------------------------------------
// Image IO
// ---------------------------------------------------------------------------

Image read_image(const fs::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw ParseError("cannot read image " + path.string());
  double scale = 1.0;
  switch (raw.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: break;
    default: throw ParseError("unsupported pixel depth in " + path.string());
  }
  cv::Mat rgb;
  switch (raw.channels()) {
    case 1: cv::cvtColor(raw, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(raw, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw ParseError("unsupported channel count in " + path.string());
  }
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, scale);
  auto t = torch::from_blob(f.data, {f.rows, f.cols, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
  return Image(t.clamp(0.0, 1.0));
}

void write_image(const fs::path& path, const Image& image) {
  const bool eight_bit = path.extension() == ".jpg" || path.extension() == ".jpeg";
  auto hwc = image.tensor().permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(image.height()), static_cast<int>(image.width()), CV_32FC3,
              hwc.data_ptr<float>());
  cv::Mat bgr, out;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (eight_bit) {
    bgr.convertTo(out, CV_8UC3, 255.0);
  } else {
    bgr.convertTo(out, CV_16UC3, 65535.0);
  }
  fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

std::vector<Annotation> parse_yolo_labels(const std::string& text, int64_t image_width,
                                          int64_t image_height, int num_classes,
                                          const std::string& source) {
  std::vector<Annotation> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    int cls = -1;
    double cx = 0, cy = 0, w = 0, h = 0;
    std::string extra;
    const auto where = source + ":" + std::to_string(line_no);
    if (!(ls >> cls >> cx >> cy >> w >> h) || (ls >> extra && !extra.empty() && extra[0] != '#')) {
      throw ParseError(where + ": expected 'class cx cy w h'");
    }
    if (cls < 0 || cls >= num_classes) {
      throw ParseError(where + ": class id " + std::to_string(cls) + " not in [0, " +
                       std::to_string(num_classes) + ")");
    }
    if (!(w > 0 && h > 0)) throw ParseError(where + ": box has non-positive size");
    auto box = BBox::from_center(cx * image_width, cy * image_height, w * image_width,
                                 h * image_height);
    box.x1 = std::max(box.x1, 0.0);
    box.y1 = std::max(box.y1, 0.0);
    box.x2 = std::min(box.x2, static_cast<double>(image_width));
    box.y2 = std::min(box.y2, static_cast<double>(image_height));
    if (!box.valid()) throw ParseError(where + ": box lies outside the image");
    out.push_back({box, cls});
  }
  return out;
}

namespace {

bool is_image_file(const fs::path& p) {
  static const std::set<std::string> kExt{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return kExt.count(ext) > 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InvalidArgument("image directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return files;
}

torch::Tensor try_reference(const fs::path& root, const std::string& split, const fs::path& image) {
  auto ref = root / "references" / split / image.filename();
  if (!fs::exists(ref)) return {};
  return read_image(ref).tensor();
}

Dataset load_yolo(const DatasetSpec& spec) {
  const int nc = static_cast<int>(spec.class_names.size());
  Dataset out;
  for (const auto& path : sorted_images(spec.root / "images" / spec.split)) {
    auto label = spec.root / "labels" / spec.split / (path.stem().string() + ".txt");
    if (!fs::exists(label)) {
      if (spec.missing_labels == MissingLabels::kSkip) continue;
      throw InvalidArgument("missing label file " + label.string());
    }
    Sample s;
    s.image = read_image(path);
    s.annotations = parse_yolo_labels(slurp(label), s.image.width(), s.image.height(), nc,
                                      label.string());
    s.reference = try_reference(spec.root, spec.split, path);
    s.name = path.filename().string();
    out.push_back(std::move(s));
  }
  return out;
}

Dataset load_coco(const DatasetSpec& spec) {
  const auto ann_path = spec.root / "annotations" / ("instances_" + spec.split + ".json");
  json doc;
  try {
    doc = json::parse(slurp(ann_path));
  } catch (const json::exception& e) {
    throw ParseError(ann_path.string() + ": " + e.what());
  }
  std::map<int64_t, int> category_to_class;
  if (doc.contains("categories")) {
    std::vector<std::pair<int64_t, std::string>> cats;
    for (const auto& c : doc["categories"]) cats.emplace_back(c.at("id").get<int64_t>(), c.value("name", ""));
    std::sort(cats.begin(), cats.end());
    for (size_t i = 0; i < cats.size(); ++i) {
      if (spec.class_names.empty()) {
        category_to_class[cats[i].first] = static_cast<int>(i);
        continue;
      }
      auto it = std::find(spec.class_names.begin(), spec.class_names.end(), cats[i].second);
      if (it == spec.class_names.end()) {
        throw ParseError(ann_path.string() + ": category '" + cats[i].second + "' is not declared");
      }
      category_to_class[cats[i].first] = static_cast<int>(it - spec.class_names.begin());
    }
  }
  std::map<int64_t, std::vector<json>> per_image;
  for (const auto& a : doc.value("annotations", json::array())) {
    per_image[a.at("image_id").get<int64_t>()].push_back(a);
  }
  const json image_list = doc.value("images", json::array());
  std::vector<json> images(image_list.begin(), image_list.end());
  std::sort(images.begin(), images.end(), [](const json& a, const json& b) {
    return a.at("file_name").get<std::string>() < b.at("file_name").get<std::string>();
  });
  Dataset out;
  for (const auto& im : images) {
    const auto file = spec.root / "images" / spec.split / im.at("file_name").get<std::string>();
    Sample s;
    s.image = read_image(file);
    s.name = file.filename().string();
    for (const auto& a : per_image[im.at("id").get<int64_t>()]) {
      const auto cat = a.at("category_id").get<int64_t>();
      auto it = category_to_class.find(cat);
      if (it == category_to_class.end()) {
        throw ParseError(ann_path.string() + ": unknown category id " + std::to_string(cat));
      }
      const auto& bb = a.at("bbox");
      BBox box{bb[0].get<double>(), bb[1].get<double>(), bb[0].get<double>() + bb[2].get<double>(),
               bb[1].get<double>() + bb[3].get<double>()};
      box.x1 = std::max(box.x1, 0.0);
      box.y1 = std::max(box.y1, 0.0);
      box.x2 = std::min(box.x2, static_cast<double>(s.image.width()));
      box.y2 = std::min(box.y2, static_cast<double>(s.image.height()));
      if (!box.valid()) continue;
      s.annotations.push_back({box, it->second});
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  if (!fs::exists(spec.root)) throw InvalidArgument("dataset root not found: " + spec.root.string());
  if (spec.format == LabelFormat::kYoloTxt && spec.class_names.empty()) {
    throw InvalidArgument("yolo-txt datasets need declared class names");
  }
  return spec.format == LabelFormat::kYoloTxt ? load_yolo(spec) : load_coco(spec);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

std::vector<std::string> shape_class_names() { return {"rectangle", "ellipse", "triangle"}; }

torch::Tensor rasterize(const ShapeSpec& shape, int64_t height, int64_t width) {
  auto mask = torch::zeros({height, width}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  const double cx = 0.5 * (shape.x1 + shape.x2);
  const double cy = 0.5 * (shape.y1 + shape.y2);
  const double hw = 0.5 * (shape.x2 - shape.x1);
  const double hh = 0.5 * (shape.y2 - shape.y1);
  const auto y_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(shape.y1)) - 1);
  const auto y_hi = std::min<int64_t>(height, static_cast<int64_t>(std::ceil(shape.y2)) + 1);
  const auto x_lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor(shape.x1)) - 1);
  const auto x_hi = std::min<int64_t>(width, static_cast<int64_t>(std::ceil(shape.x2)) + 1);
  for (int64_t y = y_lo; y < y_hi; ++y) {
    const double py = y + 0.5;
    for (int64_t x = x_lo; x < x_hi; ++x) {
      const double px = x + 0.5;
      bool inside = false;
      switch (shape.kind) {
        case ShapeKind::kRectangle:
          inside = px >= shape.x1 && px <= shape.x2 && py >= shape.y1 && py <= shape.y2;
          break;
        case ShapeKind::kEllipse: {
          const double u = (px - cx) / hw, v = (py - cy) / hh;
          inside = u * u + v * v <= 1.0;
          break;
        }
        case ShapeKind::kTriangle: {
          // apex at top center, base along y2
          if (py < shape.y1 || py > shape.y2) break;
          const double half = hw * (py - shape.y1) / (shape.y2 - shape.y1);
          inside = std::abs(px - cx) <= half;
          break;
        }
      }
      acc[y][x] = inside;
    }
  }
  return mask;
}

void SynthConfig::validate() const {
  if (num_images < 0) throw InvalidArgument("synth: num_images must be >= 0");
  if (canvas_size < kMinImageSide) throw InvalidArgument("synth: canvas_size must be >= 32");
  if (shapes_per_image < 1) throw InvalidArgument("synth: shapes_per_image must be >= 1");
  if (!(gamma_lo <= gamma_hi) || gamma_lo < 1.0) throw InvalidArgument("synth: bad gamma range");
  if (!(gain_lo <= gain_hi) || gain_lo <= 0.0 || gain_hi > 1.0) throw InvalidArgument("synth: bad gain range");
  if (noise_sigma < 0) throw InvalidArgument("synth: noise_sigma must be >= 0");
}

namespace {

double overlap_ratio(const BBox& a, const BBox& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h / std::min(a.area(), b.area());
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg, std::vector<std::vector<ShapeSpec>>* shapes_out) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  };
  auto uniform_int = [&rng](int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
  };
  const int64_t size = cfg.canvas_size;
  const int64_t min_side = std::max<int64_t>(8, size / 8);
  const int64_t max_side = std::max<int64_t>(min_side + 1, size / 3);

  Dataset out;
  out.reserve(cfg.num_images);
  if (shapes_out) shapes_out->clear();
  for (int i = 0; i < cfg.num_images; ++i) {
    // background: base color with a gentle linear gradient
    std::array<double, 3> base{};
    for (auto& c : base) c = uniform(0.55, 0.95);
    const double gx = uniform(-0.08, 0.08), gy = uniform(-0.08, 0.08);
    auto ramp_x = torch::linspace(-1.0, 1.0, size, torch::kFloat32).view({1, 1, size});
    auto ramp_y = torch::linspace(-1.0, 1.0, size, torch::kFloat32).view({1, size, 1});
    auto canvas = torch::tensor(std::vector<float>(base.begin(), base.end())).view({3, 1, 1}) +
                  gx * ramp_x + gy * ramp_y;
    canvas = canvas.expand({3, size, size}).clone();

    const auto count = uniform_int(1, cfg.shapes_per_image);
    std::vector<ShapeSpec> placed;
    std::vector<Annotation> annotations;
    for (int64_t s = 0; s < count; ++s) {
      ShapeSpec shape;
      bool ok = false;
      for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
        shape.kind = static_cast<ShapeKind>(uniform_int(0, kNumShapeKinds - 1));
        int64_t w = uniform_int(min_side, max_side);
        const int64_t h = uniform_int(min_side, max_side);
        if (shape.kind == ShapeKind::kTriangle && w % 2 == 0) ++w;  // apex on a pixel center
        const int64_t x1 = uniform_int(0, size - w);
        const int64_t y1 = uniform_int(0, size - h);
        shape.x1 = static_cast<double>(x1);
        shape.y1 = static_cast<double>(y1);
        shape.x2 = static_cast<double>(x1 + w);
        shape.y2 = static_cast<double>(y1 + h);
        ok = std::all_of(placed.begin(), placed.end(), [&](const ShapeSpec& p) {
          return overlap_ratio(p.box(), shape.box()) < 0.1;
        });
      }
      if (!ok) continue;

      std::array<float, 3> color{};
      for (int attempt = 0; attempt < 100; ++attempt) {
        double diff = 0;
        for (int c = 0; c < 3; ++c) {
          color[c] = static_cast<float>(uniform(0.0, 1.0));
          diff += std::abs(color[c] - base[c]);
        }
        if (diff / 3.0 >= 0.3) break;
      }
      auto mask = rasterize(shape, size, size);
      for (int c = 0; c < 3; ++c) canvas[c].masked_fill_(mask, color[c]);
      placed.push_back(shape);
      annotations.push_back({shape.box(), static_cast<int>(shape.kind)});
    }
    canvas = canvas.clamp(0.0, 1.0);

    const double gamma = uniform(cfg.gamma_lo, cfg.gamma_hi);
    const double gain = uniform(cfg.gain_lo, cfg.gain_hi);
    const uint64_t noise_seed = rng();
    Sample sample;
    sample.image = Image(darken(canvas.unsqueeze(0), gamma, gain, cfg.noise_sigma, noise_seed).squeeze(0));
    sample.reference = canvas;
    sample.annotations = std::move(annotations);
    std::ostringstream name;
    name << "synth_" << std::setw(5) << std::setfill('0') << i << ".png";
    sample.name = name.str();
    out.push_back(std::move(sample));
    if (shapes_out) shapes_out->push_back(std::move(placed));
  }
  return out;
}

torch::Tensor darken(const torch::Tensor& images, double gamma, double gain, double noise_sigma,
                     uint64_t seed) {
  if (!(gamma >= 1.0)) throw InvalidArgument("darken: gamma must be >= 1");
  if (!(gain > 0.0 && gain <= 1.0)) throw InvalidArgument("darken: gain must be in (0, 1]");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("darken: noise_sigma must be >= 0");
  auto out = gain * torch::pow(images, gamma);
  if (noise_sigma > 0) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    out = out + noise_sigma * torch::randn(images.sizes(), gen, images.options());
  }
  return out.clamp(0.0, 1.0);
}

Image darken(const Image& image, double gamma, double gain, double noise_sigma, uint64_t seed) {
  return Image(darken(image.batch(), gamma, gain, noise_sigma, seed).squeeze(0));
}

void write_yolo_dataset(const Dataset& data, const fs::path& root, const std::string& split,
                        const std::vector<std::string>& class_names) {
  fs::create_directories(root / "labels" / split);
  for (const auto& s : data) {
    const auto stem = fs::path(s.name).stem().string();
    write_image(root / "images" / split / (stem + ".png"), s.image);
    if (s.reference.defined()) {
      write_image(root / "references" / split / (stem + ".png"), Image(s.reference));
    }
    std::ofstream label(root / "labels" / split / (stem + ".txt"));
    label << std::setprecision(17);
    const double w = static_cast<double>(s.image.width());
    const double h = static_cast<double>(s.image.height());
    for (const auto& a : s.annotations) {
      label << a.class_id << ' ' << a.box.cx() / w << ' ' << a.box.cy() / h << ' '
            << a.box.width() / w << ' ' << a.box.height() / h << '\n';
    }
  }
  std::ofstream classes(root / "classes.txt");
  for (const auto& c : class_names) classes << c << '\n';
}

// ---------------------------------------------------------------------------
// Geometry transforms
// ---------------------------------------------------------------------------

BBox LetterboxTransform::to_letterboxed(const BBox& b) const {
  return {b.x1 * scale_x + pad_x, b.y1 * scale_y + pad_y, b.x2 * scale_x + pad_x,
          b.y2 * scale_y + pad_y};
}

BBox LetterboxTransform::to_original(const BBox& b) const {
  return {(b.x1 - pad_x) / scale_x, (b.y1 - pad_y) / scale_y, (b.x2 - pad_x) / scale_x,
          (b.y2 - pad_y) / scale_y};
}

namespace {

torch::Tensor letterbox_tensor(const torch::Tensor& chw, const LetterboxTransform& t) {
  const auto new_w = static_cast<int64_t>(std::llround(t.scale_x * t.source_width));
  const auto new_h = static_cast<int64_t>(std::llround(t.scale_y * t.source_height));
  auto resized = resize_bilinear(chw.unsqueeze(0), new_h, new_w).squeeze(0);
  auto out = torch::full({chw.size(0), t.target, t.target}, kLetterboxPad, chw.options());
  const auto left = static_cast<int64_t>(t.pad_x);
  const auto top = static_cast<int64_t>(t.pad_y);
  out.slice(1, top, top + new_h).slice(2, left, left + new_w).copy_(resized);
  return out.clamp(0.0, 1.0);
}

}  // namespace

std::pair<Image, LetterboxTransform> letterbox(const Image& image, int64_t target) {
  if (target < kMinImageSide) throw InvalidArgument("letterbox: target must be >= 32");
  LetterboxTransform t;
  t.source_width = image.width();
  t.source_height = image.height();
  t.target = target;
  const double scale = std::min(static_cast<double>(target) / image.width(),
                                static_cast<double>(target) / image.height());
  const auto new_w = std::clamp<int64_t>(std::llround(scale * image.width()), 1, target);
  const auto new_h = std::clamp<int64_t>(std::llround(scale * image.height()), 1, target);
  // per-axis scale after rounding keeps the box mapping exact
  t.scale_x = static_cast<double>(new_w) / image.width();
  t.scale_y = static_cast<double>(new_h) / image.height();
  t.pad_x = static_cast<double>((target - new_w) / 2);
  t.pad_y = static_cast<double>((target - new_h) / 2);
  if (new_w == image.width() && new_h == image.height() && target == image.width() &&
      target == image.height()) {
    return {image, t};
  }
  return {Image(letterbox_tensor(image.tensor(), t)), t};
}

Sample letterbox(const Sample& sample, int64_t target) {
  auto [img, t] = letterbox(sample.image, target);
  Sample out;
  out.image = img;
  out.name = sample.name;
  if (sample.reference.defined()) out.reference = letterbox_tensor(sample.reference, t);
  for (const auto& a : sample.annotations) out.annotations.push_back({t.to_letterboxed(a.box), a.class_id});
  return out;
}

Sample hflip(const Sample& sample) {
  Sample out;
  const double w = static_cast<double>(sample.image.width());
  out.image = Image(sample.image.tensor().flip({2}));
  if (sample.reference.defined()) out.reference = sample.reference.flip({2});
  out.name = sample.name;
  for (const auto& a : sample.annotations) {
    out.annotations.push_back({{w - a.box.x2, a.box.y1, w - a.box.x1, a.box.y2}, a.class_id});
  }
  return out;
}

}  // namespace amieod
