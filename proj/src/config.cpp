#include "amieod/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace amieod {

using nlohmann::json;

TrainConfig TrainConfig::stage1() { return TrainConfig{}; }

TrainConfig TrainConfig::stage2() {
  TrainConfig c;
  c.stage = 2;
  c.lr = 0.001;
  c.epochs = 30;
  c.batch_size = 1;
  c.hflip = false;
  return c;
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw InvalidArgument("train: stage must be 1 or 2");
  if (!(lr > 0)) throw InvalidArgument("train: lr must be > 0");
  if (epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
  if (batch_size < 1) throw InvalidArgument("train: batch_size must be >= 1");
  if (!(alpha >= 0 && alpha <= 1)) throw InvalidArgument("train: alpha must be in [0,1]");
  if (momentum < 0 || weight_decay < 0) throw InvalidArgument("train: momentum/weight_decay must be >= 0");
  if (input_size < kMinImageSide) throw InvalidArgument("train: input_size too small");
}

DatasetSpec DataConfig::spec(const std::string& split) const {
  DatasetSpec s;
  s.root = root;
  s.split = split;
  s.format = parse_label_format(format);
  s.class_names = class_names;
  s.missing_labels = skip_missing_labels ? MissingLabels::kSkip : MissingLabels::kFail;
  return s;
}

Config Config::desk() {
  Config c;
  c.stage1 = TrainConfig::stage1();
  c.stage1.input_size = 128;
  c.stage1.epochs = 20;
  c.stage2 = TrainConfig::stage2();
  c.stage2.input_size = 128;
  c.stage2.epochs = 10;
  return c;
}

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw InvalidArgument("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

int64_t to_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw InvalidArgument("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("config: " + key + " expects true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

struct Entry {
  std::string doc;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

using Registry = std::vector<std::pair<std::string, Entry>>;

void add_real(Registry& r, const std::string& key, std::string doc, std::function<double&(Config&)> f) {
  r.push_back({key,
               {std::move(doc), [f](const Config& c) { return fmt_double(f(const_cast<Config&>(c))); },
                [f, key](Config& c, const std::string& v) { f(c) = to_double(key, v); }}});
}

template <class Int>
void add_int(Registry& r, const std::string& key, std::string doc, std::function<Int&(Config&)> f) {
  r.push_back({key,
               {std::move(doc), [f](const Config& c) { return std::to_string(f(const_cast<Config&>(c))); },
                [f, key](Config& c, const std::string& v) {
                  const int64_t x = to_int(key, v);
                  if constexpr (std::is_unsigned_v<Int>) {
                    if (x < 0) throw InvalidArgument("config: " + key + " must be >= 0");
                  }
                  f(c) = static_cast<Int>(x);
                }}});
}

void add_bool(Registry& r, const std::string& key, std::string doc, std::function<bool&(Config&)> f) {
  r.push_back({key,
               {std::move(doc), [f](const Config& c) { return f(const_cast<Config&>(c)) ? "true" : "false"; },
                [f, key](Config& c, const std::string& v) { f(c) = to_bool(key, v); }}});
}

void add_string(Registry& r, const std::string& key, std::string doc, std::function<std::string&(Config&)> f) {
  r.push_back({key,
               {std::move(doc), [f](const Config& c) { return f(const_cast<Config&>(c)); },
                [f](Config& c, const std::string& v) { f(c) = v; }}});
}

void add_train(Registry& r, const std::string& sec, TrainConfig Config::*member) {
  auto t = [member](Config& c) -> TrainConfig& { return c.*member; };
  add_real(r, sec + ".lr", "initial learning rate", [t](Config& c) -> double& { return t(c).lr; });
  add_int<int>(r, sec + ".epochs", "passes over the training set", [t](Config& c) -> int& { return t(c).epochs; });
  add_int<int>(r, sec + ".batch_size", "images per optimizer step",
               [t](Config& c) -> int& { return t(c).batch_size; });
  add_real(r, sec + ".momentum", "SGD momentum", [t](Config& c) -> double& { return t(c).momentum; });
  add_real(r, sec + ".weight_decay", "SGD weight decay", [t](Config& c) -> double& { return t(c).weight_decay; });
  add_real(r, sec + ".alpha", "detection-loss weight in the stage-1 objective",
           [t](Config& c) -> double& { return t(c).alpha; });
  add_int<int>(r, sec + ".input_size", "letterbox target side in pixels",
               [t](Config& c) -> int& { return t(c).input_size; });
  add_int<uint64_t>(r, sec + ".seed", "seed for init, shuffling and augmentation",
                    [t](Config& c) -> uint64_t& { return t(c).seed; });
  add_bool(r, sec + ".cosine_lr", "cosine decay to 0 instead of a constant rate",
           [t](Config& c) -> bool& { return t(c).cosine_lr; });
  add_bool(r, sec + ".hflip", "random horizontal flips", [t](Config& c) -> bool& { return t(c).hflip; });
}

const Registry& registry() {
  static const Registry reg = [] {
    Registry r;
    add_string(r, "data.root", "dataset root (yolo-txt or coco-json layout)",
               [](Config& c) -> std::string& { return c.data.root; });
    add_string(r, "data.format", "yolo-txt | coco-json", [](Config& c) -> std::string& { return c.data.format; });
    r.push_back({"data.classes",
                 {"comma-separated class names",
                  [](const Config& c) { return join(c.data.class_names); },
                  [](Config& c, const std::string& v) {
                    auto names = split_list(v);
                    if (names.empty()) throw InvalidArgument("config: data.classes is empty");
                    c.data.class_names = std::move(names);
                  }}});
    add_string(r, "data.train_split", "training split name",
               [](Config& c) -> std::string& { return c.data.train_split; });
    add_string(r, "data.test_split", "evaluation split name",
               [](Config& c) -> std::string& { return c.data.test_split; });
    add_bool(r, "data.skip_missing_labels", "skip images without a label file instead of failing",
             [](Config& c) -> bool& { return c.data.skip_missing_labels; });

    add_int<int>(r, "synth.num_train", "synthetic training images",
                 [](Config& c) -> int& { return c.synth.num_images; });
    add_int<int>(r, "synth.num_test", "synthetic test images", [](Config& c) -> int& { return c.synth_num_test; });
    add_int<int>(r, "synth.canvas_size", "synthetic canvas side",
                 [](Config& c) -> int& { return c.synth.canvas_size; });
    add_int<int>(r, "synth.shapes_per_image", "maximum shapes per canvas",
                 [](Config& c) -> int& { return c.synth.shapes_per_image; });
    add_real(r, "synth.gamma_lo", "darkening exponent lower bound",
             [](Config& c) -> double& { return c.synth.gamma_lo; });
    add_real(r, "synth.gamma_hi", "darkening exponent upper bound",
             [](Config& c) -> double& { return c.synth.gamma_hi; });
    add_real(r, "synth.gain_lo", "darkening gain lower bound", [](Config& c) -> double& { return c.synth.gain_lo; });
    add_real(r, "synth.gain_hi", "darkening gain upper bound", [](Config& c) -> double& { return c.synth.gain_hi; });
    add_real(r, "synth.noise_sigma", "additive Gaussian noise sigma",
             [](Config& c) -> double& { return c.synth.noise_sigma; });
    add_int<uint64_t>(r, "synth.seed", "generator seed", [](Config& c) -> uint64_t& { return c.synth.seed; });

    add_int<int>(r, "detector.num_classes", "number of object classes",
                 [](Config& c) -> int& { return c.detector.num_classes; });
    r.push_back({"detector.anchors",
                 {"anchor sizes as WxH, comma-separated",
                  [](const Config& c) {
                    std::vector<std::string> items;
                    for (const auto& [w, h] : c.detector.anchors) items.push_back(fmt_double(w) + "x" + fmt_double(h));
                    return join(items);
                  },
                  [](Config& c, const std::string& v) {
                    std::vector<std::pair<double, double>> anchors;
                    for (const auto& item : split_list(v)) {
                      const auto x = item.find('x');
                      if (x == std::string::npos) throw InvalidArgument("config: anchor '" + item + "' is not WxH");
                      anchors.emplace_back(to_double("detector.anchors", item.substr(0, x)),
                                           to_double("detector.anchors", item.substr(x + 1)));
                    }
                    c.detector.anchors = std::move(anchors);
                  }}});
    add_int<int>(r, "detector.stride", "output grid stride (power of two)",
                 [](Config& c) -> int& { return c.detector.grid_stride; });
    add_int<int>(r, "detector.width", "backbone channel width",
                 [](Config& c) -> int& { return c.detector.backbone_width; });
    add_real(r, "detector.lambda_box", "box loss weight",
             [](Config& c) -> double& { return c.detector.loss_weights.box; });
    add_real(r, "detector.lambda_obj", "objectness loss weight",
             [](Config& c) -> double& { return c.detector.loss_weights.obj; });
    add_real(r, "detector.lambda_cls", "classification loss weight",
             [](Config& c) -> double& { return c.detector.loss_weights.cls; });

    add_int<int64_t>(r, "enhance.width", "curve enhancer channel width",
                     [](Config& c) -> int64_t& { return c.experts.curve.width; });
    add_real(r, "enhance.eps", "illumination floor of the curve enhancer",
             [](Config& c) -> double& { return c.experts.curve.eps; });
    r.push_back({"enhance.dip_order",
                 {"order of the five DIP filters",
                  [](const Config& c) { return to_string(c.experts.dip_order); },
                  [](Config& c, const std::string& v) { c.experts.dip_order = parse_dip_order(v); }}});

    add_int<int64_t>(r, "esm.input_size", "selector input side",
                     [](Config& c) -> int64_t& { return c.esm.input_size; });
    add_string(r, "esm.backbone", "small | resnet50", [](Config& c) -> std::string& { return c.esm.backbone; });
    add_int<int64_t>(r, "esm.width", "selector base width (small backbone)",
                     [](Config& c) -> int64_t& { return c.esm.width; });
    add_bool(r, "esm.cache_pseudo_labels", "compute stage-2 pseudo-labels once before training",
             [](Config& c) -> bool& { return c.cache_pseudo_labels; });

    add_int<int>(r, "piem.steps", "pretraining steps of the frozen curve expert",
                 [](Config& c) -> int& { return c.piem.steps; });
    add_int<int>(r, "piem.batch_size", "pretraining batch size", [](Config& c) -> int& { return c.piem.batch_size; });
    add_real(r, "piem.lr", "pretraining Adam learning rate", [](Config& c) -> double& { return c.piem.lr; });

    add_train(r, "stage1", &Config::stage1);
    add_train(r, "stage2", &Config::stage2);

    add_real(r, "eval.conf_thresh", "score threshold for precision/recall",
             [](Config& c) -> double& { return c.eval.metrics.conf_thresh; });
    add_real(r, "eval.iou_thresh", "IoU threshold for a true positive",
             [](Config& c) -> double& { return c.eval.metrics.iou_thresh; });
    add_real(r, "eval.detect_conf", "score floor applied before NMS",
             [](Config& c) -> double& { return c.eval.infer.conf_thresh; });
    add_real(r, "eval.nms_thresh", "NMS IoU threshold", [](Config& c) -> double& { return c.eval.infer.nms_thresh; });
    add_string(r, "eval.routing", "esm | fixed:<k> | random:<seed>",
               [](Config& c) -> std::string& { return c.eval.routing; });
    add_int<int>(r, "eval.random_seeds", "seeds averaged for random routing in route-stats",
                 [](Config& c) -> int& { return c.eval.random_seeds; });
    return r;
  }();
  return reg;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& [k, e] : registry()) {
    if (k == key) return e;
  }
  throw InvalidArgument("config: unknown key '" + key + "'");
}

}  // namespace

const std::vector<Config::KeyInfo>& Config::keys() {
  static const std::vector<KeyInfo> out = [] {
    std::vector<KeyInfo> v;
    for (const auto& [k, e] : registry()) v.push_back({k, e.doc});
    return v;
  }();
  return out;
}

void Config::set(const std::string& key, const std::string& value) { find_entry(key).set(*this, value); }

std::string Config::get(const std::string& key) const { return find_entry(key).get(*this); }

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("config: override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::set_seed(uint64_t seed) {
  synth.seed = seed;
  stage1.seed = seed;
  stage2.seed = seed;
}

Config Config::parse_text(const std::string& text, const std::string& source) {
  Config c = desk();
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = source + ":" + std::to_string(lineno);
    // '#' starts a comment unless it sits inside a quoted string.
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ParseError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    const auto full = section.empty() ? key : section + "." + key;
    try {
      c.set(full, value);
    } catch (const InvalidArgument& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path.string());
}

json Config::to_json() const {
  json j = json::object();
  for (const auto& [k, e] : registry()) j[k] = e.get(*this);
  return j;
}

Config Config::from_json(const json& j) {
  Config c = desk();
  for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
  return c;
}

std::string Config::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [k, e] : registry()) {
    const auto dot = k.find('.');
    const auto sec = k.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    const auto value = e.get(*this);
    const bool quote = value.empty() || value.find_first_of("# ") != std::string::npos;
    os << k.substr(dot + 1) << " = " << (quote ? "\"" + value + "\"" : value) << '\n';
  }
  return os.str();
}

void Config::validate() const {
  synth.validate();
  if (synth_num_test < 1) throw InvalidArgument("config: synth.num_test must be >= 1");
  detector.validate();
  if (static_cast<int>(data.class_names.size()) != detector.num_classes) {
    throw InvalidArgument("config: data.classes lists " + std::to_string(data.class_names.size()) +
                          " names but detector.num_classes is " + std::to_string(detector.num_classes));
  }
  stage1.validate();
  stage2.validate();
  if (stage1.input_size % detector.grid_stride != 0) {
    throw InvalidArgument("config: stage1.input_size must be divisible by detector.stride");
  }
  if (stage2.input_size != stage1.input_size) {
    throw InvalidArgument("config: stage2.input_size must equal stage1.input_size");
  }
  if (esm.backbone != "small" && esm.backbone != "resnet50") {
    throw InvalidArgument("config: esm.backbone must be small or resnet50");
  }
  if (piem.steps < 0 || piem.batch_size < 1 || !(piem.lr > 0)) throw InvalidArgument("config: bad piem settings");
  if (!(eval.metrics.iou_thresh > 0 && eval.metrics.iou_thresh <= 1)) {
    throw InvalidArgument("config: eval.iou_thresh must be in (0,1]");
  }
  if (!(eval.infer.nms_thresh > 0 && eval.infer.nms_thresh < 1)) {
    throw InvalidArgument("config: eval.nms_thresh must be in (0,1)");
  }
  if (eval.random_seeds < 1) throw InvalidArgument("config: eval.random_seeds must be >= 1");
  parse_label_format(data.format);
}

}  // namespace amieod
