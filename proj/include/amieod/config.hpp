#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "amieod/datakit.hpp"
#include "amieod/detector.hpp"
#include "amieod/enhance.hpp"
#include "amieod/esm.hpp"
#include "amieod/evalkit.hpp"

namespace amieod {

/// Optimizer/schedule settings of one training stage.
struct TrainConfig {
  int stage = 1;
  double lr = 0.01;
  int epochs = 100;
  int batch_size = 8;
  double momentum = 0.937;
  double weight_decay = 0.0005;
  double alpha = 0.2;
  int input_size = 640;
  uint64_t seed = 0;
  bool cosine_lr = false;
  bool hflip = true;

  /// Published first-stage settings (batch 8, lr 0.01, 100 epochs).
  static TrainConfig stage1();
  /// Published second-stage settings (batch 1, lr 0.001, 30 epochs).
  static TrainConfig stage2();
  void validate() const;
};

struct PiemPretrainConfig {
  int steps = 300;
  int batch_size = 8;
  double lr = 1e-3;
};

struct DataConfig {
  std::string root;
  std::string format = "yolo-txt";
  std::vector<std::string> class_names = shape_class_names();
  std::string train_split = "train";
  std::string test_split = "test";
  bool skip_missing_labels = false;

  DatasetSpec spec(const std::string& split) const;
};

struct EvalConfig {
  EvalOptions metrics;
  InferOptions infer;
  /// "esm", "fixed:<k>" or "random:<seed>".
  std::string routing = "esm";
  int random_seeds = 3;
};

/// Whole-program configuration. Text form is a flat TOML subset:
///
///   [stage1]
///   lr = 0.01      # comment
///   hflip = true
///
/// Every value is addressable as "<section>.<key>" for --set overrides.
struct Config {
  DataConfig data;
  SynthConfig synth;
  int synth_num_test = 50;
  DetectorConfig detector;
  ExpertOptions experts;
  EsmOptions esm;
  bool cache_pseudo_labels = false;
  TrainConfig stage1;
  TrainConfig stage2;
  PiemPretrainConfig piem;
  EvalConfig eval;

  /// Desk-scale defaults: 128x128 inputs, 20 / 10 epochs.
  static Config desk();

  static Config parse_text(const std::string& text, const std::string& source = "<config>");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Applies "key=value".
  void apply_override(const std::string& assignment);
  /// Sets every seed (synthetic data, both stages).
  void set_seed(uint64_t seed);

  /// Flat {"section.key": "value"} snapshot; from_json(to_json()) round-trips.
  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);
  /// TOML-subset text of every key.
  std::string to_text() const;

  struct KeyInfo {
    std::string key;
    std::string doc;
  };
  static const std::vector<KeyInfo>& keys();

  void validate() const;
};

}  // namespace amieod
