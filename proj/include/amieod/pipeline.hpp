#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "amieod/checkpoint.hpp"
#include "amieod/config.hpp"
#include "amieod/datakit.hpp"
#include "amieod/detector.hpp"
#include "amieod/enhance.hpp"
#include "amieod/esm.hpp"
#include "amieod/evalkit.hpp"

namespace amieod {

/// Everything a checkpoint can hold. `esm` is null until stage 2.
struct Models {
  ExpertBundle experts{nullptr};
  ToyDetector detector{nullptr};
  Esm esm{nullptr};

  /// Fresh weights drawn from the current torch generator.
  static Models create(const Config& cfg, bool with_esm = false);
  /// Rebuilds the architecture from the checkpoint's config snapshot (or
  /// `cfg` when given) and loads every stored tensor.
  static Models from_checkpoint(const Checkpoint& ckpt, Config* cfg_out = nullptr);

  Checkpoint to_checkpoint(const Config& cfg, int stage, int epoch, const std::string& rng_state = {}) const;
  void eval();
};

struct TrainOptions {
  /// JSON-lines sink; one record per optimizer step.
  std::ostream* log = nullptr;
  /// Stop after this many optimizer steps (< 0: run every epoch).
  int64_t max_steps = -1;
  /// Stage 2 only: fixed pseudo-labels instead of detector-derived ones,
  /// one per sample or a single label for all.
  std::vector<int64_t> forced_labels;
};

struct TrainResult {
  Checkpoint checkpoint;
  Models models;
  std::vector<nlohmann::json> log;
  int64_t steps = 0;
};

/// Letterboxes every sample to input_size (no-op for matching squares).
Dataset prepare_dataset(const Dataset& data, int input_size);

/// Fits the curve enhancer to undo synthetic darkening of the dataset's
/// references (or of its images when none are stored), L1 loss, Adam.
void pretrain_piem(CurveEnhancer& piem, const Dataset& prepared, const Config& cfg, uint64_t seed,
                   std::vector<nlohmann::json>* log = nullptr);

/// Joint training of JIEM + IAEM + detector with DGRL; PIEM is pretrained,
/// then frozen.
TrainResult train_stage1(const Config& cfg, const Dataset& train, const TrainOptions& options = {});

/// Reference run: the detector alone on raw images, same schedule and seed.
TrainResult train_detector_only(const Config& cfg, const Dataset& train, const TrainOptions& options = {});

/// ESM training with DGCE against the frozen stage-1 experts and detector.
TrainResult train_stage2(const Config& cfg, const Dataset& train, const Checkpoint& stage1,
                         const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Routed evaluation
// ---------------------------------------------------------------------------

struct RoutingPolicy {
  enum class Kind { kEsm, kFixed, kRandom };
  Kind kind = Kind::kEsm;
  int fixed = 0;
  uint64_t seed = 0;

  /// "esm", "fixed:<k>", "random:<seed>".
  static RoutingPolicy parse(const std::string& text);
  std::string to_string() const;
};

/// Detection loss and post-NMS detections of every route for every image,
/// plus ESM logits when a selector is present.
struct RouteTable {
  std::vector<std::vector<double>> losses;                        // [image][route]
  std::vector<std::vector<std::vector<Detection>>> detections;    // [image][route]
  std::vector<std::vector<double>> esm_logits;                    // [image][route]
  size_t size() const { return losses.size(); }
};

RouteTable build_route_table(Models& models, const Dataset& prepared, const InferOptions& infer);

std::vector<int> choose_routes(const RouteTable& table, const RoutingPolicy& policy);

struct RoutedEval {
  std::vector<int> routes;
  double mean_loss = 0;
  EvalResult metrics;
};

RoutedEval evaluate_routes(const RouteTable& table, const Dataset& prepared, const std::vector<int>& routes,
                           const EvalOptions& metrics);
RoutedEval evaluate_policy(const RouteTable& table, const Dataset& prepared, const RoutingPolicy& policy,
                           const EvalOptions& metrics);

/// Route with the lowest mean detection loss over a table (ties: lowest).
int best_fixed_route(const RouteTable& table);

/// Selection histogram (overall and per object class) plus mean loss and
/// mAP@50 under ESM, each fixed route and uniform-random routing.
nlohmann::json route_stats(const RouteTable& table, const Dataset& prepared, const EvalConfig& eval);

}  // namespace amieod
