#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "amieod/core.hpp"

namespace amieod {

struct ClassCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t num_gt = 0;
};

struct EvalResult {
  std::map<int, double> per_class_ap;  // classes with >= 1 GT
  double map50 = 0;
  double precision = 0;
  double recall = 0;
  std::map<int, ClassCounts> counts;
  double conf_thresh = 0.25;
  double iou_thresh = 0.5;
  /// Per-class PR points (recall, precision) at every distinct score.
  std::map<int, std::vector<std::pair<double, double>>> pr_curves;
};

/// Greedy one-to-one matching in descending score order. Returns one flag per
/// input detection (true = TP), in the input order.
std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Annotation>& gts, double iou_thresh = 0.5);

struct ScoredFlag {
  double score;
  bool tp;
};

/// All-points interpolated AP. Detections with equal scores enter the PR
/// curve together.
double average_precision(std::vector<ScoredFlag> flags, int64_t num_gt,
                         std::vector<std::pair<double, double>>* curve = nullptr);

struct EvalOptions {
  double iou_thresh = 0.5;
  double conf_thresh = 0.25;
};

/// dets[i] and gts[i] belong to the same image.
EvalResult evaluate(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<std::vector<Annotation>>& gts, const EvalOptions& options = {});

inline constexpr int kReportSchemaVersion = 1;

std::string report_json(const EvalResult& result);
EvalResult parse_report_json(const std::string& text);

/// Writes <dir>/report.json and, with `plots`, <dir>/pr_curve.png. When a
/// JSON-lines training log is given, also one <dir>/loss_<component>.png per
/// numeric component. Returns the files written.
std::vector<std::filesystem::path> emit_report(const EvalResult& result,
                                               const std::filesystem::path& dir, bool plots,
                                               const std::filesystem::path& loss_log = {});

/// One PNG per numeric loss component found in a JSON-lines log.
std::vector<std::filesystem::path> plot_loss_log(const std::filesystem::path& log,
                                                 const std::filesystem::path& dir);

}  // namespace amieod
