#include "amieod/evalkit.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace amieod {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Annotation>& gts, double iou_thresh) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> flags(dets.size(), false);
  for (size_t i : order) {
    double best = -1;
    int best_gt = -1;
    for (size_t j = 0; j < gts.size(); ++j) {
      if (taken[j] || gts[j].class_id != dets[i].class_id) continue;
      const double o = iou(dets[i].box, gts[j].box);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_gt = static_cast<int>(j);
      }
    }
    if (best_gt >= 0) {
      taken[best_gt] = true;
      flags[i] = true;
    }
  }
  return flags;
}

double average_precision(std::vector<ScoredFlag> flags, int64_t num_gt,
                         std::vector<std::pair<double, double>>* curve) {
  if (num_gt < 0) throw InvalidArgument("average_precision: num_gt must be >= 0");
  if (curve) curve->clear();
  if (num_gt == 0) return 0.0;
  std::stable_sort(flags.begin(), flags.end(),
                   [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });

  std::vector<double> rec{0.0}, prec{0.0};
  int64_t tp = 0, fp = 0;
  for (size_t i = 0; i < flags.size(); ++i) {
    (flags[i].tp ? tp : fp) += 1;
    const bool group_end = i + 1 == flags.size() || flags[i + 1].score != flags[i].score;
    if (!group_end) continue;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    if (curve) curve->emplace_back(rec.back(), prec.back());
  }
  rec.push_back(1.0);
  prec.push_back(0.0);
  for (size_t i = prec.size() - 1; i > 0; --i) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0;
  for (size_t i = 0; i + 1 < rec.size(); ++i) ap += (rec[i + 1] - rec[i]) * prec[i + 1];
  return ap;
}

EvalResult evaluate(const std::vector<std::vector<Detection>>& dets,
                    const std::vector<std::vector<Annotation>>& gts, const EvalOptions& options) {
  if (gts.empty()) throw InvalidArgument("evaluate: empty dataset");
  if (dets.size() != gts.size()) throw InvalidArgument("evaluate: detections/annotations size mismatch");

  EvalResult r;
  r.conf_thresh = options.conf_thresh;
  r.iou_thresh = options.iou_thresh;
  std::map<int, std::vector<ScoredFlag>> per_class;
  for (size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) r.counts[g.class_id].num_gt += 1;
    const auto flags = match_detections(dets[i], gts[i], options.iou_thresh);
    for (size_t d = 0; d < dets[i].size(); ++d) {
      const auto& det = dets[i][d];
      per_class[det.class_id].push_back({det.score, flags[d]});
      auto& c = r.counts[det.class_id];
      if (det.score >= options.conf_thresh) (flags[d] ? c.tp : c.fp) += 1;
    }
  }
  int64_t tp = 0, fp = 0, num_gt = 0;
  double ap_sum = 0;
  for (auto& [cls, c] : r.counts) {
    c.fn = c.num_gt - c.tp;
    tp += c.tp;
    fp += c.fp;
    num_gt += c.num_gt;
    if (c.num_gt == 0) continue;
    auto& curve = r.pr_curves[cls];
    const double ap = average_precision(per_class[cls], c.num_gt, &curve);
    r.per_class_ap[cls] = ap;
    ap_sum += ap;
  }
  r.map50 = r.per_class_ap.empty() ? 0.0 : ap_sum / static_cast<double>(r.per_class_ap.size());
  r.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = num_gt > 0 ? static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0;
  return r;
}

std::string report_json(const EvalResult& result) {
  json j;
  j["schema_version"] = kReportSchemaVersion;
  j["map50"] = result.map50;
  j["precision"] = result.precision;
  j["recall"] = result.recall;
  j["conf_thresh"] = result.conf_thresh;
  j["iou_thresh"] = result.iou_thresh;
  json classes = json::array();
  for (const auto& [cls, c] : result.counts) {
    json e{{"class_id", cls}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"num_gt", c.num_gt}};
    if (auto it = result.per_class_ap.find(cls); it != result.per_class_ap.end()) e["ap"] = it->second;
    if (auto it = result.pr_curves.find(cls); it != result.pr_curves.end()) e["pr_curve"] = it->second;
    classes.push_back(std::move(e));
  }
  j["classes"] = std::move(classes);
  return j.dump(2);
}

EvalResult parse_report_json(const std::string& text) {
  const auto j = json::parse(text);
  if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
    throw UnsupportedVersion("report schema version " + j.at("schema_version").dump());
  }
  EvalResult r;
  r.map50 = j.at("map50").get<double>();
  r.precision = j.at("precision").get<double>();
  r.recall = j.at("recall").get<double>();
  r.conf_thresh = j.at("conf_thresh").get<double>();
  r.iou_thresh = j.at("iou_thresh").get<double>();
  for (const auto& e : j.at("classes")) {
    const int cls = e.at("class_id").get<int>();
    r.counts[cls] = {e.at("tp").get<int64_t>(), e.at("fp").get<int64_t>(), e.at("fn").get<int64_t>(),
                     e.at("num_gt").get<int64_t>()};
    if (e.contains("ap")) r.per_class_ap[cls] = e["ap"].get<double>();
    if (e.contains("pr_curve")) r.pr_curves[cls] = e["pr_curve"].get<std::vector<std::pair<double, double>>>();
  }
  return r;
}

namespace {

const cv::Scalar kPalette[] = {{200, 60, 40}, {40, 160, 40}, {40, 60, 200},
                               {160, 40, 160}, {20, 140, 180}, {100, 100, 100}};

struct Plot {
  cv::Mat canvas;
  int left = 60, right = 20, top = 30, bottom = 40;

  explicit Plot(const std::string& title) : canvas(360, 480, CV_8UC3, cv::Scalar(255, 255, 255)) {
    cv::rectangle(canvas, {left, top}, {canvas.cols - right, canvas.rows - bottom}, {0, 0, 0}, 1);
    cv::putText(canvas, title, {left, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0}, 1, cv::LINE_AA);
  }

  cv::Point map(double x, double y, double x0, double x1, double y0, double y1) const {
    const double w = canvas.cols - left - right, h = canvas.rows - top - bottom;
    const double fx = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
    const double fy = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
    return {left + static_cast<int>(fx * w), top + static_cast<int>((1.0 - fy) * h)};
  }

  void axis_labels(const std::string& xl, const std::string& yl, double y0, double y1) {
    cv::putText(canvas, xl, {canvas.cols / 2 - 20, canvas.rows - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45,
                {0, 0, 0}, 1, cv::LINE_AA);
    std::ostringstream lo, hi;
    lo.precision(3);
    hi.precision(3);
    lo << y0;
    hi << y1;
    cv::putText(canvas, hi.str(), {4, top + 10}, cv::FONT_HERSHEY_SIMPLEX, 0.35, {0, 0, 0}, 1, cv::LINE_AA);
    cv::putText(canvas, lo.str(), {4, canvas.rows - bottom}, cv::FONT_HERSHEY_SIMPLEX, 0.35, {0, 0, 0}, 1,
                cv::LINE_AA);
    cv::putText(canvas, yl, {4, canvas.rows / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_AA);
  }

  void save(const fs::path& p) const {
    if (!cv::imwrite(p.string(), canvas)) throw std::runtime_error("cannot write " + p.string());
  }
};

}  // namespace

std::vector<fs::path> plot_loss_log(const fs::path& log, const fs::path& dir) {
  std::ifstream in(log);
  if (!in) throw std::runtime_error("cannot open loss log " + log.string());
  static const std::set<std::string> kSkip{"step", "epoch", "stage", "seed"};
  std::map<std::string, std::vector<double>> series;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    for (const auto& [k, v] : j.items()) {
      if (v.is_number() && !kSkip.count(k)) series[k].push_back(v.get<double>());
    }
  }
  fs::create_directories(dir);
  std::vector<fs::path> written;
  for (const auto& [name, ys] : series) {
    Plot plot("training loss: " + name);
    const auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<cv::Point> pts;
    for (size_t i = 0; i < ys.size(); ++i) {
      pts.push_back(plot.map(static_cast<double>(i), ys[i], 0.0, static_cast<double>(ys.size() - 1), lo, hi));
    }
    cv::polylines(plot.canvas, pts, false, kPalette[0], 1, cv::LINE_AA);
    plot.axis_labels("step", name, lo, hi);
    const auto path = dir / ("loss_" + name + ".png");
    plot.save(path);
    written.push_back(path);
  }
  return written;
}

std::vector<fs::path> emit_report(const EvalResult& result, const fs::path& dir, bool plots,
                                  const fs::path& loss_log) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  const auto report = dir / "report.json";
  {
    std::ofstream out(report);
    if (!out) throw std::runtime_error("cannot write " + report.string());
    out << report_json(result) << '\n';
  }
  written.push_back(report);
  if (!plots) return written;

  Plot plot("precision-recall @ IoU 0.5");
  int idx = 0;
  for (const auto& [cls, curve] : result.pr_curves) {
    const auto& color = kPalette[idx % 6];
    std::vector<cv::Point> pts{plot.map(0, curve.empty() ? 0 : curve.front().second, 0, 1, 0, 1)};
    for (const auto& [r, p] : curve) pts.push_back(plot.map(r, p, 0, 1, 0, 1));
    cv::polylines(plot.canvas, pts, false, color, 2, cv::LINE_AA);
    std::ostringstream label;
    label.precision(3);
    label << "class " << cls << " AP " << result.per_class_ap.at(cls);
    cv::putText(plot.canvas, label.str(), {plot.left + 10, plot.top + 18 + 16 * idx},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, color, 1, cv::LINE_AA);
    ++idx;
  }
  plot.axis_labels("recall", "precision", 0, 1);
  const auto pr = dir / "pr_curve.png";
  plot.save(pr);
  written.push_back(pr);

  if (!loss_log.empty()) {
    auto more = plot_loss_log(loss_log, dir);
    written.insert(written.end(), more.begin(), more.end());
  }
  return written;
}

}  // namespace amieod
