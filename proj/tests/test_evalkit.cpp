#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "amieod/errors.hpp"
#include "amieod/evalkit.hpp"
#include "support/eval_oracle.hpp"

using namespace amieod;
namespace fs = std::filesystem;

TEST_SUITE("evalkit") {

TEST_CASE("matching fixtures") {
  const std::vector<Annotation> gt{{{0, 0, 10, 10}, 0}};
  CHECK(match_detections({{{0, 0, 10, 10}, 0, 0.9}}, gt) == std::vector<bool>{true});
  CHECK(match_detections({{{0, 0, 10, 10}, 0, 0.8}, {{0, 0, 10, 10}, 0, 0.9}}, gt) ==
        std::vector<bool>{false, true});
  // IoU = 45/100: [0,4.5] x [0,10] against the GT.
  CHECK(testing::box_iou({0, 0, 4.5, 10}, {0, 0, 10, 10}) == doctest::Approx(0.45));
  CHECK(match_detections({{{0, 0, 4.5, 10}, 0, 0.9}}, gt) == std::vector<bool>{false});
  CHECK(match_detections({{{0, 0, 10, 10}, 1, 0.9}}, gt) == std::vector<bool>{false});
}

TEST_CASE("average precision fixtures") {
  CHECK(average_precision({{0.9, true}, {0.8, true}}, 2) == 1.0);
  CHECK(average_precision({}, 3) == 0.0);
  CHECK(average_precision({{0.9, false}}, 0) == 0.0);
  CHECK(average_precision({{0.9, false}, {0.5, false}}, 2) == 0.0);
  // [TP, FP, TP], num_gt 2. PR points: (0.5, 1), (0.5, 1/2), (1, 2/3).
  // Envelope: recall 0->0.5 at precision 1, 0.5->1 at 2/3.
  const double expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
  const std::vector<ScoredFlag> f{{0.9, true}, {0.8, false}, {0.7, true}};
  CHECK(average_precision(f, 2) == doctest::Approx(expected).epsilon(1e-15));
  CHECK(average_precision(f, 2) == testing::oracle_ap(f, 2));
  CHECK_THROWS_AS(average_precision(f, -1), InvalidArgument);
}

TEST_CASE("average precision is monotone under appended lowest-score flags") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (int i = 0; i < 500; ++i) {
    std::vector<ScoredFlag> f;
    const int n = 1 + static_cast<int>(rng() % 10);
    int tps = 0;
    for (int k = 0; k < n; ++k) {
      const bool tp = rng() % 2;
      tps += tp;
      f.push_back({u(rng), tp});
    }
    const int64_t num_gt = tps + 1 + static_cast<int64_t>(rng() % 3);
    const double base = average_precision(f, num_gt);
    auto with_tp = f;
    with_tp.push_back({0.01, true});
    auto with_fp = f;
    with_fp.push_back({0.01, false});
    CHECK(average_precision(with_tp, num_gt) >= base);
    CHECK(average_precision(with_fp, num_gt) <= base);
  }
}

TEST_CASE("evaluate fixtures") {
  const std::vector<std::vector<Annotation>> gts{{{{0, 0, 10, 10}, 0}, {{20, 20, 30, 35}, 2}},
                                                 {{{5, 5, 15, 15}, 1}}};
  std::vector<std::vector<Detection>> perfect;
  for (const auto& g : gts) {
    perfect.emplace_back();
    for (const auto& a : g) perfect.back().push_back({a.box, a.class_id, 1.0});
  }
  const auto r = evaluate(perfect, gts);
  CHECK(r.map50 == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  const auto none = evaluate({{}, {}}, gts);
  CHECK(none.map50 == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.counts.at(0).fn == 1);
  CHECK_THROWS_AS(evaluate({}, {}), InvalidArgument);
  CHECK_THROWS_AS(evaluate({{}}, gts), InvalidArgument);
}

TEST_CASE("evaluate matches the brute-force evaluator on a hand-built five-image set") {
  const std::vector<std::vector<Annotation>> gts{
      {{{0, 0, 10, 10}, 0}, {{12, 0, 22, 10}, 0}},
      {{{0, 0, 20, 20}, 1}},
      {},
      {{{5, 5, 25, 25}, 2}, {{30, 30, 40, 40}, 1}},
      {{{0, 0, 8, 8}, 0}}};
  const std::vector<std::vector<Detection>> dets{
      {{{0, 0, 10, 10}, 0, 0.95}, {{1, 0, 11, 10}, 0, 0.6}, {{12, 0, 21, 10}, 0, 0.3}},
      {{{2, 2, 20, 20}, 1, 0.7}, {{0, 0, 20, 20}, 2, 0.9}},
      {{{0, 0, 5, 5}, 0, 0.85}},
      {{{6, 6, 25, 26}, 2, 0.5}, {{30, 30, 40, 40}, 1, 0.2}},
      {{{20, 20, 30, 30}, 0, 0.4}}};
  const auto r = evaluate(dets, gts);
  const auto o = testing::oracle_evaluate(dets, gts, 0.5, 0.25);
  CHECK(testing::agrees_exactly(r, o));
  CHECK(r.counts.at(0).tp == 2);
  CHECK(r.counts.at(0).fp == 3);
}

TEST_CASE("evaluate agrees exactly with the brute-force evaluator on random scenes") {
  std::mt19937_64 rng(99);
  int agreed = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s = testing::random_scene(rng);
    const auto r = evaluate(s.dets, s.gts);
    agreed += testing::agrees_exactly(r, testing::oracle_evaluate(s.dets, s.gts, 0.5, 0.25));
  }
  CHECK(agreed == 100);
}

TEST_CASE("map50 does not depend on image order") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    auto s = testing::random_scene(rng);
    const double a = evaluate(s.dets, s.gts).map50;
    std::reverse(s.dets.begin(), s.dets.end());
    std::reverse(s.gts.begin(), s.gts.end());
    CHECK(evaluate(s.dets, s.gts).map50 == a);
  }
}

TEST_CASE("report json round trip and emitted files") {
  std::mt19937_64 rng(8);
  auto s = testing::random_scene(rng);
  while (s.gts[0].empty()) s = testing::random_scene(rng);
  const auto r = evaluate(s.dets, s.gts);
  const auto back = parse_report_json(report_json(r));
  CHECK(std::abs(back.map50 - r.map50) < 1e-9);
  CHECK(std::abs(back.precision - r.precision) < 1e-9);
  CHECK(std::abs(back.recall - r.recall) < 1e-9);
  CHECK(back.per_class_ap.size() == r.per_class_ap.size());
  for (const auto& [c, ap] : r.per_class_ap) CHECK(std::abs(back.per_class_ap.at(c) - ap) < 1e-9);
  for (const auto& [c, k] : r.counts) CHECK(back.counts.at(c).tp == k.tp);
  CHECK_THROWS_AS(parse_report_json(R"({"schema_version": 99})"), UnsupportedVersion);

  const auto dir = fs::temp_directory_path() / "amieod_evalkit_report";
  fs::remove_all(dir);
  const auto files = emit_report(r, dir, false);
  CHECK(files.size() == 1);
  CHECK(files[0].filename() == "report.json");

  const auto log = dir / "log.jsonl";
  std::ofstream(log) << R"({"stage":1,"step":0,"box":1.0,"obj":0.5,"cls":0.4,"dgrl":0.1,"best_counts":[1,2]})" "\n"
                     << R"({"stage":1,"step":1,"box":0.9,"obj":0.4,"cls":0.3,"dgrl":0.05,"best_counts":[2,1]})" "\n";
  const auto plots = plot_loss_log(log, dir / "plots");
  CHECK(plots.size() == 4);
  for (const auto& p : plots) CHECK(fs::exists(p));
  const auto with_plots = emit_report(r, dir / "full", true, log);
  CHECK(with_plots.size() == 1 + 1 + 4);
}

}
