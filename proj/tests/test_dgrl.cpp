#include <doctest.h>

#include <cmath>
#include <random>

#include "amieod/dgrl.hpp"
#include "amieod/enhance.hpp"

using namespace amieod;

namespace {

// Literal per-pixel evaluation of the regression loss: nested loops, sum of
// absolute differences divided by the pixel count, then by n.
double brute_dgrl(const std::vector<torch::Tensor>& imgs, int b) {
  const auto t = imgs[b].contiguous();
  const auto c = t.size(0), h = t.size(1), w = t.size(2);
  double total = 0;
  for (const auto& im : imgs) {
    auto x = im.contiguous();
    auto xa = x.accessor<double, 3>();
    auto ta = t.accessor<double, 3>();
    double s = 0;
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) s += std::abs(xa[ch][i][j] - ta[ch][i][j]);
    total += s / static_cast<double>(c * h * w);
  }
  return total / static_cast<double>(imgs.size() - 1);
}

}  // namespace

TEST_SUITE("dgrl") {

TEST_CASE("select_best fixtures") {
  CHECK(select_best(std::vector<double>{0.5, 0.3, 0.7, 0.4}) == 1);
  CHECK(select_best(std::vector<double>{0.4, 0.4, 0.4, 0.4}) == 0);
  CHECK(select_best(std::vector<double>{2.0}) == 0);
  CHECK(select_best(ExpertLossTable::from_totals({0.9, 0.2, 0.2, 0.3})) == 1);
  CHECK_THROWS_AS(select_best(std::vector<double>{0.1, NAN}), NumericalError);
  CHECK_THROWS_AS(select_best(std::vector<double>{}), InvalidArgument);
}

TEST_CASE("select_best is invariant to positive scaling") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 3), scale(1e-3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> t(4);
    for (auto& v : t) v = u(rng);
    const double c = scale(rng);
    std::vector<double> s = t;
    for (auto& v : s) v *= c;
    CHECK(select_best(t) == select_best(s));
  }
}

TEST_CASE("select_best_batch works per column") {
  auto t = torch::tensor({{0.5, 0.1, 0.4}, {0.3, 0.1, 0.9}, {0.7, 0.2, 0.1}, {0.4, 0.3, 0.1}}, torch::kFloat64);
  CHECK(select_best_batch(t) == std::vector<int64_t>{1, 0, 2});
}

TEST_CASE("dgrl fixtures") {
  auto base = torch::rand({3, 8, 8}, torch::kFloat64) * 0.5;
  CHECK(dgrl_loss(std::vector<torch::Tensor>{base, base, base, base}, 2).item<double>() == 0.0);
  // n = 1, b = 0, I_1 = I_0 + 0.1
  CHECK(dgrl_loss(std::vector<torch::Tensor>{base, base + 0.1}, 0).item<double>() ==
        doctest::Approx(0.1).epsilon(1e-12));
  // n = 3, b = 2, others = I_2 + 0.3
  auto i2 = base;
  auto up = base + 0.3;
  CHECK(dgrl_loss(std::vector<torch::Tensor>{up, up, i2, up}, 2).item<double>() ==
        doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(dgrl_loss(std::vector<torch::Tensor>{base, torch::rand({3, 8, 9})}, 0), InvalidArgument);
  CHECK_THROWS_AS(dgrl_loss(std::vector<torch::Tensor>{base, base}, 2), InvalidArgument);
}

TEST_CASE("dgrl matches a literal per-pixel evaluation on 8x8 images") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<torch::Tensor> imgs;
    for (int k = 0; k < 4; ++k) imgs.push_back(torch::rand({3, 8, 8}, torch::kFloat64));
    const int b = static_cast<int>(rng() % 4);
    CHECK(std::abs(dgrl_loss(imgs, b).item<double>() - brute_dgrl(imgs, b)) < 1e-7);
  }
}

TEST_CASE("dgrl is zero only for identical images") {
  auto a = torch::rand({3, 8, 8}, torch::kFloat64);
  auto b = a.clone();
  b[1][3][3] += 0.01;
  CHECK(dgrl_loss(std::vector<torch::Tensor>{a, a, b, a}, 0).item<double>() > 0.0);
  CHECK(dgrl_loss(std::vector<torch::Tensor>{a, a, a, a}, 1).item<double>() == 0.0);
}

TEST_CASE("batched dgrl equals the per-sample average") {
  std::vector<torch::Tensor> imgs;
  for (int k = 0; k < 4; ++k) imgs.push_back(torch::rand({3, 3, 8, 8}, torch::kFloat64));
  const std::vector<int64_t> best{2, 0, 3};
  double expected = 0;
  for (int j = 0; j < 3; ++j) {
    std::vector<torch::Tensor> per;
    for (const auto& im : imgs) per.push_back(im[j]);
    expected += dgrl_loss(per, best[j]).item<double>();
  }
  CHECK(dgrl_loss(imgs, best).item<double>() == doctest::Approx(expected / 3).epsilon(1e-12));
}

TEST_CASE("selected expert receives exactly zero gradient, the others do not") {
  torch::manual_seed(17);
  // Four differentiable "experts" with their own parameters.
  auto x = torch::rand({2, 3, 16, 16}, torch::kFloat64) * 0.5;
  std::vector<torch::Tensor> params;
  std::vector<torch::Tensor> outs;
  for (int k = 0; k < 4; ++k) {
    params.push_back(torch::full({1}, 0.8 + 0.2 * k, torch::kFloat64).requires_grad_());
    outs.push_back(torch::sigmoid(x * 4 - 2) * params.back() + 0.01 * k);
  }
  for (int b = 0; b < 4; ++b) {
    for (auto& p : params) {
      if (p.grad().defined()) p.mutable_grad().zero_();
    }
    std::vector<torch::Tensor> fresh;
    for (int k = 0; k < 4; ++k) fresh.push_back(torch::sigmoid(x * 4 - 2) * params[k] + 0.01 * k);
    dgrl_loss(fresh, b).backward();
    for (int k = 0; k < 4; ++k) {
      const double g = params[k].grad().defined() ? params[k].grad().item<double>() : 0.0;
      if (k == b) {
        CHECK(g == 0.0);
      } else {
        CHECK(g != 0.0);
      }
    }
  }
}

TEST_CASE("stage1_loss arithmetic") {
  CHECK(stage1_loss(1.0, ExpertLossTable::from_totals({0.5, 0.5, 0.5, 0.5}), 0.2) ==
        doctest::Approx(0.9).epsilon(1e-15));
  const auto t = ExpertLossTable::from_totals({0.2, 0.4, 0.6, 0.8});
  CHECK(stage1_loss(3.0, t, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(stage1_loss(3.0, t, 0.0) == 3.0);
  CHECK_THROWS_AS(stage1_loss(1.0, t, 1.5), InvalidArgument);
  CHECK_THROWS_AS(stage1_loss(1.0, t, -0.1), InvalidArgument);
  auto tensor_form = stage1_loss(torch::tensor(3.0, torch::kFloat64),
                                 torch::tensor({0.2, 0.4, 0.6, 0.8}, torch::kFloat64), 0.25);
  CHECK(tensor_form.item<double>() == doctest::Approx(0.75 * 3.0 + 0.25 * 0.5).epsilon(1e-15));
}

}
