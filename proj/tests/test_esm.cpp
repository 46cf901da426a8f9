#include <doctest.h>

#include <cmath>
#include <random>

#include "amieod/dgrl.hpp"
#include "amieod/esm.hpp"

using namespace amieod;

TEST_SUITE("esm") {

TEST_CASE("esm_forward emits four logits for any input size") {
  torch::manual_seed(1);
  Esm esm;
  esm->eval();
  for (auto [h, w] : {std::pair{32, 32}, {64, 96}, {200, 40}}) {
    const Image im(torch::rand({3, h, w}));
    const auto logits = esm_forward(im, esm);
    CHECK(logits.size() == 4);
    CHECK(logits == esm_forward(im, esm));
  }
  CHECK_THROWS_AS(Esm(EsmOptions{224, "vgg", 16, 4}), InvalidArgument);
  CHECK_NOTHROW(Esm(EsmOptions{32, "small", 16, 4}));
  CHECK_THROWS_AS(Esm(EsmOptions{16, "small", 16, 4}), InvalidArgument);
  CHECK_THROWS_AS(Esm(EsmOptions{32, "resnet50", 16, 4}), InvalidArgument);
}

TEST_CASE("resnet50 backbone option builds and runs") {
  EsmOptions o;
  o.backbone = "resnet50";
  o.input_size = 64;
  Esm esm(o);
  esm->eval();
  CHECK(esm_forward(Image(torch::rand({3, 32, 32})), esm).size() == 4);
}

TEST_CASE("small selector sees global brightness at batch size 1") {
  // batch-1 normalization would map x and 2x to the same features
  torch::manual_seed(5);
  Esm esm;
  esm->train();
  auto x = torch::rand({1, 3, 64, 64}) * 0.3;
  CHECK(!torch::allclose(esm->forward(x), esm->forward(2 * x), 1e-4, 1e-5));
  esm->eval();
  torch::NoGradGuard no_grad;
  CHECK(torch::equal(esm->forward(x), [&] {
    esm->train();
    return esm->forward(x);
  }()));
}

TEST_CASE("zero head weights give zero logits") {
  Esm esm;
  {
    torch::NoGradGuard ng;
    esm->head->weight.zero_();
    esm->head->bias.zero_();
  }
  esm->eval();
  for (double v : esm_forward(Image(torch::rand({3, 48, 48})), esm)) CHECK(v == 0.0);
}

TEST_CASE("route fixtures") {
  CHECK(route(std::vector<double>{0.1, 2.0, -1.0, 0.5}).chosen == 1);
  CHECK(route(std::vector<double>{0.3, 0.3, 0.3, 0.3}).chosen == 0);
  CHECK(route(std::vector<double>{-1, 5, 5, 0}).chosen == 1);
  const auto d = route(std::vector<double>{1, 2, 3, 4});
  double sum = 0;
  for (double p : d.probs) sum += p;
  CHECK(std::abs(sum - 1.0) < 1e-12);
  CHECK_THROWS_AS(route(std::vector<double>{0, NAN, 0, 0}), NumericalError);
  CHECK_THROWS_AS(route(std::vector<double>{}), InvalidArgument);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 5);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> l(4);
    for (auto& v : l) v = n(rng);
    std::vector<double> shifted = l;
    const double c = n(rng) * 100;
    for (auto& v : shifted) v += c;
    CHECK(route(l).chosen == route(shifted).chosen);
  }
}

TEST_CASE("dgce fixtures") {
  for (int b = 0; b < 4; ++b) {
    CHECK(dgce_loss(std::vector<double>{0.7, 0.7, 0.7, 0.7}, b) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  CHECK(dgce_loss(std::vector<double>{0, 0, 30, 0}, 2) < 1e-9);
  CHECK_THROWS_AS(dgce_loss(std::vector<double>{0, 0}, 2), InvalidArgument);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 10);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> l(4);
    for (auto& v : l) v = n(rng);
    CHECK(dgce_loss(l, static_cast<int>(rng() % 4)) >= 0.0);
  }
  // batched tensor form agrees with the scalar form
  auto logits = torch::randn({5, 4}, torch::kFloat64);
  auto labels = torch::tensor({0, 3, 2, 1, 3}, torch::kLong);
  double mean = 0;
  for (int i = 0; i < 5; ++i) {
    auto row = logits[i].contiguous();
    mean += dgce_loss(std::span<const double>(row.data_ptr<double>(), 4), static_cast<int>(labels[i].item<int64_t>()));
  }
  CHECK(dgce_loss(logits, labels).item<double>() == doctest::Approx(mean / 5).epsilon(1e-12));
}

TEST_CASE("pseudo-labels agree with a direct per-route evaluation") {
  torch::manual_seed(6);
  ExpertBundle experts;
  ToyDetector detector;
  experts->eval();
  detector->eval();
  const Image im(torch::rand({3, 64, 64}) * 0.3);
  const std::vector<Annotation> gts{{{8, 8, 30, 30}, 1}};
  std::vector<double> losses;
  {
    torch::NoGradGuard ng;
    for (int k = 0; k < 4; ++k) {
      auto raw = detector->forward(experts->apply(k, im.batch())).squeeze(0);
      losses.push_back(detection_loss(raw, gts, detector->config()).total);
    }
  }
  const int b = assign_pseudo_label(im, gts, experts, detector);
  CHECK(b == select_best(losses));
  CHECK(b == assign_pseudo_label(im, gts, experts, detector));
  auto table = route_losses(im.batch(), {gts}, experts, detector);
  for (int k = 0; k < 4; ++k) CHECK(table[k][0].item<double>() == doctest::Approx(losses[k]).epsilon(1e-5));

  experts->train();
  CHECK_THROWS_AS(assign_pseudo_label(im, gts, experts, detector), InvalidArgument);
}

TEST_CASE("infer with a forced route equals the direct composition") {
  torch::manual_seed(8);
  ExpertBundle experts;
  ToyDetector detector;
  Esm esm;
  experts->eval();
  detector->eval();
  esm->eval();
  const Image im(torch::rand({3, 64, 64}) * 0.4);
  const InferOptions opts{0.0, 0.5};
  for (int k = 0; k < 4; ++k) {
    {
      torch::NoGradGuard ng;
      esm->head->weight.zero_();
      esm->head->bias.zero_();
      esm->head->bias[k] = 10.0;
    }
    RoutingDecision d;
    const auto dets = infer(im, esm, experts, detector, opts, &d);
    CHECK(d.chosen == k);
    torch::NoGradGuard ng;
    auto input = k == 0 ? im.batch() : experts->apply(k, im.batch());
    auto raw = detector->forward(input).squeeze(0);
    const auto direct = nms(decode(raw, opts.conf_thresh, detector->config()), opts.nms_thresh);
    CHECK((dets == direct));
  }
}

}
