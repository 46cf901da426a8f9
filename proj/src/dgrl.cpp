#include "amieod/dgrl.hpp"

#include <cmath>
#include <numeric>

namespace amieod {

ExpertLossTable ExpertLossTable::from_totals(std::vector<double> totals) {
  ExpertLossTable t;
  t.breakdowns.resize(totals.size());
  for (size_t i = 0; i < totals.size(); ++i) t.breakdowns[i].total = totals[i];
  t.per_expert_total = std::move(totals);
  return t;
}

int select_best(std::span<const double> totals) {
  if (totals.empty()) throw InvalidArgument("select_best: empty loss table");
  int best = 0;
  for (size_t k = 0; k < totals.size(); ++k) {
    if (std::isnan(totals[k])) throw NumericalError("select_best: NaN loss at index " + std::to_string(k));
    if (totals[k] < totals[best]) best = static_cast<int>(k);
  }
  return best;
}

int select_best(const ExpertLossTable& table) { return select_best(table.per_expert_total); }

std::vector<int64_t> select_best_batch(const torch::Tensor& totals) {
  auto t = totals.detach().to(torch::kFloat64).contiguous();
  const auto k = t.size(0);
  const auto b = t.size(1);
  auto acc = t.accessor<double, 2>();
  std::vector<int64_t> best(b);
  std::vector<double> column(k);
  for (int64_t j = 0; j < b; ++j) {
    for (int64_t i = 0; i < k; ++i) column[i] = acc[i][j];
    best[j] = select_best(column);
  }
  return best;
}

namespace {

void check_shapes(const std::vector<torch::Tensor>& images) {
  if (images.size() < 2) throw InvalidArgument("dgrl_loss: need the input plus at least one expert");
  for (const auto& im : images) {
    if (im.sizes() != images.front().sizes()) throw InvalidArgument("dgrl_loss: shape mismatch");
  }
}

}  // namespace

torch::Tensor dgrl_loss(const std::vector<torch::Tensor>& images, int64_t best) {
  check_shapes(images);
  if (best < 0 || best >= static_cast<int64_t>(images.size())) {
    throw InvalidArgument("dgrl_loss: target index out of range");
  }
  auto target = images[best].detach();
  auto sum = torch::zeros({}, images.front().options());
  for (const auto& im : images) sum = sum + (im - target).abs().mean();
  return sum / static_cast<double>(images.size() - 1);
}

torch::Tensor dgrl_loss(const std::vector<torch::Tensor>& images, std::span<const int64_t> best) {
  check_shapes(images);
  const auto n = images.front().size(0);
  if (static_cast<int64_t>(best.size()) != n) {
    throw InvalidArgument("dgrl_loss: need one target index per sample");
  }
  for (auto b : best) {
    if (b < 0 || b >= static_cast<int64_t>(images.size())) {
      throw InvalidArgument("dgrl_loss: target index out of range");
    }
  }
  // Gather the per-sample target from the detached stack.
  auto stacked = torch::stack(images).detach();  // K x N x ...
  auto idx = torch::tensor(std::vector<int64_t>(best.begin(), best.end()), torch::kLong);
  auto target = stacked.index({idx, torch::arange(n)});  // N x ...
  auto sum = torch::zeros({n}, images.front().options());
  for (const auto& im : images) sum = sum + (im - target).abs().flatten(1).mean(1);
  return (sum / static_cast<double>(images.size() - 1)).mean();
}

double dgrl_loss(const std::vector<Image>& images, int best) {
  std::vector<torch::Tensor> ts;
  for (const auto& im : images) ts.push_back(im.tensor());
  torch::NoGradGuard no_grad;
  return dgrl_loss(ts, static_cast<int64_t>(best)).item<double>();
}

double stage1_loss(double dgrl, const ExpertLossTable& table, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("stage1_loss: alpha must be in [0,1]");
  if (table.per_expert_total.empty()) throw InvalidArgument("stage1_loss: empty loss table");
  const double sum =
      std::accumulate(table.per_expert_total.begin(), table.per_expert_total.end(), 0.0);
  return (1.0 - alpha) * dgrl + alpha / static_cast<double>(table.size()) * sum;
}

torch::Tensor stage1_loss(const torch::Tensor& dgrl, const torch::Tensor& mean_det_per_expert,
                          double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("stage1_loss: alpha must be in [0,1]");
  return (1.0 - alpha) * dgrl + alpha * mean_det_per_expert.mean();
}

}  // namespace amieod
