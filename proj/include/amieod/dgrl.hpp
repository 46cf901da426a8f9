#pragma once

#include <torch/torch.h>

#include <span>
#include <vector>

#include "amieod/core.hpp"

namespace amieod {

/// Detection losses of the n+1 candidate images I_0..I_n for one input.
struct ExpertLossTable {
  std::vector<double> per_expert_total;
  std::vector<LossBreakdown> breakdowns;

  static ExpertLossTable from_totals(std::vector<double> totals);
  size_t size() const { return per_expert_total.size(); }
};

/// Index of the smallest total; ties go to the lowest index.
int select_best(const ExpertLossTable& table);
int select_best(std::span<const double> totals);

/// Per-sample argmin over a K x B table of totals (K candidates, B samples).
std::vector<int64_t> select_best_batch(const torch::Tensor& totals);

/// (1/n) * sum_{k=0..n} mean|I_k - stopgrad(I_b)|, n = images.size() - 1.
/// The selected image is detached, so nothing that produced it receives a
/// gradient from this loss.
torch::Tensor dgrl_loss(const std::vector<torch::Tensor>& images, int64_t best);

/// Batched form: every image is N x C x H x W and `best[j]` selects the
/// target for sample j. Returns the mean over samples.
torch::Tensor dgrl_loss(const std::vector<torch::Tensor>& images, std::span<const int64_t> best);

double dgrl_loss(const std::vector<Image>& images, int best);

/// (1 - alpha) * dgrl + alpha / (n+1) * sum_k per_expert_total[k].
double stage1_loss(double dgrl, const ExpertLossTable& table, double alpha);
torch::Tensor stage1_loss(const torch::Tensor& dgrl, const torch::Tensor& mean_det_per_expert,
                          double alpha);

}  // namespace amieod
