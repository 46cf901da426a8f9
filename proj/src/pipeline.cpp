#include "amieod/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "amieod/dgrl.hpp"

namespace amieod {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

Models Models::create(const Config& cfg, bool with_esm) {
  Models m;
  m.experts = ExpertBundle(cfg.experts);
  m.detector = ToyDetector(cfg.detector);
  if (with_esm) m.esm = Esm(cfg.esm);
  return m;
}

Models Models::from_checkpoint(const Checkpoint& ckpt, Config* cfg_out) {
  const Config cfg = Config::from_json(ckpt.config);
  Models m = create(cfg, ckpt.has_prefix("esm."));
  import_module(ckpt, "experts.", *m.experts);
  import_module(ckpt, "detector.", *m.detector);
  if (m.esm) import_module(ckpt, "esm.", *m.esm);
  m.experts->piem->set_frozen(true);
  if (cfg_out) *cfg_out = cfg;
  return m;
}

Checkpoint Models::to_checkpoint(const Config& cfg, int stage, int epoch, const std::string& rng_state) const {
  Checkpoint c;
  c.stage = stage;
  c.epoch = epoch;
  c.rng_state = rng_state;
  c.config = cfg.to_json();
  export_module(c, "experts.", *experts);
  export_module(c, "detector.", *detector);
  if (esm) export_module(c, "esm.", *esm);
  return c;
}

void Models::eval() {
  experts->eval();
  detector->eval();
  if (esm) esm->eval();
}

// ---------------------------------------------------------------------------
// Shared training plumbing
// ---------------------------------------------------------------------------

namespace {

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

struct Batch {
  torch::Tensor images;
  std::vector<std::vector<Annotation>> gts;
  std::vector<size_t> indices;
};

Batch make_batch(const Dataset& data, const std::vector<size_t>& order, size_t begin, size_t end, bool hflip_aug,
                 std::mt19937_64& rng) {
  Batch b;
  std::vector<torch::Tensor> imgs;
  for (size_t i = begin; i < end; ++i) {
    const Sample& s = data[order[i]];
    const bool flip = hflip_aug && std::bernoulli_distribution(0.5)(rng);
    if (flip) {
      Sample f = hflip(s);
      imgs.push_back(f.image.tensor());
      b.gts.push_back(std::move(f.annotations));
    } else {
      imgs.push_back(s.image.tensor());
      b.gts.push_back(s.annotations);
    }
    b.indices.push_back(order[i]);
  }
  b.images = torch::stack(imgs);
  return b;
}

double lr_at(const TrainConfig& t, int64_t step, int64_t total_steps) {
  if (!t.cosine_lr || total_steps <= 1) return t.lr;
  return 0.5 * t.lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void set_lr(torch::optim::SGD& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
}

torch::optim::SGD make_sgd(std::vector<torch::Tensor> params, const TrainConfig& t) {
  return torch::optim::SGD(std::move(params), torch::optim::SGDOptions(t.lr)
                                                  .momentum(t.momentum)
                                                  .weight_decay(t.weight_decay));
}

void emit(const json& record, const TrainOptions& options, TrainResult& result) {
  if (options.log) *options.log << record.dump() << '\n';
  result.log.push_back(record);
}

double item(const torch::Tensor& t) { return t.item<double>(); }

void check_dataset(const Dataset& data, const char* where) {
  if (data.empty()) throw InvalidArgument(std::string(where) + ": dataset is empty");
}

// Stage-1 style loop shared by the full model and the detector-only reference.
TrainResult run_detection_training(const Config& cfg, const Dataset& train, const TrainOptions& options,
                                   bool with_experts) {
  const TrainConfig& t = cfg.stage1;
  if (t.stage != 1) throw InvalidArgument("train_stage1: config stage must be 1");
  t.validate();
  check_dataset(train, "train_stage1");
  torch::set_num_threads(1);
  torch::manual_seed(t.seed);
  std::mt19937_64 rng(t.seed);

  const Dataset data = prepare_dataset(train, t.input_size);
  TrainResult result;
  result.models = Models::create(cfg);
  Models& m = result.models;

  if (with_experts) {
    std::vector<json> pre_log;
    pretrain_piem(m.experts->piem, data, cfg, t.seed ^ 0x9e3779b97f4a7c15ULL, &pre_log);
    for (auto& r : pre_log) emit(r, options, result);
    copy_weights(*m.experts->jiem, *m.experts->piem);
  }

  auto params = m.detector->parameters();
  if (with_experts) {
    for (auto& p : m.experts->trainable_parameters()) params.push_back(p);
  }
  auto opt = make_sgd(params, t);

  const size_t n = data.size();
  const int64_t steps_per_epoch = static_cast<int64_t>((n + t.batch_size - 1) / t.batch_size);
  const int64_t total_steps = steps_per_epoch * t.epochs;
  std::vector<size_t> order(n);
  int epoch = 0;
  int64_t step = 0;
  const int routes = with_experts ? ExpertBundleImpl::kNumRoutes : 1;

  m.experts->train();
  m.detector->train();
  for (epoch = 0; epoch < t.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t begin = 0; begin < n; begin += t.batch_size) {
      if (options.max_steps >= 0 && step >= options.max_steps) break;
      const size_t end = std::min(n, begin + static_cast<size_t>(t.batch_size));
      Batch b = make_batch(data, order, begin, end, t.hflip, rng);
      const int64_t bs = b.images.size(0);

      std::vector<torch::Tensor> outs =
          with_experts ? m.experts->forward(b.images) : std::vector<torch::Tensor>{b.images};
      for (size_t k = 1; k < outs.size(); ++k) check_finite(outs[k], "stage1/expert_" + std::to_string(k));
      std::vector<std::vector<Annotation>> all_gts;
      for (int k = 0; k < routes; ++k) all_gts.insert(all_gts.end(), b.gts.begin(), b.gts.end());
      auto raw = m.detector->forward(torch::cat(outs));
      check_finite(raw, "stage1/detector");
      const DetectionLoss det = detection_loss(raw, all_gts, cfg.detector);
      auto totals = det.total.view({routes, bs});

      json record{{"stage", 1}, {"epoch", epoch + 1}, {"step", step + 1}};
      torch::Tensor loss;
      if (with_experts) {
        const auto best = select_best_batch(totals.detach());
        auto dgrl = dgrl_loss(outs, best);
        loss = stage1_loss(dgrl, totals.mean(1), t.alpha);
        record["dgrl"] = item(dgrl);
        std::array<int64_t, ExpertBundleImpl::kNumRoutes> counts{};
        for (auto v : best) counts[v] += 1;
        record["best_counts"] = counts;
      } else {
        loss = totals.mean();
      }
      record["box"] = item(det.box.mean());
      record["obj"] = item(det.obj.mean());
      record["cls"] = item(det.cls.mean());
      record["det"] = item(det.total.mean());
      record["total"] = item(loss);
      if (!std::isfinite(record["total"].get<double>())) {
        throw NumericalError("stage1: non-finite loss at epoch " + std::to_string(epoch + 1) + " step " +
                             std::to_string(step + 1) + " (det " + record["det"].dump() + ")");
      }

      const double lr = lr_at(t, step, total_steps);
      set_lr(opt, lr);
      record["lr"] = lr;
      opt.zero_grad();
      // The logged value is per image; the step uses the batch sum, as
      // YOLO-family trainers do.
      (loss * static_cast<double>(bs)).backward();
      opt.step();
      ++step;
      emit(record, options, result);
    }
    if (options.max_steps >= 0 && step >= options.max_steps) {
      ++epoch;
      break;
    }
  }
  m.eval();
  result.steps = step;
  result.checkpoint = m.to_checkpoint(cfg, 1, std::min(epoch, t.epochs), rng_text(rng));
  return result;
}

}  // namespace

Dataset prepare_dataset(const Dataset& data, int input_size) {
  Dataset out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(letterbox(s, input_size));
  return out;
}

void pretrain_piem(CurveEnhancer& piem, const Dataset& prepared, const Config& cfg, uint64_t seed,
                   std::vector<json>* log) {
  check_dataset(prepared, "pretrain_piem");
  piem->set_frozen(false);
  piem->train();
  std::mt19937_64 rng(seed);
  torch::optim::Adam opt(piem->parameters(), torch::optim::AdamOptions(cfg.piem.lr));
  std::uniform_int_distribution<size_t> pick(0, prepared.size() - 1);
  std::uniform_real_distribution<double> gamma(cfg.synth.gamma_lo, cfg.synth.gamma_hi);
  std::uniform_real_distribution<double> gain(cfg.synth.gain_lo, cfg.synth.gain_hi);

  for (int step = 0; step < cfg.piem.steps; ++step) {
    std::vector<torch::Tensor> dark, ref;
    for (int i = 0; i < cfg.piem.batch_size; ++i) {
      const Sample& s = prepared[pick(rng)];
      auto target = s.reference.defined() ? s.reference : s.image.tensor();
      const double g = gamma(rng), a = gain(rng);
      dark.push_back(darken(target.unsqueeze(0), g, a, cfg.synth.noise_sigma, rng()).squeeze(0));
      ref.push_back(target);
    }
    auto pred = piem->forward(torch::stack(dark));
    auto loss = (pred - torch::stack(ref)).abs().mean();
    check_finite(loss, "pretrain_piem/loss");
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (log) log->push_back({{"stage", 0}, {"step", step + 1}, {"piem_l1", loss.item<double>()}});
  }
  piem->set_frozen(true);
}

TrainResult train_stage1(const Config& cfg, const Dataset& train, const TrainOptions& options) {
  return run_detection_training(cfg, train, options, true);
}

TrainResult train_detector_only(const Config& cfg, const Dataset& train, const TrainOptions& options) {
  return run_detection_training(cfg, train, options, false);
}

TrainResult train_stage2(const Config& cfg, const Dataset& train, const Checkpoint& stage1,
                         const TrainOptions& options) {
  const TrainConfig& t = cfg.stage2;
  if (t.stage != 2) throw InvalidArgument("train_stage2: config stage must be 2");
  t.validate();
  check_dataset(train, "train_stage2");
  if (!stage1.has_prefix("experts.") || !stage1.has_prefix("detector.")) {
    throw InvalidArgument("train_stage2: checkpoint lacks expert or detector weights");
  }
  if (!options.forced_labels.empty() && options.forced_labels.size() != 1 &&
      options.forced_labels.size() != train.size()) {
    throw InvalidArgument("train_stage2: forced_labels must hold 1 or dataset-size entries");
  }
  torch::set_num_threads(1);

  TrainResult result;
  result.models = Models::from_checkpoint(stage1);
  Models& m = result.models;
  m.experts->eval();
  m.detector->eval();
  for (auto& p : m.experts->parameters()) p.set_requires_grad(false);
  for (auto& p : m.detector->parameters()) p.set_requires_grad(false);
  const uint64_t frozen_before = weights_hash(*m.experts) ^ (weights_hash(*m.detector) * 31);

  torch::manual_seed(t.seed);
  std::mt19937_64 rng(t.seed);
  m.esm = Esm(cfg.esm);
  m.esm->train();
  auto opt = make_sgd(m.esm->parameters(), t);

  const Dataset data = prepare_dataset(train, t.input_size);
  const size_t n = data.size();

  std::vector<int64_t> cached;
  if (!options.forced_labels.empty()) {
    for (size_t i = 0; i < n; ++i) {
      cached.push_back(options.forced_labels.size() == 1 ? options.forced_labels[0] : options.forced_labels[i]);
    }
  } else if (cfg.cache_pseudo_labels) {
    constexpr size_t kChunk = 16;
    for (size_t begin = 0; begin < n; begin += kChunk) {
      std::vector<torch::Tensor> imgs;
      std::vector<std::vector<Annotation>> gts;
      for (size_t i = begin; i < std::min(n, begin + kChunk); ++i) {
        imgs.push_back(data[i].image.tensor());
        gts.push_back(data[i].annotations);
      }
      auto labels = assign_pseudo_labels(torch::stack(imgs), gts, m.experts, m.detector);
      cached.insert(cached.end(), labels.begin(), labels.end());
    }
  }
  // A flipped image may prefer another expert, so augmentation is only
  // allowed while labels are computed on the fly.
  const bool flip = t.hflip && cached.empty();

  const int64_t steps_per_epoch = static_cast<int64_t>((n + t.batch_size - 1) / t.batch_size);
  const int64_t total_steps = steps_per_epoch * t.epochs;
  std::vector<size_t> order(n);
  int epoch = 0;
  int64_t step = 0;
  for (epoch = 0; epoch < t.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t begin = 0; begin < n; begin += t.batch_size) {
      if (options.max_steps >= 0 && step >= options.max_steps) break;
      const size_t end = std::min(n, begin + static_cast<size_t>(t.batch_size));
      Batch b = make_batch(data, order, begin, end, flip, rng);
      std::vector<int64_t> labels;
      if (cached.empty()) {
        labels = assign_pseudo_labels(b.images, b.gts, m.experts, m.detector);
      } else {
        for (size_t idx : b.indices) labels.push_back(cached[idx]);
      }
      auto logits = m.esm->forward(b.images);
      check_finite(logits, "stage2/esm");
      auto target = torch::tensor(labels, torch::kInt64);
      auto loss = dgce_loss(logits, target);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw NumericalError("stage2: non-finite DGCE at epoch " + std::to_string(epoch + 1) + " step " +
                             std::to_string(step + 1));
      }
      const double lr = lr_at(t, step, total_steps);
      set_lr(opt, lr);
      opt.zero_grad();
      loss.backward();
      opt.step();
      ++step;

      const auto pred = logits.detach().argmax(1);
      std::array<int64_t, ExpertBundleImpl::kNumRoutes> counts{};
      for (auto v : labels) counts[v] += 1;
      json record{{"stage", 2},
                  {"epoch", epoch + 1},
                  {"step", step},
                  {"dgce", value},
                  {"accuracy", pred.eq(target).to(torch::kFloat64).mean().item<double>()},
                  {"label_counts", counts},
                  {"lr", lr}};
      emit(record, options, result);
    }
    if (options.max_steps >= 0 && step >= options.max_steps) {
      ++epoch;
      break;
    }
  }
  m.eval();
  if ((weights_hash(*m.experts) ^ (weights_hash(*m.detector) * 31)) != frozen_before) {
    throw std::logic_error("train_stage2: frozen expert/detector weights changed");
  }
  result.steps = step;
  result.checkpoint = m.to_checkpoint(cfg, 2, std::min(epoch, t.epochs), rng_text(rng));
  return result;
}

// ---------------------------------------------------------------------------
// Routed evaluation
// ---------------------------------------------------------------------------

RoutingPolicy RoutingPolicy::parse(const std::string& text) {
  RoutingPolicy p;
  const auto colon = text.find(':');
  const auto head = text.substr(0, colon);
  const auto arg = colon == std::string::npos ? std::string{} : text.substr(colon + 1);
  try {
    if (head == "esm" && arg.empty()) {
      p.kind = Kind::kEsm;
    } else if (head == "fixed" && !arg.empty()) {
      p.kind = Kind::kFixed;
      p.fixed = std::stoi(arg);
      if (p.fixed < 0 || p.fixed >= ExpertBundleImpl::kNumRoutes) throw InvalidArgument("route out of range");
    } else if (head == "random") {
      p.kind = Kind::kRandom;
      p.seed = arg.empty() ? 0 : std::stoull(arg);
    } else {
      throw InvalidArgument("unknown policy");
    }
  } catch (const std::logic_error&) {
    throw InvalidArgument("routing policy must be esm, fixed:<0-3> or random:<seed>, got '" + text + "'");
  }
  return p;
}

std::string RoutingPolicy::to_string() const {
  switch (kind) {
    case Kind::kEsm: return "esm";
    case Kind::kFixed: return "fixed:" + std::to_string(fixed);
    case Kind::kRandom: return "random:" + std::to_string(seed);
  }
  return {};
}

RouteTable build_route_table(Models& models, const Dataset& prepared, const InferOptions& infer) {
  check_dataset(prepared, "build_route_table");
  torch::NoGradGuard no_grad;
  models.eval();
  const auto& dcfg = models.detector->config();
  constexpr int K = ExpertBundleImpl::kNumRoutes;
  constexpr size_t kChunk = 16;
  RouteTable table;
  for (size_t begin = 0; begin < prepared.size(); begin += kChunk) {
    const size_t end = std::min(prepared.size(), begin + kChunk);
    std::vector<torch::Tensor> imgs;
    std::vector<std::vector<Annotation>> gts;
    for (size_t i = begin; i < end; ++i) {
      imgs.push_back(prepared[i].image.tensor());
      gts.push_back(prepared[i].annotations);
    }
    const auto x = torch::stack(imgs);
    const auto bs = static_cast<int64_t>(end - begin);
    std::vector<std::vector<Annotation>> all_gts;
    for (int k = 0; k < K; ++k) all_gts.insert(all_gts.end(), gts.begin(), gts.end());
    auto raw = models.detector->forward(torch::cat(models.experts->forward(x)));
    check_finite(raw, "route_table/detector");
    auto totals = detection_loss(raw, all_gts, dcfg).total.view({K, bs}).to(torch::kFloat64).contiguous();
    torch::Tensor logits;
    if (models.esm) logits = models.esm->forward(x).to(torch::kFloat64).contiguous();
    for (int64_t j = 0; j < bs; ++j) {
      std::vector<double> losses(K);
      std::vector<std::vector<Detection>> dets(K);
      for (int k = 0; k < K; ++k) {
        losses[k] = totals[k][j].item<double>();
        dets[k] = nms(decode(raw[k * bs + j], infer.conf_thresh, dcfg), infer.nms_thresh);
      }
      table.losses.push_back(std::move(losses));
      table.detections.push_back(std::move(dets));
      if (logits.defined()) {
        auto row = logits[j];
        table.esm_logits.emplace_back(row.data_ptr<double>(), row.data_ptr<double>() + K);
      }
    }
  }
  return table;
}

std::vector<int> choose_routes(const RouteTable& table, const RoutingPolicy& policy) {
  std::vector<int> routes(table.size());
  switch (policy.kind) {
    case RoutingPolicy::Kind::kEsm:
      if (table.esm_logits.size() != table.size()) throw InvalidArgument("esm routing needs a stage-2 checkpoint");
      for (size_t i = 0; i < routes.size(); ++i) routes[i] = route(table.esm_logits[i]).chosen;
      break;
    case RoutingPolicy::Kind::kFixed:
      std::fill(routes.begin(), routes.end(), policy.fixed);
      break;
    case RoutingPolicy::Kind::kRandom: {
      std::mt19937_64 rng(policy.seed);
      std::uniform_int_distribution<int> pick(0, ExpertBundleImpl::kNumRoutes - 1);
      for (auto& r : routes) r = pick(rng);
      break;
    }
  }
  return routes;
}

RoutedEval evaluate_routes(const RouteTable& table, const Dataset& prepared, const std::vector<int>& routes,
                           const EvalOptions& metrics) {
  if (routes.size() != table.size() || prepared.size() != table.size()) {
    throw InvalidArgument("evaluate_routes: size mismatch");
  }
  RoutedEval r;
  r.routes = routes;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  double sum = 0;
  for (size_t i = 0; i < routes.size(); ++i) {
    sum += table.losses[i].at(routes[i]);
    dets.push_back(table.detections[i].at(routes[i]));
    gts.push_back(prepared[i].annotations);
  }
  r.mean_loss = sum / static_cast<double>(routes.size());
  r.metrics = evaluate(dets, gts, metrics);
  return r;
}

RoutedEval evaluate_policy(const RouteTable& table, const Dataset& prepared, const RoutingPolicy& policy,
                           const EvalOptions& metrics) {
  return evaluate_routes(table, prepared, choose_routes(table, policy), metrics);
}

int best_fixed_route(const RouteTable& table) {
  if (table.size() == 0) throw InvalidArgument("best_fixed_route: empty table");
  int best = 0;
  double best_loss = 0;
  for (int k = 0; k < ExpertBundleImpl::kNumRoutes; ++k) {
    double sum = 0;
    for (const auto& row : table.losses) sum += row[k];
    if (k == 0 || sum < best_loss) {
      best = k;
      best_loss = sum;
    }
  }
  return best;
}

json route_stats(const RouteTable& table, const Dataset& prepared, const EvalConfig& eval) {
  constexpr int K = ExpertBundleImpl::kNumRoutes;
  json out;
  out["num_images"] = table.size();
  out["routes"] = {"original", "piem", "jiem", "iaem"};

  auto summarize = [&](const RoutedEval& r) {
    return json{{"mean_loss", r.mean_loss}, {"map50", r.metrics.map50}};
  };

  std::vector<int64_t> oracle(K, 0);
  for (const auto& row : table.losses) oracle[select_best(row)] += 1;
  out["oracle_counts"] = oracle;

  if (!table.esm_logits.empty()) {
    const auto r = evaluate_policy(table, prepared, RoutingPolicy{}, eval.metrics);
    std::vector<int64_t> counts(K, 0);
    std::map<std::string, std::vector<int64_t>> per_class;
    for (size_t i = 0; i < r.routes.size(); ++i) {
      counts[r.routes[i]] += 1;
      std::set<int> classes;
      for (const auto& a : prepared[i].annotations) classes.insert(a.class_id);
      for (int c : classes) {
        auto& v = per_class[std::to_string(c)];
        v.resize(K, 0);
        v[r.routes[i]] += 1;
      }
    }
    out["selection_counts"] = counts;
    out["selection_by_class"] = per_class;
    out["esm"] = summarize(r);
  }

  json fixed = json::array();
  for (int k = 0; k < K; ++k) {
    RoutingPolicy p;
    p.kind = RoutingPolicy::Kind::kFixed;
    p.fixed = k;
    fixed.push_back(summarize(evaluate_policy(table, prepared, p, eval.metrics)));
  }
  out["fixed"] = std::move(fixed);

  json random = json::array();
  double loss_sum = 0, map_sum = 0;
  for (int s = 0; s < eval.random_seeds; ++s) {
    RoutingPolicy p;
    p.kind = RoutingPolicy::Kind::kRandom;
    p.seed = static_cast<uint64_t>(s);
    const auto r = evaluate_policy(table, prepared, p, eval.metrics);
    loss_sum += r.mean_loss;
    map_sum += r.metrics.map50;
    auto j = summarize(r);
    j["seed"] = s;
    random.push_back(std::move(j));
  }
  out["random"] = std::move(random);
  out["random_mean"] = {{"mean_loss", loss_sum / eval.random_seeds}, {"map50", map_sum / eval.random_seeds}};
  return out;
}

}  // namespace amieod
