#include "amieod/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>

#include "amieod/checkpoint.hpp"
#include "amieod/config.hpp"
#include "amieod/datakit.hpp"
#include "amieod/evalkit.hpp"
#include "amieod/pipeline.hpp"

namespace amieod::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

Level log_level() {
  const char* env = std::getenv("AMIEOD_LOG");
  if (!env) return Level::kInfo;
  const std::string v(env);
  if (v == "error") return Level::kError;
  if (v == "warn") return Level::kWarn;
  if (v == "debug") return Level::kDebug;
  return Level::kInfo;
}

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string out_dir = "out";
  std::string checkpoint;
  std::string split;
  std::string routing;
  std::string loss_log;
  std::vector<std::string> images;
  bool plots = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  Options opt;
  Config cfg;
  std::ostream& out;
  std::ostream& err;
  Level level;

  void info(const std::string& msg) const {
    if (level >= Level::kInfo) err << "[amieod] " << msg << '\n';
  }
  fs::path out_path(const std::string& name) const {
    fs::create_directories(opt.out_dir);
    return fs::path(opt.out_dir) / name;
  }
};

Config build_config(const Options& opt) {
  Config cfg = opt.config_path.empty() ? Config::desk() : Config::load(opt.config_path);
  for (const auto& o : opt.overrides) {
    try {
      cfg.apply_override(o);
    } catch (const InvalidArgument& e) {
      throw UsageError(std::string("--set: ") + e.what());
    }
  }
  if (opt.seed) cfg.set_seed(*opt.seed);
  cfg.validate();
  return cfg;
}

Dataset load_split(const Context& ctx, const std::string& split) {
  if (ctx.cfg.data.root.empty()) throw InvalidArgument("data.root is not set (use --config or --set data.root=...)");
  if (!fs::exists(ctx.cfg.data.root)) throw InvalidArgument("dataset root not found: " + ctx.cfg.data.root);
  auto data = load_dataset(ctx.cfg.data.spec(split));
  ctx.info("loaded " + std::to_string(data.size()) + " images from split '" + split + "'");
  return data;
}

Checkpoint require_checkpoint(const Context& ctx) {
  if (ctx.opt.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(ctx.opt.checkpoint)) throw InvalidArgument("checkpoint not found: " + ctx.opt.checkpoint);
  return load_checkpoint(ctx.opt.checkpoint);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void write_config_snapshot(const Context& ctx) {
  std::ofstream f(ctx.out_path("config.toml"));
  f << ctx.cfg.to_text();
}

int cmd_synth(Context& ctx) {
  const fs::path root = ctx.cfg.data.root.empty() ? fs::path(ctx.opt.out_dir) : fs::path(ctx.cfg.data.root);
  SynthConfig train = ctx.cfg.synth;
  SynthConfig test = train;
  test.num_images = ctx.cfg.synth_num_test;
  // Distinct stream for the held-out split.
  test.seed = train.seed + 0x5bd1e995ULL;
  const auto names = shape_class_names();
  write_yolo_dataset(synth_generate(train), root, ctx.cfg.data.train_split, names);
  write_yolo_dataset(synth_generate(test), root, ctx.cfg.data.test_split, names);
  ctx.info("wrote " + std::to_string(train.num_images) + " train / " + std::to_string(test.num_images) +
           " test images to " + root.string());
  ctx.out << root.string() << '\n';
  return kExitOk;
}

int cmd_train_stage1(Context& ctx) {
  const auto train = load_split(ctx, ctx.cfg.data.train_split);
  std::ofstream log(ctx.out_path("stage1_log.jsonl"));
  write_config_snapshot(ctx);
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions topt;
  topt.log = &log;
  auto result = train_stage1(ctx.cfg, train, topt);
  const auto path = ctx.out_path("stage1.ckpt");
  save_checkpoint(path, result.checkpoint);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ctx.info("stage 1 done: " + std::to_string(result.steps) + " steps in " + std::to_string(secs) + " s");
  ctx.out << path.string() << '\n';
  return kExitOk;
}

int cmd_train_stage2(Context& ctx) {
  const auto stage1 = require_checkpoint(ctx);
  const auto train = load_split(ctx, ctx.cfg.data.train_split);
  std::ofstream log(ctx.out_path("stage2_log.jsonl"));
  write_config_snapshot(ctx);
  TrainOptions topt;
  topt.log = &log;
  auto result = train_stage2(ctx.cfg, train, stage1, topt);
  const auto path = ctx.out_path("stage2.ckpt");
  save_checkpoint(path, result.checkpoint);
  ctx.info("stage 2 done: " + std::to_string(result.steps) + " steps");
  ctx.out << path.string() << '\n';
  return kExitOk;
}

std::string routing_for(const Context& ctx, const Models& models) {
  std::string r = ctx.opt.routing.empty() ? ctx.cfg.eval.routing : ctx.opt.routing;
  if (r == "esm" && !models.esm) {
    throw InvalidArgument("routing 'esm' needs a stage-2 checkpoint; pass --routing fixed:<k> for stage-1 weights");
  }
  return r;
}

int cmd_eval(Context& ctx) {
  const auto ckpt = require_checkpoint(ctx);
  Models models = Models::from_checkpoint(ckpt);
  const auto policy = RoutingPolicy::parse(routing_for(ctx, models));
  const auto split = ctx.opt.split.empty() ? ctx.cfg.data.test_split : ctx.opt.split;
  const auto data = prepare_dataset(load_split(ctx, split), ctx.cfg.stage1.input_size);
  const auto table = build_route_table(models, data, ctx.cfg.eval.infer);
  const auto r = evaluate_policy(table, data, policy, ctx.cfg.eval.metrics);
  const auto files = emit_report(r.metrics, ctx.opt.out_dir, ctx.opt.plots, ctx.opt.loss_log);
  ctx.info("routing " + policy.to_string() + ": mAP@50 " + std::to_string(r.metrics.map50) + ", mean loss " +
           std::to_string(r.mean_loss));
  for (const auto& f : files) ctx.out << f.string() << '\n';
  return kExitOk;
}

int cmd_route_stats(Context& ctx) {
  const auto ckpt = require_checkpoint(ctx);
  Models models = Models::from_checkpoint(ckpt);
  if (!models.esm) throw InvalidArgument("route-stats needs a stage-2 checkpoint");
  const auto split = ctx.opt.split.empty() ? ctx.cfg.data.test_split : ctx.opt.split;
  const auto data = prepare_dataset(load_split(ctx, split), ctx.cfg.stage1.input_size);
  const auto table = build_route_table(models, data, ctx.cfg.eval.infer);
  const auto stats = route_stats(table, data, ctx.cfg.eval);
  write_json(ctx.out_path("route_stats.json"), stats);
  ctx.out << stats.dump(2) << '\n';
  return kExitOk;
}

int cmd_infer(Context& ctx) {
  if (ctx.opt.images.empty()) throw UsageError("infer needs at least one image path");
  const auto ckpt = require_checkpoint(ctx);
  Models models = Models::from_checkpoint(ckpt);
  models.eval();
  const auto policy = RoutingPolicy::parse(routing_for(ctx, models));
  std::mt19937_64 rng(policy.seed);
  std::uniform_int_distribution<int> pick(0, ExpertBundleImpl::kNumRoutes - 1);
  const int size = ctx.cfg.stage1.input_size;

  json results = json::array();
  for (const auto& path : ctx.opt.images) {
    if (!fs::exists(path)) throw InvalidArgument("image not found: " + path);
    const auto [img, lb] = letterbox(read_image(path), size);
    std::vector<Detection> dets;
    int chosen = 0;
    if (policy.kind == RoutingPolicy::Kind::kEsm) {
      RoutingDecision decision;
      dets = infer(img, models.esm, models.experts, models.detector, ctx.cfg.eval.infer, &decision);
      chosen = decision.chosen;
    } else {
      chosen = policy.kind == RoutingPolicy::Kind::kFixed ? policy.fixed : pick(rng);
      dets = detect_with_route(img, chosen, models.experts, models.detector, ctx.cfg.eval.infer);
    }
    json list = json::array();
    for (const auto& d : dets) {
      const auto b = lb.to_original(d.box);
      const auto& names = ctx.cfg.data.class_names;
      list.push_back({{"class_id", d.class_id},
                      {"class_name", d.class_id < static_cast<int>(names.size()) ? names[d.class_id] : ""},
                      {"score", d.score},
                      {"box", {b.x1, b.y1, b.x2, b.y2}}});
    }
    results.push_back({{"image", path}, {"route", chosen}, {"detections", std::move(list)}});
  }
  const auto out = ctx.out_path("detections.json");
  write_json(out, results);
  ctx.out << out.string() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-expert low-light enhancement and detection"};
  app.name(argv.empty() ? "amieod" : fs::path(argv[0]).filename().string());
  app.require_subcommand(1);

  Options opt;
  auto common = [&opt](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "config file (TOML subset)");
    sub->add_option("--set", opt.overrides, "override one key: section.key=value (repeatable)");
    sub->add_option("--seed", opt.seed, "seed applied to every stochastic component");
    sub->add_option("--out", opt.out_dir, "output directory")->capture_default_str();
  };
  auto with_checkpoint = [&opt](CLI::App* sub) {
    sub->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
  };

  auto* synth = app.add_subcommand("synth", "generate the synthetic dark-shapes dataset");
  common(synth);
  auto* s1 = app.add_subcommand("train-stage1", "joint expert + detector training");
  common(s1);
  auto* s2 = app.add_subcommand("train-stage2", "expert selector training on frozen stage-1 weights");
  common(s2);
  with_checkpoint(s2);
  auto* inf = app.add_subcommand("infer", "detect objects in images");
  common(inf);
  with_checkpoint(inf);
  inf->add_option("--routing", opt.routing, "esm | fixed:<k> | random:<seed>");
  inf->add_option("images", opt.images, "image files");
  auto* ev = app.add_subcommand("eval", "mAP@50 / precision / recall report");
  common(ev);
  with_checkpoint(ev);
  ev->add_option("--routing", opt.routing, "esm | fixed:<k> | random:<seed>");
  ev->add_option("--split", opt.split, "dataset split (default: data.test_split)");
  ev->add_flag("--plots", opt.plots, "also write PR and loss curves");
  ev->add_option("--loss-log", opt.loss_log, "JSON-lines training log to plot");
  auto* rs = app.add_subcommand("route-stats", "expert selection histogram and routing comparison");
  common(rs);
  with_checkpoint(rs);
  rs->add_option("--split", opt.split, "dataset split (default: data.test_split)");

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  if (!args.empty()) args.pop_back();
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const Level level = log_level();
  try {
    Context ctx{opt, build_config(opt), out, err, level};
    if (synth->parsed()) return cmd_synth(ctx);
    if (s1->parsed()) return cmd_train_stage1(ctx);
    if (s2->parsed()) return cmd_train_stage2(ctx);
    if (inf->parsed()) return cmd_infer(ctx);
    if (ev->parsed()) return cmd_eval(ctx);
    if (rs->parsed()) return cmd_route_stats(ctx);
    err << app.help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace amieod::cli
