#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "hdpl/gradcheck.hpp"
#include "hdpl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hdpl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct CliOverrides {
  std::string config_path;
  std::string mode;
  std::string kl_granularity;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::int64_t max_steps = 0;
  bool max_steps_set = false;
  std::string output_dir;
  bool dump_latents = false;
  bool json_only = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run configuration file");
    cmd->add_option("--mode", mode, "Model wiring")->check(CLI::IsMember({"baseline", "hybrid"}));
    cmd->add_option("--seed", seed, "Random seed")->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--max-steps", max_steps, "Total optimization steps")
        ->each([&](const std::string&) { max_steps_set = true; });
    cmd->add_option("--output-dir", output_dir, "Directory for metrics and checkpoints");
    cmd->add_flag("--dump-latents", dump_latents, "Write per-layer latent statistics as JSONL");
    cmd->add_option("--kl-granularity", kl_granularity, "KL bounding granularity")
        ->check(CLI::IsMember({"element", "token"}));
    cmd->add_flag("--json", json_only, "Machine-readable output only");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (!mode.empty()) cfg.model.mode = mode == "hybrid" ? ModelMode::kHybrid : ModelMode::kBaseline;
    if (!kl_granularity.empty())
      cfg.model.kl_granularity =
          kl_granularity == "token" ? KlGranularity::kToken : KlGranularity::kElement;
    if (seed_set) cfg.seed = seed;
    if (max_steps_set) cfg.schedule.max_steps = max_steps;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    return cfg;
  }
};

void echo_config(const RunConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir + "/config_resolved.ini", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write resolved config in " + cfg.output_dir);
  f << serialize_config(cfg);
}

double size_mb(std::int64_t params) {
  return static_cast<double>(params) * 4.0 / (1024.0 * 1024.0);
}

TrainState make_state(const RunConfig& cfg) {
  TrainState st;
  st.config = cfg;
  st.model = init_model<float>(cfg.model, cfg.seed);
  st.optimizer = AdamW<float>({cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay});
  st.rng = RngState{cfg.seed, 0};
  return st;
}

// ---- train ----

int cmd_train(const CliOverrides& opts) {
  RunConfig cfg = opts.resolve();
  cfg.model.validate();

  if (cfg.schedule.max_steps == 0) {  // smoke-initialize and stop
    TrainState st = make_state(cfg);
    echo_config(cfg);
    save_checkpoint(st, cfg.output_dir + "/checkpoint_final.bin");
    if (!opts.json_only) std::cout << "max-steps 0: wrote initial checkpoint, nothing to train\n";
    return kExitOk;
  }
  cfg.validate();
  if (cfg.corpus_files.empty()) throw ConfigError("no corpus_files configured");
  // Load data before touching the output directory so a bad path leaves no
  // partial outputs behind.
  Corpus corpus = load_corpus(cfg.corpus_files);
  auto [train, val] = split_corpus(corpus, cfg.val_fraction);

  echo_config(cfg);
  std::ofstream metrics(cfg.output_dir + "/metrics.jsonl", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write metrics in " + cfg.output_dir);

  TrainState st = make_state(cfg);
  double final_val = std::numeric_limits<double>::quiet_NaN();
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) {
    if (r.val_loss) final_val = *r.val_loss;
    if (!opts.json_only) {
      std::cout << "step " << r.step << " loss " << r.train_loss << " aux " << r.aux_loss << " lr "
                << r.lr;
      if (r.val_loss) std::cout << " val " << *r.val_loss;
      std::cout << "\n";
    }
  };
  train_loop(st, train, val, metrics, hooks);

  std::int64_t n_params = count_model_params(cfg.model);
  json summary = {
      {"mode", cfg.model.mode == ModelMode::kHybrid ? "hybrid" : "baseline"},
      {"params", n_params},
      {"size_mb", size_mb(n_params)},
      {"steps", st.step},
      {"min_val_loss", st.best_val},
      {"final_val_loss", final_val},
  };
  std::ofstream(cfg.output_dir + "/summary.json", std::ios::trunc) << summary.dump(2) << "\n";
  if (opts.json_only)
    std::cout << summary.dump() << "\n";
  else
    std::cout << "done: " << n_params << " params (" << std::fixed << std::setprecision(2)
              << size_mb(n_params) << " MB), min val " << st.best_val << ", final val "
              << final_val << "\n";
  return kExitOk;
}

// ---- count-params ----

int cmd_count_params(const CliOverrides& opts) {
  RunConfig cfg = opts.resolve();
  cfg.model.validate();
  auto entries = param_entries(cfg.model);
  std::int64_t total = 0;
  json tensors = json::array();
  for (const auto& e : entries) {
    total += e.count;
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"count", e.count}});
  }
  json out = {
      {"mode", cfg.model.mode == ModelMode::kHybrid ? "hybrid" : "baseline"},
      {"tensors", tensors},
      {"total", total},
      {"total_millions", static_cast<double>(total) / 1e6},
      {"size_mb", size_mb(total)},
  };
  if (opts.json_only) {
    std::cout << out.dump() << "\n";
    return kExitOk;
  }
  for (const auto& e : entries)
    std::cout << std::left << std::setw(32) << e.name << " " << std::setw(16)
              << shape_str(e.shape) << " " << e.count << "\n";
  std::cout << "total " << total << " (" << std::fixed << std::setprecision(2)
            << static_cast<double>(total) / 1e6 << "M params, " << size_mb(total) << " MB)\n";
  return kExitOk;
}

// ---- grad-check ----

int cmd_grad_check(const CliOverrides& opts) {
  RunConfig cfg = opts.resolve();
  cfg.model.validate();
  if (count_model_params(cfg.model) > 200000)
    throw ConfigError("grad-check needs a micro-scale config (finite differences visit every "
                      "parameter); this one has " +
                      std::to_string(count_model_params(cfg.model)) + " parameters");
  const double threshold = 1e-3;
  bool all_pass = true;
  json out = json::array();
  for (auto mode : {ModelMode::kBaseline, ModelMode::kHybrid}) {
    auto mcfg = cfg.model;
    mcfg.mode = mode;
    auto report = grad_check_model(mcfg, cfg.seed, 1, 4);
    bool pass = report.passed(threshold);
    all_pass = all_pass && pass;
    json groups = json::array();
    for (const auto& g : report.groups)
      groups.push_back({{"name", g.name}, {"max_rel_err", g.max_rel_err}});
    out.push_back({{"mode", mode == ModelMode::kHybrid ? "hybrid" : "baseline"},
                   {"max_rel_err", report.max_rel_err},
                   {"worst_group", report.worst_group},
                   {"pass", pass},
                   {"groups", groups}});
    if (!opts.json_only) {
      std::cout << (mode == ModelMode::kHybrid ? "hybrid" : "baseline") << ":\n";
      for (const auto& g : report.groups)
        std::cout << "  " << std::left << std::setw(32) << g.name << " max rel err "
                  << g.max_rel_err << "\n";
      std::cout << "  => " << (pass ? "PASS" : "FAIL") << " (max " << report.max_rel_err
                << " in " << report.worst_group << ", threshold " << threshold << ")\n";
    }
  }
  if (opts.json_only) std::cout << out.dump() << "\n";
  return all_pass ? kExitOk : kExitRuntime;
}

// ---- eval ----

int cmd_eval(const CliOverrides& opts, const std::string& checkpoint_path) {
  TrainState st = load_checkpoint(checkpoint_path);
  RunConfig cfg = st.config;
  if (!opts.output_dir.empty()) cfg.output_dir = opts.output_dir;
  if (cfg.corpus_files.empty()) throw ConfigError("checkpoint config has no corpus_files");
  Corpus corpus = load_corpus(cfg.corpus_files);
  auto [train, val] = split_corpus(corpus, cfg.val_fraction);
  (void)train;

  std::ofstream latents_out;
  if (opts.dump_latents) {
    fs::create_directories(cfg.output_dir);
    latents_out.open(cfg.output_dir + "/latents.jsonl", std::ios::trunc);
    if (!latents_out) throw std::runtime_error("cannot write latents in " + cfg.output_dir);
  }

  double total = 0;
  std::int64_t records = 0;
  for (std::int64_t i = 0; i < cfg.eval_batches; ++i) {
    Batch b = sequential_batch(val, cfg.batch_size, cfg.model.seq_len, i);
    RngState rng{cfg.seed, 0};
    ForwardOptions fwd;
    fwd.training = false;
    fwd.record_latents = opts.dump_latents;
    auto res = model_forward<float>(nullptr, st.model, b.inputs, b.B, b.L, &b.targets, rng, fwd);
    if (res.aux_total.item() != 0.0f)
      throw std::runtime_error("eval-mode forward produced nonzero auxiliary loss");
    total += static_cast<double>(res.ce_loss.item());
    for (const auto& tap : tap_latents(res)) {
      json rec = {{"batch", i},
                  {"layer", tap.layer_id},
                  {"mu", tap.mu.values()},
                  {"logvar", tap.logvar.values()}};
      latents_out << rec.dump() << "\n";
      ++records;
    }
  }
  double val_loss = total / static_cast<double>(cfg.eval_batches);
  json out = {{"val_loss", val_loss},
              {"batches", cfg.eval_batches},
              {"checkpoint", checkpoint_path},
              {"step", st.step}};
  if (opts.dump_latents) out["latent_records"] = records;
  if (opts.json_only)
    std::cout << out.dump() << "\n";
  else {
    std::cout << "val loss " << std::setprecision(17) << val_loss << " over "
              << cfg.eval_batches << " batches (checkpoint step " << st.step << ")\n";
    if (opts.dump_latents) std::cout << records << " latent records written\n";
  }
  return kExitOk;
}

// ---- bench ----

// Per-token multiply-accumulate count for one projection, doubled for the
// backward pass wrt inputs and weights.
std::int64_t dense_flops(std::int64_t din, std::int64_t dout) { return 2 * din * dout; }
std::int64_t hybrid_flops(const ModelConfig& cfg, std::int64_t din, std::int64_t dout) {
  return 2 * (din * dout / cfg.k_groups + 2 * din * cfg.rank + dout * cfg.rank);
}

int cmd_bench(const CliOverrides& opts, int iters) {
  RunConfig cfg = opts.resolve();
  cfg.model.validate();
  std::int64_t B = std::min<std::int64_t>(cfg.batch_size, 4);
  std::int64_t L = std::min<std::int64_t>(cfg.model.seq_len, 128);

  json out;
  out["flops_per_token"] = json::object();
  for (const std::string& proj : {"q", "k", "v", "o", "gate", "up", "down"}) {
    auto [din, dout] = cfg.model.proj_dims(proj);
    json j = {{"dense", dense_flops(din, dout)}};
    if (cfg.model.hybrid_set.count(proj)) j["hybrid"] = hybrid_flops(cfg.model, din, dout);
    out["flops_per_token"][proj] = j;
  }

  double tps[2] = {0, 0};
  int mi = 0;
  for (auto mode : {ModelMode::kBaseline, ModelMode::kHybrid}) {
    auto mcfg = cfg.model;
    mcfg.mode = mode;
    auto model = init_model<float>(mcfg, cfg.seed);
    std::vector<Tensor<float>*> params;
    for_each_param(model, [&](const std::string&, Tensor<float>& t) {
      t.set_requires_grad(true);
      params.push_back(&t);
    });
    RngState data_rng{cfg.seed, 0};
    std::vector<std::int64_t> tokens(B * L), targets(B * L);
    for (auto& t : tokens) t = static_cast<std::int64_t>(next_u64(data_rng) % mcfg.vocab_size);
    for (auto& t : targets) t = static_cast<std::int64_t>(next_u64(data_rng) % mcfg.vocab_size);

    auto pass = [&](std::int64_t step) {
      Tape<float> tape;
      RngState rng = fork(RngState{cfg.seed, 0}, 0x9'0000'0000ull + step);
      ForwardOptions fwd;
      fwd.training = true;
      fwd.record_latents = false;
      auto res = model_forward(&tape, model, tokens, B, L, &targets, rng, fwd);
      for (auto* p : params) p->zero_grad();
      tape.backward(res.total);
    };
    pass(0);  // warm up allocators before timing
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) pass(i + 1);
    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    double tokens_per_sec = static_cast<double>(B * L * iters) / secs;
    tps[mi++] = tokens_per_sec;
    const char* name = mode == ModelMode::kHybrid ? "hybrid" : "baseline";
    out[name] = {{"params", count_model_params(mcfg)},
                 {"tokens_per_sec", tokens_per_sec},
                 {"seconds", secs},
                 {"iters", iters},
                 {"batch", B},
                 {"seq_len", L}};
  }
  out["hybrid_to_baseline_ratio"] = tps[1] / tps[0];

  if (opts.json_only)
    std::cout << out.dump() << "\n";
  else
    std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("HDPL_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"Dual-path linear-operator language-modeling lab"};
  app.require_subcommand(1);

  CliOverrides train_opts, count_opts, grad_opts, eval_opts, bench_opts;
  std::string checkpoint_path;
  int bench_iters = 5;

  train_opts.attach(app.add_subcommand("train", "Train a model and write metrics + checkpoints"));
  count_opts.attach(app.add_subcommand("count-params", "Per-tensor parameter accounting"));
  grad_opts.attach(
      app.add_subcommand("grad-check", "Finite-difference gradient verification (micro configs)"));
  auto* eval_cmd = app.add_subcommand("eval", "Validation loss of a checkpoint");
  eval_opts.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->required();
  auto* bench_cmd = app.add_subcommand("bench", "Dense vs dual-path forward+backward timing");
  bench_opts.attach(bench_cmd);
  bench_cmd->add_option("--iters", bench_iters, "Timed passes per mode")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (app.got_subcommand("train")) return cmd_train(train_opts);
    if (app.got_subcommand("count-params")) return cmd_count_params(count_opts);
    if (app.got_subcommand("grad-check")) return cmd_grad_check(grad_opts);
    if (app.got_subcommand("eval")) return cmd_eval(eval_opts, checkpoint_path);
    if (app.got_subcommand("bench")) return cmd_bench(bench_opts, bench_iters);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
