#pragma once

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hdpl/checkpoint.hpp"
#include "hdpl/config.hpp"
#include "hdpl/data.hpp"
#include "hdpl/optimizer.hpp"
#include "hdpl/transformer.hpp"

namespace hdpl {

struct MetricsRecord {
  std::int64_t step = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  double aux_loss = 0;
  double lr = 0;
  double tokens_per_sec = 0;
  double wall_ms = 0;
};

inline nlohmann::json metrics_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["train_loss"] = r.train_loss;
  if (r.val_loss) j["val_loss"] = *r.val_loss;  // omitted when absent, not null
  j["aux_loss"] = r.aux_loss;
  j["lr"] = r.lr;
  j["tokens_per_sec"] = r.tokens_per_sec;
  j["wall_ms"] = r.wall_ms;
  return j;
}

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pure-CE validation sweep in eval mode over fixed sequential blocks.
inline double validation_loss(TrainState& state, const Corpus& val, std::int64_t B,
                              std::int64_t L, std::int64_t n_batches) {
  double total = 0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < n_batches; ++i) {
    Batch b = sequential_batch(val, B, L, i);
    Tape<float> tape;
    RngState rng{state.config.seed, 0};  // unused in eval; no draws consumed
    ForwardOptions opts;
    opts.training = false;
    opts.record_latents = false;
    auto res = model_forward(&tape, state.model, b.inputs, b.B, b.L, &b.targets, rng, opts);
    total += static_cast<double>(res.ce_loss.item());
    ++count;
  }
  return total / static_cast<double>(count);
}

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_metrics;
  std::function<void(const TrainState&, const std::string& path)> on_checkpoint;
};

// One optimization step: forward (training mode), backward, clip, AdamW at
// the scheduled lr. Returns (ce, aux, total).
inline std::array<double, 3> train_step(TrainState& state, const Batch& batch,
                                        std::vector<Tensor<float>*>& params) {
  Tape<float> tape;
  // Streams depend only on (seed, step): resume-exact.
  RngState step_rng = fork(RngState{state.config.seed, 0}, 0x9'0000'0000ull + state.step);
  ForwardOptions opts;
  opts.training = true;
  opts.record_latents = false;
  auto res =
      model_forward(&tape, state.model, batch.inputs, batch.B, batch.L, &batch.targets, step_rng, opts);
  double ce = res.ce_loss.item();
  double aux = res.aux_total.item();
  double total = res.total.item();
  if (!std::isfinite(total))
    throw NonFiniteLossError("non-finite loss at step " + std::to_string(state.step) +
                             ": ce=" + std::to_string(ce) + " aux=" + std::to_string(aux));

  for (auto* p : params) p->zero_grad();
  tape.backward(res.total);

  std::vector<Tensor<float>> plist;
  plist.reserve(params.size());
  for (auto* p : params) plist.push_back(*p);
  if (state.config.grad_clip > 0) clip_grad_norm(plist, state.config.grad_clip);
  state.optimizer.step(plist, lr_at(state.config.schedule, state.step));
  return {ce, aux, total};
}

// Runs from state.step to max_steps. Metrics go to metrics_out as JSONL;
// checkpoints land in output_dir.
inline void train_loop(TrainState& state, const Corpus& train, const Corpus& val,
                       std::ostream& metrics_out, const TrainHooks& hooks = {}) {
  const RunConfig& cfg = state.config;
  std::vector<Tensor<float>*> params;
  for_each_param(state.model, [&](const std::string&, Tensor<float>& t) {
    t.set_requires_grad(true);
    params.push_back(&t);
  });
  std::filesystem::create_directories(cfg.output_dir);

  auto emit = [&](const MetricsRecord& rec) {
    metrics_out << metrics_json(rec).dump() << "\n";
    metrics_out.flush();
    if (hooks.on_metrics) hooks.on_metrics(rec);
  };
  auto save = [&](const std::string& name) {
    std::string path = cfg.output_dir + "/" + name;
    save_checkpoint(state, path);
    if (hooks.on_checkpoint) hooks.on_checkpoint(state, path);
  };

  std::int64_t B = cfg.batch_size, L = cfg.model.seq_len;
  while (state.step < cfg.schedule.max_steps) {
    auto t0 = std::chrono::steady_clock::now();
    RngState batch_rng = fork(RngState{cfg.seed, 0}, 0xb'0000'0000ull + state.step);
    Batch batch = next_batch(train, B, L, batch_rng);
    auto [ce, aux, total] = train_step(state, batch, params);
    auto t1 = std::chrono::steady_clock::now();
    double wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    std::int64_t step_done = state.step;
    state.step += 1;
    state.rng = RngState{cfg.seed, static_cast<std::uint64_t>(state.step)};

    bool log_now = cfg.log_interval > 0 && (step_done % cfg.log_interval == 0 ||
                                            state.step == cfg.schedule.max_steps);
    bool eval_now = cfg.eval_interval > 0 && (state.step % cfg.eval_interval == 0 ||
                                              state.step == cfg.schedule.max_steps);
    std::optional<double> vloss;
    if (eval_now) vloss = validation_loss(state, val, B, L, cfg.eval_batches);

    if (log_now || eval_now) {
      MetricsRecord rec;
      rec.step = step_done;
      rec.train_loss = total;
      rec.val_loss = vloss;
      rec.aux_loss = aux;
      rec.lr = lr_at(cfg.schedule, step_done);
      rec.tokens_per_sec = wall_ms > 0 ? static_cast<double>(B * L) / (wall_ms / 1000.0) : 0.0;
      rec.wall_ms = wall_ms;
      emit(rec);
    }
    if (vloss && *vloss < state.best_val) {
      state.best_val = *vloss;
      save("checkpoint_best.bin");
    }
    if (cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0)
      save("checkpoint_latest.bin");
  }
  save("checkpoint_final.bin");
}

}  // namespace hdpl
