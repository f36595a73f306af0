#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hdpl/transformer.hpp"

namespace hdpl {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0;
  std::int64_t elements = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0;
  std::string worst_group;

  bool passed(double threshold) const { return max_rel_err < threshold; }
};

inline double rel_err(double a, double b) {
  // Floor keeps finite-difference roundoff on near-zero gradients from
  // registering as large relative error.
  double denom = std::max({std::abs(a), std::abs(b), 1e-5});
  return std::abs(a - b) / denom;
}

// Compares reverse-mode gradients of the total loss (CE + aux) against
// 64-bit central finite differences, per parameter group, with the sampling
// noise frozen so the loss is a deterministic function of the weights.
// corrupt_group is a test hook that perturbs one analytic gradient to prove
// the check can fail.
inline GradCheckReport grad_check_model(const ModelConfig& cfg, std::uint64_t seed,
                                        std::int64_t B, std::int64_t L, double h = 1e-5,
                                        const std::string& corrupt_group = "") {
  cfg.validate();
  TransformerModel<double> model = init_model<double>(cfg, seed);

  RngState data_rng{seed, 1000};
  std::vector<std::int64_t> tokens(B * L), targets(B * L);
  for (auto& t : tokens) t = static_cast<std::int64_t>(next_u64(data_rng) % cfg.vocab_size);
  for (auto& t : targets) t = static_cast<std::int64_t>(next_u64(data_rng) % cfg.vocab_size);

  // Freeze epsilon per hybrid layer.
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string b = "blocks." + std::to_string(i);
    for (const std::string& p : {"q", "k", "v", "o"})
      if (cfg.is_hybrid(p)) {
        std::string id = b + ".attn." + p;
        RngState r = fork(RngState{seed, 7}, fnv1a(id.c_str()));
        model.frozen_eps[id] = detail::normal_tensor<double>({B, L, cfg.rank}, 1.0, r);
      }
    for (const std::string& p : {"gate", "up", "down"})
      if (cfg.is_hybrid(p)) {
        std::string id = b + ".ffn." + p;
        RngState r = fork(RngState{seed, 7}, fnv1a(id.c_str()));
        model.frozen_eps[id] = detail::normal_tensor<double>({B, L, cfg.rank}, 1.0, r);
      }
  }

  auto loss_at = [&]() {
    Tape<double>* tape = nullptr;
    RngState rng{seed, 3};
    ForwardOptions opts;
    opts.training = true;
    opts.record_latents = false;
    auto res = model_forward(tape, model, tokens, B, L, &targets, rng, opts);
    return res.total.item();
  };

  std::vector<std::string> names;
  std::vector<Tensor<double>*> params;
  for_each_param(model, [&](const std::string& n, Tensor<double>& t) {
    t.set_requires_grad(true);
    names.push_back(n);
    params.push_back(&t);
  });

  // analytic gradients
  {
    Tape<double> tape;
    RngState rng{seed, 3};
    ForwardOptions opts;
    opts.training = true;
    opts.record_latents = false;
    auto res = model_forward(&tape, model, tokens, B, L, &targets, rng, opts);
    for (auto* p : params) p->zero_grad();
    tape.backward(res.total);
  }
  if (!corrupt_group.empty()) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == corrupt_group) params[i]->grad()[0] += 0.05;
  }

  GradCheckReport report;
  for (std::size_t gi = 0; gi < params.size(); ++gi) {
    Tensor<double>& p = *params[gi];
    GradCheckGroup group;
    group.name = names[gi];
    group.elements = p.size();
    for (std::int64_t i = 0; i < p.size(); ++i) {
      double orig = p.data()[i];
      p.data()[i] = orig + h;
      double lp = loss_at();
      p.data()[i] = orig - h;
      double lm = loss_at();
      p.data()[i] = orig;
      double fd = (lp - lm) / (2 * h);
      double an = p.grad_view().empty() ? 0.0 : p.grad_view()[i];
      group.max_rel_err = std::max(group.max_rel_err, rel_err(fd, an));
    }
    if (group.max_rel_err > report.max_rel_err) {
      report.max_rel_err = group.max_rel_err;
      report.worst_group = group.name;
    }
    report.groups.push_back(group);
  }
  return report;
}

}  // namespace hdpl
