#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdpl/tensor.hpp"

namespace hdpl {

struct ScheduleConfig {
  double peak_lr = 8e-4;
  double min_lr = 8e-5;
  std::int64_t warmup_steps = 1000;
  std::int64_t max_steps = 20000;

  void validate() const {
    if (!(0 < min_lr && min_lr <= peak_lr))
      throw std::invalid_argument("need 0 < min_lr <= peak_lr");
    if (warmup_steps >= max_steps) throw std::invalid_argument("warmup_steps must be < max_steps");
  }
};

// Linear warmup from 0 to peak, then cosine decay to min_lr; constant min_lr
// past max_steps. Continuous at the warmup boundary.
inline double lr_at(const ScheduleConfig& s, std::int64_t step) {
  if (step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.max_steps) return s.min_lr;
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(s.max_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + std::cos(3.141592653589793 * progress));
}

// AdamW with decoupled weight decay applied before the moment update.
template <class Scalar>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
  };

  AdamW() = default;
  explicit AdamW(Hyper hyper) : hyper_(hyper) {}

  const Hyper& hyper() const { return hyper_; }
  std::int64_t step_count() const { return t_; }

  // Slots are keyed by registration order; call with the same parameter list
  // every step.
  void step(std::vector<Tensor<Scalar>>& params, double lr) {
    if (moments_.empty()) {
      moments_.reserve(params.size());
      for (auto& p : params)
        moments_.push_back({std::vector<Scalar>(p.size(), 0), std::vector<Scalar>(p.size(), 0)});
    }
    if (moments_.size() != params.size())
      throw std::invalid_argument("optimizer slot count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<Scalar>& p = params[pi];
      auto& [m, v] = moments_[pi];
      if (static_cast<std::int64_t>(m.size()) != p.size())
        throw std::invalid_argument("optimizer moment shape mismatch at slot " +
                                    std::to_string(pi));
      const auto& g = p.grad_view();
      for (std::int64_t i = 0; i < p.size(); ++i) {
        Scalar gi = g.empty() ? Scalar(0) : g[i];
        p.data()[i] *= Scalar(1.0 - lr * hyper_.weight_decay);
        m[i] = Scalar(hyper_.beta1) * m[i] + Scalar(1.0 - hyper_.beta1) * gi;
        v[i] = Scalar(hyper_.beta2) * v[i] + Scalar(1.0 - hyper_.beta2) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p.data()[i] -= Scalar(lr * mhat / (std::sqrt(vhat) + hyper_.eps));
      }
    }
  }

  struct Slot {
    std::vector<Scalar> m, v;
  };
  std::vector<Slot>& slots() { return moments_; }
  const std::vector<Slot>& slots() const { return moments_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  Hyper hyper_;
  std::int64_t t_ = 0;
  std::vector<Slot> moments_;
};

// Global-norm gradient clipping; returns the pre-clip norm.
template <class Scalar>
double clip_grad_norm(std::vector<Tensor<Scalar>>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params) {
    const auto& g = p.grad_view();
    for (Scalar gi : g) sq += static_cast<double>(gi) * static_cast<double>(gi);
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    Scalar s = Scalar(max_norm / norm);
    for (auto& p : params)
      if (p.has_grad())
        for (auto& gi : p.grad()) gi *= s;
  }
  return norm;
}

}  // namespace hdpl
