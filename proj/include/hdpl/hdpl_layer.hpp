#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdpl/ops.hpp"
#include "hdpl/rng.hpp"
#include "hdpl/tensor.hpp"

namespace hdpl {

inline constexpr double kLn2 = 0.6931471805599453;

// How the per-element KL map is reduced before the ln 2 clamp: per latent
// element (default) or summed over the rank per token first.
enum class KlGranularity { kElement, kToken };

// Parameters of one hybrid dual-path linear operator: K block weights for
// the local path plus mu/logvar encoders and a decoder for the variational
// global path. No bias terms on any sub-projection.
template <class Scalar>
struct HdplLayer {
  std::int64_t d_in = 0;
  std::int64_t d_out = 0;
  std::int64_t k_groups = 1;
  std::int64_t rank = 1;
  Scalar beta = Scalar(0);

  std::vector<Tensor<Scalar>> w_blocks;  // K blocks, each [d_out/K, d_in/K]
  Tensor<Scalar> w_mu;                   // [R, d_in]
  Tensor<Scalar> w_logvar;               // [R, d_in]
  Tensor<Scalar> w_dec;                  // [d_out, R]
};

template <class Scalar>
struct HdplOutput {
  Tensor<Scalar> y;         // [B, L, d_out]
  Tensor<Scalar> aux_loss;  // scalar; exactly 0 in eval mode
  Tensor<Scalar> mu;        // [B, L, R]
  Tensor<Scalar> logvar;    // [B, L, R]
  Tensor<Scalar> z;         // [B, L, R]
};

inline void check_hdpl_dims(std::int64_t d_in, std::int64_t d_out, std::int64_t k_groups,
                            std::int64_t rank) {
  if (d_in <= 0 || d_out <= 0 || k_groups <= 0)
    throw std::invalid_argument("hdpl dimensions must be positive");
  if (d_in % k_groups != 0 || d_out % k_groups != 0)
    throw std::invalid_argument("d_in=" + std::to_string(d_in) + ", d_out=" +
                                std::to_string(d_out) + " not divisible by K=" +
                                std::to_string(k_groups));
  if (rank < 1 || rank >= d_in)
    throw std::invalid_argument("rank must satisfy 1 <= R < d_in, got R=" +
                                std::to_string(rank) + ", d_in=" + std::to_string(d_in));
}

// d_in*d_out/K + 2*d_in*R + d_out*R stored floats.
inline std::int64_t count_hdpl_params(std::int64_t d_in, std::int64_t d_out,
                                      std::int64_t k_groups, std::int64_t rank) {
  check_hdpl_dims(d_in, d_out, k_groups, rank);
  return d_in * d_out / k_groups + 2 * d_in * rank + d_out * rank;
}

namespace detail {
template <class Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, RngState& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<Scalar>(next_normal(rng) * stddev);
  return t;
}
}  // namespace detail

// Encoders and blocks at stddev 1/sqrt(d_in), decoder at 1/sqrt(R).
template <class Scalar>
HdplLayer<Scalar> init_hdpl(std::int64_t d_in, std::int64_t d_out, std::int64_t k_groups,
                            std::int64_t rank, Scalar beta, RngState& rng) {
  check_hdpl_dims(d_in, d_out, k_groups, rank);
  HdplLayer<Scalar> layer;
  layer.d_in = d_in;
  layer.d_out = d_out;
  layer.k_groups = k_groups;
  layer.rank = rank;
  layer.beta = beta;
  double s_in = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (std::int64_t k = 0; k < k_groups; ++k)
    layer.w_blocks.push_back(
        detail::normal_tensor<Scalar>({d_out / k_groups, d_in / k_groups}, s_in, rng));
  layer.w_mu = detail::normal_tensor<Scalar>({rank, d_in}, s_in, rng);
  layer.w_logvar = detail::normal_tensor<Scalar>({rank, d_in}, s_in, rng);
  layer.w_dec =
      detail::normal_tensor<Scalar>({d_out, rank}, 1.0 / std::sqrt(static_cast<double>(rank)), rng);
  return layer;
}

template <class Scalar, class Fn>
void for_each_hdpl_param(HdplLayer<Scalar>& layer, const std::string& prefix, Fn&& fn) {
  for (std::size_t k = 0; k < layer.w_blocks.size(); ++k)
    fn(prefix + ".block." + std::to_string(k), layer.w_blocks[k]);
  fn(prefix + ".w_mu", layer.w_mu);
  fn(prefix + ".w_logvar", layer.w_logvar);
  fn(prefix + ".w_dec", layer.w_dec);
}

// Local detail path: split the feature axis into K contiguous groups, apply
// each block, concatenate. Identical to multiplying by the expanded
// block-diagonal matrix.
template <class Scalar>
Tensor<Scalar> block_diag_forward(Tape<Scalar>* tape, const HdplLayer<Scalar>& layer,
                                  const Tensor<Scalar>& x) {
  if (x.shape().back() != layer.d_in)
    throw ShapeError("block_diag_forward: input " + shape_str(x.shape()) + " vs d_in " +
                     std::to_string(layer.d_in));
  std::int64_t gin = layer.d_in / layer.k_groups;
  if (layer.k_groups == 1) return matmul(tape, x, transpose(tape, layer.w_blocks[0], 0, 1));
  std::vector<Tensor<Scalar>> outs;
  outs.reserve(layer.w_blocks.size());
  for (std::int64_t k = 0; k < layer.k_groups; ++k) {
    Tensor<Scalar> xk = slice(tape, x, -1, k * gin, gin);
    outs.push_back(matmul(tape, xk, transpose(tape, layer.w_blocks[k], 0, 1)));
  }
  return concat(tape, outs, -1);
}

// Posterior parameters; pure linear maps, no activation.
template <class Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> vae_encode(Tape<Scalar>* tape,
                                                     const HdplLayer<Scalar>& layer,
                                                     const Tensor<Scalar>& x) {
  if (x.shape().back() != layer.d_in)
    throw ShapeError("vae_encode: input " + shape_str(x.shape()) + " vs d_in " +
                     std::to_string(layer.d_in));
  return {matmul(tape, x, transpose(tape, layer.w_mu, 0, 1)),
          matmul(tape, x, transpose(tape, layer.w_logvar, 0, 1))};
}

// Training: z = mu + exp(0.5*logvar) * eps. Eval: z = mu, no draws consumed.
// frozen_eps, when defined, replaces the sampled noise (gradient checks).
template <class Scalar>
Tensor<Scalar> reparameterize(Tape<Scalar>* tape, const Tensor<Scalar>& mu,
                              const Tensor<Scalar>& logvar, RngState& rng, bool training,
                              const Tensor<Scalar>& frozen_eps = {}) {
  if (mu.shape() != logvar.shape())
    throw ShapeError("reparameterize: mu " + shape_str(mu.shape()) + " vs logvar " +
                     shape_str(logvar.shape()));
  if (!training) return mu;
  Tensor<Scalar> eps;
  if (frozen_eps.defined()) {
    if (frozen_eps.shape() != mu.shape()) throw ShapeError("frozen eps shape mismatch");
    eps = frozen_eps;
  } else {
    eps = Tensor<Scalar>(mu.shape());
    for (std::int64_t i = 0; i < eps.size(); ++i)
      eps.data()[i] = static_cast<Scalar>(next_normal(rng));
  }
  Tensor<Scalar> sigma = exp(tape, scale(tape, logvar, Scalar(0.5)));
  return add(tape, mu, mul(tape, sigma, eps));
}

// Gaussian KL to the standard-normal prior, clamped at ln 2 per element (or
// per token), averaged, scaled by beta. Result lies in [0, beta * ln 2].
template <class Scalar>
Tensor<Scalar> bounded_kl(Tape<Scalar>* tape, const Tensor<Scalar>& mu,
                          const Tensor<Scalar>& logvar, Scalar beta,
                          KlGranularity granularity = KlGranularity::kElement) {
  if (mu.shape() != logvar.shape())
    throw ShapeError("bounded_kl: mu " + shape_str(mu.shape()) + " vs logvar " +
                     shape_str(logvar.shape()));
  Tensor<Scalar> term = add_scalar(tape, logvar, Scalar(1));
  term = sub(tape, term, mul(tape, mu, mu));
  term = sub(tape, term, exp(tape, logvar));
  Tensor<Scalar> kl = scale(tape, term, Scalar(-0.5));
  if (granularity == KlGranularity::kToken) kl = sum_lastdim(tape, kl);
  kl = clamp_max(tape, kl, Scalar(kLn2));
  return scale(tape, mean_all(tape, kl), beta);
}

struct HdplForwardOptions {
  bool training = false;
  KlGranularity kl_granularity = KlGranularity::kElement;
};

// Algorithm: y = block_diag(x) + SiLU(z) W_dec^T with z from the variational
// path; aux is the bounded KL when training, exactly 0 otherwise.
// z_override, when defined, replaces z (inference-time latent intervention).
template <class Scalar>
HdplOutput<Scalar> hdpl_forward(Tape<Scalar>* tape, const HdplLayer<Scalar>& layer,
                                const Tensor<Scalar>& x, RngState& rng,
                                const HdplForwardOptions& opts = {},
                                const Tensor<Scalar>& z_override = {},
                                const Tensor<Scalar>& frozen_eps = {}) {
  HdplOutput<Scalar> out;
  Tensor<Scalar> y_local = block_diag_forward(tape, layer, x);
  auto [mu, logvar] = vae_encode(tape, layer, x);
  out.mu = mu;
  out.logvar = logvar;
  if (z_override.defined()) {
    if (z_override.shape() != mu.shape())
      throw ShapeError("z override " + shape_str(z_override.shape()) + " vs latent " +
                       shape_str(mu.shape()));
    out.z = z_override;
  } else {
    out.z = reparameterize(tape, mu, logvar, rng, opts.training, frozen_eps);
  }
  Tensor<Scalar> y_global = matmul(tape, silu(tape, out.z), transpose(tape, layer.w_dec, 0, 1));
  out.y = add(tape, y_local, y_global);
  out.aux_loss = opts.training
                     ? bounded_kl(tape, mu, logvar, layer.beta, opts.kl_granularity)
                     : Tensor<Scalar>::scalar(Scalar(0));
  return out;
}

}  // namespace hdpl
