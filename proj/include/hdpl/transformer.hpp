#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hdpl/hdpl_layer.hpp"
#include "hdpl/ops.hpp"
#include "hdpl/rng.hpp"
#include "hdpl/tensor.hpp"

namespace hdpl {

enum class ModelMode { kBaseline, kHybrid };

inline const std::set<std::string>& all_projection_names() {
  static const std::set<std::string> names = {"q", "k", "v", "o", "gate", "up", "down"};
  return names;
}

struct ModelConfig {
  std::int64_t d_model = 512;
  std::int64_t n_layers = 4;
  std::int64_t n_heads = 8;
  std::int64_t head_dim = 64;
  std::int64_t d_hidden = 2048;
  std::int64_t vocab_size = 49152;
  std::int64_t seq_len = 2048;
  std::int64_t rank = 128;
  std::int64_t k_groups = 8;
  double beta = 0.001;
  std::set<std::string> hybrid_set = {"q", "k", "v", "gate", "up"};
  ModelMode mode = ModelMode::kHybrid;
  KlGranularity kl_granularity = KlGranularity::kElement;
  double norm_eps = 1e-5;
  double rope_base = 10000.0;

  std::set<std::string> effective_hybrid_set() const {
    return mode == ModelMode::kHybrid ? hybrid_set : std::set<std::string>{};
  }
  bool is_hybrid(const std::string& proj) const {
    return mode == ModelMode::kHybrid && hybrid_set.count(proj) > 0;
  }

  // Projection widths: q/k/v/o are d_model->d_model, gate/up d_model->d_hidden,
  // down d_hidden->d_model.
  std::pair<std::int64_t, std::int64_t> proj_dims(const std::string& proj) const {
    if (proj == "gate" || proj == "up") return {d_model, d_hidden};
    if (proj == "down") return {d_hidden, d_model};
    return {d_model, d_model};
  }

  void validate() const {
    if (n_heads * head_dim != d_model)
      throw std::invalid_argument("n_heads * head_dim must equal d_model");
    if (head_dim % 2 != 0) throw std::invalid_argument("head_dim must be even (RoPE pairs)");
    if (vocab_size <= 0 || n_layers <= 0 || seq_len <= 0)
      throw std::invalid_argument("vocab_size, n_layers, seq_len must be positive");
    for (const auto& p : hybrid_set)
      if (!all_projection_names().count(p))
        throw std::invalid_argument("unknown projection in hybrid_set: " + p);
    if (mode == ModelMode::kHybrid)
      for (const auto& p : hybrid_set) {
        auto [din, dout] = proj_dims(p);
        check_hdpl_dims(din, dout, k_groups, rank);
      }
  }
};

// A projection slot is either a dense weight [d_out, d_in] or an HDPL layer.
template <class Scalar>
struct Projection {
  bool hybrid = false;
  Tensor<Scalar> dense;  // when !hybrid
  HdplLayer<Scalar> hdpl;
};

template <class Scalar>
struct TransformerBlock {
  Tensor<Scalar> attn_norm;  // [d_model] gain
  Projection<Scalar> q, k, v, o;
  Tensor<Scalar> ffn_norm;  // [d_model] gain
  Projection<Scalar> gate, up, down;
};

struct LatentRecord {
  std::string layer_id;  // e.g. "blocks.0.attn.q"
  std::int64_t block = 0;
};

template <class Scalar>
struct LatentTap {
  std::string layer_id;
  Tensor<Scalar> mu, logvar, z;
};

template <class Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;     // [B, L, vocab]
  Tensor<Scalar> ce_loss;    // scalar; undefined when no targets given
  Tensor<Scalar> aux_total;  // scalar, sum over hybrid layers
  Tensor<Scalar> total;      // ce + aux when targets given
  std::vector<LatentTap<Scalar>> latents;
};

template <class Scalar>
struct TransformerModel {
  ModelConfig config;
  Tensor<Scalar> token_embedding;  // [vocab, d_model]
  std::vector<TransformerBlock<Scalar>> blocks;
  Tensor<Scalar> final_norm;  // [d_model]
  Tensor<Scalar> lm_head;     // [vocab, d_model], untied
  std::map<std::string, Tensor<Scalar>> latent_overrides;  // eval-time only
  std::map<std::string, Tensor<Scalar>> frozen_eps;        // pins sampling noise (grad checks)
};

// ---- parameter accounting (pure arithmetic, no allocation) ----

struct ParamEntry {
  std::string name;
  Shape shape;
  std::int64_t count = 0;
};

namespace detail {
inline void proj_param_entries(const ModelConfig& cfg, const std::string& prefix,
                               const std::string& proj, std::vector<ParamEntry>& out) {
  auto [din, dout] = cfg.proj_dims(proj);
  if (cfg.is_hybrid(proj)) {
    for (std::int64_t k = 0; k < cfg.k_groups; ++k)
      out.push_back({prefix + ".block." + std::to_string(k),
                     {dout / cfg.k_groups, din / cfg.k_groups},
                     dout / cfg.k_groups * (din / cfg.k_groups)});
    out.push_back({prefix + ".w_mu", {cfg.rank, din}, cfg.rank * din});
    out.push_back({prefix + ".w_logvar", {cfg.rank, din}, cfg.rank * din});
    out.push_back({prefix + ".w_dec", {dout, cfg.rank}, dout * cfg.rank});
  } else {
    out.push_back({prefix + ".weight", {dout, din}, dout * din});
  }
}
}  // namespace detail

// Every stored parameter tensor, in canonical (checkpoint manifest) order.
inline std::vector<ParamEntry> param_entries(const ModelConfig& cfg) {
  std::vector<ParamEntry> out;
  out.push_back({"token_embedding", {cfg.vocab_size, cfg.d_model}, cfg.vocab_size * cfg.d_model});
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string b = "blocks." + std::to_string(i);
    out.push_back({b + ".attn_norm.gain", {cfg.d_model}, cfg.d_model});
    for (const char* p : {"q", "k", "v", "o"}) detail::proj_param_entries(cfg, b + ".attn." + p, p, out);
    out.push_back({b + ".ffn_norm.gain", {cfg.d_model}, cfg.d_model});
    for (const char* p : {"gate", "up", "down"})
      detail::proj_param_entries(cfg, b + ".ffn." + p, p, out);
  }
  out.push_back({"final_norm.gain", {cfg.d_model}, cfg.d_model});
  out.push_back({"lm_head", {cfg.vocab_size, cfg.d_model}, cfg.vocab_size * cfg.d_model});
  return out;
}

inline std::int64_t count_model_params(const ModelConfig& cfg) {
  cfg.validate();
  std::int64_t total = 0;
  for (const auto& e : param_entries(cfg)) total += e.count;
  return total;
}

// ---- construction ----

namespace detail {
template <class Scalar>
Projection<Scalar> init_projection(const ModelConfig& cfg, const std::string& proj,
                                   RngState& rng) {
  Projection<Scalar> p;
  auto [din, dout] = cfg.proj_dims(proj);
  if (cfg.is_hybrid(proj)) {
    p.hybrid = true;
    p.hdpl = init_hdpl<Scalar>(din, dout, cfg.k_groups, cfg.rank, Scalar(cfg.beta), rng);
  } else {
    p.dense = normal_tensor<Scalar>({dout, din}, 1.0 / std::sqrt(static_cast<double>(din)), rng);
  }
  return p;
}
}  // namespace detail

template <class Scalar>
TransformerModel<Scalar> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  TransformerModel<Scalar> m;
  m.config = cfg;
  RngState rng{seed, 0};
  // Embedding and head at a small fixed scale; untrained logits stay near
  // uniform so initial CE sits at ~ln(vocab).
  m.token_embedding = detail::normal_tensor<Scalar>({cfg.vocab_size, cfg.d_model}, 0.02, rng);
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    TransformerBlock<Scalar> blk;
    blk.attn_norm = Tensor<Scalar>({cfg.d_model}, Scalar(1));
    blk.q = detail::init_projection<Scalar>(cfg, "q", rng);
    blk.k = detail::init_projection<Scalar>(cfg, "k", rng);
    blk.v = detail::init_projection<Scalar>(cfg, "v", rng);
    blk.o = detail::init_projection<Scalar>(cfg, "o", rng);
    blk.ffn_norm = Tensor<Scalar>({cfg.d_model}, Scalar(1));
    blk.gate = detail::init_projection<Scalar>(cfg, "gate", rng);
    blk.up = detail::init_projection<Scalar>(cfg, "up", rng);
    blk.down = detail::init_projection<Scalar>(cfg, "down", rng);
    m.blocks.push_back(std::move(blk));
  }
  m.final_norm = Tensor<Scalar>({cfg.d_model}, Scalar(1));
  m.lm_head = detail::normal_tensor<Scalar>({cfg.vocab_size, cfg.d_model}, 0.02, rng);
  return m;
}

// Visits parameters in the same canonical order as param_entries().
template <class Scalar, class Fn>
void for_each_param(TransformerModel<Scalar>& m, Fn&& fn) {
  auto visit_proj = [&](Projection<Scalar>& p, const std::string& prefix) {
    if (p.hybrid)
      for_each_hdpl_param(p.hdpl, prefix, fn);
    else
      fn(prefix + ".weight", p.dense);
  };
  fn("token_embedding", m.token_embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    std::string b = "blocks." + std::to_string(i);
    auto& blk = m.blocks[i];
    fn(b + ".attn_norm.gain", blk.attn_norm);
    visit_proj(blk.q, b + ".attn.q");
    visit_proj(blk.k, b + ".attn.k");
    visit_proj(blk.v, b + ".attn.v");
    visit_proj(blk.o, b + ".attn.o");
    fn(b + ".ffn_norm.gain", blk.ffn_norm);
    visit_proj(blk.gate, b + ".ffn.gate");
    visit_proj(blk.up, b + ".ffn.up");
    visit_proj(blk.down, b + ".ffn.down");
  }
  fn("final_norm.gain", m.final_norm);
  fn("lm_head", m.lm_head);
}

// ---- forward pieces ----

template <class Scalar>
Tensor<Scalar> rmsnorm(Tape<Scalar>* tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                       Scalar eps) {
  Tensor<Scalar> ms = mean_lastdim(tape, mul(tape, x, x));
  Tensor<Scalar> inv = rsqrt(tape, add_scalar(tape, ms, eps));
  return mul(tape, mul(tape, x, inv), gain);
}

template <class Scalar>
Tensor<Scalar> apply_rope(Tape<Scalar>* tape, const Tensor<Scalar>& x, Scalar base) {
  return rope(tape, x, base);
}

// softmax(q k^T / sqrt(head_dim)) v with the causal restriction.
template <class Scalar>
Tensor<Scalar> causal_attention(Tape<Scalar>* tape, const Tensor<Scalar>& q,
                                const Tensor<Scalar>& k, const Tensor<Scalar>& v) {
  std::int64_t hd = q.shape().back();
  Tensor<Scalar> scores = matmul(tape, q, transpose(tape, k, -1, -2));
  scores = scale(tape, scores, Scalar(1) / std::sqrt(Scalar(hd)));
  Tensor<Scalar> weights = causal_softmax(tape, scores);
  return matmul(tape, weights, v);
}

struct ForwardOptions {
  bool training = false;
  bool record_latents = true;
};

namespace detail {

template <class Scalar>
struct ProjEval {
  Tensor<Scalar> y;
  Tensor<Scalar> aux;  // undefined when dense
  bool has_latent = false;
  LatentTap<Scalar> tap;
};

template <class Scalar>
ProjEval<Scalar> run_projection(Tape<Scalar>* tape, TransformerModel<Scalar>& m,
                                Projection<Scalar>& p, const std::string& layer_id,
                                const Tensor<Scalar>& x, RngState& rng,
                                const ForwardOptions& opts) {
  ProjEval<Scalar> ev;
  if (!p.hybrid) {
    ev.y = matmul(tape, x, transpose(tape, p.dense, 0, 1));
    return ev;
  }
  Tensor<Scalar> z_override;
  if (auto it = m.latent_overrides.find(layer_id); it != m.latent_overrides.end()) {
    if (opts.training)
      throw std::logic_error("latent override is an eval-mode intervention: " + layer_id);
    z_override = it->second;
  }
  Tensor<Scalar> eps;
  if (auto it = m.frozen_eps.find(layer_id); it != m.frozen_eps.end()) eps = it->second;
  HdplForwardOptions hopts{opts.training, m.config.kl_granularity};
  RngState layer_rng = fork(rng, fnv1a(layer_id.c_str()));
  HdplOutput<Scalar> out = hdpl_forward(tape, p.hdpl, x, layer_rng, hopts, z_override, eps);
  ev.y = out.y;
  ev.aux = out.aux_loss;
  if (opts.record_latents) {
    ev.has_latent = true;
    ev.tap = LatentTap<Scalar>{layer_id, out.mu, out.logvar, out.z};
  }
  return ev;
}

}  // namespace detail

// Full decoder forward: embedding -> blocks -> final norm -> lm head.
// tokens is row-major [B, L]; targets, when present, matches.
template <class Scalar>
ForwardResult<Scalar> model_forward(Tape<Scalar>* tape, TransformerModel<Scalar>& m,
                                    const std::vector<std::int64_t>& tokens, std::int64_t B,
                                    std::int64_t L,
                                    const std::vector<std::int64_t>* targets, RngState& rng,
                                    const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = m.config;
  if (static_cast<std::int64_t>(tokens.size()) != B * L)
    throw ShapeError("token buffer size does not match [B, L]");
  ForwardResult<Scalar> result;
  std::vector<Tensor<Scalar>> aux_terms;

  Tensor<Scalar> x = embedding(tape, m.token_embedding, tokens);  // [B*L, D]
  x = reshape(tape, x, {B, L, cfg.d_model});

  for (std::size_t li = 0; li < m.blocks.size(); ++li) {
    auto& blk = m.blocks[li];
    std::string bid = "blocks." + std::to_string(li);

    // attention
    Tensor<Scalar> h = rmsnorm(tape, x, blk.attn_norm, Scalar(cfg.norm_eps));
    auto run = [&](Projection<Scalar>& p, const std::string& id, const Tensor<Scalar>& in) {
      auto ev = detail::run_projection(tape, m, p, id, in, rng, opts);
      if (ev.aux.defined() && opts.training) aux_terms.push_back(ev.aux);
      if (ev.has_latent) result.latents.push_back(ev.tap);
      return ev.y;
    };
    Tensor<Scalar> q = run(blk.q, bid + ".attn.q", h);
    Tensor<Scalar> k = run(blk.k, bid + ".attn.k", h);
    Tensor<Scalar> v = run(blk.v, bid + ".attn.v", h);

    auto to_heads = [&](const Tensor<Scalar>& t) {
      return transpose(tape, reshape(tape, t, {B, L, cfg.n_heads, cfg.head_dim}), 1, 2);
    };
    q = apply_rope(tape, to_heads(q), Scalar(cfg.rope_base));
    k = apply_rope(tape, to_heads(k), Scalar(cfg.rope_base));
    v = to_heads(v);
    Tensor<Scalar> attn = causal_attention(tape, q, k, v);
    attn = reshape(tape, transpose(tape, attn, 1, 2), {B, L, cfg.d_model});
    Tensor<Scalar> attn_out = run(blk.o, bid + ".attn.o", attn);
    x = add(tape, x, attn_out);

    // ffn
    Tensor<Scalar> hf = rmsnorm(tape, x, blk.ffn_norm, Scalar(cfg.norm_eps));
    Tensor<Scalar> g = run(blk.gate, bid + ".ffn.gate", hf);
    Tensor<Scalar> u = run(blk.up, bid + ".ffn.up", hf);
    Tensor<Scalar> ff = run(blk.down, bid + ".ffn.down", mul(tape, silu(tape, g), u));
    x = add(tape, x, ff);
  }

  x = rmsnorm(tape, x, m.final_norm, Scalar(cfg.norm_eps));
  Tensor<Scalar> logits2d =
      matmul(tape, reshape(tape, x, {B * L, cfg.d_model}), transpose(tape, m.lm_head, 0, 1));
  result.logits = reshape(tape, logits2d, {B, L, cfg.vocab_size});

  result.aux_total = Tensor<Scalar>::scalar(Scalar(0));
  for (const auto& t : aux_terms) result.aux_total = add(tape, result.aux_total, t);

  if (targets) {
    result.ce_loss = cross_entropy(tape, logits2d, *targets);
    result.total = add(tape, result.ce_loss, result.aux_total);
  }
  return result;
}

// Read-only snapshot of every hybrid layer's latent statistics, in layer order.
template <class Scalar>
const std::vector<LatentTap<Scalar>>& tap_latents(const ForwardResult<Scalar>& result) {
  return result.latents;
}

// Scoped latent substitution for the next eval forward; removal restores
// normal behavior.
template <class Scalar>
class LatentOverrideGuard {
 public:
  LatentOverrideGuard(TransformerModel<Scalar>& model, const std::string& layer_id,
                      Tensor<Scalar> z_override)
      : model_(&model), layer_id_(layer_id) {
    bool known = false;
    ModelConfig& cfg = model.config;
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      std::string b = "blocks." + std::to_string(i);
      for (const char* p : {"q", "k", "v", "o"})
        if (layer_id == b + ".attn." + p && cfg.is_hybrid(p)) known = true;
      for (const char* p : {"gate", "up", "down"})
        if (layer_id == b + ".ffn." + p && cfg.is_hybrid(p)) known = true;
    }
    if (!known) throw std::invalid_argument("unknown hybrid layer: " + layer_id);
    if (z_override.rank() != 3 || z_override.shape()[2] != cfg.rank)
      throw ShapeError("z override must be [B, L, R], got " + shape_str(z_override.shape()));
    model_->latent_overrides[layer_id_] = std::move(z_override);
  }
  ~LatentOverrideGuard() {
    if (model_) model_->latent_overrides.erase(layer_id_);
  }
  LatentOverrideGuard(const LatentOverrideGuard&) = delete;
  LatentOverrideGuard& operator=(const LatentOverrideGuard&) = delete;

 private:
  TransformerModel<Scalar>* model_;
  std::string layer_id_;
};

}  // namespace hdpl
