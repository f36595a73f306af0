#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>

#include "hdpl/tensor.hpp"

namespace hdpl {

// Define-by-run tape. Ops append one backward closure each, in creation
// order; backward() replays them in reverse. Rebuilt per forward pass.
template <class Scalar>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  void backward(Tensor<Scalar> loss) {
    if (loss.size() != 1)
      throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    loss.grad()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <class Scalar>
using MatMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class Scalar>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class Scalar>
bool wants_grad(Tape<Scalar>* tape, const Tensor<Scalar>& t) {
  return tape != nullptr && t.requires_grad();
}

// Trailing-aligned broadcast of `in` against `out`: maps a flat output index
// to the corresponding flat input index (stride 0 on broadcast dims).
struct BroadcastMap {
  Shape out_shape;
  Shape out_strides;
  Shape in_strides;  // aligned to out dims
  bool identity = false;

  BroadcastMap(const Shape& out, const Shape& in) : out_shape(out) {
    out_strides = row_major_strides(out);
    in_strides.assign(out.size(), 0);
    Shape in_native = row_major_strides(in);
    std::size_t off = out.size() - in.size();
    identity = in.size() == out.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] == out[off + i]) {
        in_strides[off + i] = in_native[i];
      } else if (in[i] == 1) {
        in_strides[off + i] = 0;
        identity = false;
      } else {
        throw ShapeError("cannot broadcast " + shape_str(in) + " against " + shape_str(out));
      }
    }
  }

  std::int64_t operator()(std::int64_t flat) const {
    if (identity) return flat;
    std::int64_t src = 0;
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      std::int64_t coord = (flat / out_strides[i]) % out_shape[i];
      src += coord * in_strides[i];
    }
    return src;
  }
};

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("incompatible broadcast: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Generic elementwise binary op with broadcast. dfa/dfb give the local
// partials as functions of (a_val, b_val).
template <class Scalar, class F, class DFA, class DFB>
Tensor<Scalar> binary_op(Tape<Scalar>* tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                         F f, DFA dfa, DFB dfb) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  BroadcastMap ma(out_shape, a.shape());
  BroadcastMap mb(out_shape, b.shape());
  Tensor<Scalar> out(out_shape);
  std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = f(a.data()[ma(i)], b.data()[mb(i)]);
  if (wants_grad(tape, a) || wants_grad(tape, b)) {
    out.set_requires_grad(true);
    Tensor<Scalar> ac = a, bc = b, oc = out;
    bool ga = a.requires_grad(), gb = b.requires_grad();
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t i = 0; i < oc.size(); ++i) {
        std::int64_t ia = ma(i), ib = mb(i);
        if (ga) ac.grad()[ia] += og[i] * dfa(ac.data()[ia], bc.data()[ib]);
        if (gb) bc.grad()[ib] += og[i] * dfb(ac.data()[ia], bc.data()[ib]);
      }
    });
  }
  return out;
}

// Elementwise unary op; df gives the local derivative from (x_val, y_val).
template <class Scalar, class F, class DF>
Tensor<Scalar> unary_op(Tape<Scalar>* tape, const Tensor<Scalar>& x, F f, DF df) {
  Tensor<Scalar> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) out.data()[i] = f(x.data()[i]);
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t i = 0; i < xc.size(); ++i)
        xc.grad()[i] += og[i] * df(xc.data()[i], oc.data()[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---- linear algebra ----

// a: [.., M, P] times b: [.., P, Q] or [P, Q] (2-d rhs broadcasts over the
// batch). Leading batch dims must match exactly when b is batched.
template <class Scalar>
Tensor<Scalar> matmul(Tape<Scalar>* tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::int64_t M = a.shape()[a.rank() - 2], P = a.shape()[a.rank() - 1];
  std::int64_t Pb = b.shape()[b.rank() - 2], Q = b.shape()[b.rank() - 1];
  if (P != Pb)
    throw ShapeError("matmul inner-dim mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  bool b_batched = b.rank() > 2;
  Shape batch(a.shape().begin(), a.shape().end() - 2);
  if (b_batched && !std::equal(batch.begin(), batch.end(), b.shape().begin(),
                               b.shape().end() - 2))
    throw ShapeError("matmul batch-dim mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::int64_t nb = numel(batch);

  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(Q);
  Tensor<Scalar> out(out_shape);
  for (std::int64_t i = 0; i < nb; ++i) {
    detail::ConstMatMap<Scalar> A(a.data() + i * M * P, M, P);
    detail::ConstMatMap<Scalar> B(b.data() + (b_batched ? i * P * Q : 0), P, Q);
    detail::MatMap<Scalar> C(out.data() + i * M * Q, M, Q);
    C.noalias() = A * B;
  }

  if (detail::wants_grad(tape, a) || detail::wants_grad(tape, b)) {
    out.set_requires_grad(true);
    Tensor<Scalar> ac = a, bc = b, oc = out;
    bool ga = a.requires_grad(), gb = b.requires_grad();
    tape->record([=]() mutable {
      for (std::int64_t i = 0; i < nb; ++i) {
        detail::ConstMatMap<Scalar> A(ac.data() + i * M * P, M, P);
        detail::ConstMatMap<Scalar> B(bc.data() + (b_batched ? i * P * Q : 0), P, Q);
        detail::ConstMatMap<Scalar> G(oc.grad().data() + i * M * Q, M, Q);
        if (ga) {
          detail::MatMap<Scalar> dA(ac.grad().data() + i * M * P, M, P);
          dA.noalias() += G * B.transpose();
        }
        if (gb) {
          detail::MatMap<Scalar> dB(bc.grad().data() + (b_batched ? i * P * Q : 0), P, Q);
          dB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

// Swap two axes (gradient-exact permutation copy).
template <class Scalar>
Tensor<Scalar> transpose(Tape<Scalar>* tape, const Tensor<Scalar>& x, int d0, int d1) {
  int r = static_cast<int>(x.rank());
  if (d0 < 0) d0 += r;
  if (d1 < 0) d1 += r;
  if (d0 < 0 || d0 >= r || d1 < 0 || d1 >= r)
    throw ShapeError("transpose axis out of range for " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  Shape os = row_major_strides(out_shape);
  Shape is = row_major_strides(x.shape());
  std::swap(is[d0], is[d1]);  // input strides in output coordinate order

  Tensor<Scalar> out(out_shape);
  std::int64_t n = out.size();
  auto src_of = [r, os, is, out_shape](std::int64_t flat) {
    std::int64_t src = 0;
    for (int i = 0; i < r; ++i) src += ((flat / os[i]) % out_shape[i]) * is[i];
    return src;
  };
  for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[src_of(i)];

  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t i = 0; i < n; ++i) xc.grad()[src_of(i)] += og[i];
    });
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> reshape(Tape<Scalar>* tape, const Tensor<Scalar>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor<Scalar> out = Tensor<Scalar>::from(std::move(new_shape), x.values());
  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t i = 0; i < xc.size(); ++i) xc.grad()[i] += og[i];
    });
  }
  return out;
}

// ---- elementwise ----

template <class Scalar>
Tensor<Scalar> add(Tape<Scalar>* tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op(
      tape, a, b, [](Scalar x, Scalar y) { return x + y; },
      [](Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar) { return Scalar(1); });
}

template <class Scalar>
Tensor<Scalar> sub(Tape<Scalar>* tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op(
      tape, a, b, [](Scalar x, Scalar y) { return x - y; },
      [](Scalar, Scalar) { return Scalar(1); }, [](Scalar, Scalar) { return Scalar(-1); });
}

template <class Scalar>
Tensor<Scalar> mul(Tape<Scalar>* tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op(
      tape, a, b, [](Scalar x, Scalar y) { return x * y; },
      [](Scalar, Scalar y) { return y; }, [](Scalar x, Scalar) { return x; });
}

template <class Scalar>
Tensor<Scalar> scale(Tape<Scalar>* tape, const Tensor<Scalar>& x, Scalar s) {
  return detail::unary_op(
      tape, x, [s](Scalar v) { return v * s; }, [s](Scalar, Scalar) { return s; });
}

template <class Scalar>
Tensor<Scalar> add_scalar(Tape<Scalar>* tape, const Tensor<Scalar>& x, Scalar s) {
  return detail::unary_op(
      tape, x, [s](Scalar v) { return v + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <class Scalar>
Tensor<Scalar> exp(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  return detail::unary_op(
      tape, x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <class Scalar>
Tensor<Scalar> rsqrt(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  return detail::unary_op(
      tape, x, [](Scalar v) { return Scalar(1) / std::sqrt(v); },
      [](Scalar, Scalar y) { return Scalar(-0.5) * y * y * y; });
}

template <class Scalar>
Tensor<Scalar> silu(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  auto sig = [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); };
  return detail::unary_op(
      tape, x, [sig](Scalar v) { return v * sig(v); },
      [sig](Scalar v, Scalar) {
        Scalar s = sig(v);
        return s * (Scalar(1) + v * (Scalar(1) - s));
      });
}

// min(x, cap); subgradient at x == cap is 0.
template <class Scalar>
Tensor<Scalar> clamp_max(Tape<Scalar>* tape, const Tensor<Scalar>& x, Scalar cap) {
  return detail::unary_op(
      tape, x, [cap](Scalar v) { return std::min(v, cap); },
      [cap](Scalar v, Scalar) { return v < cap ? Scalar(1) : Scalar(0); });
}

// ---- reductions ----

template <class Scalar>
Tensor<Scalar> sum_all(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  Scalar acc = 0;
  for (std::int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<Scalar> out = Tensor<Scalar>::scalar(acc);
  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      Scalar g = oc.grad()[0];
      for (std::int64_t i = 0; i < xc.size(); ++i) xc.grad()[i] += g;
    });
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> mean_all(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  return scale(tape, sum_all(tape, x), Scalar(1) / Scalar(x.size()));
}

namespace detail {
template <class Scalar>
Tensor<Scalar> lastdim_reduce(Tape<Scalar>* tape, const Tensor<Scalar>& x, bool mean) {
  std::int64_t d = x.shape().back();
  std::int64_t rows = x.size() / d;
  Shape out_shape = x.shape();
  out_shape.back() = 1;
  Tensor<Scalar> out(out_shape);
  Scalar w = mean ? Scalar(1) / Scalar(d) : Scalar(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (std::int64_t j = 0; j < d; ++j) acc += x.data()[r * d + j];
    out.data()[r] = acc * w;
  }
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) xc.grad()[r * d + j] += og[r] * w;
    });
  }
  return out;
}
}  // namespace detail

// Keep-dim reductions over the feature axis.
template <class Scalar>
Tensor<Scalar> mean_lastdim(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  return detail::lastdim_reduce(tape, x, true);
}
template <class Scalar>
Tensor<Scalar> sum_lastdim(Tape<Scalar>* tape, const Tensor<Scalar>& x) {
  return detail::lastdim_reduce(tape, x, false);
}

// ---- softmax family ----

// Max-subtracted softmax along `axis`.
template <class Scalar>
Tensor<Scalar> softmax(Tape<Scalar>* tape, const Tensor<Scalar>& x, int axis) {
  int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax axis out of range");
  std::int64_t n = x.shape()[axis];
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];

  Tensor<Scalar> out(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      std::int64_t base = o * n * inner + in;
      Scalar m = x.data()[base];
      for (std::int64_t j = 1; j < n; ++j) m = std::max(m, x.data()[base + j * inner]);
      Scalar denom = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        Scalar e = std::exp(x.data()[base + j * inner] - m);
        out.data()[base + j * inner] = e;
        denom += e;
      }
      for (std::int64_t j = 0; j < n; ++j) out.data()[base + j * inner] /= denom;
    }
  }

  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          std::int64_t base = o * n * inner + in;
          Scalar dot = 0;
          for (std::int64_t j = 0; j < n; ++j)
            dot += og[base + j * inner] * oc.data()[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j) {
            std::int64_t k = base + j * inner;
            xc.grad()[k] += oc.data()[k] * (og[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Softmax over the last axis of [.., L, L] score matrices restricted to
// columns <= row; masked columns are exactly 0 so causality holds bit-level.
template <class Scalar>
Tensor<Scalar> causal_softmax(Tape<Scalar>* tape, const Tensor<Scalar>& scores) {
  if (scores.rank() < 2 || scores.shape()[scores.rank() - 1] != scores.shape()[scores.rank() - 2])
    throw ShapeError("causal_softmax expects [.., L, L], got " + shape_str(scores.shape()));
  std::int64_t L = scores.shape().back();
  std::int64_t mats = scores.size() / (L * L);
  Tensor<Scalar> out(scores.shape());
  for (std::int64_t m = 0; m < mats; ++m) {
    for (std::int64_t t = 0; t < L; ++t) {
      const Scalar* row = scores.data() + (m * L + t) * L;
      Scalar* orow = out.data() + (m * L + t) * L;
      Scalar mx = row[0];
      for (std::int64_t j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
      Scalar denom = 0;
      for (std::int64_t j = 0; j <= t; ++j) {
        orow[j] = std::exp(row[j] - mx);
        denom += orow[j];
      }
      for (std::int64_t j = 0; j <= t; ++j) orow[j] /= denom;
      for (std::int64_t j = t + 1; j < L; ++j) orow[j] = Scalar(0);
    }
  }
  if (detail::wants_grad(tape, scores)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = scores, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t m = 0; m < mats; ++m) {
        for (std::int64_t t = 0; t < L; ++t) {
          std::int64_t base = (m * L + t) * L;
          Scalar dot = 0;
          for (std::int64_t j = 0; j <= t; ++j) dot += og[base + j] * oc.data()[base + j];
          for (std::int64_t j = 0; j <= t; ++j)
            xc.grad()[base + j] += oc.data()[base + j] * (og[base + j] - dot);
        }
      }
    });
  }
  return out;
}

// ---- slicing / concat ----

template <class Scalar>
Tensor<Scalar> slice(Tape<Scalar>* tape, const Tensor<Scalar>& x, int axis, std::int64_t start,
                     std::int64_t len) {
  int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || len <= 0 || start + len > x.shape()[axis])
    throw ShapeError("bad slice of " + shape_str(x.shape()));
  std::int64_t n = x.shape()[axis];
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];

  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor<Scalar> out(out_shape);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + (o * n + start) * inner, len * inner, out.data() + o * len * inner);

  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < len * inner; ++i)
          xc.grad()[(o * n + start) * inner + i] += og[o * len * inner + i];
    });
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> concat(Tape<Scalar>* tape, const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  int r = static_cast<int>(parts[0].rank());
  if (axis < 0) axis += r;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (static_cast<int>(p.rank()) != r)
      throw ShapeError("concat rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && p.shape()[i] != parts[0].shape()[i])
        throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
    total += p.shape()[axis];
  }
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= parts[0].shape()[i];
  for (int i = 0; i < axis; ++i) outer *= parts[0].shape()[i];

  Shape out_shape = parts[0].shape();
  out_shape[axis] = total;
  Tensor<Scalar> out(out_shape);
  std::int64_t off = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    std::int64_t n = p.shape()[axis];
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data() + o * n * inner, n * inner, out.data() + (o * total + off) * inner);
    off += n;
    any_grad = any_grad || detail::wants_grad(tape, p);
  }
  if (any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor<Scalar>> pc = parts;
    Tensor<Scalar> oc = out;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      std::int64_t o2 = 0;
      for (auto& p : pc) {
        std::int64_t n = p.shape()[axis];
        if (p.requires_grad())
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < n * inner; ++i)
              p.grad()[o * n * inner + i] += og[(o * total + o2) * inner + i];
        o2 += n;
      }
    });
  }
  return out;
}

// ---- lookup / loss ----

// Gather rows of table [V, D] by id; scatter-add adjoint.
template <class Scalar>
Tensor<Scalar> embedding(Tape<Scalar>* tape, const Tensor<Scalar>& table,
                         const std::vector<std::int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, D]");
  std::int64_t V = table.shape()[0], D = table.shape()[1];
  for (auto id : ids)
    if (id < 0 || id >= V)
      throw ShapeError("token id " + std::to_string(id) + " out of range for vocab " +
                       std::to_string(V));
  Tensor<Scalar> out(Shape{static_cast<std::int64_t>(ids.size()), D});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.data() + ids[i] * D, D, out.data() + i * D);
  if (detail::wants_grad(tape, table)) {
    out.set_requires_grad(true);
    Tensor<Scalar> tc = table, oc = out;
    auto idc = ids;
    tape->record([=]() mutable {
      const auto& og = oc.grad();
      for (std::size_t i = 0; i < idc.size(); ++i)
        for (std::int64_t j = 0; j < D; ++j) tc.grad()[idc[i] * D + j] += og[i * D + j];
    });
  }
  return out;
}

// Mean cross-entropy of logits [N, V] against integer targets, log-sum-exp
// stabilized.
template <class Scalar>
Tensor<Scalar> cross_entropy(Tape<Scalar>* tape, const Tensor<Scalar>& logits,
                             const std::vector<std::int64_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects [N, V] logits");
  std::int64_t N = logits.shape()[0], V = logits.shape()[1];
  if (static_cast<std::int64_t>(targets.size()) != N)
    throw ShapeError("cross_entropy target count mismatch");
  for (auto t : targets)
    if (t < 0 || t >= V) throw ShapeError("target id out of range");

  Scalar loss = 0;
  for (std::int64_t i = 0; i < N; ++i) {
    const Scalar* row = logits.data() + i * V;
    Scalar m = row[0];
    for (std::int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    Scalar denom = 0;
    for (std::int64_t j = 0; j < V; ++j) denom += std::exp(row[j] - m);
    loss += std::log(denom) + m - row[targets[i]];
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(loss / Scalar(N));

  if (detail::wants_grad(tape, logits)) {
    out.set_requires_grad(true);
    Tensor<Scalar> lc = logits, oc = out;
    auto tg = targets;
    tape->record([=]() mutable {
      Scalar g = oc.grad()[0] / Scalar(N);
      for (std::int64_t i = 0; i < N; ++i) {
        const Scalar* row = lc.data() + i * V;
        Scalar m = row[0];
        for (std::int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
        Scalar denom = 0;
        for (std::int64_t j = 0; j < V; ++j) denom += std::exp(row[j] - m);
        for (std::int64_t j = 0; j < V; ++j) {
          Scalar p = std::exp(row[j] - m) / denom;
          lc.grad()[i * V + j] += g * (p - (tg[i] == j ? Scalar(1) : Scalar(0)));
        }
      }
    });
  }
  return out;
}

// Rotary position embedding on [B, H, L, head_dim]: pair (x_{2i}, x_{2i+1})
// at position p rotates by p * base^(-2i/head_dim). Adjoint is the inverse
// rotation.
template <class Scalar>
Tensor<Scalar> rope(Tape<Scalar>* tape, const Tensor<Scalar>& x, Scalar base = Scalar(10000)) {
  if (x.rank() != 4) throw ShapeError("rope expects [B, H, L, head_dim]");
  std::int64_t hd = x.shape()[3];
  if (hd % 2 != 0) throw ShapeError("rope head_dim must be even, got " + std::to_string(hd));
  std::int64_t B = x.shape()[0], H = x.shape()[1], L = x.shape()[2];

  std::vector<Scalar> inv_freq(hd / 2);
  for (std::int64_t i = 0; i < hd / 2; ++i)
    inv_freq[i] = std::pow(base, Scalar(-2) * Scalar(i) / Scalar(hd));

  Tensor<Scalar> out(x.shape());
  auto apply = [B, H, L, hd, inv_freq](const Scalar* in, Scalar* dst, Scalar sign) {
    for (std::int64_t b = 0; b < B * H; ++b)
      for (std::int64_t p = 0; p < L; ++p) {
        std::int64_t off = (b * L + p) * hd;
        for (std::int64_t i = 0; i < hd / 2; ++i) {
          Scalar theta = sign * Scalar(p) * inv_freq[i];
          Scalar c = std::cos(theta), s = std::sin(theta);
          Scalar x0 = in[off + 2 * i], x1 = in[off + 2 * i + 1];
          dst[off + 2 * i] = c * x0 - s * x1;
          dst[off + 2 * i + 1] = s * x0 + c * x1;
        }
      }
  };
  apply(x.data(), out.data(), Scalar(1));

  if (detail::wants_grad(tape, x)) {
    out.set_requires_grad(true);
    Tensor<Scalar> xc = x, oc = out;
    tape->record([=]() mutable {
      std::vector<Scalar> tmp(xc.size());
      apply(oc.grad().data(), tmp.data(), Scalar(-1));
      for (std::int64_t i = 0; i < xc.size(); ++i) xc.grad()[i] += tmp[i];
    });
  }
  return out;
}

}  // namespace hdpl
