#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdpl/rng.hpp"

namespace hdpl {

// Byte-level token stream; vocab is fixed at 256.
struct Corpus {
  std::vector<std::int64_t> tokens;
  std::int64_t vocab_size = 256;
  std::vector<std::string> sources;
};

inline std::vector<std::int64_t> tokenize_bytes(const std::string& text) {
  std::vector<std::int64_t> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<std::int64_t>(c));
  return out;
}

inline std::string detokenize_bytes(const std::vector<std::int64_t>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  return out;
}

// Reads the listed files fully (desk scale), concatenated in order.
inline Corpus load_corpus(const std::vector<std::string>& paths) {
  Corpus c;
  for (const auto& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open corpus file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto ids = tokenize_bytes(bytes);
    c.tokens.insert(c.tokens.end(), ids.begin(), ids.end());
    c.sources.push_back(path);
  }
  return c;
}

// Deterministic split: the last ceil(val_fraction * len) tokens become
// validation; ranges are disjoint.
inline std::pair<Corpus, Corpus> split_corpus(const Corpus& c, double val_fraction,
                                              std::int64_t min_block = 2) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("val_fraction must be in (0, 1)");
  std::int64_t len = static_cast<std::int64_t>(c.tokens.size());
  std::int64_t val_len =
      static_cast<std::int64_t>(std::ceil(val_fraction * static_cast<double>(len)));
  std::int64_t train_len = len - val_len;
  if (train_len < min_block || val_len < min_block)
    throw std::runtime_error("corpus too small to split: " + std::to_string(len) + " tokens");
  Corpus train{std::vector<std::int64_t>(c.tokens.begin(), c.tokens.begin() + train_len),
               c.vocab_size, c.sources};
  Corpus val{std::vector<std::int64_t>(c.tokens.begin() + train_len, c.tokens.end()),
             c.vocab_size, c.sources};
  return {std::move(train), std::move(val)};
}

struct Batch {
  std::vector<std::int64_t> inputs;   // [B, L] row-major
  std::vector<std::int64_t> targets;  // inputs shifted by one
  std::int64_t B = 0, L = 0;
};

// B rows at uniformly drawn start offsets; reads wrap at the stream end.
inline Batch next_batch(const Corpus& corpus, std::int64_t B, std::int64_t L, RngState& rng) {
  std::int64_t len = static_cast<std::int64_t>(corpus.tokens.size());
  if (len < L + 1)
    throw std::runtime_error("corpus of " + std::to_string(len) +
                             " tokens is shorter than L+1 = " + std::to_string(L + 1));
  Batch b;
  b.B = B;
  b.L = L;
  b.inputs.resize(B * L);
  b.targets.resize(B * L);
  for (std::int64_t r = 0; r < B; ++r) {
    std::int64_t off = static_cast<std::int64_t>(next_u64(rng) % static_cast<std::uint64_t>(len));
    for (std::int64_t j = 0; j < L; ++j) {
      b.inputs[r * L + j] = corpus.tokens[(off + j) % len];
      b.targets[r * L + j] = corpus.tokens[(off + j + 1) % len];
    }
  }
  return b;
}

// Sequential non-wrapping batch for deterministic validation sweeps; index
// selects which block of the stream to read.
inline Batch sequential_batch(const Corpus& corpus, std::int64_t B, std::int64_t L,
                              std::int64_t index) {
  std::int64_t len = static_cast<std::int64_t>(corpus.tokens.size());
  if (len < L + 1) throw std::runtime_error("corpus shorter than one block");
  std::int64_t blocks = (len - 1) / L;
  Batch b;
  b.B = B;
  b.L = L;
  b.inputs.resize(B * L);
  b.targets.resize(B * L);
  for (std::int64_t r = 0; r < B; ++r) {
    std::int64_t off = ((index * B + r) % blocks) * L;
    for (std::int64_t j = 0; j < L; ++j) {
      b.inputs[r * L + j] = corpus.tokens[off + j];
      b.targets[r * L + j] = corpus.tokens[off + j + 1];
    }
  }
  return b;
}

}  // namespace hdpl
