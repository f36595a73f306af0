#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "hdpl/data.hpp"

using namespace hdpl;

TEST_CASE("byte tokenization") {
  CHECK(tokenize_bytes("ab") == std::vector<std::int64_t>{97, 98});
  CHECK(tokenize_bytes("").empty());

  // round trip over every byte value, including NUL and high bytes
  std::string all;
  for (int i = 0; i < 256; ++i) all.push_back(static_cast<char>(i));
  auto ids = tokenize_bytes(all);
  REQUIRE(ids.size() == 256);
  for (int i = 0; i < 256; ++i) CHECK(ids[i] == i);
  CHECK(detokenize_bytes(ids) == all);
}

TEST_CASE("corpus split") {
  Corpus c;
  for (int i = 0; i < 1000; ++i) c.tokens.push_back(i % 251);

  auto [train, val] = split_corpus(c, 0.1);
  CHECK(train.tokens.size() == 900);
  CHECK(val.tokens.size() == 100);

  // disjoint and order-preserving: concatenation reproduces the stream
  std::vector<std::int64_t> joined = train.tokens;
  joined.insert(joined.end(), val.tokens.begin(), val.tokens.end());
  CHECK(joined == c.tokens);

  // deterministic
  auto [t2, v2] = split_corpus(c, 0.1);
  CHECK(t2.tokens == train.tokens);
  CHECK(v2.tokens == val.tokens);

  // fraction rounds up
  Corpus small;
  for (int i = 0; i < 105; ++i) small.tokens.push_back(i);
  auto [ts, vs] = split_corpus(small, 0.1);
  CHECK(vs.tokens.size() == 11);

  CHECK_THROWS(split_corpus(Corpus{{1, 2, 3}, 256, {}}, 0.1));
  CHECK_THROWS_AS(split_corpus(c, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(split_corpus(c, 1.0), std::invalid_argument);
}

TEST_CASE("next_batch") {
  Corpus c;
  for (int i = 0; i < 300; ++i) c.tokens.push_back(i % 256);

  SUBCASE("targets are inputs shifted by one") {
    RngState rng{9, 0};
    Batch b = next_batch(c, 4, 16, rng);
    REQUIRE(b.inputs.size() == 4 * 16);
    REQUIRE(b.targets.size() == 4 * 16);
    for (std::int64_t r = 0; r < 4; ++r)
      for (std::int64_t j = 0; j + 1 < 16; ++j)
        CHECK(b.inputs[r * 16 + j + 1] == b.targets[r * 16 + j]);
  }
  SUBCASE("fixed rng state reproduces the batch") {
    RngState r1{9, 5}, r2{9, 5};
    Batch a = next_batch(c, 4, 16, r1);
    Batch b = next_batch(c, 4, 16, r2);
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);
    RngState r3{10, 5};
    Batch d = next_batch(c, 4, 16, r3);
    CHECK(a.inputs != d.inputs);
  }
  SUBCASE("offsets cover the whole stream") {
    Corpus tiny;
    for (int i = 0; i < 37; ++i) tiny.tokens.push_back(i);
    std::set<std::int64_t> seen;
    RngState rng{1, 0};
    for (int draw = 0; draw < 10000; ++draw) {
      Batch b = next_batch(tiny, 1, 4, rng);
      seen.insert(b.inputs[0] == 36 ? 36 : b.inputs[0]);  // first token identifies the offset
    }
    CHECK(seen.size() == 37);
  }
  SUBCASE("wrapping reads stay consistent at the boundary") {
    Corpus tiny;
    for (int i = 0; i < 10; ++i) tiny.tokens.push_back(i);
    RngState rng{0, 0};
    bool saw_wrap = false;
    for (int draw = 0; draw < 200 && !saw_wrap; ++draw) {
      Batch b = next_batch(tiny, 1, 6, rng);
      if (b.inputs[0] >= 5) {
        saw_wrap = true;
        for (std::int64_t j = 0; j < 6; ++j) CHECK(b.inputs[j] == (b.inputs[0] + j) % 10);
      }
    }
    CHECK(saw_wrap);
  }
  SUBCASE("corpus shorter than a block is rejected") {
    Corpus tiny;
    for (int i = 0; i < 8; ++i) tiny.tokens.push_back(i);
    RngState rng{0, 0};
    CHECK_THROWS(next_batch(tiny, 1, 8, rng));
    CHECK_NOTHROW(next_batch(tiny, 1, 7, rng));
  }
}

TEST_CASE("sequential_batch walks disjoint blocks deterministically") {
  Corpus c;
  for (int i = 0; i < 100; ++i) c.tokens.push_back(i);
  Batch b0 = sequential_batch(c, 2, 10, 0);
  Batch b1 = sequential_batch(c, 2, 10, 1);
  CHECK(b0.inputs[0] == 0);
  CHECK(b0.inputs[10] == 10);  // second row is the next block
  CHECK(b1.inputs[0] == 20);
  for (std::int64_t j = 0; j + 1 < 10; ++j) CHECK(b0.inputs[j + 1] == b0.targets[j]);
  Batch again = sequential_batch(c, 2, 10, 1);
  CHECK(again.inputs == b1.inputs);
}

TEST_CASE("load_corpus concatenates files in order") {
  auto dir = std::filesystem::temp_directory_path() / "hdpl_test_data";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "a.txt", std::ios::binary) << "hello ";
    std::ofstream(dir / "b.txt", std::ios::binary) << "world";
  }
  Corpus c = load_corpus({(dir / "a.txt").string(), (dir / "b.txt").string()});
  CHECK(c.vocab_size == 256);
  CHECK(detokenize_bytes(c.tokens) == "hello world");
  CHECK(c.sources.size() == 2);
  CHECK_THROWS(load_corpus({(dir / "missing.txt").string()}));
  std::filesystem::remove_all(dir);
}
