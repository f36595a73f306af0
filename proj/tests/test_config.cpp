#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hdpl/config.hpp"

using namespace hdpl;

TEST_CASE("defaults match the reference configuration") {
  RunConfig cfg;
  CHECK(cfg.model.d_model == 512);
  CHECK(cfg.model.n_layers == 4);
  CHECK(cfg.model.n_heads == 8);
  CHECK(cfg.model.head_dim == 64);
  CHECK(cfg.model.d_hidden == 2048);
  CHECK(cfg.model.vocab_size == 49152);
  CHECK(cfg.model.seq_len == 2048);
  CHECK(cfg.model.rank == 128);
  CHECK(cfg.model.k_groups == 8);
  CHECK(cfg.model.beta == 0.001);
  CHECK(cfg.model.hybrid_set == std::set<std::string>{"q", "k", "v", "gate", "up"});
  CHECK(cfg.model.mode == ModelMode::kHybrid);
  CHECK(cfg.model.kl_granularity == KlGranularity::kElement);
  CHECK(cfg.schedule.peak_lr == 8e-4);
  CHECK(cfg.schedule.min_lr == 8e-5);
  CHECK(cfg.schedule.warmup_steps == 1000);
  CHECK(cfg.schedule.max_steps == 20000);
  CHECK(cfg.weight_decay == 0.1);
  CHECK(cfg.adam_beta1 == 0.9);
  CHECK(cfg.adam_beta2 == 0.95);
  CHECK(cfg.adam_eps == 1e-8);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.grad_clip == 1.0);
  CHECK(cfg.seed == 42);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("parsing applies overrides") {
  const char* text = R"(
# comment line
[architecture]
d_model = 64        # trailing comment
n_layers = 2
n_heads = 4
head_dim = 16
vocab_size = 256
seq_len = 128

[optimization]
peak_lr = 3e-3
max_steps = 500
batch_size = 8

[hybrid]
mode = baseline
rank = 16
k_groups = 4
beta = 0.01
kl_granularity = token
hybrid_set = q, v

[data]
corpus_files = a.txt, b.txt
val_fraction = 0.2

[run]
seed = 7
output_dir = runs/test
log_interval = 5
)";
  RunConfig cfg = parse_config_text(text);
  CHECK(cfg.model.d_model == 64);
  CHECK(cfg.model.n_layers == 2);
  CHECK(cfg.model.vocab_size == 256);
  CHECK(cfg.schedule.peak_lr == 3e-3);
  CHECK(cfg.schedule.max_steps == 500);
  CHECK(cfg.batch_size == 8);
  CHECK(cfg.model.mode == ModelMode::kBaseline);
  CHECK(cfg.model.rank == 16);
  CHECK(cfg.model.kl_granularity == KlGranularity::kToken);
  CHECK(cfg.model.hybrid_set == std::set<std::string>{"q", "v"});
  CHECK(cfg.corpus_files == std::vector<std::string>{"a.txt", "b.txt"});
  CHECK(cfg.val_fraction == 0.2);
  CHECK(cfg.seed == 7);
  CHECK(cfg.output_dir == "runs/test");
  CHECK(cfg.log_interval == 5);
  // untouched fields keep their defaults
  CHECK(cfg.model.d_hidden == 2048);
  CHECK(cfg.weight_decay == 0.1);
}

TEST_CASE("malformed input is rejected") {
  CHECK_THROWS_AS(parse_config_text("[architecture]\nnot_a_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[nonsense]\nd_model = 64\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("d_model = 64\n"), ConfigError);  // outside any section
  CHECK_THROWS_AS(parse_config_text("[architecture]\nd_model\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[architecture]\nd_model = twelve\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[architecture]\nd_model = 12.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[hybrid]\nmode = turbo\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[hybrid]\nkl_granularity = batch\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[architecture\nd_model = 64\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/path/config.ini"), ConfigError);
}

TEST_CASE("serialize/parse round trip is exact") {
  RunConfig cfg;
  cfg.model.d_model = 64;
  cfg.model.n_heads = 4;
  cfg.model.head_dim = 16;
  cfg.model.vocab_size = 256;
  cfg.model.beta = 1.0 / 3.0;  // not representable in short decimal
  cfg.schedule.peak_lr = 0.00072999999999999996;
  cfg.val_fraction = 0.1;
  cfg.corpus_files = {"x.bin", "y.bin"};
  cfg.model.hybrid_set = {"gate", "up"};
  cfg.model.kl_granularity = KlGranularity::kToken;
  cfg.output_dir = "runs/round_trip";

  std::string text = serialize_config(cfg);
  RunConfig back = parse_config_text(text);
  CHECK(back.model.beta == cfg.model.beta);
  CHECK(back.schedule.peak_lr == cfg.schedule.peak_lr);
  CHECK(back.val_fraction == cfg.val_fraction);
  CHECK(back.model.hybrid_set == cfg.model.hybrid_set);
  CHECK(back.corpus_files == cfg.corpus_files);
  // the canonical form is a fixed point
  CHECK(serialize_config(back) == text);
}
