#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdpl/optimizer.hpp"
#include "hdpl/transformer.hpp"

namespace hdpl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run needs, defaulting to the reference configuration. The
// file format is flat key = value lines grouped into [architecture],
// [optimization], [hybrid], [data], [run] sections; unknown keys are
// rejected.
struct RunConfig {
  ModelConfig model;  // architecture + hybrid specifics
  ScheduleConfig schedule;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  std::int64_t batch_size = 32;
  double grad_clip = 1.0;  // 0 disables
  std::int64_t eval_interval = 250;
  std::int64_t checkpoint_interval = 250;
  std::int64_t eval_batches = 4;

  std::vector<std::string> corpus_files;
  double val_fraction = 0.1;

  std::uint64_t seed = 42;
  std::string output_dir = "runs/default";
  std::int64_t log_interval = 10;

  void validate() const {
    model.validate();
    schedule.validate();
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(val_fraction > 0 && val_fraction < 1))
      throw ConfigError("val_fraction must be in (0, 1)");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_num(const std::string& key, const std::string& v);

template <>
inline std::int64_t parse_num<std::int64_t>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  std::int64_t r;
  try {
    r = std::stoll(v, &pos);
  } catch (...) {
    throw ConfigError("invalid integer for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("invalid integer for " + key + ": '" + v + "'");
  return r;
}

template <>
inline std::uint64_t parse_num<std::uint64_t>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  std::uint64_t r;
  try {
    r = std::stoull(v, &pos);
  } catch (...) {
    throw ConfigError("invalid integer for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("invalid integer for " + key + ": '" + v + "'");
  return r;
}

template <>
inline double parse_num<double>(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double r;
  try {
    r = std::stod(v, &pos);
  } catch (...) {
    throw ConfigError("invalid number for " + key + ": '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError("invalid number for " + key + ": '" + v + "'");
  return r;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// Applies one "section.key = value" assignment.
inline void apply_config_entry(RunConfig& cfg, const std::string& section, const std::string& key,
                               const std::string& value) {
  using detail::parse_num;
  auto full = section + "." + key;
  if (section == "architecture") {
    if (key == "d_model") cfg.model.d_model = parse_num<std::int64_t>(full, value);
    else if (key == "n_layers") cfg.model.n_layers = parse_num<std::int64_t>(full, value);
    else if (key == "n_heads") cfg.model.n_heads = parse_num<std::int64_t>(full, value);
    else if (key == "head_dim") cfg.model.head_dim = parse_num<std::int64_t>(full, value);
    else if (key == "d_hidden") cfg.model.d_hidden = parse_num<std::int64_t>(full, value);
    else if (key == "vocab_size") cfg.model.vocab_size = parse_num<std::int64_t>(full, value);
    else if (key == "seq_len") cfg.model.seq_len = parse_num<std::int64_t>(full, value);
    else throw ConfigError("unknown key: " + full);
  } else if (section == "optimization") {
    if (key == "peak_lr") cfg.schedule.peak_lr = parse_num<double>(full, value);
    else if (key == "min_lr") cfg.schedule.min_lr = parse_num<double>(full, value);
    else if (key == "warmup_steps") cfg.schedule.warmup_steps = parse_num<std::int64_t>(full, value);
    else if (key == "max_steps") cfg.schedule.max_steps = parse_num<std::int64_t>(full, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_num<double>(full, value);
    else if (key == "beta1") cfg.adam_beta1 = parse_num<double>(full, value);
    else if (key == "beta2") cfg.adam_beta2 = parse_num<double>(full, value);
    else if (key == "eps") cfg.adam_eps = parse_num<double>(full, value);
    else if (key == "batch_size") cfg.batch_size = parse_num<std::int64_t>(full, value);
    else if (key == "grad_clip") cfg.grad_clip = parse_num<double>(full, value);
    else if (key == "eval_interval") cfg.eval_interval = parse_num<std::int64_t>(full, value);
    else if (key == "checkpoint_interval")
      cfg.checkpoint_interval = parse_num<std::int64_t>(full, value);
    else if (key == "eval_batches") cfg.eval_batches = parse_num<std::int64_t>(full, value);
    else throw ConfigError("unknown key: " + full);
  } else if (section == "hybrid") {
    if (key == "mode") {
      if (value == "baseline") cfg.model.mode = ModelMode::kBaseline;
      else if (value == "hybrid") cfg.model.mode = ModelMode::kHybrid;
      else throw ConfigError("mode must be baseline or hybrid, got '" + value + "'");
    } else if (key == "hybrid_set") {
      cfg.model.hybrid_set.clear();
      for (const auto& p : detail::split_list(value)) cfg.model.hybrid_set.insert(p);
    } else if (key == "rank") cfg.model.rank = parse_num<std::int64_t>(full, value);
    else if (key == "k_groups") cfg.model.k_groups = parse_num<std::int64_t>(full, value);
    else if (key == "beta") cfg.model.beta = parse_num<double>(full, value);
    else if (key == "kl_granularity") {
      if (value == "element") cfg.model.kl_granularity = KlGranularity::kElement;
      else if (value == "token") cfg.model.kl_granularity = KlGranularity::kToken;
      else throw ConfigError("kl_granularity must be element or token");
    } else throw ConfigError("unknown key: " + full);
  } else if (section == "data") {
    if (key == "corpus_files") cfg.corpus_files = detail::split_list(value);
    else if (key == "val_fraction") cfg.val_fraction = parse_num<double>(full, value);
    else throw ConfigError("unknown key: " + full);
  } else if (section == "run") {
    if (key == "seed") cfg.seed = parse_num<std::uint64_t>(full, value);
    else if (key == "output_dir") cfg.output_dir = value;
    else if (key == "log_interval") cfg.log_interval = parse_num<std::int64_t>(full, value);
    else throw ConfigError("unknown key: " + full);
  } else {
    throw ConfigError("unknown section: [" + section + "]");
  }
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  RunConfig cfg = std::move(base);
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("bad section header at line " +
                                                std::to_string(lineno));
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key = value at line " + std::to_string(lineno));
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("key '" + key + "' outside any section");
    apply_config_entry(cfg, section, key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config_text(text, std::move(base));
}

// Full resolved dump; re-parsing it reproduces the config exactly.
inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  auto d = detail::fmt_double;
  os << "[architecture]\n";
  os << "d_model = " << cfg.model.d_model << "\n";
  os << "n_layers = " << cfg.model.n_layers << "\n";
  os << "n_heads = " << cfg.model.n_heads << "\n";
  os << "head_dim = " << cfg.model.head_dim << "\n";
  os << "d_hidden = " << cfg.model.d_hidden << "\n";
  os << "vocab_size = " << cfg.model.vocab_size << "\n";
  os << "seq_len = " << cfg.model.seq_len << "\n";
  os << "\n[optimization]\n";
  os << "peak_lr = " << d(cfg.schedule.peak_lr) << "\n";
  os << "min_lr = " << d(cfg.schedule.min_lr) << "\n";
  os << "warmup_steps = " << cfg.schedule.warmup_steps << "\n";
  os << "max_steps = " << cfg.schedule.max_steps << "\n";
  os << "weight_decay = " << d(cfg.weight_decay) << "\n";
  os << "beta1 = " << d(cfg.adam_beta1) << "\n";
  os << "beta2 = " << d(cfg.adam_beta2) << "\n";
  os << "eps = " << d(cfg.adam_eps) << "\n";
  os << "batch_size = " << cfg.batch_size << "\n";
  os << "grad_clip = " << d(cfg.grad_clip) << "\n";
  os << "eval_interval = " << cfg.eval_interval << "\n";
  os << "checkpoint_interval = " << cfg.checkpoint_interval << "\n";
  os << "eval_batches = " << cfg.eval_batches << "\n";
  os << "\n[hybrid]\n";
  os << "mode = " << (cfg.model.mode == ModelMode::kHybrid ? "hybrid" : "baseline") << "\n";
  os << "hybrid_set = ";
  bool first = true;
  for (const auto& p : cfg.model.hybrid_set) {
    if (!first) os << ",";
    os << p;
    first = false;
  }
  os << "\n";
  os << "rank = " << cfg.model.rank << "\n";
  os << "k_groups = " << cfg.model.k_groups << "\n";
  os << "beta = " << d(cfg.model.beta) << "\n";
  os << "kl_granularity = "
     << (cfg.model.kl_granularity == KlGranularity::kElement ? "element" : "token") << "\n";
  os << "\n[data]\n";
  os << "corpus_files = ";
  first = true;
  for (const auto& f : cfg.corpus_files) {
    if (!first) os << ",";
    os << f;
    first = false;
  }
  os << "\n";
  os << "val_fraction = " << d(cfg.val_fraction) << "\n";
  os << "\n[run]\n";
  os << "seed = " << cfg.seed << "\n";
  os << "output_dir = " << cfg.output_dir << "\n";
  os << "log_interval = " << cfg.log_interval << "\n";
  return os.str();
}

}  // namespace hdpl
