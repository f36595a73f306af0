#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdpl/config.hpp"
#include "hdpl/optimizer.hpp"
#include "hdpl/rng.hpp"
#include "hdpl/transformer.hpp"

namespace hdpl {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything needed to resume deterministically.
struct TrainState {
  RunConfig config;
  TransformerModel<float> model;
  AdamW<float> optimizer;
  RngState rng;
  std::int64_t step = 0;
  double best_val = std::numeric_limits<double>::infinity();
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("checkpoint truncated or corrupt");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

struct ManifestEntry {
  std::string name;
  Shape dims;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic "HDPL", version u32, config blob (u32 length + UTF-8),
// tensor manifest (u32 count; per tensor u32 name length + name, u32 rank,
// u64 dims, u8 dtype tag 0 = f32), raw f32 data in manifest order with
// optimizer moments under "m." / "v." + parameter name, RNG state as two
// u64 words, trailing CRC32 of everything prior. All little-endian.
inline void save_checkpoint(TrainState& state, const std::string& path) {
  std::vector<std::string> names;
  std::vector<Tensor<float>*> params;
  for_each_param(state.model, [&](const std::string& n, Tensor<float>& t) {
    names.push_back(n);
    params.push_back(&t);
  });
  auto& slots = state.optimizer.slots();
  if (slots.empty()) {
    for (auto* p : params)
      slots.push_back({std::vector<float>(p->size(), 0.0f), std::vector<float>(p->size(), 0.0f)});
  }
  if (slots.size() != params.size())
    throw CheckpointError("optimizer slot count does not match parameter count");

  std::string blob = serialize_config(state.config);
  blob += "\n[state]\nstep = " + std::to_string(state.step) +
          "\nbest_val = " + detail::fmt_double(state.best_val) +
          "\nopt_step = " + std::to_string(state.optimizer.step_count()) + "\n";

  std::string buf;
  buf.append("HDPL");
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(blob.size()));
  buf.append(blob);

  auto put_entry = [&](const std::string& name, const Shape& dims) {
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    detail::put_u32(buf, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) detail::put_u64(buf, static_cast<std::uint64_t>(d));
    buf.push_back('\0');  // dtype tag: f32
  };
  detail::put_u32(buf, static_cast<std::uint32_t>(3 * params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) put_entry(names[i], params[i]->shape());
  for (std::size_t i = 0; i < params.size(); ++i) put_entry("m." + names[i], params[i]->shape());
  for (std::size_t i = 0; i < params.size(); ++i) put_entry("v." + names[i], params[i]->shape());

  auto put_floats = [&](const float* data, std::size_t n) {
    buf.append(reinterpret_cast<const char*>(data), n * sizeof(float));
  };
  for (auto* p : params) put_floats(p->data(), p->size());
  for (auto& s : slots) put_floats(s.m.data(), s.m.size());
  for (auto& s : slots) put_floats(s.v.data(), s.v.size());

  detail::put_u64(buf, state.rng.seed);
  detail::put_u64(buf, state.rng.counter);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const unsigned char*>(buf.data()), buf.size()));
  detail::put_u32(buf, crc);

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw CheckpointError("write failure: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError("cannot finalize checkpoint: " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw CheckpointError("checkpoint truncated or corrupt");

  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[buf.size() - 4 + i]))
                  << (8 * i);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const unsigned char*>(buf.data()), buf.size() - 4));
  if (crc != stored_crc) throw CheckpointError("checkpoint CRC mismatch (truncated or corrupt)");

  detail::Reader r{buf};
  if (r.bytes(4) != "HDPL") throw CheckpointError("bad checkpoint magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  std::string blob = r.bytes(r.u32());
  // split the [state] trailer off the run-config text
  auto state_pos = blob.find("\n[state]\n");
  if (state_pos == std::string::npos) throw CheckpointError("checkpoint missing state section");
  std::string cfg_text = blob.substr(0, state_pos);
  std::string state_text = blob.substr(state_pos + 9);

  TrainState state;
  state.config = parse_config_text(cfg_text);
  std::int64_t opt_step = 0;
  {
    std::istringstream ss(state_text);
    std::string line;
    while (std::getline(ss, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      std::string key = detail::trim(line.substr(0, eq));
      std::string val = detail::trim(line.substr(eq + 1));
      if (key == "step") state.step = std::stoll(val);
      else if (key == "best_val") state.best_val = std::stod(val);
      else if (key == "opt_step") opt_step = std::stoll(val);
      else throw CheckpointError("unknown state key in checkpoint: " + key);
    }
  }

  std::uint32_t count = r.u32();
  std::vector<detail::ManifestEntry> manifest(count);
  for (auto& e : manifest) {
    e.name = r.bytes(r.u32());
    std::uint32_t rank = r.u32();
    for (std::uint32_t i = 0; i < rank; ++i) e.dims.push_back(static_cast<std::int64_t>(r.u64()));
    if (r.bytes(1)[0] != '\0') throw CheckpointError("unsupported dtype tag");
  }

  // validate against the shapes implied by the embedded config
  auto expected = param_entries(state.config.model);
  if (count != 3 * expected.size())
    throw CheckpointError("manifest count mismatch: checkpoint has " + std::to_string(count / 3) +
                          " tensors, config implies " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    auto check = [&](std::size_t mi, const std::string& want_name) {
      if (manifest[mi].name != want_name || manifest[mi].dims != expected[i].shape)
        throw CheckpointError("manifest mismatch at '" + manifest[mi].name + "' (expected '" +
                              want_name + "' " + shape_str(expected[i].shape) + ")");
    };
    check(i, expected[i].name);
    check(expected.size() + i, "m." + expected[i].name);
    check(2 * expected.size() + i, "v." + expected[i].name);
  }

  state.model = init_model<float>(state.config.model, state.config.seed);
  state.optimizer = AdamW<float>({state.config.adam_beta1, state.config.adam_beta2,
                                  state.config.adam_eps, state.config.weight_decay});
  state.optimizer.set_step_count(opt_step);

  std::vector<Tensor<float>*> params;
  for_each_param(state.model, [&](const std::string&, Tensor<float>& t) { params.push_back(&t); });
  auto read_floats = [&](float* dst, std::int64_t n) {
    std::string raw = r.bytes(static_cast<std::size_t>(n) * sizeof(float));
    std::memcpy(dst, raw.data(), raw.size());
  };
  for (auto* p : params) read_floats(p->data(), p->size());
  auto& slots = state.optimizer.slots();
  for (auto* p : params)
    slots.push_back({std::vector<float>(p->size(), 0.0f), std::vector<float>(p->size(), 0.0f)});
  for (std::size_t i = 0; i < params.size(); ++i) read_floats(slots[i].m.data(), params[i]->size());
  for (std::size_t i = 0; i < params.size(); ++i) read_floats(slots[i].v.data(), params[i]->size());

  state.rng.seed = r.u64();
  state.rng.counter = r.u64();
  if (r.pos != buf.size() - 4) throw CheckpointError("checkpoint has trailing bytes");
  return state;
}

}  // namespace hdpl
