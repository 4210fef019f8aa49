#pragma once

#include <json.hpp>

#include <cstring>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dspo/common.hpp"
#include "dspo/denoiser.hpp"
#include "dspo/nn.hpp"

namespace dspo {

/// Everything needed to continue a run: weights, optimizer moments, RNG state,
/// and the loss curve so far.
struct Checkpoint {
  long step = 0;
  DenoiserConfig model;
  nn::ParamSet params;
  long optimizer_steps = 0;
  nn::ParamSet adam_m, adam_v;
  std::string rng_state;  // textual mt19937_64 state
  std::string config_hash;
  std::string method;
  std::vector<double> loss_history;
};

namespace detail {
inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'P', 'O', 'C', 'K', 'P', '1'};

inline nlohmann::json layout(const nn::ParamSet& p) {
  auto arr = nlohmann::json::array();
  for (const auto& t : p) arr.push_back({{"name", t.name}, {"shape", t.shape}});
  return arr;
}

inline void append_values(std::string& out, const nn::ParamSet& p) {
  for (const auto& t : p)
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
}

inline nn::ParamSet read_values(const nlohmann::json& layout, const std::string& blob, std::size_t& offset) {
  nn::ParamSet p;
  for (const auto& entry : layout) {
    const std::size_t i = p.add(entry.at("name").get<std::string>(), entry.at("shape").get<std::vector<int>>());
    const std::size_t bytes = p[i].values.size() * sizeof(float);
    if (offset + bytes > blob.size()) throw IoError("checkpoint payload truncated");
    std::memcpy(p[i].values.data(), blob.data() + offset, bytes);
    offset += bytes;
  }
  return p;
}
}  // namespace detail

/// Layout: 8-byte magic, 8-byte header length, JSON header, then raw float32
/// params, Adam first and second moments. Written atomically.
inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  nlohmann::json header = {{"step", ck.step},
                           {"model", ck.model},
                           {"layout", detail::layout(ck.params)},
                           {"optimizer_steps", ck.optimizer_steps},
                           {"has_moments", ck.adam_m.count() > 0},
                           {"rng_state", ck.rng_state},
                           {"config_hash", ck.config_hash},
                           {"method", ck.method},
                           {"loss_history", ck.loss_history}};
  const std::string h = header.dump();
  std::string out(detail::kCheckpointMagic, 8);
  const std::uint64_t n = h.size();
  out.append(reinterpret_cast<const char*>(&n), sizeof n);
  out += h;
  detail::append_values(out, ck.params);
  if (ck.adam_m.count()) {
    detail::append_values(out, ck.adam_m);
    detail::append_values(out, ck.adam_v);
  }
  write_file_atomic(path, out);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const std::string blob = read_text(path);
  if (blob.size() < 16 || std::memcmp(blob.data(), detail::kCheckpointMagic, 8) != 0)
    throw IoError(path.string() + " is not a checkpoint");
  std::uint64_t n = 0;
  std::memcpy(&n, blob.data() + 8, sizeof n);
  if (16 + n > blob.size()) throw IoError(path.string() + ": header truncated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(blob.substr(16, n));
  } catch (const std::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  Checkpoint ck;
  ck.step = h.at("step");
  ck.model = h.at("model").get<DenoiserConfig>();
  ck.optimizer_steps = h.at("optimizer_steps");
  ck.rng_state = h.at("rng_state");
  ck.config_hash = h.at("config_hash");
  ck.method = h.at("method");
  ck.loss_history = h.at("loss_history").get<std::vector<double>>();
  std::size_t offset = 16 + n;
  ck.params = detail::read_values(h.at("layout"), blob, offset);
  if (h.at("has_moments").get<bool>()) {
    ck.adam_m = detail::read_values(h.at("layout"), blob, offset);
    ck.adam_v = detail::read_values(h.at("layout"), blob, offset);
  }
  if (offset != blob.size()) throw IoError(path.string() + ": trailing bytes");
  return ck;
}

/// Denoiser with the checkpoint's configuration and weights.
inline Denoiser model_from_checkpoint(const Checkpoint& ck) {
  Denoiser d(ck.model);
  if (d.params().count() != ck.params.count()) throw IoError("checkpoint does not match the network layout");
  for (std::size_t i = 0; i < ck.params.count(); ++i) {
    if (d.params()[i].name != ck.params[i].name || d.params()[i].shape != ck.params[i].shape)
      throw IoError("checkpoint tensor '" + ck.params[i].name + "' does not match the network");
    d.params()[i].values = ck.params[i].values;
  }
  return d;
}

inline Denoiser load_model(const fs::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 rng_from_string(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw IoError("corrupt RNG state in checkpoint");
  return rng;
}

}  // namespace dspo
