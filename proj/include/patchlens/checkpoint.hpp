#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchlens/config.hpp"
#include "patchlens/errors.hpp"
#include "patchlens/rng.hpp"
#include "patchlens/tensor.hpp"
#include "patchlens/version.hpp"

namespace patchlens {

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_w;   // [d_model]
  Tensor<T> W_Q;     // [n_heads, d_model, d_head]
  Tensor<T> W_K;     // [n_heads, d_model, d_head]
  Tensor<T> W_V;     // [n_heads, d_model, d_head]
  Tensor<T> W_O;     // [n_heads, d_head, d_model]
  Tensor<T> ln2_w;   // [d_model]
  Tensor<T> W_gate;  // [d_model, d_mlp]
  Tensor<T> W_up;    // [d_model, d_mlp]
  Tensor<T> W_down;  // [d_mlp, d_model]
};

// Full parameter set. Immutable once loaded (by convention): forward/backward
// never write to it, so one checkpoint may be shared across threads.
template <typename T>
struct Checkpoint {
  ModelConfig config;
  Tensor<T> W_E;  // [vocab, d_model]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> final_ln_w;  // [d_model]
  Tensor<T> W_U;         // [d_model, vocab]

  // Visits every tensor in canonical table order (this order defines the
  // blob layout and is relied on by the optimizer and masks).
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("embed.W_E", W_E);
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      fn(p + "ln1.w", blocks[l].ln1_w);
      fn(p + "attn.W_Q", blocks[l].W_Q);
      fn(p + "attn.W_K", blocks[l].W_K);
      fn(p + "attn.W_V", blocks[l].W_V);
      fn(p + "attn.W_O", blocks[l].W_O);
      fn(p + "ln2.w", blocks[l].ln2_w);
      fn(p + "mlp.W_gate", blocks[l].W_gate);
      fn(p + "mlp.W_up", blocks[l].W_up);
      fn(p + "mlp.W_down", blocks[l].W_down);
    }
    fn("final_ln.w", final_ln_w);
    fn("unembed.W_U", W_U);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<Checkpoint*>(this)->for_each_tensor(
        [&](const std::string& name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
  }

  int64_t param_count() const {
    int64_t n = 0;
    for_each_tensor([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  template <typename U>
  Checkpoint<U> cast() const {
    Checkpoint<U> out;
    out.config = config;
    out.W_E = W_E.template cast<U>();
    out.blocks.reserve(blocks.size());
    for (const auto& b : blocks)
      out.blocks.push_back({b.ln1_w.template cast<U>(), b.W_Q.template cast<U>(),
                            b.W_K.template cast<U>(), b.W_V.template cast<U>(),
                            b.W_O.template cast<U>(), b.ln2_w.template cast<U>(),
                            b.W_gate.template cast<U>(), b.W_up.template cast<U>(),
                            b.W_down.template cast<U>()});
    out.final_ln_w = final_ln_w.template cast<U>();
    out.W_U = W_U.template cast<U>();
    return out;
  }
};

namespace detail {

inline std::vector<int64_t> expected_shape(const std::string& name, const ModelConfig& c) {
  auto tail = [&](const std::string& prefix) { return name.substr(prefix.size()); };
  if (name == "embed.W_E") return {c.vocab_size, c.d_model};
  if (name == "final_ln.w") return {c.d_model};
  if (name == "unembed.W_U") return {c.d_model, c.vocab_size};
  if (name.rfind("blocks.", 0) == 0) {
    const std::string rest = tail("blocks.");
    const size_t dot = rest.find('.');
    const std::string field = rest.substr(dot + 1);
    if (field == "ln1.w" || field == "ln2.w") return {c.d_model};
    if (field == "attn.W_Q" || field == "attn.W_K" || field == "attn.W_V")
      return {c.n_heads, c.d_model, c.d_head};
    if (field == "attn.W_O") return {c.n_heads, c.d_head, c.d_model};
    if (field == "mlp.W_gate" || field == "mlp.W_up") return {c.d_model, c.d_mlp};
    if (field == "mlp.W_down") return {c.d_mlp, c.d_model};
  }
  throw LoadError("checkpoint: unknown tensor name '" + name + "'");
}

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string fnv1a64_hex(uint64_t h) {
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = hex[h & 0xF];
    h >>= 4;
  }
  return "fnv1a64:" + s;
}

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  else return "f64";
}

}  // namespace detail

// Fresh random initialization: N(0, 0.02) weights with the residual-writing
// matrices (W_O, W_down) shrunk by 1/sqrt(2*n_layers), norm weights at 1.
template <typename T>
Checkpoint<T> init_checkpoint(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Checkpoint<T> ck;
  ck.config = config;
  Rng rng(seed);
  const T base = T(0.02);
  const T resid = base / std::sqrt(T(2 * config.n_layers));
  ck.W_E = Tensor<T>::randn({config.vocab_size, config.d_model}, rng, base);
  ck.blocks.resize(static_cast<size_t>(config.n_layers));
  for (auto& b : ck.blocks) {
    b.ln1_w = Tensor<T>::full({config.d_model}, T(1));
    b.W_Q = Tensor<T>::randn({config.n_heads, config.d_model, config.d_head}, rng, base);
    b.W_K = Tensor<T>::randn({config.n_heads, config.d_model, config.d_head}, rng, base);
    b.W_V = Tensor<T>::randn({config.n_heads, config.d_model, config.d_head}, rng, base);
    b.W_O = Tensor<T>::randn({config.n_heads, config.d_head, config.d_model}, rng, resid);
    b.ln2_w = Tensor<T>::full({config.d_model}, T(1));
    b.W_gate = Tensor<T>::randn({config.d_model, config.d_mlp}, rng, base);
    b.W_up = Tensor<T>::randn({config.d_model, config.d_mlp}, rng, base);
    b.W_down = Tensor<T>::randn({config.d_mlp, config.d_model}, rng, resid);
  }
  ck.final_ln_w = Tensor<T>::full({config.d_model}, T(1));
  ck.W_U = Tensor<T>::randn({config.d_model, config.vocab_size}, rng, base);
  return ck;
}

// Manifest (JSON) + raw little-endian blob, tensors in table order.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path mpath(manifest_path);
  const std::string blob_name = mpath.stem().string() + ".blob";
  const fs::path bpath = mpath.parent_path() / blob_name;

  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::ofstream blob(bpath, std::ios::binary | std::ios::trunc);
  if (!blob) throw ConfigError("checkpoint: cannot open '" + bpath.string() + "' for writing");

  uint64_t hash = 14695981039346656037ull;
  int64_t offset = 0;
  ck.for_each_tensor([&](const std::string& name, const Tensor<T>& t) {
    const int64_t bytes = t.numel() * static_cast<int64_t>(sizeof(T));
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["dtype"] = detail::dtype_name<T>();
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    entry["length"] = bytes;
    tensors.push_back(entry);
    blob.write(reinterpret_cast<const char*>(t.data.data()), bytes);
    hash = detail::fnv1a64(t.data.data(), static_cast<size_t>(bytes), hash);
    offset += bytes;
  });
  blob.flush();
  if (!blob) throw ConfigError("checkpoint: write failed for '" + bpath.string() + "'");

  nlohmann::ordered_json manifest;
  manifest["version"] = kVersion;
  manifest["config"] = config_to_json(ck.config);
  manifest["tensors"] = tensors;
  manifest["checksum"] = detail::fnv1a64_hex(hash);
  manifest["blob"] = blob_name;

  std::ofstream mf(mpath, std::ios::binary | std::ios::trunc);
  if (!mf) throw ConfigError("checkpoint: cannot open '" + manifest_path + "' for writing");
  mf << manifest.dump(2) << '\n';
  if (!mf) throw ConfigError("checkpoint: write failed for '" + manifest_path + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw LoadError("checkpoint: cannot open manifest '" + manifest_path + "'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint: bad manifest JSON in '" + manifest_path + "': " + e.what());
  }

  ModelConfig config = config_from_json(manifest.at("config"));
  const std::string blob_name = manifest.value("blob", "");
  if (blob_name.empty()) throw LoadError("checkpoint: manifest missing 'blob' field");
  const fs::path bpath = fs::path(manifest_path).parent_path() / blob_name;
  std::ifstream blob(bpath, std::ios::binary);
  if (!blob) throw LoadError("checkpoint: cannot open blob '" + bpath.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  const std::string want_checksum = manifest.value("checksum", "");
  const std::string got_checksum = detail::fnv1a64_hex(detail::fnv1a64(bytes.data(), bytes.size()));
  if (want_checksum != got_checksum)
    throw LoadError("checkpoint: blob checksum mismatch (manifest " + want_checksum + ", blob " +
                    got_checksum + ")");

  // Index the manifest's tensor table by name.
  struct Entry {
    std::vector<int64_t> shape;
    int64_t offset = 0, length = 0;
    std::string dtype;
  };
  std::unordered_map<std::string, Entry> table;
  for (const auto& e : manifest.at("tensors")) {
    Entry entry;
    entry.shape = e.at("shape").get<std::vector<int64_t>>();
    entry.offset = e.at("offset").get<int64_t>();
    entry.length = e.at("length").get<int64_t>();
    entry.dtype = e.at("dtype").get<std::string>();
    table.emplace(e.at("name").get<std::string>(), entry);
  }

  Checkpoint<T> ck;
  ck.config = config;
  ck.blocks.resize(static_cast<size_t>(config.n_layers));
  ck.for_each_tensor([&](const std::string& name, Tensor<T>& t) {
    auto it = table.find(name);
    if (it == table.end()) throw LoadError("checkpoint: missing tensor '" + name + "'");
    const Entry& e = it->second;
    const auto want = detail::expected_shape(name, config);
    if (e.shape != want)
      throw LoadError("checkpoint: tensor '" + name + "' has shape " + shape_str(e.shape) +
                      ", expected " + shape_str(want));
    if (e.dtype != detail::dtype_name<T>())
      throw LoadError("checkpoint: tensor '" + name + "' has dtype " + e.dtype + ", expected " +
                      detail::dtype_name<T>());
    t = Tensor<T>(want);
    const int64_t bytes_needed = t.numel() * static_cast<int64_t>(sizeof(T));
    if (e.length != bytes_needed || e.offset < 0 ||
        e.offset + e.length > static_cast<int64_t>(bytes.size()))
      throw LoadError("checkpoint: tensor '" + name + "' has bad offset/length");
    std::memcpy(t.data.data(), bytes.data() + e.offset, static_cast<size_t>(bytes_needed));
    if (!t.all_finite()) throw LoadError("checkpoint: tensor '" + name + "' has non-finite values");
  });
  return ck;
}

// Convenience for tools that accept either precision on disk.
inline std::string checkpoint_dtype(const std::string& manifest_path) {
  std::ifstream mf(manifest_path, std::ios::binary);
  if (!mf) throw LoadError("checkpoint: cannot open manifest '" + manifest_path + "'");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint: bad manifest JSON in '" + manifest_path + "': " + e.what());
  }
  const auto& tensors = manifest.at("tensors");
  if (tensors.empty()) throw LoadError("checkpoint: manifest has no tensors");
  return tensors.front().at("dtype").get<std::string>();
}

}  // namespace patchlens
