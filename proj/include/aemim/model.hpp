#pragma once

#include <cmath>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "aemim/mim.hpp"
#include "aemim/ops.hpp"
#include "aemim/rng.hpp"
#include "aemim/tensor.hpp"

namespace aemim {

// Which parameters exist in duplicate (clean vs adversarial copy).
enum class AdapterScope { None, Norm, ClsToken, Both };

enum class Domain { Clean, Adversarial };

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int enc_dim = 64, enc_depth = 4, enc_heads = 4;
  int dec_dim = 32, dec_depth = 2, dec_heads = 2;
  AdapterScope adapter_scope = AdapterScope::Norm;
  bool adapt_decoder = true;

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0)
      throw ConfigError("model: sizes must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("model: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    if (enc_dim <= 0 || enc_depth <= 0 || enc_heads <= 0 || dec_dim <= 0 || dec_depth <= 0 ||
        dec_heads <= 0)
      throw ConfigError("model: dims, depths and heads must be positive");
    if (enc_dim % enc_heads != 0)
      throw ConfigError("model: enc_dim " + std::to_string(enc_dim) + " not divisible by " +
                        std::to_string(enc_heads) + " heads");
    if (dec_dim % dec_heads != 0)
      throw ConfigError("model: dec_dim " + std::to_string(dec_dim) + " not divisible by " +
                        std::to_string(dec_heads) + " heads");
    if (enc_dim % 4 != 0 || dec_dim % 4 != 0)
      throw ConfigError("model: embedding dims must be divisible by 4 (2-D sincos tables)");
  }
};

// All parameters, split into the shared trunk and the two adapter copies.
// Partitions are disjoint by name; phi_c and phi_a mirror each other.
template <typename T>
struct ParamStoreT {
  std::map<std::string, TensorT<T>> psi;
  std::map<std::string, TensorT<T>> phi_c;
  std::map<std::string, TensorT<T>> phi_a;

  const TensorT<T>& get(const std::string& name, Domain d) const {
    auto it = psi.find(name);
    if (it != psi.end()) return it->second;
    const auto& adapters = d == Domain::Clean ? phi_c : phi_a;
    it = adapters.find(name);
    if (it == adapters.end()) throw ContractViolation("unknown parameter " + name);
    return it->second;
  }

  // Visits every parameter as (partition, name, tensor), partitions in the
  // fixed order psi, phi_c, phi_a and names in map order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& [n, t] : psi) fn("psi", n, t);
    for (auto& [n, t] : phi_c) fn("phi_c", n, t);
    for (auto& [n, t] : phi_a) fn("phi_a", n, t);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [n, t] : psi) fn("psi", n, t);
    for (const auto& [n, t] : phi_c) fn("phi_c", n, t);
    for (const auto& [n, t] : phi_a) fn("phi_a", n, t);
  }

  size_t total_params() const {
    size_t n = 0;
    for_each([&](const char*, const std::string&, const TensorT<T>& t) { n += t.numel(); });
    return n;
  }
};

namespace detail {

template <typename T>
TensorT<T> xavier_uniform(int rows, int cols, Rng& rng) {
  auto t = TensorT<T>::zeros({rows, cols});
  const double limit = std::sqrt(6.0 / (rows + cols));
  for (size_t i = 0; i < t.numel(); ++i)
    (*t.data)[i] = static_cast<T>(rng.uniform(-limit, limit));
  t.set_requires_grad();
  return t;
}

template <typename T>
TensorT<T> const_param(Shape s, T v) {
  auto t = TensorT<T>::full(std::move(s), v);
  t.set_requires_grad();
  return t;
}

// Classic 2-D sine/cosine table: half the channels encode the row position,
// half the column, each as interleaved sin/cos of geometric frequencies.
template <typename T>
TensorT<T> make_sincos_table(int gh, int gw, int dim) {
  const int half = dim / 2, quarter = dim / 4;
  auto table = TensorT<T>::zeros({gh * gw, dim});
  std::vector<double> omega(static_cast<size_t>(quarter));
  for (int i = 0; i < quarter; ++i)
    omega[static_cast<size_t>(i)] = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x) {
      T* row = table.ptr() + static_cast<size_t>(y * gw + x) * dim;
      for (int i = 0; i < quarter; ++i) {
        row[i] = static_cast<T>(std::sin(y * omega[static_cast<size_t>(i)]));
        row[quarter + i] = static_cast<T>(std::cos(y * omega[static_cast<size_t>(i)]));
        row[half + i] = static_cast<T>(std::sin(x * omega[static_cast<size_t>(i)]));
        row[half + quarter + i] = static_cast<T>(std::cos(x * omega[static_cast<size_t>(i)]));
      }
    }
  return table;
}

template <typename T>
const TensorT<T>& pos_table(int gh, int gw, int dim) {
  static std::map<std::tuple<int, int, int>, TensorT<T>> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(gh, gw, dim);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, make_sincos_table<T>(gh, gw, dim)).first;
  return it->second;
}

constexpr double kLnEps = 1e-6;

}  // namespace detail

template <typename T>
ParamStoreT<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStoreT<T> ps;
  Rng rng(seed, "init");

  const bool adapt_norm =
      cfg.adapter_scope == AdapterScope::Norm || cfg.adapter_scope == AdapterScope::Both;
  const bool adapt_cls =
      cfg.adapter_scope == AdapterScope::ClsToken || cfg.adapter_scope == AdapterScope::Both;

  auto put_shared = [&](const std::string& name, TensorT<T> t) { ps.psi.emplace(name, std::move(t)); };
  auto put_adapter = [&](const std::string& name, TensorT<T> t, bool duplicated) {
    if (duplicated) {
      ps.phi_c.emplace(name, std::move(t));
    } else {
      ps.psi.emplace(name, std::move(t));
    }
  };
  auto put_norm = [&](const std::string& prefix, int dim, bool decoder_side) {
    bool dup = adapt_norm && (!decoder_side || cfg.adapt_decoder);
    put_adapter(prefix + ".g", detail::const_param<T>({dim}, T(1)), dup);
    put_adapter(prefix + ".b", detail::const_param<T>({dim}, T(0)), dup);
  };
  auto put_linear = [&](const std::string& prefix, int in, int out) {
    put_shared(prefix + ".w", detail::xavier_uniform<T>(in, out, rng));
    put_shared(prefix + ".b", detail::const_param<T>({out}, T(0)));
  };
  auto put_block = [&](const std::string& prefix, int dim, bool decoder_side) {
    put_norm(prefix + ".ln1", dim, decoder_side);
    put_linear(prefix + ".attn.q", dim, dim);
    put_linear(prefix + ".attn.k", dim, dim);
    put_linear(prefix + ".attn.v", dim, dim);
    put_linear(prefix + ".attn.o", dim, dim);
    put_norm(prefix + ".ln2", dim, decoder_side);
    put_linear(prefix + ".mlp.fc1", dim, 4 * dim);
    put_linear(prefix + ".mlp.fc2", 4 * dim, dim);
  };

  put_linear("enc.patch_embed", cfg.patch_dim(), cfg.enc_dim);
  put_adapter("enc.cls", detail::const_param<T>({1, cfg.enc_dim}, T(0)), adapt_cls);
  for (int k = 0; k < cfg.enc_depth; ++k) put_block("enc.blk" + std::to_string(k), cfg.enc_dim, false);
  put_norm("enc.norm", cfg.enc_dim, false);

  put_linear("dec.embed", cfg.enc_dim, cfg.dec_dim);
  put_shared("dec.mask_token", detail::const_param<T>({1, cfg.dec_dim}, T(0)));
  for (int k = 0; k < cfg.dec_depth; ++k) put_block("dec.blk" + std::to_string(k), cfg.dec_dim, true);
  put_norm("dec.norm", cfg.dec_dim, true);
  put_linear("dec.head", cfg.dec_dim, cfg.patch_dim());

  for (const auto& [name, t] : ps.phi_c) ps.phi_a.emplace(name, t.clone());
  return ps;
}

namespace detail {

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix,
                  Domain d) {
  return add(matmul(x, ps.get(prefix + ".w", d)), ps.get(prefix + ".b", d));
}

template <typename T>
TensorT<T> norm(const TensorT<T>& x, const ParamStoreT<T>& ps, const std::string& prefix,
                Domain d) {
  return layer_norm(x, ps.get(prefix + ".g", d), ps.get(prefix + ".b", d),
                    static_cast<T>(kLnEps));
}

// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
template <typename T>
TensorT<T> transformer_block(TensorT<T> x, const ParamStoreT<T>& ps, const std::string& prefix,
                             int heads, Domain d) {
  const int s = x.shape[0], dim = x.shape[1];
  const int dh = dim / heads;

  auto h = norm(x, ps, prefix + ".ln1", d);
  auto split = [&](TensorT<T> proj) {
    return permute(reshape(proj, {s, heads, dh}), {1, 0, 2});
  };
  auto q = split(linear(h, ps, prefix + ".attn.q", d));
  auto kt = permute(reshape(linear(h, ps, prefix + ".attn.k", d), {s, heads, dh}), {1, 2, 0});
  auto v = split(linear(h, ps, prefix + ".attn.v", d));

  auto att = softmax(scale(matmul(q, kt), static_cast<T>(1.0 / std::sqrt(double(dh)))), -1);
  auto ctx = reshape(permute(matmul(att, v), {1, 0, 2}), {s, dim});
  x = add(x, linear(ctx, ps, prefix + ".attn.o", d));

  auto h2 = norm(x, ps, prefix + ".ln2", d);
  auto m = linear(gelu(linear(h2, ps, prefix + ".mlp.fc1", d)), ps, prefix + ".mlp.fc2", d);
  return add(x, m);
}

}  // namespace detail

// Encoder over visible patches only: class token plus the unmasked tokens.
// Raw-pixel patches are brought to unit scale before embedding. The final
// norm belongs to the per-branch adapters; callers reading the shared
// representation rather than feeding the decoder can skip it.
template <typename T>
TensorT<T> encode(const TensorT<T>& patches, const MaskSpec& mask, Domain d,
                  const ParamStoreT<T>& ps, const ModelConfig& cfg, bool final_norm = true) {
  if (patches.ndim() != 2 || patches.shape[0] != cfg.n_patches() ||
      patches.shape[1] != cfg.patch_dim())
    throw DimensionError("encode: expected patches [" + std::to_string(cfg.n_patches()) + "," +
                         std::to_string(cfg.patch_dim()) + "], got " + shape_str(patches.shape));
  if (mask.n_patches != cfg.n_patches())
    throw ContractViolation("encode: mask covers " + std::to_string(mask.n_patches) +
                            " patches, model has " + std::to_string(cfg.n_patches()));
  mask.validate();

  auto x = scale(patches, static_cast<T>(1.0 / 255.0));
  auto tok = detail::linear(x, ps, "enc.patch_embed", d);
  tok = add(tok, detail::pos_table<T>(cfg.grid(), cfg.grid(), cfg.enc_dim));
  auto vis = gather_rows(tok, mask.visible());
  auto seq = concat_rows<T>({ps.get("enc.cls", d), vis});
  for (int k = 0; k < cfg.enc_depth; ++k)
    seq = detail::transformer_block(seq, ps, "enc.blk" + std::to_string(k), cfg.enc_heads, d);
  return final_norm ? detail::norm(seq, ps, "enc.norm", d) : seq;
}

// Rebuilds the full token sequence for the decoder: visible tokens return to
// their patch positions, the shared mask token fills the masked positions.
template <typename T>
TensorT<T> assemble_decoder_tokens(const TensorT<T>& visible_tokens, const MaskSpec& mask,
                                   const TensorT<T>& mask_token) {
  if (visible_tokens.shape[0] != mask.n_visible())
    throw ContractViolation("assemble_decoder_tokens: got " +
                            std::to_string(visible_tokens.shape[0]) + " tokens for " +
                            std::to_string(mask.n_visible()) + " visible patches");
  auto rep = gather_rows(mask_token, std::vector<int>(static_cast<size_t>(mask.n_masked()), 0));
  auto combined = concat_rows<T>({visible_tokens, rep});
  std::vector<int> order = mask.visible();
  order.insert(order.end(), mask.masked.begin(), mask.masked.end());
  return scatter_rows(combined, order, mask.n_patches);
}

// Decoder: predicts pixels for every patch (visible and masked).
template <typename T>
TensorT<T> decode(const TensorT<T>& features, const MaskSpec& mask, Domain d,
                  const ParamStoreT<T>& ps, const ModelConfig& cfg) {
  if (features.ndim() != 2 || features.shape[0] != mask.n_visible() + 1 ||
      features.shape[1] != cfg.enc_dim)
    throw ContractViolation("decode: features " + shape_str(features.shape) +
                            " inconsistent with " + std::to_string(mask.n_visible()) +
                            " visible patches at width " + std::to_string(cfg.enc_dim));

  auto tok = detail::linear(features, ps, "dec.embed", d);
  auto cls = gather_rows(tok, {0});
  std::vector<int> rest(static_cast<size_t>(mask.n_visible()));
  for (int i = 0; i < mask.n_visible(); ++i) rest[static_cast<size_t>(i)] = i + 1;
  auto vis = gather_rows(tok, rest);

  auto full = assemble_decoder_tokens(vis, mask, ps.get("dec.mask_token", d));
  full = add(full, detail::pos_table<T>(cfg.grid(), cfg.grid(), cfg.dec_dim));
  auto seq = concat_rows<T>({cls, full});
  for (int k = 0; k < cfg.dec_depth; ++k)
    seq = detail::transformer_block(seq, ps, "dec.blk" + std::to_string(k), cfg.dec_heads, d);
  seq = detail::norm(seq, ps, "dec.norm", d);
  auto pred = detail::linear(seq, ps, "dec.head", d);

  std::vector<int> patch_rows(static_cast<size_t>(mask.n_patches));
  for (int i = 0; i < mask.n_patches; ++i) patch_rows[static_cast<size_t>(i)] = i + 1;
  return gather_rows(pred, patch_rows);
}

template <typename T>
TensorT<T> forward_mim(const TensorT<T>& patches, const MaskSpec& mask, Domain d,
                       const ParamStoreT<T>& ps, const ModelConfig& cfg) {
  return decode(encode(patches, mask, d, ps, cfg), mask, d, ps, cfg);
}

// Encoder-side shared weights plus clean adapters; what survives pre-training.
template <typename T>
struct FinetuneExtractT {
  std::map<std::string, TensorT<T>> psi_e;
  std::map<std::string, TensorT<T>> phi_c_e;
};

template <typename T>
FinetuneExtractT<T> extract_finetune_params(const ParamStoreT<T>& ps) {
  FinetuneExtractT<T> ex;
  for (const auto& [name, t] : ps.psi)
    if (name.rfind("enc.", 0) == 0) ex.psi_e.emplace(name, t);
  for (const auto& [name, t] : ps.phi_c)
    if (name.rfind("enc.", 0) == 0) ex.phi_c_e.emplace(name, t);
  return ex;
}

// Store usable by encode(); the adversarial copies are rebuilt as clones so
// clean-domain behavior is bit-identical to the source model.
template <typename T>
ParamStoreT<T> to_encoder_store(const FinetuneExtractT<T>& ex) {
  ParamStoreT<T> ps;
  ps.psi = ex.psi_e;
  ps.phi_c = ex.phi_c_e;
  for (const auto& [name, t] : ex.phi_c_e) ps.phi_a.emplace(name, t.clone());
  return ps;
}

using ParamStore = ParamStoreT<float>;
using FinetuneExtract = FinetuneExtractT<float>;

inline ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  return init_params<float>(cfg, seed);
}

}  // namespace aemim
