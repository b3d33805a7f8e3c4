#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "patchlens/checkpoint.hpp"
#include "patchlens/hooks.hpp"
#include "patchlens/kernels.hpp"
#include "patchlens/metric_spec.hpp"

namespace patchlens {

namespace detail {

// Contiguous copy of one head's weight slice, e.g. W_Q[h] -> [d_model, d_head].
template <typename T>
Tensor<T> head_slice(const Tensor<T>& w, int64_t h) {
  const int64_t a = w.dim(1), b = w.dim(2);
  Tensor<T> out({a, b});
  std::copy_n(w.data.data() + h * a * b, a * b, out.data.data());
  return out;
}

// Accumulate a [a,b] gradient slice back into head h of dw [heads,a,b].
template <typename T>
void add_head_slice(Tensor<T>& dw, int64_t h, const Tensor<T>& g) {
  const int64_t a = dw.dim(1), b = dw.dim(2);
  T* dst = dw.data.data() + h * a * b;
  for (int64_t i = 0; i < a * b; ++i) dst[i] += g.data[i];
}

// RoPE on a single head laid out [seq, d_head].
template <typename T>
Tensor<T> rope_head(Tensor<T> x, T base, int64_t offset, T sign) {
  const int64_t seq = x.dim(0), dh = x.dim(1);
  x.shape = {seq, 1, dh};
  Tensor<T> y;
  rope_rotate(x, base, offset, sign, y);
  y.shape = {seq, dh};
  return y;
}

}  // namespace detail

// Everything the backward pass needs from a forward run. Per-head tensors are
// stored contiguously ([seq, d_head]; probs [seq, kv_len]) so the backward is
// plain calls into the finite-difference-tested kernels.
template <typename T>
struct LayerTrace {
  Tensor<T> resid_pre;  // [seq, d_model], after any resid_pre patch
  Tensor<T> x1;         // rmsnorm(resid_pre)
  std::vector<Tensor<T>> q, k, v, probs, ctx;  // per head; q/k post-rope
  Tensor<T> resid_mid;  // resid_pre + attn_out
  Tensor<T> x2;         // rmsnorm(resid_mid)
  Tensor<T> gate_pre, up_pre, act;  // [seq, d_mlp]
};

template <typename T>
struct ForwardTrace {
  std::vector<int64_t> tokens;
  bool patched = false;
  std::vector<LayerTrace<T>> layers;
  Tensor<T> resid_final;  // input to the final norm
  Tensor<T> ln_out;       // rmsnorm(resid_final)
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [seq, vocab]
  ActivationCache<T> cache;
  std::shared_ptr<ForwardTrace<T>> trace;  // present iff keep_trace
};

namespace detail {

template <typename T>
void check_tokens(std::span<const int64_t> tokens, const ModelConfig& c) {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (static_cast<int64_t>(tokens.size()) > c.max_seq)
    throw ShapeError("forward: sequence too long (" + std::to_string(tokens.size()) + " > max_seq " +
                     std::to_string(c.max_seq) + ")");
  for (int64_t id : tokens)
    if (id < 0 || id >= c.vocab_size)
      throw ShapeError("forward: token id " + std::to_string(id) + " out of vocab");
}

template <typename T>
Tensor<T> embed(std::span<const int64_t> tokens, const Tensor<T>& w_e) {
  const int64_t n = static_cast<int64_t>(tokens.size()), d = w_e.dim(1);
  Tensor<T> resid({n, d});
  for (int64_t t = 0; t < n; ++t)
    std::copy_n(w_e.row(tokens[static_cast<size_t>(t)]), d, resid.row(t));
  return resid;
}

// Causal scaled dot-product scores for one head; kv may be longer than q
// during cached decoding (q positions start at kv_len - q_len).
template <typename T>
Tensor<T> causal_scores(const Tensor<T>& q, const Tensor<T>& k) {
  const int64_t qn = q.dim(0), kn = k.dim(0), dh = q.dim(1);
  const int64_t base = kn - qn;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  Tensor<T> scores({qn, kn});
  for (int64_t i = 0; i < qn; ++i) {
    const T* qr = q.row(i);
    T* sr = scores.row(i);
    for (int64_t j = 0; j < kn; ++j) {
      if (j > base + i) {
        sr[j] = neg_inf;
        continue;
      }
      const T* kr = k.row(j);
      T acc = T(0);
      for (int64_t p = 0; p < dh; ++p) acc += qr[p] * kr[p];
      sr[j] = acc * scale;
    }
  }
  return scores;
}

}  // namespace detail

// Full forward pass. Patch application order is fixed: per layer, resid_pre,
// then each attn_head_out, then attn_out, then mlp_out, then resid_post;
// captures happen after the patch at the same site, so a cache read back from
// a patched run reflects the intervention.
template <typename T>
ForwardResult<T> forward(std::span<const int64_t> tokens, const Checkpoint<T>& ck,
                         const CaptureSet& capture = {}, const PatchSpec<T>* patches = nullptr,
                         bool keep_trace = false) {
  const ModelConfig& c = ck.config;
  detail::check_tokens<T>(tokens, c);
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (patches) patches->validate(c, n);

  ForwardResult<T> out;
  out.cache.seq_len = n;
  auto trace = std::make_shared<ForwardTrace<T>>();
  trace->tokens.assign(tokens.begin(), tokens.end());
  trace->patched = patches && !patches->empty();
  trace->layers.resize(static_cast<size_t>(c.n_layers));

  auto grab = [&](const SiteKey& key, const Tensor<T>& act) {
    if (capture.wants(key)) out.cache.store[key] = act;
  };

  Tensor<T> resid = detail::embed<T>(tokens, ck.W_E);
  const T eps = static_cast<T>(c.norm_eps);
  const T rope_base = static_cast<T>(c.rope_base);

  for (int64_t l = 0; l < c.n_layers; ++l) {
    const auto& b = ck.blocks[static_cast<size_t>(l)];
    LayerTrace<T>& lt = trace->layers[static_cast<size_t>(l)];

    detail::apply_site_patches(patches, {Site::resid_pre, l}, resid);
    grab({Site::resid_pre, l}, resid);
    lt.resid_pre = resid;

    lt.x1 = rmsnorm(resid, b.ln1_w, eps);
    lt.q.resize(static_cast<size_t>(c.n_heads));
    lt.k.resize(static_cast<size_t>(c.n_heads));
    lt.v.resize(static_cast<size_t>(c.n_heads));
    lt.probs.resize(static_cast<size_t>(c.n_heads));
    lt.ctx.resize(static_cast<size_t>(c.n_heads));

    Tensor<T> attn_out({n, c.d_model});
    for (int64_t h = 0; h < c.n_heads; ++h) {
      auto& q = lt.q[static_cast<size_t>(h)];
      auto& k = lt.k[static_cast<size_t>(h)];
      auto& v = lt.v[static_cast<size_t>(h)];
      q = detail::rope_head(matmul(lt.x1, detail::head_slice(b.W_Q, h)), rope_base, 0, T(1));
      k = detail::rope_head(matmul(lt.x1, detail::head_slice(b.W_K, h)), rope_base, 0, T(1));
      v = matmul(lt.x1, detail::head_slice(b.W_V, h));
      lt.probs[static_cast<size_t>(h)] = softmax_rows(detail::causal_scores(q, k));
      lt.ctx[static_cast<size_t>(h)] = matmul(lt.probs[static_cast<size_t>(h)], v);
      Tensor<T> head_out = matmul(lt.ctx[static_cast<size_t>(h)], detail::head_slice(b.W_O, h));
      detail::apply_site_patches(patches, {Site::attn_head_out, l, h}, head_out);
      grab({Site::attn_head_out, l, h}, head_out);
      add_inplace(attn_out, head_out);
    }
    detail::apply_site_patches(patches, {Site::attn_out, l}, attn_out);
    grab({Site::attn_out, l}, attn_out);

    add_inplace(resid, attn_out);
    lt.resid_mid = resid;

    lt.x2 = rmsnorm(resid, b.ln2_w, eps);
    lt.gate_pre = matmul(lt.x2, b.W_gate);
    lt.up_pre = matmul(lt.x2, b.W_up);
    lt.act = Tensor<T>({n, c.d_mlp});
    for (int64_t i = 0; i < lt.act.numel(); ++i)
      lt.act.data[i] = silu_scalar(lt.gate_pre.data[i]) * lt.up_pre.data[i];
    Tensor<T> mlp_out = matmul(lt.act, b.W_down);
    detail::apply_site_patches(patches, {Site::mlp_out, l}, mlp_out);
    grab({Site::mlp_out, l}, mlp_out);

    add_inplace(resid, mlp_out);
    detail::apply_site_patches(patches, {Site::resid_post, l}, resid);
    grab({Site::resid_post, l}, resid);
  }

  trace->resid_final = resid;
  trace->ln_out = rmsnorm(resid, ck.final_ln_w, eps);
  out.logits = matmul(trace->ln_out, ck.W_U);
  if (keep_trace) out.trace = std::move(trace);
  return out;
}

// A checkpoint-shaped container of zeros, used for gradient accumulation.
template <typename T>
Checkpoint<T> zero_grads(const ModelConfig& config) {
  Checkpoint<T> g;
  g.config = config;
  g.W_E = Tensor<T>({config.vocab_size, config.d_model});
  g.blocks.resize(static_cast<size_t>(config.n_layers));
  for (auto& b : g.blocks) {
    b.ln1_w = Tensor<T>({config.d_model});
    b.W_Q = Tensor<T>({config.n_heads, config.d_model, config.d_head});
    b.W_K = Tensor<T>({config.n_heads, config.d_model, config.d_head});
    b.W_V = Tensor<T>({config.n_heads, config.d_model, config.d_head});
    b.W_O = Tensor<T>({config.n_heads, config.d_head, config.d_model});
    b.ln2_w = Tensor<T>({config.d_model});
    b.W_gate = Tensor<T>({config.d_model, config.d_mlp});
    b.W_up = Tensor<T>({config.d_model, config.d_mlp});
    b.W_down = Tensor<T>({config.d_mlp, config.d_model});
  }
  g.final_ln_w = Tensor<T>({config.d_model});
  g.W_U = Tensor<T>({config.d_model, config.vocab_size});
  return g;
}

// Reverse sweep from d(metric)/d(logits). Hook gradients land in `hook_grads`
// under the same keys the forward cache uses; parameter gradients accumulate
// into `param_grads` (both optional). The trace must come from an unpatched
// run: a patch cuts the graph and the chain rule below no longer applies.
template <typename T>
void backward_from_dlogits(const ForwardTrace<T>& trace, const Checkpoint<T>& ck,
                           const Tensor<T>& dlogits, const CaptureSet& grad_capture,
                           std::type_identity_t<ActivationCache<T>*> hook_grads,
                           std::type_identity_t<Checkpoint<T>*> param_grads) {
  if (trace.patched)
    throw PatchError("backward through a patched forward run is unsupported");
  const ModelConfig& c = ck.config;
  const int64_t n = static_cast<int64_t>(trace.tokens.size());
  require_shape(dlogits, {n, c.vocab_size}, "backward dlogits");
  const T eps = static_cast<T>(c.norm_eps);
  const T rope_base = static_cast<T>(c.rope_base);
  const T scale = T(1) / std::sqrt(static_cast<T>(c.d_head));

  if (hook_grads) hook_grads->seq_len = n;
  auto grab = [&](const SiteKey& key, const Tensor<T>& g) {
    if (hook_grads && grad_capture.wants(key)) hook_grads->store[key] = g;
  };

  // final unembed + norm
  Tensor<T> d_lnout = matmul_nt(dlogits, ck.W_U);
  if (param_grads) matmul_tn_acc(trace.ln_out, dlogits, std::span<T>(param_grads->W_U.data));
  Tensor<T> dresid;
  rmsnorm_backward(trace.resid_final, ck.final_ln_w, eps, d_lnout, dresid,
                   param_grads ? &param_grads->final_ln_w : nullptr);

  for (int64_t l = c.n_layers - 1; l >= 0; --l) {
    const auto& b = ck.blocks[static_cast<size_t>(l)];
    const LayerTrace<T>& lt = trace.layers[static_cast<size_t>(l)];
    auto* pb = param_grads ? &param_grads->blocks[static_cast<size_t>(l)] : nullptr;

    grab({Site::resid_post, l}, dresid);
    grab({Site::mlp_out, l}, dresid);

    // mlp: resid_post = resid_mid + act @ W_down, act = silu(gate_pre) * up_pre
    Tensor<T> dact = matmul_nt(dresid, b.W_down);
    if (pb) matmul_tn_acc(lt.act, dresid, std::span<T>(pb->W_down.data));
    Tensor<T> dgate_pre({n, c.d_mlp}), dup_pre({n, c.d_mlp});
    for (int64_t i = 0; i < dact.numel(); ++i) {
      dgate_pre.data[i] = dact.data[i] * lt.up_pre.data[i] * silu_grad_scalar(lt.gate_pre.data[i]);
      dup_pre.data[i] = dact.data[i] * silu_scalar(lt.gate_pre.data[i]);
    }
    Tensor<T> dx2 = matmul_nt(dgate_pre, b.W_gate);
    add_inplace(dx2, matmul_nt(dup_pre, b.W_up));
    if (pb) {
      matmul_tn_acc(lt.x2, dgate_pre, std::span<T>(pb->W_gate.data));
      matmul_tn_acc(lt.x2, dup_pre, std::span<T>(pb->W_up.data));
    }
    Tensor<T> d_from_mlp;
    rmsnorm_backward(lt.resid_mid, b.ln2_w, eps, dx2, d_from_mlp, pb ? &pb->ln2_w : nullptr);
    add_inplace(dresid, d_from_mlp);  // dresid now = d(resid_mid)

    grab({Site::attn_out, l}, dresid);
    for (int64_t h = 0; h < c.n_heads; ++h) grab({Site::attn_head_out, l, h}, dresid);

    // attention: resid_mid = resid_pre + sum_h ctx_h @ W_O[h]
    Tensor<T> dx1({n, c.d_model});
    for (int64_t h = 0; h < c.n_heads; ++h) {
      const auto& q = lt.q[static_cast<size_t>(h)];
      const auto& k = lt.k[static_cast<size_t>(h)];
      const auto& v = lt.v[static_cast<size_t>(h)];
      const auto& probs = lt.probs[static_cast<size_t>(h)];
      const auto& ctx = lt.ctx[static_cast<size_t>(h)];
      const Tensor<T> w_o = detail::head_slice(b.W_O, h);

      Tensor<T> dctx = matmul_nt(dresid, w_o);
      if (pb) {
        Tensor<T> dwo = matmul_tn(ctx, dresid);
        detail::add_head_slice(pb->W_O, h, dwo);
      }
      Tensor<T> dprobs = matmul_nt(dctx, v);
      Tensor<T> dv = matmul_tn(probs, dctx);
      Tensor<T> dscores = softmax_rows_backward(probs, dprobs);
      scale_inplace(dscores, scale);
      Tensor<T> dq_rot = matmul(dscores, k);
      Tensor<T> dk_rot = matmul_tn(dscores, q);
      Tensor<T> dq = detail::rope_head(std::move(dq_rot), rope_base, 0, T(-1));
      Tensor<T> dk = detail::rope_head(std::move(dk_rot), rope_base, 0, T(-1));

      add_inplace(dx1, matmul_nt(dq, detail::head_slice(b.W_Q, h)));
      add_inplace(dx1, matmul_nt(dk, detail::head_slice(b.W_K, h)));
      add_inplace(dx1, matmul_nt(dv, detail::head_slice(b.W_V, h)));
      if (pb) {
        detail::add_head_slice(pb->W_Q, h, matmul_tn(lt.x1, dq));
        detail::add_head_slice(pb->W_K, h, matmul_tn(lt.x1, dk));
        detail::add_head_slice(pb->W_V, h, matmul_tn(lt.x1, dv));
      }
    }
    Tensor<T> d_from_attn;
    rmsnorm_backward(lt.resid_pre, b.ln1_w, eps, dx1, d_from_attn, pb ? &pb->ln1_w : nullptr);
    add_inplace(dresid, d_from_attn);  // dresid now = d(resid_pre)
    grab({Site::resid_pre, l}, dresid);
  }

  if (param_grads) {
    for (int64_t t = 0; t < n; ++t) {
      T* row = param_grads->W_E.row(trace.tokens[static_cast<size_t>(t)]);
      const T* g = dresid.row(t);
      for (int64_t i = 0; i < c.d_model; ++i) row[i] += g[i];
    }
  }
}

// Metric value and its logit gradient. Both metric kinds reduce to the same
// expression: the log-softmax normalizer cancels in the difference.
template <typename T>
std::pair<T, Tensor<T>> metric_value_and_dlogits(const Tensor<T>& logits, const MetricSpec& spec) {
  const int64_t n = logits.dim(0), v = logits.dim(1);
  spec.target.validate(v);
  const int64_t p = spec.resolve_position(n);
  Tensor<T> dlogits({n, v});
  dlogits(p, spec.target.anti_token) = T(1);
  dlogits(p, spec.target.stereo_token) = T(-1);
  const T value = logits(p, spec.target.anti_token) - logits(p, spec.target.stereo_token);
  return {value, std::move(dlogits)};
}

template <typename T>
struct BackwardResult {
  T metric_value = T(0);
  Tensor<T> logits;
  ActivationCache<T> activations;  // forward captures
  ActivationCache<T> grads;        // d(metric)/d(activation)
  std::shared_ptr<Checkpoint<T>> param_grads;
};

// Two-in-one pass used by attribution: clean forward (with captures) plus one
// backward for the metric gradient at every requested hook.
template <typename T>
BackwardResult<T> backward_metric(std::span<const int64_t> tokens, const Checkpoint<T>& ck,
                                  const MetricSpec& spec, const CaptureSet& wrt,
                                  const CaptureSet& act_capture = {},
                                  bool want_param_grads = false) {
  auto fwd = forward<T>(tokens, ck, act_capture, nullptr, /*keep_trace=*/true);
  auto [value, dlogits] = metric_value_and_dlogits(fwd.logits, spec);
  BackwardResult<T> out;
  out.metric_value = value;
  out.logits = std::move(fwd.logits);
  out.activations = std::move(fwd.cache);
  if (want_param_grads) out.param_grads = std::make_shared<Checkpoint<T>>(zero_grads<T>(ck.config));
  backward_from_dlogits(*fwd.trace, ck, dlogits, wrt, &out.grads,
                        want_param_grads ? out.param_grads.get() : nullptr);
  return out;
}

// Next-token cross-entropy over one line; gradients (scaled by `scale`)
// accumulate into `grad_accum`. Returns the mean loss over scored positions.
template <typename T>
T lm_loss_and_grads(std::span<const int64_t> tokens, const Checkpoint<T>& ck,
                    Checkpoint<T>* grad_accum, T scale = T(1)) {
  if (tokens.size() < 2) throw ShapeError("lm loss needs at least 2 tokens");
  auto fwd = forward<T>(tokens, ck, {}, nullptr, /*keep_trace=*/grad_accum != nullptr);
  std::vector<int> targets(tokens.size(), -1);
  for (size_t t = 0; t + 1 < tokens.size(); ++t) targets[t] = static_cast<int>(tokens[t + 1]);
  auto ce = cross_entropy(fwd.logits, std::span<const int>(targets), -1);
  if (grad_accum) {
    scale_inplace(ce.dlogits, scale);
    backward_from_dlogits(*fwd.trace, ck, ce.dlogits, CaptureSet::none(), nullptr, grad_accum);
  }
  return ce.loss;
}

// --------------------------------------------------------------- generation

namespace detail {

template <typename T>
int64_t argmax_lowest_id(const T* row, int64_t v) {
  int64_t best = 0;
  for (int64_t j = 1; j < v; ++j)
    if (row[j] > row[best]) best = j;  // strict: ties keep the lowest id
  return best;
}

// Generation-time patches cover prompt positions only. Expanding "@*" to the
// concrete prompt positions keeps that meaning when the sequence grows past
// the prompt (aligned counterfactual sources pin to the same positions).
template <typename T>
PatchSpec<T> clamp_patches_to_prompt(const PatchSpec<T>& patches, int64_t prompt_len) {
  PatchSpec<T> out;
  for (const auto& e : patches.entries) {
    if (e.hook.position != kAllPositions && e.hook.position >= prompt_len)
      throw PatchError("patch " + to_string(e.hook) + ": position beyond prompt length " +
                       std::to_string(prompt_len));
    if (e.hook.position != kAllPositions) {
      out.add(e.hook, e.source);
      continue;
    }
    for (int64_t t = 0; t < prompt_len; ++t) {
      HookPoint hook = e.hook;
      hook.position = t;
      AblationSource<T> src = e.source;
      if (src.kind == AblationKind::counterfactual && src.source_position == kAllPositions)
        src.source_position = t;
      out.add(hook, std::move(src));
    }
  }
  return out;
}

}  // namespace detail

// Greedy decoding with a KV cache. Patches apply during prompt prefill only;
// the patched prefill state is what every later step attends to.
template <typename T>
std::vector<int64_t> generate_greedy(std::span<const int64_t> prompt, const Checkpoint<T>& ck,
                                     int64_t n_new, const PatchSpec<T>* patches = nullptr) {
  const ModelConfig& c = ck.config;
  detail::check_tokens<T>(prompt, c);
  if (n_new < 0) throw ConfigError("generate_greedy: n_new must be >= 0");
  const int64_t prompt_len = static_cast<int64_t>(prompt.size());
  if (prompt_len + n_new > c.max_seq)
    throw ShapeError("generate_greedy: prompt + n_new exceeds max_seq " +
                     std::to_string(c.max_seq));
  PatchSpec<T> clamped;
  if (patches) clamped = detail::clamp_patches_to_prompt(*patches, prompt_len);

  // Prefill: a full forward whose trace provides the per-layer KV state.
  auto fwd = forward<T>(prompt, ck, {}, patches ? &clamped : nullptr, /*keep_trace=*/true);
  std::vector<int64_t> out(prompt.begin(), prompt.end());
  if (n_new == 0) return out;

  // kv[l][h] grows one row per generated token.
  std::vector<std::vector<Tensor<T>>> kcache(static_cast<size_t>(c.n_layers)),
      vcache(static_cast<size_t>(c.n_layers));
  for (int64_t l = 0; l < c.n_layers; ++l) {
    kcache[static_cast<size_t>(l)] = fwd.trace->layers[static_cast<size_t>(l)].k;
    vcache[static_cast<size_t>(l)] = fwd.trace->layers[static_cast<size_t>(l)].v;
  }
  const T eps = static_cast<T>(c.norm_eps);
  const T rope_base = static_cast<T>(c.rope_base);

  int64_t next = detail::argmax_lowest_id(fwd.logits.row(prompt_len - 1), c.vocab_size);
  out.push_back(next);

  for (int64_t step = 1; step < n_new; ++step) {
    const int64_t pos = prompt_len + step - 1;  // position of `next`
    Tensor<T> resid({1, c.d_model});
    std::copy_n(ck.W_E.row(next), c.d_model, resid.row(0));

    for (int64_t l = 0; l < c.n_layers; ++l) {
      const auto& b = ck.blocks[static_cast<size_t>(l)];
      Tensor<T> x1 = rmsnorm(resid, b.ln1_w, eps);
      Tensor<T> attn_out({1, c.d_model});
      for (int64_t h = 0; h < c.n_heads; ++h) {
        Tensor<T> q =
            detail::rope_head(matmul(x1, detail::head_slice(b.W_Q, h)), rope_base, pos, T(1));
        Tensor<T> knew =
            detail::rope_head(matmul(x1, detail::head_slice(b.W_K, h)), rope_base, pos, T(1));
        Tensor<T> vnew = matmul(x1, detail::head_slice(b.W_V, h));
        auto& kh = kcache[static_cast<size_t>(l)][static_cast<size_t>(h)];
        auto& vh = vcache[static_cast<size_t>(l)][static_cast<size_t>(h)];
        kh.append_rows(knew);
        vh.append_rows(vnew);
        Tensor<T> probs = softmax_rows(detail::causal_scores(q, kh));
        Tensor<T> ctx = matmul(probs, vh);
        add_inplace(attn_out, matmul(ctx, detail::head_slice(b.W_O, h)));
      }
      add_inplace(resid, attn_out);
      Tensor<T> x2 = rmsnorm(resid, b.ln2_w, eps);
      Tensor<T> gate_pre = matmul(x2, b.W_gate);
      Tensor<T> up_pre = matmul(x2, b.W_up);
      for (int64_t i = 0; i < gate_pre.numel(); ++i)
        gate_pre.data[i] = silu_scalar(gate_pre.data[i]) * up_pre.data[i];
      add_inplace(resid, matmul(gate_pre, b.W_down));
    }
    Tensor<T> lnr = rmsnorm(resid, ck.final_ln_w, eps);
    Tensor<T> logits = matmul(lnr, ck.W_U);
    next = detail::argmax_lowest_id(logits.row(0), c.vocab_size);
    out.push_back(next);
  }
  return out;
}

// Reference decoder: re-runs the full forward per step (patches included at
// their prompt positions). Exists to pin the cached decoder's equivalence.
template <typename T>
std::vector<int64_t> generate_greedy_recompute(std::span<const int64_t> prompt,
                                               const Checkpoint<T>& ck, int64_t n_new,
                                               const PatchSpec<T>* patches = nullptr) {
  PatchSpec<T> clamped;
  if (patches)
    clamped = detail::clamp_patches_to_prompt(*patches, static_cast<int64_t>(prompt.size()));
  std::vector<int64_t> out(prompt.begin(), prompt.end());
  for (int64_t step = 0; step < n_new; ++step) {
    auto fwd = forward<T>(out, ck, {}, patches ? &clamped : nullptr);
    out.push_back(
        detail::argmax_lowest_id(fwd.logits.row(static_cast<int64_t>(out.size()) - 1),
                                 ck.config.vocab_size));
  }
  return out;
}

}  // namespace patchlens
