#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "qfs/adapters.hpp"
#include "qfs/checkpoint.hpp"
#include "qfs/model_config.hpp"
#include "qfs/ops.hpp"
#include "qfs/tokenizer.hpp"

namespace qfs {

template <typename T>
struct CapturedLayer {
  Tensor<T> hidden_in;  // [L,d] residual stream entering the layer
  Tensor<T> q, k, v;    // [L,d] projections before rotary positions
};

// Per-layer activations exposed by a forward pass: the hypernetwork reads
// hidden states, the compressive-memory runner reads Q/K/V.
template <typename T>
struct Activations {
  std::vector<CapturedLayer<T>> layers;
  Tensor<T> hidden_out;  // [L,d] residual stream after the last layer
};

// Per-head rewrite of the local attention output (compressive-memory
// injection). Receives the head's pre-rotation query rows.
template <typename T>
using AttnInjectFn = std::function<Tensor<T>(int layer, int head, Tensor<T> q_head, Tensor<T> a_local)>;

template <typename T>
struct LayerRunOptions {
  const LayerAdapters<T>* adapters = nullptr;
  Tensor<T> pad_k, pad_v;  // optional pre-rotation KV rows prepended to the window
  int64_t window = std::numeric_limits<int64_t>::max();
  const AttnInjectFn<T>* inject = nullptr;
  CapturedLayer<T>* capture = nullptr;
};

// Decoder-only LLaMA-style block stack: pre-RMSNorm, rotary positions, gated
// feed-forward, byte-level vocabulary, tied input/output embedding. Backbone
// tensors are frozen; adaptation happens through adapter overlays.
template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig cfg, ParamStore<T>& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.d_model;
    const int f = cfg_.ffn_hidden();
    const T ws = T(0.02);
    embed_ = store.add("backbone.embed", Tensor<T>::randn({cfg_.vocab, d}, rng, ws));
    // residual-branch outputs scaled down with depth
    const T os = static_cast<T>(0.02 / std::sqrt(2.0 * cfg_.n_layers));
    for (int i = 0; i < cfg_.n_layers; ++i) {
      Layer l;
      const std::string p = layer_prefix(i);
      l.attn_norm = store.add(p + "attn_norm", Tensor<T>::ones({d}));
      l.wq = store.add(p + "wq", Tensor<T>::randn({d, d}, rng, ws));
      l.wk = store.add(p + "wk", Tensor<T>::randn({d, d}, rng, ws));
      l.wv = store.add(p + "wv", Tensor<T>::randn({d, d}, rng, ws));
      l.wo = store.add(p + "wo", Tensor<T>::randn({d, d}, rng, os));
      l.ffn_norm = store.add(p + "ffn_norm", Tensor<T>::ones({d}));
      l.w_gate = store.add(p + "w_gate", Tensor<T>::randn({f, d}, rng, ws));
      l.w_up = store.add(p + "w_up", Tensor<T>::randn({f, d}, rng, ws));
      l.w_down = store.add(p + "w_down", Tensor<T>::randn({d, f}, rng, os));
      layers_.push_back(std::move(l));
    }
    final_norm_ = store.add("backbone.final_norm", Tensor<T>::ones({d}));
  }

  static std::string layer_prefix(int i) {
    std::string n = std::to_string(i);
    if (n.size() < 2) n = "0" + n;
    return "backbone.layer" + n + ".";
  }

  const ModelConfig& config() const { return cfg_; }

  // Exact parameter count as a pure function of the configuration.
  static int64_t param_count(const ModelConfig& c) {
    const int64_t d = c.d_model, f = int64_t(c.ffn_mult) * c.d_model;
    return int64_t(c.vocab) * d + c.n_layers * (2 * d + 4 * d * d + 3 * d * f) + d;
  }

  Tensor<T> embed_tokens(const std::vector<int>& tokens) const {
    for (int t : tokens) {
      if (t < 0 || t >= cfg_.vocab)
        throw DataError("unknown token id " + std::to_string(t));
    }
    return embedding_lookup(embed_, tokens);
  }

  Tensor<T> logits_from_hidden(Tensor<T> h) const {
    return matmul_nt(rms_norm(h, final_norm_), embed_);
  }

  // One transformer block over the current rows. Pad rows (previous-window
  // KV) take positions 0..C-1 and current rows C..C+L-1; the mask is causal
  // within the window.
  Tensor<T> layer_forward(int layer, Tensor<T> x, const LayerRunOptions<T>& opt) const {
    const Layer& ly = layers_[layer];
    const int64_t L = x.dim(0);
    const int d = cfg_.d_model;
    const int dk = cfg_.d_key();
    const int heads = cfg_.n_heads;

    Tensor<T> xn = rms_norm(x, ly.attn_norm);
    Tensor<T> q = project(xn, ly.wq, opt.adapters, "wq");
    Tensor<T> k = project(xn, ly.wk, opt.adapters, "wk");
    Tensor<T> v = project(xn, ly.wv, opt.adapters, "wv");
    if (opt.capture) *opt.capture = CapturedLayer<T>{x, q, k, v};

    const bool padded = opt.pad_k.defined();
    const int64_t C = padded ? opt.pad_k.dim(0) : 0;
    Tensor<T> k_full = padded ? concat<T>({opt.pad_k, k}, 0) : k;
    Tensor<T> v_full = padded ? concat<T>({opt.pad_v, v}, 0) : v;

    std::vector<int64_t> pos_q(L), pos_k(C + L);
    for (int64_t i = 0; i < L; ++i) pos_q[i] = C + i;
    for (int64_t i = 0; i < C + L; ++i) pos_k[i] = i;
    Tensor<T> mask = causal_window_mask(L, C, opt.window);

    // prompt-tuning KV, projected with the layer's own matrices, no positions
    Tensor<T> prompt_k, prompt_v;
    const PromptAdapter<T>* prompt = nullptr;
    if (opt.adapters && opt.adapters->prompt) {
      prompt = &*opt.adapters->prompt;
      if (!prompt->E.defined())
        throw ConfigError("generated prompt embedding missing; run the hypernetwork first");
      prompt_k = matmul_nt(prompt->E, ly.wk);
      prompt_v = matmul_nt(prompt->E, ly.wv);
    }

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      Tensor<T> qh = slice_cols(q, h * dk, (h + 1) * dk);
      Tensor<T> kh = slice_cols(k_full, h * dk, (h + 1) * dk);
      Tensor<T> vh = slice_cols(v_full, h * dk, (h + 1) * dk);
      Tensor<T> qh_rot = rope_apply(qh, pos_q);
      Tensor<T> kh_rot = rope_apply(kh, pos_k);
      Tensor<T> scores = scale(matmul_nt(qh_rot, kh_rot), inv_sqrt_dk);
      Tensor<T> probs = softmax_lastdim(add(scores, mask));
      Tensor<T> a_local = matmul(probs, vh);
      if (prompt) {
        // zero-initialized gate: prompt scores get their own softmax, scaled
        // by the per-head gate before being added
        Tensor<T> pk = slice_cols(prompt_k, h * dk, (h + 1) * dk);
        Tensor<T> pv = slice_cols(prompt_v, h * dk, (h + 1) * dk);
        Tensor<T> p_scores = scale(matmul_nt(qh_rot, pk), inv_sqrt_dk);
        Tensor<T> p_probs = softmax_lastdim(p_scores);
        Tensor<T> gate_h = slice_rows(reshape(prompt->gate, {heads, 1}), h, h + 1);
        a_local = add(a_local, mul(matmul(p_probs, pv), reshape(gate_h, {1})));
      }
      if (opt.inject && *opt.inject) a_local = (*opt.inject)(layer, h, qh, a_local);
      head_outs.push_back(std::move(a_local));
    }
    Tensor<T> merged = heads == 1 ? head_outs[0] : concat(head_outs, 1);
    Tensor<T> attn_out = project(merged, ly.wo, opt.adapters, "wo");
    x = add(x, attn_out);

    Tensor<T> xn2 = rms_norm(x, ly.ffn_norm);
    Tensor<T> g = matmul_nt(xn2, ly.w_gate);
    Tensor<T> up = matmul_nt(xn2, ly.w_up);
    Tensor<T> ffn = matmul_nt(mul(mul(g, sigmoid(g)), up), ly.w_down);
    if (opt.adapters && opt.adapters->padapter)
      ffn = padapter_apply(xn2, ffn, *opt.adapters->padapter, pa_act_);
    return add(x, ffn);
  }

  void set_padapter_act(const std::string& act) { pa_act_ = act; }

  // Plain causal forward over the whole sequence (no compressive memory).
  Tensor<T> forward(const std::vector<int>& tokens, const AdapterSet<T>* adapters = nullptr,
                    Activations<T>* acts = nullptr, int64_t window = -1) const {
    if (window <= 0) window = cfg_.max_local_window;
    Tensor<T> x = embed_tokens(tokens);
    if (acts) acts->layers.resize(cfg_.n_layers);
    for (int i = 0; i < cfg_.n_layers; ++i) {
      LayerRunOptions<T> opt;
      opt.adapters = adapters ? adapters->layer(i) : nullptr;
      opt.window = window;
      if (acts) opt.capture = &acts->layers[i];
      x = layer_forward(i, x, opt);
    }
    if (acts) acts->hidden_out = x;
    return logits_from_hidden(x);
  }

  const Tensor<T>& embedding() const { return embed_; }

  // Standard causal dot-product attention with a position window; exposed for
  // oracle tests. Q [Lq,dk] at window offset C, K/V [C+Lq.. any L,dk/dv].
  static Tensor<T> causal_attention(Tensor<T> q, Tensor<T> k, Tensor<T> v, int64_t offset,
                                    int64_t window) {
    check(window >= 1, "causal_attention: window must be >= 1");
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor<T> scores = scale(matmul_nt(q, k), inv);
    Tensor<T> mask = causal_window_mask(q.dim(0), offset, window, k.dim(0));
    return matmul(softmax_lastdim(add(scores, mask)), v);
  }

 private:
  struct Layer {
    Tensor<T> attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
  };

  static Tensor<T> causal_window_mask(int64_t L, int64_t offset, int64_t window,
                                      int64_t kv_len = -1) {
    if (kv_len < 0) kv_len = offset + L;
    const T neg = -std::numeric_limits<T>::infinity();
    std::vector<T> m(static_cast<size_t>(L * kv_len), T(0));
    for (int64_t i = 0; i < L; ++i) {
      const int64_t g = offset + i;
      for (int64_t j = 0; j < kv_len; ++j) {
        if (j > g || g - j >= window) m[i * kv_len + j] = neg;
      }
    }
    return Tensor<T>::from({L, kv_len}, std::move(m));
  }

  Tensor<T> project(Tensor<T> x, const Tensor<T>& w, const LayerAdapters<T>* ad,
                    const char* name) const {
    if (ad) {
      auto it = ad->lora.find(name);
      if (it != ad->lora.end()) return lora_apply(x, w, it->second, lora_scale_);
    }
    return matmul_nt(x, w);
  }

 public:
  void set_lora_scale(double s) { lora_scale_ = s; }

 private:
  ModelConfig cfg_;
  Tensor<T> embed_;
  std::vector<Layer> layers_;
  Tensor<T> final_norm_;
  double lora_scale_ = 1.0;
  std::string pa_act_ = "relu";
};

}  // namespace qfs
