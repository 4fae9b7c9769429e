#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qfs/checkpoint.hpp"
#include "qfs/model_config.hpp"
#include "qfs/ops.hpp"
#include "qfs/tensor.hpp"

namespace qfs {

enum class AdapterKind { Lora, PAdapter, Prompt };

inline AdapterKind parse_adapter_kind(const std::string& s) {
  if (s == "lora") return AdapterKind::Lora;
  if (s == "padapter") return AdapterKind::PAdapter;
  if (s == "prompt") return AdapterKind::Prompt;
  throw ConfigError("unknown adapter kind: " + s + " (expected lora|padapter|prompt)");
}

inline const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::Lora: return "lora";
    case AdapterKind::PAdapter: return "padapter";
    case AdapterKind::Prompt: return "prompt";
  }
  return "?";
}

struct AdapterConfig {
  AdapterKind kind = AdapterKind::Lora;
  int lora_rank = 8;
  double lora_scale = 1.0;
  std::vector<std::string> lora_targets = {"wq", "wk"};
  int prompt_len = 10;
  int prompt_first_layer = 2;  // prompts attach to all but the first layers
  int pa_bottleneck = 0;       // 0 -> d_model / 4
  std::string pa_act = "relu";

  int bottleneck_for(const ModelConfig& m) const {
    return pa_bottleneck > 0 ? pa_bottleneck : m.d_model / 4;
  }

  void validate(const ModelConfig& m) const {
    if (kind == AdapterKind::Lora) {
      if (lora_rank < 1 || lora_rank > m.d_model)
        throw ConfigError("adapter.lora_rank must be in [1, d_model]");
      if (lora_targets.empty()) throw ConfigError("adapter.lora_targets must not be empty");
      for (const auto& t : lora_targets)
        if (t != "wq" && t != "wk" && t != "wv" && t != "wo")
          throw ConfigError("adapter.lora_targets entries must be wq|wk|wv|wo, got " + t);
    }
    if (kind == AdapterKind::Prompt) {
      if (prompt_len < 1) throw ConfigError("adapter.prompt_len must be >= 1");
      if (prompt_first_layer < 0 || prompt_first_layer >= m.n_layers)
        throw ConfigError("adapter.prompt_first_layer out of range");
    }
    if (kind == AdapterKind::PAdapter) {
      if (bottleneck_for(m) < 1 || bottleneck_for(m) > m.d_model)
        throw ConfigError("adapter.pa_bottleneck must be in [1, d_model]");
      if (pa_act != "relu" && pa_act != "identity")
        throw ConfigError("adapter.pa_act must be relu|identity");
    }
  }
};

// Low-rank pair for one wrapped projection: A [r, in], B [out, r]; a fresh
// pair has B = 0 so the delta starts at zero.
template <typename T>
struct LoraTarget {
  Tensor<T> A;
  Tensor<T> B;
};

template <typename T>
struct PromptAdapter {
  Tensor<T> E;     // [K, d]
  Tensor<T> gate;  // [heads], zero-initialized
};

template <typename T>
struct PAdapter {
  Tensor<T> L1;  // [b_pa, d]
  Tensor<T> L2;  // [d, b_pa]
};

template <typename T>
struct LayerAdapters {
  std::map<std::string, LoraTarget<T>> lora;
  std::optional<PromptAdapter<T>> prompt;
  std::optional<PAdapter<T>> padapter;
  bool generated = false;  // instance-level parameters filled per example

  bool empty() const { return lora.empty() && !prompt && !padapter; }
};

// Per-layer adapter parameters. Regular layers own trainable tensors; on
// generated layers only the zero-start halves (LoRA B, prompt gates) are
// trainable here and the rest arrives as a per-example overlay.
template <typename T>
struct AdapterSet {
  AdapterConfig cfg;
  int generated_from = -1;  // first generated layer, -1 when none
  std::vector<LayerAdapters<T>> layers;

  bool layer_generated(int layer) const {
    return generated_from >= 0 && layer >= generated_from;
  }
  const LayerAdapters<T>* layer(int i) const {
    return layers[i].empty() ? nullptr : &layers[i];
  }
};

// y = x W^T + scale * ((x A^T) B^T); W is the frozen projection.
template <typename T>
Tensor<T> lora_apply(Tensor<T> x, Tensor<T> w_frozen, const LoraTarget<T>& t, double scale) {
  const int64_t out_w = w_frozen.dim(0), in_w = w_frozen.dim(1);
  if (!t.A.defined())
    throw ConfigError("generated LoRA A matrix missing; run the hypernetwork before forward");
  if (t.A.dim(1) != in_w || t.B.dim(0) != out_w || t.B.dim(1) != t.A.dim(0))
    throw ShapeError("lora_apply: A " + shape_str(t.A.shape()) + " / B " + shape_str(t.B.shape()) +
                     " inconsistent with projection " + shape_str(w_frozen.shape()));
  Tensor<T> base = matmul_nt(x, w_frozen);
  Tensor<T> delta = matmul_nt(matmul_nt(x, t.A), t.B);
  return add(base, scale == 1.0 ? delta : qfs::scale(delta, scale));
}

// ffn_out + L2 * act(L1 * h), the bottleneck branch running in parallel with
// the feed-forward sublayer.
template <typename T>
Tensor<T> padapter_apply(Tensor<T> h_ffn_in, Tensor<T> ffn_out, const PAdapter<T>& pa,
                         const std::string& act) {
  if (!pa.L1.defined() || !pa.L2.defined())
    throw ConfigError("generated parallel-adapter weights missing; run the hypernetwork first");
  Tensor<T> inner = matmul_nt(h_ffn_in, pa.L1);
  if (act == "relu") inner = relu(inner);
  return add(ffn_out, matmul_nt(inner, pa.L2));
}

namespace detail {

template <typename T>
Tensor<T> lora_a_init(int rank, int in_features, Rng& rng) {
  const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_features)));
  return Tensor<T>::uniform({rank, in_features}, rng, -bound, bound);
}

}  // namespace detail

// Builds the trainable adapter stack and registers its tensors. Layers in
// [generated_from, N) get instance-level parameters from the hypernetwork;
// pass generated_from = -1 for a fully regular stack.
template <typename T>
AdapterSet<T> init_adapters(const ModelConfig& m, const AdapterConfig& cfg, int generated_from,
                            ParamStore<T>& store, Rng& rng) {
  cfg.validate(m);
  AdapterSet<T> set;
  set.cfg = cfg;
  set.generated_from = generated_from;
  set.layers.resize(m.n_layers);
  const int d = m.d_model;
  for (int layer = 0; layer < m.n_layers; ++layer) {
    const bool gen = set.layer_generated(layer);
    const std::string prefix = "adapter.layer" + std::to_string(layer) + ".";
    auto& la = set.layers[layer];
    la.generated = gen;
    switch (cfg.kind) {
      case AdapterKind::Lora: {
        for (const auto& target : cfg.lora_targets) {
          LoraTarget<T> lt;
          lt.B = store.add(prefix + "lora." + target + ".B",
                           Tensor<T>::zeros({d, cfg.lora_rank}, true));
          if (!gen) {
            lt.A = store.add(prefix + "lora." + target + ".A",
                             detail::lora_a_init<T>(cfg.lora_rank, d, rng).set_requires_grad(true));
          }
          la.lora.emplace(target, std::move(lt));
        }
        break;
      }
      case AdapterKind::Prompt: {
        if (layer < cfg.prompt_first_layer) break;
        PromptAdapter<T> p;
        p.gate = store.add(prefix + "prompt.gate", Tensor<T>::zeros({m.n_heads}, true));
        if (!gen) {
          p.E = store.add(prefix + "prompt.E",
                          Tensor<T>::randn({cfg.prompt_len, d}, rng, T(0.02)).set_requires_grad(true));
        }
        la.prompt = std::move(p);
        break;
      }
      case AdapterKind::PAdapter: {
        if (!gen) {
          PAdapter<T> pa;
          const int b = cfg.bottleneck_for(m);
          const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
          pa.L1 = store.add(prefix + "padapter.L1",
                            Tensor<T>::uniform({b, d}, rng, -bound, bound).set_requires_grad(true));
          pa.L2 = store.add(prefix + "padapter.L2", Tensor<T>::zeros({d, b}, true));
          la.padapter = std::move(pa);
        } else {
          la.padapter = PAdapter<T>{};  // both halves generated per example
        }
        break;
      }
    }
  }
  return set;
}

// Closed-form count of the regular trainable adapter tensors (the
// hypernetwork's own parameters are counted separately).
inline int64_t adapter_trainable_count(const ModelConfig& m, const AdapterConfig& cfg,
                                       int generated_from) {
  const int64_t d = m.d_model;
  int64_t total = 0;
  for (int layer = 0; layer < m.n_layers; ++layer) {
    const bool gen = generated_from >= 0 && layer >= generated_from;
    switch (cfg.kind) {
      case AdapterKind::Lora: {
        const int64_t n_targets = static_cast<int64_t>(cfg.lora_targets.size());
        total += n_targets * d * cfg.lora_rank;           // B
        if (!gen) total += n_targets * cfg.lora_rank * d;  // A
        break;
      }
      case AdapterKind::Prompt: {
        if (layer < cfg.prompt_first_layer) break;
        total += m.n_heads;                          // gates
        if (!gen) total += int64_t(cfg.prompt_len) * d;  // E
        break;
      }
      case AdapterKind::PAdapter: {
        if (!gen) total += 2 * int64_t(cfg.bottleneck_for(m)) * d;
        break;
      }
    }
  }
  return total;
}

}  // namespace qfs
