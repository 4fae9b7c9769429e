#pragma once

#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "qfs/adapters.hpp"
#include "qfs/model.hpp"
#include "qfs/ops.hpp"
#include "qfs/prompting.hpp"

namespace qfs {

enum class HyperMode { Off, Parallel, Sequential };
enum class HyperEncoders { Shared, PerLayer };
enum class HyperInput { Query, Document, QueryDocument };

inline HyperMode parse_hyper_mode(const std::string& s) {
  if (s == "off") return HyperMode::Off;
  if (s == "parallel") return HyperMode::Parallel;
  if (s == "sequential") return HyperMode::Sequential;
  throw ConfigError("unknown hyperexpert mode: " + s + " (expected off|parallel|sequential)");
}

inline HyperEncoders parse_hyper_encoders(const std::string& s) {
  if (s == "shared") return HyperEncoders::Shared;
  if (s == "per_layer" || s == "per-layer") return HyperEncoders::PerLayer;
  throw ConfigError("unknown hyperexpert encoders: " + s + " (expected shared|per_layer)");
}

inline HyperInput parse_hyper_input(const std::string& s) {
  if (s == "query") return HyperInput::Query;
  if (s == "document") return HyperInput::Document;
  if (s == "query_document" || s == "query+document") return HyperInput::QueryDocument;
  throw ConfigError("unknown hyperexpert input: " + s);
}

// Layer split and generation strategy: layers below the split carry regular
// adapters, layers at and above it get instance-level parameters decoded from
// the conditioning span's hidden state.
struct HyperConfig {
  HyperMode mode = HyperMode::Off;
  HyperEncoders encoders = HyperEncoders::PerLayer;
  int split_layer = -1;  // -1 -> n_layers / 2
  int bottleneck = 64;
  double dropout = 0.1;
  HyperInput input = HyperInput::Query;

  int split_for(const ModelConfig& m) const {
    return split_layer >= 0 ? split_layer : m.n_layers / 2;
  }

  void validate(const ModelConfig& m) const {
    if (mode == HyperMode::Off) return;
    const int l = split_for(m);
    if (l <= 0 || l >= m.n_layers)
      throw ConfigError("hyper.split_layer must satisfy 0 < l < n_layers, got " +
                        std::to_string(l));
    if (bottleneck < 1) throw ConfigError("hyper.bottleneck must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("hyper.dropout must be in [0,1)");
  }
};

template <typename T>
struct HyperEncoderParams {
  Tensor<T> w0;  // [b, d]
  Tensor<T> b0;  // [b]
};

// h = Dropout(ReLU(W0 mean(H_query) + b0)); dropout only while training.
template <typename T>
Tensor<T> encode_query(Tensor<T> h_query, const HyperEncoderParams<T>& enc, double rate,
                       bool train, Rng& rng) {
  check(h_query.rank() == 2 && h_query.dim(0) >= 1,
        "encode_query: query span must contain at least one row");
  std::vector<uint8_t> all(static_cast<size_t>(h_query.dim(0)), 1);
  Tensor<T> pooled = reshape(mean_pool(h_query, all), {1, h_query.dim(1)});
  Tensor<T> h = relu(add_rows(matmul_nt(pooled, enc.w0), enc.b0));
  h = dropout(h, rate, rng, train);
  return reshape(h, {enc.w0.dim(0)});
}

// Affine decoders, shared across generated layers.
template <typename T>
Tensor<T> decode_affine(Tensor<T> h, Tensor<T> w, Tensor<T> b, Shape out_shape) {
  Tensor<T> flat = add_rows(matmul_nt(reshape(h, {1, h.dim(0)}), w), b);
  return reshape(flat, std::move(out_shape));
}

// The generated tensors for one example: instance-level adapter overlay plus
// the raw tensors for inspection dumps.
template <typename T>
struct GeneratedAdapters {
  AdapterSet<T> overlay;
  std::vector<std::tuple<int, std::string, Tensor<T>>> tensors;  // (layer, name, value)
};

template <typename T>
class HyperExpert {
 public:
  HyperExpert(const ModelConfig& m, const AdapterConfig& acfg, const HyperConfig& hcfg,
              ParamStore<T>& store, Rng& rng)
      : mcfg_(m), acfg_(acfg), hcfg_(hcfg) {
    hcfg_.validate(m);
    acfg_.validate(m);
    if (hcfg_.mode == HyperMode::Off) throw ConfigError("HyperExpert requires mode != off");
    const int d = m.d_model;
    const int b = hcfg_.bottleneck;
    const auto gen = generated_layers(m, acfg_, hcfg_);
    const int n_enc = hcfg_.encoders == HyperEncoders::PerLayer ? static_cast<int>(gen.size()) : 1;
    const T eb = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    for (int i = 0; i < n_enc; ++i) {
      HyperEncoderParams<T> e;
      e.w0 = store.add("hyper.enc" + std::to_string(i) + ".w0",
                       Tensor<T>::uniform({b, d}, rng, -eb, eb).set_requires_grad(true));
      e.b0 = store.add("hyper.enc" + std::to_string(i) + ".b0", Tensor<T>::zeros({b}, true));
      encoders_.push_back(std::move(e));
    }
    const T db = static_cast<T>(1.0 / std::sqrt(static_cast<double>(b) * d));
    auto add_decoder = [&](const std::string& name, int64_t out_elems) {
      Tensor<T> w = store.add("hyper.dec." + name + ".w",
                              Tensor<T>::uniform({out_elems, b}, rng, -db, db).set_requires_grad(true));
      Tensor<T> bias = store.add("hyper.dec." + name + ".b", Tensor<T>::zeros({out_elems}, true));
      decoders_[name] = {w, bias};
    };
    switch (acfg_.kind) {
      case AdapterKind::Lora:
        for (const auto& t : acfg_.lora_targets) add_decoder("lora." + t, int64_t(acfg_.lora_rank) * d);
        break;
      case AdapterKind::Prompt:
        add_decoder("prompt", int64_t(acfg_.prompt_len) * d);
        break;
      case AdapterKind::PAdapter: {
        const int bpa = acfg_.bottleneck_for(m);
        add_decoder("padapter.L1", int64_t(bpa) * d);
        add_decoder("padapter.L2", int64_t(d) * bpa);
        break;
      }
    }
  }

  static std::vector<int> generated_layers(const ModelConfig& m, const AdapterConfig& acfg,
                                           const HyperConfig& hcfg) {
    std::vector<int> out;
    const int l = hcfg.split_for(m);
    for (int layer = l; layer < m.n_layers; ++layer) {
      if (acfg.kind == AdapterKind::Prompt && layer < acfg.prompt_first_layer) continue;
      out.push_back(layer);
    }
    return out;
  }

  // Instance-level generation. Runs a plain causal pass over the conditioning
  // prefix of the prompt, encodes the pooled span state, and decodes adapter
  // parameters for every generated layer. Parallel mode reads the split
  // layer's state once; sequential mode re-reads the state before each
  // generated layer, so generation interleaves with that forward pass.
  GeneratedAdapters<T> generate(const Transformer<T>& model, const AdapterSet<T>& base,
                                const std::vector<int>& tokens, const PromptSpans& spans,
                                bool train, Rng& rng) const {
    const int l = hcfg_.split_for(mcfg_);
    const auto gen = generated_layers(mcfg_, acfg_, hcfg_);
    const auto [mask, prefix_len] = conditioning_span(spans);
    check(prefix_len <= static_cast<int64_t>(tokens.size()),
          "conditioning span extends past the prompt");

    GeneratedAdapters<T> out;
    out.overlay = base;  // shares regular tensors; generated slots filled below

    std::vector<int> prefix(tokens.begin(), tokens.begin() + prefix_len);
    Tensor<T> x = model.embed_tokens(prefix);

    auto pool = [&](Tensor<T> h) { return slice_span_pool(h, mask); };

    if (hcfg_.mode == HyperMode::Parallel) {
      for (int i = 0; i < l; ++i) {
        LayerRunOptions<T> opt;
        opt.adapters = base.layer(i);
        opt.window = mcfg_.max_local_window;
        x = model.layer_forward(i, x, opt);
      }
      Tensor<T> pooled = pool(x);
      for (size_t gi = 0; gi < gen.size(); ++gi) {
        Tensor<T> h = encode_pooled(pooled, encoder_index(gi), train, rng);
        fill_layer(out, gen[gi], h);
      }
    } else {
      // sequential: layer j's adapters come from the hidden state entering j
      size_t gi = 0;
      for (int i = 0; i < mcfg_.n_layers && gi < gen.size(); ++i) {
        if (gen[gi] == i) {
          Tensor<T> h = encode_pooled(pool(x), encoder_index(gi), train, rng);
          fill_layer(out, i, h);
          if (++gi == gen.size()) break;  // later layers feed nothing
        }
        LayerRunOptions<T> opt;
        opt.adapters = out.overlay.layer(i);
        opt.window = mcfg_.max_local_window;
        x = model.layer_forward(i, x, opt);
      }
    }
    return out;
  }

  // Closed-form trainable parameter count of the whole stack: regular adapter
  // tensors + encoder(s) + shared decoders.
  static int64_t trainable_count(const ModelConfig& m, const AdapterConfig& acfg,
                                 const HyperConfig& hcfg) {
    const int64_t d = m.d_model;
    const int64_t b = hcfg.bottleneck;
    const int64_t n_gen = static_cast<int64_t>(generated_layers(m, acfg, hcfg).size());
    const int64_t n_enc = hcfg.encoders == HyperEncoders::PerLayer ? n_gen : 1;
    int64_t total = adapter_trainable_count(m, acfg, hcfg.split_for(m));
    total += n_enc * (b * d + b);
    switch (acfg.kind) {
      case AdapterKind::Lora:
        total += static_cast<int64_t>(acfg.lora_targets.size()) *
                 (acfg.lora_rank * d * b + acfg.lora_rank * d);
        break;
      case AdapterKind::Prompt:
        total += int64_t(acfg.prompt_len) * d * b + int64_t(acfg.prompt_len) * d;
        break;
      case AdapterKind::PAdapter: {
        const int64_t bpa = acfg.bottleneck_for(m);
        total += 2 * (bpa * d * b + bpa * d);
        break;
      }
    }
    return total;
  }

  static int64_t encoder_size(const ModelConfig& m, const HyperConfig& hcfg) {
    return int64_t(hcfg.bottleneck) * m.d_model + hcfg.bottleneck;
  }

  const std::vector<HyperEncoderParams<T>>& encoders() const { return encoders_; }

 private:
  size_t encoder_index(size_t gi) const {
    return hcfg_.encoders == HyperEncoders::PerLayer ? gi : 0;
  }

  Tensor<T> encode_pooled(Tensor<T> pooled, size_t enc_idx, bool train, Rng& rng) const {
    const auto& e = encoders_[enc_idx];
    Tensor<T> h = relu(add_rows(matmul_nt(reshape(pooled, {1, pooled.dim(0)}), e.w0), e.b0));
    h = dropout(h, hcfg_.dropout, rng, train);
    return reshape(h, {e.w0.dim(0)});
  }

  static Tensor<T> slice_span_pool(Tensor<T> h, const std::vector<uint8_t>& mask) {
    std::vector<uint8_t> m(mask.begin(), mask.begin() + h.dim(0));
    return mean_pool(h, m);
  }

  std::pair<std::vector<uint8_t>, int64_t> conditioning_span(const PromptSpans& spans) const {
    const int64_t end = hcfg_.input == HyperInput::Query ? spans.query_end : spans.doc_end;
    std::vector<uint8_t> mask(static_cast<size_t>(end), 0);
    auto mark = [&](int64_t b, int64_t e) {
      for (int64_t i = b; i < e; ++i) mask[static_cast<size_t>(i)] = 1;
    };
    if (hcfg_.input != HyperInput::Document) mark(spans.query_begin, spans.query_end);
    if (hcfg_.input != HyperInput::Query) mark(spans.doc_begin, spans.doc_end);
    return {mask, end};
  }

  void fill_layer(GeneratedAdapters<T>& out, int layer, Tensor<T> h) const {
    auto& la = out.overlay.layers[layer];
    const int d = mcfg_.d_model;
    switch (acfg_.kind) {
      case AdapterKind::Lora:
        for (const auto& t : acfg_.lora_targets) {
          const auto& [w, b] = decoders_.at("lora." + t);
          Tensor<T> a = decode_affine(h, w, b, {acfg_.lora_rank, d});
          la.lora[t].A = a;
          out.tensors.emplace_back(layer, "lora." + t + ".A", a);
        }
        break;
      case AdapterKind::Prompt: {
        const auto& [w, b] = decoders_.at("prompt");
        Tensor<T> e = decode_affine(h, w, b, {acfg_.prompt_len, d});
        la.prompt->E = e;
        out.tensors.emplace_back(layer, "prompt.E", e);
        break;
      }
      case AdapterKind::PAdapter: {
        const int bpa = acfg_.bottleneck_for(mcfg_);
        const auto& [w1, b1] = decoders_.at("padapter.L1");
        const auto& [w2, b2] = decoders_.at("padapter.L2");
        Tensor<T> l1 = decode_affine(h, w1, b1, {bpa, d});
        Tensor<T> l2 = decode_affine(h, w2, b2, {d, bpa});
        la.padapter->L1 = l1;
        la.padapter->L2 = l2;
        out.tensors.emplace_back(layer, "padapter.L1", l1);
        out.tensors.emplace_back(layer, "padapter.L2", l2);
        break;
      }
    }
  }

  ModelConfig mcfg_;
  AdapterConfig acfg_;
  HyperConfig hcfg_;
  std::vector<HyperEncoderParams<T>> encoders_;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> decoders_;
};

}  // namespace qfs
