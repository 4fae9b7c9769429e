#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qfs/adapters.hpp"
#include "qfs/model.hpp"
#include "qfs/ops.hpp"
#include "qfs/prompting.hpp"

namespace qfs {

enum class InfiniMode { Off, Inf, QfInf };

inline InfiniMode parse_infini_mode(const std::string& s) {
  if (s == "off") return InfiniMode::Off;
  if (s == "inf") return InfiniMode::Inf;
  if (s == "qf-inf" || s == "qf_inf") return InfiniMode::QfInf;
  throw ConfigError("unknown infini mode: " + s + " (expected off|inf|qf-inf)");
}

inline const char* infini_mode_name(InfiniMode m) {
  switch (m) {
    case InfiniMode::Off: return "off";
    case InfiniMode::Inf: return "inf";
    case InfiniMode::QfInf: return "qf-inf";
  }
  return "?";
}

// Segmentation of the token stream: fixed-length contiguous segments, only the
// final one may be shorter. The window is the local-attention KV budget; the
// previous segment pads the current one up to it.
struct SegmentPlan {
  int64_t segment_len = 32;
  int64_t window = 64;

  void validate() const {
    if (segment_len < 1) throw ConfigError("infini.segment_len must be >= 1");
    if (window < segment_len)
      throw ConfigError("infini.window must be >= segment_len (pad target)");
  }

  std::vector<std::pair<int64_t, int64_t>> boundaries(int64_t n) const {
    std::vector<std::pair<int64_t, int64_t>> out;
    for (int64_t b = 0; b < n; b += segment_len) out.emplace_back(b, std::min(b + segment_len, n));
    return out;
  }
};

inline std::vector<std::vector<int>> segment_input(const std::vector<int>& tokens,
                                                   const SegmentPlan& plan) {
  plan.validate();
  std::vector<std::vector<int>> out;
  for (auto [b, e] : plan.boundaries(static_cast<int64_t>(tokens.size())))
    out.emplace_back(tokens.begin() + b, tokens.begin() + e);
  return out;
}

// Fixed-size compressive state for one attention head: the full-context
// memory, the query-focused memory, and the shared normalizer. Size never
// depends on how many segments were consumed.
template <typename T>
struct HeadMemory {
  Tensor<T> m_all;    // [d_key, d_value]
  Tensor<T> m_query;  // [d_key, d_value], query-focused variant
  Tensor<T> z;        // [d_key], strictly positive once anything is compressed
  int64_t tokens = 0;

  static HeadMemory make(int dk, int dv, bool query_focused) {
    HeadMemory m;
    m.m_all = Tensor<T>::zeros({dk, dv});
    if (query_focused) m.m_query = Tensor<T>::zeros({dk, dv});
    m.z = Tensor<T>::zeros({dk});
    return m;
  }
};

// alpha_i = sigmoid(mean(Q_query) . K_i / sqrt(d_model)); V_hat = alpha ⊙ V.
// Returns (alpha, V_hat).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> relevance_scale(Tensor<T> q_query_mean, Tensor<T> k_cache,
                                                Tensor<T> v_cache, int d_model) {
  if (!q_query_mean.defined())
    throw DataError("relevance_scale: query-instruction state missing; the query instruction "
                    "must precede the document");
  check(k_cache.dim(0) >= 1, "relevance_scale: empty cache");
  const int64_t dk = k_cache.dim(1);
  Tensor<T> scores = matmul_nt(k_cache, reshape(q_query_mean, {1, dk}));  // [C,1]
  Tensor<T> alpha = sigmoid(scale(reshape(scores, {k_cache.dim(0)}),
                                  1.0 / std::sqrt(static_cast<double>(d_model))));
  return {alpha, mul_rowscalar(v_cache, alpha)};
}

// M_all += s(K)^T V; M_query += s(K)^T V_hat; z += column sums of s(K).
// Call exactly once per compressed cache.
template <typename T>
void update_memory(HeadMemory<T>& mem, Tensor<T> k_cache, Tensor<T> v_cache,
                   Tensor<T> v_hat = {}) {
  if (k_cache.dim(0) != v_cache.dim(0))
    throw ShapeError("update_memory: K cache " + shape_str(k_cache.shape()) +
                     " vs V cache " + shape_str(v_cache.shape()));
  Tensor<T> sk = elu_plus_one(k_cache);
  Tensor<T> skt = transpose(sk);
  mem.m_all = add(mem.m_all, matmul(skt, v_cache));
  if (mem.m_query.defined()) {
    if (!v_hat.defined()) throw ShapeError("update_memory: query-focused memory needs V_hat");
    mem.m_query = add(mem.m_query, matmul(skt, v_hat));
  }
  mem.z = add(mem.z, sum_axis0(sk));
  mem.tokens += k_cache.dim(0);
}

// A = s(Q) M / (s(Q) z), rows normalized by the per-row scalar. Retrieval
// before the first compression is a contract violation (the caller guards
// and falls back to local attention).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> retrieve(const HeadMemory<T>& mem, Tensor<T> q) {
  if (mem.tokens == 0)
    throw DataError("retrieve: nothing compressed yet (first-segment rule skips retrieval)");
  const int64_t dk = q.dim(1);
  Tensor<T> sq = elu_plus_one(q);
  Tensor<T> denom = reshape(matmul(sq, reshape(mem.z, {dk, 1})), {q.dim(0)});
  Tensor<T> a_all = div_rowscalar(matmul(sq, mem.m_all), denom);
  Tensor<T> a_query;
  if (mem.m_query.defined()) a_query = div_rowscalar(matmul(sq, mem.m_query), denom);
  return {a_all, a_query};
}

// gamma = sigmoid(W_g . A_query row); A_ret = gamma ⊙ A_query + (1-gamma) ⊙ A_all;
// A = sigmoid(beta) ⊙ A_ret + (1-sigmoid(beta)) ⊙ A_local.
template <typename T>
Tensor<T> inject(Tensor<T> a_query, Tensor<T> a_all, Tensor<T> a_local, Tensor<T> wg_row,
                 Tensor<T> beta_scalar) {
  Tensor<T> gamma = reshape(sigmoid(matmul_nt(a_query, wg_row)), {a_query.dim(0)});
  Tensor<T> a_ret = add(mul_rowscalar(a_query, gamma), mul_rowscalar(a_all, rsub_const(gamma, 1.0)));
  Tensor<T> b = sigmoid(beta_scalar);
  return add(mul(a_ret, b), mul(a_local, rsub_const(b, 1.0)));
}

// Plain (non-query-focused) injection: no gamma mix, only the beta gate.
template <typename T>
Tensor<T> inject_inf(Tensor<T> a_all, Tensor<T> a_local, Tensor<T> beta_scalar) {
  Tensor<T> b = sigmoid(beta_scalar);
  return add(mul(a_all, b), mul(a_local, rsub_const(b, 1.0)));
}

// Learned long-term injection gates, per layer and head.
template <typename T>
struct InfiniParams {
  std::vector<Tensor<T>> wg;    // [heads, d_value] per layer (query-focused mode)
  std::vector<Tensor<T>> beta;  // [heads] per layer
};

template <typename T>
InfiniParams<T> init_infini_params(const ModelConfig& m, InfiniMode mode, ParamStore<T>& store) {
  InfiniParams<T> p;
  if (mode == InfiniMode::Off) return p;
  for (int i = 0; i < m.n_layers; ++i) {
    std::string n = std::to_string(i);
    if (n.size() < 2) n = "0" + n;
    if (mode == InfiniMode::QfInf)
      p.wg.push_back(store.add("infini.layer" + n + ".wg",
                               Tensor<T>::zeros({m.n_heads, m.d_value()}, true)));
    p.beta.push_back(store.add("infini.layer" + n + ".beta",
                               Tensor<T>::zeros({m.n_heads}, true)));
  }
  return p;
}

inline int64_t infini_trainable_count(const ModelConfig& m, InfiniMode mode) {
  if (mode == InfiniMode::Off) return 0;
  int64_t per_layer = m.n_heads;  // beta
  if (mode == InfiniMode::QfInf) per_layer += int64_t(m.n_heads) * m.d_value();
  return per_layer * m.n_layers;
}

struct InfiniCounters {
  int64_t segments = 0;
  int64_t peak_local_kv = 0;       // max KV rows a local attention saw (cache + current)
  int64_t memory_state_bytes = 0;  // M/z/q-instruction state, constant in document length
  int64_t tokens = 0;
};

// Drives a transformer over a segmented stream with compressive memory.
// Block mode (forward) covers training and prefill; step mode extends the
// stream one token at a time for generation. Both share the same per-segment
// semantics: when a segment starts, the previous segment's KV is compressed
// into memory and still pads the local attention window.
template <typename T>
class InfiniRunner {
 public:
  InfiniRunner(const Transformer<T>* model, const AdapterSet<T>* adapters,
               const InfiniParams<T>* gates, SegmentPlan plan, InfiniMode mode,
               PromptSpans spans, bool detach_memory = false)
      : model_(model),
        adapters_(adapters),
        gates_(gates),
        plan_(plan),
        mode_(mode),
        spans_(spans),
        detach_memory_(detach_memory) {
    plan_.validate();
    spans_.validate();
    if (mode_ == InfiniMode::Off) throw ConfigError("InfiniRunner requires mode inf or qf-inf");
    const auto& cfg = model_->config();
    const bool qf = mode_ == InfiniMode::QfInf;
    mem_.resize(cfg.n_layers);
    for (auto& per_layer : mem_) {
      per_layer.reserve(cfg.n_heads);
      for (int h = 0; h < cfg.n_heads; ++h)
        per_layer.push_back(HeadMemory<T>::make(cfg.d_key(), cfg.d_value(), qf));
    }
    cache_k_.resize(cfg.n_layers);
    cache_v_.resize(cfg.n_layers);
    cur_k_.resize(cfg.n_layers);
    cur_v_.resize(cfg.n_layers);
    qins_sum_.resize(cfg.n_layers);
    const int64_t per_head =
        (qf ? 2 : 1) * int64_t(cfg.d_key()) * cfg.d_value() + cfg.d_key() + (qf ? cfg.d_key() : 0);
    counters_.memory_state_bytes =
        per_head * cfg.n_layers * cfg.n_heads * static_cast<int64_t>(sizeof(T));
  }

  // Teacher-forced pass over the whole prompt; returns [L, vocab] logits.
  Tensor<T> forward(const std::vector<int>& tokens) {
    std::vector<Tensor<T>> logit_blocks;
    for (const auto& seg : segment_input(tokens, plan_)) {
      if (!cur_k_[0].empty()) advance_segment();
      logit_blocks.push_back(process_rows(seg));
    }
    return logit_blocks.size() == 1 ? logit_blocks[0] : concat(logit_blocks, 0);
  }

  // Streaming prefill: identical math to forward(), but keeps the final
  // partial segment open so step() can extend it.
  void prefill(const std::vector<int>& tokens) {
    for (const auto& seg : segment_input(tokens, plan_)) {
      if (!cur_k_[0].empty()) advance_segment();
      last_logits_ = process_rows(seg);
    }
    if (last_logits_.defined() && last_logits_.dim(0) > 1)
      last_logits_ = slice_rows(last_logits_, last_logits_.dim(0) - 1, last_logits_.dim(0));
  }

  // Appends one token to the stream; returns its [1, vocab] logits.
  Tensor<T> step(int token) {
    if (cur_len_ >= plan_.segment_len) advance_segment();
    last_logits_ = process_rows({token});
    return last_logits_;
  }

  Tensor<T> last_logits() const { return last_logits_; }
  const InfiniCounters& counters() const { return counters_; }

  // Exposed for tests: per-head memory state.
  const HeadMemory<T>& memory(int layer, int head) const { return mem_[layer][head]; }

 private:
  // Closes the open segment: it becomes the cache and is compressed into
  // memory, where it (and everything older) stays retrievable while the new
  // segment's local attention is padded with it.
  void advance_segment() {
    const auto& cfg = model_->config();
    for (int l = 0; l < cfg.n_layers; ++l) {
      cache_k_[l] = cur_k_[l].size() == 1 ? cur_k_[l][0] : concat(cur_k_[l], 0);
      cache_v_[l] = cur_v_[l].size() == 1 ? cur_v_[l][0] : concat(cur_v_[l], 0);
      cur_k_[l].clear();
      cur_v_[l].clear();
      compress_layer(l);
    }
    cur_len_ = 0;
  }

  void compress_layer(int l) {
    const auto& cfg = model_->config();
    const int dk = cfg.d_key();
    Tensor<T> ck = detach_memory_ ? cache_k_[l].detach() : cache_k_[l];
    Tensor<T> cv = detach_memory_ ? cache_v_[l].detach() : cache_v_[l];
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor<T> kh = slice_cols(ck, h * dk, (h + 1) * dk);
      Tensor<T> vh = slice_cols(cv, h * dk, (h + 1) * dk);
      Tensor<T> v_hat;
      if (mode_ == InfiniMode::QfInf) {
        Tensor<T> qm = q_ins_mean(l, h);
        if (detach_memory_) qm = qm.detach();
        v_hat = relevance_scale(qm, kh, vh, cfg.d_model).second;
      }
      update_memory(mem_[l][h], kh, vh, v_hat);
    }
  }

  Tensor<T> q_ins_mean(int l, int h) {
    if (qins_count_ == 0)
      throw DataError("query-focused memory needs the query instruction before the document "
                      "(no query tokens seen in the first segment)");
    const int dk = model_->config().d_key();
    Tensor<T> sum_h = slice_cols(reshape(qins_sum_[l], {1, int64_t(model_->config().d_model)}),
                                 h * dk, (h + 1) * dk);
    return reshape(scale(sum_h, 1.0 / static_cast<double>(qins_count_)), {dk});
  }

  Tensor<T> process_rows(const std::vector<int>& rows) {
    const auto& cfg = model_->config();
    const int64_t L = static_cast<int64_t>(rows.size());
    // the previous segment pads the window up to its fixed budget; rows the
    // pad drops are already in memory
    const int64_t cache_allow = plan_.window - plan_.segment_len;

    AttnInjectFn<T> inject_fn = [this](int layer, int head, Tensor<T> q_head, Tensor<T> a_local) {
      auto& hm = mem_[layer][head];
      if (hm.tokens == 0) return a_local;  // first-segment rule: A = A_local
      auto [a_all, a_query] = retrieve(hm, q_head);
      Tensor<T> beta_h = reshape(
          slice_rows(reshape(gates_->beta[layer], {model_->config().n_heads, 1}), head, head + 1),
          {1});
      if (mode_ == InfiniMode::QfInf) {
        Tensor<T> wg_row = slice_rows(gates_->wg[layer], head, head + 1);
        return inject(a_query, a_all, a_local, wg_row, beta_h);
      }
      return inject_inf(a_all, a_local, beta_h);
    };

    Tensor<T> x = model_->embed_tokens(rows);
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerRunOptions<T> opt;
      opt.adapters = adapters_ ? adapters_->layer(l) : nullptr;
      opt.window = plan_.window;
      opt.inject = &inject_fn;
      CapturedLayer<T> cap;
      opt.capture = &cap;
      opt.pad_k = assemble_pad(cache_k_[l], cur_k_[l], cache_allow);
      opt.pad_v = assemble_pad(cache_v_[l], cur_v_[l], cache_allow);
      x = model_->layer_forward(l, x, opt);

      cur_k_[l].push_back(cap.k);
      cur_v_[l].push_back(cap.v);
      if (mode_ == InfiniMode::QfInf) accumulate_qins(l, cap.q, L);
      if (l == 0) {
        const int64_t seen = (opt.pad_k.defined() ? opt.pad_k.dim(0) : 0) + L;
        counters_.peak_local_kv = std::max(counters_.peak_local_kv, seen);
      }
    }
    if (cur_len_ == 0) ++counters_.segments;
    cur_len_ += L;
    consumed_ += L;
    counters_.tokens = consumed_;
    return model_->logits_from_hidden(x);
  }

  // [cache tail (<= allow rows) | open-segment prefix]; the prefix is never
  // truncated so block and streaming attention see identical windows
  static Tensor<T> assemble_pad(const Tensor<T>& cache, const std::vector<Tensor<T>>& cur,
                                int64_t allow) {
    std::vector<Tensor<T>> parts;
    if (cache.defined() && allow > 0) {
      parts.push_back(cache.dim(0) <= allow
                          ? cache
                          : slice_rows(cache, cache.dim(0) - allow, cache.dim(0)));
    }
    for (const auto& t : cur) parts.push_back(t);
    if (parts.empty()) return {};
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
  }

  // Mean of the query-instruction rows' attention queries, taken over the
  // first segment only and then held fixed.
  void accumulate_qins(int l, Tensor<T> q, int64_t rows_in_block) {
    const int64_t block_begin = consumed_;
    if (block_begin >= plan_.segment_len) return;  // past the first segment
    const int64_t lo = std::max<int64_t>(spans_.query_begin, block_begin);
    const int64_t hi =
        std::min<int64_t>({spans_.query_end, block_begin + rows_in_block, plan_.segment_len});
    if (lo >= hi) return;
    Tensor<T> rows = slice_rows(q, lo - block_begin, hi - block_begin);
    Tensor<T> s = sum_axis0(rows);
    qins_sum_[l] = qins_sum_[l].defined() ? add(qins_sum_[l], s) : s;
    if (l == 0) qins_count_ += hi - lo;
  }

  const Transformer<T>* model_;
  const AdapterSet<T>* adapters_;
  const InfiniParams<T>* gates_;
  SegmentPlan plan_;
  InfiniMode mode_;
  PromptSpans spans_;
  bool detach_memory_;

  std::vector<std::vector<HeadMemory<T>>> mem_;  // [layer][head]
  std::vector<Tensor<T>> cache_k_, cache_v_;     // previous segment, pre-rotation
  std::vector<std::vector<Tensor<T>>> cur_k_, cur_v_;  // open segment row blocks
  std::vector<Tensor<T>> qins_sum_;              // [d_model] per layer
  int64_t qins_count_ = 0;
  int64_t cur_len_ = 0;
  int64_t consumed_ = 0;
  Tensor<T> last_logits_;
  InfiniCounters counters_;
};

}  // namespace qfs
