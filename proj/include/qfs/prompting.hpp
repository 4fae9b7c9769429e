#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qfs/common.hpp"
#include "qfs/tokenizer.hpp"

namespace qfs {

// Token-index layout of a built prompt. Query/document spans cover the raw
// text regions (headers excluded); target covers the summary region that the
// loss mask and generation start from.
struct PromptSpans {
  int64_t query_begin = 0, query_end = 0;    // prepended query text
  int64_t doc_begin = 0, doc_end = 0;        // document text
  int64_t query2_begin = -1, query2_end = -1;  // appended query copy, -1 when absent
  int64_t target_begin = 0, target_end = 0;  // summary tokens (+ EOS) when present
  int64_t total = 0;

  bool has_repeat() const { return query2_begin >= 0; }

  void validate() const {
    auto ordered = [](int64_t a, int64_t b) { return a <= b; };
    if (!(query_begin >= 1 && ordered(query_begin, query_end) && ordered(query_end, doc_begin) &&
          ordered(doc_begin, doc_end) && ordered(target_begin, target_end) &&
          target_end <= total))
      throw DataError("malformed prompt spans");
    if (has_repeat() && (query2_begin < doc_end || query2_end > target_begin))
      throw DataError("malformed prompt spans: document must end before the appended query");
  }
};

struct BuiltPrompt {
  std::vector<int> tokens;
  PromptSpans spans;
};

// Prompt template v1. The second query block realizes the repeated query
// instruction; the ablation flag drops it.
namespace prompt_template {
inline constexpr const char* kVersion = "v1";
inline constexpr const char* kQueryHeader = "### Query:\n";
inline constexpr const char* kDocHeader = "\n\n### Document:\n";
inline constexpr const char* kRepeatHeader = "\n\n### Query:\n";
inline constexpr const char* kSummaryHeader = "\n\n### Summary:\n";
}  // namespace prompt_template

// Layout: [BOS][### Query:\n {q}][### Document:\n {d}][### Query:\n {q}]?[### Summary:\n][target? EOS]
inline BuiltPrompt build_prompt_with_repeat(const std::string& query, const std::string& document,
                                            bool repeat_query = true,
                                            const std::optional<std::string>& target = std::nullopt) {
  if (query.empty()) throw DataError("prompt query must be non-empty");
  BuiltPrompt out;
  auto& toks = out.tokens;
  auto& sp = out.spans;
  auto append = [&](const std::string& s) {
    for (unsigned char c : s) toks.push_back(static_cast<int>(c));
  };
  toks.push_back(ByteTokenizer::kBos);
  append(prompt_template::kQueryHeader);
  sp.query_begin = static_cast<int64_t>(toks.size());
  append(query);
  sp.query_end = static_cast<int64_t>(toks.size());
  append(prompt_template::kDocHeader);
  sp.doc_begin = static_cast<int64_t>(toks.size());
  append(document);
  sp.doc_end = static_cast<int64_t>(toks.size());
  if (repeat_query) {
    append(prompt_template::kRepeatHeader);
    sp.query2_begin = static_cast<int64_t>(toks.size());
    append(query);
    sp.query2_end = static_cast<int64_t>(toks.size());
  }
  append(prompt_template::kSummaryHeader);
  sp.target_begin = static_cast<int64_t>(toks.size());
  if (target) {
    append(*target);
    toks.push_back(ByteTokenizer::kEos);
  }
  sp.target_end = static_cast<int64_t>(toks.size());
  sp.total = static_cast<int64_t>(toks.size());
  sp.validate();
  return out;
}

// Query-span row mask over [begin, end) token rows.
inline std::vector<uint8_t> span_mask(int64_t total, int64_t begin, int64_t end) {
  std::vector<uint8_t> m(static_cast<size_t>(total), 0);
  for (int64_t i = begin; i < end && i < total; ++i)
    if (i >= 0) m[static_cast<size_t>(i)] = 1;
  return m;
}

}  // namespace qfs
