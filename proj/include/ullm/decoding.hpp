#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ullm/common.hpp"
#include "ullm/language_model.hpp"

namespace ullm {

enum class Strategy { greedy, beam, topk, nucleus };

Strategy parse_strategy(std::string_view name);
std::string_view to_string(Strategy s);

struct DecodingConfig {
  Strategy strategy = Strategy::greedy;
  std::size_t beam_size = 1;
  std::optional<std::size_t> block_ngram;
  std::size_t top_k = 1;
  double top_p = 1.0;
  std::size_t max_new_tokens = 30;
  std::uint64_t seed = 0;

  void validate() const;
  /// Short tag used in reports, e.g. "greedy", "beam-10-block-4", "top-k-3", "top-p-0.9".
  std::string tag() const;
};

struct Hypothesis {
  std::vector<TokenId> ids;  // continuation only
  double score = 0.0;        // sum of log p(chosen token | everything before it)
};

struct DecodeResult {
  std::vector<TokenId> continuation;
  double score = 0.0;
  std::size_t blocked_fallbacks = 0;
};

/// argmax at every step, ties to the lowest id. Exactly n tokens.
DecodeResult greedy_decode(const LanguageModel& model, std::span<const TokenId> prefix, std::size_t n);

/// Fixed-length beam search over summed log-probabilities, no length
/// normalization. With block_ngram = m, an expansion that would recreate an
/// m-gram already present in the hypothesis (prefix included) scores -inf.
/// If every expansion at a step is blocked, the step falls back to unblocked
/// scores and blocked_fallbacks is incremented.
DecodeResult beam_search_decode(const LanguageModel& model, std::span<const TokenId> prefix,
                                std::size_t n, std::size_t beam_size,
                                std::optional<std::size_t> block_ngram = std::nullopt);

struct TopK {
  std::size_t k;
};
struct Nucleus {
  double p;
};

/// Renormalized restriction of `probs` to U: the k most probable ids, or the
/// smallest probability-sorted prefix with cumulative mass >= p. Ties go to
/// the lower id. When U covers the whole support the input is returned
/// unchanged.
VectorD truncated_distribution(const Eigen::Ref<const VectorD>& probs, TopK mode);
VectorD truncated_distribution(const Eigen::Ref<const VectorD>& probs, Nucleus mode);

/// Inverse-CDF draw in id order.
TokenId sample_from(const Eigen::Ref<const VectorD>& q, Rng& rng);

/// n tokens sampled from the truncated distribution (top-k or nucleus).
DecodeResult stochastic_decode(const LanguageModel& model, std::span<const TokenId> prefix,
                               std::size_t n, const DecodingConfig& config, Rng& rng);

/// Dispatches on config.strategy. Stochastic strategies draw from `rng`.
DecodeResult decode(const LanguageModel& model, std::span<const TokenId> prefix,
                    const DecodingConfig& config, Rng& rng);

/// One line per completion, tab separated:
///   strategy <TAB> score <TAB> prefix ids <TAB> continuation ids
/// with ids space separated and score printed with 17 significant digits.
struct CompletionRecord {
  std::string strategy;
  double score = 0.0;
  std::vector<TokenId> prefix;
  std::vector<TokenId> continuation;
};

void write_completion(std::ostream& out, const CompletionRecord& record);
std::vector<CompletionRecord> read_completions(std::istream& in);

}  // namespace ullm
