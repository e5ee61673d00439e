#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ullm/common.hpp"
#include "ullm/corpus.hpp"
#include "ullm/language_model.hpp"

namespace ullm {

/// Default window for rep/l and wrep/l.
inline constexpr std::size_t kDefaultRepWindow = 128;

/// Documented human seq-rep-4 on the Wikitext-103 test split (not reproduced
/// at desk scale).
inline constexpr double kHumanSeqRep4WikitextTest = 0.006;

/// 1 - |unique n-grams| / |n-grams|; nullopt when the continuation is
/// shorter than n.
std::optional<double> seq_rep_n(std::span<const TokenId> continuation, std::size_t n);

/// Mean seq-rep-n over continuations of length >= n. Shorter ones are
/// skipped and counted in `skipped` when given.
double mean_seq_rep_n(const std::vector<std::vector<TokenId>>& continuations, std::size_t n,
                      std::size_t* skipped = nullptr);

/// Teacher-forced greedy predictions and per-token NLL. For sequence s,
/// predictions[s][t-1] = argmax p(. | x_<t) and nll[s][t-1] = -log p(x_t | x_<t)
/// for positions t = 1 .. T-1 (the first token is only conditioned on).
struct TeacherForcedPass {
  std::vector<std::vector<TokenId>> predictions;
  std::vector<std::vector<double>> nll;
};

TeacherForcedPass teacher_forced_pass(const LanguageModel& model,
                                      const std::vector<TokenSequence>& sequences);

/// Fraction of predicted positions t whose prediction occurs among the
/// previous l tokens x_{t-l} .. x_{t-1} (truncated at the sequence start).
/// wrep additionally requires prediction != x_t.
double rep_l(const std::vector<TokenSequence>& sequences,
             const std::vector<std::vector<TokenId>>& predictions, std::size_t l);
double wrep_l(const std::vector<TokenSequence>& sequences,
              const std::vector<std::vector<TokenId>>& predictions, std::size_t l);
/// Same indicator applied to the ground-truth next token (the human row).
double human_rep_l(const std::vector<TokenSequence>& sequences, std::size_t l);

/// Number of distinct next-token predictions.
std::size_t uniq(const std::vector<std::vector<TokenId>>& predictions);
/// Number of distinct tokens across continuations.
std::size_t uniq_seq(const std::vector<std::vector<TokenId>>& continuations);

/// exp(mean per-token NLL). Throws on NaN.
double perplexity(const std::vector<std::vector<double>>& nll);
double next_token_accuracy(const std::vector<TokenSequence>& sequences,
                           const std::vector<std::vector<TokenId>>& predictions);

double perplexity(const LanguageModel& model, const std::vector<TokenSequence>& sequences);
double next_token_accuracy(const LanguageModel& model, const std::vector<TokenSequence>& sequences);

using TokenHistogram = std::map<TokenId, std::size_t>;

TokenHistogram token_histogram(const std::vector<std::vector<TokenId>>& token_lists);

/// CSV with header "token,id,count,frequency_rank"; rank 1 is the most
/// frequent, ties ordered by id. Tokens are quoted per RFC 4180.
void export_histogram_csv(const TokenHistogram& histogram, const Vocabulary& vocab,
                          const std::string& path);
TokenHistogram read_histogram_csv(const std::string& path);

struct MetricsReport {
  std::string model;
  std::string search;
  std::map<std::size_t, double> seq_rep;  // n -> seq-rep-n
  std::map<std::size_t, double> rep;      // l -> rep/l
  std::map<std::size_t, double> wrep;     // l -> wrep/l
  std::optional<std::size_t> uniq;
  std::optional<std::size_t> uniq_seq;
  std::optional<double> ppl;
  std::optional<double> acc;
  TokenHistogram token_histogram;

  /// Flat JSON object: model, search, seq_rep_<n>, rep_<l>, wrep_<l>, uniq,
  /// uniq_seq, ppl, acc. Absent metrics are omitted. The histogram is
  /// exported separately as CSV.
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

}  // namespace ullm
