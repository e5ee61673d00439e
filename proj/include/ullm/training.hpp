#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ullm/common.hpp"
#include "ullm/corpus.hpp"
#include "ullm/decoding.hpp"
#include "ullm/metrics.hpp"
#include "ullm/model.hpp"
#include "ullm/objectives.hpp"

namespace ullm {

enum class Objective { mle, ul_token };
enum class OptimizerKind { adam, sgd };
enum class CandidateMode { repeat_n, random_seq };

Objective parse_objective(std::string_view name);  // "mle" | "ul-token"
std::string_view to_string(Objective o);
OptimizerKind parse_optimizer(std::string_view name);  // "adam" | "sgd"
std::string_view to_string(OptimizerKind o);
CandidateMode parse_candidate_mode(std::string_view name);  // "repeat-n" | "random-seq"
std::string_view to_string(CandidateMode m);

/// Adam uses beta1 = 0.9, beta2 = 0.98, eps = 1e-8 with bias correction.
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.98;
inline constexpr double kAdamEps = 1e-8;

struct TrainConfig {
  Objective objective = Objective::mle;
  double alpha = 1.0;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::size_t max_updates = 1000;
  std::size_t eval_every = 250;
  std::size_t batch_size = 8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  std::string config_hash;  // recorded in checkpoint metadata

  void validate() const;
};

struct FinetuneConfig {
  double mix_prob = 0.5;
  CandidateMode candidate_mode = CandidateMode::repeat_n;
  std::size_t ngram = 4;
  double p_penalize = 0.5;
  std::size_t prefix_len = 10;
  std::size_t continuation_len = 30;
  std::size_t seq_batch_size = 8;  // prefixes per sequence-level update
  /// Token-level side of the mixture: base objective, alpha, lr, optimizer,
  /// batch size, eval schedule and seed. max_updates counts all updates.
  TrainConfig token;

  void validate(std::size_t max_len) const;
};

struct CheckpointMeta {
  std::size_t update_count = 0;
  double valid_ppl = 0.0;
  std::string objective;
  std::string config_hash;
};

struct Checkpoint {
  CheckpointMeta meta;
  Parameters<float> params;
};

struct FinetuneCounters {
  std::size_t token_updates = 0;
  std::size_t sequence_updates = 0;
  std::size_t prefix_tokens_read = 0;     // corpus tokens consumed by sequence-level updates
  std::size_t decoded_tokens = 0;
  std::size_t flagged_tokens = 0;         // candidate positions penalized
  std::size_t blocked_sequence_batches = 0;  // sequence updates with no candidates at all
};

struct TrainResult {
  std::vector<Checkpoint> series;
  FinetuneCounters counters;
};

/// Optional side outputs. `log` receives one JSON object per line:
/// {"update", "kind", "loss", "wall_time"} per update and
/// {"update", "kind":"eval", "valid_ppl", "wall_time"} per evaluation.
/// On a non-finite loss the offending batch is written to
/// `dump_dir`/nan_batch_<update>.txt before the error is thrown.
struct TrainIO {
  std::ostream* log = nullptr;
  std::string dump_dir;
};

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t n_params);
  void step(Parameters<float>& params, const GradientBundle<float>& grads);
  std::size_t steps() const { return steps_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::size_t steps_ = 0;
  std::vector<float> m_, v_;
};

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before scaling.
double clip_global_norm(GradientBundle<float>& grads, double max_norm);

struct BatchGradient {
  double loss = 0.0;  // mean per token
  std::size_t n_tokens = 0;
  GradientBundle<float> grads;
};

/// Token-level objective on teacher-forced blocks, averaged over all
/// predicted tokens. UL-token uses previous-context candidates.
BatchGradient token_batch_gradient(const Parameters<float>& params,
                                   const std::vector<const TokenSequence*>& batch,
                                   Objective objective, double alpha);

/// Sequence-level unlikelihood on greedy completions of `prefixes`,
/// averaged over continuation tokens. Only prefix tokens are read.
BatchGradient sequence_batch_gradient(const Parameters<float>& params,
                                      const std::vector<std::vector<TokenId>>& prefixes,
                                      const FinetuneConfig& config, Rng& candidate_rng,
                                      FinetuneCounters& counters);

/// Perplexity of the float model on `sequences` via the metrics module.
double validation_perplexity(const Parameters<float>& params,
                             const std::vector<TokenSequence>& sequences);

TrainResult train_token_level(const TrainConfig& config, const Parameters<float>& initial,
                              const CorpusSplit& data, const TrainIO& io = {});

/// argmin valid_ppl, ties to the earliest. Throws on an empty series.
std::size_t best_checkpoint_index(const std::vector<CheckpointMeta>& series);
const Parameters<float>& select_best_checkpoint(const std::vector<Checkpoint>& series);

/// Each update draws z ~ Bernoulli(mix_prob) from its own stream. z = 1:
/// greedy continuations of training prefixes, sequence-level loss. z = 0:
/// one token-level update exactly as train_token_level would make it.
TrainResult finetune_sequence_level(const FinetuneConfig& config, const Parameters<float>& base,
                                    const CorpusSplit& data, const TrainIO& io = {});

struct CompletionSuite {
  std::size_t prefix_len = 10;
  std::size_t continuation_len = 30;
  std::size_t max_prefixes = 0;  // 0 = all
  std::vector<std::size_t> seq_rep_n = {4};
  std::vector<std::size_t> rep_windows = {kDefaultRepWindow};
  std::string model_name = "model";
};

struct SuiteResult {
  std::vector<MetricsReport> reports;  // one per decoding config
  MetricsReport human;
  std::vector<std::vector<CompletionRecord>> completions;  // per decoding config
};

/// Prefix/ground-truth pairs taken at offsets 0, k, 2k, ... of every
/// sequence while a full continuation of N tokens follows.
std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> completion_pairs(
    const std::vector<TokenSequence>& sequences, std::size_t k, std::size_t n, std::size_t max_pairs);

SuiteResult evaluate_completion_suite(const LanguageModel& model,
                                      const std::vector<TokenSequence>& sequences,
                                      const CompletionSuite& suite,
                                      const std::vector<DecodingConfig>& decodings);

}  // namespace ullm
