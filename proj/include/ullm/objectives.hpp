#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "ullm/common.hpp"

namespace ullm {

/// 1 - p(c) is floored at this value before taking the log, so a saturated
/// candidate costs -log(kProbabilityClamp) instead of infinity.
inline constexpr double kProbabilityClamp = 1e-12;

struct LossValue {
  double total = 0.0;
  std::vector<double> per_step;
  std::size_t n_tokens = 0;
};

/// Loss plus dLoss/dlogits, one row per logits row.
struct LossAndGrad {
  LossValue loss;
  MatrixD dlogits;
};

/// Negative candidates per step. per_step[i] applies to sequence position
/// first_step + i; each entry is sorted and duplicate free.
struct CandidateSet {
  std::size_t first_step = 0;
  std::vector<std::vector<TokenId>> per_step;

  std::size_t flagged_steps() const;
  std::size_t total_candidates() const;
};

/// Cross-entropy -log softmax(logits[t])[targets[t]] for every row.
/// dlogits[t] = p - onehot(target).
LossAndGrad mle_loss(const MatrixD& logits, std::span<const TokenId> targets);

struct RowLoss {
  double value = 0.0;
  VectorD dlogits;
};

/// -sum_c log(1 - p(c)) for one softmax row, with the probability clamp.
RowLoss unlikelihood_loss(const Eigen::Ref<const VectorD>& logits,
                          std::span<const TokenId> candidates,
                          double clamp = kProbabilityClamp);

/// Per row: -log p(target) - alpha * sum_c log(1 - p(c)).
/// `candidates.per_step` is aligned with the logits rows. alpha == 0 takes
/// exactly the mle_loss code path.
LossAndGrad token_unlikelihood_objective(const MatrixD& logits, std::span<const TokenId> targets,
                                         const CandidateSet& candidates, double alpha);

/// Inputs to the closed-form softmax-input gradient of the token-level
/// objective for one step.
struct GradRowSpec {
  double alpha = 1.0;
  TokenId true_index = 0;
  std::vector<TokenId> neg_indices;
  std::size_t vocab_size = 0;
};

/// Negative gradient of log p(i*) + alpha log(1 - p(i_neg)) with respect to
/// the softmax input: x* - m (.) p, where m_i = 1 - alpha p_neg / (1 - p_neg)
/// off the candidate and m_{i_neg} = 1 + alpha. Throws if p_neg == 1.
VectorD closed_form_gradient(double alpha, TokenId true_index, TokenId neg_index,
                             const Eigen::Ref<const VectorD>& p);

/// Same, for any number of candidates: no candidates gives x* - p, one
/// candidate the form above, several the average of single-candidate
/// gradients with alpha_c = alpha |C| in place of alpha.
VectorD closed_form_gradient(const GradRowSpec& spec, const Eigen::Ref<const VectorD>& p);

/// (candidate, alpha_c) pairs with alpha_c = alpha |C|.
std::vector<std::pair<TokenId, double>> regroup_multi_candidate(std::span<const TokenId> candidates,
                                                                double alpha);

/// log p(i*) + alpha log(1 - p(i_neg)): the quantity whose gradient
/// closed_form_gradient returns.
double single_candidate_objective(const Eigen::Ref<const VectorD>& logits, TokenId true_index,
                                  TokenId neg_index, double alpha);

/// The regrouped form (1/|C|) sum_c [log p(i*) + alpha_c log(1 - p(c))].
/// Equals the negated token-level objective for the same row.
double regrouped_objective(const Eigen::Ref<const VectorD>& logits, TokenId true_index,
                           std::span<const TokenId> candidates, double alpha);

/// {ids[0], ..., ids[t-1]} \ {ids[t]} for 0-based position t.
std::vector<TokenId> prev_context_candidates(std::span<const TokenId> ids, std::size_t t);

/// Previous-context candidates for every target of a block: the set at
/// per_step[i] belongs to position i + 1 (first_step == 1).
CandidateSet prev_context_candidate_set(std::span<const TokenId> ids);

/// Position t >= k gets {ids[t]} when some length-n window covering t
/// matches an n-gram that ends strictly before that window starts.
CandidateSet repeat_ngram_candidates(std::span<const TokenId> ids, std::size_t n, std::size_t k);

/// Position t >= k gets {ids[t]} with independent probability p_penalize.
CandidateSet random_seq_candidates(std::span<const TokenId> ids, std::size_t k, double p_penalize,
                                   Rng& rng);

/// Sequence-level unlikelihood over the continuation of a completion.
/// `logits` comes from a forward pass over completion[0 .. T-1), so row r
/// predicts position r + 1. Candidates must cover exactly positions
/// [k, T) with k >= 1. per_step in the result holds one entry per
/// continuation step.
LossAndGrad sequence_level_loss(const MatrixD& logits, const CandidateSet& candidates);

}  // namespace ullm
