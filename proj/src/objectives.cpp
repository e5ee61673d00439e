#include "ullm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>

#include "ullm/model.hpp"

namespace ullm {

namespace {

void check_ids(std::span<const TokenId> ids, std::size_t vocab, const char* what) {
  for (TokenId id : ids) {
    require(id < vocab, std::string(what) + ": token id " + std::to_string(id) +
                            " out of range for vocabulary of " + std::to_string(vocab));
  }
}

// Adds the unlikelihood term for `candidates` to a row: returns the loss
// contribution and accumulates its gradient (scaled by `weight`) into `grad`.
double add_unlikelihood(const VectorD& p, std::span<const TokenId> candidates, double weight,
                        double clamp, Eigen::Ref<VectorD> grad) {
  double loss = 0.0;
  double coef_sum = 0.0;
  for (TokenId c : candidates) {
    const double one_minus = 1.0 - p(c);
    loss -= std::log(std::max(one_minus, clamp));
    if (one_minus > clamp) {
      const double coef = weight * p(c) / one_minus;
      grad(c) += coef;
      coef_sum += coef;
    }
  }
  if (coef_sum != 0.0) grad -= coef_sum * p;
  return weight * loss;
}

}  // namespace

std::size_t CandidateSet::flagged_steps() const {
  return static_cast<std::size_t>(
      std::count_if(per_step.begin(), per_step.end(), [](const auto& s) { return !s.empty(); }));
}

std::size_t CandidateSet::total_candidates() const {
  std::size_t n = 0;
  for (const auto& s : per_step) n += s.size();
  return n;
}

LossAndGrad mle_loss(const MatrixD& logits, std::span<const TokenId> targets) {
  const auto rows = static_cast<std::size_t>(logits.rows());
  require(targets.size() == rows, "mle_loss: " + std::to_string(targets.size()) +
                                      " targets for " + std::to_string(rows) + " logit rows");
  check_ids(targets, static_cast<std::size_t>(logits.cols()), "mle_loss");
  LossAndGrad out;
  out.dlogits.resize(logits.rows(), logits.cols());
  out.loss.per_step.resize(rows);
  out.loss.n_tokens = rows;
  for (std::size_t t = 0; t < rows; ++t) {
    const auto r = static_cast<Eigen::Index>(t);
    const VectorD lp = log_softmax(logits.row(r).transpose());
    const double nll = -lp(targets[t]);
    out.loss.per_step[t] = nll;
    out.loss.total += nll;
    out.dlogits.row(r) = lp.array().exp().transpose();
    out.dlogits(r, targets[t]) -= 1.0;
  }
  return out;
}

RowLoss unlikelihood_loss(const Eigen::Ref<const VectorD>& logits,
                          std::span<const TokenId> candidates, double clamp) {
  check_ids(candidates, static_cast<std::size_t>(logits.size()), "unlikelihood_loss");
  RowLoss out;
  out.dlogits = VectorD::Zero(logits.size());
  if (candidates.empty()) return out;
  const VectorD p = softmax(logits);
  out.value = add_unlikelihood(p, candidates, 1.0, clamp, out.dlogits);
  return out;
}

LossAndGrad token_unlikelihood_objective(const MatrixD& logits, std::span<const TokenId> targets,
                                         const CandidateSet& candidates, double alpha) {
  require(alpha >= 0.0, "token_unlikelihood_objective: alpha must be nonnegative");
  LossAndGrad out = mle_loss(logits, targets);
  if (alpha == 0.0) return out;
  require(candidates.per_step.size() == targets.size(),
          "token_unlikelihood_objective: candidate steps do not match targets");
  const auto vocab = static_cast<std::size_t>(logits.cols());
  out.loss.total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& cands = candidates.per_step[t];
    if (!cands.empty()) {
      check_ids(cands, vocab, "token_unlikelihood_objective");
      const auto r = static_cast<Eigen::Index>(t);
      const VectorD p = softmax(logits.row(r).transpose());
      VectorD grad = out.dlogits.row(r).transpose();
      out.loss.per_step[t] += add_unlikelihood(p, cands, alpha, kProbabilityClamp, grad);
      out.dlogits.row(r) = grad.transpose();
    }
    out.loss.total += out.loss.per_step[t];
  }
  return out;
}

VectorD closed_form_gradient(double alpha, TokenId true_index, TokenId neg_index,
                             const Eigen::Ref<const VectorD>& p) {
  const auto V = static_cast<std::size_t>(p.size());
  require(true_index < V && neg_index < V, "closed_form_gradient: index out of range");
  const double p_neg = p(neg_index);
  if (p_neg >= 1.0) throw Error(ErrorCode::numeric, "degenerate candidate probability");
  const double off = 1.0 - alpha * p_neg / (1.0 - p_neg);
  VectorD m = VectorD::Constant(p.size(), off);
  m(neg_index) = 1.0 + alpha;
  VectorD grad = -m.cwiseProduct(p);
  grad(true_index) += 1.0;
  return grad;
}

VectorD closed_form_gradient(const GradRowSpec& spec, const Eigen::Ref<const VectorD>& p) {
  require(spec.vocab_size == static_cast<std::size_t>(p.size()),
          "closed_form_gradient: vocab_size does not match probability vector");
  if (spec.neg_indices.empty()) {
    VectorD grad = -p;
    grad(spec.true_index) += 1.0;
    return grad;
  }
  if (spec.neg_indices.size() == 1) {
    return closed_form_gradient(spec.alpha, spec.true_index, spec.neg_indices.front(), p);
  }
  const auto groups = regroup_multi_candidate(spec.neg_indices, spec.alpha);
  VectorD grad = VectorD::Zero(p.size());
  for (const auto& [c, alpha_c] : groups) grad += closed_form_gradient(alpha_c, spec.true_index, c, p);
  return grad / static_cast<double>(groups.size());
}

std::vector<std::pair<TokenId, double>> regroup_multi_candidate(std::span<const TokenId> candidates,
                                                                double alpha) {
  require(!candidates.empty(), "regroup_multi_candidate: empty candidate set");
  const double alpha_c = alpha * static_cast<double>(candidates.size());
  std::vector<std::pair<TokenId, double>> out;
  out.reserve(candidates.size());
  for (TokenId c : candidates) out.emplace_back(c, alpha_c);
  return out;
}

double single_candidate_objective(const Eigen::Ref<const VectorD>& logits, TokenId true_index,
                                  TokenId neg_index, double alpha) {
  const VectorD lp = log_softmax(logits);
  return lp(true_index) + alpha * std::log1p(-std::exp(lp(neg_index)));
}

double regrouped_objective(const Eigen::Ref<const VectorD>& logits, TokenId true_index,
                           std::span<const TokenId> candidates, double alpha) {
  const auto groups = regroup_multi_candidate(candidates, alpha);
  double sum = 0.0;
  for (const auto& [c, alpha_c] : groups) sum += single_candidate_objective(logits, true_index, c, alpha_c);
  return sum / static_cast<double>(groups.size());
}

std::vector<TokenId> prev_context_candidates(std::span<const TokenId> ids, std::size_t t) {
  require(t < ids.size(), "prev_context_candidates: position out of range");
  std::set<TokenId> seen(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(t));
  seen.erase(ids[t]);
  return {seen.begin(), seen.end()};
}

CandidateSet prev_context_candidate_set(std::span<const TokenId> ids) {
  CandidateSet out;
  out.first_step = 1;
  if (ids.size() < 2) return out;
  out.per_step.resize(ids.size() - 1);
  std::set<TokenId> seen;
  for (std::size_t t = 1; t < ids.size(); ++t) {
    seen.insert(ids[t - 1]);
    auto& step = out.per_step[t - 1];
    step.reserve(seen.size());
    for (TokenId id : seen) {
      if (id != ids[t]) step.push_back(id);
    }
  }
  return out;
}

CandidateSet repeat_ngram_candidates(std::span<const TokenId> ids, std::size_t n, std::size_t k) {
  require(n >= 1, "repeat_ngram_candidates: n must be at least 1");
  require(k < ids.size(), "repeat_ngram_candidates: context boundary must be inside the sequence");
  CandidateSet out;
  out.first_step = k;
  out.per_step.resize(ids.size() - k);
  if (n > ids.size()) return out;

  // first_end[g] = end (exclusive) of the earliest occurrence of n-gram g.
  std::map<std::vector<TokenId>, std::size_t> first_end;
  std::vector<bool> flagged(ids.size(), false);
  for (std::size_t s = 0; s + n <= ids.size(); ++s) {
    std::vector<TokenId> gram(ids.begin() + static_cast<std::ptrdiff_t>(s),
                              ids.begin() + static_cast<std::ptrdiff_t>(s + n));
    const auto [it, inserted] = first_end.emplace(std::move(gram), s + n);
    if (!inserted && it->second <= s) {
      for (std::size_t t = s; t < s + n; ++t) flagged[t] = true;
    }
  }
  for (std::size_t t = k; t < ids.size(); ++t) {
    if (flagged[t]) out.per_step[t - k] = {ids[t]};
  }
  return out;
}

CandidateSet random_seq_candidates(std::span<const TokenId> ids, std::size_t k, double p_penalize,
                                   Rng& rng) {
  require(p_penalize >= 0.0 && p_penalize <= 1.0, "random_seq_candidates: p_penalize must be in [0, 1]");
  require(k <= ids.size(), "random_seq_candidates: context boundary beyond sequence");
  CandidateSet out;
  out.first_step = k;
  out.per_step.resize(ids.size() - k);
  for (std::size_t t = k; t < ids.size(); ++t) {
    if (rng.bernoulli(p_penalize)) out.per_step[t - k] = {ids[t]};
  }
  return out;
}

LossAndGrad sequence_level_loss(const MatrixD& logits, const CandidateSet& candidates) {
  const auto rows = static_cast<std::size_t>(logits.rows());
  require(candidates.first_step >= 1, "sequence_level_loss: continuation must follow a nonempty prefix");
  require(candidates.first_step + candidates.per_step.size() == rows + 1,
          "sequence_level_loss: candidates cover positions [" + std::to_string(candidates.first_step) +
              ", " + std::to_string(candidates.first_step + candidates.per_step.size()) +
              ") but logits predict positions [1, " + std::to_string(rows + 1) + ")");
  const auto vocab = static_cast<std::size_t>(logits.cols());
  LossAndGrad out;
  out.dlogits = MatrixD::Zero(logits.rows(), logits.cols());
  out.loss.per_step.assign(candidates.per_step.size(), 0.0);
  out.loss.n_tokens = candidates.per_step.size();
  for (std::size_t i = 0; i < candidates.per_step.size(); ++i) {
    const auto& cands = candidates.per_step[i];
    if (cands.empty()) continue;
    check_ids(cands, vocab, "sequence_level_loss");
    const auto r = static_cast<Eigen::Index>(candidates.first_step + i - 1);
    const VectorD p = softmax(logits.row(r).transpose());
    VectorD grad = VectorD::Zero(logits.cols());
    out.loss.per_step[i] = add_unlikelihood(p, cands, 1.0, kProbabilityClamp, grad);
    out.dlogits.row(r) = grad.transpose();
  }
  for (double v : out.loss.per_step) out.loss.total += v;
  return out;
}

}  // namespace ullm
