#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ullm/common.hpp"
#include "ullm/model.hpp"

namespace ullm {

/// max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|); 0 when both are zero.
double normwise_relative_error(const Eigen::Ref<const VectorD>& a, const Eigen::Ref<const VectorD>& b);

struct ObjectiveCheckResult {
  std::size_t trials = 0;
  // Closed form vs central differences and vs the engine's dlogits, for a
  // single candidate and for regrouped candidate sets.
  double single_vs_fd = 0.0;
  double single_vs_engine = 0.0;
  double multi_vs_fd = 0.0;
  double multi_vs_engine = 0.0;

  double max_error() const;
};

/// Random trials over (alpha, logits, i*, candidates) with V drawn in turn
/// from `vocab_sizes`. Candidates never include i*.
ObjectiveCheckResult check_objective_gradients(std::span<const std::size_t> vocab_sizes, std::size_t trials,
                                               std::uint64_t seed);

struct ModelCheckResult {
  std::size_t sampled = 0;
  double mle_max_rel_err = 0.0;
  double ul_max_rel_err = 0.0;
};

/// Backprop vs fourth-order central differences on `samples` distinct
/// parameters of a float64 model, for the MLE loss and the token-level
/// unlikelihood loss (previous-context candidates, given alpha). The
/// five-point stencil keeps round-off far below the tiny query-weight
/// gradients of a near-uniform attention layer. Errors are per parameter,
/// |a - b| / max(|a|, |b|). The input sequence is long enough to contain
/// every vocabulary id so that no sampled parameter has an identically zero
/// gradient.
ModelCheckResult check_model_gradients(const ModelConfig& config, std::size_t samples, double alpha,
                                       std::uint64_t seed);

}  // namespace ullm
