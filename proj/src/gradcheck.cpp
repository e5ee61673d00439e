#include "ullm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ullm/objectives.hpp"

namespace ullm {

namespace {

constexpr double kLogitStep = 1e-6;
constexpr double kParamStep = 1e-3;

template <typename F>
VectorD central_difference(const VectorD& x, F&& f, double h) {
  VectorD g(x.size());
  VectorD probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double up = f(probe);
    probe(i) = x(i) - h;
    const double down = f(probe);
    probe(i) = x(i);
    g(i) = (up - down) / (2.0 * h);
  }
  return g;
}

TokenId draw_other(Rng& rng, std::size_t vocab, TokenId avoid) {
  for (;;) {
    const auto id = static_cast<TokenId>(rng.below(vocab));
    if (id != avoid) return id;
  }
}

double model_loss(const Parameters<double>& params, std::span<const TokenId> ids, bool unlikelihood,
                  double alpha, MatrixD* dlogits) {
  const auto inputs = ids.first(ids.size() - 1);
  const auto targets = ids.subspan(1);
  const MatrixD logits = forward(params, inputs).logits;
  const LossAndGrad lg = unlikelihood ? token_unlikelihood_objective(logits, targets, prev_context_candidate_set(ids), alpha)
                                      : mle_loss(logits, targets);
  if (dlogits) *dlogits = lg.dlogits;
  return lg.loss.total;
}

}  // namespace

double normwise_relative_error(const Eigen::Ref<const VectorD>& a, const Eigen::Ref<const VectorD>& b) {
  require(a.size() == b.size(), "normwise_relative_error: size mismatch");
  const double scale = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  if (scale == 0.0) return 0.0;
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

double ObjectiveCheckResult::max_error() const {
  return std::max({single_vs_fd, single_vs_engine, multi_vs_fd, multi_vs_engine});
}

ObjectiveCheckResult check_objective_gradients(std::span<const std::size_t> vocab_sizes, std::size_t trials,
                                               std::uint64_t seed) {
  require(!vocab_sizes.empty(), "gradcheck needs at least one vocabulary size");
  for (std::size_t v : vocab_sizes) require(v >= 3, "gradcheck vocabulary sizes must be at least 3");
  Rng rng(seed);
  ObjectiveCheckResult out;
  out.trials = trials;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t V = vocab_sizes[trial % vocab_sizes.size()];
    const double alpha = 2.0 * rng.uniform();
    const double spread = 0.5 + 2.0 * rng.uniform();
    VectorD logits(static_cast<Eigen::Index>(V));
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = spread * rng.normal();
    const VectorD p = softmax(logits);
    const auto truth = static_cast<TokenId>(rng.below(V));
    const TokenId neg = draw_other(rng, V, truth);

    // Single candidate: the closed form is the gradient of the objective,
    // the engine's dlogits are the gradient of the loss (its negation).
    const VectorD closed = closed_form_gradient(alpha, truth, neg, p);
    const VectorD fd = central_difference(
        logits, [&](const VectorD& z) { return single_candidate_objective(z, truth, neg, alpha); }, kLogitStep);
    const std::vector<TokenId> targets{truth};
    CandidateSet single;
    single.per_step = {{neg}};
    const MatrixD row = logits.transpose();
    const VectorD engine = -token_unlikelihood_objective(row, targets, single, alpha).dlogits.row(0).transpose();
    out.single_vs_fd = std::max(out.single_vs_fd, normwise_relative_error(closed, fd));
    out.single_vs_engine = std::max(out.single_vs_engine, normwise_relative_error(closed, engine));

    // Several candidates, regrouped with alpha_c = alpha |C|.
    const std::size_t max_c = std::min<std::size_t>(V - 1, 6);
    const std::size_t n_c = 2 + static_cast<std::size_t>(rng.below(max_c - 1));
    std::set<TokenId> chosen;
    while (chosen.size() < n_c) chosen.insert(draw_other(rng, V, truth));
    const std::vector<TokenId> cands(chosen.begin(), chosen.end());
    const VectorD closed_multi = closed_form_gradient(GradRowSpec{alpha, truth, cands, V}, p);
    const VectorD fd_multi = central_difference(
        logits, [&](const VectorD& z) { return regrouped_objective(z, truth, cands, alpha); }, kLogitStep);
    CandidateSet multi;
    multi.per_step = {cands};
    const VectorD engine_multi = -token_unlikelihood_objective(row, targets, multi, alpha).dlogits.row(0).transpose();
    out.multi_vs_fd = std::max(out.multi_vs_fd, normwise_relative_error(closed_multi, fd_multi));
    out.multi_vs_engine = std::max(out.multi_vs_engine, normwise_relative_error(closed_multi, engine_multi));
  }
  return out;
}

ModelCheckResult check_model_gradients(const ModelConfig& config, std::size_t samples, double alpha,
                                       std::uint64_t seed) {
  config.validate();
  require(config.max_len >= config.vocab_size, "gradcheck needs max_len >= vocab_size");
  Parameters<double> params = init_parameters<double>(config);
  Rng rng(seed);
  // Perturb the initial values so norm gains and biases are not at their
  // special initial values.
  for (double& w : params.values) w += 0.05 * rng.normal();

  std::vector<TokenId> ids(config.max_len + 1);
  for (auto& id : ids) id = static_cast<TokenId>(rng.below(config.vocab_size));
  std::vector<std::size_t> slots(config.max_len);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  shuffle(slots, rng);
  for (std::size_t v = 0; v < config.vocab_size; ++v) ids[slots[v]] = static_cast<TokenId>(v);

  require(samples <= params.size(), "gradcheck: more samples than parameters");
  std::set<std::size_t> picked;
  while (picked.size() < samples) picked.insert(static_cast<std::size_t>(rng.below(params.size())));

  ModelCheckResult out;
  out.sampled = samples;
  for (const bool ul : {false, true}) {
    MatrixD dlogits;
    model_loss(params, ids, ul, alpha, &dlogits);
    const auto inputs = std::span<const TokenId>(ids).first(ids.size() - 1);
    const auto fr = forward(params, inputs);
    const GradientBundle<double> grads = backward(params, fr.cache, dlogits);
    double worst = 0.0;
    for (std::size_t idx : picked) {
      const double saved = params.values[idx];
      auto at = [&](double offset) {
        params.values[idx] = saved + offset;
        return model_loss(params, ids, ul, alpha, nullptr);
      };
      const double h = kParamStep;
      const double fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      params.values[idx] = saved;
      const double an = grads.values[idx];
      const double scale = std::max(std::abs(fd), std::abs(an));
      if (scale > 0.0) worst = std::max(worst, std::abs(fd - an) / scale);
    }
    (ul ? out.ul_max_rel_err : out.mle_max_rel_err) = worst;
  }
  return out;
}

}  // namespace ullm
