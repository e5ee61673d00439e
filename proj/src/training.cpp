#include "ullm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <json.hpp>

#include "ullm/language_model.hpp"

namespace ullm {

namespace {

// Distinct streams derived from one user seed.
constexpr std::uint64_t kMixStream = 0x6D69782D7374726DULL;
constexpr std::uint64_t kPrefixStream = 0x7072656669787321ULL;
constexpr std::uint64_t kCandidateStream = 0x63616E6469646174ULL;

// Epoch-wise shuffled pass over a pool; reshuffles when exhausted.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n;
  }

  std::size_t next() {
    if (cursor_ == order_.size()) {
      shuffle(order_, rng_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log_update(const TrainIO& io, std::size_t update, std::string_view kind, double loss, double wall) {
  if (!io.log) return;
  nlohmann::ordered_json j;
  j["update"] = update;
  j["kind"] = kind;
  j["loss"] = loss;
  j["wall_time"] = wall;
  *io.log << j.dump() << '\n';
}

void log_eval(const TrainIO& io, std::size_t update, double ppl, double wall) {
  if (!io.log) return;
  nlohmann::ordered_json j;
  j["update"] = update;
  j["kind"] = "eval";
  j["valid_ppl"] = ppl;
  j["wall_time"] = wall;
  *io.log << j.dump() << '\n';
}

[[noreturn]] void abort_non_finite(const TrainIO& io, std::size_t update, std::string_view kind,
                                   const std::vector<std::vector<TokenId>>& batch) {
  std::string where;
  if (!io.dump_dir.empty()) {
    where = (std::filesystem::path(io.dump_dir) / ("nan_batch_" + std::to_string(update) + ".txt")).string();
    std::ofstream out(where);
    out << "update " << update << " kind " << kind << '\n';
    for (const auto& ids : batch) {
      for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
      out << '\n';
    }
  }
  std::string msg = "non-finite loss at update " + std::to_string(update) + " (" + std::string(kind) +
                    ", " + std::to_string(batch.size()) + " sequences";
  if (!batch.empty() && !batch.front().empty()) {
    msg += ", first starts with id " + std::to_string(batch.front().front());
  }
  msg += ")";
  if (!where.empty()) msg += "; batch dumped to " + where;
  throw Error(ErrorCode::numeric, msg);
}

bool is_eval_point(std::size_t update, const TrainConfig& config) {
  return update % config.eval_every == 0 || update == config.max_updates;
}

std::vector<std::vector<TokenId>> batch_ids(const std::vector<const TokenSequence*>& batch) {
  std::vector<std::vector<TokenId>> out;
  for (const auto* s : batch) out.push_back(s->ids);
  return out;
}

// One token-level update shared by training and fine-tuning, so both take
// exactly the same arithmetic path.
double token_update(Parameters<float>& params, Optimizer& opt, Sampler& sampler, const CorpusSplit& data,
                    const TrainConfig& config, std::size_t update, const TrainIO& io) {
  std::vector<const TokenSequence*> batch;
  batch.reserve(config.batch_size);
  for (std::size_t b = 0; b < config.batch_size; ++b) batch.push_back(&data.train[sampler.next()]);
  BatchGradient g;
  try {
    g = token_batch_gradient(params, batch, config.objective, config.alpha);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::numeric) throw;
    g.loss = std::numeric_limits<double>::quiet_NaN();
  }
  if (!std::isfinite(g.loss)) abort_non_finite(io, update, to_string(config.objective), batch_ids(batch));
  if (config.clip_norm > 0.0) clip_global_norm(g.grads, config.clip_norm);
  opt.step(params, g.grads);
  return g.loss;
}

void check_data(const CorpusSplit& data, const Parameters<float>& params) {
  require(!data.train.empty(), "training split is empty");
  require(!data.valid.empty(), "validation split is empty");
  for (const auto* split : {&data.train, &data.valid}) {
    for (const auto& s : *split) {
      require(s.size() >= 2, "training sequences need at least 2 tokens");
      require(s.size() - 1 <= params.config.max_len,
              "sequence length " + std::to_string(s.size()) + " exceeds model max_len + 1");
    }
  }
}

}  // namespace

Objective parse_objective(std::string_view name) {
  if (name == "mle") return Objective::mle;
  if (name == "ul-token" || name == "ul_token") return Objective::ul_token;
  fail("unknown objective '" + std::string(name) + "' (expected mle or ul-token)");
}

std::string_view to_string(Objective o) { return o == Objective::mle ? "mle" : "ul-token"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd") return OptimizerKind::sgd;
  fail("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)");
}

std::string_view to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd"; }

CandidateMode parse_candidate_mode(std::string_view name) {
  if (name == "repeat-n" || name == "repeat_n") return CandidateMode::repeat_n;
  if (name == "random-seq" || name == "random_seq") return CandidateMode::random_seq;
  fail("unknown candidate mode '" + std::string(name) + "' (expected repeat-n or random-seq)");
}

std::string_view to_string(CandidateMode m) { return m == CandidateMode::repeat_n ? "repeat-n" : "random-seq"; }

void TrainConfig::validate() const {
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(alpha >= 0.0 && std::isfinite(alpha), "alpha must be nonnegative");
  require(max_updates >= 1, "max_updates must be at least 1");
  require(eval_every >= 1 && eval_every <= max_updates, "eval_every must be in [1, max_updates]");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(clip_norm >= 0.0, "clip_norm must be nonnegative");
}

void FinetuneConfig::validate(std::size_t max_len) const {
  token.validate();
  require(mix_prob >= 0.0 && mix_prob <= 1.0, "mix_prob must be in [0, 1]");
  require(prefix_len >= 1 && continuation_len >= 1, "prefix and continuation lengths must be positive");
  require(prefix_len + continuation_len <= max_len,
          "prefix_len + continuation_len (" + std::to_string(prefix_len + continuation_len) +
              ") exceeds max_len " + std::to_string(max_len));
  require(seq_batch_size >= 1, "seq_batch_size must be at least 1");
  if (candidate_mode == CandidateMode::repeat_n) require(ngram >= 1, "ngram must be at least 1");
  else require(p_penalize >= 0.0 && p_penalize <= 1.0, "p_penalize must be in [0, 1]");
}

Optimizer::Optimizer(OptimizerKind kind, double lr, std::size_t n_params) : kind_(kind), lr_(lr) {
  if (kind_ == OptimizerKind::adam) {
    m_.assign(n_params, 0.0f);
    v_.assign(n_params, 0.0f);
  }
}

void Optimizer::step(Parameters<float>& params, const GradientBundle<float>& grads) {
  require(params.size() == grads.size(), "optimizer: gradient size mismatch");
  ++steps_;
  auto& w = params.values;
  const auto& g = grads.values;
  if (kind_ == OptimizerKind::sgd) {
    const auto lr = static_cast<float>(lr_);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    return;
  }
  const auto b1 = static_cast<float>(kAdamBeta1);
  const auto b2 = static_cast<float>(kAdamBeta2);
  const auto eps = static_cast<float>(kAdamEps);
  const double t = static_cast<double>(steps_);
  const auto step_size = static_cast<float>(lr_ / (1.0 - std::pow(kAdamBeta1, t)));
  const auto v_corr = static_cast<float>(1.0 / std::sqrt(1.0 - std::pow(kAdamBeta2, t)));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0f - b1) * g[i];
    v_[i] = b2 * v_[i] + (1.0f - b2) * g[i] * g[i];
    w[i] -= step_size * m_[i] / (std::sqrt(v_[i]) * v_corr + eps);
  }
}

double clip_global_norm(GradientBundle<float>& grads, double max_norm) {
  double sq = 0.0;
  for (float g : grads.values) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (float& g : grads.values) g *= scale;
  }
  return norm;
}

BatchGradient token_batch_gradient(const Parameters<float>& params,
                                   const std::vector<const TokenSequence*>& batch,
                                   Objective objective, double alpha) {
  require(!batch.empty(), "empty batch");
  BatchGradient out{0.0, 0, GradientBundle<float>(params.config)};
  for (const auto* s : batch) out.n_tokens += s->size() - 1;
  const double scale = 1.0 / static_cast<double>(out.n_tokens);
  for (const auto* s : batch) {
    const std::span<const TokenId> ids(s->ids);
    const auto inputs = ids.first(ids.size() - 1);
    const auto targets = ids.subspan(1);
    const auto fr = forward(params, inputs);
    const MatrixD logits = fr.logits.cast<double>();
    const LossAndGrad lg = objective == Objective::mle
                               ? mle_loss(logits, targets)
                               : token_unlikelihood_objective(logits, targets, prev_context_candidate_set(ids), alpha);
    out.loss += lg.loss.total;
    const Matrix<float> dlogits = (lg.dlogits * scale).cast<float>();
    backward_accumulate(params, fr.cache, dlogits, out.grads);
  }
  out.loss *= scale;
  return out;
}

BatchGradient sequence_batch_gradient(const Parameters<float>& params,
                                      const std::vector<std::vector<TokenId>>& prefixes,
                                      const FinetuneConfig& config, Rng& candidate_rng,
                                      FinetuneCounters& counters) {
  require(!prefixes.empty(), "empty prefix batch");
  const std::size_t k = config.prefix_len;
  const std::size_t n = config.continuation_len;
  BatchGradient out{0.0, prefixes.size() * n, GradientBundle<float>(params.config)};
  const double scale = 1.0 / static_cast<double>(out.n_tokens);
  const TransformerLM<float> model(params);
  std::size_t flagged = 0;
  for (const auto& prefix : prefixes) {
    require(prefix.size() == k, "prefix length does not match prefix_len");
    counters.prefix_tokens_read += k;
    const DecodeResult decoded = greedy_decode(model, prefix, n);
    counters.decoded_tokens += n;
    std::vector<TokenId> completion = prefix;
    completion.insert(completion.end(), decoded.continuation.begin(), decoded.continuation.end());
    const CandidateSet cands = config.candidate_mode == CandidateMode::repeat_n
                                   ? repeat_ngram_candidates(completion, config.ngram, k)
                                   : random_seq_candidates(completion, k, config.p_penalize, candidate_rng);
    const std::size_t f = cands.flagged_steps();
    if (f == 0) continue;
    flagged += f;
    const std::span<const TokenId> inputs(completion.data(), completion.size() - 1);
    const auto fr = forward(params, inputs);
    const LossAndGrad lg = sequence_level_loss(fr.logits.cast<double>(), cands);
    out.loss += lg.loss.total;
    const Matrix<float> dlogits = (lg.dlogits * scale).cast<float>();
    backward_accumulate(params, fr.cache, dlogits, out.grads);
  }
  counters.flagged_tokens += flagged;
  if (flagged == 0) ++counters.blocked_sequence_batches;
  out.loss *= scale;
  return out;
}

double validation_perplexity(const Parameters<float>& params, const std::vector<TokenSequence>& sequences) {
  const TransformerLM<float> model(params);
  return perplexity(model, sequences);
}

TrainResult train_token_level(const TrainConfig& config, const Parameters<float>& initial,
                              const CorpusSplit& data, const TrainIO& io) {
  config.validate();
  check_data(data, initial);
  Parameters<float> params = initial;
  Optimizer opt(config.optimizer, config.lr, params.size());
  Sampler sampler(data.train.size(), config.seed);
  TrainResult result;
  const Clock clock;
  for (std::size_t u = 1; u <= config.max_updates; ++u) {
    const double loss = token_update(params, opt, sampler, data, config, u, io);
    log_update(io, u, to_string(config.objective), loss, clock.seconds());
    if (is_eval_point(u, config)) {
      const double ppl = validation_perplexity(params, data.valid);
      log_eval(io, u, ppl, clock.seconds());
      result.series.push_back({{u, ppl, std::string(to_string(config.objective)), config.config_hash}, params});
    }
  }
  return result;
}

std::size_t best_checkpoint_index(const std::vector<CheckpointMeta>& series) {
  require(!series.empty(), "no checkpoints to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i].valid_ppl < series[best].valid_ppl) best = i;
  }
  return best;
}

const Parameters<float>& select_best_checkpoint(const std::vector<Checkpoint>& series) {
  std::vector<CheckpointMeta> metas;
  metas.reserve(series.size());
  for (const auto& c : series) metas.push_back(c.meta);
  return series[best_checkpoint_index(metas)].params;
}

TrainResult finetune_sequence_level(const FinetuneConfig& config, const Parameters<float>& base,
                                    const CorpusSplit& data, const TrainIO& io) {
  config.validate(base.config.max_len);
  check_data(data, base);
  const TrainConfig& tc = config.token;
  Parameters<float> params = base;
  Optimizer opt(tc.optimizer, tc.lr, params.size());
  Sampler token_sampler(data.train.size(), tc.seed);

  std::vector<std::vector<TokenId>> prefixes;
  for (const auto& p : make_prefix_batches(data.train, config.prefix_len)) prefixes.push_back(p.ids);
  Sampler prefix_sampler(prefixes.size(), tc.seed ^ kPrefixStream);
  Rng mix_rng(tc.seed ^ kMixStream);
  Rng candidate_rng(tc.seed ^ kCandidateStream);

  const std::string tag = "finetune-" + std::string(to_string(tc.objective));
  TrainResult result;
  const Clock clock;
  for (std::size_t u = 1; u <= tc.max_updates; ++u) {
    if (mix_rng.bernoulli(config.mix_prob)) {
      std::vector<std::vector<TokenId>> batch;
      batch.reserve(config.seq_batch_size);
      for (std::size_t b = 0; b < config.seq_batch_size; ++b) batch.push_back(prefixes[prefix_sampler.next()]);
      BatchGradient g;
      try {
        g = sequence_batch_gradient(params, batch, config, candidate_rng, result.counters);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::numeric) throw;
        g.loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(g.loss)) abort_non_finite(io, u, "ul-seq", batch);
      if (tc.clip_norm > 0.0) clip_global_norm(g.grads, tc.clip_norm);
      opt.step(params, g.grads);
      ++result.counters.sequence_updates;
      log_update(io, u, "ul-seq", g.loss, clock.seconds());
    } else {
      const double loss = token_update(params, opt, token_sampler, data, tc, u, io);
      ++result.counters.token_updates;
      log_update(io, u, to_string(tc.objective), loss, clock.seconds());
    }
    if (is_eval_point(u, tc)) {
      const double ppl = validation_perplexity(params, data.valid);
      log_eval(io, u, ppl, clock.seconds());
      result.series.push_back({{u, ppl, tag, tc.config_hash}, params});
    }
  }
  return result;
}

std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> completion_pairs(
    const std::vector<TokenSequence>& sequences, std::size_t k, std::size_t n, std::size_t max_pairs) {
  require(k >= 1 && n >= 1, "prefix and continuation lengths must be positive");
  std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>> out;
  for (const auto& s : sequences) {
    for (std::size_t start = 0; start + k + n <= s.size(); start += k) {
      if (max_pairs && out.size() == max_pairs) return out;
      const auto b = s.ids.begin() + static_cast<std::ptrdiff_t>(start);
      out.emplace_back(std::vector<TokenId>(b, b + static_cast<std::ptrdiff_t>(k)),
                       std::vector<TokenId>(b + static_cast<std::ptrdiff_t>(k),
                                            b + static_cast<std::ptrdiff_t>(k + n)));
    }
  }
  require(!out.empty(), "no sequence is long enough for a prefix of " + std::to_string(k) + " plus " +
                            std::to_string(n) + " continuation tokens");
  return out;
}

SuiteResult evaluate_completion_suite(const LanguageModel& model, const std::vector<TokenSequence>& sequences,
                                      const CompletionSuite& suite,
                                      const std::vector<DecodingConfig>& decodings) {
  const auto pairs = completion_pairs(sequences, suite.prefix_len, suite.continuation_len, suite.max_prefixes);
  const TeacherForcedPass pass = teacher_forced_pass(model, sequences);
  const double ppl = perplexity(pass.nll);
  const double acc = next_token_accuracy(sequences, pass.predictions);
  const std::size_t next_uniq = uniq(pass.predictions);

  SuiteResult result;
  std::vector<std::vector<TokenId>> truth;
  for (const auto& [prefix, cont] : pairs) truth.push_back(cont);
  result.human.model = "human";
  result.human.search = "-";
  for (std::size_t n : suite.seq_rep_n) result.human.seq_rep[n] = mean_seq_rep_n(truth, n);
  for (std::size_t l : suite.rep_windows) result.human.rep[l] = human_rep_l(sequences, l);
  result.human.uniq_seq = uniq_seq(truth);
  std::vector<std::vector<TokenId>> next_truth;
  for (const auto& s : sequences) next_truth.emplace_back(s.ids.begin() + 1, s.ids.end());
  result.human.uniq = uniq(next_truth);
  result.human.token_histogram = token_histogram(truth);

  for (const auto& dc : decodings) {
    dc.validate();
    require(dc.max_new_tokens == suite.continuation_len,
            "decoding max_new_tokens must equal the suite continuation length");
    Rng rng(dc.seed);
    const std::string tag = dc.tag();
    std::vector<std::vector<TokenId>> conts;
    std::vector<CompletionRecord> records;
    for (const auto& [prefix, cont] : pairs) {
      DecodeResult r = decode(model, prefix, dc, rng);
      records.push_back({tag, r.score, prefix, r.continuation});
      conts.push_back(std::move(r.continuation));
    }
    MetricsReport rep;
    rep.model = suite.model_name;
    rep.search = tag;
    for (std::size_t n : suite.seq_rep_n) rep.seq_rep[n] = mean_seq_rep_n(conts, n);
    rep.uniq_seq = uniq_seq(conts);
    rep.ppl = ppl;
    rep.acc = acc;
    for (std::size_t l : suite.rep_windows) {
      rep.rep[l] = rep_l(sequences, pass.predictions, l);
      rep.wrep[l] = wrep_l(sequences, pass.predictions, l);
    }
    rep.uniq = next_uniq;
    rep.token_histogram = token_histogram(conts);
    result.reports.push_back(std::move(rep));
    result.completions.push_back(std::move(records));
  }
  return result;
}

}  // namespace ullm
