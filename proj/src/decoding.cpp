#include "ullm/decoding.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ullm/model.hpp"

namespace ullm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_room(const LanguageModel& model, std::span<const TokenId> prefix, std::size_t n) {
  require(!prefix.empty(), "decoding requires a nonempty prefix");
  require(prefix.size() + n <= model.max_len(),
          "prefix (" + std::to_string(prefix.size()) + ") + " + std::to_string(n) +
              " new tokens exceeds max_len " + std::to_string(model.max_len()));
}

// Ids sorted by descending probability, ties by ascending id.
std::vector<std::size_t> by_probability(const Eigen::Ref<const VectorD>& probs) {
  std::vector<std::size_t> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return probs(static_cast<Eigen::Index>(a)) > probs(static_cast<Eigen::Index>(b));
  });
  return order;
}

VectorD restrict_to(const Eigen::Ref<const VectorD>& probs, std::span<const std::size_t> keep) {
  std::size_t support = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) support += probs(i) > 0.0 ? 1 : 0;
  std::size_t kept_support = 0;
  for (std::size_t i : keep) kept_support += probs(static_cast<Eigen::Index>(i)) > 0.0 ? 1 : 0;
  if (kept_support == support) return probs;
  VectorD q = VectorD::Zero(probs.size());
  double z = 0.0;
  for (std::size_t i : keep) z += probs(static_cast<Eigen::Index>(i));
  for (std::size_t i : keep) q(static_cast<Eigen::Index>(i)) = probs(static_cast<Eigen::Index>(i)) / z;
  return q;
}

// Tokens that would complete an n-gram already present in `seq`.
std::vector<TokenId> blocked_tokens(const std::vector<TokenId>& seq, std::size_t n) {
  std::vector<TokenId> out;
  if (n == 0 || seq.size() + 1 < n) return out;
  const std::size_t ctx = n - 1;
  const auto tail = seq.end() - static_cast<std::ptrdiff_t>(ctx);
  for (std::size_t s = 0; s + n <= seq.size(); ++s) {
    const auto start = seq.begin() + static_cast<std::ptrdiff_t>(s);
    if (std::equal(start, start + static_cast<std::ptrdiff_t>(ctx), tail)) out.push_back(seq[s + ctx]);
  }
  return out;
}

struct Beam {
  std::unique_ptr<DecodeState> state;
  std::vector<TokenId> full;  // prefix + continuation
  double score = 0.0;
};

struct Expansion {
  double score;
  std::size_t beam;
  TokenId token;
};

}  // namespace

Strategy parse_strategy(std::string_view name) {
  if (name == "greedy") return Strategy::greedy;
  if (name == "beam") return Strategy::beam;
  if (name == "topk" || name == "top-k") return Strategy::topk;
  if (name == "nucleus" || name == "top-p") return Strategy::nucleus;
  fail("unknown decoding strategy '" + std::string(name) + "'");
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::beam: return "beam";
    case Strategy::topk: return "topk";
    case Strategy::nucleus: return "nucleus";
  }
  return "?";
}

void DecodingConfig::validate() const {
  require(max_new_tokens >= 1, "max_new_tokens must be at least 1");
  switch (strategy) {
    case Strategy::beam:
      require(beam_size >= 1, "beam_size must be at least 1");
      if (block_ngram) require(*block_ngram >= 1, "block_ngram must be at least 1");
      break;
    case Strategy::topk: require(top_k >= 1, "top-k requires k >= 1"); break;
    case Strategy::nucleus: require(top_p > 0.0 && top_p <= 1.0, "nucleus requires p in (0, 1]"); break;
    case Strategy::greedy: break;
  }
}

std::string DecodingConfig::tag() const {
  std::ostringstream ss;
  switch (strategy) {
    case Strategy::greedy: ss << "greedy"; break;
    case Strategy::beam:
      ss << "beam-" << beam_size;
      if (block_ngram) ss << "-block-" << *block_ngram;
      break;
    case Strategy::topk: ss << "top-k-" << top_k; break;
    case Strategy::nucleus: ss << "top-p-" << top_p; break;
  }
  return ss.str();
}

DecodeResult greedy_decode(const LanguageModel& model, std::span<const TokenId> prefix, std::size_t n) {
  check_room(model, prefix, n);
  auto state = model.start(prefix);
  DecodeResult out;
  out.continuation.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const VectorD lp = log_softmax(state->next_logits());
    const auto next = static_cast<TokenId>(argmax(lp));
    out.score += lp(next);
    out.continuation.push_back(next);
    if (i + 1 < n) state->append(next);
  }
  return out;
}

DecodeResult beam_search_decode(const LanguageModel& model, std::span<const TokenId> prefix,
                                std::size_t n, std::size_t beam_size,
                                std::optional<std::size_t> block_ngram) {
  require(beam_size >= 1, "beam_size must be at least 1");
  check_room(model, prefix, n);
  const std::size_t V = model.vocab_size();
  std::vector<Beam> beams;
  beams.push_back({model.start(prefix), {prefix.begin(), prefix.end()}, 0.0});
  DecodeResult out;

  for (std::size_t step = 0; step < n; ++step) {
    std::vector<Expansion> candidates;
    std::vector<Expansion> unblocked;
    candidates.reserve(beams.size() * V);
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const VectorD lp = log_softmax(beams[b].state->next_logits());
      std::vector<bool> banned(V, false);
      if (block_ngram) {
        for (TokenId t : blocked_tokens(beams[b].full, *block_ngram)) banned[t] = true;
      }
      for (std::size_t v = 0; v < V; ++v) {
        const double s = beams[b].score + lp(static_cast<Eigen::Index>(v));
        unblocked.push_back({s, b, static_cast<TokenId>(v)});
        if (!banned[v]) candidates.push_back({s, b, static_cast<TokenId>(v)});
      }
    }
    // Only -inf scores would remain: every expansion is blocked.
    const bool all_blocked = std::none_of(candidates.begin(), candidates.end(),
                                          [](const Expansion& e) { return e.score > kNegInf; });
    if (all_blocked) {
      ++out.blocked_fallbacks;
      candidates = std::move(unblocked);
    }
    const std::size_t keep = std::min(beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), [](const Expansion& a, const Expansion& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& e = candidates[i];
      Beam nb{nullptr, beams[e.beam].full, e.score};
      nb.full.push_back(e.token);
      if (step + 1 < n) {
        nb.state = beams[e.beam].state->clone();
        nb.state->append(e.token);
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }
  // Beams are kept sorted by score; the first one is the best.
  const Beam& best = beams.front();
  out.continuation.assign(best.full.begin() + static_cast<std::ptrdiff_t>(prefix.size()), best.full.end());
  out.score = best.score;
  return out;
}

VectorD truncated_distribution(const Eigen::Ref<const VectorD>& probs, TopK mode) {
  require(mode.k >= 1, "top-k requires k >= 1");
  const auto order = by_probability(probs);
  const std::size_t k = std::min(mode.k, order.size());
  return restrict_to(probs, std::span(order).first(k));
}

VectorD truncated_distribution(const Eigen::Ref<const VectorD>& probs, Nucleus mode) {
  require(mode.p > 0.0 && mode.p <= 1.0, "nucleus requires p in (0, 1]");
  const auto order = by_probability(probs);
  double mass = 0.0;
  std::size_t size = 0;
  while (size < order.size()) {
    mass += probs(static_cast<Eigen::Index>(order[size]));
    ++size;
    if (mass >= mode.p) break;
  }
  return restrict_to(probs, std::span(order).first(size));
}

TokenId sample_from(const Eigen::Ref<const VectorD>& q, Rng& rng) {
  const double u = rng.uniform() * q.sum();
  double acc = 0.0;
  TokenId last_nonzero = 0;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (q(i) <= 0.0) continue;
    acc += q(i);
    last_nonzero = static_cast<TokenId>(i);
    if (u < acc) return last_nonzero;
  }
  return last_nonzero;
}

DecodeResult stochastic_decode(const LanguageModel& model, std::span<const TokenId> prefix,
                               std::size_t n, const DecodingConfig& config, Rng& rng) {
  require(config.strategy == Strategy::topk || config.strategy == Strategy::nucleus,
          "stochastic_decode requires a top-k or nucleus config");
  check_room(model, prefix, n);
  auto state = model.start(prefix);
  DecodeResult out;
  for (std::size_t i = 0; i < n; ++i) {
    const VectorD lp = log_softmax(state->next_logits());
    const VectorD p = lp.array().exp();
    const VectorD q = config.strategy == Strategy::topk ? truncated_distribution(p, TopK{config.top_k})
                                                        : truncated_distribution(p, Nucleus{config.top_p});
    const TokenId next = sample_from(q, rng);
    out.score += lp(next);
    out.continuation.push_back(next);
    if (i + 1 < n) state->append(next);
  }
  return out;
}

DecodeResult decode(const LanguageModel& model, std::span<const TokenId> prefix,
                    const DecodingConfig& config, Rng& rng) {
  config.validate();
  switch (config.strategy) {
    case Strategy::greedy: return greedy_decode(model, prefix, config.max_new_tokens);
    case Strategy::beam:
      return beam_search_decode(model, prefix, config.max_new_tokens, config.beam_size, config.block_ngram);
    case Strategy::topk:
    case Strategy::nucleus: return stochastic_decode(model, prefix, config.max_new_tokens, config, rng);
  }
  fail("unreachable decoding strategy");
}

namespace {

void write_ids(std::ostream& out, const std::vector<TokenId>& ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out << ' ';
    out << ids[i];
  }
}

std::vector<TokenId> parse_ids(const std::string& field) {
  std::vector<TokenId> ids;
  std::istringstream ss(field);
  std::string tok;
  while (ss >> tok) {
    TokenId v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || ptr != tok.data() + tok.size()) {
      throw Error(ErrorCode::format, "bad token id '" + tok + "' in completions file");
    }
    ids.push_back(v);
  }
  return ids;
}

}  // namespace

void write_completion(std::ostream& out, const CompletionRecord& record) {
  out << record.strategy << '\t' << std::setprecision(17) << record.score << '\t';
  write_ids(out, record.prefix);
  out << '\t';
  write_ids(out, record.continuation);
  out << '\n';
}

std::vector<CompletionRecord> read_completions(std::istream& in) {
  std::vector<CompletionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1) {
      fields.push_back(line.substr(start, pos - start));
    }
    fields.push_back(line.substr(start));
    if (fields.size() != 4) {
      throw Error(ErrorCode::format, "completions line " + std::to_string(line_no) + ": expected 4 fields");
    }
    CompletionRecord r;
    r.strategy = fields[0];
    try {
      r.score = std::stod(fields[1]);
    } catch (const std::exception&) {
      throw Error(ErrorCode::format, "completions line " + std::to_string(line_no) + ": bad score");
    }
    r.prefix = parse_ids(fields[2]);
    r.continuation = parse_ids(fields[3]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ullm
