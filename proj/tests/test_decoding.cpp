#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "table_lm.hpp"
#include "ullm/decoding.hpp"
#include "ullm/model.hpp"

using namespace ullm;
using ullm::testing::BigramTable;
using ullm::testing::HistoryTable;

namespace {

BigramTable three_state() {
  return BigramTable({{0.1, 0.6, 0.3}, {0.5, 0.2, 0.3}, {0.3, 0.3, 0.4}});
}

BigramTable four_token() {
  return BigramTable({{0.05, 0.40, 0.35, 0.20},
                      {0.45, 0.05, 0.25, 0.25},
                      {0.30, 0.30, 0.10, 0.30},
                      {0.26, 0.24, 0.40, 0.10}});
}

double sequence_log_prob(const LanguageModel& model, const std::vector<TokenId>& prefix,
                         const std::vector<TokenId>& cont) {
  std::vector<TokenId> full = prefix;
  full.insert(full.end(), cont.begin(), cont.end());
  const MatrixD z = model.logits(std::span<const TokenId>(full.data(), full.size() - 1));
  double total = 0;
  for (std::size_t i = 0; i < cont.size(); ++i) {
    const std::size_t row = prefix.size() - 1 + i;
    total += log_softmax(z.row(static_cast<Eigen::Index>(row)).transpose())(cont[i]);
  }
  return total;
}

// Textbook beam search over a bigram table, written without the library.
std::vector<TokenId> reference_beam(const BigramTable& m, TokenId last, std::size_t n, std::size_t width) {
  struct Hyp {
    std::vector<TokenId> ids;
    double score;
  };
  std::vector<Hyp> beams = {{{}, 0.0}};
  const std::size_t V = m.vocab_size();
  for (std::size_t step = 0; step < n; ++step) {
    struct Cand {
      double score;
      std::size_t beam;
      TokenId tok;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const TokenId from = beams[b].ids.empty() ? last : beams[b].ids.back();
      for (TokenId v = 0; v < V; ++v) cands.push_back({beams[b].score + std::log(m.prob(from, v)), b, v});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.tok < b.tok;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < std::min(width, cands.size()); ++i) {
      Hyp h = beams[cands[i].beam];
      h.ids.push_back(cands[i].tok);
      h.score = cands[i].score;
      next.push_back(h);
    }
    beams = next;
  }
  return beams.front().ids;
}

std::vector<TokenId> random_prefix(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<TokenId> p(len);
  for (auto& v : p) v = static_cast<TokenId>(rng.below(vocab));
  return p;
}

}  // namespace

TEST_CASE("greedy follows the argmax chain of a bigram table") {
  const BigramTable m = three_state();
  const std::vector<TokenId> prefix = {0};
  const DecodeResult r = greedy_decode(m, prefix, 6);
  // 0 -> 1 -> 0 -> 1 ...
  CHECK(r.continuation == std::vector<TokenId>{1, 0, 1, 0, 1, 0});
  CHECK(r.score == doctest::Approx(3 * std::log(0.6) + 3 * std::log(0.5)));
  CHECK(greedy_decode(m, prefix, 6).continuation == r.continuation);

  // Enumerate the chain directly from the table.
  TokenId cur = 2;
  std::vector<TokenId> chain;
  for (int i = 0; i < 5; ++i) {
    TokenId best = 0;
    for (TokenId v = 1; v < 3; ++v) {
      if (m.prob(cur, v) > m.prob(cur, best)) best = v;
    }
    chain.push_back(best);
    cur = best;
  }
  const std::vector<TokenId> p2 = {2};
  CHECK(greedy_decode(m, p2, 5).continuation == chain);
}

TEST_CASE("greedy breaks ties toward the lowest id and checks length") {
  const BigramTable tie({{0.2, 0.4, 0.4}, {0.4, 0.2, 0.4}, {0.5, 0.25, 0.25}}, 5);
  const std::vector<TokenId> prefix = {0};
  CHECK(greedy_decode(tie, prefix, 1).continuation == std::vector<TokenId>{1});
  CHECK_THROWS(greedy_decode(tie, prefix, 5));
  CHECK_THROWS(greedy_decode(tie, std::vector<TokenId>{}, 2));
}

TEST_CASE("beam search agrees with a reference implementation and exhaustive search") {
  const BigramTable m = four_token();
  for (TokenId start = 0; start < 4; ++start) {
    const std::vector<TokenId> prefix = {start};
    for (std::size_t width : {1u, 2u, 3u}) {
      const DecodeResult r = beam_search_decode(m, prefix, 3, width);
      CHECK(r.continuation == reference_beam(m, start, 3, width));
    }
    // Wide enough to keep every hypothesis: exact argmax over all 4^3 continuations.
    double best = -1e300;
    for (TokenId a = 0; a < 4; ++a) {
      for (TokenId b = 0; b < 4; ++b) {
        for (TokenId c = 0; c < 4; ++c) {
          const double s = std::log(m.prob(start, a)) + std::log(m.prob(a, b)) + std::log(m.prob(b, c));
          best = std::max(best, s);
        }
      }
    }
    const DecodeResult wide = beam_search_decode(m, prefix, 3, 64);
    const auto& w = wide.continuation;
    CHECK(std::log(m.prob(start, w[0])) + std::log(m.prob(w[0], w[1])) + std::log(m.prob(w[1], w[2])) ==
          doctest::Approx(best));
    CHECK(wide.score == doctest::Approx(best));
    // A width-2 beam can only do as well as exhaustive search.
    CHECK(beam_search_decode(m, prefix, 3, 2).score <= best + 1e-12);
  }
}

TEST_CASE("beam size one equals greedy on random prefixes") {
  const HistoryTable m(12, 3);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto prefix = random_prefix(rng, 1 + rng.below(6), 12);
    CHECK(beam_search_decode(m, prefix, 8, 1).continuation == greedy_decode(m, prefix, 8).continuation);
  }
}

TEST_CASE("beam scores are the summed log-probabilities of the returned completion") {
  const HistoryTable m(10, 4);
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    const auto prefix = random_prefix(rng, 3, 10);
    for (std::optional<std::size_t> block : {std::optional<std::size_t>{}, std::optional<std::size_t>{2}}) {
      const DecodeResult r = beam_search_decode(m, prefix, 10, 4, block);
      CHECK(std::abs(r.score - sequence_log_prob(m, prefix, r.continuation)) < 1e-5);
    }
  }
}

TEST_CASE("n-gram blocking") {
  const HistoryTable m(30, 5);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto prefix = random_prefix(rng, 4, 30);
    SUBCASE("unigram blocking never repeats a token") {
      const DecodeResult r = beam_search_decode(m, prefix, 12, 3, 1);
      std::set<TokenId> seen(prefix.begin(), prefix.end());
      for (TokenId t : r.continuation) CHECK(seen.insert(t).second);
      CHECK(r.blocked_fallbacks == 0);
    }
    SUBCASE("no duplicate n-gram ends inside the continuation") {
      for (std::size_t n : {2u, 3u, 4u}) {
        const DecodeResult r = beam_search_decode(m, prefix, 20, 4, n);
        CHECK(r.blocked_fallbacks == 0);
        std::vector<TokenId> full = prefix;
        full.insert(full.end(), r.continuation.begin(), r.continuation.end());
        for (std::size_t s = 0; s + n <= full.size(); ++s) {
          if (s + n <= prefix.size()) continue;
          for (std::size_t e = 0; e < s; ++e) {
            CHECK_FALSE(std::equal(full.begin() + s, full.begin() + s + n, full.begin() + e));
          }
        }
      }
    }
  }
}

TEST_CASE("blocking falls back when every expansion is blocked") {
  const BigramTable m({{0.5, 0.5}, {0.5, 0.5}});
  const std::vector<TokenId> prefix = {0, 1};
  const DecodeResult r = beam_search_decode(m, prefix, 3, 2, 1);
  CHECK(r.continuation.size() == 3);
  CHECK(r.blocked_fallbacks > 0);
}

TEST_CASE("truncated distributions") {
  VectorD p(3);
  p << 0.5, 0.3, 0.2;
  const VectorD q = truncated_distribution(p, Nucleus{0.7});
  CHECK(q(0) == doctest::Approx(0.625));
  CHECK(q(1) == doctest::Approx(0.375));
  CHECK(q(2) == 0.0);
  CHECK(truncated_distribution(p, Nucleus{1.0}) == p);
  CHECK(truncated_distribution(p, Nucleus{0.5})(0) == 1.0);

  const VectorD one = truncated_distribution(p, TopK{1});
  CHECK(one(0) == 1.0);
  CHECK(one(1) == 0.0);
  CHECK(truncated_distribution(p, TopK{7}) == p);
  const VectorD two = truncated_distribution(p, TopK{2});
  CHECK(two(1) == doctest::Approx(0.375));

  VectorD ties(4);
  ties << 0.25, 0.25, 0.25, 0.25;
  const VectorD tq = truncated_distribution(ties, TopK{2});
  CHECK(tq(0) == 0.5);
  CHECK(tq(1) == 0.5);
  CHECK(tq(3) == 0.0);

  // Minimality: dropping the last member of U leaves mass below p.
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    VectorD z(10);
    for (Eigen::Index j = 0; j < 10; ++j) z(j) = 2.0 * rng.normal();
    const VectorD probs = softmax(z);
    const double thr = 0.05 + 0.9 * rng.uniform();
    const VectorD nq = truncated_distribution(probs, Nucleus{thr});
    double mass = 0, smallest = 1;
    for (Eigen::Index j = 0; j < 10; ++j) {
      if (nq(j) > 0) {
        mass += probs(j);
        smallest = std::min(smallest, probs(j));
      }
    }
    CHECK(mass >= thr - 1e-12);
    CHECK(mass - smallest < thr);
    CHECK(nq.sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("sampling") {
  const HistoryTable m(9, 6);
  Rng rng(5);
  const auto prefix = random_prefix(rng, 3, 9);

  DecodingConfig k1;
  k1.strategy = Strategy::topk;
  k1.top_k = 1;
  k1.max_new_tokens = 10;
  Rng r1(7);
  CHECK(decode(m, prefix, k1, r1).continuation == greedy_decode(m, prefix, 10).continuation);

  DecodingConfig nuc;
  nuc.strategy = Strategy::nucleus;
  nuc.top_p = 0.9;
  nuc.max_new_tokens = 10;
  Rng a(11), b(11);
  CHECK(decode(m, prefix, nuc, a).continuation == decode(m, prefix, nuc, b).continuation);

  // First-token frequencies over 10,000 seeds match q.
  const VectorD q = truncated_distribution(softmax(m.logits(prefix).bottomRows(1).transpose()), Nucleus{0.9});
  std::vector<double> counts(9, 0.0);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    Rng s(seed);
    DecodingConfig one = nuc;
    one.max_new_tokens = 1;
    counts[decode(m, prefix, one, s).continuation[0]] += 1;
  }
  for (std::size_t v = 0; v < 9; ++v) CHECK(std::abs(counts[v] / 10000.0 - q(static_cast<Eigen::Index>(v))) <= 0.02);

  VectorD point = VectorD::Zero(4);
  point(2) = 1.0;
  Rng any(3);
  CHECK(sample_from(point, any) == 2);
}

TEST_CASE("config validation and tags") {
  DecodingConfig c;
  CHECK(c.tag() == "greedy");
  c.strategy = Strategy::beam;
  c.beam_size = 10;
  c.block_ngram = 4;
  CHECK(c.tag() == "beam-10-block-4");
  c.strategy = Strategy::nucleus;
  c.top_p = 0.0;
  CHECK_THROWS(c.validate());
  c.top_p = 0.9;
  CHECK_NOTHROW(c.validate());
  c.max_new_tokens = 0;
  CHECK_THROWS(c.validate());
  CHECK(parse_strategy("top-k") == Strategy::topk);
  CHECK_THROWS(parse_strategy("sample"));
}

TEST_CASE("transformer decoding with the KV cache matches recomputation") {
  ModelConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_model = 8;
  mc.d_ffn = 8;
  mc.vocab_size = 11;
  mc.max_len = 24;
  auto params = init_parameters<double>(mc);
  Rng noise(6);
  for (auto& v : params.values) v += 0.3 * noise.normal();
  const TransformerLM<double> lm(params);

  // Same model routed through the recompute fallback.
  struct Slow : LanguageModel {
    const TransformerLM<double>* inner;
    std::size_t vocab_size() const override { return inner->vocab_size(); }
    std::size_t max_len() const override { return inner->max_len(); }
    MatrixD logits(std::span<const TokenId> ids) const override { return inner->logits(ids); }
  } slow;
  slow.inner = &lm;

  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto prefix = random_prefix(rng, 4, 11);
    CHECK(greedy_decode(lm, prefix, 12).continuation == greedy_decode(slow, prefix, 12).continuation);
    const auto a = beam_search_decode(lm, prefix, 12, 3, 3);
    const auto b = beam_search_decode(slow, prefix, 12, 3, 3);
    CHECK(a.continuation == b.continuation);
    CHECK(a.score == doctest::Approx(b.score).epsilon(1e-9));
  }
}

TEST_CASE("completion records round trip") {
  std::stringstream ss;
  write_completion(ss, {"greedy", -3.25, {1, 2, 3}, {4, 5}});
  write_completion(ss, {"top-p-0.9", -0.1, {7}, {8, 9, 10}});
  const auto back = read_completions(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].strategy == "greedy");
  CHECK(back[0].score == -3.25);
  CHECK(back[0].prefix == std::vector<TokenId>{1, 2, 3});
  CHECK(back[1].continuation == std::vector<TokenId>{8, 9, 10});
  CHECK(back[1].score == -0.1);
}
