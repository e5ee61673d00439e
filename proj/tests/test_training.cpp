#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "ullm/synthetic.hpp"
#include "ullm/training.hpp"

using namespace ullm;
namespace fs = std::filesystem;

namespace {

struct Toy {
  PreparedCorpus corpus;
  ModelConfig model;
};

Toy make_toy(std::size_t bytes, std::size_t seq_len, std::size_t d_model = 16) {
  const SyntheticCorpus text = make_synthetic_corpus(bytes, 3);
  CorpusConfig cc;
  cc.seq_len = seq_len;
  Toy toy{prepare_corpus(text.train, text.valid, text.test, cc), {}};
  toy.model.n_layers = 1;
  toy.model.n_heads = 2;
  toy.model.d_model = d_model;
  toy.model.d_ffn = 2 * d_model;
  toy.model.vocab_size = toy.corpus.vocab.size();
  toy.model.max_len = seq_len;
  toy.model.seed = 4;
  return toy;
}

TrainConfig small_train(Objective objective, std::size_t updates) {
  TrainConfig tc;
  tc.objective = objective;
  tc.max_updates = updates;
  tc.eval_every = updates;
  tc.batch_size = 4;
  tc.lr = 3e-3;
  tc.seed = 9;
  return tc;
}

class UniformModel : public LanguageModel {
 public:
  explicit UniformModel(std::size_t v) : v_(v) {}
  std::size_t vocab_size() const override { return v_; }
  std::size_t max_len() const override { return 1000; }
  MatrixD logits(std::span<const TokenId> ids) const override {
    return MatrixD::Zero(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(v_));
  }

 private:
  std::size_t v_;
};

double greedy_seq_rep4(const Parameters<float>& params, const std::vector<TokenSequence>& seqs) {
  CompletionSuite suite;
  suite.prefix_len = 5;
  suite.continuation_len = 20;
  suite.max_prefixes = 40;
  DecodingConfig greedy;
  greedy.max_new_tokens = 20;
  const TransformerLM<float> lm(params);
  return evaluate_completion_suite(lm, seqs, suite, {greedy}).reports[0].seq_rep.at(4);
}

}  // namespace

TEST_CASE("best checkpoint selection") {
  auto metas = [](std::vector<double> ppls) {
    std::vector<CheckpointMeta> out;
    for (std::size_t i = 0; i < ppls.size(); ++i) out.push_back({i + 1, ppls[i], "mle", ""});
    return out;
  };
  CHECK(best_checkpoint_index(metas({42.0})) == 0);
  CHECK(best_checkpoint_index(metas({30, 25, 27})) == 1);
  CHECK(best_checkpoint_index(metas({25, 25})) == 0);
  CHECK_THROWS(best_checkpoint_index({}));
  CHECK_THROWS(select_best_checkpoint({}));
}

TEST_CASE("config parsing and validation") {
  CHECK(parse_objective("ul-token") == Objective::ul_token);
  CHECK(to_string(Objective::mle) == "mle");
  CHECK(parse_candidate_mode("random-seq") == CandidateMode::random_seq);
  CHECK_THROWS(parse_objective("ul"));
  TrainConfig tc;
  tc.alpha = -1;
  CHECK_THROWS(tc.validate());
  FinetuneConfig fc;
  CHECK_NOTHROW(fc.validate(64));
  CHECK_THROWS(fc.validate(32));  // prefix 10 + continuation 30 does not fit
  fc.mix_prob = 1.5;
  CHECK_THROWS(fc.validate(64));
}

TEST_CASE("optimizers and clipping") {
  ModelConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 1;
  mc.d_model = 2;
  mc.d_ffn = 2;
  mc.vocab_size = 3;
  mc.max_len = 2;
  Parameters<float> p(mc);
  GradientBundle<float> g(mc);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = (i % 2 ? 0.5f : -0.25f);

  Parameters<float> sgd_p = p;
  Optimizer sgd(OptimizerKind::sgd, 0.1, p.size());
  sgd.step(sgd_p, g);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(sgd_p.values[i] == doctest::Approx(-0.1 * g.values[i]));

  // First bias-corrected Adam step moves every coordinate by about lr against the gradient sign.
  Parameters<float> adam_p = p;
  Optimizer adam(OptimizerKind::adam, 0.01, p.size());
  adam.step(adam_p, g);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(adam_p.values[i] == doctest::Approx(g.values[i] > 0 ? -0.01 : 0.01).epsilon(1e-4));
  }
  CHECK(adam.steps() == 1);

  GradientBundle<float> big = g;
  double sq = 0;
  for (float v : big.values) sq += double(v) * v;
  const double norm = clip_global_norm(big, 1.0);
  CHECK(norm == doctest::Approx(std::sqrt(sq)));
  double after = 0;
  for (float v : big.values) after += double(v) * v;
  CHECK(std::sqrt(after) == doctest::Approx(1.0).epsilon(1e-5));
  GradientBundle<float> small = g;
  clip_global_norm(small, 1e6);
  CHECK(small.values == g.values);
}

TEST_CASE("validation perplexity falls on a small repetitive corpus") {
  // 50 tokens: a five-word phrase repeated ten times.
  std::string text;
  for (int i = 0; i < 10; ++i) text += "the cat sat on mats ";
  CorpusConfig cc;
  cc.seq_len = 10;
  const PreparedCorpus pc = prepare_corpus(text, text, text, cc);
  ModelConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_model = 16;
  mc.d_ffn = 32;
  mc.vocab_size = pc.vocab.size();
  mc.max_len = 10;
  TrainConfig tc = small_train(Objective::mle, 100);
  tc.eval_every = 1;
  tc.lr = 1e-3;
  tc.batch_size = 2;
  const auto series = train_token_level(tc, init_parameters<float>(mc), pc.split).series;
  REQUIRE(series.size() == 100);
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 5 <= series.size(); ++i) {
    double s = 0;
    for (std::size_t j = i; j < i + 5; ++j) s += series[j].meta.valid_ppl;
    smooth.push_back(s / 5);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);
  CHECK(series.back().meta.valid_ppl < 0.5 * series.front().meta.valid_ppl);
}

TEST_CASE("token-level training") {
  const Toy toy = make_toy(20000, 24);
  const auto init = init_parameters<float>(toy.model);

  SUBCASE("alpha zero matches MLE update for update") {
    TrainConfig mle = small_train(Objective::mle, 12);
    mle.eval_every = 3;
    TrainConfig ul = mle;
    ul.objective = Objective::ul_token;
    ul.alpha = 0.0;
    const auto a = train_token_level(mle, init, toy.corpus.split).series;
    const auto b = train_token_level(ul, init, toy.corpus.split).series;
    REQUIRE(a.size() == 4);
    REQUIRE(b.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].params.values == b[i].params.values);
      CHECK(a[i].meta.valid_ppl == b[i].meta.valid_ppl);
    }
  }

  SUBCASE("runs are deterministic given the seed") {
    const TrainConfig tc = small_train(Objective::ul_token, 10);
    const auto a = train_token_level(tc, init, toy.corpus.split).series;
    const auto b = train_token_level(tc, init, toy.corpus.split).series;
    CHECK(serialize_checkpoint(a.back().params) == serialize_checkpoint(b.back().params));
    TrainConfig other = tc;
    other.seed = 10;
    CHECK(train_token_level(other, init, toy.corpus.split).series.back().params.values != a.back().params.values);
  }

  SUBCASE("recorded validation perplexity matches a recomputation from the saved checkpoint") {
    TrainConfig tc = small_train(Objective::ul_token, 6);
    tc.eval_every = 3;
    const auto series = train_token_level(tc, init, toy.corpus.split).series;
    const fs::path path = fs::temp_directory_path() / "ullm_training_meta.bin";
    save_checkpoint(path.string(), series.back().params);
    const auto loaded = load_checkpoint(path.string());
    const TransformerLM<float> lm(loaded);
    CHECK(std::abs(perplexity(lm, toy.corpus.split.valid) - series.back().meta.valid_ppl) <= 1e-6);
    CHECK(series.back().meta.update_count == 6);
    CHECK(series.back().meta.objective == "ul-token");
  }

  SUBCASE("log lines") {
    std::ostringstream log;
    TrainConfig tc = small_train(Objective::mle, 4);
    tc.eval_every = 2;
    train_token_level(tc, init, toy.corpus.split, {&log, ""});
    std::istringstream in(log.str());
    std::string line;
    std::size_t updates = 0, evals = 0;
    while (std::getline(in, line)) {
      if (line.find("\"kind\":\"eval\"") != std::string::npos) {
        ++evals;
        CHECK(line.find("\"valid_ppl\"") != std::string::npos);
      } else {
        ++updates;
        CHECK(line.find("\"loss\"") != std::string::npos);
      }
      CHECK(line.find("\"wall_time\"") != std::string::npos);
    }
    CHECK(updates == 4);
    CHECK(evals == 2);
  }

  SUBCASE("a non-finite loss aborts and dumps the batch") {
    Parameters<float> broken = init;
    broken.values[broken.layout.w_output] = std::nanf("");
    const fs::path dir = fs::temp_directory_path() / "ullm_nan_dump";
    fs::remove_all(dir);
    fs::create_directories(dir);
    try {
      train_token_level(small_train(Objective::mle, 3), broken, toy.corpus.split, {nullptr, dir.string()});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::numeric);
      CHECK(std::string(e.what()).find("update 1") != std::string::npos);
    }
    CHECK(fs::exists(dir / "nan_batch_1.txt"));
  }
}

TEST_CASE("sequence-level fine-tuning") {
  const Toy toy = make_toy(20000, 32);
  const auto base = train_token_level(small_train(Objective::mle, 30), init_parameters<float>(toy.model),
                                      toy.corpus.split).series.back().params;
  FinetuneConfig fc;
  fc.prefix_len = 10;
  fc.continuation_len = 12;
  fc.seq_batch_size = 2;
  fc.token = small_train(Objective::mle, 10);
  fc.token.eval_every = 5;

  SUBCASE("mix probability zero is continued token-level training") {
    fc.mix_prob = 0.0;
    const auto ft = finetune_sequence_level(fc, base, toy.corpus.split);
    const auto tt = train_token_level(fc.token, base, toy.corpus.split);
    REQUIRE(ft.series.size() == tt.series.size());
    for (std::size_t i = 0; i < ft.series.size(); ++i) CHECK(ft.series[i].params.values == tt.series[i].params.values);
    CHECK(ft.counters.sequence_updates == 0);
    CHECK(ft.counters.token_updates == 10);
    CHECK(ft.series[0].meta.objective == "finetune-mle");
  }

  SUBCASE("the update mix is reproducible and roughly balanced") {
    fc.token.max_updates = 40;
    fc.token.eval_every = 40;
    const auto a = finetune_sequence_level(fc, base, toy.corpus.split);
    const auto b = finetune_sequence_level(fc, base, toy.corpus.split);
    CHECK(a.counters.sequence_updates == b.counters.sequence_updates);
    CHECK(a.series.back().params.values == b.series.back().params.values);
    CHECK(a.counters.sequence_updates + a.counters.token_updates == 40);
    CHECK(a.counters.sequence_updates >= 10);
    CHECK(a.counters.sequence_updates <= 30);
    CHECK(a.counters.decoded_tokens == a.counters.sequence_updates * 2 * 12);
    CHECK(a.counters.prefix_tokens_read == a.counters.sequence_updates * 2 * 10);
  }

  SUBCASE("sequence-level updates never read ground-truth continuations") {
    // With L = 32 and k = 10 the last two tokens of every block are never part
    // of a prefix. Mutating them must not change a pure sequence-level run.
    fc.mix_prob = 1.0;
    CorpusSplit mutated = toy.corpus.split;
    for (auto& s : mutated.train) {
      s.ids[30] = (s.ids[30] + 1) % static_cast<TokenId>(toy.model.vocab_size);
      s.ids[31] = (s.ids[31] + 7) % static_cast<TokenId>(toy.model.vocab_size);
    }
    const auto a = finetune_sequence_level(fc, base, toy.corpus.split);
    const auto b = finetune_sequence_level(fc, base, mutated);
    CHECK(a.series.back().params.values == b.series.back().params.values);
    CHECK(a.counters.token_updates == 0);
    CHECK(a.counters.prefix_tokens_read == 10 * 2 * 10);
  }

  SUBCASE("random-seq candidates run") {
    fc.mix_prob = 1.0;
    fc.candidate_mode = CandidateMode::random_seq;
    fc.p_penalize = 0.5;
    const auto r = finetune_sequence_level(fc, base, toy.corpus.split);
    CHECK(r.counters.flagged_tokens > 0);
    CHECK(r.counters.flagged_tokens < r.counters.decoded_tokens);
  }
}

TEST_CASE("fine-tuning breaks the loops of a toy model") {
  const Toy toy = make_toy(60000, 32, 24);
  TrainConfig tc = small_train(Objective::mle, 300);
  const auto base = train_token_level(tc, init_parameters<float>(toy.model), toy.corpus.split).series.back().params;
  const double before = greedy_seq_rep4(base, toy.corpus.split.valid);
  REQUIRE(before > 0.2);

  FinetuneConfig fc;
  fc.prefix_len = 5;
  fc.continuation_len = 20;
  fc.seq_batch_size = 4;
  fc.token = tc;
  fc.token.max_updates = 200;
  fc.token.eval_every = 200;
  fc.token.lr = 1e-3;
  const auto tuned = finetune_sequence_level(fc, base, toy.corpus.split).series.back().params;
  const double after = greedy_seq_rep4(tuned, toy.corpus.split.valid);
  MESSAGE("greedy seq-rep-4 " << before << " -> " << after);
  CHECK(after <= 0.5 * before);
}

TEST_CASE("completion suite") {
  std::vector<TokenSequence> seqs(2);
  seqs[0].ids = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  seqs[1].ids = {9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  const auto pairs = completion_pairs(seqs, 3, 4, 0);
  REQUIRE(pairs.size() == 4);  // offsets 0 and 3 in each block
  CHECK(pairs[1].first == std::vector<TokenId>{3, 4, 5});
  CHECK(pairs[1].second == std::vector<TokenId>{6, 7, 8, 9});
  CHECK(completion_pairs(seqs, 3, 4, 3).size() == 3);
  CHECK_THROWS(completion_pairs(seqs, 6, 5, 0));

  SUBCASE("uniform model accuracy is about one over V") {
    const std::size_t V = 10;
    Rng rng(12);
    std::vector<TokenSequence> random(40);
    for (auto& s : random) {
      s.ids.resize(50);
      for (auto& v : s.ids) v = static_cast<TokenId>(rng.below(V));
    }
    CompletionSuite suite;
    suite.prefix_len = 5;
    suite.continuation_len = 10;
    DecodingConfig greedy;
    greedy.max_new_tokens = 10;
    const auto r = evaluate_completion_suite(UniformModel(V), random, suite, {greedy});
    const double n = 40.0 * 49.0, p = 1.0 / V;
    CHECK(std::abs(*r.reports[0].acc - p) <= 3.0 * std::sqrt(p * (1 - p) / n));
    CHECK(*r.reports[0].ppl == doctest::Approx(double(V)));
    CHECK(r.human.search == "-");
    CHECK(r.reports[0].search == "greedy");
  }

  SUBCASE("identical inputs give identical report bytes") {
    const Toy toy = make_toy(20000, 24);
    const auto params = init_parameters<float>(toy.model);
    const TransformerLM<float> lm(params);
    CompletionSuite suite;
    suite.prefix_len = 4;
    suite.continuation_len = 8;
    suite.max_prefixes = 10;
    DecodingConfig nucleus;
    nucleus.strategy = Strategy::nucleus;
    nucleus.top_p = 0.9;
    nucleus.max_new_tokens = 8;
    nucleus.seed = 3;
    const auto a = evaluate_completion_suite(lm, toy.corpus.split.valid, suite, {nucleus});
    const auto b = evaluate_completion_suite(lm, toy.corpus.split.valid, suite, {nucleus});
    CHECK(a.reports[0].to_json() == b.reports[0].to_json());
    CHECK(a.reports[0].token_histogram == b.reports[0].token_histogram);
    DecodingConfig short_cfg = nucleus;
    short_cfg.max_new_tokens = 5;
    CHECK_THROWS(evaluate_completion_suite(lm, toy.corpus.split.valid, suite, {short_cfg}));
  }
}
