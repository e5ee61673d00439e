#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ullm/config.hpp"

using namespace ullm;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"({"corpus": {"synthetic_bytes": 20000, "seq_len": 64},
                           "model": {"d_model": 16, "n_heads": 2, "d_ffn": 32}})";

ErrorCode code_of(const std::string& text, const std::vector<std::string>& overrides = {}) {
  try {
    parse_experiment_config(text, overrides);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST_CASE("defaults are filled in") {
  const ExperimentConfig c = parse_experiment_config(kMinimal, {});
  CHECK(c.source.synthetic_bytes == 20000u);
  CHECK(c.corpus.seq_len == 64);
  CHECK(c.model.max_len == 64);
  CHECK(c.train.objective == Objective::mle);
  CHECK(c.train.alpha == 1.0);
  CHECK(c.finetune.mix_prob == 0.5);
  CHECK(c.finetune.token.max_updates == 1500);
  CHECK(c.finetune.candidate_mode == CandidateMode::repeat_n);
  CHECK(c.finetune.ngram == 4);
  REQUIRE(c.decoding.size() == 1);
  CHECK(c.decoding[0].strategy == Strategy::greedy);
  CHECK(c.decoding[0].max_new_tokens == c.metrics.continuation_len);
  CHECK(c.eval_split == "valid");
  CHECK(c.effective_json.find("\"objective\": \"mle\"") != std::string::npos);
}

TEST_CASE("overrides") {
  const ExperimentConfig c = parse_experiment_config(
      kMinimal, {"train.objective=ul-token", "train.alpha=0.5", "finetune.base_objective=ul-token",
                 "run.stamp=abc", "decoding=[{\"strategy\":\"beam\",\"beam_size\":4,\"block_ngram\":3}]",
                 "decoding.0.beam_size=5"});
  CHECK(c.train.objective == Objective::ul_token);
  CHECK(c.train.alpha == 0.5);
  CHECK(c.finetune.token.objective == Objective::ul_token);
  CHECK(c.finetune.token.alpha == 0.5);
  CHECK(c.stamp == "abc");
  REQUIRE(c.decoding.size() == 1);
  CHECK(c.decoding[0].beam_size == 5);
  CHECK(c.decoding[0].block_ngram == 3u);
  CHECK(code_of(kMinimal, {"no_equals_sign"}) == ErrorCode::invalid_argument);
  CHECK(code_of(kMinimal, {"decoding=[{}]", "decoding.3.top_k=2"}) == ErrorCode::invalid_argument);
}

TEST_CASE("schema errors") {
  CHECK(code_of("{not json") == ErrorCode::schema);
  CHECK(code_of("[1, 2]") == ErrorCode::schema);
  CHECK(code_of(R"({"corpus": {"synthetic_bytes": 100}, "bogus": 1})") == ErrorCode::schema);
  CHECK(code_of(R"({"corpus": {"synthetic_bytes": 100, "seqlen": 4}})") == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"train.alpha=\"big\""}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"train.objective=ul"}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"model.n_heads=3"}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"train.alpha=-1"}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"metrics.continuation_len=60"}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"corpus.train=\"a.txt\""}) == ErrorCode::schema);
  CHECK(code_of(R"({"corpus": {"train": "a.txt"}})") == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"decoding=[{\"strategy\":\"nucleus\",\"top_p\":0}]"}) == ErrorCode::schema);
  CHECK(code_of(kMinimal, {"decoding=[{\"strategy\":\"greedy\",\"temperature\":1}]"}) == ErrorCode::schema);
}

TEST_CASE("files and paths") {
  const fs::path dir = fs::temp_directory_path() / "ullm_config_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "data");
  for (const char* split : {"train", "valid", "test"}) {
    std::ofstream(dir / "data" / (std::string(split) + ".txt")) << "a b c d a b c d a b c d e\n";
  }
  std::ofstream(dir / "exp.json") << R"({"corpus": {"train": "data/train.txt", "valid": "data/valid.txt",
                                         "test": "data/test.txt", "seq_len": 4},
                                         "model": {"d_model": 8, "n_heads": 2, "d_ffn": 8},
                                         "metrics": {"prefix_len": 2, "continuation_len": 2},
                                         "finetune": {"prefix_len": 2, "continuation_len": 2}})";
  ExperimentConfig c = load_experiment_config((dir / "exp.json").string(), {});
  CHECK(fs::path(c.source.train_path) == dir / "data" / "train.txt");
  CHECK(fs::path(c.out_dir) == dir / "runs");
  const PreparedCorpus pc = load_corpus(c);
  CHECK(c.model.vocab_size == pc.vocab.size());
  CHECK(split_by_name(pc, "test").size() == 3);
  CHECK_THROWS(split_by_name(pc, "dev"));

  try {
    load_experiment_config((dir / "missing.json").string(), {});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::io);
  }
}

TEST_CASE("content hash") {
  CHECK(content_hash("") == "00000000");
  CHECK(content_hash("123456789") == "cbf43926");  // CRC-32 check value
  CHECK(content_hash("a") != content_hash("b"));
}
