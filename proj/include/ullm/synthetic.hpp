#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace ullm {

/// Deterministic English-like word-level text: a fixed pseudo-word lexicon
/// with Zipfian frequencies, a small phrase grammar, and paragraph topics
/// that make content words recur the way they do in encyclopedic prose.
struct SyntheticCorpusConfig {
  std::uint64_t lexicon_seed = 20190806;
  std::size_t nouns = 900;
  std::size_t verbs = 300;
  std::size_t adjectives = 300;
  std::size_t names = 200;
  double zipf_exponent = 1.1;
  double topic_share = 0.5;  // chance a content word comes from the paragraph topic
  std::size_t topic_size = 12;
};

struct SyntheticCorpus {
  std::string train, valid, test;
};

/// Roughly `bytes` of text per split share: train gets 90%, valid and test
/// 5% each. Every split uses the same lexicon and its own text seed.
SyntheticCorpus make_synthetic_corpus(std::size_t bytes, std::uint64_t seed,
                                      const SyntheticCorpusConfig& config = {});

/// One text of about `bytes` bytes from the given text seed.
std::string synthetic_text(std::size_t bytes, std::uint64_t seed, const SyntheticCorpusConfig& config = {});

}  // namespace ullm
