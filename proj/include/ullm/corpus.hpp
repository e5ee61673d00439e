#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ullm/common.hpp"

namespace ullm {

enum class TokenizerMode { word, character };

TokenizerMode parse_tokenizer_mode(std::string_view name);
std::string_view to_string(TokenizerMode mode);

/// Dense token <-> id map. Ids are assigned by descending frequency with
/// lexicographic tie-breaking; the unknown token is always present and takes
/// the last id.
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<unk>";

  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, TokenizerMode mode);

  TokenId id_of(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;

  TokenId unk_id() const { return unk_id_; }
  std::size_t size() const { return id_to_token_.size(); }
  TokenizerMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  // Plain text: first line is the unknown token, followed by one token per
  // line in id order. Character mode escapes "\n", "\t", "\r" and "\\".
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path, TokenizerMode mode);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  TokenId unk_id_ = 0;
  TokenizerMode mode_ = TokenizerMode::word;
};

enum class SequenceKind { training_block, prefix, continuation, completion };

struct TokenSequence {
  std::vector<TokenId> ids;
  SequenceKind kind = SequenceKind::training_block;
  // For completions: number of leading prefix tokens. Zero otherwise.
  std::size_t split = 0;

  std::size_t size() const { return ids.size(); }
};

TokenSequence make_completion(const std::vector<TokenId>& prefix,
                              const std::vector<TokenId>& continuation);

struct CorpusSplit {
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> valid;
  std::vector<TokenSequence> test;
};

/// Splits UTF-8 text into token strings. Word mode splits on ASCII
/// whitespace; character mode yields one token per code point. Throws on
/// invalid UTF-8.
std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode);

Vocabulary build_vocabulary(std::string_view text, TokenizerMode mode, std::size_t min_count);

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab);

/// Word mode joins tokens with single spaces, so decode(encode(t)) == t for
/// single-space separated text. Character mode is exact.
std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab);

/// Consecutive non-overlapping windows of exactly `length` ids; the trailing
/// remainder is dropped.
std::vector<TokenSequence> make_training_sequences(const std::vector<TokenId>& ids,
                                                   std::size_t length);

/// Splits every sequence into floor(L / k) prefixes of exactly k tokens.
std::vector<TokenSequence> make_prefix_batches(const std::vector<TokenSequence>& sequences,
                                               std::size_t k);

struct CorpusConfig {
  TokenizerMode mode = TokenizerMode::word;
  std::size_t min_count = 1;
  std::size_t seq_len = 256;
};

struct PreparedCorpus {
  Vocabulary vocab;
  CorpusSplit split;
};

/// Builds the vocabulary from the training text only, then windows each split.
PreparedCorpus prepare_corpus(std::string_view train_text, std::string_view valid_text,
                              std::string_view test_text, const CorpusConfig& config);

std::string read_text_file(const std::string& path);

}  // namespace ullm
