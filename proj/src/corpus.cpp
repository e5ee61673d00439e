#include "ullm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace ullm {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Length of the UTF-8 sequence starting at text[i], or 0 if malformed.
std::size_t utf8_length(std::string_view text, std::size_t i) {
  const auto lead = static_cast<unsigned char>(text[i]);
  std::size_t len = 0;
  std::uint32_t min_cp = 0;
  std::uint32_t cp = 0;
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) {
    len = 2;
    min_cp = 0x80;
    cp = lead & 0x1F;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3;
    min_cp = 0x800;
    cp = lead & 0x0F;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4;
    min_cp = 0x10000;
    cp = lead & 0x07;
  } else {
    return 0;
  }
  if (i + len > text.size()) return 0;
  for (std::size_t j = 1; j < len; ++j) {
    const auto c = static_cast<unsigned char>(text[i + j]);
    if ((c & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (c & 0x3F);
  }
  if (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

void validate_utf8(std::string_view text) {
  for (std::size_t i = 0; i < text.size();) {
    const std::size_t len = utf8_length(text, i);
    if (len == 0) throw Error(ErrorCode::format, "invalid UTF-8 at byte " + std::to_string(i));
    i += len;
  }
}

std::string escape_line(const std::string& token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_line(const std::string& line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\' || i + 1 == line.size()) {
      out += line[i];
      continue;
    }
    const char next = line[++i];
    switch (next) {
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      default: out += next;
    }
  }
  return out;
}

}  // namespace

TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "word") return TokenizerMode::word;
  if (name == "char") return TokenizerMode::character;
  fail("unknown tokenizer mode '" + std::string(name) + "' (expected word or char)");
}

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::word ? "word" : "char";
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, TokenizerMode mode)
    : id_to_token_(std::move(tokens)), mode_(mode) {
  bool has_unk = false;
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    const auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
    if (!inserted) throw Error(ErrorCode::format, "duplicate vocabulary token '" + id_to_token_[i] + "'");
    if (id_to_token_[i] == kUnknown) {
      unk_id_ = static_cast<TokenId>(i);
      has_unk = true;
    }
  }
  if (!has_unk) {
    unk_id_ = static_cast<TokenId>(id_to_token_.size());
    token_to_id_.emplace(std::string(kUnknown), unk_id_);
    id_to_token_.emplace_back(kUnknown);
  }
}

TokenId Vocabulary::id_of(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? unk_id_ : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  require(id < id_to_token_.size(), "token id " + std::to_string(id) + " out of range");
  return id_to_token_[id];
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) != 0;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write vocabulary to " + path);
  out << escape_line(std::string(kUnknown)) << '\n';
  for (const auto& t : id_to_token_) out << escape_line(t) << '\n';
  if (!out) throw Error(ErrorCode::io, "failed writing vocabulary to " + path);
}

Vocabulary Vocabulary::load(const std::string& path, TokenizerMode mode) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open vocabulary " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::format, "empty vocabulary file " + path);
  if (unescape_line(line) != kUnknown) {
    throw Error(ErrorCode::format, "vocabulary " + path + " does not start with the unknown token");
  }
  std::vector<std::string> tokens;
  while (std::getline(in, line)) tokens.push_back(unescape_line(line));
  return Vocabulary(std::move(tokens), mode);
}

TokenSequence make_completion(const std::vector<TokenId>& prefix,
                              const std::vector<TokenId>& continuation) {
  TokenSequence seq;
  seq.kind = SequenceKind::completion;
  seq.split = prefix.size();
  seq.ids.reserve(prefix.size() + continuation.size());
  seq.ids.insert(seq.ids.end(), prefix.begin(), prefix.end());
  seq.ids.insert(seq.ids.end(), continuation.begin(), continuation.end());
  return seq;
}

std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode) {
  validate_utf8(text);
  std::vector<std::string> out;
  if (mode == TokenizerMode::word) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      const std::size_t start = i;
      while (i < text.size() && !is_space(text[i])) ++i;
      if (i > start) out.emplace_back(text.substr(start, i - start));
    }
  } else {
    for (std::size_t i = 0; i < text.size();) {
      const std::size_t len = utf8_length(text, i);
      out.emplace_back(text.substr(i, len));
      i += len;
    }
  }
  return out;
}

Vocabulary build_vocabulary(std::string_view text, TokenizerMode mode, std::size_t min_count) {
  const auto tokens = tokenize(text, mode);
  if (tokens.empty()) fail("empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens) {
    if (t != Vocabulary::kUnknown) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, count] : counts) {
    if (count >= min_count) kept.emplace_back(token, count);
  }
  // counts is lexicographically ordered already, so a stable sort on
  // frequency leaves lexicographic order among ties.
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> ordered;
  ordered.reserve(kept.size() + 1);
  for (auto& [token, count] : kept) ordered.push_back(std::move(token));
  return Vocabulary(std::move(ordered), mode);
}

std::vector<TokenId> encode(std::string_view text, const Vocabulary& vocab) {
  const auto tokens = tokenize(text, vocab.mode());
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id_of(t));
  return ids;
}

std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.mode() == TokenizerMode::word && i > 0) out += ' ';
    out += vocab.token(ids[i]);
  }
  return out;
}

std::vector<TokenSequence> make_training_sequences(const std::vector<TokenId>& ids,
                                                   std::size_t length) {
  require(length >= 2, "training sequence length must be at least 2");
  if (ids.size() < length) {
    fail("corpus has " + std::to_string(ids.size()) + " tokens, fewer than sequence length " +
         std::to_string(length));
  }
  std::vector<TokenSequence> out;
  out.reserve(ids.size() / length);
  for (std::size_t start = 0; start + length <= ids.size(); start += length) {
    TokenSequence seq;
    seq.kind = SequenceKind::training_block;
    seq.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(start),
                   ids.begin() + static_cast<std::ptrdiff_t>(start + length));
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<TokenSequence> make_prefix_batches(const std::vector<TokenSequence>& sequences,
                                               std::size_t k) {
  require(k >= 1, "prefix length must be at least 1");
  std::vector<TokenSequence> out;
  for (const auto& seq : sequences) {
    if (k > seq.size()) {
      fail("prefix length " + std::to_string(k) + " exceeds sequence length " +
           std::to_string(seq.size()));
    }
    for (std::size_t start = 0; start + k <= seq.size(); start += k) {
      TokenSequence prefix;
      prefix.kind = SequenceKind::prefix;
      prefix.ids.assign(seq.ids.begin() + static_cast<std::ptrdiff_t>(start),
                        seq.ids.begin() + static_cast<std::ptrdiff_t>(start + k));
      out.push_back(std::move(prefix));
    }
  }
  return out;
}

PreparedCorpus prepare_corpus(std::string_view train_text, std::string_view valid_text,
                              std::string_view test_text, const CorpusConfig& config) {
  PreparedCorpus corpus;
  corpus.vocab = build_vocabulary(train_text, config.mode, config.min_count);
  corpus.split.train = make_training_sequences(encode(train_text, corpus.vocab), config.seq_len);
  corpus.split.valid = make_training_sequences(encode(valid_text, corpus.vocab), config.seq_len);
  if (!test_text.empty()) {
    corpus.split.test = make_training_sequences(encode(test_text, corpus.vocab), config.seq_len);
  }
  return corpus;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace ullm
