#include "ullm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "ullm/common.hpp"

namespace ullm {

namespace {

const std::vector<std::string> kDeterminers = {"the", "the", "the", "a", "his", "her", "their", "this", "its"};
const std::vector<std::string> kPrepositions = {"of", "in", "to", "for", "on", "with", "by", "at", "from", "after", "during"};
const std::vector<std::string> kAdverbs = {"also", "later", "often", "then", "still", "never", "eventually", "again"};
const std::vector<std::string> kConnectives = {"and", "but", "while", "although", "because"};

class ZipfTable {
 public:
  ZipfTable(std::vector<std::string> words, double exponent) : words_(std::move(words)) {
    double acc = 0.0;
    for (std::size_t r = 0; r < words_.size(); ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
      cumulative_.push_back(acc);
    }
  }

  const std::string& draw(Rng& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return words_[std::min(static_cast<std::size_t>(it - cumulative_.begin()), words_.size() - 1)];
  }

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::vector<double> cumulative_;
};

std::vector<std::string> pseudo_words(std::size_t count, Rng& rng, std::set<std::string>& taken,
                                      const std::string& suffix, bool capitalize) {
  static const std::string onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v",
                                       "br", "st", "tr", "gr", "pl", "ch", "sh", "th", "c", "h", "w"};
  static const std::string vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "io"};
  static const std::string codas[] = {"", "", "", "n", "r", "l", "s", "t", "m", "nd", "rk", "st"};
  std::vector<std::string> out;
  while (out.size() < count) {
    const std::size_t syllables = 1 + rng.below(3);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += onsets[rng.below(std::size(onsets))];
      w += vowels[rng.below(std::size(vowels))];
      if (s + 1 == syllables || rng.bernoulli(0.3)) w += codas[rng.below(std::size(codas))];
    }
    w += suffix;
    if (capitalize) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    if (taken.insert(w).second) out.push_back(w);
  }
  return out;
}

struct Lexicon {
  ZipfTable nouns, verbs, adjectives, names;
};

Lexicon make_lexicon(const SyntheticCorpusConfig& c) {
  Rng rng(c.lexicon_seed);
  std::set<std::string> taken;
  for (const auto* list : {&kDeterminers, &kPrepositions, &kAdverbs, &kConnectives}) taken.insert(list->begin(), list->end());
  for (const char* w : {"was", "were", "is", "that", "which", "it", "as", "and", "."}) taken.insert(w);
  auto nouns = pseudo_words(c.nouns, rng, taken, "", false);
  auto verbs = pseudo_words(c.verbs, rng, taken, "ed", false);
  auto adjectives = pseudo_words(c.adjectives, rng, taken, "ic", false);
  auto names = pseudo_words(c.names, rng, taken, "", true);
  return {ZipfTable(std::move(nouns), c.zipf_exponent), ZipfTable(std::move(verbs), c.zipf_exponent),
          ZipfTable(std::move(adjectives), c.zipf_exponent), ZipfTable(std::move(names), c.zipf_exponent)};
}

const std::string& pick(const std::vector<std::string>& list, Rng& rng) { return list[rng.below(list.size())]; }

class Writer {
 public:
  Writer(const Lexicon& lex, const SyntheticCorpusConfig& c, Rng& rng) : lex_(lex), c_(c), rng_(rng) {}

  void new_topic() {
    topic_nouns_.clear();
    topic_verbs_.clear();
    topic_names_.clear();
    for (std::size_t i = 0; i < c_.topic_size; ++i) topic_nouns_.push_back(lex_.nouns.draw(rng_));
    for (std::size_t i = 0; i < c_.topic_size / 2; ++i) topic_verbs_.push_back(lex_.verbs.draw(rng_));
    for (std::size_t i = 0; i < 3; ++i) topic_names_.push_back(lex_.names.draw(rng_));
  }

  void sentence(std::vector<std::string>& out) {
    clause(out, 0);
    if (rng_.bernoulli(0.25)) {
      out.push_back(pick(kConnectives, rng_));
      clause(out, 1);
    }
    out.push_back(".");
  }

 private:
  const std::string& noun() {
    return rng_.bernoulli(c_.topic_share) ? pick(topic_nouns_, rng_) : lex_.nouns.draw(rng_);
  }
  const std::string& verb() {
    return rng_.bernoulli(c_.topic_share) ? pick(topic_verbs_, rng_) : lex_.verbs.draw(rng_);
  }
  const std::string& name() {
    return rng_.bernoulli(c_.topic_share) ? pick(topic_names_, rng_) : lex_.names.draw(rng_);
  }

  void noun_phrase(std::vector<std::string>& out, int depth) {
    if (rng_.bernoulli(0.2)) {
      out.push_back(name());
      return;
    }
    out.push_back(pick(kDeterminers, rng_));
    if (rng_.bernoulli(0.35)) out.push_back(lex_.adjectives.draw(rng_));
    out.push_back(noun());
    if (depth < 2 && rng_.bernoulli(0.3)) {
      out.push_back(pick(kPrepositions, rng_));
      noun_phrase(out, depth + 1);
    }
  }

  void clause(std::vector<std::string>& out, int depth) {
    noun_phrase(out, 0);
    const double r = rng_.uniform();
    if (r < 0.2) {
      out.push_back(rng_.bernoulli(0.8) ? "was" : "is");
      out.push_back(lex_.adjectives.draw(rng_));
    } else {
      if (rng_.bernoulli(0.15)) out.push_back(pick(kAdverbs, rng_));
      out.push_back(verb());
      noun_phrase(out, 1);
    }
    if (rng_.bernoulli(0.35)) {
      out.push_back(pick(kPrepositions, rng_));
      noun_phrase(out, 1);
    }
    if (depth == 0 && rng_.bernoulli(0.1)) {
      out.push_back("which");
      out.push_back(verb());
      noun_phrase(out, 2);
    }
  }

  const Lexicon& lex_;
  const SyntheticCorpusConfig& c_;
  Rng& rng_;
  std::vector<std::string> topic_nouns_, topic_verbs_, topic_names_;
};

}  // namespace

std::string synthetic_text(std::size_t bytes, std::uint64_t seed, const SyntheticCorpusConfig& config) {
  const Lexicon lex = make_lexicon(config);
  Rng rng(seed);
  Writer writer(lex, config, rng);
  std::string text;
  text.reserve(bytes + 256);
  std::vector<std::string> words;
  while (text.size() < bytes) {
    writer.new_topic();
    const std::size_t sentences = 4 + rng.below(6);
    for (std::size_t s = 0; s < sentences; ++s) {
      words.clear();
      writer.sentence(words);
      for (const auto& w : words) {
        if (!text.empty()) text += ' ';
        text += w;
      }
    }
  }
  text += '\n';
  return text;
}

SyntheticCorpus make_synthetic_corpus(std::size_t bytes, std::uint64_t seed, const SyntheticCorpusConfig& config) {
  require(bytes >= 1000, "synthetic corpus needs at least 1000 bytes");
  SyntheticCorpus out;
  out.train = synthetic_text(bytes * 9 / 10, seed, config);
  out.valid = synthetic_text(bytes / 20, seed + 1, config);
  out.test = synthetic_text(bytes / 20, seed + 2, config);
  return out;
}

}  // namespace ullm
