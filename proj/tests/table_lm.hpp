#pragma once

#include <cmath>
#include <vector>

#include "ullm/language_model.hpp"

namespace ullm::testing {

// Bigram model given by an explicit probability table: row a holds
// p(. | last token = a). Zero entries become -inf logits.
class BigramTable : public LanguageModel {
 public:
  explicit BigramTable(std::vector<std::vector<double>> table, std::size_t max_len = 64)
      : table_(std::move(table)), max_len_(max_len) {}

  std::size_t vocab_size() const override { return table_.size(); }
  std::size_t max_len() const override { return max_len_; }

  MatrixD logits(std::span<const TokenId> ids) const override {
    MatrixD out(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(table_.size()));
    for (std::size_t t = 0; t < ids.size(); ++t) {
      for (std::size_t v = 0; v < table_.size(); ++v) {
        out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) = std::log(table_[ids[t]][v]);
      }
    }
    return out;
  }

  double prob(TokenId from, TokenId to) const { return table_[from][to]; }

 private:
  std::vector<std::vector<double>> table_;
  std::size_t max_len_;
};

// Model whose next-token logits depend on the whole history through a
// fixed hash, so beam hypotheses with different pasts diverge.
class HistoryTable : public LanguageModel {
 public:
  HistoryTable(std::size_t vocab, std::uint64_t seed, std::size_t max_len = 64)
      : vocab_(vocab), seed_(seed), max_len_(max_len) {}

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }

  MatrixD logits(std::span<const TokenId> ids) const override {
    MatrixD out(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(vocab_));
    std::uint64_t h = seed_;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      h = h * 0x100000001B3ULL ^ (ids[t] + 1);
      Rng rng(h);
      for (std::size_t v = 0; v < vocab_; ++v) out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) = 2.0 * rng.normal();
    }
    return out;
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  std::size_t max_len_;
};

}  // namespace ullm::testing
