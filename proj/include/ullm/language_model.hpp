#pragma once

#include <memory>
#include <span>

#include "ullm/common.hpp"
#include "ullm/model.hpp"

namespace ullm {

/// A growing sequence being decoded. Cloned when beam hypotheses fork.
class DecodeState {
 public:
  virtual ~DecodeState() = default;
  virtual std::unique_ptr<DecodeState> clone() const = 0;
  virtual void append(TokenId id) = 0;
  /// Logits for the next token given everything appended so far.
  virtual VectorD next_logits() const = 0;
  virtual std::size_t length() const = 0;
};

/// Anything that yields next-token logits p(x_t | x_<t).
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_len() const = 0;
  /// Teacher-forced logits; row t conditions on ids[0..t].
  virtual MatrixD logits(std::span<const TokenId> ids) const = 0;
  /// A decode state with `prefix` already appended (prefix must be nonempty).
  virtual std::unique_ptr<DecodeState> start(std::span<const TokenId> prefix) const;
};

/// Fallback state that recomputes teacher-forced logits for every step.
class RecomputeState : public DecodeState {
 public:
  explicit RecomputeState(const LanguageModel& model) : model_(&model) {}
  std::unique_ptr<DecodeState> clone() const override { return std::make_unique<RecomputeState>(*this); }
  void append(TokenId id) override { ids_.push_back(id); }
  VectorD next_logits() const override;
  std::size_t length() const override { return ids_.size(); }

 private:
  const LanguageModel* model_;
  std::vector<TokenId> ids_;
};

/// Non-owning view of transformer parameters; the parameters must outlive it.
template <typename Real>
class TransformerLM : public LanguageModel {
 public:
  explicit TransformerLM(const Parameters<Real>& params) : params_(&params) {}

  std::size_t vocab_size() const override { return params_->config.vocab_size; }
  std::size_t max_len() const override { return params_->config.max_len; }
  MatrixD logits(std::span<const TokenId> ids) const override {
    return forward(*params_, ids).logits.template cast<double>();
  }
  std::unique_ptr<DecodeState> start(std::span<const TokenId> prefix) const override;

  const Parameters<Real>& parameters() const { return *params_; }

 private:
  const Parameters<Real>* params_;
};

}  // namespace ullm
