#include "ullm/language_model.hpp"

namespace ullm {

namespace {

template <typename Real>
class CachedState : public DecodeState {
 public:
  explicit CachedState(const Parameters<Real>& params) : decoder_(params) {}
  std::unique_ptr<DecodeState> clone() const override { return std::make_unique<CachedState>(*this); }
  void append(TokenId id) override { decoder_.append(id); }
  VectorD next_logits() const override { return decoder_.next_logits().template cast<double>(); }
  std::size_t length() const override { return decoder_.length(); }

 private:
  IncrementalDecoder<Real> decoder_;
};

}  // namespace

std::unique_ptr<DecodeState> LanguageModel::start(std::span<const TokenId> prefix) const {
  require(!prefix.empty(), "decoding requires a nonempty prefix");
  auto state = std::make_unique<RecomputeState>(*this);
  for (TokenId id : prefix) state->append(id);
  return state;
}

VectorD RecomputeState::next_logits() const {
  require(!ids_.empty(), "no tokens appended yet");
  const MatrixD all = model_->logits(ids_);
  return all.row(all.rows() - 1).transpose();
}

template <typename Real>
std::unique_ptr<DecodeState> TransformerLM<Real>::start(std::span<const TokenId> prefix) const {
  require(!prefix.empty(), "decoding requires a nonempty prefix");
  auto state = std::make_unique<CachedState<Real>>(*params_);
  for (TokenId id : prefix) state->append(id);
  return state;
}

template class TransformerLM<float>;
template class TransformerLM<double>;

}  // namespace ullm
