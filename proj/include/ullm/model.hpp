#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ullm/common.hpp"

namespace ullm {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t d_ffn = 512;
  std::size_t vocab_size = 0;
  std::size_t max_len = 256;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerOffsets {
  std::size_t ln1_gain, ln1_bias;
  std::size_t w_query, b_query, w_key, w_value, b_value, w_attn_out, b_attn_out;
  std::size_t ln2_gain, ln2_bias;
  std::size_t w_ffn_in, b_ffn_in, w_ffn_out, b_ffn_out;
};

/// Offsets of every tensor inside the flat parameter vector. The order here
/// is the flatten order used by checkpoints and finite-difference checks:
/// token embedding, positional embedding, then per layer
/// [ln1 gain, ln1 bias, Wq, bq, Wk, Wv, bv, Wo, bo, ln2 gain, ln2 bias,
///  W1, b1, W2, b2], then final norm gain/bias, output weight, output bias.
/// The key projection has no bias: it would only shift every score in a row
/// by the same amount.
struct ParameterLayout {
  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<LayerOffsets> layers;
  std::size_t final_gain = 0;
  std::size_t final_bias = 0;
  std::size_t w_output = 0;
  std::size_t b_output = 0;
  std::size_t total = 0;

  static ParameterLayout make(const ModelConfig& config);
  /// Tensor name for a flat index, e.g. "layer1.w_query".
  std::string name_of(std::size_t index) const;
};

template <typename Real>
struct Parameters {
  ModelConfig config;
  ParameterLayout layout;
  AlignedVector<Real> values;

  Parameters() = default;
  explicit Parameters(const ModelConfig& cfg)
      : config(cfg), layout(ParameterLayout::make(cfg)), values(layout.total, Real(0)) {}

  std::size_t size() const { return values.size(); }
  const Real* at(std::size_t offset) const { return values.data() + offset; }
  Real* at(std::size_t offset) { return values.data() + offset; }
};

/// Gradient store with exactly the parameter layout.
template <typename Real>
using GradientBundle = Parameters<Real>;

template <typename To, typename From>
Parameters<To> cast_parameters(const Parameters<From>& in) {
  Parameters<To> out(in.config);
  for (std::size_t i = 0; i < in.values.size(); ++i) out.values[i] = static_cast<To>(in.values[i]);
  return out;
}

/// Weights ~ N(0, 0.02^2), with the two residual output projections scaled
/// by 1/sqrt(2 * n_layers); biases zero; norm gains one. Draws come from a
/// counter-free Rng seeded with config.seed, so the result is bit-identical
/// across runs and platforms.
template <typename Real>
Parameters<Real> init_parameters(const ModelConfig& config);

template <typename Real>
struct LayerCache {
  Matrix<Real> input, ln1_hat, ln1_out, query, key, value, attn_concat, mid;
  Matrix<Real> ln2_hat, ln2_out, ffn_pre, ffn_act;
  Vector<Real> ln1_rstd, ln2_rstd;
  std::vector<Matrix<Real>> attn_probs;  // one T x T matrix per head
};

template <typename Real>
struct ForwardCache {
  std::vector<TokenId> ids;
  std::vector<LayerCache<Real>> layers;
  Matrix<Real> final_input, final_hat, final_out;
  Vector<Real> final_rstd;
};

template <typename Real>
struct ForwardResult {
  Matrix<Real> logits;  // T x V; row t predicts the token after ids[t]
  ForwardCache<Real> cache;
};

template <typename Real>
ForwardResult<Real> forward(const Parameters<Real>& params, std::span<const TokenId> ids);

/// Accumulates dLoss/dParams into `grads` (which must share the layout).
template <typename Real>
void backward_accumulate(const Parameters<Real>& params, const ForwardCache<Real>& cache,
                         const Matrix<Real>& dlogits, GradientBundle<Real>& grads);

template <typename Real>
GradientBundle<Real> backward(const Parameters<Real>& params, const ForwardCache<Real>& cache,
                              const Matrix<Real>& dlogits) {
  GradientBundle<Real> grads(params.config);
  backward_accumulate(params, cache, dlogits, grads);
  return grads;
}

/// Max-subtracted softmax. Throws on NaN input.
VectorD softmax(const Eigen::Ref<const VectorD>& logits);
VectorD log_softmax(const Eigen::Ref<const VectorD>& logits);

/// Lowest index among the maxima.
std::size_t argmax(const Eigen::Ref<const VectorD>& row);

/// Key/value cache for one growing sequence. Produces the same next-token
/// logits as forward() on the full sequence, one position at a time.
template <typename Real>
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const Parameters<Real>& params);

  void append(TokenId id);
  std::size_t length() const { return length_; }
  /// Logits for the token following the last appended one.
  const Vector<Real>& next_logits() const { return logits_; }

 private:
  const Parameters<Real>* params_;
  std::size_t length_ = 0;
  std::vector<Matrix<Real>> keys_, values_;  // per layer, max_len x d_model
  Vector<Real> logits_;
};

// Checkpoint file: "ULLM", u32 version, ModelConfig as u32 n_layers, n_heads,
// d_model, d_ffn, vocab_size, max_len and u64 seed, then every parameter as
// little-endian float32 in flatten order, then CRC32 of all preceding bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Parameters<float>& params);
Parameters<float> deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Parameters<float>& params);
Parameters<float> load_checkpoint(const std::string& path);

}  // namespace ullm
