#include "ullm/model.hpp"

#include <cmath>
#include <limits>

namespace ullm {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kInitStd = 0.02;

template <typename Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

template <typename Real>
Eigen::Map<const Matrix<Real>> cmat(const Parameters<Real>& p, std::size_t off, std::size_t rows,
                                    std::size_t cols) {
  return {p.at(off), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename Real>
Eigen::Map<Matrix<Real>> mat(Parameters<Real>& p, std::size_t off, std::size_t rows,
                             std::size_t cols) {
  return {p.at(off), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

template <typename Real>
Eigen::Map<const RowVector<Real>> crow(const Parameters<Real>& p, std::size_t off, std::size_t n) {
  return {p.at(off), static_cast<Eigen::Index>(n)};
}

template <typename Real>
Eigen::Map<RowVector<Real>> row(Parameters<Real>& p, std::size_t off, std::size_t n) {
  return {p.at(off), static_cast<Eigen::Index>(n)};
}

template <typename Real>
Real gelu(Real u) {
  constexpr Real c = Real(0.7978845608028654);  // sqrt(2 / pi)
  const Real inner = c * (u + Real(0.044715) * u * u * u);
  return Real(0.5) * u * (Real(1) + std::tanh(inner));
}

template <typename Real>
Real gelu_grad(Real u) {
  constexpr Real c = Real(0.7978845608028654);
  const Real inner = c * (u + Real(0.044715) * u * u * u);
  const Real t = std::tanh(inner);
  return Real(0.5) * (Real(1) + t) +
         Real(0.5) * u * (Real(1) - t * t) * c * (Real(1) + Real(3 * 0.044715) * u * u);
}

// Row-wise layer norm. Writes normalized values into `hat`, 1/sigma into
// `rstd` and the affine output into `out`.
template <typename Real, typename In>
void layer_norm(const In& x, const Eigen::Map<const RowVector<Real>>& gain,
                const Eigen::Map<const RowVector<Real>>& bias, Matrix<Real>& hat,
                Vector<Real>& rstd, Matrix<Real>& out) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index d = x.cols();
  hat.resize(rows, d);
  out.resize(rows, d);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mean = x.row(r).sum() / Real(d);
    const Real var = (x.row(r).array() - mean).square().sum() / Real(d);
    const Real inv = Real(1) / std::sqrt(var + Real(kNormEps));
    rstd(r) = inv;
    hat.row(r) = (x.row(r).array() - mean) * inv;
    out.row(r) = hat.row(r).cwiseProduct(gain) + bias;
  }
}

template <typename Real>
Matrix<Real> layer_norm_backward(const Matrix<Real>& dout, const Matrix<Real>& hat,
                                 const Vector<Real>& rstd, const Parameters<Real>& params,
                                 std::size_t gain_off, std::size_t bias_off,
                                 GradientBundle<Real>& grads) {
  const std::size_t d = static_cast<std::size_t>(hat.cols());
  const auto gain = crow(params, gain_off, d);
  row(grads, gain_off, d) += dout.cwiseProduct(hat).colwise().sum();
  row(grads, bias_off, d) += dout.colwise().sum();
  Matrix<Real> dx(hat.rows(), hat.cols());
  for (Eigen::Index r = 0; r < hat.rows(); ++r) {
    const RowVector<Real> dhat = dout.row(r).cwiseProduct(gain);
    const Real mean_dhat = dhat.sum() / Real(d);
    const Real mean_dhat_hat = dhat.cwiseProduct(hat.row(r)).sum() / Real(d);
    dx.row(r) = rstd(r) * (dhat.array() - mean_dhat - hat.row(r).array() * mean_dhat_hat);
  }
  return dx;
}

}  // namespace

void ModelConfig::validate() const {
  require(n_layers >= 1, "n_layers must be at least 1");
  require(n_heads >= 1, "n_heads must be at least 1");
  require(d_model >= 1 && d_ffn >= 1, "d_model and d_ffn must be positive");
  require(d_model % n_heads == 0, "d_model (" + std::to_string(d_model) +
                                      ") must be divisible by n_heads (" +
                                      std::to_string(n_heads) + ")");
  require(vocab_size >= 1, "vocab_size must be positive");
  require(max_len >= 1, "max_len must be positive");
}

ParameterLayout ParameterLayout::make(const ModelConfig& c) {
  c.validate();
  ParameterLayout l;
  std::size_t off = 0;
  auto take = [&off](std::size_t n) {
    const std::size_t at = off;
    off += n;
    return at;
  };
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  l.token_embedding = take(c.vocab_size * d);
  l.position_embedding = take(c.max_len * d);
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    LayerOffsets o{};
    o.ln1_gain = take(d);
    o.ln1_bias = take(d);
    o.w_query = take(d * d);
    o.b_query = take(d);
    o.w_key = take(d * d);
    o.w_value = take(d * d);
    o.b_value = take(d);
    o.w_attn_out = take(d * d);
    o.b_attn_out = take(d);
    o.ln2_gain = take(d);
    o.ln2_bias = take(d);
    o.w_ffn_in = take(d * f);
    o.b_ffn_in = take(f);
    o.w_ffn_out = take(f * d);
    o.b_ffn_out = take(d);
    l.layers.push_back(o);
  }
  l.final_gain = take(d);
  l.final_bias = take(d);
  l.w_output = take(d * c.vocab_size);
  l.b_output = take(c.vocab_size);
  l.total = off;
  return l;
}

std::string ParameterLayout::name_of(std::size_t index) const {
  if (index < position_embedding) return "token_embedding";
  if (layers.empty() || index < layers.front().ln1_gain) return "position_embedding";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& o = layers[i];
    const std::size_t end = i + 1 < layers.size() ? layers[i + 1].ln1_gain : final_gain;
    if (index >= end) continue;
    const std::string p = "layer" + std::to_string(i) + ".";
    const std::pair<std::size_t, const char*> starts[] = {
        {o.b_ffn_out, "b_ffn_out"}, {o.w_ffn_out, "w_ffn_out"}, {o.b_ffn_in, "b_ffn_in"},
        {o.w_ffn_in, "w_ffn_in"},   {o.ln2_bias, "ln2_bias"},   {o.ln2_gain, "ln2_gain"},
        {o.b_attn_out, "b_attn_out"}, {o.w_attn_out, "w_attn_out"}, {o.b_value, "b_value"},
        {o.w_value, "w_value"},     {o.w_key, "w_key"},         {o.b_query, "b_query"},
        {o.w_query, "w_query"},     {o.ln1_bias, "ln1_bias"},   {o.ln1_gain, "ln1_gain"}};
    for (const auto& [start, name] : starts) {
      if (index >= start) return p + name;
    }
  }
  if (index < final_bias) return "final_gain";
  if (index < w_output) return "final_bias";
  if (index < b_output) return "w_output";
  return "b_output";
}

template <typename Real>
Parameters<Real> init_parameters(const ModelConfig& config) {
  Parameters<Real> p(config);
  Rng rng(config.seed);
  const auto& l = p.layout;
  const std::size_t d = config.d_model;
  const std::size_t f = config.d_ffn;
  const double residual_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto fill_normal = [&](std::size_t off, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) p.values[off + i] = static_cast<Real>(stddev * rng.normal());
  };
  auto fill_const = [&](std::size_t off, std::size_t n, Real v) {
    for (std::size_t i = 0; i < n; ++i) p.values[off + i] = v;
  };
  fill_normal(l.token_embedding, config.vocab_size * d, kInitStd);
  fill_normal(l.position_embedding, config.max_len * d, kInitStd);
  for (const auto& o : l.layers) {
    fill_const(o.ln1_gain, d, Real(1));
    fill_normal(o.w_query, d * d, kInitStd);
    fill_normal(o.w_key, d * d, kInitStd);
    fill_normal(o.w_value, d * d, kInitStd);
    fill_normal(o.w_attn_out, d * d, residual_std);
    fill_const(o.ln2_gain, d, Real(1));
    fill_normal(o.w_ffn_in, d * f, kInitStd);
    fill_normal(o.w_ffn_out, f * d, residual_std);
  }
  fill_const(l.final_gain, d, Real(1));
  fill_normal(l.w_output, d * config.vocab_size, kInitStd);
  return p;
}

template <typename Real>
ForwardResult<Real> forward(const Parameters<Real>& params, std::span<const TokenId> ids) {
  const auto& c = params.config;
  const auto& l = params.layout;
  const std::size_t T = ids.size();
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  const std::size_t V = c.vocab_size;
  const std::size_t H = c.n_heads;
  const std::size_t dh = c.head_dim();
  require(T >= 1, "forward: empty input");
  require(T <= c.max_len, "forward: length " + std::to_string(T) + " exceeds max_len " +
                              std::to_string(c.max_len));
  for (TokenId id : ids) {
    require(id < V, "forward: token id " + std::to_string(id) + " out of range for vocabulary of " +
                        std::to_string(V));
  }
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto ti = static_cast<Eigen::Index>(T);

  ForwardResult<Real> result;
  auto& cache = result.cache;
  cache.ids.assign(ids.begin(), ids.end());

  const auto tok = cmat(params, l.token_embedding, V, d);
  const auto pos = cmat(params, l.position_embedding, c.max_len, d);
  Matrix<Real> x(ti, static_cast<Eigen::Index>(d));
  for (std::size_t t = 0; t < T; ++t) {
    x.row(static_cast<Eigen::Index>(t)) = tok.row(ids[t]) + pos.row(static_cast<Eigen::Index>(t));
  }

  cache.layers.resize(c.n_layers);
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& o = l.layers[li];
    auto& lc = cache.layers[li];
    lc.input = x;
    layer_norm<Real>(x, crow(params, o.ln1_gain, d), crow(params, o.ln1_bias, d), lc.ln1_hat,
                     lc.ln1_rstd, lc.ln1_out);
    lc.query = lc.ln1_out * cmat(params, o.w_query, d, d);
    lc.query.rowwise() += crow(params, o.b_query, d);
    lc.key = lc.ln1_out * cmat(params, o.w_key, d, d);
    lc.value = lc.ln1_out * cmat(params, o.w_value, d, d);
    lc.value.rowwise() += crow(params, o.b_value, d);

    lc.attn_concat.resize(ti, static_cast<Eigen::Index>(d));
    lc.attn_probs.resize(H);
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      Matrix<Real> scores = (lc.query.middleCols(col, w) * lc.key.middleCols(col, w).transpose()) * scale;
      for (Eigen::Index i = 0; i < ti; ++i) {
        // Future positions get probability zero (additive -inf mask).
        const Real m = scores.row(i).head(i + 1).maxCoeff();
        Real z = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - m);
          z += scores(i, j);
        }
        scores.row(i).head(i + 1) /= z;
        scores.row(i).tail(ti - i - 1).setZero();
      }
      lc.attn_concat.middleCols(col, w) = scores * lc.value.middleCols(col, w);
      lc.attn_probs[h] = std::move(scores);
    }
    lc.mid = x + lc.attn_concat * cmat(params, o.w_attn_out, d, d);
    lc.mid.rowwise() += crow(params, o.b_attn_out, d);

    layer_norm<Real>(lc.mid, crow(params, o.ln2_gain, d), crow(params, o.ln2_bias, d), lc.ln2_hat,
                     lc.ln2_rstd, lc.ln2_out);
    lc.ffn_pre = lc.ln2_out * cmat(params, o.w_ffn_in, d, f);
    lc.ffn_pre.rowwise() += crow(params, o.b_ffn_in, f);
    lc.ffn_act = lc.ffn_pre.unaryExpr([](Real u) { return gelu(u); });
    x = lc.mid + lc.ffn_act * cmat(params, o.w_ffn_out, f, d);
    x.rowwise() += crow(params, o.b_ffn_out, d);
  }

  cache.final_input = x;
  layer_norm<Real>(x, crow(params, l.final_gain, d), crow(params, l.final_bias, d), cache.final_hat,
                   cache.final_rstd, cache.final_out);
  result.logits = cache.final_out * cmat(params, l.w_output, d, V);
  result.logits.rowwise() += crow(params, l.b_output, V);
  return result;
}

template <typename Real>
void backward_accumulate(const Parameters<Real>& params, const ForwardCache<Real>& cache,
                         const Matrix<Real>& dlogits, GradientBundle<Real>& grads) {
  const auto& c = params.config;
  const auto& l = params.layout;
  const std::size_t T = cache.ids.size();
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  const std::size_t V = c.vocab_size;
  const std::size_t H = c.n_heads;
  const std::size_t dh = c.head_dim();
  require(grads.values.size() == params.values.size(), "backward: gradient layout mismatch");
  require(static_cast<std::size_t>(dlogits.rows()) == T &&
              static_cast<std::size_t>(dlogits.cols()) == V,
          "backward: dlogits shape " + std::to_string(dlogits.rows()) + "x" +
              std::to_string(dlogits.cols()) + " does not match " + std::to_string(T) + "x" +
              std::to_string(V));
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  mat(grads, l.w_output, d, V).noalias() += cache.final_out.transpose() * dlogits;
  row(grads, l.b_output, V) += dlogits.colwise().sum();
  Matrix<Real> dout = dlogits * cmat(params, l.w_output, d, V).transpose();
  Matrix<Real> dx = layer_norm_backward(dout, cache.final_hat, cache.final_rstd, params,
                                        l.final_gain, l.final_bias, grads);

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& o = l.layers[li];
    const auto& lc = cache.layers[li];

    // x_out = mid + gelu(LN2(mid) W1 + b1) W2 + b2
    mat(grads, o.w_ffn_out, f, d).noalias() += lc.ffn_act.transpose() * dx;
    row(grads, o.b_ffn_out, d) += dx.colwise().sum();
    Matrix<Real> dpre = dx * cmat(params, o.w_ffn_out, f, d).transpose();
    dpre.array() *= lc.ffn_pre.unaryExpr([](Real u) { return gelu_grad(u); }).array();
    mat(grads, o.w_ffn_in, d, f).noalias() += lc.ln2_out.transpose() * dpre;
    row(grads, o.b_ffn_in, f) += dpre.colwise().sum();
    Matrix<Real> dln2 = dpre * cmat(params, o.w_ffn_in, d, f).transpose();
    Matrix<Real> dmid =
        dx + layer_norm_backward(dln2, lc.ln2_hat, lc.ln2_rstd, params, o.ln2_gain, o.ln2_bias, grads);

    // mid = input + attention(LN1(input)) Wo + bo
    mat(grads, o.w_attn_out, d, d).noalias() += lc.attn_concat.transpose() * dmid;
    row(grads, o.b_attn_out, d) += dmid.colwise().sum();
    const Matrix<Real> dconcat = dmid * cmat(params, o.w_attn_out, d, d).transpose();

    Matrix<Real> dq(lc.query.rows(), lc.query.cols());
    Matrix<Real> dk(lc.key.rows(), lc.key.cols());
    Matrix<Real> dv(lc.value.rows(), lc.value.cols());
    for (std::size_t h = 0; h < H; ++h) {
      const auto col = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      const Matrix<Real>& probs = lc.attn_probs[h];
      const auto dhead = dconcat.middleCols(col, w);
      dv.middleCols(col, w) = probs.transpose() * dhead;
      Matrix<Real> dprobs = dhead * lc.value.middleCols(col, w).transpose();
      // Softmax Jacobian; masked entries have probability zero and drop out.
      const Vector<Real> inner = dprobs.cwiseProduct(probs).rowwise().sum();
      Matrix<Real> dscores = probs.cwiseProduct(dprobs.colwise() - inner) * scale;
      dq.middleCols(col, w) = dscores * lc.key.middleCols(col, w);
      dk.middleCols(col, w) = dscores.transpose() * lc.query.middleCols(col, w);
    }
    mat(grads, o.w_query, d, d).noalias() += lc.ln1_out.transpose() * dq;
    row(grads, o.b_query, d) += dq.colwise().sum();
    mat(grads, o.w_key, d, d).noalias() += lc.ln1_out.transpose() * dk;
    mat(grads, o.w_value, d, d).noalias() += lc.ln1_out.transpose() * dv;
    row(grads, o.b_value, d) += dv.colwise().sum();
    Matrix<Real> dln1 = dq * cmat(params, o.w_query, d, d).transpose();
    dln1.noalias() += dk * cmat(params, o.w_key, d, d).transpose();
    dln1.noalias() += dv * cmat(params, o.w_value, d, d).transpose();
    dx = dmid + layer_norm_backward(dln1, lc.ln1_hat, lc.ln1_rstd, params, o.ln1_gain, o.ln1_bias, grads);
  }

  auto dtok = mat(grads, l.token_embedding, V, d);
  auto dpos = mat(grads, l.position_embedding, c.max_len, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    dtok.row(cache.ids[t]) += dx.row(ti);
    dpos.row(ti) += dx.row(ti);
  }
}

VectorD softmax(const Eigen::Ref<const VectorD>& logits) {
  if (logits.hasNaN()) throw Error(ErrorCode::numeric, "softmax: NaN logit");
  const double m = logits.maxCoeff();
  VectorD p = (logits.array() - m).exp();
  p /= p.sum();
  return p;
}

VectorD log_softmax(const Eigen::Ref<const VectorD>& logits) {
  if (logits.hasNaN()) throw Error(ErrorCode::numeric, "log_softmax: NaN logit");
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

std::size_t argmax(const Eigen::Ref<const VectorD>& row) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
  }
  return best;
}

template <typename Real>
IncrementalDecoder<Real>::IncrementalDecoder(const Parameters<Real>& params) : params_(&params) {
  const auto& c = params.config;
  const auto rows = static_cast<Eigen::Index>(c.max_len);
  const auto d = static_cast<Eigen::Index>(c.d_model);
  keys_.assign(c.n_layers, Matrix<Real>(rows, d));
  values_.assign(c.n_layers, Matrix<Real>(rows, d));
}

template <typename Real>
void IncrementalDecoder<Real>::append(TokenId id) {
  const auto& params = *params_;
  const auto& c = params.config;
  const auto& l = params.layout;
  const std::size_t d = c.d_model;
  const std::size_t f = c.d_ffn;
  const std::size_t V = c.vocab_size;
  const std::size_t dh = c.head_dim();
  require(id < V, "decoder: token id " + std::to_string(id) + " out of range");
  require(length_ < c.max_len, "decoder: sequence would exceed max_len " + std::to_string(c.max_len));
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto pos = static_cast<Eigen::Index>(length_);

  Matrix<Real> x = cmat(params, l.token_embedding, V, d).row(id) +
                   cmat(params, l.position_embedding, c.max_len, d).row(pos);
  Matrix<Real> hat, out;
  Vector<Real> rstd;
  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& o = l.layers[li];
    layer_norm<Real>(x, crow(params, o.ln1_gain, d), crow(params, o.ln1_bias, d), hat, rstd, out);
    Matrix<Real> q = out * cmat(params, o.w_query, d, d);
    q += crow(params, o.b_query, d);
    keys_[li].row(pos) = out * cmat(params, o.w_key, d, d);
    values_[li].row(pos) = out * cmat(params, o.w_value, d, d) + crow(params, o.b_value, d);

    Matrix<Real> concat(1, static_cast<Eigen::Index>(d));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      const auto keys = keys_[li].topRows(pos + 1).middleCols(col, w);
      const auto vals = values_[li].topRows(pos + 1).middleCols(col, w);
      Matrix<Real> scores = (q.middleCols(col, w) * keys.transpose()) * scale;
      const Real m = scores.maxCoeff();
      scores = (scores.array() - m).exp();
      scores /= scores.sum();
      concat.middleCols(col, w) = scores * vals;
    }
    Matrix<Real> mid = x + concat * cmat(params, o.w_attn_out, d, d);
    mid += crow(params, o.b_attn_out, d);
    layer_norm<Real>(mid, crow(params, o.ln2_gain, d), crow(params, o.ln2_bias, d), hat, rstd, out);
    Matrix<Real> pre = out * cmat(params, o.w_ffn_in, d, f);
    pre += crow(params, o.b_ffn_in, f);
    x = mid + pre.unaryExpr([](Real u) { return gelu(u); }) * cmat(params, o.w_ffn_out, f, d);
    x += crow(params, o.b_ffn_out, d);
  }
  layer_norm<Real>(x, crow(params, l.final_gain, d), crow(params, l.final_bias, d), hat, rstd, out);
  Matrix<Real> logits = out * cmat(params, l.w_output, d, V);
  logits += crow(params, l.b_output, V);
  logits_ = logits.transpose();
  ++length_;
}

template Parameters<float> init_parameters<float>(const ModelConfig&);
template Parameters<double> init_parameters<double>(const ModelConfig&);
template ForwardResult<float> forward<float>(const Parameters<float>&, std::span<const TokenId>);
template ForwardResult<double> forward<double>(const Parameters<double>&, std::span<const TokenId>);
template void backward_accumulate<float>(const Parameters<float>&, const ForwardCache<float>&,
                                         const Matrix<float>&, GradientBundle<float>&);
template void backward_accumulate<double>(const Parameters<double>&, const ForwardCache<double>&,
                                          const Matrix<double>&, GradientBundle<double>&);
template class IncrementalDecoder<float>;
template class IncrementalDecoder<double>;

}  // namespace ullm
