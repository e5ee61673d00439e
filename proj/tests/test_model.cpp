#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ullm/language_model.hpp"
#include "ullm/model.hpp"

using namespace ullm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.vocab_size = 7;
  c.max_len = 12;
  c.seed = 5;
  return c;
}

std::vector<TokenId> some_ids(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

template <typename Real>
void perturb(Parameters<Real>& p, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : p.values) v += static_cast<Real>(scale * rng.normal());
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.d_model = 10;
  c.n_heads = 4;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("d_model"));
  c = small_config();
  c.vocab_size = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("layout covers every tensor exactly once") {
  const ModelConfig c = small_config();
  const ParameterLayout l = ParameterLayout::make(c);
  const std::size_t d = c.d_model, f = c.d_ffn, V = c.vocab_size;
  const std::size_t per_layer = 2 * d + (d * d + d) + d * d + (d * d + d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  CHECK(l.total == V * d + c.max_len * d + c.n_layers * per_layer + 2 * d + d * V + V);
  CHECK(l.name_of(0) == "token_embedding");
  CHECK(l.name_of(l.layers[1].w_query) == "layer1.w_query");
  CHECK(l.name_of(l.total - 1) == "b_output");
}

TEST_CASE("initialization is deterministic and seed dependent") {
  const ModelConfig c = small_config();
  const auto a = init_parameters<float>(c);
  const auto b = init_parameters<float>(c);
  CHECK(a.values == b.values);
  ModelConfig c2 = c;
  c2.seed = 6;
  CHECK(init_parameters<float>(c2).values != a.values);

  // Norm gains start at one and biases at zero.
  const auto& L = a.layout.layers[0];
  for (std::size_t i = 0; i < c.d_model; ++i) {
    CHECK(a.values[L.ln1_gain + i] == 1.0f);
    CHECK(a.values[L.ln1_bias + i] == 0.0f);
    CHECK(a.values[a.layout.final_gain + i] == 1.0f);
  }
  double sq = 0;
  const std::size_t n = c.vocab_size * c.d_model;
  for (std::size_t i = 0; i < n; ++i) {
    sq += a.values[i] * a.values[i];
  }
  CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.35));
}

TEST_CASE("softmax and log_softmax") {
  VectorD x(3);
  x << 1.0, 2.0, 3.0;
  const VectorD p = softmax(x);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(p(0) == doctest::Approx(std::exp(1.0) / z));
  CHECK(p(2) == doctest::Approx(std::exp(3.0) / z));
  CHECK(p.sum() == doctest::Approx(1.0));

  VectorD big(2);
  big << 1000.0, 1000.0;
  CHECK(softmax(big)(0) == doctest::Approx(0.5));
  CHECK(log_softmax(big)(1) == doctest::Approx(std::log(0.5)));

  VectorD bad(2);
  bad << 0.0, std::nan("");
  CHECK_THROWS_AS(softmax(bad), Error);

  VectorD ties(4);
  ties << 0.0, 2.0, 2.0, 1.0;
  CHECK(argmax(ties) == 1);
}

TEST_CASE("forward shape, purity and input checks") {
  const auto p = init_parameters<double>(small_config());
  const auto ids = some_ids(9, 7, 1);
  const auto r1 = forward(p, std::span<const TokenId>(ids));
  const auto r2 = forward(p, std::span<const TokenId>(ids));
  CHECK(r1.logits.rows() == 9);
  CHECK(r1.logits.cols() == 7);
  CHECK(r1.logits == r2.logits);
  CHECK_THROWS(forward(p, std::span<const TokenId>(some_ids(13, 7, 1))));
  std::vector<TokenId> bad = {1, 7};
  CHECK_THROWS(forward(p, std::span<const TokenId>(bad)));
}

TEST_CASE("causality: changing a later token never changes earlier logits") {
  auto p = init_parameters<double>(small_config());
  perturb(p, 0.3, 2);
  auto ids = some_ids(10, 7, 3);
  const MatrixD before = forward(p, std::span<const TokenId>(ids)).logits;
  for (std::size_t j = 0; j < ids.size(); ++j) {
    auto changed = ids;
    changed[j] = static_cast<TokenId>((changed[j] + 1) % 7);
    const MatrixD after = forward(p, std::span<const TokenId>(changed)).logits;
    for (std::size_t t = 0; t < j; ++t) CHECK((after.row(t) - before.row(t)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((after.row(j) - before.row(j)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("backward: zero upstream gives zero gradient") {
  const auto p = init_parameters<double>(small_config());
  const auto ids = some_ids(6, 7, 4);
  const auto r = forward(p, std::span<const TokenId>(ids));
  const MatrixD zero = MatrixD::Zero(6, 7);
  const auto g = backward(p, r.cache, zero);
  for (double v : g.values) CHECK(v == 0.0);
}

TEST_CASE("backward matches central differences of a linear functional") {
  auto p = init_parameters<double>(small_config());
  perturb(p, 0.2, 7);
  const auto ids = some_ids(8, 7, 8);
  Rng rng(9);
  MatrixD weights(8, 7);
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = rng.normal();
  auto loss = [&](const Parameters<double>& q) {
    return (forward(q, std::span<const TokenId>(ids)).logits.array() * weights.array()).sum();
  };
  const auto g = backward(p, forward(p, std::span<const TokenId>(ids)).cache, weights);
  const double h = 1e-5;
  double worst = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t i = static_cast<std::size_t>(rng.below(p.size()));
    auto plus = p, minus = p;
    plus.values[i] += h;
    minus.values[i] -= h;
    const double fd = (loss(plus) - loss(minus)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g.values[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("incremental decoder matches full forward") {
  auto p = init_parameters<double>(small_config());
  perturb(p, 0.2, 10);
  const auto ids = some_ids(12, 7, 11);
  const MatrixD full = forward(p, std::span<const TokenId>(ids)).logits;
  IncrementalDecoder<double> dec(p);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    dec.append(ids[t]);
    CHECK((dec.next_logits().transpose() - full.row(t)).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS(dec.append(0));

  const TransformerLM<double> lm(p);
  auto state = lm.start(std::span<const TokenId>(ids.data(), 4));
  auto fork = state->clone();
  state->append(ids[4]);
  CHECK((state->next_logits().transpose() - full.row(4)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((fork->next_logits().transpose() - full.row(3)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(fork->length() == 4);

  RecomputeState slow(lm);
  for (std::size_t t = 0; t < 5; ++t) slow.append(ids[t]);
  CHECK((slow.next_logits().transpose() - full.row(4)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("float and double forward agree") {
  auto pf = init_parameters<float>(small_config());
  const auto pd = cast_parameters<double>(pf);
  const auto ids = some_ids(10, 7, 12);
  const MatrixD a = forward(pf, std::span<const TokenId>(ids)).logits.cast<double>();
  const MatrixD b = forward(pd, std::span<const TokenId>(ids)).logits;
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("checkpoint round trip and corruption detection") {
  auto p = init_parameters<float>(small_config());
  perturb(p, 0.1, 13);
  const std::string bytes = serialize_checkpoint(p);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.config == p.config);
  CHECK(back.values == p.values);
  CHECK(serialize_checkpoint(back) == bytes);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  try {
    deserialize_checkpoint(flipped);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::format);
    CHECK(std::string(e.what()).find("CRC") != std::string::npos);
  }
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  CHECK_THROWS_AS(deserialize_checkpoint("JUNKJUNKJUNK"), Error);

  const auto dir = std::filesystem::temp_directory_path() / "ullm_model_ckpt";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "c.bin").string();
  save_checkpoint(path, p);
  CHECK(load_checkpoint(path).values == p.values);
  try {
    load_checkpoint((dir / "missing.bin").string());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::io);
  }
}
