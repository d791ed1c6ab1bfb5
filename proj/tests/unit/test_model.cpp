#include <doctest.h>

#include <cmath>

#include "../support/oracles.hpp"
#include "versebyte/error.hpp"
#include "versebyte/grad_check.hpp"
#include "versebyte/model.hpp"
#include "versebyte/rng.hpp"

using namespace versebyte;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.dropout_rate = 0.0;
  c.max_seq_len = 64;
  return c;
}

std::vector<int> random_ids(Rng& rng, std::size_t n) {
  std::vector<int> ids(n);
  for (auto& id : ids) id = 3 + static_cast<int>(rng.below(256));
  return ids;
}

}  // namespace

TEST_CASE("parameter count matches the hand-derived shape sum") {
  ModelConfig c;
  c.enc_layers = 2;
  c.dec_layers = 2;
  // embedding 259*64 = 16576; two bias tables 2*4*32 = 256
  // encoder layer: 2 norms (128) + 4 proj (16384) + ffn (3*8192) = 41088
  // decoder layer: 3 norms (192) + 8 proj (32768) + ffn (24576) = 57536
  // final norms 128
  CHECK(parameter_count(c) == 214208);
  CHECK(init_params(c, 0).count() == 214208);
}

TEST_CASE("init is deterministic with unit gains and zero bias") {
  const auto c = tiny_config();
  const auto a = init_params(c, 42);
  const auto b = init_params(c, 42);
  CHECK(a == b);
  CHECK_FALSE(a == init_params(c, 43));
  for (std::size_t i = 0; i < a.names.size(); ++i) {
    const auto& name = a.names[i];
    if (name.find("norm") != std::string::npos) {
      for (float x : a.tensors[i].values()) CHECK(x == 1.0f);
    }
    if (name.find("relative_bias") != std::string::npos) {
      for (float x : a.tensors[i].values()) CHECK(x == 0.0f);
    }
  }
  const auto& emb = a.get("shared.embedding");
  double sq = 0;
  for (float x : emb.values()) sq += double(x) * x;
  CHECK(std::sqrt(sq / double(emb.size())) == doctest::Approx(1.0 / 4.0).epsilon(0.05));

  ModelConfig bad = c;
  bad.n_heads = 3;
  CHECK_THROWS_AS(init_params(bad, 0), FormatError);
}

TEST_CASE("config json round trip and errors") {
  auto c = tiny_config();
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK(ModelConfig::from_json(nlohmann::json::object()) == ModelConfig{});
  CHECK_THROWS_AS(ModelConfig::from_json({{"d_modle", 3}}), FormatError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"d_model", "x"}}), FormatError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"vocab_size", 300}}), FormatError);
}

TEST_CASE("bucket examples and exact oracle") {
  CHECK(relative_position_bucket(0, true, 32, 128) == 0);
  CHECK(relative_position_bucket(1, true, 32, 128) == 17);
  CHECK(relative_position_bucket(-500, false, 32, 128) == 31);
  for (int rel = -300; rel <= 300; ++rel) {
    CHECK(relative_position_bucket(rel, true, 32, 128) == oracle::relative_bucket(rel, true, 32, 128));
    CHECK(relative_position_bucket(rel, false, 32, 128) == oracle::relative_bucket(rel, false, 32, 128));
    CHECK(relative_position_bucket(rel, true, 8, 20) == oracle::relative_bucket(rel, true, 8, 20));
  }
}

TEST_CASE("forward shape and input checks") {
  const auto c = tiny_config();
  const auto p = init_params(c, 1);
  Rng rng(2);
  const auto src = random_ids(rng, 9);
  const auto tgt = random_ids(rng, 5);
  const auto logits = forward(p, src, tgt);
  CHECK(logits.shape() == Shape{5, 259});

  const auto long_src = random_ids(rng, 65);
  CHECK_THROWS_AS(forward(p, long_src, tgt), RangeError);
  std::vector<int> bad = tgt;
  bad[0] = 259;
  CHECK_THROWS_AS(forward(p, src, bad), RangeError);
  CHECK_THROWS_AS(forward(p, std::vector<int>{}, tgt), ShapeError);
}

TEST_CASE("decoder is causal") {
  const auto c = tiny_config();
  auto p = init_params(c, 3);
  Rng rng(4);
  for (auto& t : p.tensors) {
    for (auto& x : t.values()) x += 0.05f * static_cast<float>(rng.normal());
  }
  const auto src = random_ids(rng, 7);
  auto tgt = random_ids(rng, 8);
  const auto base = forward(p, src, tgt);
  for (int trial = 0; trial < 10; ++trial) {
    const auto t = rng.below(tgt.size());
    auto changed = tgt;
    for (std::size_t j = t + 1; j < changed.size(); ++j) changed[j] = 3 + static_cast<int>(rng.below(256));
    const auto out = forward(p, src, changed);
    for (std::size_t r = 0; r <= t; ++r) {
      const auto a = base.row(r);
      const auto b = out.row(r);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("pad positions do not leak into the encoder") {
  const auto c = tiny_config();
  const auto p = init_params(c, 5);
  Rng rng(6);
  auto src = random_ids(rng, 10);
  const std::vector<std::uint8_t> valid = {1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  const auto base = encoder_output(p, src, valid);
  for (int trial = 0; trial < 5; ++trial) {
    for (std::size_t j = 6; j < src.size(); ++j) src[j] = static_cast<int>(rng.below(259));
    const auto out = encoder_output(p, src, valid);
    for (std::size_t r = 0; r < 6; ++r) {
      const auto a = base.row(r);
      const auto b = out.row(r);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("full loss gradient on a small model") {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.dropout_rate = 0.0;
  auto p = init_params(c, 7).cast<double>();
  Rng rng(3);
  for (auto& t : p.tensors) {
    for (auto& x : t.values()) x += 0.1 * rng.normal();
  }
  const auto src = encode(">>deu<< abc", true);
  const auto tgt = encode("xyz", false);
  const Objective f = [&](Graph<double>& g, std::span<const Var<double>> vars) {
    Seq2Seq<double> m(g, c, vars);
    return sequence_loss(m, src, tgt);
  };
  const auto result = grad_check(f, p.tensors);
  CHECK(result.coordinates == parameter_count(c));
  CHECK(result.max_relative_error < 1e-4);
}
