#include "versebyte/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "versebyte/error.hpp"

namespace versebyte {
namespace {

constexpr double kNormEps = 1e-6;

std::string layer_name(const char* stack, int index, const char* leaf) {
  return std::string(stack) + "." + std::to_string(index) + "." + leaf;
}

std::shared_ptr<const std::vector<int>> bucket_grid(std::size_t queries, std::size_t keys, bool bidirectional,
                                                    const ModelConfig& config) {
  auto grid = std::make_shared<std::vector<int>>(queries * keys);
  for (std::size_t i = 0; i < queries; ++i) {
    for (std::size_t j = 0; j < keys; ++j) {
      (*grid)[i * keys + j] = relative_position_bucket(static_cast<int>(j) - static_cast<int>(i), bidirectional,
                                                       config.rel_pos_buckets, config.rel_pos_max_distance);
    }
  }
  return grid;
}

}  // namespace

void ModelConfig::validate() const {
  const auto fail = [](const std::string& message) { throw FormatError("model config: " + message); };
  if (d_model < 1) fail("d_model must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff < 1) fail("d_ff must be positive");
  if (enc_layers < 1 || dec_layers < 1) fail("enc_layers and dec_layers must be at least 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (rel_pos_buckets < 4 || rel_pos_buckets % 2 != 0) fail("rel_pos_buckets must be even and at least 4");
  // The causal decoder's exact range is rel_pos_buckets / 2, which is the
  // tighter of the two bounds.
  if (rel_pos_max_distance * 2 <= rel_pos_buckets) fail("rel_pos_max_distance must exceed rel_pos_buckets / 2");
  if (vocab_size != ByteVocab::kSize) fail("vocab_size must be " + std::to_string(ByteVocab::kSize));
  if (max_seq_len < 1) fail("max_seq_len must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"enc_layers", enc_layers},
          {"dec_layers", dec_layers},
          {"dropout_rate", dropout_rate},
          {"rel_pos_buckets", rel_pos_buckets},
          {"rel_pos_max_distance", rel_pos_max_distance},
          {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& json) {
  if (!json.is_object()) throw FormatError("model config must be a JSON object");
  ModelConfig config;
  const std::map<std::string, int*> ints = {{"d_model", &config.d_model},
                                            {"n_heads", &config.n_heads},
                                            {"d_ff", &config.d_ff},
                                            {"enc_layers", &config.enc_layers},
                                            {"dec_layers", &config.dec_layers},
                                            {"rel_pos_buckets", &config.rel_pos_buckets},
                                            {"rel_pos_max_distance", &config.rel_pos_max_distance},
                                            {"vocab_size", &config.vocab_size},
                                            {"max_seq_len", &config.max_seq_len}};
  for (const auto& [key, value] : json.items()) {
    if (key == "dropout_rate") {
      if (!value.is_number()) throw FormatError("model." + key + ": expected a number");
      config.dropout_rate = value.get<double>();
    } else if (auto it = ints.find(key); it != ints.end()) {
      if (!value.is_number_integer()) throw FormatError("model." + key + ": expected an integer");
      *it->second = value.get<int>();
    } else {
      throw FormatError("model." + key + ": unknown field");
    }
  }
  config.validate();
  return config;
}

int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets, int max_distance) {
  int offset = 0;
  int buckets = num_buckets;
  long long distance = 0;
  if (bidirectional) {
    buckets /= 2;
    if (relative_position > 0) offset = buckets;
    distance = std::llabs(static_cast<long long>(relative_position));
  } else {
    distance = std::max(-static_cast<long long>(relative_position), 0LL);
  }
  const int max_exact = buckets / 2;
  if (distance < max_exact) return offset + static_cast<int>(distance);

  // The small slack keeps exact powers (e.g. distance == max_distance) from
  // rounding down to the previous bucket.
  const long double scaled = static_cast<long double>(max_exact) *
                             std::log(static_cast<long double>(distance) / max_exact) /
                             std::log(static_cast<long double>(max_distance) / max_exact);
  const long long large = max_exact + static_cast<long long>(std::floor(scaled + 1e-12L));
  return offset + static_cast<int>(std::min<long long>(buckets - 1, large));
}

std::vector<ParameterSpec> parameter_layout(const ModelConfig& config) {
  config.validate();
  using Init = ParameterSpec::Init;
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const Shape bias_shape{static_cast<std::size_t>(config.n_heads), static_cast<std::size_t>(config.rel_pos_buckets)};

  std::vector<ParameterSpec> layout;
  const auto attention = [&](const char* stack, int i, const char* prefix) {
    const std::string p(prefix);
    layout.push_back({layer_name(stack, i, (p + "_norm").c_str()), {d}, Init::kOnes});
    for (const char* proj : {".q", ".k", ".v", ".o"}) {
      layout.push_back({layer_name(stack, i, (p + proj).c_str()), {d, d}, Init::kNormal});
    }
  };
  const auto feed_forward = [&](const char* stack, int i) {
    layout.push_back({layer_name(stack, i, "ffn_norm"), {d}, Init::kOnes});
    layout.push_back({layer_name(stack, i, "ffn.w_in"), {d, ff}, Init::kNormal});
    layout.push_back({layer_name(stack, i, "ffn.w_gate"), {d, ff}, Init::kNormal});
    layout.push_back({layer_name(stack, i, "ffn.w_out"), {ff, d}, Init::kNormal});
  };

  layout.push_back({"shared.embedding", {static_cast<std::size_t>(config.vocab_size), d}, Init::kNormal});
  layout.push_back({"encoder.relative_bias", bias_shape, Init::kZeros});
  for (int i = 0; i < config.enc_layers; ++i) {
    attention("encoder", i, "self_attn");
    feed_forward("encoder", i);
  }
  layout.push_back({"encoder.final_norm", {d}, Init::kOnes});
  layout.push_back({"decoder.relative_bias", bias_shape, Init::kZeros});
  for (int i = 0; i < config.dec_layers; ++i) {
    attention("decoder", i, "self_attn");
    attention("decoder", i, "cross_attn");
    feed_forward("decoder", i);
  }
  layout.push_back({"decoder.final_norm", {d}, Init::kOnes});
  return layout;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& spec : parameter_layout(config)) {
    std::size_t n = 1;
    for (auto e : spec.shape) n *= e;
    total += n;
  }
  return total;
}

template <typename T>
const Tensor<T>& ModelParams<T>::get(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return tensors[i];
  }
  throw Error("no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.size();
  return total;
}

ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed) {
  const auto layout = parameter_layout(config);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  Rng rng(seed);
  ModelParams<float> params{config, {}, {}};
  for (const auto& spec : layout) {
    Tensor<float> tensor(spec.shape);
    switch (spec.init) {
      case ParameterSpec::Init::kNormal:
        for (auto& x : tensor.values()) x = static_cast<float>(rng.normal() * stddev);
        break;
      case ParameterSpec::Init::kOnes:
        for (auto& x : tensor.values()) x = 1.0f;
        break;
      case ParameterSpec::Init::kZeros:
        break;
    }
    params.names.push_back(spec.name);
    params.tensors.push_back(std::move(tensor));
  }
  return params;
}

// ---------------------------------------------------------------------------

template <typename T>
Seq2Seq<T>::Seq2Seq(Graph<T>& graph, const ModelParams<T>& params, Rng* dropout_rng)
    : graph_(graph), config_(params.config), dropout_rng_(dropout_rng) {
  const auto layout = parameter_layout(config_);
  if (layout.size() != params.tensors.size() || params.names.size() != params.tensors.size()) {
    throw ShapeError("parameter set does not match its config layout");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params.names[i]) {
      throw ShapeError("parameter '" + params.names[i] + "' found where '" + layout[i].name + "' was expected");
    }
    vars_.push_back(graph_.parameter(params.tensors[i]));
  }
  bind(layout);
}

template <typename T>
Seq2Seq<T>::Seq2Seq(Graph<T>& graph, const ModelConfig& config, std::span<const Var<T>> parameters,
                    Rng* dropout_rng)
    : graph_(graph), config_(config), dropout_rng_(dropout_rng), vars_(parameters.begin(), parameters.end()) {
  const auto layout = parameter_layout(config_);
  if (layout.size() != vars_.size()) throw ShapeError("parameter count does not match config layout");
  bind(layout);
}

template <typename T>
void Seq2Seq<T>::bind(std::span<const ParameterSpec> layout) {
  std::map<std::string, Var<T>, std::less<>> by_name;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (vars_[i].graph != &graph_) throw Error("parameter leaf belongs to another graph");
    if (layout[i].shape != vars_[i].shape()) {
      throw ShapeError("parameter '" + layout[i].name + "' has shape " + shape_string(vars_[i].shape()) +
                       ", expected " + shape_string(layout[i].shape));
    }
    by_name.emplace(layout[i].name, vars_[i]);
  }
  const auto at = [&](const std::string& name) { return by_name.at(name); };
  const auto attention = [&](const char* stack, int i, const std::string& p) {
    return AttentionWeights{at(layer_name(stack, i, (p + "_norm").c_str())), at(layer_name(stack, i, (p + ".q").c_str())),
                            at(layer_name(stack, i, (p + ".k").c_str())), at(layer_name(stack, i, (p + ".v").c_str())),
                            at(layer_name(stack, i, (p + ".o").c_str()))};
  };
  const auto feed_forward = [&](const char* stack, int i) {
    return FeedForwardWeights{at(layer_name(stack, i, "ffn_norm")), at(layer_name(stack, i, "ffn.w_in")),
                              at(layer_name(stack, i, "ffn.w_gate")), at(layer_name(stack, i, "ffn.w_out"))};
  };

  embedding_ = at("shared.embedding");
  encoder_bias_ = at("encoder.relative_bias");
  decoder_bias_ = at("decoder.relative_bias");
  encoder_final_norm_ = at("encoder.final_norm");
  decoder_final_norm_ = at("decoder.final_norm");
  for (int i = 0; i < config_.enc_layers; ++i) {
    encoder_layers_.push_back({attention("encoder", i, "self_attn"), feed_forward("encoder", i)});
  }
  for (int i = 0; i < config_.dec_layers; ++i) {
    decoder_layers_.push_back(
        {attention("decoder", i, "self_attn"), attention("decoder", i, "cross_attn"), feed_forward("decoder", i)});
  }
}

template <typename T>
Var<T> Seq2Seq<T>::drop(Var<T> x) {
  if (!dropout_rng_) return x;
  return dropout(x, config_.dropout_rate, *dropout_rng_);
}

template <typename T>
Var<T> Seq2Seq<T>::attention_block(Var<T> x, std::optional<Var<T>> memory, const AttentionWeights& w, const AttentionMask& mask,
                                   const std::optional<PositionBias<T>>& bias) {
  const Var<T> h = rms_norm(x, w.norm, T(kNormEps));
  // Cross-attention reads keys and values from the encoder output, which is
  // already normalized.
  const Var<T> source = memory.value_or(h);
  const Var<T> q = matmul(h, w.q);
  const Var<T> k = matmul(source, w.k);
  const Var<T> v = matmul(source, w.v);
  return matmul(attention(q, k, v, config_.n_heads, mask, bias), w.o);
}

template <typename T>
Var<T> Seq2Seq<T>::feed_forward_block(Var<T> x, const FeedForwardWeights& w) {
  const Var<T> h = rms_norm(x, w.norm, T(kNormEps));
  const Var<T> gated = mul(gelu(matmul(h, w.w_gate)), matmul(h, w.w_in));
  return matmul(gated, w.w_out);
}

template <typename T>
void Seq2Seq<T>::check_ids(std::span<const int> ids, const char* what) const {
  if (ids.empty()) throw ShapeError(std::string(what) + " sequence is empty");
  if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw RangeError(std::string(what) + " length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw RangeError(std::string(what) + " token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

template <typename T>
Var<T> Seq2Seq<T>::encode(std::span<const int> src_ids, std::span<const std::uint8_t> src_valid) {
  check_ids(src_ids, "source");
  if (!src_valid.empty() && src_valid.size() != src_ids.size()) {
    throw ShapeError("source mask length does not match source length");
  }
  const std::size_t n = src_ids.size();
  AttentionMask mask{{src_valid.begin(), src_valid.end()}, false};
  const std::optional<PositionBias<T>> bias = PositionBias<T>{encoder_bias_, bucket_grid(n, n, true, config_)};

  Var<T> x = drop(embedding(embedding_, src_ids));
  for (const auto& layer : encoder_layers_) {
    x = add(x, drop(attention_block(x, std::nullopt, layer.self_attn, mask, bias)));
    x = add(x, drop(feed_forward_block(x, layer.ffn)));
  }
  return drop(rms_norm(x, encoder_final_norm_, T(kNormEps)));
}

template <typename T>
Var<T> Seq2Seq<T>::decode(Var<T> memory, std::span<const std::uint8_t> src_valid, std::span<const int> tgt_in) {
  check_ids(tgt_in, "target");
  const std::size_t n = tgt_in.size();
  const AttentionMask self_mask{{}, true};
  const AttentionMask cross_mask{{src_valid.begin(), src_valid.end()}, false};
  const std::optional<PositionBias<T>> bias = PositionBias<T>{decoder_bias_, bucket_grid(n, n, false, config_)};
  const std::optional<PositionBias<T>> no_bias;

  Var<T> y = drop(embedding(embedding_, tgt_in));
  for (const auto& layer : decoder_layers_) {
    y = add(y, drop(attention_block(y, std::nullopt, layer.self_attn, self_mask, bias)));
    y = add(y, drop(attention_block(y, memory, layer.cross_attn, cross_mask, no_bias)));
    y = add(y, drop(feed_forward_block(y, layer.ffn)));
  }
  y = drop(rms_norm(y, decoder_final_norm_, T(kNormEps)));
  return matmul_transposed(y, embedding_);
}

template <typename T>
Tensor<T> encoder_output(const ModelParams<T>& params, std::span<const int> src_ids,
                         std::span<const std::uint8_t> src_valid) {
  Graph<T> graph(false);
  Seq2Seq<T> model(graph, params);
  return model.encode(src_ids, src_valid).value();
}

template <typename T>
Tensor<T> forward(const ModelParams<T>& params, std::span<const int> src_ids, std::span<const int> tgt_in,
                  std::span<const std::uint8_t> src_valid) {
  Graph<T> graph(false);
  Seq2Seq<T> model(graph, params);
  const Var<T> memory = model.encode(src_ids, src_valid);
  return model.decode(memory, src_valid, tgt_in).value();
}

template <typename T>
Var<T> sequence_loss(Seq2Seq<T>& model, std::span<const int> src_ids, std::span<const int> target_ids) {
  std::vector<int> tgt_in{ByteVocab::kPad};
  tgt_in.insert(tgt_in.end(), target_ids.begin(), target_ids.end());
  std::vector<int> labels(target_ids.begin(), target_ids.end());
  labels.push_back(ByteVocab::kEos);
  const Var<T> memory = model.encode(src_ids);
  return cross_entropy(model.decode(memory, {}, tgt_in), std::span<const int>(labels), ByteVocab::kPad);
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class Seq2Seq<float>;
template class Seq2Seq<double>;
template Tensor<float> encoder_output(const ModelParams<float>&, std::span<const int>, std::span<const std::uint8_t>);
template Tensor<double> encoder_output(const ModelParams<double>&, std::span<const int>, std::span<const std::uint8_t>);
template Tensor<float> forward(const ModelParams<float>&, std::span<const int>, std::span<const int>,
                               std::span<const std::uint8_t>);
template Tensor<double> forward(const ModelParams<double>&, std::span<const int>, std::span<const int>,
                                std::span<const std::uint8_t>);
template Var<float> sequence_loss(Seq2Seq<float>&, std::span<const int>, std::span<const int>);
template Var<double> sequence_loss(Seq2Seq<double>&, std::span<const int>, std::span<const int>);

}  // namespace versebyte
