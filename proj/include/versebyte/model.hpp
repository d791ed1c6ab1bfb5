#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "versebyte/graph.hpp"
#include "versebyte/tokenizer.hpp"

namespace versebyte {

struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int enc_layers = 6;
  int dec_layers = 2;
  double dropout_rate = 0.1;
  int rel_pos_buckets = 32;
  int rel_pos_max_distance = 128;
  int vocab_size = ByteVocab::kSize;
  int max_seq_len = 512;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& json);

  bool operator==(const ModelConfig&) const = default;
};

// Bucket of a signed key-minus-query offset. Bidirectional mode spends half
// the buckets on positive offsets; small distances get exact buckets and the
// rest are spaced logarithmically up to max_distance.
int relative_position_bucket(int relative_position, bool bidirectional, int num_buckets, int max_distance);

struct ParameterSpec {
  enum class Init { kNormal, kOnes, kZeros };

  std::string name;
  Shape shape;
  Init init;
};

// Name, shape and initializer of every parameter in serialization order.
std::vector<ParameterSpec> parameter_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  const Tensor<T>& get(std::string_view name) const;
  std::size_t count() const;

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out{config, names, {}};
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

// Projections and embeddings ~ N(0, 1/d_model); norm gains 1; bias tables 0.
ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed);

// Binds a parameter set into a graph and builds encoder/decoder passes.
// A null dropout generator means inference: dropout is skipped.
template <typename T>
class Seq2Seq {
 public:
  Seq2Seq(Graph<T>& graph, const ModelParams<T>& params, Rng* dropout_rng = nullptr);
  // Uses leaves already on the graph, one per parameter_layout() entry.
  Seq2Seq(Graph<T>& graph, const ModelConfig& config, std::span<const Var<T>> parameters,
          Rng* dropout_rng = nullptr);

  // Encoder output [len(src), d_model]. `src_valid` marks real (non-pad)
  // positions; empty means all valid.
  Var<T> encode(std::span<const int> src_ids, std::span<const std::uint8_t> src_valid = {});
  // Logits [len(tgt_in), vocab_size].
  Var<T> decode(Var<T> memory, std::span<const std::uint8_t> src_valid, std::span<const int> tgt_in);

  std::span<const Var<T>> parameters() const { return vars_; }
  const ModelConfig& config() const { return config_; }

 private:
  struct AttentionWeights {
    Var<T> norm, q, k, v, o;
  };
  struct FeedForwardWeights {
    Var<T> norm, w_in, w_gate, w_out;
  };
  struct EncoderLayer {
    AttentionWeights self_attn;
    FeedForwardWeights ffn;
  };
  struct DecoderLayer {
    AttentionWeights self_attn;
    AttentionWeights cross_attn;
    FeedForwardWeights ffn;
  };

  Var<T> drop(Var<T> x);
  Var<T> attention_block(Var<T> x, std::optional<Var<T>> memory, const AttentionWeights& w, const AttentionMask& mask,
                         const std::optional<PositionBias<T>>& bias);
  Var<T> feed_forward_block(Var<T> x, const FeedForwardWeights& w);
  void check_ids(std::span<const int> ids, const char* what) const;
  void bind(std::span<const ParameterSpec> layout);

  Graph<T>& graph_;
  ModelConfig config_;
  Rng* dropout_rng_;
  std::vector<Var<T>> vars_;
  Var<T> embedding_;
  Var<T> encoder_bias_;
  Var<T> decoder_bias_;
  Var<T> encoder_final_norm_;
  Var<T> decoder_final_norm_;
  std::vector<EncoderLayer> encoder_layers_;
  std::vector<DecoderLayer> decoder_layers_;
};

// Inference-mode conveniences.
template <typename T>
Tensor<T> encoder_output(const ModelParams<T>& params, std::span<const int> src_ids,
                         std::span<const std::uint8_t> src_valid = {});
template <typename T>
Tensor<T> forward(const ModelParams<T>& params, std::span<const int> src_ids, std::span<const int> tgt_in,
                  std::span<const std::uint8_t> src_valid = {});

// Teacher-forced mean cross-entropy of one pair: decoder input is the start
// symbol followed by the target, labels are the target followed by eos.
template <typename T>
Var<T> sequence_loss(Seq2Seq<T>& model, std::span<const int> src_ids, std::span<const int> target_ids);

}  // namespace versebyte
