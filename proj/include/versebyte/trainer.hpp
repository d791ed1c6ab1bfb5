#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "versebyte/corpus.hpp"
#include "versebyte/model.hpp"
#include "versebyte/rng.hpp"

namespace versebyte {

struct TrainConfig {
  double learning_rate = 2e-4;
  double scheduler_factor = 0.5;
  int scheduler_patience = 10;
  int batch_size = 48;
  int max_epochs = 500;
  int early_stop_patience = 20;
  double min_lr = 1e-6;
  double grad_clip_norm = 1.0;
  // Absolute decrease in validation loss that counts as an improvement.
  double improvement_threshold = 1e-6;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& json);

  bool operator==(const TrainConfig&) const = default;
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  std::vector<Tensor<float>> first_moment;
  std::vector<Tensor<float>> second_moment;
  std::int64_t step = 0;
};

// One bias-corrected Adam update of `params` in place. Moments are created
// on first use.
void adam_update(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
                 double learning_rate);

// Scales `grads` in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::vector<Tensor<float>>& grads, double max_norm);

struct TrainState {
  int epoch = 0;
  double current_lr = 0.0;
  AdamState adam;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  int epochs_since_lr_drop = 0;
  // Drives dropout masks.
  Rng rng;

  static TrainState initial(const TrainConfig& config);
};

// Tokenized pair: source carries the target-language tag and eos; target has
// no eos (it is appended to the labels).
struct TrainingExample {
  TokenSequence source;
  TokenSequence target;
};

TrainingExample tokenize_example(const ParallelExample& example);

// Padded mini-batch. Rows are padded with pad_id to the batch maximum;
// masks are 1 on real positions.
struct Batch {
  std::vector<std::size_t> example_index;
  std::vector<TokenSequence> source;          // [batch, max_source_len]
  std::vector<std::vector<std::uint8_t>> source_mask;
  std::vector<TokenSequence> decoder_input;   // start symbol + target
  std::vector<TokenSequence> labels;          // target + eos
  std::vector<std::vector<std::uint8_t>> loss_mask;

  std::size_t size() const { return source.size(); }
  std::size_t pad_tokens() const;
  std::size_t label_tokens() const;
};

struct BatchPlan {
  std::vector<Batch> batches;
  // Examples whose source or labels exceed max_seq_len.
  std::size_t skipped = 0;
};

BatchPlan make_batches(const std::vector<TrainingExample>& examples, int batch_size, int max_seq_len,
                       std::uint64_t seed, int epoch);

// Token-mean teacher-forced cross-entropy over the batch. Dropout follows the
// model's generator.
Var<float> batch_loss(Seq2Seq<float>& model, const Batch& batch);

// Computes the loss, clips, and applies one Adam step at state.current_lr.
// Throws NumericError on a non-finite loss.
double train_step(ModelParams<float>& params, TrainState& state, const Batch& batch, const TrainConfig& config,
                  int batch_id = 0);

// Token-weighted mean loss with dropout off.
double evaluate_loss(const ModelParams<float>& params, const std::vector<Batch>& batches);

void scheduler_step(TrainState& state, double val_loss, const TrainConfig& config);

enum class StopReason { kNone, kEarlyStop, kMaxEpochs };
StopReason early_stop_check(const TrainState& state, const TrainConfig& config);
std::string to_string(StopReason reason);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // after this epoch's scheduler step
  double wall_time_s = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;
  std::string best_checkpoint;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double initial_val_loss = 0.0;
  std::size_t skipped_train = 0;
  std::size_t skipped_validation = 0;

  nlohmann::json to_json() const;
};

struct FitOptions {
  // Where to write the best-validation checkpoint; empty skips writing.
  std::filesystem::path checkpoint_path;
  // Receives `epoch=<n> train_loss=<f> val_loss=<f> lr=<f>` lines.
  std::ostream* progress = nullptr;
  // Replaces the computed validation loss; called with epoch 0 for the
  // pre-training baseline.
  std::function<double(int epoch)> validation_override;
};

struct FitResult {
  TrainReport report;
  ModelParams<float> best_params;
  ModelParams<float> final_params;
};

// Parameters are initialized from train_config.seed.
FitResult fit(const std::vector<ParallelExample>& train, const std::vector<ParallelExample>& validation,
              const ModelConfig& model_config, const TrainConfig& train_config, const FitOptions& options = {});

// Shortest decimal text that round-trips the value.
std::string format_number(double value);

}  // namespace versebyte
