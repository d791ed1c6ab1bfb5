#include "versebyte/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "versebyte/checkpoint.hpp"
#include "versebyte/error.hpp"
#include "versebyte/tokenizer.hpp"

namespace versebyte {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t count_ones(const std::vector<std::uint8_t>& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

}  // namespace

void TrainConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw FormatError("train config: " + msg); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0)) fail("scheduler_factor must lie in (0, 1)");
  if (scheduler_patience < 1) fail("scheduler_patience must be at least 1");
  if (early_stop_patience < 1) fail("early_stop_patience must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (max_epochs < 1) fail("max_epochs must be at least 1");
  if (!(min_lr >= 0.0 && min_lr <= learning_rate)) fail("min_lr must lie in [0, learning_rate]");
  if (!(grad_clip_norm > 0.0) || !std::isfinite(grad_clip_norm)) fail("grad_clip_norm must be positive");
  if (!(improvement_threshold >= 0.0)) fail("improvement_threshold must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"scheduler_factor", scheduler_factor},
          {"scheduler_patience", scheduler_patience},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"early_stop_patience", early_stop_patience},
          {"min_lr", min_lr},
          {"grad_clip_norm", grad_clip_norm},
          {"improvement_threshold", improvement_threshold},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& json) {
  if (!json.is_object()) throw FormatError("train config must be a JSON object");
  TrainConfig config;
  const std::map<std::string, double*> reals = {{"learning_rate", &config.learning_rate},
                                                {"scheduler_factor", &config.scheduler_factor},
                                                {"min_lr", &config.min_lr},
                                                {"grad_clip_norm", &config.grad_clip_norm},
                                                {"improvement_threshold", &config.improvement_threshold}};
  const std::map<std::string, int*> ints = {{"scheduler_patience", &config.scheduler_patience},
                                            {"batch_size", &config.batch_size},
                                            {"max_epochs", &config.max_epochs},
                                            {"early_stop_patience", &config.early_stop_patience}};
  for (const auto& [key, value] : json.items()) {
    if (auto r = reals.find(key); r != reals.end()) {
      if (!value.is_number()) throw FormatError("train." + key + ": expected a number");
      *r->second = value.get<double>();
    } else if (auto i = ints.find(key); i != ints.end()) {
      if (!value.is_number_integer()) throw FormatError("train." + key + ": expected an integer");
      *i->second = value.get<int>();
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) throw FormatError("train.seed: expected a non-negative integer");
      config.seed = value.get<std::uint64_t>();
    } else {
      throw FormatError("train." + key + ": unknown field");
    }
  }
  config.validate();
  return config;
}

void adam_update(std::vector<Tensor<float>>& params, const std::vector<Tensor<float>>& grads, AdamState& state,
                 double learning_rate) {
  if (params.size() != grads.size()) throw ShapeError("adam: parameter and gradient counts differ");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.shape());
      state.second_moment.emplace_back(p.shape());
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double correction2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) throw ShapeError("adam: gradient shape mismatch");
    auto p = params[i].values();
    auto m = state.first_moment[i].values();
    auto v = state.second_moment[i].values();
    const auto g = grads[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = AdamState::kBeta1 * m[k] + (1.0 - AdamState::kBeta1) * gk;
      const double vk = AdamState::kBeta2 * v[k] + (1.0 - AdamState::kBeta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      const double step = learning_rate * (mk / correction1) / (std::sqrt(vk / correction2) + AdamState::kEpsilon);
      p[k] = static_cast<float>(p[k] - step);
    }
  }
}

double clip_global_norm(std::vector<Tensor<float>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (float x : g.values()) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads) {
      for (float& x : g.values()) x = static_cast<float>(x * factor);
    }
  }
  return norm;
}

TrainState TrainState::initial(const TrainConfig& config) {
  TrainState state;
  state.current_lr = config.learning_rate;
  state.rng = Rng(splitmix64(config.seed ^ 0x64726f706f7574ULL));
  return state;
}

TrainingExample tokenize_example(const ParallelExample& example) {
  return {encode(tag_source(example.source_text, example.target_lang), true), encode(example.target_text, false)};
}

std::size_t Batch::pad_tokens() const {
  std::size_t pads = 0;
  for (const auto& m : source_mask) pads += m.size() - count_ones(m);
  for (const auto& m : loss_mask) pads += m.size() - count_ones(m);
  return pads;
}

std::size_t Batch::label_tokens() const {
  std::size_t n = 0;
  for (const auto& m : loss_mask) n += count_ones(m);
  return n;
}

BatchPlan make_batches(const std::vector<TrainingExample>& examples, int batch_size, int max_seq_len,
                       std::uint64_t seed, int epoch) {
  if (examples.empty()) throw Error("make_batches: no examples");
  if (batch_size < 1) throw Error("make_batches: batch_size must be at least 1");
  BatchPlan plan;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    const auto limit = static_cast<std::size_t>(max_seq_len);
    if (e.source.size() > limit || e.target.size() + 1 > limit) {
      ++plan.skipped;
    } else {
      order.push_back(i);
    }
  }
  Rng rng(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(epoch)));
  rng.shuffle(std::span<std::size_t>(order));

  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    std::size_t src_len = 0;
    std::size_t tgt_len = 0;
    for (std::size_t k = start; k < end; ++k) {
      src_len = std::max(src_len, examples[order[k]].source.size());
      tgt_len = std::max(tgt_len, examples[order[k]].target.size() + 1);
    }
    Batch batch;
    for (std::size_t k = start; k < end; ++k) {
      const auto& e = examples[order[k]];
      batch.example_index.push_back(order[k]);

      TokenSequence src(src_len, ByteVocab::kPad);
      std::copy(e.source.begin(), e.source.end(), src.begin());
      std::vector<std::uint8_t> src_mask(src_len, 0);
      std::fill_n(src_mask.begin(), e.source.size(), std::uint8_t{1});

      TokenSequence din(tgt_len, ByteVocab::kPad);
      std::copy(e.target.begin(), e.target.end(), din.begin() + 1);
      TokenSequence labels(tgt_len, ByteVocab::kPad);
      std::copy(e.target.begin(), e.target.end(), labels.begin());
      labels[e.target.size()] = ByteVocab::kEos;
      std::vector<std::uint8_t> loss_mask(tgt_len, 0);
      std::fill_n(loss_mask.begin(), e.target.size() + 1, std::uint8_t{1});

      batch.source.push_back(std::move(src));
      batch.source_mask.push_back(std::move(src_mask));
      batch.decoder_input.push_back(std::move(din));
      batch.labels.push_back(std::move(labels));
      batch.loss_mask.push_back(std::move(loss_mask));
    }
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

Var<float> batch_loss(Seq2Seq<float>& model, const Batch& batch) {
  if (batch.size() == 0) throw Error("batch_loss: empty batch");
  // Pads sit at the end of every row and are masked anyway, so each row is
  // run at its true length; the result is the same and cheaper.
  std::vector<Var<float>> logits;
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t src_len = count_ones(batch.source_mask[i]);
    const std::size_t tgt_len = count_ones(batch.loss_mask[i]);
    const std::span<const int> src(batch.source[i].data(), src_len);
    const std::span<const int> din(batch.decoder_input[i].data(), tgt_len);
    const Var<float> memory = model.encode(src);
    logits.push_back(model.decode(memory, {}, din));
    labels.insert(labels.end(), batch.labels[i].begin(), batch.labels[i].begin() + static_cast<long>(tgt_len));
  }
  const Var<float> all = logits.size() == 1 ? logits.front() : concat_rows(std::span<const Var<float>>(logits));
  return cross_entropy(all, std::span<const int>(labels), ByteVocab::kPad);
}

double train_step(ModelParams<float>& params, TrainState& state, const Batch& batch, const TrainConfig& config,
                  int batch_id) {
  Graph<float> graph(true);
  Rng* dropout_rng = params.config.dropout_rate > 0.0 ? &state.rng : nullptr;
  Seq2Seq<float> model(graph, params, dropout_rng);
  const Var<float> loss = batch_loss(model, batch);
  const double value = loss.value()[0];
  if (!std::isfinite(value)) {
    throw NumericError("non-finite loss at epoch " + std::to_string(state.epoch) + ", batch " +
                       std::to_string(batch_id));
  }
  graph.backward(loss);
  std::vector<Tensor<float>> grads;
  grads.reserve(params.tensors.size());
  for (const auto& v : model.parameters()) grads.push_back(graph.grad(v));
  clip_global_norm(grads, config.grad_clip_norm);
  adam_update(params.tensors, grads, state.adam, state.current_lr);
  return value;
}

double evaluate_loss(const ModelParams<float>& params, const std::vector<Batch>& batches) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batches) {
    Graph<float> graph(false);
    Seq2Seq<float> model(graph, params);
    const std::size_t n = batch.label_tokens();
    total += static_cast<double>(batch_loss(model, batch).value()[0]) * static_cast<double>(n);
    tokens += n;
  }
  if (tokens == 0) throw Error("evaluate_loss: no label tokens");
  return total / static_cast<double>(tokens);
}

void scheduler_step(TrainState& state, double val_loss, const TrainConfig& config) {
  if (val_loss < state.best_val_loss - config.improvement_threshold) {
    state.best_val_loss = val_loss;
    state.epochs_since_best = 0;
    state.epochs_since_lr_drop = 0;
  } else {
    ++state.epochs_since_best;
    ++state.epochs_since_lr_drop;
  }
  if (state.epochs_since_lr_drop > config.scheduler_patience) {
    state.current_lr = std::max(config.min_lr, state.current_lr * config.scheduler_factor);
    state.epochs_since_lr_drop = 0;
  }
}

StopReason early_stop_check(const TrainState& state, const TrainConfig& config) {
  if (state.epochs_since_best > config.early_stop_patience) return StopReason::kEarlyStop;
  if (state.epoch >= config.max_epochs) return StopReason::kMaxEpochs;
  return StopReason::kNone;
}

std::string to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kEarlyStop:
      return "early_stop";
    case StopReason::kMaxEpochs:
      return "max_epochs";
    case StopReason::kNone:
      break;
  }
  return "none";
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : epochs) {
    records.push_back({{"epoch", r.epoch},
                       {"train_loss", r.train_loss},
                       {"val_loss", r.val_loss},
                       {"lr", r.lr},
                       {"wall_time_s", r.wall_time_s}});
  }
  return {{"epochs", records},
          {"stop_reason", stop_reason},
          {"best_checkpoint", best_checkpoint},
          {"best_epoch", best_epoch},
          {"best_val_loss", best_val_loss},
          {"initial_val_loss", initial_val_loss},
          {"skipped_train", skipped_train},
          {"skipped_validation", skipped_validation}};
}

std::string format_number(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

FitResult fit(const std::vector<ParallelExample>& train, const std::vector<ParallelExample>& validation,
              const ModelConfig& model_config, const TrainConfig& train_config, const FitOptions& options) {
  model_config.validate();
  train_config.validate();
  if (train.empty()) throw Error("fit: training split is empty");
  if (validation.empty()) throw Error("fit: validation split is empty");

  std::vector<TrainingExample> train_tokens;
  std::vector<TrainingExample> val_tokens;
  for (const auto& e : train) train_tokens.push_back(tokenize_example(e));
  for (const auto& e : validation) val_tokens.push_back(tokenize_example(e));

  const BatchPlan val_plan =
      make_batches(val_tokens, train_config.batch_size, model_config.max_seq_len, train_config.seed, 0);
  if (val_plan.batches.empty()) throw Error("fit: every validation example exceeds max_seq_len");

  FitResult result{{}, {}, init_params(model_config, train_config.seed)};
  ModelParams<float>& params = result.final_params;
  TrainReport& report = result.report;
  report.skipped_validation = val_plan.skipped;
  if (!options.checkpoint_path.empty()) report.best_checkpoint = options.checkpoint_path.string();

  const auto validate = [&](int epoch) {
    return options.validation_override ? options.validation_override(epoch) : evaluate_loss(params, val_plan.batches);
  };

  TrainState state = TrainState::initial(train_config);
  // The untrained model sets the bar, so the first epoch must already improve
  // to count as progress.
  state.best_val_loss = report.initial_val_loss = validate(0);
  result.best_params = params;

  const auto started = std::chrono::steady_clock::now();
  for (;;) {
    ++state.epoch;
    const BatchPlan plan =
        make_batches(train_tokens, train_config.batch_size, model_config.max_seq_len, train_config.seed, state.epoch);
    if (plan.batches.empty()) throw Error("fit: every training example exceeds max_seq_len");
    report.skipped_train = plan.skipped;

    double loss_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      const auto& batch = plan.batches[b];
      const double loss = train_step(params, state, batch, train_config, static_cast<int>(b));
      loss_sum += loss * static_cast<double>(batch.label_tokens());
      tokens += batch.label_tokens();
    }

    EpochRecord record;
    record.epoch = state.epoch;
    record.train_loss = loss_sum / static_cast<double>(tokens);
    record.val_loss = validate(state.epoch);
    scheduler_step(state, record.val_loss, train_config);
    record.lr = state.current_lr;
    record.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    report.epochs.push_back(record);

    if (options.progress) {
      char line[160];
      std::snprintf(line, sizeof(line), "epoch=%d train_loss=%.6g val_loss=%.6g lr=%.6g\n", record.epoch,
                    record.train_loss, record.val_loss, record.lr);
      *options.progress << line << std::flush;
    }

    if (record.val_loss < report.best_val_loss) {
      report.best_val_loss = record.val_loss;
      report.best_epoch = record.epoch;
      result.best_params = params;
      if (!options.checkpoint_path.empty()) save_checkpoint(params, options.checkpoint_path);
    }

    const StopReason reason = early_stop_check(state, train_config);
    if (reason != StopReason::kNone) {
      report.stop_reason = to_string(reason);
      break;
    }
  }
  return result;
}

}  // namespace versebyte
