#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "versebyte/checkpoint.hpp"
#include "versebyte/error.hpp"
#include "versebyte/trainer.hpp"

using namespace versebyte;

namespace {

TrainingExample example_of_length(std::size_t src, std::size_t tgt, int fill = 70) {
  TrainingExample e;
  e.source.assign(src - 1, fill);
  e.source.push_back(ByteVocab::kEos);
  e.target.assign(tgt, fill + 1);
  return e;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 8;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.dropout_rate = 0.0;
  c.max_seq_len = 64;
  return c;
}

std::vector<ParallelExample> toy_pairs(int n) {
  std::vector<ParallelExample> out;
  for (int i = 1; i <= n; ++i) {
    out.push_back({VerseId{1, 1, i}, "eng", "deu", "verse " + std::to_string(i), "vers " + std::to_string(i)});
  }
  return out;
}

}  // namespace

TEST_CASE("batches keep the last partial batch") {
  std::vector<TrainingExample> examples;
  for (int i = 0; i < 100; ++i) examples.push_back(example_of_length(5 + i % 7, 3 + i % 5));
  const auto plan = make_batches(examples, 48, 512, 1, 1);
  REQUIRE(plan.batches.size() == 3);
  CHECK(plan.batches[0].size() == 48);
  CHECK(plan.batches[1].size() == 48);
  CHECK(plan.batches[2].size() == 4);
  CHECK(plan.skipped == 0);

  const auto again = make_batches(examples, 48, 512, 1, 1);
  CHECK(again.batches[0].example_index == plan.batches[0].example_index);
  const auto next_epoch = make_batches(examples, 48, 512, 1, 2);
  CHECK(next_epoch.batches[0].example_index != plan.batches[0].example_index);
}

TEST_CASE("padding and masks") {
  std::vector<TrainingExample> same(6, example_of_length(9, 4));
  const auto plan = make_batches(same, 4, 512, 0, 1);
  CHECK(plan.batches[0].pad_tokens() == 0);

  const std::vector<TrainingExample> mixed = {example_of_length(3, 2), example_of_length(6, 5)};
  const auto batch = make_batches(mixed, 2, 512, 0, 1).batches.at(0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(batch.source[i].size() == 6);
    CHECK(batch.decoder_input[i].size() == 6);
    CHECK(batch.decoder_input[i][0] == ByteVocab::kPad);
    const auto& e = mixed[batch.example_index[i]];
    CHECK(batch.labels[i][e.target.size()] == ByteVocab::kEos);
  }
  CHECK(batch.pad_tokens() == 3 + 3);
  CHECK(batch.label_tokens() == 3 + 6);
}

TEST_CASE("over-length examples are skipped and counted") {
  const std::vector<TrainingExample> examples = {example_of_length(10, 3), example_of_length(3, 10),
                                                 example_of_length(4, 4)};
  const auto plan = make_batches(examples, 8, 8, 0, 1);
  CHECK(plan.skipped == 2);
  REQUIRE(plan.batches.size() == 1);
  CHECK(plan.batches[0].size() == 1);
  CHECK_THROWS_AS(make_batches({}, 8, 8, 0, 1), Error);
}

TEST_CASE("adam matches hand arithmetic on a quadratic") {
  // f(p) = |p|^2 / 2, gradient = p. Step 1 moves each coordinate by
  // lr * g / (|g| + eps); step 2 values worked out by hand in double.
  std::vector<Tensor<float>> params = {Tensor<float>({2}, {1.0f, -2.0f})};
  AdamState state;
  adam_update(params, {params[0]}, state, 0.1);
  CHECK(params[0][0] == doctest::Approx(0.900000001).epsilon(1e-7));
  CHECK(params[0][1] == doctest::Approx(-1.9000000005).epsilon(1e-7));
  adam_update(params, {params[0]}, state, 0.1);
  CHECK(params[0][0] == doctest::Approx(0.8004122297).epsilon(1e-6));
  CHECK(params[0][1] == doctest::Approx(-1.8001664866).epsilon(1e-6));
  CHECK(state.step == 2);
}

TEST_CASE("zero gradients leave parameters unchanged") {
  std::vector<Tensor<float>> params = {Tensor<float>({3}, {0.5f, -1.0f, 2.0f})};
  const auto before = params;
  AdamState state;
  for (int i = 0; i < 3; ++i) adam_update(params, {Tensor<float>({3})}, state, 0.01);
  CHECK(params == before);
}

TEST_CASE("global norm clipping") {
  std::vector<Tensor<float>> grads = {Tensor<float>({2}, {3.0f, 4.0f}), Tensor<float>({1}, {12.0f})};
  CHECK(clip_global_norm(grads, 1.0) == doctest::Approx(13.0));
  double sq = 0;
  for (const auto& g : grads) {
    for (float x : g.values()) sq += double(x) * x;
  }
  CHECK(std::sqrt(sq) <= 1.0 + 1e-6);
  std::vector<Tensor<float>> small = {Tensor<float>({1}, {0.5f})};
  clip_global_norm(small, 1.0);
  CHECK(small[0][0] == 0.5f);
}

TEST_CASE("scheduler drops after eleven flat epochs") {
  TrainConfig config;
  auto state = TrainState::initial(config);
  state.best_val_loss = 1.0;
  for (int epoch = 1; epoch <= 10; ++epoch) {
    scheduler_step(state, 1.0, config);
    CHECK(state.current_lr == 2e-4);
  }
  scheduler_step(state, 1.0, config);
  CHECK(state.current_lr == 1e-4);

  // Improvements keep resetting the counter.
  auto improving = TrainState::initial(config);
  double loss = 10.0;
  for (int epoch = 1; epoch <= 30; ++epoch) {
    scheduler_step(improving, loss -= 0.1, config);
    CHECK(improving.current_lr == 2e-4);
    CHECK(improving.epochs_since_best == 0);
  }

  // A long plateau halves the rate every eleven epochs down to the floor.
  auto plateau = TrainState::initial(config);
  plateau.best_val_loss = 0.0;
  std::vector<double> rates;
  for (int epoch = 1; epoch <= 11 * 12; ++epoch) {
    scheduler_step(plateau, 1.0, config);
    if (epoch % 11 == 0) rates.push_back(plateau.current_lr);
  }
  CHECK(rates[0] == 1e-4);
  CHECK(rates[1] == 5e-5);
  CHECK(rates[2] == 2.5e-5);
  CHECK(rates.back() == config.min_lr);
}

TEST_CASE("improvement threshold is absolute") {
  TrainConfig config;
  auto state = TrainState::initial(config);
  state.best_val_loss = 1.0;
  scheduler_step(state, 1.0 - 5e-7, config);
  CHECK(state.epochs_since_best == 1);
  scheduler_step(state, 1.0 - 2e-6, config);
  CHECK(state.epochs_since_best == 0);
}

TEST_CASE("early stop rule") {
  TrainConfig config;
  TrainState state = TrainState::initial(config);
  state.epoch = 21;
  state.epochs_since_best = 21;
  CHECK(early_stop_check(state, config) == StopReason::kEarlyStop);
  state.epochs_since_best = 20;
  CHECK(early_stop_check(state, config) == StopReason::kNone);
  state.epoch = 500;
  state.epochs_since_best = 0;
  CHECK(early_stop_check(state, config) == StopReason::kMaxEpochs);
  state.epochs_since_best = 21;
  CHECK(early_stop_check(state, config) == StopReason::kEarlyStop);

  // Improvement at epoch 20 after 19 flat epochs.
  TrainState s = TrainState::initial(config);
  s.best_val_loss = 1.0;
  for (s.epoch = 1; s.epoch <= 19; ++s.epoch) scheduler_step(s, 1.0, config);
  s.epoch = 20;
  scheduler_step(s, 0.5, config);
  CHECK(early_stop_check(s, config) == StopReason::kNone);
}

TEST_CASE("train step produces a finite positive loss and rejects NaN") {
  auto params = init_params(tiny_config(), 1);
  TrainConfig config;
  auto state = TrainState::initial(config);
  std::vector<TrainingExample> examples;
  for (const auto& p : toy_pairs(4)) examples.push_back(tokenize_example(p));
  const auto plan = make_batches(examples, 4, 64, 0, 1);
  const auto before = params;
  const double loss = train_step(params, state, plan.batches[0], config);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  CHECK_FALSE(params == before);

  params.tensors[0][0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_step(params, state, plan.batches[0], config, 3), NumericError);
}

TEST_CASE("fit with a constant validation stream stops early") {
  TrainConfig config;
  config.batch_size = 4;
  FitOptions options;
  options.validation_override = [](int) { return 2.5; };
  std::ostringstream progress;
  options.progress = &progress;
  const auto result = fit(toy_pairs(3), toy_pairs(2), tiny_config(), config, options);
  const auto& report = result.report;
  CHECK(report.stop_reason == "early_stop");
  REQUIRE(report.epochs.size() == 21);
  for (int i = 0; i < 10; ++i) CHECK(report.epochs[i].lr == 2e-4);
  CHECK(report.epochs[10].lr == 1e-4);
  CHECK(report.epochs[20].lr == 1e-4);
  CHECK(report.best_val_loss == 2.5);
  CHECK(progress.str().rfind("epoch=1 train_loss=", 0) == 0);
  CHECK(progress.str().find("epoch=21 ") != std::string::npos);
  CHECK(progress.str().find(" lr=0.0001\n") != std::string::npos);
}

TEST_CASE("fit honours max_epochs and writes a loadable checkpoint") {
  TrainConfig config;
  config.max_epochs = 1;
  FitOptions options;
  options.checkpoint_path = std::filesystem::temp_directory_path() / "versebyte_fit_test.vbt";
  const auto result = fit(toy_pairs(3), toy_pairs(2), tiny_config(), config, options);
  CHECK(result.report.epochs.size() == 1);
  CHECK(result.report.stop_reason == "max_epochs");
  CHECK(result.report.best_val_loss == result.report.epochs[0].val_loss);
  CHECK(load_checkpoint(options.checkpoint_path) == result.best_params);
  std::filesystem::remove(options.checkpoint_path);

  const auto json = result.report.to_json();
  CHECK(json.at("epochs").size() == 1);
  CHECK(json.at("stop_reason") == "max_epochs");
}

TEST_CASE("train config validation") {
  CHECK(TrainConfig::from_json(nlohmann::json::object()) == TrainConfig{});
  CHECK_THROWS_AS(TrainConfig::from_json({{"scheduler_factor", 1.0}}), FormatError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"batch_size", 0}}), FormatError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", "fast"}}), FormatError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"patience", 3}}), FormatError);
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.seed = 99;
  CHECK(TrainConfig::from_json(c.to_json()) == c);
}
