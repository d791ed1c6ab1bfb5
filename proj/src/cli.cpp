#include "versebyte/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "versebyte/checkpoint.hpp"
#include "versebyte/error.hpp"
#include "versebyte/eval.hpp"
#include "versebyte/tokenizer.hpp"

namespace versebyte {
namespace fs = std::filesystem;
namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const fs::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  out.close();
  if (!out) throw Error("cannot write " + path.string());
}

const nlohmann::json& object_section(const nlohmann::json& json, const char* key) {
  static const nlohmann::json empty = nlohmann::json::object();
  if (!json.contains(key)) return empty;
  const auto& section = json.at(key);
  if (!section.is_object()) throw FormatError(std::string(key) + ": expected an object");
  return section;
}

std::optional<fs::path> optional_path(const nlohmann::json& section, const std::string& prefix, const char* key,
                                      const fs::path& base_dir) {
  if (!section.contains(key) || section.at(key).is_null()) return std::nullopt;
  const auto& value = section.at(key);
  if (!value.is_string() || value.get<std::string>().empty()) {
    throw FormatError(prefix + "." + key + ": expected a non-empty path string");
  }
  return fs::absolute(base_dir / value.get<std::string>()).lexically_normal();
}

nlohmann::json path_or_null(const std::optional<fs::path>& path) {
  return path ? nlohmann::json(path->string()) : nlohmann::json(nullptr);
}

SplitRatios ratios_from_json(const nlohmann::json& section) {
  SplitRatios ratios;
  const std::map<std::string, double*> fields = {
      {"train", &ratios.train}, {"validation", &ratios.validation}, {"test", &ratios.test}};
  for (const auto& [key, value] : section.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError("split." + key + ": unknown field");
    if (!value.is_number()) throw FormatError("split." + key + ": expected a number");
    *it->second = value.get<double>();
  }
  validate_ratios(ratios, "split");
  return ratios;
}

DecodeOptions decode_from_json(const nlohmann::json& section) {
  DecodeOptions options;
  for (const auto& [key, value] : section.items()) {
    if (key == "beam_width" || key == "max_len") {
      if (!value.is_number_integer()) throw FormatError("decode." + key + ": expected an integer");
      (key == "beam_width" ? options.beam_width : options.max_len) = value.get<int>();
    } else if (key == "length_penalty") {
      if (!value.is_number()) throw FormatError("decode.length_penalty: expected a number");
      options.length_penalty = value.get<double>();
    } else {
      throw FormatError("decode." + key + ": unknown field");
    }
  }
  validate_decode_options(options, "decode");
  return options;
}

std::string percent(std::size_t part, std::size_t whole) {
  char buf[32];
  const double value = whole == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(whole);
  std::snprintf(buf, sizeof(buf), "%.1f%%", value);
  return buf;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string extension_for(const std::string& format) {
  if (format == "text") return ".txt";
  return "." + format;
}

void add_decode_flags(CLI::App& cmd, DecodeOptions& options) {
  cmd.add_option("--beam", options.beam_width, "Beam width (1 = greedy)");
  cmd.add_option("--max-len", options.max_len, "Maximum generated bytes");
  cmd.add_option("--length-penalty", options.length_penalty, "Beam length penalty exponent");
}

struct AlignArgs {
  std::string src, src_lang, src_name, tgt, tgt_lang, tgt_name, out;
};

int cmd_align(const AlignArgs& a, std::ostream& out) {
  const auto name_or_stem = [](const std::string& name, const std::string& path) {
    return name.empty() ? fs::path(path).stem().string() : name;
  };
  const BibleVersion source = load_version(a.src, a.src_lang, name_or_stem(a.src_name, a.src));
  const BibleVersion target = load_version(a.tgt, a.tgt_lang, name_or_stem(a.tgt_name, a.tgt));
  const auto pairs = align(source, target);
  write_jsonl(a.out, pairs);
  out << "pairs=" << pairs.size() << " coverage=" << percent(pairs.size(), source.verses.size()) << '\n';
  return 0;
}

struct SplitArgs {
  std::string in, out_dir;
  SplitRatios ratios;
  std::uint64_t seed = 0;
};

int cmd_split(SplitArgs a, std::ostream& out) {
  validate_ratios(a.ratios, "split");
  if (auto env = seed_from_environment()) a.seed = *env;
  const DatasetSplit split = make_split(read_jsonl(a.in), a.ratios, a.seed);
  fs::create_directories(a.out_dir);
  write_jsonl(fs::path(a.out_dir) / "train.jsonl", split.train);
  write_jsonl(fs::path(a.out_dir) / "validation.jsonl", split.validation);
  write_jsonl(fs::path(a.out_dir) / "test.jsonl", split.test);
  out << "train=" << split.train.size() << " validation=" << split.validation.size() << " test=" << split.test.size()
      << " seed=" << a.seed << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, std::ostream& out) {
  nlohmann::json json;
  try {
    json = nlohmann::json::parse(read_file(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(config_path + ": invalid JSON: " + e.what());
  }
  RunConfig config = RunConfig::from_json(json, fs::absolute(config_path).parent_path());
  if (auto env = seed_from_environment()) {
    config.seed = *env;
    config.train.seed = *env;
  }

  // Everything is loaded and validated before the output directory appears.
  std::vector<ParallelExample> train;
  std::vector<ParallelExample> validation;
  if (config.train_path) {
    train = read_jsonl(*config.train_path);
    validation = read_jsonl(*config.validation_path);
  } else {
    DatasetSplit split = make_split(read_jsonl(*config.aligned_path), config.split, config.seed);
    train = std::move(split.train);
    validation = std::move(split.validation);
  }
  if (train.empty()) throw Error("training split is empty");
  if (validation.empty()) throw Error("validation split is empty");

  fs::create_directories(config.output_dir);
  write_file(config.output_dir / "run_config.json", config.to_json().dump(2) + "\n");

  FitOptions options;
  options.checkpoint_path = config.output_dir / "model.vbt";
  options.progress = &out;
  const FitResult result = fit(train, validation, config.model, config.train, options);
  write_file(config.output_dir / "train_report.json", result.report.to_json().dump(2) + "\n");
  out << "stop_reason=" << result.report.stop_reason << " best_epoch=" << result.report.best_epoch
      << " best_val_loss=" << format_number(result.report.best_val_loss) << '\n';
  if (result.report.skipped_train > 0 || result.report.skipped_validation > 0) {
    out << "warning: skipped " << result.report.skipped_train << " training and "
        << result.report.skipped_validation << " validation examples longer than max_seq_len\n";
  }
  return 0;
}

struct TranslateArgs {
  std::string checkpoint, target_lang, text, input;
  DecodeOptions decode;
};

int cmd_translate(const TranslateArgs& a, std::ostream& out) {
  validate_decode_options(a.decode, "translate");
  if (!is_language_code(a.target_lang)) throw FormatError("invalid target language code '" + a.target_lang + "'");
  const auto params = load_checkpoint(a.checkpoint);
  const std::vector<std::string> lines = a.input.empty() ? std::vector<std::string>{a.text} : read_lines(a.input);
  std::string result;
  for (const auto& line : lines) result += translate(params, line, a.target_lang, a.decode) + "\n";
  out << result;
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint, test, out_dir, format = "text", smoothing = "none";
  bool self_test = false;
  DecodeOptions decode;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  validate_decode_options(a.decode, "evaluate");
  const Smoothing smoothing = parse_smoothing(a.smoothing);
  render_comparison({}, a.format);  // rejects unknown formats before any work
  const auto examples = read_jsonl(a.test);
  if (examples.empty()) throw Error(a.test + ": test file is empty");

  Evaluation evaluation;
  if (a.self_test) {
    std::vector<std::string> references;
    for (const auto& e : examples) references.push_back(e.target_text);
    evaluation = evaluate_translations(examples, references, smoothing);
  } else {
    if (a.checkpoint.empty()) throw Error("--checkpoint is required unless --self-test is given");
    evaluation = evaluate_model(load_checkpoint(a.checkpoint), examples, a.decode, smoothing);
  }

  fs::create_directories(a.out_dir);
  write_file(fs::path(a.out_dir) / "bleu_report.json", evaluation.bleu.to_json().dump(2) + "\n");
  write_file(fs::path(a.out_dir) / ("comparison" + extension_for(a.format)),
             render_comparison(evaluation.rows, a.format));
  out << "bleu=" << format_number(evaluation.bleu.score) << " segments=" << evaluation.bleu.segments << '\n';
  return 0;
}

struct ReportArgs {
  std::string rows, format = "text", out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  nlohmann::json json;
  try {
    json = nlohmann::json::parse(read_file(a.rows));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(a.rows + ": invalid JSON: " + e.what());
  }
  const std::string document = render_comparison(rows_from_json(json), a.format);
  if (a.out.empty()) {
    out << document;
  } else {
    write_file(a.out, document);
  }
  return 0;
}

}  // namespace

void validate_ratios(const SplitRatios& r, const std::string& where) {
  for (double v : {r.train, r.validation, r.test}) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw FormatError(where + ": ratios must lie in [0, 1]");
  }
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9) throw FormatError(where + ": ratios must sum to 1");
}

void validate_decode_options(const DecodeOptions& options, const std::string& where) {
  if (options.beam_width < 1) throw FormatError(where + ".beam_width: must be at least 1");
  if (options.max_len < 1) throw FormatError(where + ".max_len: must be at least 1");
  if (!std::isfinite(options.length_penalty)) throw FormatError(where + ".length_penalty: must be finite");
}

std::optional<std::uint64_t> seed_from_environment() {
  const char* raw = std::getenv("VERSEBYTE_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string_view text(raw);
  std::uint64_t seed = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), seed);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("VERSEBYTE_SEED must be a non-negative integer, got '" + std::string(text) + "'");
  }
  return seed;
}

RunConfig RunConfig::from_json(const nlohmann::json& json, const fs::path& base_dir) {
  if (!json.is_object()) throw FormatError("run config must be a JSON object");
  static const std::vector<std::string> known = {"data", "split", "model", "train", "decode", "output_dir", "seed"};
  for (const auto& [key, value] : json.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw FormatError(key + ": unknown field");
  }

  RunConfig config;
  const auto& data = object_section(json, "data");
  for (const auto& [key, value] : data.items()) {
    if (key != "train" && key != "validation" && key != "test" && key != "aligned") {
      throw FormatError("data." + key + ": unknown field");
    }
  }
  config.train_path = optional_path(data, "data", "train", base_dir);
  config.validation_path = optional_path(data, "data", "validation", base_dir);
  config.test_path = optional_path(data, "data", "test", base_dir);
  config.aligned_path = optional_path(data, "data", "aligned", base_dir);
  if (config.train_path.has_value() != config.validation_path.has_value()) {
    throw FormatError("data: train and validation must be given together");
  }
  if (!config.train_path && !config.aligned_path) {
    throw FormatError("data: give either train and validation, or aligned");
  }
  if (config.train_path && config.aligned_path) throw FormatError("data.aligned: conflicts with data.train");

  config.split = ratios_from_json(object_section(json, "split"));
  config.model = ModelConfig::from_json(object_section(json, "model"));
  const auto& train = object_section(json, "train");
  if (train.contains("seed")) throw FormatError("train.seed: use the top-level seed field");
  config.train = TrainConfig::from_json(train);
  config.decode = decode_from_json(object_section(json, "decode"));

  if (!json.contains("output_dir") || !json.at("output_dir").is_string() ||
      json.at("output_dir").get<std::string>().empty()) {
    throw FormatError("output_dir: expected a non-empty path string");
  }
  config.output_dir = fs::absolute(base_dir / json.at("output_dir").get<std::string>()).lexically_normal();
  if (json.contains("seed")) {
    if (!json.at("seed").is_number_unsigned()) throw FormatError("seed: expected a non-negative integer");
    config.seed = json.at("seed").get<std::uint64_t>();
  }
  config.train.seed = config.seed;
  return config;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json train_json = train.to_json();
  train_json.erase("seed");
  return {{"data",
           {{"train", path_or_null(train_path)},
            {"validation", path_or_null(validation_path)},
            {"test", path_or_null(test_path)},
            {"aligned", path_or_null(aligned_path)}}},
          {"split", {{"train", split.train}, {"validation", split.validation}, {"test", split.test}}},
          {"model", model.to_json()},
          {"train", train_json},
          {"decode",
           {{"beam_width", decode.beam_width},
            {"max_len", decode.max_len},
            {"length_penalty", decode.length_penalty}}},
          {"output_dir", output_dir.string()},
          {"seed", seed}};
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Byte-level neural machine translation for verse-parallel corpora", "versebyte"};
  app.require_subcommand(1);

  AlignArgs align_args;
  auto* align_cmd = app.add_subcommand("align", "Pair two versions on shared verse ids");
  align_cmd->add_option("--src", align_args.src, "Source corpus TSV")->required();
  align_cmd->add_option("--src-lang", align_args.src_lang, "Source language code")->required();
  align_cmd->add_option("--src-name", align_args.src_name, "Source version name (default: file stem)");
  align_cmd->add_option("--tgt", align_args.tgt, "Target corpus TSV")->required();
  align_cmd->add_option("--tgt-lang", align_args.tgt_lang, "Target language code")->required();
  align_cmd->add_option("--tgt-name", align_args.tgt_name, "Target version name (default: file stem)");
  align_cmd->add_option("--out", align_args.out, "Output JSONL")->required();

  SplitArgs split_args;
  auto* split_cmd = app.add_subcommand("split", "Shuffle aligned pairs into train/validation/test");
  split_cmd->add_option("--in", split_args.in, "Aligned JSONL")->required();
  split_cmd->add_option("--out-dir", split_args.out_dir, "Directory for the three split files")->required();
  split_cmd->add_option("--train-ratio", split_args.ratios.train);
  split_cmd->add_option("--val-ratio", split_args.ratios.validation);
  split_cmd->add_option("--test-ratio", split_args.ratios.test);
  split_cmd->add_option("--seed", split_args.seed, "Shuffle seed (VERSEBYTE_SEED overrides)");

  std::string train_config;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", train_config, "Run config JSON")->required();

  TranslateArgs translate_args;
  auto* translate_cmd = app.add_subcommand("translate", "Translate text with a checkpoint");
  translate_cmd->add_option("--checkpoint", translate_args.checkpoint)->required();
  translate_cmd->add_option("--target-lang", translate_args.target_lang)->required();
  auto* text_opt = translate_cmd->add_option("--text", translate_args.text, "A single source text");
  auto* input_opt = translate_cmd->add_option("--input", translate_args.input, "File with one source text per line");
  text_opt->excludes(input_opt);
  add_decode_flags(*translate_cmd, translate_args.decode);

  EvaluateArgs evaluate_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a test JSONL");
  evaluate_cmd->add_option("--checkpoint", evaluate_args.checkpoint);
  evaluate_cmd->add_option("--test", evaluate_args.test, "Test JSONL")->required();
  evaluate_cmd->add_option("--out-dir", evaluate_args.out_dir)->required();
  evaluate_cmd->add_option("--format", evaluate_args.format, "text, html or json");
  evaluate_cmd->add_option("--smoothing", evaluate_args.smoothing, "none or add_one");
  evaluate_cmd->add_flag("--self-test", evaluate_args.self_test, "Score the references against themselves");
  add_decode_flags(*evaluate_cmd, evaluate_args.decode);

  ReportArgs report_args;
  auto* report_cmd = app.add_subcommand("report", "Render saved comparison rows");
  report_cmd->add_option("--rows", report_args.rows, "Comparison rows JSON")->required();
  report_cmd->add_option("--format", report_args.format, "text, html or json");
  report_cmd->add_option("--out", report_args.out, "Output file (default: stdout)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (align_cmd->parsed()) return cmd_align(align_args, out);
    if (split_cmd->parsed()) return cmd_split(split_args, out);
    if (train_cmd->parsed()) return cmd_train(train_config, out);
    if (translate_cmd->parsed()) {
      if (translate_args.input.empty() && text_opt->count() == 0) throw Error("give --text or --input");
      return cmd_translate(translate_args, out);
    }
    if (evaluate_cmd->parsed()) return cmd_evaluate(evaluate_args, out);
    if (report_cmd->parsed()) return cmd_report(report_args, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace versebyte
