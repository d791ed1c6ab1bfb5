#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "versebyte/checkpoint.hpp"
#include "versebyte/cli.hpp"
#include "versebyte/error.hpp"
#include "versebyte/eval.hpp"
#include "versebyte/model.hpp"
#include "versebyte/tokenizer.hpp"

namespace py = pybind11;
using namespace versebyte;

namespace {

// Structured values cross the boundary as JSON text; the Python side parses them.
std::string bleu_json(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, int max_n,
                      const std::string& smoothing) {
  return corpus_bleu(hypotheses, references, max_n, parse_smoothing(smoothing)).to_json().dump();
}

py::tuple cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  int status = 0;
  {
    py::gil_scoped_release release;
    status = run_cli(args, out, err);
  }
  return py::make_tuple(status, out.str(), err.str());
}

class Translator {
 public:
  explicit Translator(const std::filesystem::path& checkpoint) : params_(load_checkpoint(checkpoint)) {}

  std::string operator()(const std::string& text, const std::string& target_lang, int beam_width, int max_len,
                         double length_penalty) const {
    DecodeOptions options{beam_width, max_len, length_penalty};
    validate_decode_options(options, "translate");
    py::gil_scoped_release release;
    return translate(params_, text, target_lang, options);
  }

  std::string config_json() const { return params_.config.to_json().dump(); }

 private:
  ModelParams<float> params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Byte-level translation core";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<RangeError>(m, "RangeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());

  m.attr("PAD") = ByteVocab::kPad;
  m.attr("EOS") = ByteVocab::kEos;
  m.attr("UNK") = ByteVocab::kUnk;
  m.attr("VOCAB_SIZE") = ByteVocab::kSize;

  m.def("encode", &encode, py::arg("text"), py::arg("append_eos") = true);
  m.def(
      "decode", [](const std::vector<int>& ids) { return decode(ids); }, py::arg("ids"));
  m.def("tag_source", &tag_source, py::arg("text"), py::arg("target_lang"));
  m.def("relative_position_bucket", &relative_position_bucket, py::arg("relative_position"),
        py::arg("bidirectional"), py::arg("num_buckets") = 32, py::arg("max_distance") = 128);
  m.def(
      "parameter_count",
      [](const std::string& config_json) { return parameter_count(ModelConfig::from_json(nlohmann::json::parse(config_json))); },
      py::arg("config_json"));
  m.def("corpus_bleu_json", &bleu_json, py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4,
        py::arg("smoothing") = "none");
  m.def("run_cli", &cli, py::arg("args"));

  py::class_<Translator>(m, "Translator")
      .def(py::init<std::filesystem::path>(), py::arg("checkpoint"))
      .def("__call__", &Translator::operator(), py::arg("text"), py::arg("target_lang"), py::arg("beam_width") = 1,
           py::arg("max_len") = 512, py::arg("length_penalty") = 0.0)
      .def("config_json", &Translator::config_json);
}
