#include "versebyte/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include <zlib.h>

#include "versebyte/error.hpp"

namespace versebyte {
namespace {

using Kind = CheckpointError::Kind;

constexpr std::string_view kMagic = "VBT1";
// Canonical configs are a few hundred bytes; anything longer is corrupt.
constexpr std::uint64_t kMaxConfigBytes = 1024;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::string_view bytes, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= std::uint64_t{static_cast<unsigned char>(bytes[pos + i])} << (8 * i);
  return v;
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (!bytes.empty()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size(), 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), n);
    bytes.remove_prefix(n);
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t blob_bytes(const ParameterSpec& spec) {
  std::uint64_t n = 4;
  for (auto d : spec.shape) n *= d;
  return n;
}

std::optional<ModelConfig> parse_config(std::string_view text) {
  try {
    return ModelConfig::from_json(nlohmann::json::parse(text));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

[[noreturn]] void truncated() { throw CheckpointError(Kind::kTruncated, "checkpoint is truncated"); }
[[noreturn]] void corrupt() { throw CheckpointError(Kind::kCrcMismatch, "checkpoint CRC mismatch (file is corrupt)"); }

// Called when the CRC does not match. Reports truncation only if everything
// readable is consistent with the layout the header promises and the file
// simply ends early; any other inconsistency is corruption.
[[noreturn]] void diagnose_bad_crc(std::string_view bytes) {
  std::size_t pos = 8;
  if (bytes.size() < pos + 8) truncated();
  const std::uint64_t config_len = get_le(bytes, pos, 8);
  pos += 8;
  if (config_len > kMaxConfigBytes) corrupt();
  if (bytes.size() < pos + config_len) truncated();
  const auto config = parse_config(bytes.substr(pos, config_len));
  if (!config) corrupt();
  pos += config_len;

  const auto layout = parameter_layout(*config);
  std::uint64_t expected = pos + 8 + 4;
  for (const auto& spec : layout) expected += 8 + blob_bytes(spec);
  if (bytes.size() >= expected) corrupt();

  if (bytes.size() < pos + 8) truncated();
  if (get_le(bytes, pos, 8) != layout.size()) corrupt();
  pos += 8;
  for (const auto& spec : layout) {
    if (bytes.size() < pos + 8) truncated();
    if (get_le(bytes, pos, 8) != blob_bytes(spec)) corrupt();
    pos += 8 + blob_bytes(spec);
  }
  truncated();
}

}  // namespace

std::string serialize_checkpoint(const ModelParams<float>& params) {
  params.config.validate();
  const auto layout = parameter_layout(params.config);
  if (layout.size() != params.tensors.size()) throw ShapeError("parameter set does not match its config");

  std::string out(kMagic);
  put_u32(out, kCheckpointVersion);
  const std::string config = params.config.to_json().dump();
  put_u64(out, config.size());
  out += config;
  put_u64(out, layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.shape() != layout[i].shape || params.names[i] != layout[i].name) {
      throw ShapeError("parameter " + layout[i].name + " does not match its config");
    }
    put_u64(out, blob_bytes(layout[i]));
    for (float v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  put_u32(out, crc32_of(out));
  return out;
}

ModelParams<float> deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size()) truncated();
  if (bytes.substr(0, kMagic.size()) != kMagic) throw CheckpointError(Kind::kBadMagic, "not a versebyte checkpoint");
  if (bytes.size() < 12) truncated();

  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  if (crc32_of(body) != get_le(bytes, body.size(), 4)) diagnose_bad_crc(bytes);

  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::kUnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));
  }

  const auto malformed = [](const std::string& why) { return CheckpointError(Kind::kMalformed, "malformed checkpoint: " + why); };
  std::size_t pos = 8;
  const auto need = [&](std::uint64_t n) {
    if (n > body.size() - pos) throw malformed("structure overruns the file");
  };
  need(8);
  const std::uint64_t config_len = get_le(body, pos, 8);
  pos += 8;
  need(config_len);
  ModelConfig config;
  try {
    config = ModelConfig::from_json(nlohmann::json::parse(body.substr(pos, config_len)));
  } catch (const std::exception& e) {
    throw malformed(std::string("bad config: ") + e.what());
  }
  pos += config_len;

  const auto layout = parameter_layout(config);
  need(8);
  if (get_le(body, pos, 8) != layout.size()) throw malformed("blob count does not match config");
  pos += 8;

  ModelParams<float> params{config, {}, {}};
  for (const auto& spec : layout) {
    need(8);
    const std::uint64_t len = get_le(body, pos, 8);
    pos += 8;
    if (len != blob_bytes(spec)) throw malformed("blob " + spec.name + " has the wrong length");
    need(len);
    Tensor<float> t(spec.shape);
    auto data = t.values();
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(body, pos + 4 * i, 4)));
    }
    pos += len;
    params.names.push_back(spec.name);
    params.tensors.push_back(std::move(t));
  }
  if (pos != body.size()) throw malformed("trailing bytes after the last blob");
  return params;
}

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw CheckpointError(Kind::kIo, "cannot write checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError(Kind::kIo, "cannot write checkpoint " + path.string());
  }
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw CheckpointError(Kind::kIo, "cannot read checkpoint " + path.string());
  return deserialize_checkpoint(buffer.view());
}

}  // namespace versebyte
