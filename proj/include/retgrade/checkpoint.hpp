#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "retgrade/error.hpp"
#include "retgrade/model.hpp"
#include "retgrade/pipeline.hpp"

namespace retgrade {

// Checkpoint file layout (all integers little-endian):
//
//   "RGCK"                      4 bytes magic
//   format_version              u32, currently 1
//   header_length               u32
//   header                      UTF-8 key=value lines, '\n' terminated
//   parameter data              f32 per element, parameters in header order
//   crc32                       u32 over every preceding byte
//
// Header keys: model.*, preprocess.*, best_qwk, epoch, param_count and
// param.<i>=<name>:<d0>x<d1>x...  Reals are C99 hex floats so they round-trip
// exactly.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'C', 'K'};

struct Checkpoint {
  ModelConfig model;
  PreprocessConfig preprocess;
  ParamStore<float> params;
  double best_qwk = 0.0;
  int epoch = 0;
};

namespace detail {

inline std::string hex_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline std::string join_sizes(const std::vector<std::size_t> &v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i)
      s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::vector<std::size_t> split_sizes(const std::string &s, char sep) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto next = s.find(sep, pos);
    const std::string tok = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("bad size list '" + s + "'");
    out.push_back(std::stoull(tok));
    if (next == std::string::npos)
      break;
    pos = next + 1;
  }
  return out;
}

inline void put_u32(std::string &buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string &buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const std::string &buf, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef *>(buf.data()), static_cast<uInt>(len)));
}

inline void write_backbone(std::ostringstream &os, const std::string &key, const BackboneConfig &b) {
  os << key << ".input_size=" << b.input_size << '\n';
  os << key << ".stage_channels=" << join_sizes(b.stage_channels, ',') << '\n';
  os << key << ".feature_dim=" << b.feature_dim << '\n';
}

class HeaderReader {
public:
  explicit HeaderReader(const std::string &text) {
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty())
        continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw FormatError("header line without '=': " + line);
      kv_[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  const std::string &str(const std::string &key) const {
    const auto it = kv_.find(key);
    if (it == kv_.end())
      throw FormatError("checkpoint header lacks key '" + key + "'");
    return it->second;
  }

  double real(const std::string &key) const {
    const std::string &s = str(key);
    char *end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
      throw FormatError("bad real for '" + key + "': " + s);
    return v;
  }

  long long integer(const std::string &key) const {
    const std::string &s = str(key);
    char *end = nullptr;
    const long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
      throw FormatError("bad integer for '" + key + "': " + s);
    return v;
  }

  std::size_t size(const std::string &key) const {
    const long long v = integer(key);
    if (v < 0)
      throw FormatError("negative value for '" + key + "'");
    return static_cast<std::size_t>(v);
  }

  BackboneConfig backbone(const std::string &key) const {
    return {size(key + ".input_size"), split_sizes(str(key + ".stage_channels"), ','), size(key + ".feature_dim")};
  }

  std::array<double, 3> triple(const std::string &key) const {
    const std::string &s = str(key);
    std::array<double, 3> v{};
    std::istringstream is(s);
    std::string tok;
    for (int i = 0; i < 3; ++i) {
      if (!std::getline(is, tok, ','))
        throw FormatError("expected 3 values for '" + key + "'");
      v[i] = std::strtod(tok.c_str(), nullptr);
    }
    return v;
  }

private:
  std::map<std::string, std::string> kv_;
};

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint &c) {
  using detail::hex_double;
  std::ostringstream h;
  detail::write_backbone(h, "model.branch0", c.model.branch0);
  detail::write_backbone(h, "model.branch3", c.model.branch3);
  h << "model.fusion.dim=" << c.model.fusion.dim << '\n';
  h << "model.fusion.gate_hidden=" << (c.model.fusion.gate_hidden ? 1 : 0) << '\n';
  h << "model.num_grades=" << c.model.num_grades << '\n';
  const auto &p = c.preprocess;
  h << "preprocess.crop_threshold=" << p.crop_threshold << '\n';
  h << "preprocess.bg_sigma_frac=" << hex_double(p.ben_graham.sigma_frac) << '\n';
  h << "preprocess.bg_alpha=" << hex_double(p.ben_graham.alpha) << '\n';
  h << "preprocess.bg_beta=" << hex_double(p.ben_graham.beta) << '\n';
  h << "preprocess.bg_gamma=" << hex_double(p.ben_graham.gamma) << '\n';
  h << "preprocess.clahe_clip=" << hex_double(p.clahe.clip_limit) << '\n';
  h << "preprocess.clahe_tiles_x=" << p.clahe.tiles_x << '\n';
  h << "preprocess.clahe_tiles_y=" << p.clahe.tiles_y << '\n';
  h << "preprocess.branch0_size=" << p.branch0_size << '\n';
  h << "preprocess.branch3_size=" << p.branch3_size << '\n';
  h << "preprocess.norm_mean=" << hex_double(p.norm.mean[0]) << ',' << hex_double(p.norm.mean[1]) << ','
    << hex_double(p.norm.mean[2]) << '\n';
  h << "preprocess.norm_std=" << hex_double(p.norm.std[0]) << ',' << hex_double(p.norm.std[1]) << ','
    << hex_double(p.norm.std[2]) << '\n';
  h << "best_qwk=" << hex_double(c.best_qwk) << '\n';
  h << "epoch=" << c.epoch << '\n';
  h << "param_count=" << c.params.size() << '\n';
  for (std::size_t i = 0; i < c.params.size(); ++i)
    h << "param." << i << '=' << c.params[i].name << ':' << detail::join_sizes(c.params[i].value.shape(), 'x')
      << '\n';
  const std::string header = h.str();

  std::string buf(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(header.size()));
  buf += header;
  for (const auto &param : c.params)
    for (float v : param.value.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(buf, bits);
    }
  detail::put_u32(buf, detail::crc32_of(buf, buf.size()));
  return buf;
}

inline Checkpoint decode_checkpoint(const std::string &buf) {
  if (buf.size() < 4)
    throw TruncatedError("checkpoint shorter than its magic");
  if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("bad checkpoint magic");
  if (buf.size() < 12)
    throw TruncatedError("checkpoint shorter than its fixed header");
  const std::uint32_t version = detail::get_u32(buf, 4);
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t header_len = detail::get_u32(buf, 8);
  if (12 + static_cast<std::size_t>(header_len) > buf.size())
    throw TruncatedError("checkpoint header extends past end of file");
  const detail::HeaderReader h(buf.substr(12, header_len));

  Checkpoint c;
  try {
    c.model.branch0 = h.backbone("model.branch0");
    c.model.branch3 = h.backbone("model.branch3");
    c.model.fusion.dim = h.size("model.fusion.dim");
    c.model.fusion.gate_hidden = h.integer("model.fusion.gate_hidden") != 0;
    c.model.num_grades = static_cast<int>(h.integer("model.num_grades"));
    auto &p = c.preprocess;
    p.crop_threshold = static_cast<int>(h.integer("preprocess.crop_threshold"));
    p.ben_graham = {h.real("preprocess.bg_sigma_frac"), h.real("preprocess.bg_alpha"), h.real("preprocess.bg_beta"),
                    h.real("preprocess.bg_gamma")};
    p.clahe = {h.real("preprocess.clahe_clip"), static_cast<int>(h.integer("preprocess.clahe_tiles_x")),
               static_cast<int>(h.integer("preprocess.clahe_tiles_y"))};
    p.branch0_size = static_cast<int>(h.integer("preprocess.branch0_size"));
    p.branch3_size = static_cast<int>(h.integer("preprocess.branch3_size"));
    p.norm.mean = h.triple("preprocess.norm_mean");
    p.norm.std = h.triple("preprocess.norm_std");
    c.best_qwk = h.real("best_qwk");
    c.epoch = static_cast<int>(h.integer("epoch"));
  } catch (const InvalidInput &e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  const std::size_t count = h.size("param_count");
  std::vector<std::pair<std::string, Shape>> table;
  std::size_t elements = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string &entry = h.str("param." + std::to_string(i));
    const auto colon = entry.rfind(':');
    if (colon == std::string::npos || colon == 0)
      throw FormatError("bad parameter entry: " + entry);
    Shape shape = detail::split_sizes(entry.substr(colon + 1), 'x');
    elements += shape_size(shape);
    table.emplace_back(entry.substr(0, colon), std::move(shape));
  }
  const std::size_t expected = 12 + static_cast<std::size_t>(header_len) + 4 * elements + 4;
  if (buf.size() < expected)
    throw TruncatedError("checkpoint truncated: " + std::to_string(buf.size()) + " bytes, expected " +
                         std::to_string(expected));
  if (buf.size() > expected)
    throw FormatError("trailing bytes after checkpoint");
  if (detail::crc32_of(buf, expected - 4) != detail::get_u32(buf, expected - 4))
    throw ChecksumError("checkpoint CRC-32 mismatch");

  std::size_t off = 12 + header_len;
  for (auto &[name, shape] : table) {
    Tensor<float> &t = c.params.add(name, shape);
    for (auto &v : t.data()) {
      const std::uint32_t bits = detail::get_u32(buf, off);
      std::memcpy(&v, &bits, 4);
      off += 4;
    }
  }
  // the parameter table must be exactly what the stated model would build
  const GradingModel<float> probe(c.model, 0);
  if (probe.params().size() != c.params.size())
    throw FormatError("parameter table does not match model hyperparameters");
  for (std::size_t i = 0; i < c.params.size(); ++i)
    if (probe.params()[i].name != c.params[i].name || probe.params()[i].value.shape() != c.params[i].value.shape())
      throw FormatError("parameter '" + c.params[i].name + "' does not match model hyperparameters");
  return c;
}

inline void save_checkpoint(const Checkpoint &c, const std::filesystem::path &path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  const std::string buf = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write checkpoint " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out)
    throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

inline GradingModel<float> model_from(const Checkpoint &c) { return GradingModel<float>(c.model, c.params); }

} // namespace retgrade
