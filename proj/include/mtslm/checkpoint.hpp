#pragma once

// Checkpoint container:
//   8 bytes  magic "MTSLMCKP"
//   8 bytes  header length, little-endian u64
//   header   compact JSON: format version, model family, config, assigned
//            timescales, RNG state, optimizer scalars, buffer table
//            (name, rows, cols, byte offset), payload size, checksum
//   payload  concatenated little-endian f64 buffers
// The checksum is FNV-1a 64 over the payload bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mtslm/corpus.hpp"
#include "mtslm/errors.hpp"
#include "mtslm/mathkernel.hpp"
#include "mtslm/model.hpp"
#include "mtslm/rng.hpp"
#include "mtslm/train.hpp"

namespace mtslm {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::string_view kCheckpointMagic = "MTSLMCKP";
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct NamedBuffer {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::string family;  // "lm" or "dyck"
  nlohmann::json config;
  nlohmann::json timescales;  // per layer: spec object or null
  std::optional<std::string> rng_state;
  std::optional<OptimizerState> optimizer;  // buffers travel as "opt/<key>"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedBuffer> buffers;  // model parameters, in parameter order

  const Matrix& buffer(const std::string& name) const {
    for (const auto& b : buffers)
      if (b.name == name) return b.value;
    throw FormatError("checkpoint has no buffer named " + name);
  }
};

namespace detail {
inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::vector<const NamedBuffer*> all;
  std::vector<NamedBuffer> opt_buffers;
  for (const auto& b : ck.buffers) all.push_back(&b);
  if (ck.optimizer)
    for (const auto& [key, m] : ck.optimizer->buffers) opt_buffers.push_back({"opt/" + key, m});
  for (const auto& b : opt_buffers) all.push_back(&b);

  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  for (const NamedBuffer* b : all) {
    table.push_back({{"name", b->name}, {"rows", b->value.rows}, {"cols", b->value.cols}, {"offset", payload.size()}});
    const auto* raw = reinterpret_cast<const char*>(b->value.data.data());
    payload.append(raw, b->value.data.size() * sizeof(double));
  }

  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"family", ck.family},
                           {"config", ck.config},
                           {"timescales", ck.timescales},
                           {"rng_state", ck.rng_state ? nlohmann::json(*ck.rng_state) : nlohmann::json()},
                           {"optimizer", ck.optimizer ? nlohmann::json(*ck.optimizer) : nlohmann::json()},
                           {"meta", ck.meta},
                           {"buffers", table},
                           {"payload_bytes", payload.size()},
                           {"checksum", detail::hex64(fnv1a64(payload))}};
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  const std::uint64_t n = text.size();
  out.append(reinterpret_cast<const char*>(&n), sizeof n);
  out += text;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "checkpoint") {
  const std::size_t prefix = kCheckpointMagic.size() + sizeof(std::uint64_t);
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw FormatError(origin + ": not a checkpoint (bad magic)");
  if (bytes.size() < prefix) throw ChecksumError(origin + ": checksum failure (file truncated in prefix)");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + kCheckpointMagic.size(), sizeof header_len);
  if (bytes.size() - prefix < header_len)
    throw ChecksumError(origin + ": checksum failure (file truncated in header)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(prefix, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed header: " + e.what());
  }
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion)
      throw VersionError(origin + ": format version " + std::to_string(version) + " (expected " +
                         std::to_string(kCheckpointVersion) + ")");

    const std::string_view payload = bytes.substr(prefix + header_len);
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (payload.size() != payload_bytes || detail::hex64(fnv1a64(payload)) != header.at("checksum").get<std::string>())
      throw ChecksumError(origin + ": checksum failure (payload " + std::to_string(payload.size()) + " of " +
                          std::to_string(payload_bytes) + " bytes)");

    Checkpoint ck;
    ck.family = header.at("family").get<std::string>();
    ck.config = header.at("config");
    ck.timescales = header.at("timescales");
    if (!header.at("rng_state").is_null()) ck.rng_state = header["rng_state"].get<std::string>();
    if (!header.at("optimizer").is_null()) ck.optimizer = header["optimizer"].get<OptimizerState>();
    ck.meta = header.at("meta");
    for (const auto& entry : header.at("buffers")) {
      NamedBuffer b;
      b.name = entry.at("name").get<std::string>();
      const auto rows = entry.at("rows").get<std::size_t>();
      const auto cols = entry.at("cols").get<std::size_t>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t len = rows * cols * sizeof(double);
      if (offset > payload.size() || payload.size() - offset < len)
        throw FormatError(origin + ": buffer " + b.name + " lies outside the payload");
      b.value = Matrix(rows, cols);
      std::memcpy(b.value.data.data(), payload.data() + offset, len);
      if (b.name.rfind("opt/", 0) == 0) {
        if (!ck.optimizer) throw FormatError(origin + ": optimizer buffer without optimizer state");
        ck.optimizer->buffers[b.name.substr(4)] = std::move(b.value);
      } else {
        ck.buffers.push_back(std::move(b));
      }
    }
    return ck;
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(origin + ": malformed header: " + e.what());
  }
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

namespace detail {
inline void fill_parameters(const ParameterList& params, const Checkpoint& ck) {
  for (Parameter* p : params) {
    const Matrix& m = ck.buffer(p->name);
    if (!m.same_shape(p->value)) throw FormatError("checkpoint buffer " + p->name + " has the wrong shape");
    p->value = m;
  }
}
}  // namespace detail

inline Checkpoint make_checkpoint(LanguageModel& model, const OptimizerState* opt = nullptr, const Rng* rng = nullptr) {
  Checkpoint ck;
  ck.family = "lm";
  ck.config = model.config;
  ck.timescales = nlohmann::json::array();
  for (const auto& t : model.timescales) ck.timescales.push_back(t ? nlohmann::json(*t) : nlohmann::json());
  if (rng) ck.rng_state = rng->state();
  if (opt) ck.optimizer = *opt;
  for (Parameter* p : model.parameters()) ck.buffers.push_back({p->name, p->value});
  return ck;
}

inline Checkpoint make_checkpoint(DyckModel& model, const OptimizerState* opt = nullptr, const Rng* rng = nullptr) {
  Checkpoint ck;
  ck.family = "dyck";
  ck.config = model.config;
  ck.timescales = nlohmann::json::array({model.timescales ? nlohmann::json(*model.timescales) : nlohmann::json()});
  if (rng) ck.rng_state = rng->state();
  if (opt) ck.optimizer = *opt;
  for (Parameter* p : model.parameters()) ck.buffers.push_back({p->name, p->value});
  return ck;
}

inline LanguageModel lm_from_checkpoint(const Checkpoint& ck) {
  if (ck.family != "lm") throw FormatError("checkpoint holds a " + ck.family + " model, not a language model");
  LanguageModel m = build_lm(ck.config.get<LmConfig>(), 0);
  detail::fill_parameters(m.parameters(), ck);
  if (ck.timescales.size() != m.layers.size()) throw FormatError("checkpoint timescale table has wrong layer count");
  for (std::size_t l = 0; l < m.layers.size(); ++l)
    m.timescales[l] = ck.timescales[l].is_null() ? std::nullopt
                                                 : std::optional<TimescaleSpec>(ck.timescales[l].get<TimescaleSpec>());
  return m;
}

inline DyckModel dyck_from_checkpoint(const Checkpoint& ck) {
  if (ck.family != "dyck") throw FormatError("checkpoint holds a " + ck.family + " model, not a Dyck model");
  DyckModel m = build_dyck_model(ck.config.get<DyckModelConfig>(), 0);
  detail::fill_parameters(m.parameters(), ck);
  if (ck.timescales.size() != 1) throw FormatError("checkpoint timescale table has wrong layer count");
  m.timescales = ck.timescales[0].is_null() ? std::nullopt
                                            : std::optional<TimescaleSpec>(ck.timescales[0].get<TimescaleSpec>());
  return m;
}

template <class Model>
void save_checkpoint(Model& model, const std::filesystem::path& path, const OptimizerState* opt = nullptr,
                     const Rng* rng = nullptr) {
  write_checkpoint(path, make_checkpoint(model, opt, rng));
}

/// Restores optimizer and RNG state too when the caller passes somewhere
/// to put them.
inline LanguageModel load_lm_checkpoint(const std::filesystem::path& path, OptimizerState* opt = nullptr,
                                        Rng* rng = nullptr) {
  const Checkpoint ck = read_checkpoint(path);
  if (opt && ck.optimizer) *opt = *ck.optimizer;
  if (rng && ck.rng_state) rng->set_state(*ck.rng_state);
  return lm_from_checkpoint(ck);
}

inline DyckModel load_dyck_checkpoint(const std::filesystem::path& path, OptimizerState* opt = nullptr,
                                      Rng* rng = nullptr) {
  const Checkpoint ck = read_checkpoint(path);
  if (opt && ck.optimizer) *opt = *ck.optimizer;
  if (rng && ck.rng_state) rng->set_state(*ck.rng_state);
  return dyck_from_checkpoint(ck);
}

}  // namespace mtslm
