#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "pyrseg/config.hpp"
#include "pyrseg/pyramid.hpp"
#include "pyrseg/volume.hpp"

namespace pyrseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "MSCK" u32 version
//   u64 n + n bytes   run config, canonical JSON
//   u64 n + n bytes   regime name
//   u32 phase, u64 iteration
//   u64 n + n bytes   RNG state (std::mt19937_64 text form)
//   u32 networks; per network: u64 adam step, u32 records; per record:
//     u32 n + n bytes name, u32 rank, rank x u64 dims, values, adam_m, adam_v (f32 each)
//   "KCSM"
struct Checkpoint {
  RunConfig config;
  int phase = 1;            // separate regime: level currently being trained
  long iteration = 0;       // completed iterations (global across phases)
  std::string rng_state;
  std::vector<long> adam_steps;  // per network
  PyramidModel<float> model;
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::size_t offset() const { return at_; }
  bool done() const { return at_ == b_.size(); }

  void need(std::size_t n, const char* what) const {
    if (n > b_.size() - at_)
      throw ParseError(std::string("checkpoint: truncated while reading ") + what + " (" + std::to_string(n) +
                           " bytes needed, " + std::to_string(b_.size() - at_) + " left)",
                       at_);
  }
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, b_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(at_), b_.begin() + static_cast<std::ptrdiff_t>(at_ + n));
    at_ += n;
    return s;
  }
  std::string str64(const char* what) { return str(get<std::uint64_t>(what), what); }
  void floats(std::vector<float>& out, const char* what) {
    if (out.size() > (b_.size() - at_) / 4) need(out.size() * 4, what);
    std::memcpy(out.data(), b_.data() + at_, out.size() * 4);
    at_ += out.size() * 4;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t at_ = 0;
};

inline void put_str64(std::vector<std::uint8_t>& out, const std::string& s) {
  put(out, static_cast<std::uint64_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

inline void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  out.insert(out.end(), p, p + v.size() * sizeof(float));
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  using namespace detail;
  if (c.adam_steps.size() != c.model.nets.size()) throw ContractError("checkpoint: one Adam step per network required");
  std::vector<std::uint8_t> out{'M', 'S', 'C', 'K'};
  put(out, kCheckpointVersion);
  put_str64(out, canonical_json(c.config));
  put_str64(out, to_string(c.config.train.regime));
  put(out, static_cast<std::uint32_t>(c.phase));
  put(out, static_cast<std::uint64_t>(c.iteration));
  put_str64(out, c.rng_state);
  put(out, static_cast<std::uint32_t>(c.model.nets.size()));
  for (std::size_t n = 0; n < c.model.nets.size(); ++n) {
    put(out, static_cast<std::uint64_t>(c.adam_steps[n]));
    const auto& params = c.model.nets[n].params();
    put(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      put(out, static_cast<std::uint32_t>(p.name.size()));
      out.insert(out.end(), p.name.begin(), p.name.end());
      put(out, static_cast<std::uint32_t>(p.shape.size()));
      for (Index d : p.shape) put(out, static_cast<std::uint64_t>(d));
      put_floats(out, p.values);
      put_floats(out, p.adam_m);
      put_floats(out, p.adam_v);
    }
  }
  out.insert(out.end(), {'K', 'C', 'S', 'M'});
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& b) {
  detail::ByteReader r(b);
  const auto magic = r.str(4, "magic");
  if (magic != "MSCK") throw ParseError("checkpoint: bad magic (not a checkpoint file)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version) + " (this build reads " +
                         std::to_string(kCheckpointVersion) + ")",
                     4);
  Checkpoint c;
  const auto config_at = r.offset();
  try {
    c.config = parse_run_config(r.str64("config"));
    c.config.validate();
  } catch (const ParseError&) {
    throw ParseError("checkpoint: embedded config is not valid JSON", config_at);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: embedded config rejected: ") + e.what(), config_at);
  }
  const auto regime_at = r.offset();
  if (r.str64("regime") != to_string(c.config.train.regime))
    throw ParseError("checkpoint: regime field disagrees with the embedded config", regime_at);
  c.phase = static_cast<int>(r.get<std::uint32_t>("phase"));
  c.iteration = static_cast<long>(r.get<std::uint64_t>("iteration"));
  c.rng_state = r.str64("rng state");
  const auto pcfg = c.config.pyramid();
  c.model = build_pyramid<float>(pcfg, 0);
  const auto nets_at = r.offset();
  const auto nets = r.get<std::uint32_t>("network count");
  if (nets != c.model.nets.size())
    throw ParseError("checkpoint: " + std::to_string(nets) + " networks stored, config describes " +
                         std::to_string(c.model.nets.size()),
                     nets_at);
  for (auto& net : c.model.nets) {
    c.adam_steps.push_back(static_cast<long>(r.get<std::uint64_t>("adam step")));
    const auto count_at = r.offset();
    const auto count = r.get<std::uint32_t>("record count");
    if (count != net.params().size())
      throw ParseError("checkpoint: " + std::to_string(count) + " parameter records, expected " +
                           std::to_string(net.params().size()),
                       count_at);
    for (auto& p : net.params()) {
      const auto name_at = r.offset();
      const auto name = r.str(r.get<std::uint32_t>("name length"), "name");
      if (name != p.name)
        throw ParseError("checkpoint: record '" + name + "' where '" + p.name + "' was expected", name_at);
      const auto rank_at = r.offset();
      const auto rank = r.get<std::uint32_t>("rank");
      std::vector<Index> shape;
      for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.get<std::uint64_t>("dims")));
      if (shape != p.shape) throw ParseError("checkpoint: record '" + name + "' has a different shape", rank_at);
      r.floats(p.values, "values");
      r.floats(p.adam_m, "adam_m");
      r.floats(p.adam_v, "adam_v");
    }
  }
  if (r.str(4, "trailer") != "KCSM") throw ParseError("checkpoint: bad trailer", r.offset() - 4);
  if (!r.done()) throw ParseError("checkpoint: trailing bytes after the trailer", r.offset());
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  // Write-then-rename so an interrupted run never leaves a half-written checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, serialize_checkpoint(c));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  }
}

}  // namespace pyrseg
