#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <string>
#include <vector>

#include "pyrseg/tensor.hpp"

namespace pyrseg {

static_assert(std::endian::native == std::endian::little, "MSVL I/O assumes a little-endian host");

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 60;

// Scalar image (f32) or label (u8) volume, z-major: index = (z*H + y)*W + x.
struct VolumeFile {
  std::array<std::uint64_t, 3> dims{};  // D, H, W
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  DType dtype = DType::f32;
  std::vector<float> f32;        // used when dtype == f32
  std::vector<std::uint8_t> u8;  // used when dtype == u8

  std::uint64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  bool operator==(const VolumeFile&) const = default;

  static VolumeFile image(std::array<std::uint64_t, 3> dims, std::vector<float> v, std::array<double, 3> sp = {1, 1, 1}) {
    VolumeFile f{dims, sp, DType::f32, std::move(v), {}};
    f.validate();
    return f;
  }
  static VolumeFile labels(std::array<std::uint64_t, 3> dims, std::vector<std::uint8_t> v,
                           std::array<double, 3> sp = {1, 1, 1}) {
    VolumeFile f{dims, sp, DType::u8, {}, std::move(v)};
    f.validate();
    return f;
  }

  void validate() const {
    const std::size_t n = dtype == DType::f32 ? f32.size() : u8.size();
    if (n != voxels())
      throw ShapeError("volume: " + std::to_string(n) + " values for dims " + std::to_string(dims[0]) + "x" +
                       std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
    for (double s : spacing)
      if (!(s > 0.0)) throw ContractError("volume: spacing must be positive");
  }
};

namespace detail {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t at) {
  T v;
  std::memcpy(&v, in.data() + at, sizeof(T));
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_volume(const VolumeFile& v) {
  v.validate();
  std::vector<std::uint8_t> out{'M', 'S', 'V', 'L'};
  detail::put(out, kVolumeVersion);
  out.push_back(static_cast<std::uint8_t>(v.dtype));
  out.insert(out.end(), 3, 0);
  for (auto d : v.dims) detail::put(out, d);
  for (auto s : v.spacing) detail::put(out, s);
  if (v.dtype == DType::f32) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.f32.data());
    out.insert(out.end(), p, p + v.f32.size() * sizeof(float));
  } else {
    out.insert(out.end(), v.u8.begin(), v.u8.end());
  }
  return out;
}

inline VolumeFile parse_volume(const std::vector<std::uint8_t>& b) {
  if (b.size() < kVolumeHeaderBytes)
    throw ParseError("volume: truncated header (" + std::to_string(b.size()) + " bytes)", b.size());
  if (std::memcmp(b.data(), "MSVL", 4) != 0) throw ParseError("volume: bad magic", 0);
  const auto version = detail::get<std::uint32_t>(b, 4);
  if (version != kVolumeVersion) throw ParseError("volume: unsupported version " + std::to_string(version), 4);
  VolumeFile v;
  if (b[8] > 1) throw ParseError("volume: unknown dtype code " + std::to_string(b[8]), 8);
  v.dtype = static_cast<DType>(b[8]);
  for (std::size_t i = 9; i < 12; ++i)
    if (b[i] != 0) throw ParseError("volume: reserved byte is not zero", i);
  for (std::size_t a = 0; a < 3; ++a) v.dims[a] = detail::get<std::uint64_t>(b, 12 + 8 * a);
  for (std::size_t a = 0; a < 3; ++a) {
    v.spacing[a] = detail::get<double>(b, 36 + 8 * a);
    if (!(v.spacing[a] > 0.0)) throw ParseError("volume: non-positive spacing", 36 + 8 * a);
  }
  const std::size_t elem = v.dtype == DType::f32 ? 4 : 1;
  const unsigned __int128 wide = static_cast<unsigned __int128>(v.dims[0]) * v.dims[1] * v.dims[2] * elem;
  if (wide > b.size()) throw ParseError("volume: data shorter than dims require", b.size());
  const std::uint64_t n = v.voxels();
  const std::size_t want = kVolumeHeaderBytes + n * elem;
  if (b.size() != want)
    throw ParseError("volume: data length " + std::to_string(b.size() - kVolumeHeaderBytes) + " bytes, expected " +
                         std::to_string(n * elem),
                     std::min(b.size(), want));
  if (v.dtype == DType::f32) {
    v.f32.resize(n);
    std::memcpy(v.f32.data(), b.data() + kVolumeHeaderBytes, n * 4);
  } else {
    v.u8.assign(b.begin() + kVolumeHeaderBytes, b.end());
  }
  return v;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline VolumeFile read_volume(const std::filesystem::path& path) {
  try {
    return parse_volume(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.offset());
  }
}

inline void write_volume(const VolumeFile& v, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_volume(v));
}

// (1, 1, D, H, W) views.
inline Tensor5<float> image_tensor(const VolumeFile& v) {
  if (v.dtype != DType::f32) throw ContractError("image_tensor: volume is not a float image");
  return Tensor5<float>(Shape5{1, 1, static_cast<Index>(v.dims[0]), static_cast<Index>(v.dims[1]),
                               static_cast<Index>(v.dims[2])},
                        v.f32);
}

inline Tensor5<std::uint8_t> label_tensor(const VolumeFile& v) {
  if (v.dtype != DType::u8) throw ContractError("label_tensor: volume is not a label volume");
  return Tensor5<std::uint8_t>(Shape5{1, 1, static_cast<Index>(v.dims[0]), static_cast<Index>(v.dims[1]),
                                      static_cast<Index>(v.dims[2])},
                               v.u8);
}

inline std::array<std::uint64_t, 3> volume_dims(const Shape5& s) {
  return {static_cast<std::uint64_t>(s.d), static_cast<std::uint64_t>(s.h), static_cast<std::uint64_t>(s.w)};
}

// Dataset directory: case_<id>_img.msvl, case_<id>_lbl.msvl and manifest.json.
struct ManifestEntry {
  std::string id;
  std::string split;  // train | val | test
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  int num_classes = 0;
  std::vector<ManifestEntry> cases;

  std::vector<std::string> ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& c : cases)
      if (c.split == split) out.push_back(c.id);
    return out;
  }
};

inline std::filesystem::path case_image_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / ("case_" + id + "_img.msvl");
}
inline std::filesystem::path case_label_path(const std::filesystem::path& dir, const std::string& id) {
  return dir / ("case_" + id + "_lbl.msvl");
}

// 80/10/10 assignment in case order: the first round(0.8 n) train, then round(0.1 n) val, rest test.
inline std::vector<std::string> split_assignment(std::size_t n) {
  const auto train = static_cast<std::size_t>(0.8 * static_cast<double>(n) + 0.5);
  const auto val = std::min(n - train, static_cast<std::size_t>(0.1 * static_cast<double>(n) + 0.5));
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(i < train ? "train" : i < train + val ? "val" : "test");
  return out;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& dir) {
  nlohmann::ordered_json j;
  j["num_classes"] = m.num_classes;
  j["cases"] = nlohmann::ordered_json::array();
  for (const auto& c : m.cases) j["cases"].push_back({{"id", c.id}, {"split", c.split}});
  const auto text = j.dump(2) + "\n";
  write_file_bytes(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  const auto bytes = read_file_bytes(path);
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    m.num_classes = j.at("num_classes").get<int>();
    for (const auto& c : j.at("cases")) {
      ManifestEntry e{c.at("id").get<std::string>(), c.at("split").get<std::string>()};
      if (e.split != "train" && e.split != "val" && e.split != "test")
        throw ConfigError(path.string() + ": case '" + e.id + "' has unknown split '" + e.split + "'");
      m.cases.push_back(e);
    }
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace pyrseg
