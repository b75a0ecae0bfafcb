#pragma once

// On-disk tensor container: `<stem>.manifest.json` + `<stem>.bin`.
// The payload is raw little-endian, row-major, with byte length equal to
// product(dims) * sizeof(dtype).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbtt/tensor.hpp"

namespace sbtt {

enum class DType { f32, f64, u8 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

inline std::string to_string(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "u8") return DType::u8;
  throw Error("unknown dtype '" + s + "'");
}

struct TensorManifest {
  std::vector<std::size_t> dims;
  DType dtype = DType::f64;
  std::string order = "row-major";
  std::string role;

  std::size_t count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
};

inline nlohmann::json to_json(const TensorManifest& m) {
  return {{"dims", m.dims}, {"dtype", to_string(m.dtype)}, {"order", m.order}, {"role", m.role}};
}

inline TensorManifest manifest_from_json(const nlohmann::json& j) {
  TensorManifest m;
  m.dims = j.at("dims").get<std::vector<std::size_t>>();
  m.dtype = parse_dtype(j.at("dtype").get<std::string>());
  m.order = j.value("order", "row-major");
  if (m.order != "row-major") throw Error("unsupported tensor order '" + m.order + "'");
  m.role = j.value("role", "");
  return m;
}

namespace detail {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + p.string());
}

template <class T>
void append(std::string& buf, T v) {
  v = to_little(v);
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));
}

template <class T>
T extract(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return to_little(v);
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  return stem.string() + ".manifest.json";
}
inline std::filesystem::path payload_path(const std::filesystem::path& stem) {
  return stem.string() + ".bin";
}

inline void write_tensor(const std::filesystem::path& stem, const TensorManifest& m,
                         std::span<const double> data) {
  if (data.size() != m.count()) throw Error("tensor data does not match manifest dims");
  std::string buf;
  buf.reserve(data.size() * dtype_size(m.dtype));
  for (double v : data) {
    switch (m.dtype) {
      case DType::f64: detail::append<double>(buf, v); break;
      case DType::f32: detail::append<float>(buf, static_cast<float>(v)); break;
      case DType::u8: detail::append<std::uint8_t>(buf, static_cast<std::uint8_t>(v)); break;
    }
  }
  detail::write_file(payload_path(stem), buf);
  detail::write_file(manifest_path(stem), to_json(m).dump(2) + "\n");
}

inline void write_tensor(const std::filesystem::path& stem, const TensorManifest& m,
                         std::span<const std::uint8_t> data) {
  if (m.dtype != DType::u8) throw Error("u8 payload requires dtype u8");
  if (data.size() != m.count()) throw Error("tensor data does not match manifest dims");
  detail::write_file(payload_path(stem),
                     std::string(reinterpret_cast<const char*>(data.data()), data.size()));
  detail::write_file(manifest_path(stem), to_json(m).dump(2) + "\n");
}

struct TensorData {
  TensorManifest manifest;
  std::vector<double> values;
};

inline TensorManifest read_manifest(const std::filesystem::path& stem) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(manifest_path(stem)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad manifest " + manifest_path(stem).string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

inline TensorData read_tensor(const std::filesystem::path& stem) {
  TensorData out;
  out.manifest = read_manifest(stem);
  const std::string bytes = detail::read_file(payload_path(stem));
  const std::size_t n = out.manifest.count();
  const std::size_t w = dtype_size(out.manifest.dtype);
  if (bytes.size() != n * w)
    throw Error("payload " + payload_path(stem).string() + " has " + std::to_string(bytes.size()) +
                " bytes, manifest implies " + std::to_string(n * w));
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = bytes.data() + i * w;
    switch (out.manifest.dtype) {
      case DType::f64: out.values[i] = detail::extract<double>(p); break;
      case DType::f32: out.values[i] = detail::extract<float>(p); break;
      case DType::u8: out.values[i] = static_cast<unsigned char>(*p); break;
    }
  }
  return out;
}

inline void save_tensor3(const std::filesystem::path& stem, const Tensor3& t, std::string role,
                         DType dtype = DType::f64) {
  TensorManifest m{{t.dim(0), t.dim(1), t.dim(2)}, dtype, "row-major", std::move(role)};
  write_tensor(stem, m, t.flat());
}

inline Tensor3 load_tensor3(const std::filesystem::path& stem) {
  auto td = read_tensor(stem);
  auto& d = td.manifest.dims;
  if (d.size() == 2) d.insert(d.begin(), 1);
  if (d.size() != 3) throw Error("expected a rank-3 tensor in " + stem.string());
  Tensor3 t(d[0], d[1], d[2]);
  std::copy(td.values.begin(), td.values.end(), t.storage().begin());
  return t;
}

// Batch layout: <stem>.values, <stem>.mask, <stem>.times (each a TensorFile)
// plus <stem>.manifest.json carrying batch-level metadata.
inline void save_batch(const TimeSeriesBatch& b, const std::filesystem::path& stem) {
  validate(b);
  const std::string s = stem.string();
  save_tensor3(s + ".values", b.values, "values");
  TensorManifest mm{{b.trials(), b.time(), b.channels()}, DType::u8, "row-major", "mask"};
  write_tensor(s + ".mask", mm, b.mask.flat());
  TensorManifest tm;
  tm.dtype = DType::f64;
  if (b.per_channel_times) {
    tm.dims = {b.time(), b.channels()};
    tm.role = "sample_times_per_channel";
  } else {
    tm.dims = {b.time()};
    tm.role = "sample_times";
  }
  write_tensor(s + ".times", tm, std::span<const double>(b.sample_times));
  nlohmann::json j = {{"role", "batch"},
                      {"dims", {b.trials(), b.time(), b.channels()}},
                      {"bin_width", b.bin_width},
                      {"channel_names", b.channel_names},
                      {"components", {"values", "mask", "times"}}};
  detail::write_file(manifest_path(stem), j.dump(2) + "\n");
}

inline TimeSeriesBatch load_batch(const std::filesystem::path& stem) {
  const std::string s = stem.string();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(manifest_path(stem)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad batch manifest: " + std::string(e.what()));
  }
  const auto dims = j.at("dims").get<std::vector<std::size_t>>();
  if (dims.size() != 3) throw Error("batch dims must have rank 3");

  TimeSeriesBatch b;
  b.bin_width = j.value("bin_width", 0.01);
  b.channel_names = j.value("channel_names", std::vector<std::string>{});
  b.values = load_tensor3(s + ".values");
  if (b.values.dims() != std::array<std::size_t, 3>{dims[0], dims[1], dims[2]})
    throw Error("values dims disagree with batch manifest");
  auto mask = read_tensor(s + ".mask");
  if (mask.manifest.count() != b.values.size()) throw Error("mask size disagrees with values");
  b.mask = Mask3(dims[0], dims[1], dims[2]);
  for (std::size_t i = 0; i < mask.values.size(); ++i)
    b.mask.storage()[i] = mask.values[i] != 0.0 ? 1 : 0;
  auto times = read_tensor(s + ".times");
  b.per_channel_times = times.manifest.role == "sample_times_per_channel";
  b.sample_times = std::move(times.values);
  canonicalize(b);
  validate(b);
  return b;
}

}  // namespace sbtt
