#pragma once

// Versioned binary checkpoints holding one or more models.
//
// Layout (little-endian):
//   "EKDCKPT\0"  u32 version  u64 header_len  header (JSON)
//   per model, per tensor (params then buffers, canonical order):
//     u32 name_len  name  u8 is_buffer  u32 ndim  u32 dims[ndim]  u64 count
//     count scalars of the header's dtype
//   u64 FNV-1a of every preceding byte

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/errors.hpp"
#include "ekd/model.hpp"
#include "ekd/serialize.hpp"

namespace ekd {

inline constexpr char kCheckpointMagic[8] = {'E', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
struct ModelEntry {
  std::string role;  // "student", "teacher", ...
  ModelSpec spec;
  ParamState<S> params;
};

template <typename S>
struct Checkpoint {
  std::vector<ModelEntry<S>> models;
  json config = json::object();
};

namespace detail {

inline std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  template <typename T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > end_ - pos_) throw TruncatedFileError("checkpoint ends early at byte " + std::to_string(pos_));
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const noexcept { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

template <typename S>
constexpr const char* dtype_name() {
  return std::is_same_v<S, float> ? "f32" : "f64";
}

template <typename S>
void write_tensor(ByteWriter& w, const Tensor<S>& t, bool buffer) {
  w.put(static_cast<std::uint32_t>(t.name.size()));
  w.put_bytes(t.name.data(), t.name.size());
  w.put(static_cast<std::uint8_t>(buffer));
  w.put(static_cast<std::uint32_t>(t.shape.size()));
  for (int d : t.shape) w.put(static_cast<std::uint32_t>(d));
  w.put(static_cast<std::uint64_t>(t.values.size()));
  w.put_bytes(t.values.data(), t.values.size() * sizeof(S));
}

template <typename S, typename Stored>
Tensor<S> read_tensor(ByteReader& r, bool& buffer) {
  Tensor<S> t;
  const auto nlen = r.get<std::uint32_t>();
  const auto* name = r.take(nlen);
  t.name.assign(reinterpret_cast<const char*>(name), nlen);
  buffer = r.get<std::uint8_t>() != 0;
  const auto ndim = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ndim; ++i) t.shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
  const auto count = r.get<std::uint64_t>();
  if (count != shape_size(t.shape)) throw ShapeMismatchError(t.name, "stored count disagrees with stored shape");
  if (count > (std::numeric_limits<std::size_t>::max() / sizeof(Stored)))
    throw TruncatedFileError("implausible tensor size for " + t.name);
  const auto* raw = r.take(static_cast<std::size_t>(count) * sizeof(Stored));
  std::vector<Stored> tmp(static_cast<std::size_t>(count));
  std::memcpy(tmp.data(), raw, tmp.size() * sizeof(Stored));
  t.values.assign(tmp.begin(), tmp.end());
  return t;
}

template <typename S, typename Stored>
std::vector<ModelEntry<S>> read_models(ByteReader& r, const json& header) {
  std::vector<ModelEntry<S>> models;
  for (const auto& m : header.at("models")) {
    ModelEntry<S> e;
    e.role = m.at("role").get<std::string>();
    e.spec = model_spec_from_json(m.at("spec"));
    const auto n = m.at("tensors").get<std::size_t>();
    for (std::size_t i = 0; i < n; ++i) {
      bool buffer = false;
      auto t = read_tensor<S, Stored>(r, buffer);
      (buffer ? e.params.buffers : e.params.params).push_back(std::move(t));
    }
    models.push_back(std::move(e));
  }
  return models;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const Checkpoint<S>& ck, const std::filesystem::path& path) {
  json header{{"dtype", detail::dtype_name<S>()}, {"config", ck.config}, {"models", json::array()}};
  for (const auto& m : ck.models) {
    check_params(m.spec, m.params);
    header["models"].push_back({{"role", m.role},
                                {"spec", to_json(m.spec)},
                                {"tensors", m.params.params.size() + m.params.buffers.size()}});
  }
  const std::string h = header.dump();
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint64_t>(h.size()));
  w.put_bytes(h.data(), h.size());
  for (const auto& m : ck.models) {
    for (const auto& t : m.params.params) detail::write_tensor(w, t, false);
    for (const auto& t : m.params.buffers) detail::write_tensor(w, t, true);
  }
  auto& bytes = w.bytes();
  const auto sum = detail::fnv1a(bytes.data(), bytes.size());
  w.put(sum);
  write_file_bytes(path, bytes);
}

template <typename S>
void save_checkpoint(const ParamState<S>& params, const ModelSpec& spec, const json& config,
                     const std::filesystem::path& path) {
  save_checkpoint(Checkpoint<S>{{{"model", spec, params}}, config}, path);
}

// Returns nothing partial: any defect throws before a Checkpoint is built.
template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const MissingDatasetError&) {
    throw Error("cannot open checkpoint " + path.string());
  }
  constexpr std::size_t fixed = sizeof kCheckpointMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw MalformedFileError(path.string() + " is not a checkpoint");
  if (bytes.size() < fixed + sizeof(std::uint64_t)) throw TruncatedFileError(path.string() + " is truncated");

  detail::ByteReader r(bytes, bytes.size() - sizeof(std::uint64_t));
  r.take(sizeof kCheckpointMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
  const auto hlen = r.get<std::uint64_t>();
  if (hlen > bytes.size()) throw TruncatedFileError("checkpoint header runs past end of file");
  const auto* h = r.take(static_cast<std::size_t>(hlen));
  json header;
  try {
    header = json::parse(std::string(reinterpret_cast<const char*>(h), static_cast<std::size_t>(hlen)));
  } catch (const json::exception& e) {
    throw MalformedFileError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint<S> ck;
  ck.config = header.value("config", json::object());
  const auto dtype = header.at("dtype").get<std::string>();
  if (dtype == "f32")
    ck.models = detail::read_models<S, float>(r, header);
  else if (dtype == "f64")
    ck.models = detail::read_models<S, double>(r, header);
  else
    throw MalformedFileError("unknown checkpoint dtype " + dtype);

  if (r.pos() != bytes.size() - sizeof(std::uint64_t))
    throw TruncatedFileError("checkpoint payload size disagrees with its header");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + r.pos(), sizeof stored);
  if (stored != detail::fnv1a(bytes.data(), r.pos())) throw TruncatedFileError("checkpoint checksum mismatch");
  for (const auto& m : ck.models) check_params(m.spec, m.params);
  return ck;
}

// Loads and verifies that each stored model fits the expected spec.
template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path, const std::vector<ModelSpec>& expected) {
  auto ck = load_checkpoint<S>(path);
  if (ck.models.size() != expected.size())
    throw ShapeMismatchError("<models>", "checkpoint holds " + std::to_string(ck.models.size()) +
                                             " models, expected " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) check_params(expected[i], ck.models[i].params);
  return ck;
}

}  // namespace ekd
