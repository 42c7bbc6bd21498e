// Checkpoint container.
//
//   bytes 0..7   magic "CFCKPT01"
//   u32          format version (1)
//   u64          header length L
//   L bytes      JSON header: {"config", "params": [{"name", "shape"}...],
//                "epoch", "step", "optimizer": null | {"type": "adam", "t",
//                "lr", "beta1", "beta2", "eps"}, "meta": {...}}
//   payload      float32 little-endian: every parameter in header order, then
//                (when optimizer is present) all first moments, then all
//                second moments in the same order.
//
// Readers accept any minor change to the header (unknown keys are ignored);
// the version number changes only if the payload layout does.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibformer/error.hpp"
#include "calibformer/network/config.hpp"
#include "calibformer/network/params.hpp"

namespace calibformer {

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct AdamState {
  long t = 0;
  double lr = 5e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<std::vector<float>> m, v;  // parallel to Checkpoint::params
};

struct Checkpoint {
  NetworkConfig config;
  std::vector<NamedArray> params;
  int epoch = 0;
  long step = 0;
  std::optional<AdamState> optimizer;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_floats(std::ostream& out, const std::vector<float>& values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &values[i], 4);
    for (int k = 0; k < 4; ++k) buf[4 * i + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  void bytes(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error(ErrorCode::kMalformedFile, what_ + ": truncated");
  }
  std::uint64_t uint(int width) {
    unsigned char b[8];
    bytes(b, static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::vector<float> floats(std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    bytes(buf.data(), buf.size());
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(buf[4 * i + k]) << (8 * k);
      std::memcpy(&out[i], &u, 4);
    }
    return out;
  }

 private:
  std::istream& in_;
  std::string what_;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : ck.params) params.push_back({{"name", p.name}, {"shape", p.shape}});
  nlohmann::json header = {{"format", "calibformer-checkpoint"},
                           {"config", ck.config},
                           {"params", params},
                           {"epoch", ck.epoch},
                           {"step", ck.step},
                           {"optimizer", nullptr},
                           {"meta", ck.meta}};
  if (ck.optimizer) {
    const AdamState& a = *ck.optimizer;
    if (a.m.size() != ck.params.size() || a.v.size() != ck.params.size()) {
      throw Error(ErrorCode::kConfig, "optimizer state does not match parameter list");
    }
    header["optimizer"] = {{"type", "adam"}, {"t", a.t}, {"lr", a.lr},
                           {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
  }
  const std::string text = header.dump();
  // Write to a sibling temp file and rename, so a crash never leaves a torn checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : ck.params) detail::put_floats(out, p.values);
    if (ck.optimizer) {
      for (const auto& m : ck.optimizer->m) detail::put_floats(out, m);
      for (const auto& v : ck.optimizer->v) detail::put_floats(out, v);
    }
    if (!out) throw Error(ErrorCode::kIo, "error writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  detail::Reader r(in, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw Error(ErrorCode::kMalformedFile, path.string() + ": not a calibformer checkpoint");
  }
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kMalformedFile, path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = r.uint(8);
  if (len > (1u << 30)) throw Error(ErrorCode::kMalformedFile, path.string() + ": implausible header length");
  std::string text(len, '\0');
  r.bytes(text.data(), text.size());
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.config = header.at("config").get<NetworkConfig>();
    ck.epoch = header.value("epoch", 0);
    ck.step = header.value("step", 0L);
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& p : header.at("params")) {
      ck.params.push_back({p.at("name").get<std::string>(), p.at("shape").get<std::vector<int>>(), {}});
    }
    if (!header.at("optimizer").is_null()) {
      const auto& o = header.at("optimizer");
      AdamState a;
      a.t = o.at("t").get<long>();
      a.lr = o.at("lr").get<double>();
      a.beta1 = o.at("beta1").get<double>();
      a.beta2 = o.at("beta2").get<double>();
      a.eps = o.at("eps").get<double>();
      ck.optimizer = a;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedFile, path.string() + ": bad header: " + e.what());
  }
  auto count = [](const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
  };
  for (auto& p : ck.params) p.values = r.floats(count(p.shape));
  if (ck.optimizer) {
    for (const auto& p : ck.params) ck.optimizer->m.push_back(r.floats(count(p.shape)));
    for (const auto& p : ck.params) ck.optimizer->v.push_back(r.floats(count(p.shape)));
  }
  return ck;
}

template <class S>
std::vector<NamedArray> snapshot_params(const ParamStore<S>& ps) {
  std::vector<NamedArray> out;
  for (const auto& [name, var] : ps.entries()) {
    out.push_back({name, var.shape(), std::vector<float>(var.value().begin(), var.value().end())});
  }
  return out;
}

/// Copies stored values into `ps`. With `strict`, every parameter must be
/// present with the same shape; otherwise only matching names are copied
/// (pretrained initialization). Returns the number of parameters copied.
template <class S>
std::size_t restore_params(ParamStore<S>& ps, const std::vector<NamedArray>& arrays, bool strict) {
  std::size_t copied = 0;
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& [name, var] : ps.entries()) {
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second->shape != var.shape()) {
      if (strict) throw Error(ErrorCode::kConfig, "checkpoint lacks parameter " + name + " " + ag::shape_str(var.shape()));
      continue;
    }
    auto& dst = ag::Var<S>(var).mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(it->second->values[i]);
    ++copied;
  }
  if (strict && arrays.size() != ps.size()) throw Error(ErrorCode::kConfig, "checkpoint has extra parameters");
  return copied;
}

}  // namespace calibformer
