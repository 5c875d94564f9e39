#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/model_params.hpp"

namespace crcnet::model {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[] = "CRCN1";

// Layout: "CRCN1", then per tensor: u32 name length, name bytes, u32 rank,
// u32 dims, f32 values. All integers and floats little-endian.
namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(std::vector<std::uint8_t> bytes, std::string file) : bytes_(std::move(bytes)), file_(std::move(file)) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t offset() const { return pos_; }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(file_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  std::vector<std::uint8_t> bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelParams& params) {
  std::string out(kCheckpointMagic, 5);
  params.for_each([&](const std::string& name, const Tensor& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_f32(out, static_cast<float>(v));
  });
  return out;
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

/// Loads values into `params`, whose architecture must match the file:
/// every tensor present, with identical shape, and nothing extra.
inline void load_checkpoint(ModelParams& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  detail::Reader r(std::move(bytes), path.string());
  if (r.str(5) != std::string(kCheckpointMagic, 5)) throw CheckpointError(path.string() + ": bad magic");

  struct Record {
    Shape shape;
    std::vector<float> values;
  };
  std::map<std::string, Record> records;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    if (name_len == 0 || name_len > 4096) {
      throw CheckpointError(path.string() + ": bad tensor name length at byte " + std::to_string(r.offset()));
    }
    std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CheckpointError(path.string() + ": bad rank for tensor " + name);
    Record rec;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      rec.shape.push_back(r.u32());
      count *= rec.shape.back();
    }
    if (count == 0 || count > (1u << 28)) throw CheckpointError(path.string() + ": bad shape for tensor " + name);
    rec.values.resize(count);
    for (float& v : rec.values) v = r.f32();
    records.emplace(std::move(name), std::move(rec));
  }

  std::size_t matched = 0;
  params.for_each([&](const std::string& name, const Tensor& t) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError(path.string() + ": missing tensor " + name);
    if (it->second.shape != t.shape()) {
      throw CheckpointError(path.string() + ": shape mismatch for tensor " + name + ": file " +
                            to_string(it->second.shape) + ", model " + to_string(t.shape()));
    }
    ++matched;
  });
  if (matched != records.size()) {
    for (const auto& [name, rec] : records) {
      bool known = false;
      params.for_each([&](const std::string& n, const Tensor&) { known = known || n == name; });
      if (!known) throw CheckpointError(path.string() + ": unexpected tensor " + name);
    }
  }
  params.for_each([&](const std::string& name, Tensor& t) {
    const auto& rec = records.at(name);
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = rec.values[i];
  });
}

}  // namespace crcnet::model
