#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crcnet/dataset.hpp"

namespace crcnet::data {

/// Malformed or truncated file, with the byte offset where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string file, std::size_t offset, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(offset) + ": " + what), file_(std::move(file)), offset_(offset) {}

  const std::string& file() const { return file_; }
  std::size_t offset() const { return offset_; }

 private:
  std::string file_;
  std::size_t offset_;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string(), 0, "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct PnmHeader {
  std::size_t width = 0, height = 0, maxval = 0, payload_offset = 0;
};

// Parses "P5"/"P6", width, height, maxval (with # comments) and the single
// whitespace byte that precedes the raster.
inline PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes, const std::string& file, char kind) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != static_cast<std::uint8_t>(kind)) {
    throw FormatError(file, 0, std::string("bad magic, expected P") + kind);
  }
  pos = 2;
  auto skip_space = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto read_uint = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) throw FormatError(file, start, std::string(field) + " out of range");
      ++pos;
    }
    if (pos == start) throw FormatError(file, pos, std::string("expected ") + field);
    return v;
  };
  PnmHeader h;
  h.width = read_uint("width");
  h.height = read_uint("height");
  h.maxval = read_uint("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError(file, pos, "zero image dimension");
  if (h.maxval != 255) throw FormatError(file, pos, "maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(file, pos, "missing whitespace before raster");
  h.payload_offset = pos + 1;
  return h;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 x H x W image");
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::vector<std::uint8_t> payload(3 * plane);
  auto v = image.values();
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch)
      payload[3 * i + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v[ch * plane + i], 0.0, 1.0) * 255.0));
  detail::write_file(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", payload);
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path.string(), '6');
  const std::size_t plane = h.width * h.height;
  if (bytes.size() < h.payload_offset + 3 * plane) throw FormatError(path.string(), bytes.size(), "truncated raster");
  std::vector<double> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) v[ch * plane + i] = bytes[h.payload_offset + 3 * i + ch] / 255.0;
  return Tensor({3, h.height, h.width}, std::move(v));
}

/// Binary mask as P5 with foreground = 255.
inline void write_pgm(const std::filesystem::path& path, const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("write_pgm: expected H x W mask");
  std::vector<std::uint8_t> payload(mask.size());
  auto v = mask.values();
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = v[i] > 0.5 ? 255 : 0;
  detail::write_file(path, "P5\n" + std::to_string(mask.dim(1)) + " " + std::to_string(mask.dim(0)) + "\n255\n",
                     payload);
}

inline Tensor read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_pnm_header(bytes, path.string(), '5');
  const std::size_t plane = h.width * h.height;
  if (bytes.size() < h.payload_offset + plane) throw FormatError(path.string(), bytes.size(), "truncated raster");
  std::vector<double> v(plane);
  for (std::size_t i = 0; i < plane; ++i) v[i] = bytes[h.payload_offset + i] >= 128 ? 1.0 : 0.0;
  return Tensor({h.height, h.width}, std::move(v));
}

inline constexpr const char* kManifestName = "manifest.txt";

/// Writes images/NNNNN.ppm, masks/NNNNN.pgm and the manifest under `root`.
/// Returns the manifest path.
inline std::filesystem::path save_dataset(const Dataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ostringstream manifest;
  manifest << "CRCDATA v1 size=" << ds.height << "x" << ds.width << " seed=" << ds.seed << "\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    std::ostringstream stem;
    stem << std::setw(5) << std::setfill('0') << i;
    const std::string image_rel = "images/" + stem.str() + ".ppm";
    const std::string mask_rel = "masks/" + stem.str() + ".pgm";
    write_ppm(root / image_rel, ds.samples[i].image);
    write_pgm(root / mask_rel, ds.samples[i].mask);
    manifest << image_rel << " " << mask_rel << " " << ds.samples[i].category << "\n";
  }
  const fs::path path = root / kManifestName;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest.str();
  return path;
}

/// Accepts the manifest path or the directory containing it.
inline Dataset load_dataset(std::filesystem::path manifest_path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(manifest_path)) manifest_path /= kManifestName;
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw FormatError(manifest_path.string(), 0, "cannot open manifest");
  const fs::path root = manifest_path.parent_path();
  std::string line;
  std::size_t offset = 0;
  std::getline(in, line);
  Dataset ds;
  {
    std::istringstream hs(line);
    std::string magic, version, size_field, seed_field;
    hs >> magic >> version >> size_field >> seed_field;
    if (magic != "CRCDATA" || version != "v1") throw FormatError(manifest_path.string(), 0, "bad manifest header");
    unsigned long long h = 0, w = 0, seed = 0;
    if (std::sscanf(size_field.c_str(), "size=%llux%llu", &h, &w) != 2 ||
        std::sscanf(seed_field.c_str(), "seed=%llu", &seed) != 1) {
      throw FormatError(manifest_path.string(), 0, "malformed manifest header fields");
    }
    ds.height = h;
    ds.width = w;
    ds.seed = seed;
  }
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string image_rel, mask_rel;
    int category = -1;
    if (!(ls >> image_rel >> mask_rel >> category) || category < 0) {
      throw FormatError(manifest_path.string(), line_offset, "malformed record");
    }
    ImageSample s{read_ppm(root / image_rel), read_pgm(root / mask_rel), category};
    if (s.image.dim(1) != ds.height || s.image.dim(2) != ds.width || s.mask.dim(0) != ds.height ||
        s.mask.dim(1) != ds.width) {
      throw FormatError(manifest_path.string(), line_offset, "record size differs from header: " + image_rel);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace crcnet::data
