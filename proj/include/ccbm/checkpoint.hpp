#pragma once

// Binary checkpoint:
//   "CCBM" | u16 version | u32 d, C, K, J, hidden | u8 layernorm
//   then every tensor of visit_tensors() order as f64, column-major, little-endian.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ccbm/error.hpp"
#include "ccbm/model.hpp"

namespace ccbm {

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void put(std::uint64_t v, int width) {
    for (int b = 0; b < width; ++b) buf_.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
  }
  void raw(const char* s, std::size_t n) { buf_.insert(buf_.end(), s, s + n); }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> b) : buf_(std::move(b)) {}
  std::uint64_t get(int width) {
    if (pos_ + static_cast<std::size_t>(width) > buf_.size()) fail(Errc::Corrupt, "checkpoint is truncated");
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * b);
    return v;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize(const ModelParams& p) {
  validate_params(p);
  detail::ByteWriter w;
  w.raw("CCBM", 4);
  w.put(kCheckpointVersion, 2);
  for (int v : {p.dims.d, p.dims.concepts, p.dims.classes, p.dims.tasks, p.dims.hidden})
    w.put(static_cast<std::uint32_t>(v), 4);
  w.put(p.layernorm ? 1 : 0, 1);
  visit_tensors(
      [&](std::string_view, const auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) w.put(std::bit_cast<std::uint64_t>(t.data()[i]), 8);
      },
      p);
  return w.bytes();
}

inline ModelParams deserialize(std::vector<unsigned char> bytes) {
  if (bytes.size() < 4 || std::string(bytes.begin(), bytes.begin() + 4) != "CCBM")
    fail(Errc::Corrupt, "missing CCBM magic");
  detail::ByteReader r(std::vector<unsigned char>(bytes.begin() + 4, bytes.end()));
  const auto version = r.get(2);
  if (version != kCheckpointVersion) fail(Errc::VersionMismatch, "checkpoint version " + std::to_string(version));
  ModelDims dims;
  dims.d = static_cast<int>(r.get(4));
  dims.concepts = static_cast<int>(r.get(4));
  dims.classes = static_cast<int>(r.get(4));
  dims.tasks = static_cast<int>(r.get(4));
  dims.hidden = static_cast<int>(r.get(4));
  const auto ln = r.get(1);
  if (ln > 1) fail(Errc::Corrupt, "bad layernorm flag");
  try {
    dims.validate();
  } catch (const Error& e) {
    fail(Errc::Corrupt, std::string("checkpoint header: ") + e.what());
  }
  // Shapes come from a fresh init; every value is then overwritten.
  ModelParams p = init_params(dims, 0, ln == 1);
  visit_tensors(
      [&](std::string_view, auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = std::bit_cast<double>(r.get(8));
      },
      p);
  if (r.remaining() != 0) fail(Errc::Corrupt, "checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  validate_params(p);
  return p;
}

inline void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
  const auto bytes = serialize(p);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::Io, "cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(Errc::Io, "write failed for " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::Io, "cannot open checkpoint " + path.string());
  return deserialize(std::vector<unsigned char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
}

/// Loads and insists the checkpoint matches the data it will be applied to.
inline ModelParams load_checkpoint(const std::filesystem::path& path, int d, int C, int K, int J) {
  ModelParams p = load_checkpoint(path);
  const auto& m = p.dims;
  if (m.d != d || m.concepts != C || m.classes != K || m.tasks != J)
    fail(Errc::DimMismatch, "checkpoint dims (d=" + std::to_string(m.d) + ", C=" + std::to_string(m.concepts) +
                                ", K=" + std::to_string(m.classes) + ", J=" + std::to_string(m.tasks) +
                                ") do not match the dataset (d=" + std::to_string(d) + ", C=" + std::to_string(C) +
                                ", K=" + std::to_string(K) + ", J=" + std::to_string(J) + ")");
  return p;
}

}  // namespace ccbm
