// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "twdpo/error.hpp"
#include "twdpo/tiny_lm.hpp"

namespace twdpo::lm {
namespace {

constexpr char kMagic[4] = {'T', 'W', 'D', 'P'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  void seek(std::size_t p) {
    if (p > bytes_.size()) fail("offset beyond end of file");
    pos_ = p;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorKind::parse_error, path_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated checkpoint");
  }

  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const TinyTransformer& model, const std::string& path) {
  Writer header;
  header.raw(std::string(kMagic, 4));
  header.u32(kCheckpointVersion);
  const std::string cfg = model.config().to_text();
  header.u32(static_cast<std::uint32_t>(cfg.size()));
  header.raw(cfg);

  Writer data;
  const auto guard = model.read();
  const auto& params = guard.parameters();
  header.u32(static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const NamedTensor& p : params) {
    header.u32(static_cast<std::uint32_t>(p.name.size()));
    header.raw(p.name);
    header.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) header.u64(d);
    header.u64(offset);
    for (double v : p.value.values()) data.f64(v);
    offset += p.value.size() * sizeof(double);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::io_error, "cannot write " + path);
  }
  out.write(header.bytes().data(), static_cast<std::streamsize>(header.bytes().size()));
  out.write(data.bytes().data(), static_cast<std::streamsize>(data.bytes().size()));
  if (!out) {
    throw Error(ErrorKind::io_error, "write failed for " + path);
  }
}

TinyTransformer load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::io_error, "cannot open " + path);
  }
  Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}), path);
  if (r.raw(4) != std::string(kMagic, 4)) {
    r.fail("bad magic bytes");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported format version " + std::to_string(version));
  }
  const ModelConfig config = ModelConfig::from_text(r.raw(r.u32()));

  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries(r.u32());
  for (Entry& e : entries) {
    e.name = r.raw(r.u32());
    e.shape.resize(r.u32());
    for (std::size_t& d : e.shape) d = r.u64();
    e.offset = r.u64();
  }
  const std::size_t data_start = r.position();
  std::vector<NamedTensor> params;
  params.reserve(entries.size());
  for (const Entry& e : entries) {
    r.seek(data_start + e.offset);
    std::vector<double> values(numerics::shape_size(e.shape));
    for (double& v : values) v = r.f64();
    params.push_back({e.name, numerics::Tensor(e.shape, std::move(values))});
  }
  return TinyTransformer(config, std::move(params));
}

}  // namespace twdpo::lm
