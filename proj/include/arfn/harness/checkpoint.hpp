#pragma once

// Binary checkpoint:
//   "ARFN" | u32 version = 1 | u32 count |
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f32 data[] (row-major)
//   | u32 CRC32 of every preceding byte.
// All integers and floats little-endian. Tensors of other precisions are narrowed to f32 on save.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "arfn/diffnum.hpp"
#include "arfn/errors.hpp"

namespace arfn {

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  bool operator==(const StoredTensor&) const = default;
};

inline constexpr std::uint32_t checkpoint_version = 1;

namespace ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class U>
void put(std::string& buf, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  buf.append(b, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw Error("checkpoint: truncated file");
  }
  const std::string& buf_;
  std::size_t end_, pos_ = 0;
};

inline std::uint32_t crc(const char* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(p), chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace ckpt

inline std::string encode_checkpoint(const std::vector<StoredTensor>& ts) {
  std::string buf = "ARFN";
  ckpt::put<std::uint32_t>(buf, checkpoint_version);
  ckpt::put<std::uint32_t>(buf, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (n != t.data.size()) throw ShapeError("encode_checkpoint", {t.shape, Shape{t.data.size()}}, t.name);
    ckpt::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    ckpt::put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) ckpt::put<std::uint64_t>(buf, d);
    for (float v : t.data) ckpt::put<float>(buf, v);
  }
  ckpt::put<std::uint32_t>(buf, ckpt::crc(buf.data(), buf.size()));
  return buf;
}

inline std::vector<StoredTensor> decode_checkpoint(const std::string& buf) {
  if (buf.size() < 16 || buf.compare(0, 4, "ARFN") != 0) throw Error("checkpoint: bad magic");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, 4);
  if (stored != ckpt::crc(buf.data(), body)) throw Error("checkpoint: CRC mismatch");
  ckpt::Reader r(buf, body);
  r.bytes(4);
  if (const auto v = r.get<std::uint32_t>(); v != checkpoint_version)
    throw Error("checkpoint: unsupported version " + std::to_string(v));
  const auto count = r.get<std::uint32_t>();
  std::vector<StoredTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= t.shape.back();
    }
    if (n > (body - r.pos()) / 4) throw Error("checkpoint: tensor " + t.name + " exceeds file size");
    t.data.resize(n);
    for (auto& v : t.data) v = r.get<float>();
    out.push_back(std::move(t));
  }
  if (r.pos() != body) throw Error("checkpoint: trailing bytes");
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

template <class P>
std::vector<StoredTensor> to_stored(const P& params) {
  std::vector<StoredTensor> out;
  params.visit([&](const std::string& name, const auto& t) {
    StoredTensor s{name, t.shape, {}};
    s.data.reserve(t.data.size());
    for (auto v : t.data) s.data.push_back(static_cast<float>(v));
    out.push_back(std::move(s));
  });
  return out;
}

// Names and shapes must match the parameter set exactly.
template <class P>
void from_stored(P& params, const std::vector<StoredTensor>& ts) {
  std::map<std::string, const StoredTensor*> byname;
  for (const auto& t : ts)
    if (!byname.emplace(t.name, &t).second) throw Error("checkpoint: duplicate tensor " + t.name);
  std::size_t used = 0;
  params.visit([&](const std::string& name, auto& t) {
    auto it = byname.find(name);
    if (it == byname.end()) throw Error("checkpoint: missing tensor " + name);
    if (it->second->shape != t.shape) throw ShapeError("load_checkpoint", {t.shape, it->second->shape}, name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<typename std::decay_t<decltype(t.data)>::value_type>(it->second->data[i]);
    ++used;
  });
  if (used != ts.size()) throw Error("checkpoint: unexpected extra tensors");
}

template <class P>
void save_checkpoint(const std::string& path, const P& params) {
  write_file(path, encode_checkpoint(to_stored(params)));
}

template <class P>
void load_checkpoint(const std::string& path, P& params) {
  from_stored(params, decode_checkpoint(read_file(path)));
}

// Rounds every value to f32 so in-memory parameters equal what a checkpoint reload would give.
template <class P>
void round_to_stored(P& params) {
  params.visit([](const std::string&, auto& t) {
    for (auto& v : t.data) v = static_cast<std::decay_t<decltype(v)>>(static_cast<float>(v));
  });
}

// CRC32 over names, shapes and raw values; used to confirm frozen weights stay unchanged.
template <class P>
std::uint32_t param_hash(const P& params) {
  uLong c = crc32(0L, Z_NULL, 0);
  params.visit([&](const std::string& name, const auto& t) {
    c = crc32(c, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
    for (auto d : t.shape) {
      const std::uint64_t d64 = d;
      c = crc32(c, reinterpret_cast<const Bytef*>(&d64), sizeof d64);
    }
    c = crc32(c, reinterpret_cast<const Bytef*>(t.data.data()), static_cast<uInt>(t.data.size() * sizeof(t.data[0])));
  });
  return static_cast<std::uint32_t>(c);
}

}  // namespace arfn
