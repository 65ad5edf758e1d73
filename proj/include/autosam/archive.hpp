#pragma once

// TARC tensor archive: named, typed tensors in one little-endian file.
//   "TARC" 0x01 | u32 count | per tensor: u16 name_len, name, u8 dtype
//   (0=f32, 1=f64, 2=u8), u8 ndim, u32 dims[ndim], raw data

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "autosam/data.hpp"
#include "autosam/nn.hpp"

namespace autosam {

class MissingTensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("tarc: unknown dtype");
}

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::string bytes;  // raw little-endian payload
};

class TensorArchive {
 public:
  void put(ArchiveEntry e) {
    if (e.name.empty() || e.name.size() > 0xffff) throw std::invalid_argument("tarc: bad tensor name");
    if (e.shape.size() > 0xff) throw std::invalid_argument("tarc: too many dims");
    if (e.bytes.size() != numel(e.shape) * dtype_size(e.dtype)) {
      throw std::invalid_argument("tarc: payload size mismatch for " + e.name);
    }
    if (auto it = index_.find(e.name); it != index_.end()) {
      entries_[it->second] = std::move(e);
      return;
    }
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    std::string bytes(t.numel() * sizeof(T), '\0');
    std::memcpy(bytes.data(), t.data().data(), bytes.size());
    put({name, std::is_same_v<T, float> ? DType::f32 : DType::f64, t.shape(), std::move(bytes)});
  }

  void put_text(const std::string& name, const std::string& text) { put({name, DType::u8, {text.size()}, text}); }

  void put_scalar(const std::string& name, double v) {
    std::string bytes(8, '\0');
    std::memcpy(bytes.data(), &v, 8);
    put({name, DType::f64, {1}, std::move(bytes)});
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const ArchiveEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw MissingTensorError("tarc: missing tensor '" + name + "'");
    return entries_[it->second];
  }

  // Copies a stored f32/f64 tensor into `dst` (converting precision).
  template <typename T>
  void read_into(const std::string& name, Tensor<T>& dst) const {
    const ArchiveEntry& e = at(name);
    if (e.shape != dst.shape()) {
      throw DimensionError("tarc: '" + name + "' stored as " + to_string(e.shape) + ", expected " +
                           to_string(dst.shape()));
    }
    auto out = dst.data();
    if (e.dtype == DType::f32) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, e.bytes.data() + 4 * i, 4);
        out[i] = static_cast<T>(f);
      }
    } else if (e.dtype == DType::f64) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        double d;
        std::memcpy(&d, e.bytes.data() + 8 * i, 8);
        out[i] = static_cast<T>(d);
      }
    } else {
      throw FormatError("tarc: '" + name + "' is not a float tensor");
    }
  }

  std::string text(const std::string& name) const {
    const ArchiveEntry& e = at(name);
    if (e.dtype != DType::u8) throw FormatError("tarc: '" + name + "' is not a byte tensor");
    return e.bytes;
  }

  double scalar(const std::string& name) const {
    const ArchiveEntry& e = at(name);
    if (e.dtype != DType::f64 || e.bytes.size() != 8) throw FormatError("tarc: '" + name + "' is not an f64 scalar");
    double v;
    std::memcpy(&v, e.bytes.data(), 8);
    return v;
  }

  const std::vector<ArchiveEntry>& entries() const { return entries_; }

  std::string encode() const {
    std::string out = "TARC";
    out.push_back(char(0x01));
    detail::put_u32(out, std::uint32_t(entries_.size()));
    for (const auto& e : entries_) {
      out.push_back(char(e.name.size() & 0xff));
      out.push_back(char(e.name.size() >> 8));
      out += e.name;
      out.push_back(char(e.dtype));
      out.push_back(char(e.shape.size()));
      for (auto d : e.shape) detail::put_u32(out, std::uint32_t(d));
      out += e.bytes;
    }
    return out;
  }

  static TensorArchive decode(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    if (n < 4 || std::memcmp(p, "TARC", 4) != 0) throw FormatError("tarc: bad magic");
    if (n < 5) throw TruncatedError("tarc: truncated header");
    if (p[4] != 0x01) throw FormatError("tarc: unsupported version " + std::to_string(int(p[4])));
    std::size_t pos = 5;
    auto need = [&](std::size_t k) {
      if (n - pos < k) throw TruncatedError("tarc: truncated at byte " + std::to_string(pos));
    };
    need(4);
    const std::uint32_t count = detail::get_u32(p + pos);
    pos += 4;
    TensorArchive a;
    for (std::uint32_t i = 0; i < count; ++i) {
      ArchiveEntry e;
      need(2);
      const std::size_t len = std::size_t(p[pos]) | std::size_t(p[pos + 1]) << 8;
      pos += 2;
      need(len + 2);
      e.name.assign(bytes, pos, len);
      pos += len;
      if (p[pos] > 2) throw FormatError("tarc: unknown dtype " + std::to_string(int(p[pos])) + " for " + e.name);
      e.dtype = DType(p[pos]);
      const std::size_t ndim = p[pos + 1];
      pos += 2;
      need(4 * ndim);
      unsigned __int128 count_elems = 1;
      for (std::size_t d = 0; d < ndim; ++d) {
        e.shape.push_back(detail::get_u32(p + pos));
        count_elems *= e.shape.back();
        pos += 4;
      }
      const unsigned __int128 payload = count_elems * dtype_size(e.dtype);
      if (payload > n - pos) throw TruncatedError("tarc: truncated payload for " + e.name);
      e.bytes.assign(bytes, pos, std::size_t(payload));
      pos += std::size_t(payload);
      if (a.contains(e.name)) throw FormatError("tarc: duplicate tensor " + e.name);
      a.put(std::move(e));
    }
    if (pos != n) throw FormatError("tarc: " + std::to_string(n - pos) + " trailing bytes");
    return a;
  }

  void save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }

  static TensorArchive load(const std::filesystem::path& path) {
    try {
      return decode(detail::read_file(path));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }

 private:
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
void store_params(TensorArchive& a, const NamedParams<T>& params) {
  for (const auto& [name, p] : params) a.put_tensor(name, p);
}

// Every parameter must be present in the archive.
template <typename T>
void load_params(const TensorArchive& a, const NamedParams<T>& params) {
  for (auto [name, p] : params) a.read_into(name, p);
}

}  // namespace autosam
