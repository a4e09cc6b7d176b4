#include "cdlab/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"

namespace cdlab {

namespace {

constexpr char kMagic[5] = {'C', 'D', 'L', 'A', 'B'};

template <class T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void put_str(std::string& out, std::string_view s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    }
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  std::string get_str() {
    auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::set(std::string key, std::string value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  meta.emplace_back(std::move(key), std::move(value));
}

const std::string& Checkpoint::get(std::string_view key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw FormatError("checkpoint (" + kind + ") has no meta key '" + std::string(key) + "'");
}

bool Checkpoint::has(std::string_view key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return true;
  }
  return false;
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
  for (const auto& [n, t] : records) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint (" + kind + ") has no record '" + std::string(name) + "'");
}

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put_str(out, kind);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    put_str(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.values()) put<double>(out, v);
  }
  return out;
}

Checkpoint Checkpoint::parse(std::string_view bytes) {
  Reader r(bytes);
  if (r.raw(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw FormatError("not a CDLAB checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.kind = r.get_str();
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.get_str();
    auto v = r.get_str();
    c.meta.emplace_back(std::move(k), std::move(v));
  }
  const auto n_rec = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_rec; ++i) {
    auto name = r.get_str();
    const auto ndim = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::uint64_t>());
    std::vector<double> data(numel_of(shape));
    for (auto& v : data) v = r.get<double>();
    c.records.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint records");
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, ckpt.serialize());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return Checkpoint::parse(read_file(path));
}

}  // namespace cdlab
