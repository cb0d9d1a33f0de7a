#include "vitfl/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "vitfl/error.hpp"

namespace vitfl {

namespace {

constexpr char kMagic[8] = {'V', 'I', 'T', 'F', 'L', 'C', 'K', '1'};

template <typename T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      u |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(origin_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(Entry e) {
  if (numel(e.shape) != e.values.size())
    throw ShapeError("checkpoint entry '" + e.name + "' size does not match its shape");
  if (find(e.name)) throw FormatError("duplicate checkpoint entry '" + e.name + "'");
  entries_.push_back(std::move(e));
}

void Checkpoint::add_params(const std::string& prefix, const ModelParams& params) {
  for (const auto& p : params) add({prefix + p.name, p.shape, p.values});
}

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

bool Checkpoint::has_section(const std::string& prefix) const {
  for (const auto& e : entries_)
    if (e.name.rfind(prefix, 0) == 0) return true;
  return false;
}

double Checkpoint::scalar(const std::string& name) const {
  const Entry* e = find(name);
  if (!e || e->values.size() != 1) throw FormatError("checkpoint has no scalar '" + name + "'");
  return e->values[0];
}

ModelParams Checkpoint::params(const std::string& prefix, const ModelParams& like) const {
  ModelParams out;
  for (const auto& p : like) {
    const Entry* e = find(prefix + p.name);
    if (!e) throw FormatError("checkpoint is missing '" + prefix + p.name + "'");
    if (e->shape != p.shape)
      throw FormatError("checkpoint entry '" + e->name + "' has shape " + to_string(e->shape) +
                        ", expected " + to_string(p.shape));
    out.push_back(NamedArray{p.name, p.shape, e->values, p.kind, p.layer});
  }
  return out;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint64_t>(out, entries_.size());
  for (const auto& e : entries_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_le<std::uint64_t>(out, d);
    for (double v : e.values) put_le<double>(out, v);
  }
  // Write-then-rename so readers never observe a partial file.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf, path.string());
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw FormatError(path.string() + ": not a vitfl checkpoint (bad magic)");
  Checkpoint ck;
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    const std::size_t n = numel(e.shape);
    if (n > buf.size() / 8) throw FormatError(path.string() + ": truncated checkpoint");
    e.values.resize(n);
    for (double& v : e.values) v = r.get<double>();
    ck.add(std::move(e));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after last entry");
  return ck;
}

}  // namespace vitfl
