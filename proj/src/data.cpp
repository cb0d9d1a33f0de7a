#include "vitfl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "vitfl/error.hpp"
#include "vitfl/rng.hpp"

namespace vitfl {

LabeledDataset LabeledDataset::from_bytes(std::size_t channels, std::size_t height, std::size_t width,
                                          std::size_t num_classes, std::vector<std::uint8_t> pixels,
                                          std::vector<int> labels, Provenance provenance) {
  LabeledDataset d;
  d.channels_ = channels, d.height_ = height, d.width_ = width, d.num_classes_ = num_classes;
  d.bytes_ = std::move(pixels);
  d.labels_ = std::move(labels);
  d.provenance_ = provenance;
  if (d.bytes_.size() != d.labels_.size() * d.sample_size())
    throw ShapeError("dataset: pixel buffer does not match sample count");
  d.check_invariants();
  return d;
}

LabeledDataset LabeledDataset::from_floats(std::size_t channels, std::size_t height, std::size_t width,
                                           std::size_t num_classes, std::vector<float> pixels,
                                           std::vector<int> labels, Provenance provenance) {
  LabeledDataset d;
  d.channels_ = channels, d.height_ = height, d.width_ = width, d.num_classes_ = num_classes;
  d.floats_ = std::move(pixels);
  d.labels_ = std::move(labels);
  d.provenance_ = provenance;
  if (d.floats_.size() != d.labels_.size() * d.sample_size())
    throw ShapeError("dataset: pixel buffer does not match sample count");
  for (float v : d.floats_)
    if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("dataset: pixel value outside [0, 1]");
  d.check_invariants();
  return d;
}

void LabeledDataset::check_invariants() const {
  if (num_classes_ < 2) throw FormatError("dataset: num_classes must be at least 2");
  for (int y : labels_)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes_)
      throw FormatError("dataset: label " + std::to_string(y) + " out of range");
}

double LabeledDataset::pixel(std::size_t sample, std::size_t offset) const {
  const std::size_t i = sample * sample_size() + offset;
  return bytes_.empty() ? static_cast<double>(floats_[i]) : static_cast<double>(bytes_[i]) / 255.0;
}

void LabeledDataset::copy_features(std::size_t i, std::span<double> out) const {
  const std::size_t n = sample_size();
  if (out.size() != n) throw ShapeError("copy_features: output size mismatch");
  if (bytes_.empty()) {
    const float* src = floats_.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(src[j]);
  } else {
    const std::uint8_t* src = bytes_.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(src[j]) / 255.0;
  }
}

Tensor LabeledDataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = sample_size();
  std::vector<double> values(indices.size() * n);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw ShapeError("batch: sample index out of range");
    copy_features(indices[k], std::span<double>(values.data() + k * n, n));
  }
  return Tensor::from({indices.size(), channels_, height_, width_}, std::move(values));
}

std::vector<int> LabeledDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels_.at(i));
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t n = sample_size();
  std::vector<int> labels = batch_labels(indices);
  if (bytes_.empty()) {
    std::vector<float> px;
    px.reserve(indices.size() * n);
    for (std::size_t i : indices) px.insert(px.end(), floats_.begin() + i * n, floats_.begin() + (i + 1) * n);
    return from_floats(channels_, height_, width_, num_classes_, std::move(px), std::move(labels), provenance_);
  }
  std::vector<std::uint8_t> px;
  px.reserve(indices.size() * n);
  for (std::size_t i : indices) px.insert(px.end(), bytes_.begin() + i * n, bytes_.begin() + (i + 1) * n);
  return from_bytes(channels_, height_, width_, num_classes_, std::move(px), std::move(labels), provenance_);
}

std::vector<std::size_t> LabeledDataset::count_per_class() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (int y : labels_) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

std::vector<std::vector<std::size_t>> LabeledDataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(num_classes_);
  for (std::size_t i = 0; i < labels_.size(); ++i) out[static_cast<std::size_t>(labels_[i])].push_back(i);
  return out;
}

LabeledDataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(origin + ": truncated file (" + std::to_string(bytes.size()) +
                      " bytes is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  std::vector<std::uint8_t> pixels;
  pixels.reserve(records * (kCifarRecordBytes - 1));
  std::vector<int> labels;
  labels.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses) {
      throw FormatError(origin + ": record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]) + " > 9");
    }
    labels.push_back(rec[0]);
    pixels.insert(pixels.end(), rec + 1, rec + kCifarRecordBytes);
  }
  return LabeledDataset::from_bytes(3, 32, 32, kCifarClasses, std::move(pixels), std::move(labels),
                                    Provenance::Cifar10Binary);
}

LabeledDataset load_cifar10(const std::vector<std::filesystem::path>& paths) {
  std::vector<std::uint8_t> all;
  for (const auto& p : paths) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw Error("cannot open CIFAR-10 file '" + p.string() + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    // Validate per file so errors name the offending path.
    parse_cifar10(buf, p.string());
    all.insert(all.end(), buf.begin(), buf.end());
  }
  if (all.empty()) throw FormatError("CIFAR-10: no records in the given files (empty dataset)");
  return parse_cifar10(all, "CIFAR-10");
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("dataset.num_classes", "must be at least 2");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0)
    throw ConfigError("dataset.image_size", "image dimensions must be positive");
  const std::size_t c = spec.channels, h = spec.height, w = spec.width, n = c * h * w;

  // Prototype per class: 0.5 background plus two signed Gaussian blobs per channel.
  std::vector<std::vector<double>> protos(spec.num_classes, std::vector<double>(n, 0.5));
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Rng rng(derive_seed({spec.seed, 0x9407, k}));
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (int blob = 0; blob < 2; ++blob) {
        const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(h);
        const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(w);
        const double sig = rng.uniform(0.12, 0.3) * static_cast<double>(std::min(h, w));
        const double amp = rng.uniform(0.15, 0.35) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            protos[k][(ch * h + y) * w + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sig * sig));
          }
      }
    }
  }

  std::vector<float> pixels;
  pixels.reserve(spec.num_classes * spec.per_class * n);
  std::vector<int> labels;
  labels.reserve(spec.num_classes * spec.per_class);
  const long shift = static_cast<long>(spec.max_shift);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Rng rng(derive_seed({spec.seed, 0x5a3b, k}));
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const long sy = static_cast<long>(rng.below(2 * spec.max_shift + 1)) - shift;
      const long sx = static_cast<long>(rng.below(2 * spec.max_shift + 1)) - shift;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const long py = std::clamp(static_cast<long>(y) - sy, 0L, static_cast<long>(h) - 1);
            const long px = std::clamp(static_cast<long>(x) - sx, 0L, static_cast<long>(w) - 1);
            const double v = protos[k][(ch * h + static_cast<std::size_t>(py)) * w + static_cast<std::size_t>(px)] +
                             spec.noise * rng.normal();
            pixels.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
          }
      labels.push_back(static_cast<int>(k));
    }
  }
  return LabeledDataset::from_floats(c, h, w, spec.num_classes, std::move(pixels), std::move(labels),
                                     Provenance::Synthetic);
}

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ofstream& f, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) f.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_le(std::ifstream& f, int bytes, const std::string& origin) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int ch = f.get();
    if (ch == EOF) throw FormatError(origin + ": truncated synthetic dump");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
  }
  return v;
}

constexpr char kSynthMagic[8] = {'V', 'I', 'T', 'F', 'L', 'S', 'Y', '1'};

}  // namespace

void save_synthetic(const std::filesystem::path& path, const SyntheticSpec& spec,
                    const LabeledDataset& data) {
  if (data.provenance() != Provenance::Synthetic || data.float_pixels().empty())
    throw Error("save_synthetic: dataset is not synthetic");
  if (data.size() != spec.num_classes * spec.per_class)
    throw Error("save_synthetic: dataset does not match spec");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(kSynthMagic, sizeof(kSynthMagic));
  put_u32(f, static_cast<std::uint32_t>(spec.num_classes));
  put_u32(f, static_cast<std::uint32_t>(spec.per_class));
  put_u64(f, spec.seed);
  put_u32(f, static_cast<std::uint32_t>(data.channels()));
  put_u32(f, static_cast<std::uint32_t>(data.height()));
  put_u32(f, static_cast<std::uint32_t>(data.width()));
  for (float v : data.float_pixels()) put_u32(f, std::bit_cast<std::uint32_t>(v));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

LabeledDataset load_synthetic(const std::filesystem::path& path, SyntheticSpec* spec_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || !std::equal(magic, magic + 8, kSynthMagic))
    throw FormatError(path.string() + ": not a synthetic dataset dump");
  const std::string o = path.string();
  SyntheticSpec spec;
  spec.num_classes = get_le(f, 4, o);
  spec.per_class = get_le(f, 4, o);
  spec.seed = get_le(f, 8, o);
  spec.channels = get_le(f, 4, o);
  spec.height = get_le(f, 4, o);
  spec.width = get_le(f, 4, o);
  const std::size_t count = spec.num_classes * spec.per_class;
  const std::size_t n = count * spec.channels * spec.height * spec.width;
  std::vector<float> pixels(n);
  for (float& v : pixels) v = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(f, 4, o)));
  if (f.peek() != EOF) throw FormatError(o + ": trailing bytes after pixel data");
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i / spec.per_class);
  if (spec_out) *spec_out = spec;
  return LabeledDataset::from_floats(spec.channels, spec.height, spec.width, spec.num_classes,
                                     std::move(pixels), std::move(labels), Provenance::Synthetic);
}

}  // namespace vitfl
