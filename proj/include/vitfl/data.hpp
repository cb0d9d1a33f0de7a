#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vitfl/tensor.hpp"

namespace vitfl {

enum class Provenance { Cifar10Binary, Synthetic };

/// Image classification samples [C x H x W] with integer labels. Pixel values
/// are in [0, 1]. CIFAR-10 pixels are kept as bytes (value = byte / 255);
/// synthetic pixels are float32.
class LabeledDataset {
 public:
  LabeledDataset() = default;

  static LabeledDataset from_bytes(std::size_t channels, std::size_t height, std::size_t width,
                                   std::size_t num_classes, std::vector<std::uint8_t> pixels,
                                   std::vector<int> labels, Provenance provenance);
  static LabeledDataset from_floats(std::size_t channels, std::size_t height, std::size_t width,
                                    std::size_t num_classes, std::vector<float> pixels,
                                    std::vector<int> labels, Provenance provenance);

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t sample_size() const noexcept { return channels_ * height_ * width_; }
  Provenance provenance() const noexcept { return provenance_; }

  int label(std::size_t i) const { return labels_[i]; }
  std::span<const int> labels() const noexcept { return labels_; }
  double pixel(std::size_t sample, std::size_t offset) const;

  void copy_features(std::size_t i, std::span<double> out) const;

  /// [m x C x H x W] tensor of the selected samples.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

  LabeledDataset subset(std::span<const std::size_t> indices) const;

  std::vector<std::size_t> count_per_class() const;
  /// Sample indices grouped by label.
  std::vector<std::vector<std::size_t>> indices_by_class() const;

  std::span<const float> float_pixels() const noexcept { return floats_; }

 private:
  void check_invariants() const;

  std::size_t channels_ = 0, height_ = 0, width_ = 0, num_classes_ = 0;
  std::vector<std::uint8_t> bytes_;
  std::vector<float> floats_;
  std::vector<int> labels_;
  Provenance provenance_ = Provenance::Synthetic;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarClasses = 10;

/// Reads CIFAR-10 binary batch files: 3073-byte records of one label byte
/// followed by 1024 R, 1024 G and 1024 B bytes, each plane 32x32 row-major.
/// Throws FormatError for truncated files, labels > 9 or an empty result.
LabeledDataset load_cifar10(const std::vector<std::filesystem::path>& paths);

/// Parses an in-memory CIFAR-10 byte buffer (same rules as load_cifar10).
LabeledDataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin);

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.2;
  std::size_t max_shift = 2;

  bool operator==(const SyntheticSpec&) const = default;
};

/// Class-conditional Gaussian-blob images: every class has a prototype made
/// of a few smooth blobs per channel; samples are randomly shifted copies of
/// the prototype with additive pixel noise, clipped to [0, 1]. Samples are
/// ordered class-major. Deterministic in the spec.
LabeledDataset generate_synthetic(const SyntheticSpec& spec);

/// Synthetic dump: magic "VITFLSY1", u32 num_classes, u32 per_class,
/// u64 seed, u32 channels, u32 height, u32 width, then float32 pixels of
/// every sample in class-major order (labels are implied by position).
/// All fields little-endian.
void save_synthetic(const std::filesystem::path& path, const SyntheticSpec& spec,
                    const LabeledDataset& data);
LabeledDataset load_synthetic(const std::filesystem::path& path, SyntheticSpec* spec_out = nullptr);

}  // namespace vitfl
