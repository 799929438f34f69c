#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cpmlho/batch.hpp"

namespace cpmlho::train {
class FinalEvaluation;
}

namespace cpmlho::data {

inline constexpr std::uint32_t kImageMagic = 0x00000803;
inline constexpr std::uint32_t kLabelMagic = 0x00000801;
inline constexpr int kNumClasses = 10;

/// Grayscale images kept as raw bytes; batches are scaled to [0, 1] on gather.
struct ImageDataset {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
  std::string images_sha256;
  std::string labels_sha256;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return rows * cols; }

  /// Images [n x 1 x rows x cols] divided by 255, with labels.
  Batch gather(std::span<const std::size_t> indices) const;
  Batch all() const;
};

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

/// Parse in-memory IDX payloads. `source` only labels error messages.
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source = "images");
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source = "labels");

std::vector<std::uint8_t> encode_idx_images(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

/// Whole file; a .gz suffix is inflated transparently.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Digest of the decompressed payload, so plain and .gz copies agree.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Format, truncation and pairing errors as the file contents dictate;
/// labels outside 0..9 are a DataError.
ImageDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Writes `dataset` back as an IDX pair.
void write_idx(const ImageDataset& dataset, const std::filesystem::path& images, const std::filesystem::path& labels);

/// Throws DataError when a non-empty expected digest differs.
void verify_digests(const ImageDataset& dataset, const std::string& images_sha256, const std::string& labels_sha256);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded permutation of 0..n-1 cut into a validation tail of round(n * fraction).
Split split_train_val(std::size_t n, double val_fraction, std::uint64_t seed);

/// Fisher-Yates over rng.below, so orders replay on every platform.
std::vector<std::size_t> shuffled(std::span<const std::size_t> items, std::uint64_t seed);

/// One epoch: shuffled part cut into batches, last partial batch kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> part, std::size_t batch_size,
                                                    std::uint64_t epoch_seed);

/// Endless batches over a split part, reshuffled on each pass.
class BatchStream {
 public:
  BatchStream(std::vector<std::size_t> part, std::size_t batch_size, std::uint64_t seed);
  const std::vector<std::size_t>& next();
  std::size_t pass() const noexcept { return pass_; }

 private:
  std::vector<std::size_t> part_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t pass_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> current_;
};

/// Only the final-evaluation path can mint one.
class TestSetKey {
  friend class cpmlho::train::FinalEvaluation;
  TestSetKey() = default;
};

/// Training source plus a held-back test set.
class Corpus {
 public:
  Corpus(ImageDataset train_source, ImageDataset test);

  const ImageDataset& train_source() const noexcept { return train_; }
  std::size_t test_size() const noexcept { return test_.size(); }
  const ImageDataset& test(TestSetKey) const noexcept { return test_; }

 private:
  ImageDataset train_;
  ImageDataset test_;
};

/// Learnable stand-in for digit data: one blurred stroke prototype per class,
/// jittered by up to a pixel and overlaid with noise. Labels are uniform.
ImageDataset make_synthetic(std::size_t count, std::size_t side, std::uint64_t seed);

/// Synthetic train and test sources drawn from one set of prototypes.
Corpus make_synthetic_corpus(std::size_t train_count, std::size_t test_count, std::size_t side, std::uint64_t seed);

/// Standard file names (train-images-idx3-ubyte, t10k-labels-idx1-ubyte, ...),
/// plain or .gz, inside `dir`.
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace cpmlho::data
