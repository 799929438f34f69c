#include "cpmlho/data.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cpmlho/errors.hpp"
#include "cpmlho/rng.hpp"

namespace cpmlho::data {

namespace {

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void expect_header(std::span<const std::uint8_t> bytes, std::size_t header, std::uint32_t magic,
                   const std::string& source) {
  if (bytes.size() < 4) throw TruncationError(source + ": file ends inside the IDX magic");
  const std::uint32_t seen = read_be32(bytes, 0);
  if (seen != magic) {
    throw FormatError(source + ": expected IDX magic " + hex32(magic) + ", found " + hex32(seen));
  }
  if (bytes.size() < header) throw TruncationError(source + ": file ends inside the IDX header");
}

void expect_payload(std::span<const std::uint8_t> bytes, std::size_t header, std::size_t payload,
                    const std::string& source) {
  const std::size_t have = bytes.size() - header;
  if (have < payload) {
    throw TruncationError(source + ": header promises " + std::to_string(payload) + " payload bytes, file has " +
                          std::to_string(have));
  }
  if (have > payload) {
    throw TruncationError(source + ": " + std::to_string(have - payload) + " bytes past the declared payload");
  }
}

}  // namespace

Batch ImageDataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t plane = image_size();
  Batch b{Tensor({indices.size(), 1, rows, cols}), {}};
  b.y.reserve(indices.size());
  auto out = b.x.data();
  for (std::size_t a = 0; a < indices.size(); ++a) {
    const std::size_t i = indices[a];
    if (i >= size()) throw ContractError("gather: index " + std::to_string(i) + " out of " + std::to_string(size()));
    const std::uint8_t* src = pixels.data() + i * plane;
    for (std::size_t p = 0; p < plane; ++p) out[a * plane + p] = src[p] / 255.0;
    b.y.push_back(labels[i]);
  }
  return b;
}

Batch ImageDataset::all() const {
  std::vector<std::size_t> idx(size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather(idx);
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& source) {
  constexpr std::size_t kHeader = 16;
  expect_header(bytes, kHeader, kImageMagic, source);
  IdxImages out;
  out.count = read_be32(bytes, 4);
  out.rows = read_be32(bytes, 8);
  out.cols = read_be32(bytes, 12);
  if (out.rows == 0 || out.cols == 0) throw FormatError(source + ": zero image extent in header");
  expect_payload(bytes, kHeader, out.count * out.rows * out.cols, source);
  out.pixels.assign(bytes.begin() + kHeader, bytes.end());
  return out;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes, const std::string& source) {
  constexpr std::size_t kHeader = 8;
  expect_header(bytes, kHeader, kLabelMagic, source);
  expect_payload(bytes, kHeader, read_be32(bytes, 4), source);
  return {bytes.begin() + kHeader, bytes.end()};
}

std::vector<std::uint8_t> encode_idx_images(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> pixels) {
  if (rows == 0 || cols == 0 || pixels.size() % (rows * cols) != 0) {
    throw ContractError("encode_idx_images: pixel count does not fill whole images");
  }
  std::vector<std::uint8_t> out;
  out.reserve(16 + pixels.size());
  put_be32(out, kImageMagic);
  put_be32(out, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  put_be32(out, kLabelMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (f == nullptr) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    int err = 0;
    const char* msg = gzerror(f, &err);
    const std::string reason = msg ? msg : "";
    gzclose(f);
    if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) throw TruncationError(path.string() + ": " + reason);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

ImageDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto image_bytes = read_bytes(images);
  const auto label_bytes = read_bytes(labels);
  IdxImages img = parse_idx_images(image_bytes, images.string());
  std::vector<std::uint8_t> lab = parse_idx_labels(label_bytes, labels.string());
  if (img.count != lab.size()) {
    throw PairingError(images.string() + " holds " + std::to_string(img.count) + " images but " + labels.string() +
                       " holds " + std::to_string(lab.size()) + " labels");
  }
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab[i] >= kNumClasses) {
      throw DataError(labels.string() + ": label " + std::to_string(lab[i]) + " at record " + std::to_string(i));
    }
  }
  return {img.rows, img.cols, std::move(img.pixels), std::move(lab), sha256_hex(image_bytes), sha256_hex(label_bytes)};
}

void write_idx(const ImageDataset& dataset, const std::filesystem::path& images, const std::filesystem::path& labels) {
  write_bytes(images, encode_idx_images(dataset.rows, dataset.cols, dataset.pixels));
  write_bytes(labels, encode_idx_labels(dataset.labels));
}

void verify_digests(const ImageDataset& dataset, const std::string& images_sha256, const std::string& labels_sha256) {
  if (!images_sha256.empty() && images_sha256 != dataset.images_sha256) {
    throw DataError("image file digest " + dataset.images_sha256 + " differs from expected " + images_sha256);
  }
  if (!labels_sha256.empty() && labels_sha256 != dataset.labels_sha256) {
    throw DataError("label file digest " + dataset.labels_sha256 + " differs from expected " + labels_sha256);
  }
}

std::vector<std::size_t> shuffled(std::span<const std::size_t> items, std::uint64_t seed) {
  std::vector<std::size_t> out(items.begin(), items.end());
  Rng rng(seed);
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

Split split_train_val(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ContractError("validation fraction must lie in (0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n_val == 0 || n_val >= n) {
    throw ContractError("validation fraction leaves an empty part of " + std::to_string(n) + " records");
  }
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  all = shuffled(all, seed);
  Split s;
  s.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
  s.val.assign(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  return s;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> part, std::size_t batch_size,
                                                    std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  if (part.empty()) throw ContractError("cannot batch an empty split part");
  const std::vector<std::size_t> order = shuffled(part, epoch_seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

BatchStream::BatchStream(std::vector<std::size_t> part, std::size_t batch_size, std::uint64_t seed)
    : part_(std::move(part)), batch_size_(batch_size), seed_(seed) {
  current_ = epoch_batches(part_, batch_size_, derive_seed(seed_, pass_));
}

const std::vector<std::size_t>& BatchStream::next() {
  if (cursor_ == current_.size()) {
    ++pass_;
    cursor_ = 0;
    current_ = epoch_batches(part_, batch_size_, derive_seed(seed_, pass_));
  }
  return current_[cursor_++];
}

Corpus::Corpus(ImageDataset train_source, ImageDataset test) : train_(std::move(train_source)), test_(std::move(test)) {
  if (train_.rows != test_.rows || train_.cols != test_.cols) {
    throw DataError("training and test images differ in size");
  }
}

ImageDataset make_synthetic(std::size_t count, std::size_t side, std::uint64_t seed) {
  if (side < 4) throw ContractError("synthetic images need a side of at least 4");
  Rng rng(seed);
  // prototypes: a few random line segments per class, drawn with soft width
  std::vector<std::vector<double>> protos(kNumClasses, std::vector<double>(side * side, 0.0));
  for (auto& proto : protos) {
    for (int seg = 0; seg < 3; ++seg) {
      const double s = static_cast<double>(side - 1);
      const double y0 = rng.uniform(0.15, 0.85) * s, x0 = rng.uniform(0.15, 0.85) * s;
      const double y1 = rng.uniform(0.15, 0.85) * s, x1 = rng.uniform(0.15, 0.85) * s;
      for (std::size_t i = 0; i < side; ++i) {
        for (std::size_t j = 0; j < side; ++j) {
          const double py = static_cast<double>(i) - y0, px = static_cast<double>(j) - x0;
          const double dy = y1 - y0, dx = x1 - x0;
          const double t = std::clamp((py * dy + px * dx) / std::max(dy * dy + dx * dx, 1e-9), 0.0, 1.0);
          const double d2 = (py - t * dy) * (py - t * dy) + (px - t * dx) * (px - t * dx);
          const double w = std::max(1.0, s / 14.0);
          proto[i * side + j] = std::max(proto[i * side + j], std::exp(-d2 / (2 * w * w)));
        }
      }
    }
  }
  ImageDataset d;
  d.rows = d.cols = side;
  d.pixels.resize(count * side * side);
  d.labels.resize(count);
  for (std::size_t a = 0; a < count; ++a) {
    const auto label = static_cast<std::uint8_t>(rng.below(kNumClasses));
    d.labels[a] = label;
    const int sy = static_cast<int>(rng.below(3)) - 1, sx = static_cast<int>(rng.below(3)) - 1;
    const double gain = rng.uniform(0.7, 1.0);
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) {
        const long si = static_cast<long>(i) - sy, sj = static_cast<long>(j) - sx;
        double v = 0.0;
        if (si >= 0 && sj >= 0 && si < static_cast<long>(side) && sj < static_cast<long>(side)) {
          v = gain * protos[label][static_cast<std::size_t>(si) * side + static_cast<std::size_t>(sj)];
        }
        v += 0.15 * rng.normal();
        d.pixels[(a * side + i) * side + j] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
      }
    }
  }
  const auto ib = encode_idx_images(side, side, d.pixels);
  const auto lb = encode_idx_labels(d.labels);
  d.images_sha256 = sha256_hex(ib);
  d.labels_sha256 = sha256_hex(lb);
  return d;
}

Corpus make_synthetic_corpus(std::size_t train_count, std::size_t test_count, std::size_t side, std::uint64_t seed) {
  ImageDataset all = make_synthetic(train_count + test_count, side, seed);
  auto slice = [&](std::size_t from, std::size_t to) {
    ImageDataset d;
    d.rows = d.cols = side;
    const std::size_t px = side * side;
    d.pixels.assign(all.pixels.begin() + static_cast<std::ptrdiff_t>(from * px),
                    all.pixels.begin() + static_cast<std::ptrdiff_t>(to * px));
    d.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(from),
                    all.labels.begin() + static_cast<std::ptrdiff_t>(to));
    return d;
  };
  return Corpus(slice(0, train_count), slice(train_count, train_count + test_count));
}

Corpus load_corpus(const std::filesystem::path& dir) {
  auto find = [&dir](const std::string& stem) {
    for (const char* suffix : {"", ".gz"}) {
      const auto p = dir / (stem + suffix);
      if (std::filesystem::exists(p)) return p;
    }
    throw DataError("no " + stem + "[.gz] in " + dir.string());
  };
  return Corpus(load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte")),
                load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte")));
}

}  // namespace cpmlho::data
