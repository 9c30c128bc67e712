#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gradflow/error.hpp"
#include "gradflow/rng.hpp"
#include "gradflow/tensor.hpp"

// MNIST-style dataset ingestion: IDX files (raw or gzip, sniffed by magic
// bytes) into [0,1]-scaled image tensors with one-hot labels, plus a
// procedural fallback dataset so everything runs without any downloads.

namespace gradflow {

struct Dataset {
  Tensor4 images;  // N x 1 x 28 x 28, values in [0,1]
  Matrix labels;   // N x 10 one-hot
  std::string split;

  std::size_t size() const { return images.n; }
};

// ---------------------------------------------------------------------------
// IDX parsing

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline bool looks_gzipped(const std::vector<std::uint8_t>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& bytes,
                                        const std::string& path) {
  z_stream strm{};
  if (inflateInit2(&strm, 15 + 32) != Z_OK) {  // auto-detect gzip wrapper
    throw ParseError(path + ": zlib initialization failed");
  }
  std::vector<std::uint8_t> out;
  out.reserve(bytes.size() * 4);
  std::uint8_t chunk[1 << 15];
  strm.next_in = const_cast<std::uint8_t*>(bytes.data());
  strm.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  do {
    strm.next_out = chunk;
    strm.avail_out = sizeof(chunk);
    rc = inflate(&strm, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&strm);
      throw ParseError(path + ": corrupt gzip stream (zlib rc " + std::to_string(rc) + ")");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - strm.avail_out));
  } while (rc != Z_STREAM_END);
  inflateEnd(&strm);
  return out;
}

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  const std::string& path;
  std::size_t offset = 0;

  std::uint32_t read_u32_be(const char* what) {
    if (offset + 4 > bytes.size()) {
      throw ParseError(path + ": truncated " + std::string(what) + " at offset " +
                       std::to_string(offset));
    }
    const std::uint32_t v = (static_cast<std::uint32_t>(bytes[offset]) << 24) |
                            (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
                            (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
                            static_cast<std::uint32_t>(bytes[offset + 3]);
    offset += 4;
    return v;
  }

  void require_payload(std::size_t n) const {
    if (bytes.size() - offset != n) {
      throw ParseError(path + ": payload of " + std::to_string(bytes.size() - offset) +
                       " bytes at offset " + std::to_string(offset) + ", expected " +
                       std::to_string(n));
    }
  }
};

inline std::vector<std::uint8_t> load_idx_bytes(const std::string& path) {
  std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (looks_gzipped(bytes)) return gunzip(bytes, path);
  return bytes;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Big-endian header (magic, count, rows, cols), then count*rows*cols raw
// bytes scaled by 1/255.
inline Tensor4 load_idx_images(const std::string& path) {
  const std::vector<std::uint8_t> bytes = detail::load_idx_bytes(path);
  detail::ByteReader reader{bytes, path};
  const std::uint32_t magic = reader.read_u32_be("magic");
  if (magic != kIdxImagesMagic) {
    throw ParseError(path + ": magic " + std::to_string(magic) + " at offset 0, expected " +
                     std::to_string(kIdxImagesMagic));
  }
  const std::uint32_t count = reader.read_u32_be("count");
  const std::uint32_t rows = reader.read_u32_be("rows");
  const std::uint32_t cols = reader.read_u32_be("cols");
  reader.require_payload(static_cast<std::size_t>(count) * rows * cols);

  Tensor4 images(count, 1, rows, cols);
  for (std::size_t i = 0; i < images.data.size(); ++i) {
    images.data[i] = static_cast<double>(bytes[reader.offset + i]) / 255.0;
  }
  return images;
}

// Big-endian header (magic, count), then count bytes in 0..9.
inline std::vector<int> load_idx_labels(const std::string& path) {
  const std::vector<std::uint8_t> bytes = detail::load_idx_bytes(path);
  detail::ByteReader reader{bytes, path};
  const std::uint32_t magic = reader.read_u32_be("magic");
  if (magic != kIdxLabelsMagic) {
    throw ParseError(path + ": magic " + std::to_string(magic) + " at offset 0, expected " +
                     std::to_string(kIdxLabelsMagic));
  }
  const std::uint32_t count = reader.read_u32_be("count");
  reader.require_payload(count);

  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t v = bytes[reader.offset + i];
    if (v > 9) {
      throw ParseError(path + ": label byte " + std::to_string(v) + " at offset " +
                       std::to_string(reader.offset + i) + " outside 0..9");
    }
    labels[i] = v;
  }
  return labels;
}

inline Matrix one_hot(const std::vector<int>& labels, std::size_t n_c) {
  Matrix out(labels.size(), n_c, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_c) {
      throw LabelError("one_hot: index " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside 0.." + std::to_string(n_c - 1));
    }
    out(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return out;
}

// Looks for <dir>/<stem>-ubyte, then <stem>-ubyte.gz.
namespace detail {

inline std::string find_idx_file(const std::string& dir, const std::string& stem) {
  for (const char* suffix : {"", ".gz"}) {
    const std::string candidate = dir + "/" + stem + suffix;
    std::ifstream probe(candidate, std::ios::binary);
    if (probe) return candidate;
  }
  throw IoError("no " + stem + "[.gz] under " + dir);
}

}  // namespace detail

// split is "train" or "t10k" following the stock MNIST file names.
inline Dataset load_mnist_split(const std::string& dir, const std::string& split) {
  const std::string image_path = detail::find_idx_file(dir, split + "-images-idx3-ubyte");
  const std::string label_path = detail::find_idx_file(dir, split + "-labels-idx1-ubyte");
  Dataset ds;
  ds.images = load_idx_images(image_path);
  std::vector<int> labels = load_idx_labels(label_path);
  if (labels.size() != ds.images.n) {
    throw ParseError(dir + ": " + std::to_string(ds.images.n) + " images vs " +
                     std::to_string(labels.size()) + " labels");
  }
  ds.labels = one_hot(labels, 10);
  ds.split = split;
  return ds;
}

inline Dataset take(const Dataset& ds, std::size_t count) {
  count = std::min(count, ds.size());
  Dataset out;
  out.split = ds.split;
  out.images = Tensor4(count, ds.images.d, ds.images.h, ds.images.w);
  out.labels = Matrix(count, ds.labels.cols);
  const std::size_t img_stride = ds.images.d * ds.images.h * ds.images.w;
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t i = 0; i < img_stride; ++i) {
      out.images.data[s * img_stride + i] = ds.images.data[s * img_stride + i];
    }
    for (std::size_t j = 0; j < ds.labels.cols; ++j) out.labels(s, j) = ds.labels(s, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic fallback dataset

namespace detail {

// Seven-segment glyph geometry. Segment order: top, top-right, bottom-right,
// bottom, bottom-left, top-left, middle.
inline const bool* digit_segments(int digit) {
  static const bool table[10][7] = {
      {true, true, true, true, true, true, false},     // 0
      {false, true, true, false, false, false, false}, // 1
      {true, true, false, true, true, false, true},    // 2
      {true, true, true, true, false, false, true},    // 3
      {false, true, true, false, false, true, true},   // 4
      {true, false, true, true, false, true, true},    // 5
      {true, false, true, true, true, true, true},     // 6
      {true, true, true, false, false, false, false},  // 7
      {true, true, true, true, true, true, true},      // 8
      {true, true, true, true, false, true, true},     // 9
  };
  return table[digit];
}

inline void fill_rect(Tensor4& img, std::size_t s, int top, int left, int bottom, int right,
                      double value) {
  for (int i = std::max(top, 0); i <= std::min(bottom, 27); ++i) {
    for (int j = std::max(left, 0); j <= std::min(right, 27); ++j) {
      double& cell = img(s, 0, static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      cell = std::min(1.0, std::max(cell, value));
    }
  }
}

// Renders digit `c`, variant `v` (16 geometric variants), at offset (dy, dx)
// with the given stroke intensity.
inline void draw_glyph(Tensor4& img, std::size_t s, int c, int v, int dy, int dx,
                       double intensity) {
  const int thick = 1 + (v & 1);            // stroke half-width 1..2
  const int width = 8 + ((v >> 1) & 3);     // glyph width 8..11
  const int height = 14 + ((v >> 3) & 1) * 2;  // glyph height 14..16
  const int top = 6 + dy;
  const int left = 9 + dx;
  const int mid = top + height / 2;
  const int bottom = top + height;
  const int right = left + width;

  const bool* seg = digit_segments(c);
  if (seg[0]) fill_rect(img, s, top, left, top + thick, right, intensity);
  if (seg[1]) fill_rect(img, s, top, right - thick, mid, right, intensity);
  if (seg[2]) fill_rect(img, s, mid, right - thick, bottom, right, intensity);
  if (seg[3]) fill_rect(img, s, bottom - thick, left, bottom, right, intensity);
  if (seg[4]) fill_rect(img, s, mid, left, bottom, left + thick, intensity);
  if (seg[5]) fill_rect(img, s, top, left, mid, left + thick, intensity);
  if (seg[6]) fill_rect(img, s, mid - thick / 2, left, mid + (thick + 1) / 2, right, intensity);
}

}  // namespace detail

// Deterministic digit-like dataset: 16 glyph variants per class, jittered
// per sample by translation, stroke intensity and pixel noise. Everything
// derives from (seed, sample index), so the dataset is identical run to run.
inline Dataset synthetic_dataset(std::size_t count, std::uint64_t seed,
                                 const std::string& split) {
  Dataset ds;
  ds.split = split;
  ds.images = Tensor4(count, 1, 28, 28, 0.0);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int digit = static_cast<int>(i % 10);
    const int variant = static_cast<int>((i / 10) % 16);
    Rng rng(derive_seed(seed, i));
    const int dy = static_cast<int>(rng.below(5)) - 2;
    const int dx = static_cast<int>(rng.below(5)) - 2;
    const double intensity = 0.75 + 0.25 * rng.unit();
    detail::draw_glyph(ds.images, i, digit, variant, dy, dx, intensity);
    for (std::size_t px = 0; px < 28 * 28; ++px) {
      const double noise = 0.04 * rng.unit();
      double& cell = ds.images.data[i * 28 * 28 + px];
      cell = std::min(1.0, cell + noise);
    }
    labels[i] = digit;
  }
  ds.labels = one_hot(labels, 10);
  return ds;
}

// ---------------------------------------------------------------------------
// batching

struct Batch {
  Tensor4 images;
  Matrix labels;
};

// Deterministic under (seed, epoch): an epoch visits every sample at most
// once, in dataset order unless shuffled by a per-epoch Fisher-Yates pass.
// A trailing batch smaller than min_batch is dropped; training uses
// min_batch = 2 (batch-norm minimum), evaluation uses 1 to cover everything.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                std::size_t epoch, std::size_t min_batch = 2)
      : ds_(ds), batch_size_(batch_size), min_batch_(min_batch), order_(ds.size()) {
    if (batch_size_ == 0) throw UsageError("batches: batch size must be positive");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (shuffle && ds.size() > 1) {
      Rng rng(derive_seed(seed, epoch));
      for (std::size_t i = ds.size() - 1; i > 0; --i) {
        const std::size_t j = rng.below(i + 1);
        std::swap(order_[i], order_[j]);
      }
    }
  }

  std::optional<Batch> next() {
    const std::size_t remaining = order_.size() - cursor_;
    if (remaining == 0) return std::nullopt;
    std::size_t n = std::min(batch_size_, remaining);
    if (n < batch_size_ && n < min_batch_) return std::nullopt;  // dropped trailing batch

    Batch batch;
    batch.images = Tensor4(n, ds_.images.d, ds_.images.h, ds_.images.w);
    batch.labels = Matrix(n, ds_.labels.cols);
    const std::size_t img_stride = ds_.images.d * ds_.images.h * ds_.images.w;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t src = order_[cursor_ + s];
      for (std::size_t i = 0; i < img_stride; ++i) {
        batch.images.data[s * img_stride + i] = ds_.images.data[src * img_stride + i];
      }
      for (std::size_t j = 0; j < ds_.labels.cols; ++j) {
        batch.labels(s, j) = ds_.labels(src, j);
      }
    }
    cursor_ += n;
    return batch;
  }

  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset& ds_;
  std::size_t batch_size_;
  std::size_t min_batch_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline BatchIterator batches(const Dataset& ds, std::size_t batch_size, bool shuffle,
                             std::uint64_t seed, std::size_t epoch) {
  return BatchIterator(ds, batch_size, shuffle, seed, epoch);
}

}  // namespace gradflow
