#pragma once

// CIFAR binary ingestion, stratified subsampling, synthetic fixtures and
// deterministic batch production.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ekd/errors.hpp"
#include "ekd/rng.hpp"

namespace ekd {

struct ImageShape {
  int height = 32;
  int width = 32;
  int channels = 3;

  std::size_t pixels() const noexcept {
    return static_cast<std::size_t>(height) * width * channels;
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline constexpr ImageShape kCifarShape{32, 32, 3};
inline constexpr std::size_t kCifarPixelBytes = 3072;
inline constexpr std::size_t kCifar10RecordBytes = 1 + kCifarPixelBytes;
inline constexpr std::size_t kCifar100RecordBytes = 2 + kCifarPixelBytes;

enum class Cifar100Labels { fine, coarse };

// Decoded images (H×W×C, row-major, raw 0..255) with integer labels.
struct LabeledImageSet {
  ImageShape shape = kCifarShape;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  // CIFAR-100 only: the label byte not selected into `labels`.
  std::vector<int> aux_labels;
  int num_classes = 0;
  std::string split_name;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * shape.pixels(), shape.pixels()};
  }
  std::span<std::uint8_t> image(std::size_t i) {
    return {pixels.data() + i * shape.pixels(), shape.pixels()};
  }

  void validate() const {
    if (pixels.size() != labels.size() * shape.pixels())
      throw Error("image set '" + split_name + "': pixel buffer does not match label count");
    if (!aux_labels.empty() && aux_labels.size() != labels.size())
      throw Error("image set '" + split_name + "': auxiliary label count mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || labels[i] >= num_classes)
        throw CorruptRecordError(i, labels[i], num_classes);
  }
};

inline std::vector<std::size_t> class_histogram(const LabeledImageSet& set) {
  std::vector<std::size_t> h(static_cast<std::size_t>(set.num_classes), 0);
  for (int y : set.labels) ++h[static_cast<std::size_t>(y)];
  return h;
}

namespace detail {

// Channel-major planes (R, G, B of H×W each) to interleaved H×W×C.
inline void planes_to_hwc(const std::uint8_t* src, std::uint8_t* dst, const ImageShape& s) {
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (int c = 0; c < s.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) dst[p * s.channels + c] = src[c * plane + p];
}

inline void hwc_to_planes(const std::uint8_t* src, std::uint8_t* dst, const ImageShape& s) {
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (int c = 0; c < s.channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) dst[c * plane + p] = src[p * s.channels + c];
}

}  // namespace detail

inline LabeledImageSet parse_cifar10(std::span<const std::uint8_t> bytes,
                                     std::string split_name = "cifar10") {
  if (bytes.size() % kCifar10RecordBytes != 0)
    throw MalformedFileError("CIFAR-10 data length " + std::to_string(bytes.size()) +
                             " is not a multiple of " + std::to_string(kCifar10RecordBytes));
  const std::size_t n = bytes.size() / kCifar10RecordBytes;
  LabeledImageSet set;
  set.shape = kCifarShape;
  set.num_classes = 10;
  set.split_name = std::move(split_name);
  set.labels.resize(n);
  set.pixels.resize(n * kCifarPixelBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifar10RecordBytes;
    if (rec[0] >= 10) throw CorruptRecordError(i, rec[0], 10);
    set.labels[i] = rec[0];
    detail::planes_to_hwc(rec + 1, set.pixels.data() + i * kCifarPixelBytes, kCifarShape);
  }
  return set;
}

inline LabeledImageSet parse_cifar100(std::span<const std::uint8_t> bytes, Cifar100Labels mode,
                                      std::string split_name = "cifar100") {
  if (bytes.size() % kCifar100RecordBytes != 0)
    throw MalformedFileError("CIFAR-100 data length " + std::to_string(bytes.size()) +
                             " is not a multiple of " + std::to_string(kCifar100RecordBytes));
  const std::size_t n = bytes.size() / kCifar100RecordBytes;
  const bool fine = mode == Cifar100Labels::fine;
  const int bound = fine ? 100 : 20;
  const int aux_bound = fine ? 20 : 100;
  LabeledImageSet set;
  set.shape = kCifarShape;
  set.num_classes = bound;
  set.split_name = std::move(split_name);
  set.labels.resize(n);
  set.aux_labels.resize(n);
  set.pixels.resize(n * kCifarPixelBytes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifar100RecordBytes;
    const int coarse = rec[0];
    const int fine_label = rec[1];
    const int selected = fine ? fine_label : coarse;
    const int other = fine ? coarse : fine_label;
    if (selected >= bound) throw CorruptRecordError(i, selected, bound);
    if (other >= aux_bound) throw CorruptRecordError(i, other, aux_bound);
    set.labels[i] = selected;
    set.aux_labels[i] = other;
    detail::planes_to_hwc(rec + 2, set.pixels.data() + i * kCifarPixelBytes, kCifarShape);
  }
  return set;
}

inline void require_cifar_layout(const LabeledImageSet& set) {
  if (set.shape != kCifarShape)
    throw InvalidInputError("CIFAR record layout requires 32x32x3 images");
}

inline std::vector<std::uint8_t> to_cifar10_bytes(const LabeledImageSet& set) {
  require_cifar_layout(set);
  std::vector<std::uint8_t> out(set.size() * kCifar10RecordBytes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::uint8_t* rec = out.data() + i * kCifar10RecordBytes;
    if (set.labels[i] < 0 || set.labels[i] > 255) throw CorruptRecordError(i, set.labels[i], 256);
    rec[0] = static_cast<std::uint8_t>(set.labels[i]);
    detail::hwc_to_planes(set.image(i).data(), rec + 1, kCifarShape);
  }
  return out;
}

inline std::vector<std::uint8_t> to_cifar100_bytes(const LabeledImageSet& set, Cifar100Labels mode) {
  require_cifar_layout(set);
  if (set.aux_labels.size() != set.size())
    throw InvalidInputError("CIFAR-100 export needs both coarse and fine labels");
  std::vector<std::uint8_t> out(set.size() * kCifar100RecordBytes);
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::uint8_t* rec = out.data() + i * kCifar100RecordBytes;
    const int coarse = mode == Cifar100Labels::coarse ? set.labels[i] : set.aux_labels[i];
    const int fine = mode == Cifar100Labels::fine ? set.labels[i] : set.aux_labels[i];
    rec[0] = static_cast<std::uint8_t>(coarse);
    rec[1] = static_cast<std::uint8_t>(fine);
    detail::hwc_to_planes(set.image(i).data(), rec + 2, kCifarShape);
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDatasetError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto len = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(len);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(len));
  if (!in) throw MalformedFileError("short read from " + path.string());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline LabeledImageSet concatenate(std::span<const LabeledImageSet> parts, std::string split_name) {
  if (parts.empty()) throw InvalidInputError("nothing to concatenate");
  LabeledImageSet out;
  out.shape = parts[0].shape;
  out.num_classes = parts[0].num_classes;
  out.split_name = std::move(split_name);
  for (const auto& p : parts) {
    if (p.shape != out.shape || p.num_classes != out.num_classes)
      throw InvalidInputError("cannot concatenate image sets of different layout");
    out.pixels.insert(out.pixels.end(), p.pixels.begin(), p.pixels.end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.aux_labels.insert(out.aux_labels.end(), p.aux_labels.begin(), p.aux_labels.end());
  }
  return out;
}

struct CifarSplits {
  LabeledImageSet train;
  LabeledImageSet test;
};

// Accepts either the directory holding the .bin files or its parent (the
// directory the official archive extracts into).
inline std::filesystem::path locate_cifar_dir(const std::filesystem::path& root,
                                              const std::string& subdir,
                                              const std::string& probe) {
  if (std::filesystem::exists(root / probe)) return root;
  if (std::filesystem::exists(root / subdir / probe)) return root / subdir;
  throw MissingDatasetError("dataset file '" + probe + "' not found; expected it at " +
                            (root / subdir / probe).string() + " (set EKD_DATA_ROOT or data_root)");
}

inline CifarSplits load_cifar10(const std::filesystem::path& root) {
  const auto dir = locate_cifar_dir(root, "cifar-10-batches-bin", "test_batch.bin");
  std::vector<LabeledImageSet> parts;
  for (int b = 1; b <= 5; ++b) {
    const auto file = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (!std::filesystem::exists(file)) throw MissingDatasetError("missing " + file.string());
    parts.push_back(parse_cifar10(read_file_bytes(file), "train"));
  }
  return {concatenate(parts, "cifar10/train"),
          parse_cifar10(read_file_bytes(dir / "test_batch.bin"), "cifar10/test")};
}

inline CifarSplits load_cifar100(const std::filesystem::path& root, Cifar100Labels mode) {
  const auto dir = locate_cifar_dir(root, "cifar-100-binary", "test.bin");
  if (!std::filesystem::exists(dir / "train.bin"))
    throw MissingDatasetError("missing " + (dir / "train.bin").string());
  return {parse_cifar100(read_file_bytes(dir / "train.bin"), mode, "cifar100/train"),
          parse_cifar100(read_file_bytes(dir / "test.bin"), mode, "cifar100/test")};
}

inline LabeledImageSet select(const LabeledImageSet& set, std::span<const std::size_t> indices,
                              std::string split_name) {
  LabeledImageSet out;
  out.shape = set.shape;
  out.num_classes = set.num_classes;
  out.split_name = std::move(split_name);
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * set.shape.pixels());
  for (auto i : indices) {
    out.labels.push_back(set.labels[i]);
    if (!set.aux_labels.empty()) out.aux_labels.push_back(set.aux_labels[i]);
    auto img = set.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

// Sorted dataset indices; per class round(fraction * count) items chosen by seed.
inline std::vector<std::size_t> stratified_subsample_indices(const LabeledImageSet& set,
                                                             double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InfeasibleFractionError("fraction must lie in (0, 1], got " + std::to_string(fraction));
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(set.num_classes));
  for (std::size_t i = 0; i < set.size(); ++i)
    by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);

  std::vector<std::size_t> chosen;
  if (fraction == 1.0) {
    chosen.resize(set.size());
    std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    return chosen;
  }
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (keep == 0)
      throw InfeasibleFractionError("fraction " + std::to_string(fraction) + " leaves class " +
                                    std::to_string(c) + " empty (" + std::to_string(members.size()) +
                                    " members)");
    Rng rng(derive_seed(seed, {stream::subsample, c}));
    std::shuffle(members.begin(), members.end(), rng);
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

inline LabeledImageSet stratified_subsample(const LabeledImageSet& set, double fraction,
                                            std::uint64_t seed) {
  if (fraction == 1.0) return set;
  const auto idx = stratified_subsample_indices(set, fraction, seed);
  return select(set, idx, set.split_name);
}

// Gaussian blobs around class-specific low-frequency mean patterns. Class
// means are pairwise `separation * noise_sigma` apart (exactly, while the
// class count fits the pattern basis) before 8-bit quantisation.
inline LabeledImageSet synthetic_blobs(int num_classes, int per_class, ImageShape shape,
                                       double separation, std::uint64_t seed,
                                       double noise_sigma = 20.0) {
  if (num_classes < 1 || per_class < 1) throw InvalidInputError("synthetic_blobs: counts must be >= 1");
  if (separation < 0.0) throw InvalidInputError("synthetic_blobs: separation must be >= 0");
  if (shape.height < 1 || shape.width < 1 || shape.channels < 1)
    throw InvalidInputError("synthetic_blobs: bad image shape");

  const std::size_t dim = shape.pixels();
  const int fy = std::min(3, shape.height);
  const int fx = std::min(3, shape.width);

  // Orthonormal DCT-II patterns per channel.
  std::vector<std::vector<double>> basis;
  for (int c = 0; c < shape.channels; ++c)
    for (int ky = 0; ky < fy; ++ky)
      for (int kx = 0; kx < fx; ++kx) {
        std::vector<double> b(dim, 0.0);
        double norm = 0.0;
        for (int y = 0; y < shape.height; ++y)
          for (int x = 0; x < shape.width; ++x) {
            const double v = std::cos(M_PI * ky * (y + 0.5) / shape.height) *
                             std::cos(M_PI * kx * (x + 0.5) / shape.width);
            b[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c] = v;
            norm += v * v;
          }
        for (auto& v : b) v /= std::sqrt(norm);
        basis.push_back(std::move(b));
      }

  Rng rng(derive_seed(seed, {stream::synthetic}));
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t L = basis.size();
  std::vector<std::vector<double>> dirs;
  for (int k = 0; k < num_classes; ++k) {
    std::vector<double> u(L);
    for (auto& v : u) v = gauss(rng);
    if (static_cast<std::size_t>(k) < L)
      for (const auto& prev : dirs) {
        double dot = 0.0;
        for (std::size_t j = 0; j < L; ++j) dot += u[j] * prev[j];
        for (std::size_t j = 0; j < L; ++j) u[j] -= dot * prev[j];
      }
    double n2 = 0.0;
    for (double v : u) n2 += v * v;
    for (auto& v : u) v /= std::sqrt(n2);
    dirs.push_back(std::move(u));
  }

  const double radius = separation * noise_sigma / std::sqrt(2.0);
  std::vector<std::vector<double>> means(static_cast<std::size_t>(num_classes), std::vector<double>(dim, 128.0));
  for (int k = 0; k < num_classes; ++k)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t p = 0; p < dim; ++p)
        means[static_cast<std::size_t>(k)][p] += radius * dirs[static_cast<std::size_t>(k)][j] * basis[j][p];

  LabeledImageSet set;
  set.shape = shape;
  set.num_classes = num_classes;
  set.split_name = "synthetic";
  const std::size_t n = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(per_class);
  set.labels.resize(n);
  set.pixels.resize(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    set.labels[i] = k;
    auto img = set.image(i);
    for (std::size_t p = 0; p < dim; ++p) {
      const double v = means[static_cast<std::size_t>(k)][p] + noise_sigma * gauss(rng);
      img[p] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return set;
}

// Per-channel statistics of pixels scaled to [0, 1].
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

inline Normalization compute_normalization(const LabeledImageSet& set) {
  const auto C = static_cast<std::size_t>(set.shape.channels);
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  const std::size_t per_channel = set.size() * static_cast<std::size_t>(set.shape.height) * set.shape.width;
  for (std::size_t p = 0; p < set.pixels.size(); ++p) {
    const double v = set.pixels[p] / 255.0;
    sum[p % C] += v;
    sq[p % C] += v * v;
  }
  Normalization n{std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    const double m = per_channel ? sum[c] / per_channel : 0.0;
    const double var = per_channel ? sq[c] / per_channel - m * m : 0.0;
    n.mean[c] = m;
    n.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return n;
}

// Normalized images in N×C×H×W order.
template <typename Scalar>
struct ImageBatch {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<Scalar> data;
  std::vector<int> labels;
  std::vector<std::size_t> indices;

  std::size_t size() const noexcept { return static_cast<std::size_t>(n); }
  Scalar at(int i, int ch, int y, int x) const {
    return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
  }
};

template <typename Scalar>
ImageBatch<Scalar> make_batch(const LabeledImageSet& set, std::span<const std::size_t> indices,
                              const Normalization& norm) {
  const auto& s = set.shape;
  ImageBatch<Scalar> b;
  b.n = static_cast<int>(indices.size());
  b.c = s.channels;
  b.h = s.height;
  b.w = s.width;
  b.data.resize(indices.size() * s.pixels());
  b.labels.reserve(indices.size());
  b.indices.assign(indices.begin(), indices.end());
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto img = set.image(indices[k]);
    b.labels.push_back(set.labels[indices[k]]);
    Scalar* out = b.data.data() + k * s.pixels();
    for (int ch = 0; ch < s.channels; ++ch) {
      const double m = norm.mean[static_cast<std::size_t>(ch)];
      const double sd = norm.stddev[static_cast<std::size_t>(ch)];
      for (std::size_t p = 0; p < plane; ++p)
        out[ch * plane + p] = static_cast<Scalar>((img[p * s.channels + ch] / 255.0 - m) / sd);
    }
  }
  return b;
}

// One epoch of batches. Order is a pure function of (dataset, batch_size,
// seed, epoch); augmentation draws are keyed by dataset index as well.
class BatchIterator {
 public:
  static constexpr int kPad = 4;

  BatchIterator(const LabeledImageSet& set, Normalization norm, int batch_size, std::uint64_t seed,
                int epoch, bool augment)
      : set_(&set), norm_(std::move(norm)), batch_size_(batch_size), seed_(seed), epoch_(epoch),
        augment_(augment) {
    if (batch_size < 1) throw InvalidInputError("batch_size must be >= 1");
    order_.resize(set.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {stream::shuffle, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t num_batches() const noexcept {
    return (order_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
  }
  const std::vector<std::size_t>& order() const noexcept { return order_; }

  template <typename Scalar = float>
  ImageBatch<Scalar> batch(std::size_t b) const {
    const std::size_t lo = b * static_cast<std::size_t>(batch_size_);
    const std::size_t hi = std::min(order_.size(), lo + static_cast<std::size_t>(batch_size_));
    std::span<const std::size_t> idx(order_.data() + lo, hi - lo);
    if (!augment_) return make_batch<Scalar>(*set_, idx, norm_);

    LabeledImageSet scratch;
    scratch.shape = set_->shape;
    scratch.num_classes = set_->num_classes;
    scratch.labels.resize(idx.size());
    scratch.pixels.resize(idx.size() * set_->shape.pixels());
    std::vector<std::size_t> local(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      scratch.labels[k] = set_->labels[idx[k]];
      augment_into(idx[k], scratch.image(k));
      local[k] = k;
    }
    auto out = make_batch<Scalar>(scratch, local, norm_);
    out.indices.assign(idx.begin(), idx.end());
    return out;
  }

 private:
  // Zero-padded random crop plus horizontal flip, in raw pixel space.
  void augment_into(std::size_t index, std::span<std::uint8_t> dst) const {
    const auto& s = set_->shape;
    Rng rng(derive_seed(seed_, {stream::augment, static_cast<std::uint64_t>(epoch_), index}));
    std::uniform_int_distribution<int> offset(0, 2 * kPad);
    std::bernoulli_distribution coin(0.5);
    const int dy = offset(rng) - kPad;
    const int dx = offset(rng) - kPad;
    const bool flip = coin(rng);
    const auto src = set_->image(index);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const int sy = y + dy;
        const int sx = (flip ? s.width - 1 - x : x) + dx;
        for (int c = 0; c < s.channels; ++c) {
          std::uint8_t v = 0;
          if (sy >= 0 && sy < s.height && sx >= 0 && sx < s.width)
            v = src[(static_cast<std::size_t>(sy) * s.width + sx) * s.channels + c];
          dst[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] = v;
        }
      }
  }

  const LabeledImageSet* set_;
  Normalization norm_;
  int batch_size_;
  std::uint64_t seed_;
  int epoch_;
  bool augment_;
  std::vector<std::size_t> order_;
};

}  // namespace ekd
