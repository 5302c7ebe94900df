#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "ekd/data.hpp"

namespace ekd {
namespace {

std::vector<std::uint8_t> random_cifar10_bytes(std::size_t records, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> byte(0, 255), label(0, 9);
  std::vector<std::uint8_t> b(records * kCifar10RecordBytes);
  for (std::size_t i = 0; i < records; ++i) {
    b[i * kCifar10RecordBytes] = static_cast<std::uint8_t>(label(rng));
    for (std::size_t p = 1; p < kCifar10RecordBytes; ++p) b[i * kCifar10RecordBytes + p] = static_cast<std::uint8_t>(byte(rng));
  }
  return b;
}

std::vector<std::uint8_t> random_cifar100_bytes(std::size_t records, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> byte(0, 255), coarse(0, 19), fine(0, 99);
  std::vector<std::uint8_t> b(records * kCifar100RecordBytes);
  for (std::size_t i = 0; i < records; ++i) {
    b[i * kCifar100RecordBytes] = static_cast<std::uint8_t>(coarse(rng));
    b[i * kCifar100RecordBytes + 1] = static_cast<std::uint8_t>(fine(rng));
    for (std::size_t p = 2; p < kCifar100RecordBytes; ++p) b[i * kCifar100RecordBytes + p] = static_cast<std::uint8_t>(byte(rng));
  }
  return b;
}

TEST(ParseCifar10, TenRecordsFrom30730Bytes) {
  const auto set = parse_cifar10(random_cifar10_bytes(10, 1));
  EXPECT_EQ(set.size(), 10u);
  EXPECT_EQ(set.num_classes, 10);
  EXPECT_EQ(set.shape, kCifarShape);
}

TEST(ParseCifar10, SingleZeroRecord) {
  std::vector<std::uint8_t> b(kCifar10RecordBytes, 0);
  b[0] = 7;
  const auto set = parse_cifar10(b);
  ASSERT_EQ(set.size(), 1u);
  EXPECT_EQ(set.labels[0], 7);
  const auto img = set.image(0);
  EXPECT_TRUE(std::all_of(img.begin(), img.end(), [](auto v) { return v == 0; }));
}

TEST(ParseCifar10, PlanesBecomeInterleavedPixels) {
  std::vector<std::uint8_t> b(kCifar10RecordBytes, 0);
  // pixel (row 2, col 5): R plane offset 2*32+5
  b[1 + 0 * 1024 + 69] = 11;
  b[1 + 1 * 1024 + 69] = 22;
  b[1 + 2 * 1024 + 69] = 33;
  const auto set = parse_cifar10(b);
  const auto img = set.image(0);
  EXPECT_EQ(img[69 * 3 + 0], 11);
  EXPECT_EQ(img[69 * 3 + 1], 22);
  EXPECT_EQ(img[69 * 3 + 2], 33);
}

TEST(ParseCifar10, RejectsBadLength) {
  std::vector<std::uint8_t> b(kCifar10RecordBytes + 1, 0);
  EXPECT_THROW(parse_cifar10(b), MalformedFileError);
}

TEST(ParseCifar10, CorruptLabelNamesRecord) {
  auto b = random_cifar10_bytes(5, 2);
  b[3 * kCifar10RecordBytes] = 10;
  try {
    parse_cifar10(b);
    FAIL() << "expected CorruptRecordError";
  } catch (const CorruptRecordError& e) {
    EXPECT_EQ(e.record_index(), 3u);
  }
}

TEST(ParseCifar10, FullTrainLayoutHistogram) {
  // Five 10,000-record files with the official per-class balance.
  std::vector<LabeledImageSet> parts;
  for (int f = 0; f < 5; ++f) {
    std::vector<std::uint8_t> b(10000 * kCifar10RecordBytes, 0);
    for (std::size_t i = 0; i < 10000; ++i) b[i * kCifar10RecordBytes] = static_cast<std::uint8_t>(i % 10);
    parts.push_back(parse_cifar10(b));
  }
  const auto all = concatenate(parts, "train");
  EXPECT_EQ(all.size(), 50000u);
  for (auto c : class_histogram(all)) EXPECT_EQ(c, 5000u);
}

TEST(ParseCifar100, FineAndCoarse) {
  std::vector<std::uint8_t> b(kCifar100RecordBytes, 0);
  b[0] = 3;
  b[1] = 42;
  const auto fine = parse_cifar100(b, Cifar100Labels::fine);
  EXPECT_EQ(fine.size(), 1u);
  EXPECT_EQ(fine.labels[0], 42);
  EXPECT_EQ(fine.num_classes, 100);
  const auto coarse = parse_cifar100(b, Cifar100Labels::coarse);
  EXPECT_EQ(coarse.labels[0], 3);
  EXPECT_EQ(coarse.num_classes, 20);
}

TEST(ParseCifar100, CoarseLabelsBelowTwenty) {
  const auto set = parse_cifar100(random_cifar100_bytes(200, 5), Cifar100Labels::coarse);
  EXPECT_TRUE(std::all_of(set.labels.begin(), set.labels.end(), [](int y) { return y >= 0 && y < 20; }));
}

TEST(ParseCifar100, Errors) {
  EXPECT_THROW(parse_cifar100(std::vector<std::uint8_t>(kCifar10RecordBytes, 0), Cifar100Labels::fine),
               MalformedFileError);
  std::vector<std::uint8_t> b(2 * kCifar100RecordBytes, 0);
  b[kCifar100RecordBytes + 1] = 100;
  try {
    parse_cifar100(b, Cifar100Labels::fine);
    FAIL();
  } catch (const CorruptRecordError& e) {
    EXPECT_EQ(e.record_index(), 1u);
  }
  b[kCifar100RecordBytes + 1] = 0;
  b[kCifar100RecordBytes] = 20;
  EXPECT_THROW(parse_cifar100(b, Cifar100Labels::coarse), CorruptRecordError);
}

TEST(CifarRoundTrip, BytesReproducedExactly) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto b10 = random_cifar10_bytes(7, seed);
    EXPECT_EQ(to_cifar10_bytes(parse_cifar10(b10)), b10);
    const auto b100 = random_cifar100_bytes(7, seed);
    for (auto mode : {Cifar100Labels::fine, Cifar100Labels::coarse})
      EXPECT_EQ(to_cifar100_bytes(parse_cifar100(b100, mode), mode), b100);
  }
}

TEST(CifarRoundTrip, SyntheticExportsToRecordLayout) {
  const auto set = synthetic_blobs(10, 3, kCifarShape, 2.0, 9);
  const auto bytes = to_cifar10_bytes(set);
  EXPECT_EQ(bytes.size(), 30 * kCifar10RecordBytes);
  const auto back = parse_cifar10(bytes);
  EXPECT_EQ(back.pixels, set.pixels);
  EXPECT_EQ(back.labels, set.labels);
  EXPECT_THROW(to_cifar10_bytes(synthetic_blobs(2, 2, {8, 8, 3}, 1.0, 0)), InvalidInputError);
}

LabeledImageSet balanced_set(int classes, int per_class, ImageShape shape = {2, 2, 1}) {
  LabeledImageSet s;
  s.shape = shape;
  s.num_classes = classes;
  s.split_name = "balanced";
  const auto n = static_cast<std::size_t>(classes * per_class);
  s.labels.resize(n);
  s.pixels.resize(n * shape.pixels());
  for (std::size_t i = 0; i < n; ++i) {
    s.labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
    for (std::size_t p = 0; p < shape.pixels(); ++p) s.pixels[i * shape.pixels() + p] = static_cast<std::uint8_t>((i * 7 + p) % 251);
  }
  return s;
}

TEST(StratifiedSubsample, TenPercentOfCifarSizedSet) {
  const auto set = balanced_set(10, 5000);
  const auto sub = stratified_subsample(set, 0.10, 1);
  EXPECT_EQ(sub.size(), 5000u);
  for (auto c : class_histogram(sub)) EXPECT_EQ(c, 500u);
}

TEST(StratifiedSubsample, FullFractionIsIdentity) {
  const auto set = balanced_set(4, 30);
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto sub = stratified_subsample(set, 1.0, seed);
    EXPECT_EQ(sub.labels, set.labels);
    EXPECT_EQ(sub.pixels, set.pixels);
  }
}

TEST(StratifiedSubsample, SeedsChangeIndicesNotCounts) {
  const auto set = balanced_set(10, 5000);
  const auto a = stratified_subsample_indices(set, 0.10, 1);
  const auto b = stratified_subsample_indices(set, 0.10, 2);
  EXPECT_NE(a, b);
  EXPECT_EQ(class_histogram(select(set, a, "a")), class_histogram(select(set, b, "b")));
  EXPECT_EQ(a, stratified_subsample_indices(set, 0.10, 1));
}

TEST(StratifiedSubsample, ProportionsPreservedUpToRounding) {
  // Unbalanced classes: 40, 77, 123, 260 members.
  LabeledImageSet set;
  set.shape = {1, 1, 1};
  set.num_classes = 4;
  const int counts[] = {40, 77, 123, 260};
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < counts[c]; ++i) {
      set.labels.push_back(c);
      set.pixels.push_back(static_cast<std::uint8_t>(i));
    }
  for (double f : {0.05, 0.1, 0.25, 0.5, 1.0}) {
    const auto h = class_histogram(stratified_subsample(set, f, 3));
    for (int c = 0; c < 4; ++c) EXPECT_EQ(h[static_cast<std::size_t>(c)], std::llround(f * counts[c])) << f;
  }
}

TEST(StratifiedSubsample, InfeasibleFraction) {
  const auto set = balanced_set(3, 4);
  EXPECT_THROW(stratified_subsample(set, 0.1, 0), InfeasibleFractionError);
  EXPECT_THROW(stratified_subsample(set, 0.0, 0), InfeasibleFractionError);
  EXPECT_THROW(stratified_subsample(set, 1.5, 0), InfeasibleFractionError);
}

// Nearest-class-mean oracle: means from the even draws of each class, scored
// on the odd ones.
double nearest_mean_accuracy(const LabeledImageSet& set) {
  const std::size_t D = set.shape.pixels();
  const auto K = static_cast<std::size_t>(set.num_classes);
  std::vector<std::vector<double>> mean(K, std::vector<double>(D, 0.0));
  std::vector<int> count(K, 0);
  auto fit = [&](std::size_t i) { return (i / K) % 2 == 0; };
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (!fit(i)) continue;
    const auto y = static_cast<std::size_t>(set.labels[i]);
    const auto img = set.image(i);
    for (std::size_t p = 0; p < D; ++p) mean[y][p] += img[p];
    ++count[y];
  }
  for (std::size_t k = 0; k < K; ++k)
    for (auto& v : mean[k]) v /= count[k];
  std::size_t ok = 0, total = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (fit(i)) continue;
    const auto img = set.image(i);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0;
      for (std::size_t p = 0; p < D; ++p) d += (img[p] - mean[k][p]) * (img[p] - mean[k][p]);
      if (d < best_d) best_d = d, best = k;
    }
    ok += best == static_cast<std::size_t>(set.labels[i]);
    ++total;
  }
  return static_cast<double>(ok) / static_cast<double>(total);
}

TEST(SyntheticBlobs, ShapeAndBalance) {
  const auto set = synthetic_blobs(3, 100, {8, 8, 3}, 5.0, 0);
  EXPECT_EQ(set.size(), 300u);
  EXPECT_EQ(set.pixels.size(), 300u * 192u);
  for (auto c : class_histogram(set)) EXPECT_EQ(c, 100u);
  const auto again = synthetic_blobs(3, 100, {8, 8, 3}, 5.0, 0);
  EXPECT_EQ(set.pixels, again.pixels);
  EXPECT_NE(set.pixels, synthetic_blobs(3, 100, {8, 8, 3}, 5.0, 1).pixels);
}

TEST(SyntheticBlobs, NearestMeanOracleAtZeroSeparationIsChance) {
  const auto set = synthetic_blobs(10, 200, {8, 8, 3}, 0.0, 4);
  EXPECT_NEAR(nearest_mean_accuracy(set), 0.1, 0.04);
}

TEST(SyntheticBlobs, NearestMeanOracleAtLargeSeparation) {
  const auto set = synthetic_blobs(10, 200, {8, 8, 3}, 10.0, 4);
  EXPECT_GE(nearest_mean_accuracy(set), 0.99);
  EXPECT_GE(nearest_mean_accuracy(synthetic_blobs(3, 100, {8, 8, 3}, 5.0, 0)), 0.95);
}

TEST(BatchIterator, CountsForCifarSizedEpoch) {
  const auto set = balanced_set(10, 5000, {1, 1, 1});
  BatchIterator it(set, compute_normalization(set), 128, 0, 0, false);
  EXPECT_EQ(it.num_batches(), 391u);
  for (std::size_t b = 0; b + 1 < it.num_batches(); ++b) EXPECT_EQ(it.batch(b).size(), 128u);
  EXPECT_EQ(it.batch(390).size(), 80u);
}

TEST(BatchIterator, DeterministicAndSeedSensitive) {
  const auto set = balanced_set(5, 40);
  const auto norm = compute_normalization(set);
  for (bool aug : {false, true}) {
    BatchIterator a(set, norm, 16, 7, 3, aug), b(set, norm, 16, 7, 3, aug);
    for (std::size_t k = 0; k < a.num_batches(); ++k) {
      const auto x = a.batch(k), y = b.batch(k);
      EXPECT_EQ(x.labels, y.labels);
      EXPECT_EQ(x.data, y.data);
    }
  }
  BatchIterator e0(set, norm, 16, 7, 0, false), e1(set, norm, 16, 7, 1, false), s8(set, norm, 16, 8, 0, false);
  EXPECT_NE(e0.order(), e1.order());
  EXPECT_NE(e0.order(), s8.order());
}

TEST(BatchIterator, EpochCoversDatasetOnce) {
  const auto set = balanced_set(7, 13);
  BatchIterator it(set, compute_normalization(set), 10, 2, 5, true);
  std::vector<std::size_t> seen;
  for (std::size_t b = 0; b < it.num_batches(); ++b) {
    const auto batch = it.batch(b);
    for (std::size_t k = 0; k < batch.size(); ++k) EXPECT_EQ(batch.labels[k], set.labels[batch.indices[k]]);
    seen.insert(seen.end(), batch.indices.begin(), batch.indices.end());
  }
  std::sort(seen.begin(), seen.end());
  std::vector<std::size_t> all(set.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(seen, all);
}

TEST(BatchIterator, OversizedBatchIsSingleShortBatch) {
  const auto set = balanced_set(2, 3);
  BatchIterator it(set, compute_normalization(set), 100, 0, 0, false);
  ASSERT_EQ(it.num_batches(), 1u);
  EXPECT_EQ(it.batch(0).size(), 6u);
  EXPECT_THROW(BatchIterator(set, compute_normalization(set), 0, 0, 0, false), InvalidInputError);
}

TEST(BatchIterator, NoAugmentationMeansNormalizedSourcePixels) {
  const auto set = synthetic_blobs(3, 5, {6, 5, 3}, 2.0, 1);
  const auto norm = compute_normalization(set);
  BatchIterator it(set, norm, 4, 0, 0, false);
  const auto b = it.batch<double>(1);
  for (int i = 0; i < b.n; ++i) {
    const auto img = set.image(b.indices[static_cast<std::size_t>(i)]);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 5; ++x) {
          const double raw = img[(static_cast<std::size_t>(y) * 5 + x) * 3 + c] / 255.0;
          EXPECT_EQ(b.at(i, c, y, x), (raw - norm.mean[c]) / norm.stddev[c]);
        }
  }
}

TEST(BatchIterator, AugmentationIsPaddedCropWithOptionalFlip) {
  const auto set = synthetic_blobs(2, 6, {10, 10, 3}, 2.0, 3);
  Normalization identity{{0, 0, 0}, {1, 1, 1}};
  BatchIterator it(set, identity, 12, 1, 0, true);
  const auto b = it.batch<double>(0);
  int flips = 0;
  for (int i = 0; i < b.n; ++i) {
    const auto src = set.image(b.indices[static_cast<std::size_t>(i)]);
    bool matched = false;
    for (int flip = 0; flip < 2 && !matched; ++flip)
      for (int dy = -4; dy <= 4 && !matched; ++dy)
        for (int dx = -4; dx <= 4 && !matched; ++dx) {
          bool ok = true;
          for (int y = 0; y < 10 && ok; ++y)
            for (int x = 0; x < 10 && ok; ++x)
              for (int c = 0; c < 3 && ok; ++c) {
                const int sy = y + dy, sx = (flip ? 9 - x : x) + dx;
                const double want = (sy >= 0 && sy < 10 && sx >= 0 && sx < 10)
                                        ? src[(static_cast<std::size_t>(sy) * 10 + sx) * 3 + c] / 255.0
                                        : 0.0;
                ok = b.at(i, c, y, x) == want;
              }
          if (ok) {
            matched = true;
            flips += flip;
          }
        }
    EXPECT_TRUE(matched) << "sample " << i;
  }
  EXPECT_GT(flips, 0);
  EXPECT_LT(flips, b.n);
}

TEST(Normalization, ZeroMeanUnitStdPerChannel) {
  const auto set = synthetic_blobs(4, 50, {8, 8, 3}, 3.0, 2);
  const auto norm = compute_normalization(set);
  BatchIterator it(set, norm, 1000, 0, 0, false);
  const auto b = it.batch<double>(0);
  for (int c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    int n = 0;
    for (int i = 0; i < b.n; ++i)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const double v = b.at(i, c, y, x);
          s += v;
          sq += v * v;
          ++n;
        }
    EXPECT_NEAR(s / n, 0.0, 1e-9);
    EXPECT_NEAR(sq / n, 1.0, 1e-9);
  }
}

}  // namespace
}  // namespace ekd
