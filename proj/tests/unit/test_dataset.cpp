#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <algorithm>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "fedzda/config.hpp"
#include "fedzda/dataset.hpp"
#include "fedzda/errors.hpp"
#include "testing.hpp"

using namespace fedzda;
namespace fsys = std::filesystem;

namespace {

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fsys::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

struct IdxFixture {
  fsys::path images, labels;
  std::vector<std::uint8_t> pixels;
};

// Two 2×3 images with labels 7 and 2.
IdxFixture write_idx(const fsys::path& dir, std::uint32_t image_magic = 0x803, std::uint32_t label_magic = 0x801,
                     std::uint32_t label_count = 2, std::size_t drop_tail = 0) {
  IdxFixture f{dir / "img.idx", dir / "lab.idx", {0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6}};
  std::vector<std::uint8_t> img, lab;
  put_be32(img, image_magic);
  put_be32(img, 2);
  put_be32(img, 2);
  put_be32(img, 3);
  img.insert(img.end(), f.pixels.begin(), f.pixels.end());
  img.resize(img.size() - drop_tail);
  put_be32(lab, label_magic);
  put_be32(lab, label_count);
  lab.push_back(7);
  lab.push_back(2);
  write_bytes(f.images, img);
  write_bytes(f.labels, lab);
  return f;
}

ParseError::Kind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no ParseError";
  return ParseError::Kind::io;
}

}  // namespace

TEST(Idx, FixtureRecoveredExactly) {
  auto dir = fedzda::testing::temp_dir("idx_ok");
  auto f = write_idx(dir);
  auto ds = load_idx(f.images, f.labels);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.height, 2u);
  EXPECT_EQ(ds.width, 3u);
  EXPECT_EQ(ds.channels, 1u);
  EXPECT_EQ(ds.labels, (std::vector<int>{7, 2}));
  for (std::size_t i = 0; i < f.pixels.size(); ++i) EXPECT_EQ(ds.images[i], f.pixels[i] / 255.0f);
}

TEST(Idx, DistinctErrors) {
  auto dir = fedzda::testing::temp_dir("idx_bad");
  auto swapped = write_idx(dir, 0x803, 0x803);
  EXPECT_EQ(kind_of([&] { load_idx(swapped.images, swapped.labels); }), ParseError::Kind::bad_magic);
  try {
    load_idx(swapped.images, swapped.labels);
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("0x00000803"), std::string::npos) << e.what();
  }
  auto count = write_idx(dir, 0x803, 0x801, 3);
  EXPECT_EQ(kind_of([&] { load_idx(count.images, count.labels); }), ParseError::Kind::count_mismatch);
  auto cut = write_idx(dir, 0x803, 0x801, 2, 4);
  EXPECT_EQ(kind_of([&] { load_idx(cut.images, cut.labels); }), ParseError::Kind::truncated);
  EXPECT_EQ(kind_of([&] { load_idx(dir / "missing", dir / "missing"); }), ParseError::Kind::io);
}

TEST(Idx, LabelOutsideClassRangeRejected) {
  auto dir = fedzda::testing::temp_dir("idx_label");
  auto f = write_idx(dir);
  EXPECT_EQ(kind_of([&] { load_idx(f.images, f.labels, 5); }), ParseError::Kind::bad_format);
}

TEST(Idx, BundledMnistSubsetLoads) {
  const auto dir = data_root() / "mnist5k";
  if (!fsys::exists(dir / "train-images-idx3-ubyte.gz")) GTEST_SKIP() << "bundled subset missing";
  auto train = load_idx(dir / "train-images-idx3-ubyte.gz", dir / "train-labels-idx1-ubyte.gz");
  auto test = load_idx(dir / "t10k-images-idx3-ubyte.gz", dir / "t10k-labels-idx1-ubyte.gz");
  EXPECT_EQ(train.size(), 4000u);
  EXPECT_EQ(test.size(), 1000u);
  EXPECT_EQ(train.height, 28u);
  EXPECT_EQ(train.width, 28u);
  for (auto c : train.histogram()) EXPECT_EQ(c, 400u);
  EXPECT_NO_THROW(train.validate());
}

TEST(Idx, FullMnistHasSixtyThousandItems) {
  const auto dir = data_root() / "mnist";
  fsys::path img = dir / "train-images-idx3-ubyte", lab = dir / "train-labels-idx1-ubyte";
  if (!fsys::exists(img)) img += ".gz", lab += ".gz";
  if (!fsys::exists(img)) GTEST_SKIP() << "full MNIST not present under " << dir;
  auto ds = load_idx(img, lab);
  EXPECT_EQ(ds.size(), 60000u);
  EXPECT_EQ(ds.height * ds.width, 784u);
}

TEST(Cifar, SingleRecordRecoveredExactly) {
  auto dir = fedzda::testing::temp_dir("cifar1");
  std::vector<std::uint8_t> rec(3073);
  rec[0] = 6;
  for (std::size_t i = 1; i < rec.size(); ++i) rec[i] = static_cast<std::uint8_t>(i * 7);
  write_bytes(dir / "one.bin", rec);
  auto ds = load_cifar10_file(dir / "one.bin");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 6);
  EXPECT_EQ(ds.channels, 3u);
  EXPECT_EQ(ds.height, 32u);
  for (std::size_t i = 0; i < 3072; ++i) ASSERT_EQ(ds.images[i], rec[i + 1] / 255.0f);
}

TEST(Cifar, TruncationNamesByteOffset) {
  auto dir = fedzda::testing::temp_dir("cifar_cut");
  std::vector<std::uint8_t> rec(3073 * 2 - 10, 1);
  write_bytes(dir / "cut.bin", rec);
  try {
    load_cifar10_file(dir / "cut.bin");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.kind(), ParseError::Kind::truncated);
    EXPECT_NE(std::string(e.what()).find("3073"), std::string::npos) << e.what();
  }
}

TEST(Cifar, BadLabelAndRecordCount) {
  auto dir = fedzda::testing::temp_dir("cifar_bad");
  std::vector<std::uint8_t> rec(3073, 0);
  rec[0] = 10;
  write_bytes(dir / "bad.bin", rec);
  EXPECT_EQ(kind_of([&] { load_cifar10_file(dir / "bad.bin"); }), ParseError::Kind::bad_format);
  rec[0] = 1;
  write_bytes(dir / "test_batch.bin", rec);
  EXPECT_EQ(kind_of([&] { load_cifar10(dir, CifarSplit::test); }), ParseError::Kind::count_mismatch);
}

TEST(Cifar, StandardBatchesHoldFiftyThousand) {
  const auto dir = data_root() / "cifar10";
  if (!fsys::exists(dir / "data_batch_1.bin")) GTEST_SKIP() << "CIFAR-10 not present under " << dir;
  EXPECT_EQ(load_cifar10(dir, CifarSplit::train).size(), 50000u);
}

TEST(Dataset, SubsetAppendAndValidate) {
  auto ds = make_toy_dataset(3, 4, 1);
  EXPECT_EQ(ds.size(), 12u);
  EXPECT_NO_THROW(ds.validate());
  const std::vector<std::size_t> idx{5, 0};
  auto sub = ds.subset(idx);
  EXPECT_EQ(sub.labels, (std::vector<int>{ds.labels[5], ds.labels[0]}));
  EXPECT_TRUE(std::equal(sub.image(0).begin(), sub.image(0).end(), ds.image(5).begin()));
  auto both = sub;
  both.append(ds);
  EXPECT_EQ(both.size(), 14u);
  auto bad = ds;
  bad.labels[0] = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ds;
  bad.images[0] = 1.5f;
  EXPECT_THROW(bad.validate(), ConfigError);
  auto other = make_toy_dataset(3, 1, 1, 1, 4, 4);
  EXPECT_THROW(both.append(other), DimensionError);
}

TEST(Dataset, BatchGathersImages) {
  auto ds = make_toy_dataset(2, 3, 4);
  const std::vector<std::size_t> idx{4, 1};
  auto t = ds.batch<double>(idx);
  EXPECT_EQ(t.shape(), (Shape{2, 1, 8, 8}));
  EXPECT_EQ(t[0], static_cast<double>(ds.image(4)[0]));
  EXPECT_EQ(t[64 + 5], static_cast<double>(ds.image(1)[5]));
}

TEST(ToyDataset, DeterministicBalancedAndClassSeparable) {
  auto a = make_toy_dataset(4, 20, 9);
  auto b = make_toy_dataset(4, 20, 9);
  auto c = make_toy_dataset(4, 20, 10);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.images, c.images);
  for (auto h : a.histogram()) EXPECT_EQ(h, 20u);
  // Class prototypes are shared across noise seeds, so per-class means agree.
  std::vector<double> ma(4 * 64), mc(4 * 64);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t p = 0; p < 64; ++p) {
      ma[a.labels[i] * 64 + p] += a.image(i)[p] / 20.0;
      mc[c.labels[i] * 64 + p] += c.image(i)[p] / 20.0;
    }
  for (std::size_t i = 0; i < ma.size(); ++i) EXPECT_NEAR(ma[i], mc[i], 0.15);
}
