#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <cstring>
#include <numbers>
#include <set>

#include "pqe/dataset.hpp"
#include "test_util.hpp"

namespace pqe {
namespace {

using testing::TempDir;
using testing::read_bytes;
using testing::write_bytes;

TEST(Normalize, DividesByPeakMagnitude) {
  const std::vector<double> x{0.0, 0.5, -2.0};
  EXPECT_EQ(normalize(x), (std::vector<double>{0.0, 0.25, -1.0}));
}

TEST(Normalize, PeakOneSignalIsUnchanged) {
  const std::vector<double> x{0.25, -1.0, 0.5, 0.999};
  EXPECT_EQ(normalize(x), x);
}

TEST(Normalize, AllZeroIsReturnedUnchanged) {
  const std::vector<float> z(7, 0.0f);
  EXPECT_EQ(normalize(z), z);
}

TEST(Normalize, OffsetSineKeepsShape) {
  std::vector<double> x(2000);
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = std::sin(2.0 * std::numbers::pi * 50.0 * double(k) / 1e4) + 0.1;
  const auto y = normalize(x);
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  EXPECT_DOUBLE_EQ(peak, 1.0);
  // Ratios against a fixed reference sample are preserved.
  for (std::size_t k = 0; k < x.size(); k += 37) EXPECT_NEAR(y[k] / y[50], x[k] / x[50], 1e-12);
}

TEST(Normalize, IsIdempotent) {
  Stream rng(5, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> x(64);
    for (auto& v : x) v = static_cast<float>(rng.uniform(-3.0, 3.0));
    const auto once = normalize(x);
    EXPECT_EQ(normalize(once), once);
  }
}

TEST(Split, EightyTenTenPerClass) {
  std::vector<std::uint8_t> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
  const auto a = stratified_split(labels, 17);
  std::map<std::pair<int, Split>, int> hist;
  for (std::size_t i = 0; i < labels.size(); ++i) ++hist[{labels[i], a.of[i]}];
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ((hist[{c, Split::train}]), 80);
    EXPECT_EQ((hist[{c, Split::val}]), 10);
    EXPECT_EQ((hist[{c, Split::test}]), 10);
  }
  const auto tr = a.indices(Split::train), va = a.indices(Split::val), te = a.indices(Split::test);
  EXPECT_EQ(tr.size() + va.size() + te.size(), labels.size());
  std::set<std::size_t> all(tr.begin(), tr.end());
  all.insert(va.begin(), va.end());
  all.insert(te.begin(), te.end());
  EXPECT_EQ(all.size(), labels.size());
}

TEST(Split, SeedDeterminesAssignment) {
  std::vector<std::uint8_t> labels(300);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
  EXPECT_EQ(stratified_split(labels, 4).of, stratified_split(labels, 4).of);
  EXPECT_NE(stratified_split(labels, 4).of, stratified_split(labels, 5).of);
}

TEST(Split, ValidationAndTestHistogramsMatch) {
  std::vector<std::uint8_t> labels(500);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>((i * 7) % 10);
  const auto a = stratified_split(labels, 1);
  std::vector<int> hv(10), ht(10);
  for (auto i : a.indices(Split::val)) ++hv[labels[i]];
  for (auto i : a.indices(Split::test)) ++ht[labels[i]];
  EXPECT_EQ(hv, ht);
}

TEST(Split, RejectsUnbalancedLabels) {
  std::vector<std::uint8_t> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0};
  EXPECT_THROW(stratified_split(labels, 0), ValidationError);
}

TEST(Generate, PaperScaleDatasetAIsBalancedAndUnperturbed) {
  // Recipes only: rendering 100k x 2000 samples is left to the acceptance run.
  const auto cfg = DatasetConfig::for_mode("A", 100000, 3);
  std::vector<int> per_class(10);
  for (std::uint64_t i = 0; i < cfg.count; ++i) {
    const auto s = draw_signal_spec(cfg, i);
    ++per_class[label_of(s.event_class)];
    ASSERT_FALSE(s.perturb.snr_db.has_value());
    ASSERT_EQ(s.perturb.dc_offset, 0.0);
    ASSERT_EQ(s.amplitude, 1.0);
    ASSERT_EQ(s.frequency, 50.0);
  }
  for (int n : per_class) EXPECT_EQ(n, 10000);
}

TEST(Generate, RejectsCountsNotDivisibleByTen) {
  EXPECT_THROW(generate_dataset(DatasetConfig::for_mode("A", 1001, 0)), ValidationError);
  EXPECT_THROW(generate_dataset(DatasetConfig::for_mode("A", 0, 0)), ValidationError);
  EXPECT_THROW(DatasetConfig::for_mode("C", 10, 0), ValidationError);
}

TEST(Generate, SameSeedGivesByteIdenticalFiles) {
  TempDir dir("ds_det");
  const auto cfg = DatasetConfig::for_mode("B", 10, 42);
  save_dataset(dir.file("a.pqe"), generate_dataset(cfg));
  save_dataset(dir.file("b.pqe"), generate_dataset(cfg));
  EXPECT_EQ(read_bytes(dir.file("a.pqe")), read_bytes(dir.file("b.pqe")));
  EXPECT_EQ(read_bytes(manifest_path(dir.file("a.pqe"))), read_bytes(manifest_path(dir.file("b.pqe"))));
  EXPECT_EQ(read_bytes(provenance_path(dir.file("a.pqe"))), read_bytes(provenance_path(dir.file("b.pqe"))));

  save_dataset(dir.file("c.pqe"), generate_dataset(DatasetConfig::for_mode("B", 10, 43)));
  EXPECT_NE(read_bytes(dir.file("a.pqe")), read_bytes(dir.file("c.pqe")));
}

TEST(Generate, DatasetBProvenanceCoversRanges) {
  auto cfg = DatasetConfig::for_mode("B", 1000, 9);
  cfg.sample_rate = 1000.0;
  const auto ds = generate_dataset(cfg);
  const auto rows = provenance_from_csv(provenance_to_csv(ds.specs));
  ASSERT_EQ(rows.size(), 1000u);
  double snr_lo = 1e9, snr_hi = -1e9, dc_lo = 1e9, dc_hi = -1e9;
  for (const auto& r : rows) {
    ASSERT_TRUE(r.snr_db.has_value());
    snr_lo = std::min(snr_lo, *r.snr_db);
    snr_hi = std::max(snr_hi, *r.snr_db);
    dc_lo = std::min(dc_lo, r.dc_offset);
    dc_hi = std::max(dc_hi, r.dc_offset);
    ASSERT_GE(r.amplitude, 0.9);
    ASSERT_LE(r.amplitude, 1.1);
    ASSERT_GE(r.frequency, 47.5);
    ASSERT_LE(r.frequency, 52.5);
  }
  EXPECT_GE(snr_lo, 5.0);
  EXPECT_LE(snr_hi, 60.0);
  EXPECT_GE(dc_lo, -0.10);
  EXPECT_LE(dc_hi, 0.10);
  // 1000 uniform draws reach close to both ends.
  EXPECT_LT(snr_lo, 6.0);
  EXPECT_GT(snr_hi, 59.0);
  EXPECT_LT(dc_lo, -0.09);
  EXPECT_GT(dc_hi, 0.09);
}

TEST(Generate, StoreIsBalancedAndPeakNormalized) {
  auto cfg = DatasetConfig::for_mode("B", 200, 1);
  cfg.sample_rate = 2000.0;
  const auto ds = generate_dataset(cfg);
  EXPECT_EQ(ds.store.seq_len, 400u);
  std::vector<int> per_class(10);
  for (auto l : ds.store.labels) ++per_class[l];
  for (int n : per_class) EXPECT_EQ(n, 20);
  for (std::size_t i = 0; i < ds.store.size(); ++i) {
    float peak = 0.0f;
    for (float v : ds.store.signal(i)) peak = std::max(peak, std::abs(v));
    EXPECT_FLOAT_EQ(peak, 1.0f);
  }
  EXPECT_EQ(ds.manifest.per_class_count, 20u);
  EXPECT_EQ(ds.manifest.split_train, 160u);
  EXPECT_EQ(ds.manifest.split_val, 20u);
  EXPECT_EQ(ds.manifest.split_test, 20u);
}

class StoreFile : public ::testing::Test {
 protected:
  void SetUp() override {
    auto cfg = DatasetConfig::for_mode("B", 20, 5);
    cfg.sample_rate = 500.0;
    ds = generate_dataset(cfg);
    save_store(path, ds.store);
  }

  StoreError::Kind load_error() {
    try {
      load_store(path);
    } catch (const StoreError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "load_store accepted a damaged file";
    return StoreError::Kind::unreadable;
  }

  TempDir dir{"store"};
  std::string path = dir.file("s.pqe");
  Dataset ds;
};

TEST_F(StoreFile, RoundTripIsBitExact) {
  const auto back = load_store(path);
  EXPECT_EQ(back.seq_len, ds.store.seq_len);
  EXPECT_EQ(back.labels, ds.store.labels);
  ASSERT_EQ(back.samples.size(), ds.store.samples.size());
  EXPECT_EQ(std::memcmp(back.samples.data(), ds.store.samples.data(), back.samples.size() * sizeof(float)), 0);
}

TEST_F(StoreFile, LayoutMatchesTheDocumentedHeader) {
  const auto bytes = read_bytes(path);
  ASSERT_EQ(bytes.size(), 21 + 20 * (1 + 4 * 100) + 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PQE1");
  EXPECT_EQ(bytes[4], 1);                                 // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 20u);   // count
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 100u);  // seq_len
  EXPECT_EQ(bytes[20], 1);                                // label width
  EXPECT_EQ(bytes[21], static_cast<char>(ds.store.labels[0]));
}

TEST_F(StoreFile, TruncationIsReported) {
  auto bytes = read_bytes(path);
  bytes.resize(bytes.size() - 600);
  write_bytes(path, bytes);
  EXPECT_EQ(load_error(), StoreError::Kind::truncated_payload);
}

TEST_F(StoreFile, MissingChecksumIsTruncation) {
  auto bytes = read_bytes(path);
  bytes.resize(bytes.size() - 2);
  write_bytes(path, bytes);
  EXPECT_EQ(load_error(), StoreError::Kind::truncated_payload);
}

TEST_F(StoreFile, AlteredMagicIsCorruptHeader) {
  auto bytes = read_bytes(path);
  bytes[2] = 'X';
  write_bytes(path, bytes);
  EXPECT_EQ(load_error(), StoreError::Kind::corrupt_header);
}

TEST_F(StoreFile, FlippedSampleFailsChecksum) {
  auto bytes = read_bytes(path);
  bytes[100] ^= 0x10;
  write_bytes(path, bytes);
  EXPECT_EQ(load_error(), StoreError::Kind::checksum_mismatch);
}

TEST_F(StoreFile, UnknownVersionIsRejected) {
  auto bytes = read_bytes(path);
  bytes[4] = 9;
  write_bytes(path, bytes);
  EXPECT_EQ(load_error(), StoreError::Kind::unsupported_version);
}

TEST_F(StoreFile, MissingFileIsUnreadable) {
  path = dir.file("absent.pqe");
  EXPECT_EQ(load_error(), StoreError::Kind::unreadable);
}

TEST(Manifest, TextRoundTripAndUnknownKeys) {
  auto cfg = DatasetConfig::for_mode("B", 30, 77);
  cfg.sample_rate = 500.0;
  const auto ds = generate_dataset(cfg);
  const auto text = manifest_to_text(ds.manifest);
  EXPECT_EQ(manifest_from_text(text), ds.manifest);
  EXPECT_NE(text.find("seed = 77"), std::string::npos);
  EXPECT_THROW(manifest_from_text(text + "colour = blue\n"), ValidationError);

  const auto a = generate_dataset(DatasetConfig::for_mode("A", 10, 1));
  EXPECT_EQ(manifest_from_text(manifest_to_text(a.manifest)), a.manifest);
  EXPECT_NE(manifest_to_text(a.manifest).find("snr_db_min = none"), std::string::npos);
}

}  // namespace
}  // namespace pqe
