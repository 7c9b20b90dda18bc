#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include <unistd.h>

#include "widistill/binio.hpp"
#include "widistill/buffer.hpp"
#include "widistill/fixture.hpp"

using namespace widistill;
namespace fs = std::filesystem;

namespace {

const DataSplits& fixture() {
  static const DataSplits splits = make_fixture({}, 2024);
  return splits;
}

LabeledDataset small_train() {
  FixtureConfig cfg;
  cfg.samples_per_class = 12;
  return make_fixture(cfg, 7).train;
}

TeacherConfig small_teacher(std::size_t epochs) {
  TeacherConfig cfg;
  cfg.spec = ModelSpec{ModelKind::mlp, {30, 64}, 6, {16}};
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.seed = 3;
  return cfg;
}

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / ("widistill_buf_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("fixture has 100 train and 50 test samples per class") {
  const auto& f = fixture();
  for (const auto& idx : f.train.indices_by_class()) CHECK(idx.size() == 100);
  for (const auto& idx : f.test.indices_by_class()) CHECK(idx.size() == 50);
}

TEST_CASE("trajectory has one snapshot per epoch plus the initialization") {
  const auto cfg = small_teacher(10);
  const auto t = train_teacher(small_train(), cfg);
  CHECK(t.snapshots.size() == 11);
  CHECK(t.metrics.size() == 10);
  CHECK(t.snapshots[0].flat.bit_equal(teacher_init(cfg).flat));
  for (const auto& s : t.snapshots) CHECK(s.layout == t.snapshots[0].layout);
}

TEST_CASE("teacher on the default fixture") {
  TeacherConfig cfg;
  cfg.spec = default_spec(ModelKind::mlp, {30, 64}, 6);
  cfg.seed = 11;
  const auto t = train_teacher(fixture().train, cfg);
  REQUIRE(t.epochs() == 30);
  CHECK(t.metrics.back().accuracy >= 0.95);

  // 5-epoch moving average of the loss falls strictly over the first 15 epochs.
  std::vector<double> avg;
  for (std::size_t e = 0; e + 5 <= 15; ++e) {
    double s = 0.0;
    for (std::size_t k = e; k < e + 5; ++k) s += t.metrics[k].loss;
    avg.push_back(s / 5.0);
  }
  for (std::size_t i = 1; i < avg.size(); ++i) CHECK(avg[i] < avg[i - 1]);
}

TEST_CASE("teacher training is deterministic") {
  const auto cfg = small_teacher(3);
  CHECK(bit_equal(train_teacher(small_train(), cfg), train_teacher(small_train(), cfg)));
  auto other = cfg;
  other.seed = 4;
  CHECK_FALSE(bit_equal(train_teacher(small_train(), cfg), train_teacher(small_train(), other)));
}

TEST_CASE("divergence names the epoch") {
  auto cfg = small_teacher(5);
  cfg.lr = 1e12;
  cfg.momentum = 0.0;
  CHECK_THROWS_WITH_AS(train_teacher(small_train(), cfg), doctest::Contains("epoch"), TrainingError);
}

TEST_CASE("teacher config validation") {
  auto cfg = small_teacher(0);
  CHECK_THROWS(train_teacher(small_train(), cfg));
  cfg = small_teacher(1);
  cfg.momentum = 1.0;
  CHECK_THROWS(train_teacher(small_train(), cfg));
  cfg = small_teacher(1);
  cfg.spec.input_shape = {64, 30};
  CHECK_THROWS_AS(train_teacher(small_train(), cfg), ShapeError);
}

TEST_CASE("trajectory files round trip and reject corruption") {
  const auto dir = temp_dir();
  const auto t = train_teacher(small_train(), small_teacher(10));
  save_trajectory(t, dir / "t.wdtb");
  CHECK(bit_equal(load_trajectory(dir / "t.wdtb"), t));
  CHECK(file_digest(dir / "t.wdtb").size() == 16);

  const std::string bytes = read_file(dir / "t.wdtb");
  SUBCASE("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    write_file_atomic(dir / "bad.wdtb", bad);
    CHECK_THROWS_AS(load_trajectory(dir / "bad.wdtb"), FormatError);
  }
  SUBCASE("wrong version") {
    std::string bad = bytes;
    bad[4] = 2;
    write_file_atomic(dir / "v2.wdtb", bad);
    CHECK_THROWS_WITH(load_trajectory(dir / "v2.wdtb"), doctest::Contains("version 2"));
  }
  SUBCASE("header says 11 snapshots, file holds 10") {
    const std::size_t snap = t.snapshots[0].size() * sizeof(float);
    const std::size_t metrics = 10 * 2 * sizeof(double);
    std::string bad = bytes.substr(0, bytes.size() - metrics - snap) + bytes.substr(bytes.size() - metrics);
    write_file_atomic(dir / "short.wdtb", bad);
    CHECK_THROWS_WITH(load_trajectory(dir / "short.wdtb"), doctest::Contains("truncated trajectory"));
  }
  fs::remove_all(dir);
}

TEST_CASE("sample_start draws and copies") {
  const auto t = train_teacher(small_train(), small_teacher(20));
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_start(t, 1, 2, rng).first == 0);

  std::mt19937_64 draws(2024);
  std::vector<int> bins(20, 0);
  for (int i = 0; i < 10000; ++i) ++bins[sample_start(t, 20, 0, draws).first];
  const double sigma = std::sqrt(10000 * 0.05 * 0.95);
  double chi2 = 0.0;
  for (int b : bins) {
    CHECK(std::abs(b - 500.0) <= 3.0 * sigma);
    chi2 += (b - 500.0) * (b - 500.0) / 500.0;
  }
  // 99.9th percentile of chi-square with 19 degrees of freedom.
  CHECK(chi2 < 43.82);

  const auto [t0, params] = sample_start(t, 10, 2, rng);
  CHECK(params.flat.bit_equal(t.snapshots[t0].flat));

  CHECK_THROWS(sample_start(t, 21, 0, rng));
  CHECK_THROWS(sample_start(t, 0, 0, rng));
  CHECK_THROWS(sample_start(t, 20, 2, rng));
}

TEST_CASE("property: sample_start never runs past the end of the trajectory") {
  const auto t = train_teacher(small_train(), small_teacher(8));
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t j = 1 + rng() % 8;
    const std::size_t t_plus = 1 + rng() % 8;
    if (t_plus - 1 + j > t.epochs()) {
      CHECK_THROWS(sample_start(t, t_plus, j, rng));
      continue;
    }
    const auto [t0, p] = sample_start(t, t_plus, j, rng);
    CHECK(t0 < t_plus);
    CHECK(t0 + j <= t.epochs());
  }
}
