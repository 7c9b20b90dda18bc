#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "coreset_oracles.hpp"
#include "widistill/coresets.hpp"

using namespace widistill;
using namespace widistill::oracle;

namespace {

LabeledDataset points_dataset(std::size_t dim, const std::vector<double>& values,
                              std::vector<std::uint32_t> labels, std::size_t classes) {
  Manifest m;
  m.class_count = classes;
  m.sample_shape = {dim};
  m.split = "train";
  const std::size_t n = labels.size();
  return LabeledDataset(Tensor::from_doubles({n, dim}, values, DType::f64), std::move(labels), m);
}

LabeledDataset random_dataset(std::mt19937_64& rng, std::size_t classes, std::size_t per_class, std::size_t dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v;
  std::vector<std::uint32_t> y;
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    y.push_back(static_cast<std::uint32_t>(rng() % classes));
    for (std::size_t d = 0; d < dim; ++d) v.push_back(g(rng));
  }
  // Guarantee per_class members for every class.
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) y[c * per_class + i] = static_cast<std::uint32_t>(c);
  }
  return points_dataset(dim, v, y, classes);
}

const CoresetMethod kMethods[] = {CoresetMethod::random, CoresetMethod::kmeans, CoresetMethod::kcenter,
                                  CoresetMethod::herding};

}  // namespace

TEST_CASE("feature_embed flattens and keeps values") {
  Manifest m;
  m.class_count = 2;
  m.sample_shape = {2, 3};
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6};
  const LabeledDataset ds(Tensor::from_doubles({2, 2, 3}, v, DType::f32), {0, 1}, m);
  const auto e = feature_embed(ds);
  CHECK(e.rows == 2);
  CHECK(e.dim == 6);
  CHECK(std::equal(e.row(0).begin(), e.row(0).end(), e.row(1).begin()));
  CHECK(e.values == v);
}

TEST_CASE("kcenter on {0, 1, 10} picks 1 then 10") {
  const FeatureMatrix pts{3, 1, {0.0, 1.0, 10.0}};
  CHECK(kcenter_greedy(pts, 2) == std::vector<std::size_t>{1, 2});
  CHECK(kcenter_greedy(pts, 3).size() == 3);
}

TEST_CASE("herding picks the exact mean member first") {
  const FeatureMatrix pts{3, 2, {0, 0, 2, 0, 1, 0}};
  CHECK(herding_greedy(pts, 1) == std::vector<std::size_t>{2});
}

TEST_CASE("kmeans with spc=1 picks the sample nearest the class mean") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_class(rng);
    const auto km = kmeans(pts, 1, rng());
    const auto mu = mean_of(pts, all_rows(pts));
    std::size_t nearest = 0;
    for (std::size_t i = 1; i < pts.rows; ++i) {
      if (dist(pts.row(i), mu) < dist(pts.row(nearest), mu)) nearest = i;
    }
    CHECK(nearest_unused(pts, km.centroids) == std::vector<std::size_t>{nearest});
  }
}

TEST_CASE("kmeans with two tight clusters selects one point from each") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v;
    std::vector<std::uint32_t> y(20, 0);
    for (int i = 0; i < 20; ++i) {
      const double base = i < 10 ? 0.0 : 5.0;
      v.push_back(base + g(rng));
      v.push_back(-base + g(rng));
    }
    const auto ds = points_dataset(2, v, y, 1);
    const auto r = kmeans_select(ds, 2, rng());
    check_coreset(r, ds);
    CHECK((r.indices[0] < 10) != (r.indices[1] < 10));
  }
}

TEST_CASE("nearest_unused falls through to the next-nearest row") {
  const FeatureMatrix pts{3, 1, {0.0, 1.0, 3.0}};
  const FeatureMatrix cents{2, 1, {0.1, 0.2}};
  CHECK(nearest_unused(pts, cents) == std::vector<std::size_t>{0, 1});
  // Equal distance goes to the lower row.
  const FeatureMatrix mid{1, 1, {0.5}};
  CHECK(nearest_unused(pts, mid) == std::vector<std::size_t>{0});
}

TEST_CASE("kmeans stops early once centroids settle") {
  const FeatureMatrix pts{4, 1, {0.0, 0.1, 9.9, 10.0}};
  const auto km = kmeans(pts, 2, 3);
  CHECK(km.iterations < 100);
  std::vector<double> c = km.centroids.values;
  std::sort(c.begin(), c.end());
  CHECK(c[0] == doctest::Approx(0.05));
  CHECK(c[1] == doctest::Approx(9.95));
}

TEST_CASE("greedy traces match exhaustive oracles on 200 random small classes") {
  std::mt19937_64 rng(606);
  for (int trial = 0; trial < 200; ++trial) {
    const auto pts = random_class(rng);
    const std::size_t k = 1 + rng() % pts.rows;
    const auto kc = kcenter_greedy(pts, k);
    CHECK(kc == kcenter_oracle(pts, k));
    CHECK(covering_radius(pts, kc) <= 2.0 * optimal_radius(pts, k) + 1e-12);
    CHECK(herding_greedy(pts, k) == herding_oracle(pts, k));
  }
}

TEST_CASE("property: herding ends on the exact class mean") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pts = random_class(rng);
    const auto order = herding_greedy(pts, pts.rows);
    CHECK(std::set<std::size_t>(order.begin(), order.end()).size() == pts.rows);
    CHECK(dist(mean_of(pts, all_rows(pts)), mean_of(pts, order)) < 1e-12);
  }
}

TEST_CASE("herding mean gap is not monotone in k") {
  const FeatureMatrix pts{3, 2, {0, 0, 2, 0, 1, 0}};
  const auto order = herding_greedy(pts, 3);
  const auto mu = mean_of(pts, all_rows(pts));
  std::vector<double> gaps;
  std::vector<std::size_t> prefix;
  for (auto r : order) {
    prefix.push_back(r);
    gaps.push_back(dist(mu, mean_of(pts, prefix)));
  }
  CHECK(gaps[0] == 0.0);
  CHECK(gaps[1] == doctest::Approx(0.5));
  CHECK(gaps[2] == 0.0);
}

TEST_CASE("random selection is uniform within a class") {
  std::vector<double> v(20);
  std::iota(v.begin(), v.end(), 0.0);
  const auto ds = points_dataset(1, v, std::vector<std::uint32_t>(20, 0), 1);
  const std::size_t spc = 5, seeds = 10000;
  std::vector<std::size_t> hits(20, 0);
  for (std::size_t s = 0; s < seeds; ++s) {
    for (auto i : random_select(ds, spc, s).indices) ++hits[i];
  }
  const double p = static_cast<double>(spc) / 20.0;
  const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(seeds));
  for (auto h : hits) CHECK(std::abs(static_cast<double>(h) / seeds - p) <= 3.0 * sigma);

  const auto whole = random_select(ds, 20, 9);
  CHECK(std::set<std::uint32_t>(whole.indices.begin(), whole.indices.end()).size() == 20);
}

TEST_CASE("property: every selector returns a valid deterministic coreset") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t classes = 2 + rng() % 4, per_class = 1 + rng() % 8, dim = 1 + rng() % 5;
    const auto ds = random_dataset(rng, classes, per_class, dim);
    const std::size_t spc = 1 + rng() % per_class;
    const std::uint64_t seed = rng();
    for (auto m : kMethods) {
      const auto r = select_coreset(m, ds, spc, seed);
      CHECK(r.method == m);
      CHECK_NOTHROW(check_coreset(r, ds));
      CHECK(select_coreset(m, ds, spc, seed) == r);
    }
  }
}

TEST_CASE("spc equal to the class size selects the whole class") {
  const auto small = points_dataset(1, {0, 1, 2, 3, 4, 5}, {0, 1, 0, 1, 0, 1}, 2);
  for (auto m : kMethods) {
    auto idx = select_coreset(m, small, 3, 5).indices;
    std::sort(idx.begin(), idx.begin() + 3);
    std::sort(idx.begin() + 3, idx.end());
    CHECK(idx == std::vector<std::uint32_t>{0, 2, 4, 1, 3, 5});
  }
}

TEST_CASE("too-small class is an error naming the class") {
  const auto ds = points_dataset(1, {0, 1, 2}, {0, 0, 1}, 2);
  for (auto m : kMethods) {
    try {
      select_coreset(m, ds, 2, 0);
      FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("class 1") != std::string::npos);
    }
  }
}

TEST_CASE("check_coreset rejects broken results") {
  const auto ds = points_dataset(1, {0, 1, 2, 3}, {0, 0, 1, 1}, 2);
  CHECK_NOTHROW(check_coreset({CoresetMethod::random, {0, 2}, 1}, ds));
  CHECK_THROWS(check_coreset({CoresetMethod::random, {2, 0}, 1}, ds));
  CHECK_THROWS(check_coreset({CoresetMethod::random, {0, 0}, 1}, ds));
  CHECK_THROWS(check_coreset({CoresetMethod::random, {0}, 1}, ds));
  CHECK_THROWS(check_coreset({CoresetMethod::random, {0, 7}, 1}, ds));
  CHECK_THROWS(parse_coreset_method("greedy"));
}

TEST_CASE("export writes a loadable pack and index list") {
  std::mt19937_64 rng(5);
  const auto ds = random_dataset(rng, 3, 5, 4);
  const auto r = herding_select(ds, 2, 0);
  const auto dir = std::filesystem::temp_directory_path() / "widistill_coreset_test";
  std::filesystem::create_directories(dir);
  export_coreset(ds, r, dir / "subset.pack", dir / "subset.json");
  const auto back = load_pack(dir / "subset.pack");
  CHECK(back.size() == 6);
  CHECK(back.manifest().extra.at("coreset").get<CoresetResult>() == r);
  const auto expect = ds.gather(r.indices).to_doubles();
  CHECK(back.samples().to_doubles() == expect);
  std::ifstream in(dir / "subset.json");
  CHECK(nlohmann::json::parse(in).get<CoresetResult>() == r);
  std::filesystem::remove_all(dir);
}
