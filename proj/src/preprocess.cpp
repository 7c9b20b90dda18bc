#include "widistill/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace widistill {

namespace {

constexpr double kMadToSigma = 1.4826;

double median_of(std::vector<double>& v) {
  const std::size_t n = v.size();
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace

FeatureStats fit_preprocess(const LabeledDataset& stats_from, const PreprocessConfig& cfg) {
  if (!(cfg.mad_k > 0.0) || !(cfg.eps_std > 0.0)) {
    throw std::invalid_argument("preprocess: mad_k and eps_std must be > 0");
  }
  const std::size_t n = stats_from.size();
  const std::size_t d = stats_from.feature_count();
  const std::vector<double> x = stats_from.samples().to_doubles();

  FeatureStats s;
  s.eps_std = cfg.eps_std;
  for (auto* v : {&s.median, &s.mad, &s.lo, &s.hi, &s.mean, &s.std}) v->resize(d);
  std::vector<double> column(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = x[i * d + j];
    const double med = median_of(column);
    for (std::size_t i = 0; i < n; ++i) column[i] = std::abs(x[i * d + j] - med);
    const double mad = median_of(column);
    const double half = cfg.mad_k * kMadToSigma * mad;
    s.median[j] = med;
    s.mad[j] = mad;
    s.lo[j] = med - half;
    s.hi[j] = med + half;

    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += std::clamp(x[i * d + j], s.lo[j], s.hi[j]);
    const double mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = std::clamp(x[i * d + j], s.lo[j], s.hi[j]) - mean;
      sq += c * c;
    }
    s.mean[j] = mean;
    s.std[j] = std::sqrt(sq / static_cast<double>(n));
  }
  return s;
}

LabeledDataset apply_preprocess(const LabeledDataset& ds, const FeatureStats& stats) {
  const std::size_t d = ds.feature_count();
  if (stats.mean.size() != d) {
    throw ShapeError("preprocess: statistics cover " + std::to_string(stats.mean.size()) +
                     " features, dataset has " + std::to_string(d));
  }
  std::vector<double> x = ds.samples().to_doubles();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double& v = x[i * d + j];
      if (stats.std[j] < stats.eps_std) {
        v = 0.0;
        continue;
      }
      v = (std::clamp(v, stats.lo[j], stats.hi[j]) - stats.mean[j]) / stats.std[j];
    }
  }
  Manifest m = ds.manifest();
  m.extra["preprocessed"] = true;
  return LabeledDataset(Tensor::from_doubles(ds.samples().shape(), x, ds.samples().dtype()),
                        ds.labels(), std::move(m));
}

LabeledDataset preprocess(const LabeledDataset& ds, const PreprocessConfig& cfg,
                          const LabeledDataset& stats_from) {
  if (ds.sample_shape() != stats_from.sample_shape()) {
    throw ShapeError("preprocess: sample shape " + to_string(ds.sample_shape()) +
                     " vs statistics source " + to_string(stats_from.sample_shape()));
  }
  return apply_preprocess(ds, fit_preprocess(stats_from, cfg));
}

}  // namespace widistill
