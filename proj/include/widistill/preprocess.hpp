#pragma once

#include <vector>

#include "widistill/dataset.hpp"

namespace widistill {

struct PreprocessConfig {
  double mad_k = 5.0;     // clip half-width in robust-sigma units
  double eps_std = 1e-8;  // features with a smaller std are mapped to 0
};

/// Per-feature statistics fitted on a reference dataset.
struct FeatureStats {
  std::vector<double> median;
  std::vector<double> mad;  // raw median absolute deviation
  std::vector<double> lo;   // clip bounds: median -/+ mad_k * 1.4826 * mad
  std::vector<double> hi;
  std::vector<double> mean;  // of the clipped reference values
  std::vector<double> std;   // population std of the clipped reference values
  double eps_std = 1e-8;
};

FeatureStats fit_preprocess(const LabeledDataset& stats_from, const PreprocessConfig& cfg);

/// Clips each feature to [lo, hi], then z-scores it.
LabeledDataset apply_preprocess(const LabeledDataset& ds, const FeatureStats& stats);

LabeledDataset preprocess(const LabeledDataset& ds, const PreprocessConfig& cfg,
                          const LabeledDataset& stats_from);

}  // namespace widistill
