#pragma once

#include <cstdint>

#include "widistill/csi.hpp"
#include "widistill/preprocess.hpp"

namespace widistill {

struct DataSplits {
  LabeledDataset train;
  LabeledDataset test;
};

struct FixtureConfig {
  MultipathConfig generator = MultipathConfig::desk_default();
  std::size_t samples_per_class = 150;
  double train_fraction = 2.0 / 3.0;
  PreprocessConfig preprocess;
};

/// Stratified split with derive_seed(seed, "split"), then preprocessing fitted on the train side.
DataSplits prepare_splits(const LabeledDataset& all, double train_fraction, const PreprocessConfig& pp,
                          std::uint64_t seed);

/// Generates, splits (stratified) and preprocesses with train-split statistics.
/// Generation uses derive_seed(seed, "generate"), the split derive_seed(seed, "split").
DataSplits make_fixture(const FixtureConfig& cfg, std::uint64_t seed);

}  // namespace widistill
