#include "widistill/fixture.hpp"

#include "widistill/rng.hpp"

namespace widistill {

DataSplits prepare_splits(const LabeledDataset& all, double train_fraction, const PreprocessConfig& pp,
                          std::uint64_t seed) {
  const auto [train_raw, test_raw] = split(all, train_fraction, derive_seed(seed, "split"));
  const FeatureStats stats = fit_preprocess(train_raw, pp);
  return {apply_preprocess(train_raw, stats), apply_preprocess(test_raw, stats)};
}

DataSplits make_fixture(const FixtureConfig& cfg, std::uint64_t seed) {
  const LabeledDataset all = synth_csi(cfg.generator, cfg.samples_per_class, derive_seed(seed, "generate"));
  return prepare_splits(all, cfg.train_fraction, cfg.preprocess, seed);
}

}  // namespace widistill
