#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "widistill/tensor.hpp"

namespace widistill {

struct Manifest {
  std::size_t class_count = 0;
  Shape sample_shape;
  std::string split;
  std::string provenance;
  /// Free-form metadata (distillation settings, coreset indices, ...).
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const Manifest&) const = default;
};

void to_json(nlohmann::json& j, const Manifest& m);
void from_json(const nlohmann::json& j, Manifest& m);

/// Immutable labeled samples. `samples` has shape [N] + sample_shape.
class LabeledDataset {
 public:
  /// Validates: N >= 1, one label per sample, labels < class_count, finite values.
  LabeledDataset(Tensor samples, std::vector<std::uint32_t> labels, Manifest manifest);

  const Tensor& samples() const { return samples_; }
  const std::vector<std::uint32_t>& labels() const { return labels_; }
  const Manifest& manifest() const { return manifest_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t class_count() const { return manifest_.class_count; }
  const Shape& sample_shape() const { return manifest_.sample_shape; }
  std::size_t feature_count() const { return numel(manifest_.sample_shape); }

  /// Samples at `rows`, shaped [rows.size()] + sample_shape.
  Tensor gather(std::span<const std::uint32_t> rows) const;
  LabeledDataset subset(std::span<const std::uint32_t> rows, std::string split) const;
  LabeledDataset with_manifest(Manifest manifest) const;

  /// Ascending sample indices per class.
  std::vector<std::vector<std::uint32_t>> indices_by_class() const;

 private:
  Tensor samples_;
  std::vector<std::uint32_t> labels_;
  Manifest manifest_;
};

bool bit_equal(const LabeledDataset& a, const LabeledDataset& b);

void save_pack(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_pack(const std::filesystem::path& path);

/// Stratified split. Each class contributes round(train_fraction * size)
/// samples to train, clamped so both sides keep at least one.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed);

struct ClassStats {
  std::size_t count = 0;
  Tensor mean;  // sample_shape, float64
};

std::vector<ClassStats> class_stats(const LabeledDataset& ds);

}  // namespace widistill
