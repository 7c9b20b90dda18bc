#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "widistill/dataset.hpp"

namespace widistill {

enum class CoresetMethod { random, kmeans, kcenter, herding };

std::string to_string(CoresetMethod m);
CoresetMethod parse_coreset_method(std::string_view name);

/// Indices into the source dataset, grouped by class in class order; within
/// a class they are in selection order.
struct CoresetResult {
  CoresetMethod method = CoresetMethod::random;
  std::vector<std::uint32_t> indices;
  std::size_t spc = 0;

  bool operator==(const CoresetResult&) const = default;
};

void to_json(nlohmann::json& j, const CoresetResult& r);
void from_json(const nlohmann::json& j, CoresetResult& r);

/// Throws unless indices are distinct, in range, spc per class and label-consistent.
void check_coreset(const CoresetResult& r, const LabeledDataset& ds);

/// Row-major point set, one row per sample.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(values).subspan(i * dim, dim);
  }
  FeatureMatrix select(std::span<const std::uint32_t> which) const;
};

/// Flattened sample values in float64.
FeatureMatrix feature_embed(const LabeledDataset& ds);

double squared_distance(std::span<const double> a, std::span<const double> b);

// Single-class selectors. They return row positions in selection order.
std::vector<std::size_t> kcenter_greedy(const FeatureMatrix& pts, std::size_t k);
std::vector<std::size_t> herding_greedy(const FeatureMatrix& pts, std::size_t k);

struct KMeansResult {
  FeatureMatrix centroids;
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Stops after max_iterations or when
/// no centroid moves by tol or more.
KMeansResult kmeans(const FeatureMatrix& pts, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations = 100, double tol = 1e-6);

/// Nearest row to each centroid in turn; a row already taken falls through to
/// the next-nearest unused one. Ties go to the lower row.
std::vector<std::size_t> nearest_unused(const FeatureMatrix& pts, const FeatureMatrix& centroids);

/// Largest distance from any row to its nearest chosen row.
double covering_radius(const FeatureMatrix& pts, std::span<const std::size_t> chosen);

CoresetResult random_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed);
CoresetResult kmeans_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed);
CoresetResult kcenter_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed);
CoresetResult herding_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed);
CoresetResult select_coreset(CoresetMethod m, const LabeledDataset& ds, std::size_t spc,
                             std::uint64_t seed);

/// Selected samples with the result recorded under manifest.extra["coreset"].
LabeledDataset coreset_dataset(const LabeledDataset& ds, const CoresetResult& r);

/// Writes the subset as a pack plus the index list as JSON.
void export_coreset(const LabeledDataset& ds, const CoresetResult& r,
                    const std::filesystem::path& pack_path, const std::filesystem::path& json_path);

}  // namespace widistill
