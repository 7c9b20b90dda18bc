#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "widistill/dataset.hpp"
#include "widistill/distill.hpp"
#include "widistill/models.hpp"

namespace widistill {

struct EvalConfig {
  ModelSpec spec;
  std::size_t epochs = 150;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t whole_data_epochs = 30;  // used when the training set is the full train split
  std::vector<std::uint64_t> seeds;    // one per repeat

  std::size_t repeats() const { return seeds.size(); }
  void validate() const;
  bool operator==(const EvalConfig&) const = default;
};

void to_json(nlohmann::json& j, const EvalConfig& cfg);
void from_json(const nlohmann::json& j, EvalConfig& cfg);

/// derive_seed(root, "eval", r) for r < repeats.
std::vector<std::uint64_t> eval_seeds(std::uint64_t root, std::size_t repeats);

struct EvalReport {
  std::string method;
  std::size_t spc = 0;  // 0 for the whole train split
  ModelKind model = ModelKind::mlp;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single repeat
};

EvalReport make_report(std::string method, std::size_t spc, ModelKind model,
                       std::vector<std::uint64_t> seeds, std::vector<double> accuracies);

/// Fresh weights from derive_seed(seed, "init"), shuffles from
/// derive_seed(seed, "shuffle-root"), then SGD with momentum for `epochs`.
NetworkParams train_student(const LabeledDataset& small, const EvalConfig& cfg, std::uint64_t seed,
                            std::size_t epochs);
NetworkParams train_student(const LabeledDataset& small, const EvalConfig& cfg, std::uint64_t seed);
NetworkParams train_student(const SyntheticDataset& small, const EvalConfig& cfg, std::uint64_t seed);

/// Accuracy over the whole of `test`, predicted in chunks of `chunk` rows.
double evaluate(const NetworkParams& params, const LabeledDataset& test, const ModelSpec& spec,
                std::size_t chunk = 256);

/// One train/evaluate run per seed for cfg.epochs. Runs up to `jobs` repeats at once; results
/// do not depend on `jobs`.
EvalReport evaluate_set(const LabeledDataset& small, std::string method, std::size_t spc,
                        const EvalConfig& cfg, const LabeledDataset& test, std::size_t jobs = 1);

/// Rows follow `producers`, columns follow `evaluators`.
using CrossMatrix = std::vector<std::vector<EvalReport>>;
CrossMatrix cross_matrix(const std::vector<std::pair<std::string, LabeledDataset>>& producers,
                         const std::vector<ModelSpec>& evaluators, const EvalConfig& cfg,
                         const LabeledDataset& test, std::size_t jobs = 1);

/// method,spc,model,seed,accuracy with one row per repeat.
std::string reports_csv(const std::vector<EvalReport>& reports);
std::vector<EvalReport> parse_reports_csv(const std::string& text);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// One block per model: rows are spc values, columns are methods, cells mean ± std.
std::string render_table(const std::vector<EvalReport>& reports);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace widistill
