#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <utility>
#include <vector>

#include "json.hpp"
#include "widistill/dataset.hpp"
#include "widistill/models.hpp"
#include "widistill/training.hpp"

namespace widistill {

struct TeacherConfig {
  ModelSpec spec;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.0;  // plain SGD, like the student's inner steps
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TeacherConfig&) const = default;
};

void to_json(nlohmann::json& j, const TeacherConfig& cfg);
void from_json(const nlohmann::json& j, TeacherConfig& cfg);

/// Parameters of one teacher after every epoch; snapshots[0] is the initialization.
struct Trajectory {
  ModelSpec spec;
  TeacherConfig config;
  std::vector<NetworkParams> snapshots;  // float32, epochs() + 1 entries
  std::vector<EpochMetrics> metrics;     // one per epoch

  std::size_t epochs() const { return metrics.size(); }
};

bool bit_equal(const Trajectory& a, const Trajectory& b);

/// Initial weights come from derive_seed(cfg.seed, "init"); shuffles from
/// derive_seed(cfg.seed, "shuffle-root").
SgdOptions teacher_sgd_options(const TeacherConfig& cfg);
NetworkParams teacher_init(const TeacherConfig& cfg, DType dtype = DType::f32);

Trajectory train_teacher(const LabeledDataset& train, const TeacherConfig& cfg);

void save_trajectory(const Trajectory& t, const std::filesystem::path& path);
Trajectory load_trajectory(const std::filesystem::path& path);

/// Hex digest (FNV-1a 64) of a trajectory file's bytes.
std::string file_digest(const std::filesystem::path& path);

/// Draws t0 uniformly from {0, ..., t_plus - 1} and returns a copy of snapshot t0.
/// Throws unless 1 <= t_plus and t_plus - 1 + lookahead <= T.
std::pair<std::size_t, NetworkParams> sample_start(const Trajectory& t, std::size_t t_plus,
                                                   std::size_t lookahead, std::mt19937_64& rng);

}  // namespace widistill
