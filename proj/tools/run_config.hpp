#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "widistill/coresets.hpp"
#include "widistill/distill.hpp"
#include "widistill/fixture.hpp"
#include "widistill/models.hpp"

namespace widistill::cli {

/// Bad config file, unknown key, malformed override or invalid value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSection {
  std::filesystem::path pack;  // empty: generate with the built-in multipath model
  std::size_t samples_per_class = 150;
  double train_fraction = 2.0 / 3.0;
  PreprocessConfig preprocess;
};

struct TeacherSection {
  ModelKind arch = ModelKind::mlp;
  std::size_t count = 5;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.0;
};

struct DistillSection {
  ModelKind arch = ModelKind::mlp;
  std::vector<std::size_t> spc{10};
  std::filesystem::path buffer;  // empty: <output>/buffer/<arch>
  DistillConfig config;          // seed is derived per run
};

struct CoresetSection {
  std::vector<CoresetMethod> methods{CoresetMethod::random, CoresetMethod::kmeans, CoresetMethod::kcenter,
                                     CoresetMethod::herding};
  std::vector<std::size_t> spc{10};
};

struct EvalSection {
  std::vector<ModelKind> archs{ModelKind::mlp, ModelKind::cnn};
  std::size_t epochs = 150;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t whole_data_epochs = 30;
  std::size_t repeats = 5;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output = "widistill-out";
  DataSection data;
  TeacherSection teacher;
  DistillSection distill;
  CoresetSection coreset;
  EvalSection eval;

  void validate() const;
};

/// Reads TOML text, applies `section.key=value` overrides in order, and checks
/// every key against the known layout.
RunConfig parse_run_config(const std::string& toml_text, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// The config rendered back as TOML.
std::string to_toml(const RunConfig& cfg);

}  // namespace widistill::cli
