#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "widistill/buffer.hpp"
#include "widistill/dataset.hpp"
#include "widistill/graph.hpp"
#include "widistill/models.hpp"

namespace widistill {

/// The expert barely moved between t0 and t0 + J.
class DegenerateSegmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DistillError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DistillConfig {
  std::size_t K = 16;          // unrolled student steps
  std::size_t J = 2;           // expert lookahead in epochs
  std::size_t T_plus = 15;     // start epoch is drawn from [0, T_plus)
  std::size_t iterations = 2000;
  double lr_samples = 30.0;
  double lr_alpha = 1e-4;
  double meta_momentum = 0.5;
  double alpha_init = 0.01;
  double denom_eps = 1e-12;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::size_t full_batch_limit = 512;
  std::size_t minibatch = 256;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

void to_json(nlohmann::json& j, const DistillConfig& cfg);
void from_json(const nlohmann::json& j, DistillConfig& cfg);

inline constexpr double kMinAlpha = 1e-6;

struct SyntheticDataset {
  Tensor samples;  // [spc * C] + sample_shape
  std::vector<std::uint32_t> labels;
  std::size_t class_count = 0;
  std::size_t spc = 0;
  double alpha = 0.0;
  std::size_t iteration = 0;

  Shape sample_shape() const { return Shape(samples.shape().begin() + 1, samples.shape().end()); }
  std::size_t size() const { return labels.size(); }
};

/// Copies spc distinct real samples per class, chosen with `seed`. Rows are
/// grouped by class in ascending class order.
SyntheticDataset init_synthetic(const LabeledDataset& real, std::size_t spc, std::uint64_t seed,
                                double alpha_init, DType dtype = DType::f32);

/// Classification loss of the student for a given set of parameter nodes.
using LossBuilder = std::function<NodeId(Graph&, std::span<const NodeId> params)>;

/// theta' = theta - alpha * d loss / d theta, recorded in the graph.
std::vector<NodeId> inner_update(Graph& graph, std::span<const NodeId> params, NodeId alpha,
                                 const LossBuilder& loss);

/// Inner update on a batch of synthetic samples (rows of `samples`; all rows if empty).
std::vector<NodeId> inner_update(Graph& graph, const ModelSpec& spec, std::span<const NodeId> params,
                                 NodeId alpha, NodeId samples, std::span<const std::uint32_t> labels,
                                 std::span<const std::uint32_t> rows = {});

/// Squared distance between two parameter sets, in float64.
double squared_distance(const NetworkParams& a, const NetworkParams& b);

/// ||student - target||^2 / ||start - target||^2. Throws DegenerateSegmentError
/// when the denominator is below denom_eps.
NodeId matching_loss(Graph& graph, std::span<const NodeId> student, const NetworkParams& start,
                     const NetworkParams& target, double denom_eps);

/// Synthetic set plus meta-optimizer momentum.
struct DistillState {
  SyntheticDataset syn;
  Tensor sample_velocity;
  double alpha_velocity = 0.0;

  explicit DistillState(SyntheticDataset s);
};

struct StepRecord {
  std::size_t iteration = 0;  // 1-based, after the update
  double loss = 0.0;
  double alpha = 0.0;         // after the update
  std::size_t start_epoch = 0;
};

/// Meta-gradients of one unroll, without updating anything.
struct MetaGradient {
  double loss = 0.0;
  Tensor samples;  // same shape and dtype as the synthetic samples
  double alpha = 0.0;
  std::size_t start_epoch = 0;
};

MetaGradient meta_gradient(const SyntheticDataset& syn, const Trajectory& expert, std::size_t start_epoch,
                           const DistillConfig& cfg);

/// One meta-iteration: draw t0 (resampling degenerate segments up to 10 times),
/// unroll, match, and apply the momentum update to samples and alpha.
StepRecord distill_step(DistillState& state, const Trajectory& expert, const DistillConfig& cfg,
                        std::mt19937_64& rng);

struct DistillResult {
  SyntheticDataset syn;
  std::vector<StepRecord> history;
};

struct DistillHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called every cfg.checkpoint_every iterations.
  std::function<void(const SyntheticDataset&)> on_checkpoint;
};

/// Runs cfg.iterations meta-steps, drawing one trajectory uniformly per step.
DistillResult distill(const LabeledDataset& real, std::span<const Trajectory> buffer,
                      const DistillConfig& cfg, std::size_t spc, const DistillHooks& hooks = {});

/// Packs the synthetic set with its distillation metadata.
LabeledDataset to_labeled(const SyntheticDataset& syn, const Manifest& source,
                          const nlohmann::json& extra = nlohmann::json::object());
SyntheticDataset from_labeled(const LabeledDataset& ds);

/// CSV with header "iteration,loss,alpha".
std::string loss_csv(std::span<const StepRecord> history);

}  // namespace widistill
