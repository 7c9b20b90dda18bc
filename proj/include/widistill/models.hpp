#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "widistill/graph.hpp"
#include "widistill/tensor.hpp"

namespace widistill {

enum class ModelKind { mlp, cnn };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

/// Architecture description.
///
/// mlp: flatten -> hidden[0] -> relu -> ... -> class_count.
/// cnn: one block per entry of `hidden` (3x3 same conv with that many output
/// channels, relu, 2x2 average pool), then flatten -> class_count. Inputs of
/// rank 2 are [H, W]; rank 3 inputs are [C, H, W].
struct ModelSpec {
  ModelKind kind = ModelKind::mlp;
  Shape input_shape;
  std::size_t class_count = 2;
  std::vector<std::size_t> hidden;

  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

ModelSpec default_spec(ModelKind kind, Shape input_shape, std::size_t class_count);

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

struct LayoutEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;

  bool operator==(const LayoutEntry&) const = default;
};

std::vector<LayoutEntry> param_layout(const ModelSpec& spec);

/// Flat parameter vector plus the per-layer layout that carves it up.
struct NetworkParams {
  Tensor flat;
  std::vector<LayoutEntry> layout;

  std::size_t size() const { return flat.numel(); }
  std::vector<Tensor> layers() const;
  static NetworkParams from_layers(std::vector<LayoutEntry> layout, std::span<const Tensor> layers);
  NetworkParams cast(DType dtype) const { return {flat.cast(dtype), layout}; }
};

enum class InitMode { glorot_uniform, zeros };

/// Weights ~ U(-sqrt(6/(fan_in+fan_out)), +sqrt(...)), biases zero.
NetworkParams init_params(const ModelSpec& spec, std::uint64_t seed,
                          InitMode mode = InitMode::glorot_uniform, DType dtype = DType::f32);

/// Per-layer parameter nodes, in layout order.
using ParamNodes = std::vector<NodeId>;

ParamNodes add_param_leaves(Graph& graph, const NetworkParams& params);
ParamNodes add_param_constants(Graph& graph, const NetworkParams& params);

NodeId forward(Graph& graph, const ModelSpec& spec, std::span<const NodeId> params, NodeId batch);

/// Logits for a concrete batch; builds and discards a graph.
Tensor forward(const ModelSpec& spec, const NetworkParams& params, const Tensor& batch);

/// Mean softmax cross-entropy over the batch.
NodeId classification_loss(Graph& graph, NodeId logits, std::span<const std::uint32_t> labels);

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Tensor& logits, std::span<const std::uint32_t> labels);

}  // namespace widistill
