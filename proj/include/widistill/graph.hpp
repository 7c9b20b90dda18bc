#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "widistill/tensor.hpp"

namespace widistill {

enum class NodeId : std::uint32_t {};

constexpr std::size_t index(NodeId id) { return static_cast<std::size_t>(id); }

/// Primitive vocabulary. Every backward rule is written in terms of these same
/// primitives, so gradient nodes can be differentiated again.
enum class Op : std::uint8_t {
  leaf,
  constant,
  matmul,            // 2-D, optional transposes of either operand
  add,
  sub,
  mul,               // elementwise
  scale,             // multiply by a fixed real
  scalar_mul,        // one-element node times a tensor
  relu,
  step_mask,         // 1 where x > 0 else 0; derivative is zero
  reshape,
  sum,               // all elements -> scalar
  mean,
  broadcast_scalar,  // scalar -> shape
  sum_axis,          // 2-D reduction over axis 0 or 1
  broadcast_axis,    // adjoint of sum_axis
  softmax,           // row-wise over a 2-D tensor
  softmax_xent,      // mean softmax cross-entropy against fixed labels
  gather_rows,
  scatter_rows,      // adjoint of gather_rows (scatter-add)
  im2col,            // NHWC, stride 1, same padding
  col2im,
  avg_pool,          // 2x2 window, stride 2, floor
  avg_pool_adjoint,
  batch_transpose,   // [B, M, N] -> [B, N, M]
};

const char* to_string(Op op);

/// Geometry of a stride-1, same-padded square convolution on NHWC input.
struct ConvGeom {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t kernel = 3;
};

struct Attrs {
  bool trans_a = false;
  bool trans_b = false;
  double factor = 1.0;
  std::size_t axis = 0;
  std::size_t count = 0;
  Shape shape;
  std::shared_ptr<const std::vector<std::uint32_t>> indices;
  ConvGeom conv;
};

struct Node {
  Op op = Op::leaf;
  std::vector<NodeId> inputs;
  Attrs attrs;
  Shape shape;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Append-only computation graph with lazily evaluated, cached node values.
///
/// Construction infers shapes eagerly, so a malformed expression fails at the
/// call that builds it. Values are computed on first request; rebinding a leaf
/// drops every cached value derived from leaves.
class Graph {
 public:
  static constexpr std::size_t kDefaultCapacity = std::size_t{1} << 22;

  explicit Graph(DType dtype = DType::f32, std::size_t capacity = kDefaultCapacity);

  DType dtype() const { return dtype_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(index(id)); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  bool is_leaf(NodeId id) const { return node(id).op == Op::leaf; }

  NodeId leaf(Shape shape);
  NodeId leaf(const Tensor& value);
  NodeId constant(const Tensor& value);
  void bind(NodeId leaf, const Tensor& value);

  /// Evaluates (and caches) the value of `id`. Throws if a needed leaf is unbound.
  const Tensor& value(NodeId id);

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId scalar_mul(NodeId s, NodeId x);
  NodeId relu(NodeId x);
  NodeId step_mask(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId sum(NodeId x);
  NodeId mean(NodeId x);
  NodeId broadcast_scalar(NodeId s, Shape shape);
  NodeId sum_axis(NodeId x, std::size_t axis);
  NodeId broadcast_axis(NodeId v, std::size_t axis, std::size_t count);
  NodeId softmax(NodeId logits);
  NodeId softmax_xent(NodeId logits, std::span<const std::uint32_t> labels);
  NodeId gather_rows(NodeId x, std::span<const std::uint32_t> rows);
  NodeId scatter_rows(NodeId x, std::span<const std::uint32_t> rows, std::size_t row_count);
  NodeId im2col(NodeId x, std::size_t kernel);
  NodeId col2im(NodeId cols, const ConvGeom& geom);
  NodeId avg_pool(NodeId x);
  NodeId avg_pool_adjoint(NodeId g, const Shape& input_shape);
  NodeId batch_transpose(NodeId x);

  /// Adds `x` to a row-broadcast bias vector.
  NodeId add_bias(NodeId x, NodeId bias);
  /// Squared L2 norm of every element.
  NodeId squared_norm(NodeId x);

  /// Gradient nodes of scalar `loss` with respect to arbitrary nodes of the
  /// graph, each treated as an independent variable. Returned nodes are
  /// ordinary graph nodes and may be differentiated again.
  std::vector<NodeId> partials(NodeId loss, std::span<const NodeId> wrt);

 private:
  NodeId push(Op op, std::vector<NodeId> inputs, Attrs attrs, Shape shape);
  NodeId share_indices(Op op, NodeId x, std::span<const std::uint32_t> idx, Attrs attrs,
                       Shape shape);
  void check_id(NodeId id) const;
  void compute(NodeId id);
  void accumulate(std::vector<std::optional<NodeId>>& grads, NodeId target, NodeId contribution);
  void vjp(NodeId id, NodeId upstream, const std::vector<bool>& active,
           std::vector<std::optional<NodeId>>& grads);

  DType dtype_;
  std::size_t capacity_;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> values_;
};

/// Binds every leaf in `bindings` and returns the value of every node.
std::vector<Tensor> eval(Graph& graph, const std::map<NodeId, Tensor>& bindings);

/// Reverse-mode gradients of scalar `loss` with respect to leaves. Nodes that
/// the loss does not depend on receive a zero constant.
std::map<NodeId, NodeId> backward(Graph& graph, NodeId loss, std::span<const NodeId> wrt);

/// Central-difference check of backward() for one float64 leaf. Returns the
/// maximum over elements of |analytic - numeric| / max(1, |numeric|).
double fd_check(Graph& graph, NodeId loss, NodeId leaf, double epsilon);

}  // namespace widistill
