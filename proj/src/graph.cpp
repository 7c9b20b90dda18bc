#include "widistill/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <set>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace widistill {

namespace {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string id_str(NodeId id) { return "node " + std::to_string(index(id)); }

std::size_t conv_pad(std::size_t kernel) { return kernel / 2; }

Shape conv_cols_shape(const ConvGeom& g) {
  return {g.batch * g.height * g.width, g.kernel * g.kernel * g.channels};
}

template <class T>
void im2col_kernel(const ConvGeom& g, std::span<const T> in, std::span<T> out) {
  const std::size_t k = g.kernel, pad = conv_pad(k), c = g.channels;
  const std::size_t row_len = k * k * c;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        T* row = out.data() + ((n * g.height + y) * g.width + x) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto sx =
                static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            T* dst = row + (ky * k + kx) * c;
            if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(g.height) ||
                sx >= static_cast<std::ptrdiff_t>(g.width)) {
              std::fill(dst, dst + c, T{0});
              continue;
            }
            const T* src = in.data() + ((n * g.height + static_cast<std::size_t>(sy)) * g.width +
                                        static_cast<std::size_t>(sx)) * c;
            std::copy(src, src + c, dst);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_kernel(const ConvGeom& g, std::span<const T> cols, std::span<T> out) {
  const std::size_t k = g.kernel, pad = conv_pad(k), c = g.channels;
  const std::size_t row_len = k * k * c;
  std::fill(out.begin(), out.end(), T{0});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        const T* row = cols.data() + ((n * g.height + y) * g.width + x) * row_len;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto sx =
                static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(g.width)) continue;
            const T* src = row + (ky * k + kx) * c;
            T* dst = out.data() + ((n * g.height + static_cast<std::size_t>(sy)) * g.width +
                                   static_cast<std::size_t>(sx)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

// Shared index walk for 2x2/stride-2 pooling and its adjoint.
template <class F>
void for_each_pool_window(const Shape& in, F&& f) {
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3];
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t o = ((b * oh + oy) * ow + ox) * c + ch;
          const std::size_t i00 = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
          f(o, i00, i00 + c, i00 + w * c, i00 + w * c + c);
        }
}

}  // namespace

const char* to_string(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::scalar_mul: return "scalar_mul";
    case Op::relu: return "relu";
    case Op::step_mask: return "step_mask";
    case Op::reshape: return "reshape";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast_scalar: return "broadcast_scalar";
    case Op::sum_axis: return "sum_axis";
    case Op::broadcast_axis: return "broadcast_axis";
    case Op::softmax: return "softmax";
    case Op::softmax_xent: return "softmax_xent";
    case Op::gather_rows: return "gather_rows";
    case Op::scatter_rows: return "scatter_rows";
    case Op::im2col: return "im2col";
    case Op::col2im: return "col2im";
    case Op::avg_pool: return "avg_pool";
    case Op::avg_pool_adjoint: return "avg_pool_adjoint";
    case Op::batch_transpose: return "batch_transpose";
  }
  return "?";
}

namespace {

// Node values are large, short-lived buffers. With glibc defaults each one is
// mmapped or trimmed back to the kernel, and page faults dominate run time.
void keep_freed_buffers() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

}  // namespace

Graph::Graph(DType dtype, std::size_t capacity) : dtype_(dtype), capacity_(capacity) {
  keep_freed_buffers();
}

void Graph::check_id(NodeId id) const {
  if (index(id) >= nodes_.size()) throw GraphError("unknown " + id_str(id));
}

NodeId Graph::push(Op op, std::vector<NodeId> inputs, Attrs attrs, Shape shape) {
  if (nodes_.size() >= capacity_) {
    throw GraphError("graph capacity of " + std::to_string(capacity_) + " nodes exhausted");
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(attrs), std::move(shape)});
  values_.emplace_back();
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::leaf(Shape shape) { return push(Op::leaf, {}, {}, std::move(shape)); }

NodeId Graph::leaf(const Tensor& value) {
  const NodeId id = leaf(value.shape());
  bind(id, value);
  return id;
}

NodeId Graph::constant(const Tensor& value) {
  if (value.dtype() != dtype_) {
    throw GraphError(std::string("constant: dtype ") + to_string(value.dtype()) +
                     " in a " + to_string(dtype_) + " graph");
  }
  const NodeId id = push(Op::constant, {}, {}, value.shape());
  values_.back() = value;
  return id;
}

void Graph::bind(NodeId id, const Tensor& value) {
  check_id(id);
  if (!is_leaf(id)) throw GraphError("bind: " + id_str(id) + " is not a leaf");
  if (value.dtype() != dtype_) {
    throw GraphError(std::string("bind: dtype ") + to_string(value.dtype()) + " in a " +
                     to_string(dtype_) + " graph");
  }
  if (value.shape() != shape(id)) {
    throw ShapeError("bind: leaf shape " + to_string(shape(id)) + " vs value shape " +
                     to_string(value.shape()));
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op != Op::leaf && nodes_[i].op != Op::constant) values_[i].reset();
  }
  values_[index(id)] = value;
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  check_id(a);
  check_id(b);
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2) {
    throw ShapeError("matmul: operands must be 2-D, got " + to_string(sa) + " and " +
                     to_string(sb));
  }
  const std::size_t m = trans_a ? sa[1] : sa[0];
  const std::size_t ka = trans_a ? sa[0] : sa[1];
  const std::size_t kb = trans_b ? sb[1] : sb[0];
  const std::size_t n = trans_b ? sb[0] : sb[1];
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + to_string(sa) +
                     (trans_a ? "^T" : "") + " and " + to_string(sb) + (trans_b ? "^T" : ""));
  }
  Attrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return push(Op::matmul, {a, b}, std::move(at), {m, n});
}

namespace {
void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape " + to_string(a) + " vs " + to_string(b));
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require_same("add", shape(a), shape(b));
  return push(Op::add, {a, b}, {}, shape(a));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require_same("sub", shape(a), shape(b));
  return push(Op::sub, {a, b}, {}, shape(a));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require_same("mul", shape(a), shape(b));
  return push(Op::mul, {a, b}, {}, shape(a));
}

NodeId Graph::scale(NodeId x, double factor) {
  check_id(x);
  Attrs at;
  at.factor = factor;
  return push(Op::scale, {x}, std::move(at), shape(x));
}

NodeId Graph::scalar_mul(NodeId s, NodeId x) {
  check_id(s);
  check_id(x);
  if (numel(shape(s)) != 1) {
    throw ShapeError("scalar_mul: scalar operand has shape " + to_string(shape(s)));
  }
  return push(Op::scalar_mul, {s, x}, {}, shape(x));
}

NodeId Graph::relu(NodeId x) {
  check_id(x);
  return push(Op::relu, {x}, {}, shape(x));
}

NodeId Graph::step_mask(NodeId x) {
  check_id(x);
  return push(Op::step_mask, {x}, {}, shape(x));
}

NodeId Graph::reshape(NodeId x, Shape s) {
  check_id(x);
  if (numel(s) != numel(shape(x))) {
    throw ShapeError("reshape: " + to_string(shape(x)) + " to " + to_string(s));
  }
  Attrs at;
  at.shape = s;
  return push(Op::reshape, {x}, std::move(at), std::move(s));
}

NodeId Graph::sum(NodeId x) {
  check_id(x);
  return push(Op::sum, {x}, {}, {});
}

NodeId Graph::mean(NodeId x) {
  check_id(x);
  return push(Op::mean, {x}, {}, {});
}

NodeId Graph::broadcast_scalar(NodeId s, Shape target) {
  check_id(s);
  if (numel(shape(s)) != 1) {
    throw ShapeError("broadcast_scalar: operand has shape " + to_string(shape(s)));
  }
  Attrs at;
  at.shape = target;
  return push(Op::broadcast_scalar, {s}, std::move(at), std::move(target));
}

NodeId Graph::sum_axis(NodeId x, std::size_t axis) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 2 || axis > 1) {
    throw ShapeError("sum_axis: needs a 2-D operand and axis 0/1, got " + to_string(s));
  }
  Attrs at;
  at.axis = axis;
  return push(Op::sum_axis, {x}, std::move(at), {axis == 0 ? s[1] : s[0]});
}

NodeId Graph::broadcast_axis(NodeId v, std::size_t axis, std::size_t count) {
  check_id(v);
  const Shape& s = shape(v);
  if (s.size() != 1 || axis > 1 || count == 0) {
    throw ShapeError("broadcast_axis: needs a 1-D operand, got " + to_string(s));
  }
  Attrs at;
  at.axis = axis;
  at.count = count;
  Shape out = axis == 0 ? Shape{count, s[0]} : Shape{s[0], count};
  return push(Op::broadcast_axis, {v}, std::move(at), std::move(out));
}

NodeId Graph::softmax(NodeId logits) {
  check_id(logits);
  if (shape(logits).size() != 2) {
    throw ShapeError("softmax: needs [rows, classes], got " + to_string(shape(logits)));
  }
  return push(Op::softmax, {logits}, {}, shape(logits));
}

NodeId Graph::share_indices(Op op, NodeId x, std::span<const std::uint32_t> idx, Attrs attrs,
                            Shape s) {
  attrs.indices = std::make_shared<const std::vector<std::uint32_t>>(idx.begin(), idx.end());
  return push(op, {x}, std::move(attrs), std::move(s));
}

NodeId Graph::softmax_xent(NodeId logits, std::span<const std::uint32_t> labels) {
  check_id(logits);
  const Shape& s = shape(logits);
  if (s.size() != 2) {
    throw ShapeError("softmax_xent: logits must be [batch, classes], got " + to_string(s));
  }
  if (labels.size() != s[0]) {
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(s));
  }
  for (std::uint32_t y : labels) {
    if (y >= s[1]) {
      throw std::out_of_range("softmax_xent: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(s[1]) + ")");
    }
  }
  return share_indices(Op::softmax_xent, logits, labels, {}, {});
}

NodeId Graph::gather_rows(NodeId x, std::span<const std::uint32_t> rows) {
  check_id(x);
  Shape s = shape(x);
  if (s.empty()) throw ShapeError("gather_rows: operand is a scalar");
  for (std::uint32_t r : rows) {
    if (r >= s[0]) throw ShapeError("gather_rows: row " + std::to_string(r) + " outside " + to_string(s));
  }
  s[0] = rows.size();
  return share_indices(Op::gather_rows, x, rows, {}, std::move(s));
}

NodeId Graph::scatter_rows(NodeId x, std::span<const std::uint32_t> rows, std::size_t row_count) {
  check_id(x);
  Shape s = shape(x);
  if (s.empty() || s[0] != rows.size()) {
    throw ShapeError("scatter_rows: " + std::to_string(rows.size()) + " rows for " + to_string(s));
  }
  for (std::uint32_t r : rows) {
    if (r >= row_count) throw ShapeError("scatter_rows: row " + std::to_string(r) + " out of range");
  }
  Attrs at;
  at.count = row_count;
  s[0] = row_count;
  return share_indices(Op::scatter_rows, x, rows, std::move(at), std::move(s));
}

NodeId Graph::im2col(NodeId x, std::size_t kernel) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 4 || kernel % 2 == 0) {
    throw ShapeError("im2col: needs NHWC input and odd kernel, got " + to_string(s));
  }
  Attrs at;
  at.conv = ConvGeom{s[0], s[1], s[2], s[3], kernel};
  Shape out = conv_cols_shape(at.conv);
  return push(Op::im2col, {x}, std::move(at), std::move(out));
}

NodeId Graph::col2im(NodeId cols, const ConvGeom& geom) {
  check_id(cols);
  if (shape(cols) != conv_cols_shape(geom)) {
    throw ShapeError("col2im: columns " + to_string(shape(cols)) + " vs expected " +
                     to_string(conv_cols_shape(geom)));
  }
  Attrs at;
  at.conv = geom;
  return push(Op::col2im, {cols}, std::move(at),
              {geom.batch, geom.height, geom.width, geom.channels});
}

NodeId Graph::avg_pool(NodeId x) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 4 || s[1] < 2 || s[2] < 2) {
    throw ShapeError("avg_pool: needs NHWC input with H, W >= 2, got " + to_string(s));
  }
  return push(Op::avg_pool, {x}, {}, {s[0], s[1] / 2, s[2] / 2, s[3]});
}

NodeId Graph::avg_pool_adjoint(NodeId g, const Shape& input_shape) {
  check_id(g);
  if (input_shape.size() != 4) throw ShapeError("avg_pool_adjoint: input shape must be NHWC");
  const Shape pooled{input_shape[0], input_shape[1] / 2, input_shape[2] / 2, input_shape[3]};
  if (shape(g) != pooled) {
    throw ShapeError("avg_pool_adjoint: upstream " + to_string(shape(g)) + " vs pooled " +
                     to_string(pooled));
  }
  Attrs at;
  at.shape = input_shape;
  return push(Op::avg_pool_adjoint, {g}, std::move(at), input_shape);
}

NodeId Graph::batch_transpose(NodeId x) {
  check_id(x);
  const Shape& s = shape(x);
  if (s.size() != 3) throw ShapeError("batch_transpose: needs rank 3, got " + to_string(s));
  return push(Op::batch_transpose, {x}, {}, {s[0], s[2], s[1]});
}

NodeId Graph::add_bias(NodeId x, NodeId bias) {
  const Shape& s = shape(x);
  if (s.size() != 2) throw ShapeError("add_bias: needs 2-D input, got " + to_string(s));
  return add(x, broadcast_axis(bias, 0, s[0]));
}

NodeId Graph::squared_norm(NodeId x) { return sum(mul(x, x)); }

const Tensor& Graph::value(NodeId id) {
  check_id(id);
  if (values_[index(id)]) return *values_[index(id)];

  std::vector<NodeId> pending;
  std::vector<char> seen(index(id) + 1, 0);
  std::vector<NodeId> stack{id};
  while (!stack.empty()) {
    const NodeId cur = stack.back();
    stack.pop_back();
    if (seen[index(cur)] || values_[index(cur)]) continue;
    seen[index(cur)] = 1;
    if (nodes_[index(cur)].op == Op::leaf) {
      throw GraphError("eval: leaf " + std::to_string(index(cur)) + " is unbound");
    }
    pending.push_back(cur);
    for (NodeId in : nodes_[index(cur)].inputs) stack.push_back(in);
  }
  std::sort(pending.begin(), pending.end());
  for (NodeId n : pending) compute(n);
  return *values_[index(id)];
}

void Graph::compute(NodeId id) {
  const Node& nd = nodes_[index(id)];
  const Attrs& at = nd.attrs;
  auto in = [&](std::size_t i) -> const Tensor& { return *values_[index(nd.inputs[i])]; };

  if (nd.op == Op::reshape) {
    values_[index(id)] = in(0).reshaped(nd.shape);
    return;
  }
  values_[index(id)] = visit_dtype(dtype_, [&]<typename T>() -> Tensor {
    const std::size_t n = numel(nd.shape);
    std::vector<T> out(n);
    auto elementwise = [&](auto&& f) {
      auto a = in(0).view<T>();
      for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i]);
    };
    auto binary = [&](auto&& f) {
      auto a = in(0).view<T>();
      auto b = in(1).view<T>();
      for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
    };

    switch (nd.op) {
      case Op::leaf:
      case Op::constant:
        throw GraphError("eval: " + id_str(id) + " has no value");
      case Op::matmul: {
        const Shape& sa = in(0).shape();
        const Shape& sb = in(1).shape();
        Eigen::Map<const RowMajor<T>> a(in(0).view<T>().data(), sa[0], sa[1]);
        Eigen::Map<const RowMajor<T>> b(in(1).view<T>().data(), sb[0], sb[1]);
        Eigen::Map<RowMajor<T>> c(out.data(), nd.shape[0], nd.shape[1]);
        if (!at.trans_a && !at.trans_b) c.noalias() = a * b;
        else if (at.trans_a && !at.trans_b) c.noalias() = a.transpose() * b;
        else if (!at.trans_a && at.trans_b) c.noalias() = a * b.transpose();
        else c.noalias() = a.transpose() * b.transpose();
        break;
      }
      case Op::add: binary([](T a, T b) { return a + b; }); break;
      case Op::sub: binary([](T a, T b) { return a - b; }); break;
      case Op::mul: binary([](T a, T b) { return a * b; }); break;
      case Op::scale: {
        const T f = static_cast<T>(at.factor);
        elementwise([f](T a) { return f * a; });
        break;
      }
      case Op::scalar_mul: {
        const T s = in(0).view<T>()[0];
        auto x = in(1).view<T>();
        for (std::size_t i = 0; i < n; ++i) out[i] = s * x[i];
        break;
      }
      case Op::relu: elementwise([](T a) { return a > T{0} ? a : T{0}; }); break;
      case Op::step_mask: elementwise([](T a) { return a > T{0} ? T{1} : T{0}; }); break;
      case Op::reshape: return in(0).reshaped(nd.shape);
      case Op::sum:
      case Op::mean: {
        double acc = 0.0;
        for (T v : in(0).view<T>()) acc += static_cast<double>(v);
        if (nd.op == Op::mean) acc /= static_cast<double>(in(0).numel());
        out[0] = static_cast<T>(acc);
        break;
      }
      case Op::broadcast_scalar:
        std::fill(out.begin(), out.end(), in(0).view<T>()[0]);
        break;
      case Op::sum_axis: {
        const Shape& s = in(0).shape();
        auto x = in(0).view<T>();
        std::fill(out.begin(), out.end(), T{0});
        for (std::size_t r = 0; r < s[0]; ++r)
          for (std::size_t c = 0; c < s[1]; ++c) out[at.axis == 0 ? c : r] += x[r * s[1] + c];
        break;
      }
      case Op::broadcast_axis: {
        auto v = in(0).view<T>();
        const std::size_t rows = nd.shape[0], cols = nd.shape[1];
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v[at.axis == 0 ? c : r];
        break;
      }
      case Op::softmax: {
        auto x = in(0).view<T>();
        const std::size_t rows = nd.shape[0], cols = nd.shape[1];
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = x.data() + r * cols;
          T* o = out.data() + r * cols;
          const T mx = *std::max_element(xr, xr + cols);
          double z = 0.0;
          for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(xr[c] - mx));
          for (std::size_t c = 0; c < cols; ++c) {
            o[c] = static_cast<T>(std::exp(static_cast<double>(xr[c] - mx)) / z);
          }
        }
        break;
      }
      case Op::softmax_xent: {
        auto x = in(0).view<T>();
        const Shape& s = in(0).shape();
        const auto& labels = *at.indices;
        double total = 0.0;
        for (std::size_t r = 0; r < s[0]; ++r) {
          const T* xr = x.data() + r * s[1];
          const double mx = static_cast<double>(*std::max_element(xr, xr + s[1]));
          double z = 0.0;
          for (std::size_t c = 0; c < s[1]; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
          total += mx + std::log(z) - static_cast<double>(xr[labels[r]]);
        }
        out[0] = static_cast<T>(total / static_cast<double>(s[0]));
        break;
      }
      case Op::gather_rows:
      case Op::scatter_rows: {
        auto x = in(0).view<T>();
        const auto& rows = *at.indices;
        const std::size_t stride = rows.empty() ? 0 : in(0).numel() / in(0).shape()[0];
        std::fill(out.begin(), out.end(), T{0});
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (nd.op == Op::gather_rows) {
            std::copy_n(x.data() + rows[i] * stride, stride, out.data() + i * stride);
          } else {
            T* dst = out.data() + rows[i] * stride;
            const T* src = x.data() + i * stride;
            for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
          }
        }
        break;
      }
      case Op::im2col: im2col_kernel<T>(at.conv, in(0).view<T>(), out); break;
      case Op::col2im: col2im_kernel<T>(at.conv, in(0).view<T>(), out); break;
      case Op::avg_pool: {
        auto x = in(0).view<T>();
        for_each_pool_window(in(0).shape(), [&](std::size_t o, std::size_t a, std::size_t b,
                                                std::size_t c, std::size_t d) {
          out[o] = T(0.25) * (x[a] + x[b] + x[c] + x[d]);
        });
        break;
      }
      case Op::avg_pool_adjoint: {
        auto g = in(0).view<T>();
        std::fill(out.begin(), out.end(), T{0});
        for_each_pool_window(at.shape, [&](std::size_t o, std::size_t a, std::size_t b,
                                           std::size_t c, std::size_t d) {
          const T v = T(0.25) * g[o];
          out[a] = v;
          out[b] = v;
          out[c] = v;
          out[d] = v;
        });
        break;
      }
      case Op::batch_transpose: {
        auto x = in(0).view<T>();
        const Shape& s = in(0).shape();
        for (std::size_t b = 0; b < s[0]; ++b)
          for (std::size_t i = 0; i < s[1]; ++i)
            for (std::size_t j = 0; j < s[2]; ++j)
              out[(b * s[2] + j) * s[1] + i] = x[(b * s[1] + i) * s[2] + j];
        break;
      }
    }
    return Tensor::adopt<T>(Shape(nd.shape), std::move(out));
  });
}

void Graph::accumulate(std::vector<std::optional<NodeId>>& grads, NodeId target,
                       NodeId contribution) {
  auto& slot = grads[index(target)];
  slot = slot ? add(*slot, contribution) : contribution;
}

void Graph::vjp(NodeId id, NodeId u, const std::vector<bool>& active,
                std::vector<std::optional<NodeId>>& grads) {
  // Copy: pushing nodes below may reallocate nodes_.
  const Node nd = nodes_[index(id)];
  auto want = [&](std::size_t i) { return active[index(nd.inputs[i])]; };
  auto give = [&](std::size_t i, NodeId g) { accumulate(grads, nd.inputs[i], g); };
  const NodeId x = nd.inputs.empty() ? id : nd.inputs[0];
  const Shape xs = shape(x);

  switch (nd.op) {
    case Op::leaf:
    case Op::constant:
    case Op::step_mask:
      break;
    case Op::matmul: {
      const NodeId a = nd.inputs[0], b = nd.inputs[1];
      const bool ta = nd.attrs.trans_a, tb = nd.attrs.trans_b;
      if (want(0)) {
        if (!ta && !tb) give(0, matmul(u, b, false, true));
        else if (ta && !tb) give(0, matmul(b, u, false, true));
        else if (!ta && tb) give(0, matmul(u, b, false, false));
        else give(0, matmul(b, u, true, true));
      }
      if (want(1)) {
        if (!ta && !tb) give(1, matmul(a, u, true, false));
        else if (ta && !tb) give(1, matmul(a, u, false, false));
        else if (!ta && tb) give(1, matmul(u, a, true, false));
        else give(1, matmul(u, a, true, true));
      }
      break;
    }
    case Op::add:
      if (want(0)) give(0, u);
      if (want(1)) give(1, u);
      break;
    case Op::sub:
      if (want(0)) give(0, u);
      if (want(1)) give(1, scale(u, -1.0));
      break;
    case Op::mul:
      if (want(0)) give(0, mul(u, nd.inputs[1]));
      if (want(1)) give(1, mul(u, nd.inputs[0]));
      break;
    case Op::scale:
      give(0, scale(u, nd.attrs.factor));
      break;
    case Op::scalar_mul: {
      const NodeId s = nd.inputs[0], v = nd.inputs[1];
      if (want(0)) give(0, reshape(sum(mul(u, v)), xs));
      if (want(1)) give(1, scalar_mul(s, u));
      break;
    }
    case Op::relu:
      give(0, mul(u, step_mask(x)));
      break;
    case Op::reshape:
      give(0, reshape(u, xs));
      break;
    case Op::sum:
      give(0, broadcast_scalar(u, xs));
      break;
    case Op::mean:
      give(0, scale(broadcast_scalar(u, xs), 1.0 / static_cast<double>(numel(xs))));
      break;
    case Op::broadcast_scalar:
      give(0, reshape(sum(u), xs));
      break;
    case Op::sum_axis:
      give(0, broadcast_axis(u, nd.attrs.axis, xs[nd.attrs.axis]));
      break;
    case Op::broadcast_axis:
      give(0, sum_axis(u, nd.attrs.axis));
      break;
    case Op::softmax: {
      // p * (u - rowsum(p * u)), with p the softmax node itself.
      const std::size_t cols = nd.shape[1];
      const NodeId pu = sum_axis(mul(id, u), 1);
      give(0, mul(id, sub(u, broadcast_axis(pu, 1, cols))));
      break;
    }
    case Op::softmax_xent: {
      const Shape& s = xs;
      const auto& labels = *nd.attrs.indices;
      std::vector<double> onehot(numel(s), 0.0);
      for (std::size_t r = 0; r < s[0]; ++r) onehot[r * s[1] + labels[r]] = 1.0;
      const NodeId target = constant(Tensor::from_doubles(s, onehot, dtype_));
      const NodeId residual = scale(sub(softmax(x), target), 1.0 / static_cast<double>(s[0]));
      give(0, scalar_mul(u, residual));
      break;
    }
    case Op::gather_rows:
      give(0, scatter_rows(u, *nd.attrs.indices, xs[0]));
      break;
    case Op::scatter_rows:
      give(0, gather_rows(u, *nd.attrs.indices));
      break;
    case Op::im2col:
      give(0, col2im(u, nd.attrs.conv));
      break;
    case Op::col2im:
      give(0, im2col(u, nd.attrs.conv.kernel));
      break;
    case Op::avg_pool:
      give(0, avg_pool_adjoint(u, xs));
      break;
    case Op::avg_pool_adjoint:
      give(0, avg_pool(u));
      break;
    case Op::batch_transpose:
      give(0, batch_transpose(u));
      break;
  }
}

std::vector<NodeId> Graph::partials(NodeId loss, std::span<const NodeId> wrt) {
  check_id(loss);
  if (numel(shape(loss)) != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + to_string(shape(loss)));
  }
  const std::size_t end = index(loss) + 1;
  std::vector<bool> is_target(end, false);
  for (NodeId w : wrt) {
    check_id(w);
    if (index(w) < end) is_target[index(w)] = true;
  }
  // active: depends on some target through a differentiable path.
  std::vector<bool> active(end, false);
  for (std::size_t i = 0; i < end; ++i) {
    if (is_target[i]) {
      active[i] = true;
      continue;
    }
    const Node& nd = nodes_[i];
    if (nd.op == Op::step_mask) continue;
    for (NodeId in : nd.inputs) {
      if (active[index(in)]) {
        active[i] = true;
        break;
      }
    }
  }

  std::vector<std::optional<NodeId>> grads(end);
  if (active[index(loss)]) {
    grads[index(loss)] = constant(Tensor::full(shape(loss), dtype_, 1.0));
  }
  for (std::size_t i = end; i-- > 0;) {
    if (!active[i] || !grads[i] || is_target[i]) continue;
    vjp(static_cast<NodeId>(i), *grads[i], active, grads);
  }

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId w : wrt) {
    if (index(w) < end && grads[index(w)]) {
      out.push_back(*grads[index(w)]);
    } else {
      out.push_back(constant(Tensor::zeros(shape(w), dtype_)));
    }
  }
  return out;
}

std::vector<Tensor> eval(Graph& graph, const std::map<NodeId, Tensor>& bindings) {
  for (const auto& [id, value] : bindings) graph.bind(id, value);
  std::vector<Tensor> out;
  out.reserve(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) out.push_back(graph.value(static_cast<NodeId>(i)));
  return out;
}

std::map<NodeId, NodeId> backward(Graph& graph, NodeId loss, std::span<const NodeId> wrt) {
  for (NodeId w : wrt) {
    if (index(w) >= graph.size() || !graph.is_leaf(w)) {
      throw GraphError("backward: " + id_str(w) + " is not a leaf");
    }
  }
  const auto grads = graph.partials(loss, wrt);
  std::map<NodeId, NodeId> out;
  for (std::size_t i = 0; i < wrt.size(); ++i) out.emplace(wrt[i], grads[i]);
  return out;
}

double fd_check(Graph& graph, NodeId loss, NodeId leaf, double epsilon) {
  if (graph.dtype() != DType::f64) throw GraphError("fd_check: requires a float64 graph");
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw GraphError("fd_check: epsilon must be in (0, 1e-2]");
  const NodeId leaves[] = {leaf};
  const NodeId grad = backward(graph, loss, leaves).at(leaf);
  const Tensor base = graph.value(leaf);
  const std::vector<double> analytic = graph.value(grad).to_doubles();

  std::vector<double> x = base.to_doubles();
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + epsilon;
    graph.bind(leaf, Tensor::from_doubles(base.shape(), x, DType::f64));
    const double up = graph.value(loss).item();
    x[i] = orig - epsilon;
    graph.bind(leaf, Tensor::from_doubles(base.shape(), x, DType::f64));
    const double down = graph.value(loss).item();
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  graph.bind(leaf, base);
  return worst;
}

}  // namespace widistill
