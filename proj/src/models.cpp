#include "widistill/models.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace widistill {

const char* to_string(ModelKind kind) { return kind == ModelKind::mlp ? "mlp" : "cnn"; }

ModelKind parse_model_kind(const std::string& name) {
  if (name == "mlp") return ModelKind::mlp;
  if (name == "cnn") return ModelKind::cnn;
  throw std::invalid_argument("unknown model kind '" + name + "' (expected mlp or cnn)");
}

namespace {

// [H, W, C] view of the input for the convolutional path.
struct ImageDims {
  std::size_t height, width, channels;
};

ImageDims image_dims(const Shape& input) {
  if (input.size() == 2) return {input[0], input[1], 1};
  if (input.size() == 3) return {input[1], input[2], input[0]};
  throw std::invalid_argument("cnn: input shape must be [H, W] or [C, H, W], got " +
                              to_string(input));
}

}  // namespace

void ModelSpec::validate() const {
  if (class_count < 2) throw std::invalid_argument("model: class_count must be >= 2");
  if (input_shape.empty() || numel(input_shape) == 0) {
    throw std::invalid_argument("model: input_shape must be non-empty, got " + to_string(input_shape));
  }
  for (std::size_t h : hidden) {
    if (h == 0) throw std::invalid_argument("model: hidden widths must be positive");
  }
  if (kind == ModelKind::cnn) {
    if (hidden.empty()) throw std::invalid_argument("cnn: needs at least one conv block");
    auto dims = image_dims(input_shape);
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      if (dims.height < 2 || dims.width < 2) {
        throw std::invalid_argument("cnn: input " + to_string(input_shape) + " too small for " +
                                    std::to_string(hidden.size()) + " pooling stages");
      }
      dims.height /= 2;
      dims.width /= 2;
    }
  }
}

ModelSpec default_spec(ModelKind kind, Shape input_shape, std::size_t class_count) {
  ModelSpec spec{kind, std::move(input_shape), class_count, {}};
  spec.hidden = kind == ModelKind::mlp ? std::vector<std::size_t>{256, 256}
                                       : std::vector<std::size_t>{16, 32};
  return spec;
}

void to_json(nlohmann::json& j, const ModelSpec& spec) {
  j = nlohmann::json{{"kind", to_string(spec.kind)},
                     {"input_shape", spec.input_shape},
                     {"class_count", spec.class_count},
                     {"hidden", spec.hidden}};
}

void from_json(const nlohmann::json& j, ModelSpec& spec) {
  spec.kind = parse_model_kind(j.at("kind").get<std::string>());
  spec.input_shape = j.at("input_shape").get<Shape>();
  spec.class_count = j.at("class_count").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
}

std::vector<LayoutEntry> param_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<LayoutEntry> layout;
  std::size_t offset = 0;
  auto add = [&](std::string name, Shape shape) {
    const std::size_t n = numel(shape);
    layout.push_back({std::move(name), std::move(shape), offset});
    offset += n;
  };
  if (spec.kind == ModelKind::mlp) {
    std::size_t in = numel(spec.input_shape);
    std::size_t i = 1;
    for (std::size_t width : spec.hidden) {
      add("fc" + std::to_string(i) + ".weight", {in, width});
      add("fc" + std::to_string(i) + ".bias", {width});
      in = width;
      ++i;
    }
    add("fc" + std::to_string(i) + ".weight", {in, spec.class_count});
    add("fc" + std::to_string(i) + ".bias", {spec.class_count});
  } else {
    auto dims = image_dims(spec.input_shape);
    std::size_t channels = dims.channels;
    std::size_t i = 1;
    for (std::size_t out : spec.hidden) {
      add("conv" + std::to_string(i) + ".weight", {9 * channels, out});
      add("conv" + std::to_string(i) + ".bias", {out});
      channels = out;
      dims.height /= 2;
      dims.width /= 2;
      ++i;
    }
    add("fc.weight", {dims.height * dims.width * channels, spec.class_count});
    add("fc.bias", {spec.class_count});
  }
  return layout;
}

std::vector<Tensor> NetworkParams::layers() const {
  std::vector<Tensor> out;
  out.reserve(layout.size());
  for (const auto& e : layout) out.push_back(flat.slice(e.offset, e.shape));
  return out;
}

NetworkParams NetworkParams::from_layers(std::vector<LayoutEntry> layout,
                                         std::span<const Tensor> layers) {
  if (layers.size() != layout.size()) {
    throw std::invalid_argument("params: " + std::to_string(layers.size()) + " layers for a " +
                                std::to_string(layout.size()) + "-entry layout");
  }
  const DType dtype = layers.empty() ? DType::f32 : layers.front().dtype();
  const std::size_t total = layout.empty() ? 0 : layout.back().offset + numel(layout.back().shape);
  return visit_dtype(dtype, [&]<typename T>() {
    std::vector<T> flat(total);
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layers[i].shape() != layout[i].shape) {
        throw ShapeError("params: layer " + layout[i].name + " has shape " +
                         to_string(layers[i].shape()) + ", layout says " + to_string(layout[i].shape));
      }
      const Tensor layer = layers[i].cast(dtype);
      auto v = layer.view<T>();
      std::copy(v.begin(), v.end(), flat.begin() + static_cast<std::ptrdiff_t>(layout[i].offset));
    }
    return NetworkParams{Tensor::adopt<T>({total}, std::move(flat)), std::move(layout)};
  });
}

NetworkParams init_params(const ModelSpec& spec, std::uint64_t seed, InitMode mode, DType dtype) {
  auto layout = param_layout(spec);
  const std::size_t total = layout.back().offset + numel(layout.back().shape);
  std::vector<double> flat(total, 0.0);
  if (mode == InitMode::glorot_uniform) {
    std::mt19937_64 rng(seed);
    for (const auto& e : layout) {
      if (e.shape.size() != 2) continue;  // biases stay zero
      double fan_in = static_cast<double>(e.shape[0]);
      double fan_out = static_cast<double>(e.shape[1]);
      if (e.name.rfind("conv", 0) == 0) fan_out *= 9.0;  // receptive field of a 3x3 kernel
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (std::size_t i = 0; i < numel(e.shape); ++i) flat[e.offset + i] = dist(rng);
    }
  }
  return NetworkParams{Tensor::from_doubles({total}, flat, dtype), std::move(layout)};
}

namespace {

ParamNodes add_params(Graph& graph, const NetworkParams& params, bool as_leaves) {
  ParamNodes nodes;
  for (const Tensor& layer : params.cast(graph.dtype()).layers()) {
    nodes.push_back(as_leaves ? graph.leaf(layer) : graph.constant(layer));
  }
  return nodes;
}

}  // namespace

ParamNodes add_param_leaves(Graph& graph, const NetworkParams& params) {
  return add_params(graph, params, true);
}

ParamNodes add_param_constants(Graph& graph, const NetworkParams& params) {
  return add_params(graph, params, false);
}

NodeId forward(Graph& graph, const ModelSpec& spec, std::span<const NodeId> params, NodeId batch) {
  const Shape in = graph.shape(batch);
  Shape expected{in.empty() ? 0 : in[0]};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (in.empty() || in[0] == 0 || in != expected) {
    throw ShapeError("forward: expected batch shape " + to_string(expected) + " ([B]+" +
                     to_string(spec.input_shape) + "), got " + to_string(in));
  }
  const auto layout = param_layout(spec);
  if (params.size() != layout.size()) {
    throw ShapeError("forward: " + std::to_string(params.size()) + " parameter nodes for a " +
                     std::to_string(layout.size()) + "-entry layout");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (graph.shape(params[i]) != layout[i].shape) {
      throw ShapeError("forward: parameter " + layout[i].name + " has shape " +
                       to_string(graph.shape(params[i])) + ", expected " + to_string(layout[i].shape));
    }
  }
  const std::size_t rows = in[0];

  if (spec.kind == ModelKind::mlp) {
    NodeId h = graph.reshape(batch, {rows, numel(spec.input_shape)});
    const std::size_t layers = layout.size() / 2;
    for (std::size_t l = 0; l < layers; ++l) {
      h = graph.add_bias(graph.matmul(h, params[2 * l]), params[2 * l + 1]);
      if (l + 1 < layers) h = graph.relu(h);
    }
    return h;
  }

  auto dims = image_dims(spec.input_shape);
  NodeId x;
  if (spec.input_shape.size() == 2) {
    x = graph.reshape(batch, {rows, dims.height, dims.width, 1});
  } else {
    const NodeId chw = graph.reshape(batch, {rows, dims.channels, dims.height * dims.width});
    x = graph.reshape(graph.batch_transpose(chw), {rows, dims.height, dims.width, dims.channels});
  }
  for (std::size_t b = 0; b < spec.hidden.size(); ++b) {
    const std::size_t out = spec.hidden[b];
    const NodeId conv = graph.add_bias(graph.matmul(graph.im2col(x, 3), params[2 * b]),
                                       params[2 * b + 1]);
    x = graph.avg_pool(graph.relu(graph.reshape(conv, {rows, dims.height, dims.width, out})));
    dims = {dims.height / 2, dims.width / 2, out};
  }
  const std::size_t fc = 2 * spec.hidden.size();
  const NodeId flat = graph.reshape(x, {rows, dims.height * dims.width * dims.channels});
  return graph.add_bias(graph.matmul(flat, params[fc]), params[fc + 1]);
}

Tensor forward(const ModelSpec& spec, const NetworkParams& params, const Tensor& batch) {
  Graph graph(batch.dtype());
  const ParamNodes p = add_param_constants(graph, params);
  return graph.value(forward(graph, spec, p, graph.constant(batch)));
}

NodeId classification_loss(Graph& graph, NodeId logits, std::span<const std::uint32_t> labels) {
  return graph.softmax_xent(logits, labels);
}

double accuracy(const Tensor& logits, std::span<const std::uint32_t> labels) {
  if (logits.rank() != 2 || logits.shape()[0] == 0) {
    throw std::invalid_argument("accuracy: needs a non-empty [batch, classes] tensor, got " +
                                to_string(logits.shape()));
  }
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  if (labels.size() != rows) {
    throw ShapeError("accuracy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  }
  const std::vector<double> v = logits.to_doubles();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    }
    hits += best == labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

}  // namespace widistill
