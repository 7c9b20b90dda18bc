#include "widistill/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "widistill/rng.hpp"

namespace widistill {

namespace {

Tensor gather_rows(const Tensor& samples, std::span<const std::uint32_t> rows) {
  const std::size_t d = samples.numel() / samples.shape()[0];
  Shape shape = samples.shape();
  shape[0] = rows.size();
  return visit_dtype(samples.dtype(), [&]<typename T>() {
    auto src = samples.view<T>();
    std::vector<T> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return Tensor::adopt<T>(std::move(shape), std::move(out));
  });
}

// Loss and flat gradient of one minibatch.
std::pair<double, Tensor> loss_and_grad(const ModelSpec& spec, const NetworkParams& params,
                                        const Tensor& x, std::span<const std::uint32_t> y) {
  Graph g(params.flat.dtype());
  const ParamNodes nodes = add_param_leaves(g, params);
  const NodeId loss = classification_loss(g, forward(g, spec, nodes, g.constant(x)), y);
  const auto grads = g.partials(loss, nodes);
  std::vector<Tensor> layers;
  layers.reserve(grads.size());
  for (NodeId n : grads) layers.push_back(g.value(n));
  return {g.value(loss).item(), NetworkParams::from_layers(params.layout, layers).flat};
}

}  // namespace

Tensor predict(const ModelSpec& spec, const NetworkParams& params, const Tensor& samples,
               std::size_t chunk) {
  const std::size_t n = samples.shape().at(0);
  std::vector<double> logits;
  logits.reserve(n * spec.class_count);
  std::vector<std::uint32_t> rows;
  for (std::size_t start = 0; start < n; start += chunk) {
    rows.resize(std::min(chunk, n - start));
    std::iota(rows.begin(), rows.end(), static_cast<std::uint32_t>(start));
    const auto part = forward(spec, params, gather_rows(samples, rows)).to_doubles();
    logits.insert(logits.end(), part.begin(), part.end());
  }
  return Tensor::from_doubles({n, spec.class_count}, logits, DType::f64);
}

NetworkParams train_sgd(const ModelSpec& spec, NetworkParams init, const Tensor& samples,
                        std::span<const std::uint32_t> labels, const SgdOptions& opts,
                        const EpochCallback& on_epoch) {
  if (opts.batch_size == 0) throw std::invalid_argument("sgd: batch_size must be >= 1");
  if (!(opts.lr > 0.0)) throw std::invalid_argument("sgd: lr must be > 0");
  if (!(opts.momentum >= 0.0 && opts.momentum < 1.0)) {
    throw std::invalid_argument("sgd: momentum must be in [0, 1)");
  }
  const std::size_t n = labels.size();
  if (samples.rank() == 0 || samples.shape()[0] != n || n == 0) {
    throw ShapeError("sgd: " + std::to_string(labels.size()) + " labels for samples " +
                     to_string(samples.shape()));
  }
  const Tensor x_all = samples.cast(init.flat.dtype());

  return visit_dtype(init.flat.dtype(), [&]<typename T>() {
    auto theta_view = init.flat.view<T>();
    std::vector<T> theta(theta_view.begin(), theta_view.end());
    std::vector<T> velocity(theta.size(), T(0));
    const T lr = static_cast<T>(opts.lr), mu = static_cast<T>(opts.momentum);
    std::vector<std::uint32_t> order(n), batch_labels;
    NetworkParams current = init;

    for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0u);
      std::mt19937_64 rng(derive_seed(opts.shuffle_seed, "shuffle", epoch));
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < n; start += opts.batch_size) {
        const std::span<const std::uint32_t> rows(order.data() + start,
                                                  std::min(opts.batch_size, n - start));
        batch_labels.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) batch_labels[i] = labels[rows[i]];
        const auto [loss, grad] = loss_and_grad(spec, current, gather_rows(x_all, rows), batch_labels);
        if (!std::isfinite(loss)) {
          throw TrainingError("training diverged: non-finite loss in epoch " + std::to_string(epoch));
        }
        loss_sum += loss * static_cast<double>(rows.size());
        auto g = grad.view<T>();
        for (std::size_t i = 0; i < theta.size(); ++i) {
          velocity[i] = mu * velocity[i] + g[i];
          theta[i] -= lr * velocity[i];
        }
        current = NetworkParams{Tensor::adopt<T>({theta.size()}, std::vector<T>(theta)), init.layout};
      }
      EpochMetrics m;
      m.loss = loss_sum / static_cast<double>(n);
      m.accuracy = accuracy(predict(spec, current, x_all), labels);
      if (on_epoch) on_epoch(epoch, current, m);
    }
    return current;
  });
}

}  // namespace widistill
