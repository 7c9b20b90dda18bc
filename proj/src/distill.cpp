#include "widistill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "widistill/rng.hpp"

namespace widistill {

void DistillConfig::validate() const {
  if (K < 1) throw std::invalid_argument("distill: K must be >= 1");
  if (J < 1) throw std::invalid_argument("distill: J must be >= 1");
  if (T_plus < 1) throw std::invalid_argument("distill: T_plus must be >= 1");
  if (!(denom_eps > 0.0)) throw std::invalid_argument("distill: denom_eps must be > 0");
  if (!(lr_samples >= 0.0) || !(lr_alpha >= 0.0)) {
    throw std::invalid_argument("distill: meta learning rates must be >= 0");
  }
  if (!(meta_momentum >= 0.0 && meta_momentum < 1.0)) {
    throw std::invalid_argument("distill: meta_momentum must be in [0, 1)");
  }
  if (!(alpha_init > 0.0)) throw std::invalid_argument("distill: alpha_init must be > 0");
  if (minibatch < 1) throw std::invalid_argument("distill: minibatch must be >= 1");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"K", c.K},
                     {"J", c.J},
                     {"T_plus", c.T_plus},
                     {"iterations", c.iterations},
                     {"lr_samples", c.lr_samples},
                     {"lr_alpha", c.lr_alpha},
                     {"meta_momentum", c.meta_momentum},
                     {"alpha_init", c.alpha_init},
                     {"denom_eps", c.denom_eps},
                     {"checkpoint_every", c.checkpoint_every},
                     {"full_batch_limit", c.full_batch_limit},
                     {"minibatch", c.minibatch},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.K = j.value("K", d.K);
  c.J = j.value("J", d.J);
  c.T_plus = j.value("T_plus", d.T_plus);
  c.iterations = j.value("iterations", d.iterations);
  c.lr_samples = j.value("lr_samples", d.lr_samples);
  c.lr_alpha = j.value("lr_alpha", d.lr_alpha);
  c.meta_momentum = j.value("meta_momentum", d.meta_momentum);
  c.alpha_init = j.value("alpha_init", d.alpha_init);
  c.denom_eps = j.value("denom_eps", d.denom_eps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.full_batch_limit = j.value("full_batch_limit", d.full_batch_limit);
  c.minibatch = j.value("minibatch", d.minibatch);
  c.seed = j.value("seed", d.seed);
}

SyntheticDataset init_synthetic(const LabeledDataset& real, std::size_t spc, std::uint64_t seed,
                                double alpha_init, DType dtype) {
  if (spc < 1) throw std::invalid_argument("init_synthetic: spc must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> rows, labels;
  const auto by_class = real.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.size() < spc) {
      throw std::invalid_argument("init_synthetic: class " + std::to_string(c) + " has " +
                                  std::to_string(idx.size()) + " samples, spc=" + std::to_string(spc));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    rows.insert(rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spc));
    labels.insert(labels.end(), spc, static_cast<std::uint32_t>(c));
  }
  SyntheticDataset syn;
  syn.samples = real.gather(rows).cast(dtype);
  syn.labels = std::move(labels);
  syn.class_count = real.class_count();
  syn.spc = spc;
  syn.alpha = alpha_init;
  return syn;
}

std::vector<NodeId> inner_update(Graph& graph, std::span<const NodeId> params, NodeId alpha,
                                 const LossBuilder& loss) {
  const NodeId l = loss(graph, params);
  const auto grads = graph.partials(l, params);
  std::vector<NodeId> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back(graph.sub(params[i], graph.scalar_mul(alpha, grads[i])));
  }
  return out;
}

std::vector<NodeId> inner_update(Graph& graph, const ModelSpec& spec, std::span<const NodeId> params,
                                 NodeId alpha, NodeId samples, std::span<const std::uint32_t> labels,
                                 std::span<const std::uint32_t> rows) {
  std::vector<std::uint32_t> batch_labels;
  NodeId batch = samples;
  if (rows.empty()) {
    batch_labels.assign(labels.begin(), labels.end());
  } else {
    batch = graph.gather_rows(samples, rows);
    for (std::uint32_t r : rows) batch_labels.push_back(labels[r]);
  }
  return inner_update(graph, params, alpha, [&](Graph& g, std::span<const NodeId> p) {
    return classification_loss(g, forward(g, spec, p, batch), batch_labels);
  });
}

double squared_distance(const NetworkParams& a, const NetworkParams& b) {
  if (a.layout != b.layout) throw ShapeError("squared_distance: parameter layouts differ");
  const auto x = a.flat.to_doubles();
  const auto y = b.flat.to_doubles();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s;
}

NodeId matching_loss(Graph& graph, std::span<const NodeId> student, const NetworkParams& start,
                     const NetworkParams& target, double denom_eps) {
  if (student.size() != target.layout.size()) {
    throw ShapeError("matching_loss: " + std::to_string(student.size()) +
                     " student nodes for a " + std::to_string(target.layout.size()) + "-entry layout");
  }
  const double denom = squared_distance(start, target);
  if (!(denom >= denom_eps)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "degenerate expert segment: ||start - target||^2 = %.3g < %.3g",
                  denom, denom_eps);
    throw DegenerateSegmentError(buf);
  }
  const auto layers = target.cast(graph.dtype()).layers();
  std::optional<NodeId> num;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const NodeId sq = graph.squared_norm(graph.sub(student[i], graph.constant(layers[i])));
    num = num ? graph.add(*num, sq) : sq;
  }
  return graph.scale(*num, 1.0 / denom);
}

DistillState::DistillState(SyntheticDataset s)
    : syn(std::move(s)), sample_velocity(Tensor::zeros(syn.samples.shape(), syn.samples.dtype())) {}

namespace {

// Rows used by inner step n; empty means the whole synthetic set.
std::vector<std::uint32_t> inner_rows(const SyntheticDataset& syn, const DistillConfig& cfg,
                                      std::size_t step, const std::vector<std::uint32_t>& order) {
  if (syn.size() <= cfg.full_batch_limit) return {};
  std::vector<std::uint32_t> rows(std::min(cfg.minibatch, syn.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = order[(step * rows.size() + i) % order.size()];
  return rows;
}

}  // namespace

MetaGradient meta_gradient(const SyntheticDataset& syn, const Trajectory& expert, std::size_t start_epoch,
                           const DistillConfig& cfg) {
  if (start_epoch + cfg.J > expert.epochs()) {
    throw std::invalid_argument("meta_gradient: start epoch " + std::to_string(start_epoch) +
                                " + J exceeds the trajectory");
  }
  const DType dtype = syn.samples.dtype();
  Graph g(dtype);
  const NodeId x = g.leaf(syn.samples);
  const NodeId alpha = g.leaf(Tensor::full({}, dtype, syn.alpha));
  const NetworkParams& start = expert.snapshots[start_epoch];
  std::vector<NodeId> theta = add_param_constants(g, start);

  std::vector<std::uint32_t> order;
  if (syn.size() > cfg.full_batch_limit) {
    order.resize(syn.size());
    std::iota(order.begin(), order.end(), 0u);
    std::mt19937_64 rng(derive_seed(cfg.seed, "inner-order", syn.iteration));
    std::shuffle(order.begin(), order.end(), rng);
  }
  for (std::size_t n = 0; n < cfg.K; ++n) {
    const auto rows = inner_rows(syn, cfg, n, order);
    theta = inner_update(g, expert.spec, theta, alpha, x, syn.labels, rows);
  }
  const NodeId loss = matching_loss(g, theta, start, expert.snapshots[start_epoch + cfg.J], cfg.denom_eps);
  const NodeId wrt[] = {x, alpha};
  const auto grads = g.partials(loss, wrt);

  MetaGradient out;
  out.loss = g.value(loss).item();
  out.samples = g.value(grads[0]);
  out.alpha = g.value(grads[1]).item();
  out.start_epoch = start_epoch;
  if (!std::isfinite(out.loss) || !std::isfinite(out.alpha) || !out.samples.all_finite()) {
    throw DistillError("non-finite matching loss or meta-gradient at iteration " +
                       std::to_string(syn.iteration + 1) + " (start epoch " +
                       std::to_string(start_epoch) + ", alpha " + std::to_string(syn.alpha) + ")");
  }
  return out;
}

StepRecord distill_step(DistillState& state, const Trajectory& expert, const DistillConfig& cfg,
                        std::mt19937_64& rng) {
  constexpr int kMaxDraws = 10;
  std::optional<std::size_t> t0;
  for (int attempt = 0; attempt < kMaxDraws && !t0; ++attempt) {
    const std::size_t draw = sample_start(expert, cfg.T_plus, cfg.J, rng).first;
    if (squared_distance(expert.snapshots[draw], expert.snapshots[draw + cfg.J]) >= cfg.denom_eps) t0 = draw;
  }
  if (!t0) {
    throw DistillError("iteration " + std::to_string(state.syn.iteration + 1) + ": " +
                       std::to_string(kMaxDraws) + " consecutive degenerate expert segments");
  }
  const MetaGradient mg = meta_gradient(state.syn, expert, *t0, cfg);

  SyntheticDataset& syn = state.syn;
  visit_dtype(syn.samples.dtype(), [&]<typename T>() {
    const auto x = syn.samples.view<T>();
    const auto v = state.sample_velocity.view<T>();
    const auto g = mg.samples.view<T>();
    std::vector<T> nx(x.size()), nv(x.size());
    const T mu = static_cast<T>(cfg.meta_momentum), lr = static_cast<T>(cfg.lr_samples);
    for (std::size_t i = 0; i < x.size(); ++i) {
      nv[i] = mu * v[i] + g[i];
      nx[i] = x[i] - lr * nv[i];
    }
    syn.samples = Tensor::adopt<T>(syn.samples.shape(), std::move(nx));
    state.sample_velocity = Tensor::adopt<T>(syn.samples.shape(), std::move(nv));
  });
  state.alpha_velocity = cfg.meta_momentum * state.alpha_velocity + mg.alpha;
  syn.alpha = std::max(kMinAlpha, syn.alpha - cfg.lr_alpha * state.alpha_velocity);
  ++syn.iteration;
  return StepRecord{syn.iteration, mg.loss, syn.alpha, *t0};
}

DistillResult distill(const LabeledDataset& real, std::span<const Trajectory> buffer,
                      const DistillConfig& cfg, std::size_t spc, const DistillHooks& hooks) {
  cfg.validate();
  if (buffer.empty()) throw std::invalid_argument("distill: expert buffer is empty");
  const ModelSpec& spec = buffer.front().spec;
  for (const auto& t : buffer) {
    if (!(t.spec == spec)) throw std::invalid_argument("distill: trajectories disagree on the model spec");
  }
  if (real.sample_shape() != spec.input_shape || real.class_count() != spec.class_count) {
    throw ShapeError("distill: dataset " + to_string(real.sample_shape()) +
                     " does not match model input " + to_string(spec.input_shape));
  }
  DistillState state(init_synthetic(real, spc, derive_seed(cfg.seed, "init"), cfg.alpha_init));
  std::mt19937_64 rng(derive_seed(cfg.seed, "meta"));
  DistillResult result;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, buffer.size() - 1)(rng);
    const StepRecord rec = distill_step(state, buffer[pick], cfg, rng);
    result.history.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(state.syn);
    }
  }
  result.syn = std::move(state.syn);
  return result;
}

LabeledDataset to_labeled(const SyntheticDataset& syn, const Manifest& source, const nlohmann::json& extra) {
  Manifest m = source;
  m.split = "distilled";
  m.extra = extra;
  m.extra["spc"] = syn.spc;
  m.extra["alpha"] = syn.alpha;
  m.extra["iterations"] = syn.iteration;
  return LabeledDataset(syn.samples, syn.labels, std::move(m));
}

SyntheticDataset from_labeled(const LabeledDataset& ds) {
  SyntheticDataset syn;
  syn.samples = ds.samples();
  syn.labels = ds.labels();
  syn.class_count = ds.class_count();
  const auto& extra = ds.manifest().extra;
  syn.alpha = extra.value("alpha", 0.0);
  syn.iteration = extra.value("iterations", std::size_t{0});
  syn.spc = extra.value("spc", ds.size() / std::max<std::size_t>(1, ds.class_count()));
  return syn;
}

std::string loss_csv(std::span<const StepRecord> history) {
  std::string out = "iteration,loss,alpha\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", r.iteration, r.loss, r.alpha);
    out += buf;
  }
  return out;
}

}  // namespace widistill
