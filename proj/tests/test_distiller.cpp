#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "widistill/distill.hpp"
#include "widistill/fixture.hpp"
#include "widistill/rng.hpp"

using namespace widistill;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from_doubles({n}, v, DType::f64);
}

NetworkParams flat_params(std::vector<double> v) {
  const std::size_t n = v.size();
  return NetworkParams{vec(std::move(v)), {{"w", {n}, 0}}};
}

// Small float64 problem: C=3, spc=2, features 4, hidden 8 (67 parameters).
struct TinyProblem {
  ModelSpec spec{ModelKind::mlp, {4}, 3, {8}};
  LabeledDataset real;
  Trajectory expert;

  static TinyProblem make(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.4);
    std::vector<double> x;
    std::vector<std::uint32_t> y;
    for (int i = 0; i < 30; ++i) {
      const auto c = static_cast<std::uint32_t>(i % 3);
      for (int d = 0; d < 4; ++d) x.push_back((d == static_cast<int>(c) ? 1.5 : 0.0) + noise(rng));
      y.push_back(c);
    }
    Manifest m;
    m.class_count = 3;
    m.sample_shape = {4};
    LabeledDataset real(Tensor::from_doubles({30, 4}, x, DType::f64), y, m);
    TeacherConfig tc;
    tc.spec = ModelSpec{ModelKind::mlp, {4}, 3, {8}};
    tc.epochs = 6;
    tc.batch_size = 10;
    tc.lr = 0.05;
    tc.seed = seed;
    return TinyProblem{tc.spec, real, train_teacher(real, tc)};
  }
};

// Matching loss of a synthetic set, rebuilt from scratch (no meta-gradient).
double unrolled_loss(const SyntheticDataset& syn, const Trajectory& expert, std::size_t t0,
                     const DistillConfig& cfg) {
  Graph g(DType::f64);
  const NodeId x = g.constant(syn.samples);
  const NodeId alpha = g.constant(Tensor::full({}, DType::f64, syn.alpha));
  auto theta = add_param_constants(g, expert.snapshots[t0]);
  for (std::size_t k = 0; k < cfg.K; ++k) theta = inner_update(g, expert.spec, theta, alpha, x, syn.labels);
  return g.value(matching_loss(g, theta, expert.snapshots[t0], expert.snapshots[t0 + cfg.J], cfg.denom_eps)).item();
}

}  // namespace

TEST_CASE("init_synthetic copies distinct real samples per class") {
  FixtureConfig fc;
  fc.samples_per_class = 20;
  const auto real = make_fixture(fc, 3).train;
  const auto syn = init_synthetic(real, 10, 42, 0.01);
  CHECK(syn.size() == 60);
  CHECK(syn.alpha == 0.01);
  const auto x = real.samples().to_doubles();
  const auto s = syn.samples.to_doubles();
  const std::size_t d = real.feature_count();
  std::set<std::size_t> used;
  for (std::size_t i = 0; i < syn.size(); ++i) {
    bool found = false;
    for (std::size_t r = 0; r < real.size() && !found; ++r) {
      if (real.labels()[r] != syn.labels[i] || used.count(r)) continue;
      if (std::equal(s.begin() + static_cast<std::ptrdiff_t>(i * d), s.begin() + static_cast<std::ptrdiff_t>((i + 1) * d),
                     x.begin() + static_cast<std::ptrdiff_t>(r * d))) {
        found = true;
        used.insert(r);
      }
    }
    CHECK(found);
  }
  CHECK(init_synthetic(real, 10, 42, 0.01).samples.bit_equal(syn.samples));
  CHECK_THROWS_WITH(init_synthetic(real, 14, 1, 0.01), doctest::Contains("class 0"));
}

TEST_CASE("inner update with alpha 0 is the identity") {
  const auto p = TinyProblem::make(1);
  const auto syn = init_synthetic(p.real, 2, 1, 0.0, DType::f64);
  Graph g(DType::f64);
  const auto theta = add_param_constants(g, p.expert.snapshots[2]);
  const NodeId alpha = g.constant(Tensor::scalar(0.0, DType::f64));
  const auto next = inner_update(g, p.spec, theta, alpha, g.constant(syn.samples), syn.labels);
  for (std::size_t i = 0; i < theta.size(); ++i) CHECK(g.value(next[i]).bit_equal(g.value(theta[i])));
}

TEST_CASE("inner update on theta^2/2") {
  Graph g(DType::f64);
  const NodeId theta = g.leaf(vec({1.0}));
  const NodeId alpha = g.constant(Tensor::scalar(0.1, DType::f64));
  const NodeId p[] = {theta};
  const auto next = inner_update(g, p, alpha, [](Graph& gr, std::span<const NodeId> q) {
    return gr.scale(gr.sum(gr.mul(q[0], q[0])), 0.5);
  });
  CHECK(g.value(next[0]).item() == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("repeated inner updates descend a convex quadratic") {
  // l(theta) = 1/2 theta^T A theta with A = diag(a); alpha < 2 / max(a).
  const std::vector<double> a{0.5, 1.0, 3.0, 7.0};
  Graph g(DType::f64);
  const NodeId diag = g.constant(vec(a));
  auto loss = [&](Graph& gr, std::span<const NodeId> q) {
    return gr.scale(gr.sum(gr.mul(diag, gr.mul(q[0], q[0]))), 0.5);
  };
  std::vector<NodeId> theta{g.leaf(vec({1.0, -2.0, 0.5, 0.3}))};
  const NodeId alpha = g.constant(Tensor::scalar(0.2, DType::f64));
  double prev = g.value(loss(g, theta)).item();
  for (int k = 0; k < 12; ++k) {
    theta = inner_update(g, theta, alpha, loss);
    const double cur = g.value(loss(g, theta)).item();
    // Closed form: each coordinate scales by (1 - alpha a_i).
    double expected = 0.0;
    const std::vector<double> t0{1.0, -2.0, 0.5, 0.3};
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double ti = t0[i] * std::pow(1.0 - 0.2 * a[i], k + 1);
      expected += 0.5 * a[i] * ti * ti;
    }
    CHECK(cur == doctest::Approx(expected).epsilon(1e-12));
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("matching loss fixtures") {
  Graph g(DType::f64);
  const auto start = flat_params({2, 0});
  const auto target = flat_params({0, 0});
  auto loss_at = [&](std::vector<double> s) {
    const NodeId n[] = {g.constant(vec(std::move(s)))};
    return g.value(matching_loss(g, n, start, target, 1e-12)).item();
  };
  CHECK(std::abs(loss_at({0, 0}) - 0.0) <= 1e-12);
  CHECK(std::abs(loss_at({2, 0}) - 1.0) <= 1e-12);
  CHECK(std::abs(loss_at({1, 0}) - 0.25) <= 1e-12);

  const NodeId n[] = {g.constant(vec({1, 0}))};
  CHECK_THROWS_AS(matching_loss(g, n, flat_params({1e-7, 0}), target, 1e-12), DegenerateSegmentError);
  CHECK_THROWS_WITH(matching_loss(g, n, target, target, 1e-12), doctest::Contains("degenerate expert segment"));
}

TEST_CASE("property: matching loss is translation invariant, nonnegative, zero only at the target") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> dist;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    std::vector<double> s(n), a(n), b(n), c(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = dist(rng);
      a[i] = dist(rng);
      b[i] = dist(rng);
      c[i] = dist(rng);
    }
    Graph g(DType::f64);
    auto loss = [&](const std::vector<double>& st, const std::vector<double>& sa, const std::vector<double>& sb) {
      const NodeId node[] = {g.constant(vec(st))};
      return g.value(matching_loss(g, node, flat_params(sa), flat_params(sb), 1e-12)).item();
    };
    auto shift = [&](std::vector<double> v) {
      for (std::size_t i = 0; i < n; ++i) v[i] += c[i];
      return v;
    };
    const double l = loss(s, a, b);
    CHECK(l >= 0.0);
    CHECK(loss(shift(s), shift(a), shift(b)) == doctest::Approx(l).epsilon(1e-9));
    CHECK(loss(b, a, b) == 0.0);
    if (s != b) CHECK(l > 0.0);
  }
}

TEST_CASE("meta-gradient matches finite differences for K = 1, 2, 3") {
  const auto p = TinyProblem::make(5);
  REQUIRE(p.expert.snapshots[0].size() <= 200);
  for (std::size_t K : {1u, 2u, 3u}) {
    DistillConfig cfg;
    cfg.K = K;
    cfg.J = 2;
    const auto syn = init_synthetic(p.real, 2, 9, 0.05, DType::f64);
    const std::size_t t0 = 1;
    const auto mg = meta_gradient(syn, p.expert, t0, cfg);
    CHECK(mg.loss == doctest::Approx(unrolled_loss(syn, p.expert, t0, cfg)).epsilon(1e-12));

    const double h = 1e-5;
    const auto analytic = mg.samples.to_doubles();
    auto x = syn.samples.to_doubles();
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      SyntheticDataset plus = syn, minus = syn;
      auto xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      plus.samples = Tensor::from_doubles(syn.samples.shape(), xp, DType::f64);
      minus.samples = Tensor::from_doubles(syn.samples.shape(), xm, DType::f64);
      const double numeric = (unrolled_loss(plus, p.expert, t0, cfg) - unrolled_loss(minus, p.expert, t0, cfg)) / (2 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
    CHECK(worst < 1e-4);

    SyntheticDataset plus = syn, minus = syn;
    plus.alpha += h;
    minus.alpha -= h;
    const double numeric = (unrolled_loss(plus, p.expert, t0, cfg) - unrolled_loss(minus, p.expert, t0, cfg)) / (2 * h);
    CHECK(std::abs(mg.alpha - numeric) / std::max(1.0, std::abs(numeric)) < 1e-4);
  }
}

TEST_CASE("distill_step applies plain SGD when momentum is zero and is deterministic") {
  const auto p = TinyProblem::make(6);
  DistillConfig cfg;
  cfg.K = 2;
  cfg.J = 1;
  cfg.T_plus = 3;
  cfg.meta_momentum = 0.0;
  cfg.lr_alpha = 1e-3;
  cfg.lr_samples = 0.5;
  const auto syn = init_synthetic(p.real, 2, 2, 0.05, DType::f64);

  DistillState a(syn);
  std::mt19937_64 rng_a(11);
  const StepRecord rec = distill_step(a, p.expert, cfg, rng_a);
  const auto mg = meta_gradient(syn, p.expert, rec.start_epoch, cfg);
  CHECK(a.syn.alpha == std::max(kMinAlpha, syn.alpha - cfg.lr_alpha * mg.alpha));
  const auto x0 = syn.samples.to_doubles(), x1 = a.syn.samples.to_doubles(), g = mg.samples.to_doubles();
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(x1[i] == x0[i] - cfg.lr_samples * g[i]);
  CHECK(a.syn.labels == syn.labels);
  CHECK(a.syn.iteration == 1);

  DistillState b(syn);
  std::mt19937_64 rng_b(11);
  distill_step(b, p.expert, cfg, rng_b);
  CHECK(b.syn.samples.bit_equal(a.syn.samples));
  CHECK(b.syn.alpha == a.syn.alpha);
}

TEST_CASE("alpha is clamped at the floor") {
  const auto p = TinyProblem::make(6);
  DistillConfig cfg;
  cfg.K = 1;
  cfg.J = 1;
  cfg.T_plus = 1;
  cfg.lr_alpha = 1e6;
  cfg.lr_samples = 0.0;
  const auto syn = init_synthetic(p.real, 2, 2, 0.05, DType::f64);
  // Going straight at the target shrinks alpha only if the step overshoots; push
  // alpha in whichever direction the gradient says and check the floor holds.
  for (int i = 0; i < 5; ++i) {
    DistillState s(syn);
    s.syn.alpha = 50.0 + i;  // grossly overshooting step size
    std::mt19937_64 rng(i);
    try {
      distill_step(s, p.expert, cfg, rng);
      CHECK(s.syn.alpha >= kMinAlpha);
    } catch (const DistillError&) {
      // Non-finite unroll at this step size is reported, not clamped.
    }
  }
}

TEST_CASE("degenerate segments are resampled, then reported") {
  auto p = TinyProblem::make(7);
  // Freeze the trajectory so every segment is degenerate.
  for (auto& s : p.expert.snapshots) s = p.expert.snapshots[0];
  DistillConfig cfg;
  cfg.K = 1;
  cfg.J = 1;
  cfg.T_plus = 3;
  DistillState state(init_synthetic(p.real, 2, 2, 0.05, DType::f64));
  std::mt19937_64 rng(1);
  CHECK_THROWS_WITH_AS(distill_step(state, p.expert, cfg, rng), doctest::Contains("degenerate"), DistillError);
}

TEST_CASE("distill loop: zero iterations, checkpoints, labels fixed, determinism") {
  const auto p = TinyProblem::make(8);
  const Trajectory buffer[] = {p.expert, TinyProblem::make(9).expert};
  DistillConfig cfg;
  cfg.K = 2;
  cfg.J = 2;
  cfg.T_plus = 4;
  cfg.iterations = 0;
  cfg.seed = 3;

  const auto none = distill(p.real, buffer, cfg, 2);
  const auto init = init_synthetic(p.real, 2, derive_seed(cfg.seed, "init"), cfg.alpha_init);
  CHECK(none.syn.samples.bit_equal(init.samples));
  CHECK(none.syn.alpha == cfg.alpha_init);
  CHECK(none.history.empty());

  cfg.iterations = 9;
  cfg.checkpoint_every = 3;
  std::vector<std::size_t> checkpoints;
  DistillHooks hooks;
  hooks.on_checkpoint = [&](const SyntheticDataset& s) { checkpoints.push_back(s.iteration); };
  const auto run = distill(p.real, buffer, cfg, 2, hooks);
  CHECK(checkpoints == std::vector<std::size_t>{3, 6, 9});
  CHECK(run.history.size() == 9);
  CHECK(run.syn.labels == init.labels);
  CHECK(run.syn.size() == 6);
  for (const auto& r : run.history) CHECK(r.alpha >= kMinAlpha);

  const auto again = distill(p.real, buffer, cfg, 2);
  CHECK(again.syn.samples.bit_equal(run.syn.samples));
  CHECK(again.syn.alpha == run.syn.alpha);
  CHECK(loss_csv(again.history) == loss_csv(run.history));
}

TEST_CASE("large synthetic sets use seed-ordered minibatches") {
  const auto p = TinyProblem::make(10);
  DistillConfig cfg;
  cfg.K = 2;
  cfg.J = 1;
  cfg.full_batch_limit = 4;
  cfg.minibatch = 3;
  const auto syn = init_synthetic(p.real, 2, 1, 0.05, DType::f64);
  const auto a = meta_gradient(syn, p.expert, 0, cfg);
  const auto b = meta_gradient(syn, p.expert, 0, cfg);
  CHECK(a.samples.bit_equal(b.samples));
  cfg.full_batch_limit = 512;
  const auto full = meta_gradient(syn, p.expert, 0, cfg);
  CHECK(full.loss != a.loss);
}

TEST_CASE("pack conversion keeps metadata") {
  const auto p = TinyProblem::make(11);
  auto syn = init_synthetic(p.real, 2, 1, 0.02, DType::f64);
  syn.iteration = 7;
  const auto ds = to_labeled(syn, p.real.manifest(), {{"buffer_digest", "abc"}});
  CHECK(ds.manifest().extra["spc"] == 2);
  CHECK(ds.manifest().extra["iterations"] == 7);
  CHECK(ds.manifest().extra["buffer_digest"] == "abc");
  const auto back = from_labeled(ds);
  CHECK(back.alpha == 0.02);
  CHECK(back.spc == 2);
  CHECK(back.samples.bit_equal(syn.samples));
  CHECK(loss_csv(std::vector<StepRecord>{{1, 0.5, 0.01, 0}}) == "iteration,loss,alpha\n1,0.5,0.01\n");
}
