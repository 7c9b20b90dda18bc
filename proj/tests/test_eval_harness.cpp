#include "doctest.h"

#include <cmath>
#include <random>

#include "widistill/buffer.hpp"
#include "widistill/coresets.hpp"
#include "widistill/eval.hpp"
#include "widistill/fixture.hpp"

using namespace widistill;

namespace {

const DataSplits& fixture() {
  static const DataSplits splits = make_fixture({}, 2024);
  return splits;
}

EvalConfig mlp_config(std::size_t repeats = 2) {
  EvalConfig cfg;
  cfg.spec = default_spec(ModelKind::mlp, {30, 64}, 6);
  cfg.seeds = eval_seeds(11, repeats);
  return cfg;
}

double train_loss(const NetworkParams& p, const LabeledDataset& ds, const ModelSpec& spec) {
  Graph g(p.flat.dtype());
  const auto nodes = add_param_constants(g, p);
  const NodeId logits = forward(g, spec, nodes, g.constant(ds.samples()));
  return g.value(classification_loss(g, logits, ds.labels())).item();
}

}  // namespace

TEST_CASE("one sample per class is memorized within 200 epochs") {
  const auto one = random_select(fixture().train, 1, 5);
  const auto small = coreset_dataset(fixture().train, one);
  const auto cfg = mlp_config();
  const auto p = train_student(small, cfg, 1, 200);
  CHECK(train_loss(p, small, cfg.spec) < 0.05);
  CHECK(evaluate(p, small, cfg.spec) == 1.0);
}

TEST_CASE("students are deterministic and synthetic input is used as stored") {
  const auto small = coreset_dataset(fixture().train, random_select(fixture().train, 2, 3));
  auto cfg = mlp_config();
  cfg.epochs = 20;
  const auto a = train_student(small, cfg, 9);
  CHECK(a.flat.bit_equal(train_student(small, cfg, 9).flat));
  CHECK_FALSE(a.flat.bit_equal(train_student(small, cfg, 10).flat));

  SyntheticDataset syn{small.samples(), small.labels(), 6, 2, 0.5, 0};
  CHECK(train_student(syn, cfg, 9).flat.bit_equal(a.flat));
}

TEST_CASE("zero parameters on a balanced test set score 1/C") {
  const auto cfg = mlp_config();
  const auto zero = init_params(cfg.spec, 0, InitMode::zeros);
  CHECK(evaluate(zero, fixture().test, cfg.spec) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("evaluation is independent of chunking and leaves inputs untouched") {
  const auto cfg = mlp_config();
  const auto p = init_params(cfg.spec, 4);
  const auto before = p.flat.to_doubles();
  const auto test_before = fixture().test.samples().to_doubles();
  const double whole = evaluate(p, fixture().test, cfg.spec, 1000);
  for (std::size_t chunk : {1, 7, 64, 299}) CHECK(evaluate(p, fixture().test, cfg.spec, chunk) == whole);
  CHECK(p.flat.to_doubles() == before);
  CHECK(fixture().test.samples().to_doubles() == test_before);
}

TEST_CASE("shape mismatch is rejected") {
  auto cfg = mlp_config();
  cfg.spec = default_spec(ModelKind::mlp, {64, 30}, 6);
  CHECK_THROWS_AS(evaluate(init_params(cfg.spec, 1), fixture().test, cfg.spec), std::invalid_argument);
  CHECK_THROWS_AS(train_student(fixture().test, cfg, 1), std::invalid_argument);
}

TEST_CASE("property: report mean and std recompute from per-seed values") {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 8;
    std::vector<double> acc(n);
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t i = 0; i < n; ++i) {
      acc[i] = u(rng);
      seeds[i] = rng();
    }
    const auto r = make_report("random", 10, ModelKind::mlp, seeds, acc);
    double mean = 0.0;
    for (double a : acc) mean += a;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    CHECK(std::abs(r.mean - mean) < 1e-12);
    CHECK(std::abs(r.std - sd) < 1e-12);
  }
  CHECK_THROWS(make_report("x", 1, ModelKind::mlp, {1, 2}, {0.5}));
}

TEST_CASE("repeats give the same results with any job count") {
  const auto small = coreset_dataset(fixture().train, random_select(fixture().train, 2, 8));
  auto cfg = mlp_config(3);
  cfg.epochs = 10;
  const auto serial = evaluate_set(small, "random", 2, cfg, fixture().test, 1);
  const auto parallel = evaluate_set(small, "random", 2, cfg, fixture().test, 3);
  CHECK(serial.accuracies == parallel.accuracies);
  CHECK(serial.seeds == cfg.seeds);
}

TEST_CASE("cross matrix shape and diagonal consistency") {
  auto cfg = mlp_config(2);
  cfg.epochs = 10;
  const auto a = coreset_dataset(fixture().train, random_select(fixture().train, 2, 1));
  const auto b = coreset_dataset(fixture().train, herding_select(fixture().train, 2, 1));
  const std::vector<ModelSpec> evals{cfg.spec, ModelSpec{ModelKind::mlp, {30, 64}, 6, {32}}};
  const auto m = cross_matrix({{"a", a}, {"b", b}}, evals, cfg, fixture().test, 2);
  REQUIRE(m.size() == 2);
  for (const auto& row : m) CHECK(row.size() == 2);
  const auto plain = evaluate_set(a, "a", 2, cfg, fixture().test);
  CHECK(m[0][0].accuracies == plain.accuracies);
  CHECK(m[0][0].spc == 2);
}

TEST_CASE("whole train split reproduces the teacher's final accuracy") {
  TeacherConfig tc;
  tc.spec = default_spec(ModelKind::mlp, {30, 64}, 6);
  tc.seed = 77;
  const auto teacher = train_teacher(fixture().train, tc);
  auto cfg = mlp_config(1);
  cfg.seeds = {77};
  cfg.lr = tc.lr;
  cfg.momentum = tc.momentum;
  cfg.batch_size = tc.batch_size;
  const auto p = train_student(fixture().train, cfg, 77, tc.epochs);
  CHECK(std::abs(evaluate(p, fixture().train, cfg.spec) - teacher.metrics.back().accuracy) <= 0.02);
}

TEST_CASE("report csv round trip and table layout") {
  const std::vector<EvalReport> reports{
      make_report("distilled", 10, ModelKind::mlp, {1, 2}, {0.5, 0.25}),
      make_report("random", 10, ModelKind::mlp, {1, 2}, {0.375, 0.125}),
      make_report("whole", 0, ModelKind::mlp, {1, 2}, {0.875, 0.75}),
      make_report("random", 10, ModelKind::cnn, {1}, {0.5}),
  };
  const auto csv = reports_csv(reports);
  CHECK(csv.starts_with("method,spc,model,seed,accuracy\n"));
  CHECK(csv.find("distilled,10,mlp,2,0.25\n") != std::string::npos);
  const auto back = parse_reports_csv(csv);
  REQUIRE(back.size() == reports.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].accuracies == reports[i].accuracies);
    CHECK(back[i].mean == reports[i].mean);
  }
  CHECK(reports_csv(back) == csv);
  CHECK_THROWS(parse_reports_csv("nope\n"));
  CHECK_THROWS(parse_reports_csv("method,spc,model,seed,accuracy\na,1,mlp\n"));

  const auto table = render_table(reports);
  CHECK(table.find("model: mlp") != std::string::npos);
  CHECK(table.find("model: cnn") != std::string::npos);
  CHECK(table.find("0.3750 ± 0.1768") != std::string::npos);
  CHECK(table.find("0.8125 ± 0.0884") != std::string::npos);
}

TEST_CASE("config validation and json") {
  auto cfg = mlp_config(3);
  CHECK(nlohmann::json(cfg).get<EvalConfig>() == cfg);
  cfg.seeds.clear();
  CHECK_THROWS(cfg.validate());
}
