#include "widistill/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "widistill/rng.hpp"
#include "widistill/training.hpp"

namespace widistill {

void EvalConfig::validate() const {
  spec.validate();
  if (seeds.empty()) throw std::invalid_argument("eval: need at least one repeat seed");
  if (epochs == 0 || whole_data_epochs == 0) throw std::invalid_argument("eval: epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("eval: batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("eval: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("eval: momentum must be in [0, 1)");
}

void to_json(nlohmann::json& j, const EvalConfig& cfg) {
  j = nlohmann::json{{"spec", cfg.spec},           {"epochs", cfg.epochs},
                     {"lr", cfg.lr},               {"momentum", cfg.momentum},
                     {"batch_size", cfg.batch_size}, {"whole_data_epochs", cfg.whole_data_epochs},
                     {"seeds", cfg.seeds}};
}

void from_json(const nlohmann::json& j, EvalConfig& cfg) {
  const EvalConfig d;
  cfg.spec = j.at("spec").get<ModelSpec>();
  cfg.epochs = j.value("epochs", d.epochs);
  cfg.lr = j.value("lr", d.lr);
  cfg.momentum = j.value("momentum", d.momentum);
  cfg.batch_size = j.value("batch_size", d.batch_size);
  cfg.whole_data_epochs = j.value("whole_data_epochs", d.whole_data_epochs);
  cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
}

std::vector<std::uint64_t> eval_seeds(std::uint64_t root, std::size_t repeats) {
  std::vector<std::uint64_t> out;
  for (std::size_t r = 0; r < repeats; ++r) out.push_back(derive_seed(root, "eval", r));
  return out;
}

EvalReport make_report(std::string method, std::size_t spc, ModelKind model, std::vector<std::uint64_t> seeds,
                       std::vector<double> accuracies) {
  if (accuracies.empty() || accuracies.size() != seeds.size()) {
    throw std::invalid_argument("make_report: need one accuracy per seed");
  }
  EvalReport r{std::move(method), spc, model, std::move(seeds), std::move(accuracies), 0.0, 0.0};
  const double n = static_cast<double>(r.accuracies.size());
  for (double a : r.accuracies) r.mean += a;
  r.mean /= n;
  if (r.accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
    r.std = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

namespace {

NetworkParams train_on(const Tensor& samples, std::span<const std::uint32_t> labels, const EvalConfig& cfg,
                       std::uint64_t seed, std::size_t epochs) {
  Shape sample_shape(samples.shape().begin() + 1, samples.shape().end());
  if (sample_shape != cfg.spec.input_shape) {
    throw std::invalid_argument("train_student: samples have shape " + to_string(sample_shape) +
                                " but the model expects " + to_string(cfg.spec.input_shape));
  }
  SgdOptions opts;
  opts.epochs = epochs;
  opts.batch_size = cfg.batch_size;
  opts.lr = cfg.lr;
  opts.momentum = cfg.momentum;
  opts.shuffle_seed = derive_seed(seed, "shuffle-root");
  return train_sgd(cfg.spec, init_params(cfg.spec, derive_seed(seed, "init")), samples, labels, opts);
}

}  // namespace

NetworkParams train_student(const LabeledDataset& small, const EvalConfig& cfg, std::uint64_t seed,
                            std::size_t epochs) {
  if (small.class_count() != cfg.spec.class_count) {
    throw std::invalid_argument("train_student: dataset has " + std::to_string(small.class_count()) +
                                " classes, model has " + std::to_string(cfg.spec.class_count));
  }
  return train_on(small.samples(), small.labels(), cfg, seed, epochs);
}

NetworkParams train_student(const LabeledDataset& small, const EvalConfig& cfg, std::uint64_t seed) {
  return train_student(small, cfg, seed, cfg.epochs);
}

NetworkParams train_student(const SyntheticDataset& small, const EvalConfig& cfg, std::uint64_t seed) {
  if (small.class_count != cfg.spec.class_count) {
    throw std::invalid_argument("train_student: synthetic set has " + std::to_string(small.class_count) +
                                " classes, model has " + std::to_string(cfg.spec.class_count));
  }
  return train_on(small.samples, small.labels, cfg, seed, cfg.epochs);
}

double evaluate(const NetworkParams& params, const LabeledDataset& test, const ModelSpec& spec, std::size_t chunk) {
  if (test.sample_shape() != spec.input_shape) {
    throw std::invalid_argument("evaluate: test samples have shape " + to_string(test.sample_shape()) +
                                " but the model expects " + to_string(spec.input_shape));
  }
  return accuracy(predict(spec, params, test.samples(), chunk), test.labels());
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

EvalReport evaluate_set(const LabeledDataset& small, std::string method, std::size_t spc, const EvalConfig& cfg,
                        const LabeledDataset& test, std::size_t jobs) {
  cfg.validate();
  std::vector<double> acc(cfg.repeats());
  parallel_for(cfg.repeats(), jobs, [&](std::size_t r) {
    acc[r] = evaluate(train_student(small, cfg, cfg.seeds[r]), test, cfg.spec);
  });
  return make_report(std::move(method), spc, cfg.spec.kind, cfg.seeds, std::move(acc));
}

CrossMatrix cross_matrix(const std::vector<std::pair<std::string, LabeledDataset>>& producers,
                         const std::vector<ModelSpec>& evaluators, const EvalConfig& cfg,
                         const LabeledDataset& test, std::size_t jobs) {
  cfg.validate();
  for (const auto& [name, ds] : producers) {
    if (ds.sample_shape() != test.sample_shape()) {
      throw std::invalid_argument("cross_matrix: set '" + name + "' has sample shape " +
                                  to_string(ds.sample_shape()) + ", test has " + to_string(test.sample_shape()));
    }
  }
  const std::size_t rows = producers.size(), cols = evaluators.size(), reps = cfg.repeats();
  std::vector<double> acc(rows * cols * reps);
  parallel_for(acc.size(), jobs, [&](std::size_t job) {
    const std::size_t p = job / (cols * reps), e = (job / reps) % cols, r = job % reps;
    EvalConfig c = cfg;
    c.spec = evaluators[e];
    const auto& ds = producers[p].second;
    acc[job] = evaluate(train_student(ds, c, cfg.seeds[r]), test, c.spec);
  });
  CrossMatrix out(rows);
  for (std::size_t p = 0; p < rows; ++p) {
    const auto& ds = producers[p].second;
    const std::size_t spc = ds.size() / std::max<std::size_t>(1, ds.class_count());
    for (std::size_t e = 0; e < cols; ++e) {
      const auto first = acc.begin() + static_cast<std::ptrdiff_t>((p * cols + e) * reps);
      out[p].push_back(make_report(producers[p].first, spc, evaluators[e].kind, cfg.seeds,
                                   std::vector<double>(first, first + static_cast<std::ptrdiff_t>(reps))));
    }
  }
  return out;
}

std::string reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = "method,spc,model,seed,accuracy\n";
  char buf[64];
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.10g", r.accuracies[i]);
      out += r.method + "," + std::to_string(r.spc) + "," + to_string(r.model) + "," +
             std::to_string(r.seeds[i]) + "," + buf + "\n";
    }
  }
  return out;
}

std::vector<EvalReport> parse_reports_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,spc,model,seed,accuracy") {
    throw std::invalid_argument("report csv: missing header");
  }
  struct Group {
    std::string method;
    std::size_t spc;
    ModelKind model;
    std::vector<std::uint64_t> seeds;
    std::vector<double> acc;
  };
  std::vector<Group> groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string s; std::getline(fields, s, ',');) f.push_back(s);
    if (f.size() != 5) throw std::invalid_argument("report csv: line " + std::to_string(line_no) + " needs 5 fields");
    try {
      const std::size_t spc = std::stoul(f[1]);
      const ModelKind model = parse_model_kind(f[2]);
      auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
        return g.method == f[0] && g.spc == spc && g.model == model;
      });
      if (it == groups.end()) it = groups.insert(groups.end(), Group{f[0], spc, model, {}, {}});
      it->seeds.push_back(std::stoull(f[3]));
      it->acc.push_back(std::stod(f[4]));
    } catch (const std::logic_error& e) {
      throw std::invalid_argument("report csv: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::vector<EvalReport> out;
  for (auto& g : groups) out.push_back(make_report(g.method, g.spc, g.model, g.seeds, g.acc));
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string render_table(const std::vector<EvalReport>& reports) {
  std::vector<ModelKind> models;
  for (const auto& r : reports) {
    if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
  }
  std::string out;
  char cell[64];
  for (auto model : models) {
    std::vector<std::string> methods;
    std::set<std::size_t> spcs;
    std::map<std::pair<std::string, std::size_t>, const EvalReport*> at;
    for (const auto& r : reports) {
      if (r.model != model) continue;
      if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
      if (r.spc != 0) spcs.insert(r.spc);
      at[{r.method, r.spc}] = &r;
    }
    if (spcs.empty()) spcs.insert(0);
    std::vector<std::vector<std::string>> grid{{"spc"}};
    for (const auto& m : methods) grid[0].push_back(m);
    for (auto spc : spcs) {
      std::vector<std::string> row{spc == 0 ? "-" : std::to_string(spc)};
      for (const auto& m : methods) {
        // Whole-data results (spc 0) fill their column on every row.
        auto it = at.find({m, spc});
        if (it == at.end()) it = at.find({m, 0});
        if (it == at.end()) {
          row.emplace_back("-");
        } else {
          std::snprintf(cell, sizeof cell, "%.4f ± %.4f", it->second->mean, it->second->std);
          row.emplace_back(cell);
        }
      }
      grid.push_back(row);
    }
    std::vector<std::size_t> width(grid[0].size(), 0);
    auto display = [](const std::string& s) {
      // "±" is two bytes but one column.
      std::size_t n = 0;
      for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
      return n;
    };
    for (const auto& row : grid) {
      for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display(row[c]));
    }
    out += std::string("model: ") + to_string(model) + "\n";
    for (const auto& row : grid) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        out += row[c] + std::string(width[c] - display(row[c]) + (c + 1 < row.size() ? 2 : 0), ' ');
      }
      while (!out.empty() && out.back() == ' ') out.pop_back();
      out += "\n";
    }
    out += "\n";
  }
  return out;
}

}  // namespace widistill
