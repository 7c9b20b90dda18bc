#include "commands.hpp"

#include <chrono>
#include <mutex>
#include <sstream>

#include "CLI11.hpp"
#include "run_config.hpp"
#include "widistill/buffer.hpp"
#include "widistill/csi.hpp"
#include "widistill/distill.hpp"
#include "widistill/eval.hpp"
#include "widistill/fixture.hpp"
#include "widistill/rng.hpp"

namespace fs = std::filesystem;

namespace widistill::cli {

fs::path train_pack_path(const fs::path& root) { return root / "data" / "train.pack"; }
fs::path test_pack_path(const fs::path& root) { return root / "data" / "test.pack"; }
fs::path buffer_dir(const fs::path& root, ModelKind arch) { return root / "buffer" / to_string(arch); }
fs::path expert_path(const fs::path& buffer, std::size_t index) {
  return buffer / ("expert_" + std::to_string(index) + ".traj");
}
fs::path distilled_pack_path(const fs::path& root, ModelKind arch, std::size_t spc) {
  return root / "distill" / to_string(arch) / ("spc" + std::to_string(spc) + ".pack");
}
fs::path coreset_pack_path(const fs::path& root, CoresetMethod m, std::size_t spc) {
  return root / "coreset" / to_string(m) / ("spc" + std::to_string(spc) + ".pack");
}
fs::path reports_dir(const fs::path& root) { return root / "reports"; }

namespace {

struct Context {
  RunConfig cfg;
  std::size_t jobs = 1;
  std::ostream& out;
  std::ostream& err;

  const fs::path& root() const { return cfg.output; }
  void summary(const nlohmann::json& j) const { out << j.dump() << '\n' << std::flush; }
};

LabeledDataset load_required(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw std::runtime_error(std::string(what) + " not found: " + path.string());
  return load_pack(path);
}

void gen_data(const Context& ctx) {
  const auto& d = ctx.cfg.data;
  const LabeledDataset all =
      d.pack.empty() ? synth_csi(MultipathConfig::desk_default(), d.samples_per_class,
                                 derive_seed(ctx.cfg.seed, "generate"))
                     : load_pack(d.pack);
  const DataSplits splits = prepare_splits(all, d.train_fraction, d.preprocess, ctx.cfg.seed);
  fs::create_directories(train_pack_path(ctx.root()).parent_path());
  save_pack(splits.train, train_pack_path(ctx.root()));
  save_pack(splits.test, test_pack_path(ctx.root()));
  ctx.summary({{"command", "gen-data"},
               {"train", train_pack_path(ctx.root()).string()},
               {"test", test_pack_path(ctx.root()).string()},
               {"train_samples", splits.train.size()},
               {"test_samples", splits.test.size()},
               {"classes", splits.train.class_count()}});
}

void buffer(const Context& ctx) {
  const auto train = load_required(train_pack_path(ctx.root()), "train pack");
  const auto& t = ctx.cfg.teacher;
  const fs::path dir = buffer_dir(ctx.root(), t.arch);
  fs::create_directories(dir);
  std::vector<double> final_acc(t.count);
  std::mutex log;
  parallel_for(t.count, ctx.jobs, [&](std::size_t i) {
    TeacherConfig tc;
    tc.spec = default_spec(t.arch, train.sample_shape(), train.class_count());
    tc.epochs = t.epochs;
    tc.batch_size = t.batch_size;
    tc.lr = t.lr;
    tc.momentum = t.momentum;
    tc.seed = derive_seed(ctx.cfg.seed, "teacher", i);
    const Trajectory traj = train_teacher(train, tc);
    save_trajectory(traj, expert_path(dir, i));
    final_acc[i] = traj.metrics.back().accuracy;
    std::lock_guard lock(log);
    ctx.err << "teacher " << i << ": train accuracy " << final_acc[i] << '\n';
  });
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < t.count; ++i) paths.push_back(expert_path(dir, i).string());
  ctx.summary({{"command", "buffer"},
               {"arch", to_string(t.arch)},
               {"trajectories", paths},
               {"final_accuracy", final_acc}});
}

void distill_cmd(const Context& ctx) {
  const auto& ds = ctx.cfg.distill;
  const fs::path dir = ds.buffer.empty() ? buffer_dir(ctx.root(), ds.arch) : ds.buffer;
  if (!fs::is_directory(dir)) throw std::runtime_error("expert buffer not found: " + dir.string());
  std::vector<Trajectory> experts;
  nlohmann::json digests = nlohmann::json::array();
  for (std::size_t i = 0; i < ctx.cfg.teacher.count; ++i) {
    const fs::path p = expert_path(dir, i);
    if (!fs::exists(p)) throw std::runtime_error("expert trajectory not found: " + p.string());
    experts.push_back(load_trajectory(p));
    if (experts.back().spec.kind != ds.arch) {
      throw std::runtime_error("expert trajectory " + p.string() + " is a " + to_string(experts.back().spec.kind) +
                               ", distill.arch is " + to_string(ds.arch));
    }
    digests.push_back(file_digest(p));
  }
  const auto train = load_required(train_pack_path(ctx.root()), "train pack");

  for (auto spc : ds.spc) {
    DistillConfig dc = ds.config;
    dc.seed = derive_seed(ctx.cfg.seed, "distill", spc);
    const fs::path pack = distilled_pack_path(ctx.root(), ds.arch, spc);
    fs::create_directories(pack.parent_path());
    const nlohmann::json extra{{"buffer_digest", digests}, {"config", dc}};

    DistillHooks hooks;
    const auto start = std::chrono::steady_clock::now();
    hooks.on_step = [&](const StepRecord& r) {
      if (r.iteration % 100 == 0 || r.iteration == dc.iterations) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ctx.err << "distill spc " << spc << " iteration " << r.iteration << "/" << dc.iterations << " loss "
                << r.loss << " alpha " << r.alpha << " (" << secs << " s)\n";
      }
    };
    hooks.on_checkpoint = [&](const SyntheticDataset& syn) {
      fs::path cp = pack;
      cp.replace_filename("spc" + std::to_string(spc) + "_it" + std::to_string(syn.iteration) + ".pack");
      save_pack(to_labeled(syn, train.manifest(), extra), cp);
    };
    const DistillResult res = distill(train, experts, dc, spc, hooks);
    save_pack(to_labeled(res.syn, train.manifest(), extra), pack);
    fs::path csv = pack;
    csv.replace_filename("spc" + std::to_string(spc) + "_loss.csv");
    write_text(csv, loss_csv(res.history));

    nlohmann::json s{{"command", "distill"}, {"arch", to_string(ds.arch)}, {"spc", spc},
                     {"pack", pack.string()},  {"loss_csv", csv.string()}, {"alpha", res.syn.alpha},
                     {"iterations", res.syn.iteration}};
    if (!res.history.empty()) {
      s["first_loss"] = res.history.front().loss;
      s["final_loss"] = res.history.back().loss;
    }
    ctx.summary(s);
  }
}

void coreset_cmd(const Context& ctx) {
  const auto train = load_required(train_pack_path(ctx.root()), "train pack");
  for (auto m : ctx.cfg.coreset.methods) {
    for (auto spc : ctx.cfg.coreset.spc) {
      const auto r = select_coreset(m, train, spc, derive_seed(ctx.cfg.seed, "coreset", spc));
      const fs::path pack = coreset_pack_path(ctx.root(), m, spc);
      fs::create_directories(pack.parent_path());
      fs::path json = pack;
      json.replace_extension(".json");
      export_coreset(train, r, pack, json);
      ctx.summary({{"command", "coreset"}, {"method", to_string(m)}, {"spc", spc},
                   {"pack", pack.string()}, {"indices", json.string()}});
    }
  }
}

EvalConfig eval_config(const RunConfig& cfg, const LabeledDataset& train, ModelKind arch) {
  EvalConfig ec;
  ec.spec = default_spec(arch, train.sample_shape(), train.class_count());
  ec.epochs = cfg.eval.epochs;
  ec.lr = cfg.eval.lr;
  ec.momentum = cfg.eval.momentum;
  ec.batch_size = cfg.eval.batch_size;
  ec.whole_data_epochs = cfg.eval.whole_data_epochs;
  ec.seeds = eval_seeds(derive_seed(cfg.seed, "eval"), cfg.eval.repeats);
  return ec;
}

nlohmann::json brief(const std::vector<EvalReport>& reports) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : reports) {
    out.push_back({{"method", r.method}, {"spc", r.spc}, {"model", to_string(r.model)},
                   {"mean", r.mean}, {"std", r.std}});
  }
  return out;
}

void eval_cmd(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto train = load_required(train_pack_path(ctx.root()), "train pack");
  const auto test = load_required(test_pack_path(ctx.root()), "test pack");

  // Every input is loaded before any training so a missing artifact fails fast.
  struct Job {
    std::string method;
    std::size_t spc;
    LabeledDataset set;
  };
  std::vector<Job> sets;
  for (auto spc : cfg.distill.spc) {
    sets.push_back({"distilled", spc, load_required(distilled_pack_path(ctx.root(), cfg.distill.arch, spc), "distilled pack")});
  }
  for (auto m : cfg.coreset.methods) {
    for (auto spc : cfg.coreset.spc) {
      sets.push_back({to_string(m), spc, load_required(coreset_pack_path(ctx.root(), m, spc), "coreset pack")});
    }
  }

  std::vector<EvalReport> reports;
  for (auto arch : cfg.eval.archs) {
    const EvalConfig ec = eval_config(cfg, train, arch);
    for (const auto& s : sets) {
      reports.push_back(evaluate_set(s.set, s.method, s.spc, ec, test, ctx.jobs));
      ctx.err << s.method << " spc " << s.spc << " " << to_string(arch) << ": " << reports.back().mean << '\n';
    }
    EvalConfig whole = ec;
    whole.epochs = ec.whole_data_epochs;
    reports.push_back(evaluate_set(train, "whole", 0, whole, test, ctx.jobs));
    ctx.err << "whole " << to_string(arch) << ": " << reports.back().mean << '\n';
  }
  const fs::path dir = reports_dir(ctx.root());
  fs::create_directories(dir);
  write_text(dir / "eval.csv", reports_csv(reports));
  write_text(dir / "eval_table.txt", render_table(reports));
  ctx.summary({{"command", "eval"}, {"csv", (dir / "eval.csv").string()}, {"results", brief(reports)}});
}

void cross_eval_cmd(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto train = load_required(train_pack_path(ctx.root()), "train pack");
  const auto test = load_required(test_pack_path(ctx.root()), "test pack");
  std::vector<ModelSpec> evaluators;
  for (auto arch : cfg.eval.archs) evaluators.push_back(default_spec(arch, train.sample_shape(), train.class_count()));
  const fs::path dir = reports_dir(ctx.root());
  fs::create_directories(dir);

  for (auto spc : cfg.distill.spc) {
    std::vector<std::pair<std::string, LabeledDataset>> producers;
    for (auto arch : cfg.eval.archs) {
      const fs::path p = distilled_pack_path(ctx.root(), arch, spc);
      if (fs::exists(p)) producers.emplace_back("distilled-" + std::string(to_string(arch)), load_pack(p));
    }
    if (producers.empty()) {
      throw std::runtime_error("distilled pack not found: " +
                               distilled_pack_path(ctx.root(), cfg.distill.arch, spc).string());
    }
    const fs::path random = coreset_pack_path(ctx.root(), CoresetMethod::random, spc);
    if (fs::exists(random)) producers.emplace_back("random", load_pack(random));

    const auto matrix = cross_matrix(producers, evaluators, eval_config(cfg, train, cfg.eval.archs.front()), test,
                                     ctx.jobs);
    std::vector<EvalReport> flat;
    for (const auto& row : matrix) flat.insert(flat.end(), row.begin(), row.end());
    const std::string stem = "cross_spc" + std::to_string(spc);
    write_text(dir / (stem + ".csv"), reports_csv(flat));
    write_text(dir / (stem + ".txt"), render_table(flat));
    ctx.summary({{"command", "cross-eval"}, {"spc", spc}, {"csv", (dir / (stem + ".csv")).string()},
                 {"results", brief(flat)}});
  }
}

void report_cmd(const Context& ctx) {
  const fs::path dir = reports_dir(ctx.root());
  const fs::path eval_csv = dir / "eval.csv";
  if (!fs::exists(eval_csv)) throw std::runtime_error("eval report not found: " + eval_csv.string());
  std::string text = "accuracy (mean ± std over repeats)\n\n" + render_table(parse_reports_csv(read_text(eval_csv)));
  std::vector<std::string> sources{eval_csv.string()};
  for (auto spc : ctx.cfg.distill.spc) {
    const fs::path cross = dir / ("cross_spc" + std::to_string(spc) + ".csv");
    if (!fs::exists(cross)) continue;
    text += "cross-architecture, spc " + std::to_string(spc) + "\n\n" + render_table(parse_reports_csv(read_text(cross)));
    sources.push_back(cross.string());
  }
  write_text(dir / "report.txt", text);
  ctx.err << text;
  ctx.summary({{"command", "report"}, {"report", (dir / "report.txt").string()}, {"sources", sources}});
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dataset distillation for Wi-Fi CSI activity data", "widistill"};
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output;
  std::size_t jobs = 1;
  app.add_option("-c,--config", config_path, "TOML run configuration");
  app.add_option("--set", overrides, "Override one config value, e.g. --set distill.iterations=500")
      ->take_all()
      ->expected(1)
      ->allow_extra_args(false);
  app.add_option("-o,--out", output, "Output directory (overrides the config's output)");
  app.add_option("-j,--jobs", jobs, "Parallel workers for teachers and evaluation repeats")->check(CLI::PositiveNumber);
  app.require_subcommand(1, 1);

  using Handler = void (*)(const Context&);
  const std::pair<const char*, std::pair<const char*, Handler>> commands[] = {
      {"gen-data", {"Generate (or load), split and preprocess the dataset", gen_data}},
      {"buffer", {"Train teachers and save their per-epoch trajectories", buffer}},
      {"distill", {"Distill a synthetic set from the expert buffer", distill_cmd}},
      {"coreset", {"Select coreset baselines from the train split", coreset_cmd}},
      {"eval", {"Train fresh students on every set and report test accuracy", eval_cmd}},
      {"cross-eval", {"Evaluate distilled sets across architectures", cross_eval_cmd}},
      {"report", {"Render the accuracy tables", report_cmd}},
  };
  Handler chosen = nullptr;
  for (const auto& [name, info] : commands) {
    auto* sub = app.add_subcommand(name, info.first);
    sub->fallthrough();
    const Handler h = info.second;
    sub->callback([&chosen, h] { chosen = h; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!output.empty()) overrides.push_back("output=\"" + output + "\"");
    const RunConfig cfg = load_run_config(config_path, overrides);
    const Context ctx{cfg, jobs, out, err};
    chosen(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace widistill::cli
