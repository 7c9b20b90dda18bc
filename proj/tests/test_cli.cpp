#include "doctest.h"

#include <unistd.h>

#include <sstream>

#include "commands.hpp"
#include "json.hpp"
#include "run_config.hpp"
#include "widistill/binio.hpp"
#include "widistill/dataset.hpp"

using namespace widistill;
using namespace widistill::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "widistill");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("widistill_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

// Small enough to run every stage in a couple of seconds.
const std::vector<std::string> kTiny = {
    "--set", "data.samples_per_class=12", "--set", "teacher.count=2",      "--set", "teacher.epochs=4",
    "--set", "distill.iterations=6",      "--set", "distill.T_plus=2",     "--set", "distill.lr_alpha=1e-7",
    "--set", "distill.spc=[2]",           "--set", "coreset.spc=[2]",      "--set", "coreset.methods=['random']",
    "--set", "eval.epochs=5",             "--set", "eval.whole_data_epochs=2", "--set", "eval.repeats=2",
};

Outcome stage(const fs::path& dir, const std::string& command) {
  std::vector<std::string> args{"--out", dir.string()};
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  args.push_back(command);
  return invoke(args);
}

}  // namespace

TEST_CASE("help exits 0 and lists the subcommands") {
  const auto r = invoke({"--help"});
  CHECK(r.code == 0);
  for (const char* sub : {"gen-data", "buffer", "distill", "coreset", "eval", "cross-eval", "report"}) {
    CHECK(r.out.find(sub) != std::string::npos);
  }
}

TEST_CASE("usage errors exit 2") {
  CHECK(invoke({"--bogus", "gen-data"}).code == 2);
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"gen-data", "buffer"}).code == 2);
  CHECK(invoke({"--jobs", "0", "gen-data"}).code == 2);
  const auto r = invoke({"--set", "teacher.epoch=3", "gen-data"});
  CHECK(r.code == 2);
  CHECK(r.err.find("teacher.epoch") != std::string::npos);
  CHECK(invoke({"--config", "/nonexistent/run.toml", "gen-data"}).code == 2);
}

TEST_CASE("missing artifacts exit 1 and name the path") {
  const fs::path dir = scratch("missing");
  const auto r = invoke({"--out", dir.string(), "distill"});
  CHECK(r.code == 1);
  CHECK(r.err.find((dir / "buffer" / "mlp").string()) != std::string::npos);
  CHECK(r.out.empty());

  const auto e = invoke({"--out", dir.string(), "eval"});
  CHECK(e.code == 1);
  CHECK(e.err.find("train.pack") != std::string::npos);
}

TEST_CASE("config defaults, file values and overrides") {
  const RunConfig d = parse_run_config("");
  CHECK(d.seed == 1);
  CHECK(d.teacher.epochs == 30);
  CHECK(d.distill.config.K == DistillConfig{}.K);
  CHECK(d.eval.archs.size() == 2);
  CHECK(d.coreset.methods.size() == 4);

  const std::string text = R"(
seed = 9
output = "runs/a"
[teacher]
arch = "cnn"
lr = 0.02
[distill]
spc = [1, 10]
K = 4
[coreset]
methods = ["herding", "kcenter"]
)";
  const RunConfig c = parse_run_config(text, {"distill.K=6", "eval.archs=[\"mlp\"]", "output=runs/b"});
  CHECK(c.seed == 9);
  CHECK(c.output == fs::path("runs/b"));
  CHECK(c.teacher.arch == ModelKind::cnn);
  CHECK(c.teacher.lr == doctest::Approx(0.02));
  CHECK(c.distill.spc == std::vector<std::size_t>{1, 10});
  CHECK(c.distill.config.K == 6);
  CHECK(c.coreset.methods == std::vector<CoresetMethod>{CoresetMethod::herding, CoresetMethod::kcenter});
  CHECK(c.eval.archs == std::vector<ModelKind>{ModelKind::mlp});

  const RunConfig back = parse_run_config(to_toml(c));
  CHECK(to_toml(back) == to_toml(c));
  CHECK(back.distill.config == c.distill.config);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_run_config("[teacher]\nepochs = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[teacher]\nepochs = 'many'\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[teacher]\narch = 'resnet'\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[extra]\nx = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("teacher = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[data]\ntrain_fraction = 1.5\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[data]\npack = '/nonexistent.pack'\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[distill]\nspc = [0]\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[eval]\nrepeats = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("seed = "), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"novalue"}), ConfigError);
  CHECK_THROWS_AS(parse_run_config("", {"a.b.c=1"}), ConfigError);
  try {
    parse_run_config("[distill]\nKK = 3\n");
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("distill.KK") != std::string::npos);
  }
}

TEST_CASE("every stage runs and writes its artifacts") {
  const fs::path dir = scratch("stages");
  for (const char* cmd : {"gen-data", "buffer", "distill", "coreset", "eval", "cross-eval", "report"}) {
    const auto r = stage(dir, cmd);
    INFO(cmd << ": " << r.err);
    REQUIRE(r.code == 0);
    // One JSON summary per line on stdout.
    std::istringstream lines(r.out);
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j.at("command") == cmd);
      ++count;
    }
    CHECK(count >= 1);
  }
  CHECK(fs::exists(dir / "buffer" / "mlp" / "expert_1.traj"));
  CHECK(fs::exists(dir / "coreset" / "random" / "spc2.json"));
  CHECK(fs::exists(dir / "reports" / "cross_spc2.csv"));
  CHECK(fs::exists(dir / "distill" / "mlp" / "spc2_loss.csv"));

  const auto pack = load_pack(dir / "distill" / "mlp" / "spc2.pack");
  CHECK(pack.size() == 12);
  CHECK(pack.manifest().extra.at("buffer_digest").size() == 2);

  const std::string report = read_file(dir / "reports" / "report.txt");
  CHECK(report.find("distilled") != std::string::npos);
  CHECK(report.find("whole") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("distill refuses a buffer trained for another architecture") {
  const fs::path dir = scratch("arch");
  REQUIRE(stage(dir, "gen-data").code == 0);
  REQUIRE(stage(dir, "buffer").code == 0);
  std::vector<std::string> args{"--out", dir.string(), "--set", "distill.arch=cnn", "--set",
                                "distill.buffer=" + (dir / "buffer" / "mlp").string()};
  args.insert(args.end(), kTiny.begin(), kTiny.end());
  args.push_back("distill");
  const auto r = invoke(args);
  CHECK(r.code == 1);
  CHECK(r.err.find("distill.arch") != std::string::npos);
  fs::remove_all(dir);
}
