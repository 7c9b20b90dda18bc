#include "run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

namespace widistill::cli {

namespace {

// Reads keys from one TOML table and remembers which were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename T>
  void read(const char* key, T& out) {
    used_.insert(key);
    if (!table_) return;
    const toml::node* node = table_->get(key);
    if (!node) return;
    convert(*node, key, out);
  }

  void skip(const char* key) { used_.insert(key); }

  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_) {
      if (!used_.count(std::string(k.str()))) throw ConfigError("unknown config key '" + where(k.str()) + "'");
    }
  }

 private:
  std::string where(std::string_view key) const {
    return name_.empty() ? std::string(key) : name_ + "." + std::string(key);
  }

  [[noreturn]] void bad(std::string_view key, const char* want) const {
    throw ConfigError("config key '" + where(key) + "' must be " + want);
  }

  void convert(const toml::node& n, std::string_view key, std::size_t& out) const {
    const auto v = n.value<std::int64_t>();
    if (!n.is_integer() || !v || *v < 0) bad(key, "a non-negative integer");
    out = static_cast<std::size_t>(*v);
  }
  void convert(const toml::node& n, std::string_view key, double& out) const {
    if (!n.is_number()) bad(key, "a number");
    out = *n.value<double>();
  }
  void convert(const toml::node& n, std::string_view key, std::string& out) const {
    if (!n.is_string()) bad(key, "a string");
    out = *n.value<std::string>();
  }
  void convert(const toml::node& n, std::string_view key, std::filesystem::path& out) const {
    std::string s;
    convert(n, key, s);
    out = s;
  }
  void convert(const toml::node& n, std::string_view key, ModelKind& out) const {
    std::string s;
    convert(n, key, s);
    try {
      out = parse_model_kind(s);
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + where(key) + "': " + e.what());
    }
  }
  void convert(const toml::node& n, std::string_view key, CoresetMethod& out) const {
    std::string s;
    convert(n, key, s);
    try {
      out = parse_coreset_method(s);
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + where(key) + "': " + e.what());
    }
  }
  template <typename T>
  void convert(const toml::node& n, std::string_view key, std::vector<T>& out) const {
    const toml::array* arr = n.as_array();
    if (!arr) bad(key, "an array");
    out.clear();
    for (const auto& item : *arr) {
      T v{};
      convert(item, key, v);
      out.push_back(v);
    }
  }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> used_;
};

void apply_override(toml::table& root, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + text + "' must look like section.key=value");
  }
  const std::string path = text.substr(0, eq), raw = text.substr(eq + 1);
  std::string section, key = path;
  if (const auto dot = path.find('.'); dot != std::string::npos) {
    section = path.substr(0, dot);
    key = path.substr(dot + 1);
  }
  if (key.empty() || key.find('.') != std::string::npos) {
    throw ConfigError("override '" + text + "' must name one key, optionally inside one section");
  }
  // Typed TOML value when it parses as one, otherwise a bare string.
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + raw);
  } catch (const toml::parse_error&) {
    parsed = toml::table{{"v", raw}};
  }
  toml::table* target = &root;
  if (!section.empty()) {
    if (!root.contains(section)) root.insert(section, toml::table{});
    target = root[section].as_table();
    if (!target) throw ConfigError("override '" + text + "': '" + section + "' is not a section");
  }
  target->insert_or_assign(key, *parsed.get("v"));
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (output.empty()) fail("output directory must be set");
  if (data.samples_per_class < 2) fail("data.samples_per_class must be >= 2");
  if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) fail("data.train_fraction must be in (0, 1)");
  if (!(data.preprocess.mad_k > 0.0)) fail("data.mad_k must be > 0");
  if (!data.pack.empty() && !std::filesystem::exists(data.pack)) {
    fail("data.pack '" + data.pack.string() + "' does not exist");
  }
  if (teacher.count == 0) fail("teacher.count must be >= 1");
  for (auto s : distill.spc) {
    if (s == 0) fail("distill.spc values must be positive");
  }
  for (auto s : coreset.spc) {
    if (s == 0) fail("coreset.spc values must be positive");
  }
  if (eval.repeats == 0) fail("eval.repeats must be >= 1");
  if (eval.archs.empty()) fail("eval.archs must name at least one architecture");
  try {
    distill.config.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }
}

RunConfig parse_run_config(const std::string& toml_text, const std::vector<std::string>& overrides) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error: " << e.description() << " (line " << e.source().begin.line << ")";
    throw ConfigError(msg.str());
  }
  for (const auto& o : overrides) apply_override(root, o);

  RunConfig cfg;
  Section top(&root, "");
  std::size_t seed = cfg.seed;
  top.read("seed", seed);
  cfg.seed = seed;
  top.read("output", cfg.output);
  for (const char* s : {"data", "teacher", "distill", "coreset", "eval"}) {
    if (const auto* n = root.get(s); n && !n->is_table()) throw ConfigError("'" + std::string(s) + "' must be a section");
    top.skip(s);
  }
  {
    Section d(root.get_as<toml::table>("data"), "data");
    d.read("pack", cfg.data.pack);
    d.read("samples_per_class", cfg.data.samples_per_class);
    d.read("train_fraction", cfg.data.train_fraction);
    d.read("mad_k", cfg.data.preprocess.mad_k);
    d.read("eps_std", cfg.data.preprocess.eps_std);
    d.finish();
  }
  {
    Section t(root.get_as<toml::table>("teacher"), "teacher");
    t.read("arch", cfg.teacher.arch);
    t.read("count", cfg.teacher.count);
    t.read("epochs", cfg.teacher.epochs);
    t.read("batch_size", cfg.teacher.batch_size);
    t.read("lr", cfg.teacher.lr);
    t.read("momentum", cfg.teacher.momentum);
    t.finish();
  }
  {
    Section d(root.get_as<toml::table>("distill"), "distill");
    auto& c = cfg.distill.config;
    d.read("arch", cfg.distill.arch);
    d.read("spc", cfg.distill.spc);
    d.read("buffer", cfg.distill.buffer);
    d.read("K", c.K);
    d.read("J", c.J);
    d.read("T_plus", c.T_plus);
    d.read("iterations", c.iterations);
    d.read("lr_samples", c.lr_samples);
    d.read("lr_alpha", c.lr_alpha);
    d.read("meta_momentum", c.meta_momentum);
    d.read("alpha_init", c.alpha_init);
    d.read("denom_eps", c.denom_eps);
    d.read("checkpoint_every", c.checkpoint_every);
    d.read("full_batch_limit", c.full_batch_limit);
    d.read("minibatch", c.minibatch);
    d.finish();
  }
  {
    Section c(root.get_as<toml::table>("coreset"), "coreset");
    c.read("methods", cfg.coreset.methods);
    c.read("spc", cfg.coreset.spc);
    c.finish();
  }
  {
    Section e(root.get_as<toml::table>("eval"), "eval");
    e.read("archs", cfg.eval.archs);
    e.read("epochs", cfg.eval.epochs);
    e.read("lr", cfg.eval.lr);
    e.read("momentum", cfg.eval.momentum);
    e.read("batch_size", cfg.eval.batch_size);
    e.read("whole_data_epochs", cfg.eval.whole_data_epochs);
    e.read("repeats", cfg.eval.repeats);
    e.finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  if (path.empty()) return parse_run_config("", overrides);
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), overrides);
}

std::string to_toml(const RunConfig& cfg) {
  auto ints = [](const std::vector<std::size_t>& v) {
    toml::array a;
    for (auto x : v) a.push_back(static_cast<std::int64_t>(x));
    return a;
  };
  auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
  toml::array methods, archs;
  for (auto m : cfg.coreset.methods) methods.push_back(to_string(m));
  for (auto a : cfg.eval.archs) archs.push_back(std::string(to_string(a)));
  const auto& d = cfg.distill.config;
  toml::table root{
      {"seed", static_cast<std::int64_t>(cfg.seed)},
      {"output", cfg.output.string()},
      {"data", toml::table{{"pack", cfg.data.pack.string()},
                           {"samples_per_class", i64(cfg.data.samples_per_class)},
                           {"train_fraction", cfg.data.train_fraction},
                           {"mad_k", cfg.data.preprocess.mad_k},
                           {"eps_std", cfg.data.preprocess.eps_std}}},
      {"teacher", toml::table{{"arch", std::string(to_string(cfg.teacher.arch))},
                              {"count", i64(cfg.teacher.count)},
                              {"epochs", i64(cfg.teacher.epochs)},
                              {"batch_size", i64(cfg.teacher.batch_size)},
                              {"lr", cfg.teacher.lr},
                              {"momentum", cfg.teacher.momentum}}},
      {"distill", toml::table{{"arch", std::string(to_string(cfg.distill.arch))},
                              {"spc", ints(cfg.distill.spc)},
                              {"buffer", cfg.distill.buffer.string()},
                              {"K", i64(d.K)},
                              {"J", i64(d.J)},
                              {"T_plus", i64(d.T_plus)},
                              {"iterations", i64(d.iterations)},
                              {"lr_samples", d.lr_samples},
                              {"lr_alpha", d.lr_alpha},
                              {"meta_momentum", d.meta_momentum},
                              {"alpha_init", d.alpha_init},
                              {"denom_eps", d.denom_eps},
                              {"checkpoint_every", i64(d.checkpoint_every)},
                              {"full_batch_limit", i64(d.full_batch_limit)},
                              {"minibatch", i64(d.minibatch)}}},
      {"coreset", toml::table{{"methods", methods}, {"spc", ints(cfg.coreset.spc)}}},
      {"eval", toml::table{{"archs", archs},
                           {"epochs", i64(cfg.eval.epochs)},
                           {"lr", cfg.eval.lr},
                           {"momentum", cfg.eval.momentum},
                           {"batch_size", i64(cfg.eval.batch_size)},
                           {"whole_data_epochs", i64(cfg.eval.whole_data_epochs)},
                           {"repeats", i64(cfg.eval.repeats)}}},
  };
  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

}  // namespace widistill::cli
