#include "widistill/buffer.hpp"

#include <array>
#include <cstdio>
#include <stdexcept>

#include "widistill/binio.hpp"
#include "widistill/rng.hpp"

namespace widistill {

namespace {

constexpr std::array<char, 4> kBufferMagic{'W', 'D', 'T', 'B'};
constexpr std::uint32_t kBufferVersion = 1;

}  // namespace

void TeacherConfig::validate() const {
  spec.validate();
  if (epochs < 1) throw std::invalid_argument("teacher: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("teacher: batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("teacher: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("teacher: momentum must be in [0, 1)");
}

void to_json(nlohmann::json& j, const TeacherConfig& cfg) {
  j = nlohmann::json{{"spec", cfg.spec},         {"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size}, {"lr", cfg.lr},
                     {"momentum", cfg.momentum}, {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, TeacherConfig& cfg) {
  cfg.spec = j.at("spec").get<ModelSpec>();
  cfg.epochs = j.at("epochs").get<std::size_t>();
  cfg.batch_size = j.at("batch_size").get<std::size_t>();
  cfg.lr = j.at("lr").get<double>();
  cfg.momentum = j.at("momentum").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
}

bool bit_equal(const Trajectory& a, const Trajectory& b) {
  if (!(a.spec == b.spec && a.config == b.config && a.metrics == b.metrics &&
        a.snapshots.size() == b.snapshots.size())) {
    return false;
  }
  for (std::size_t i = 0; i < a.snapshots.size(); ++i) {
    if (a.snapshots[i].layout != b.snapshots[i].layout ||
        !a.snapshots[i].flat.bit_equal(b.snapshots[i].flat)) {
      return false;
    }
  }
  return true;
}

SgdOptions teacher_sgd_options(const TeacherConfig& cfg) {
  return SgdOptions{cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum,
                    derive_seed(cfg.seed, "shuffle-root")};
}

NetworkParams teacher_init(const TeacherConfig& cfg, DType dtype) {
  return init_params(cfg.spec, derive_seed(cfg.seed, "init"), InitMode::glorot_uniform, dtype);
}

Trajectory train_teacher(const LabeledDataset& train, const TeacherConfig& cfg) {
  cfg.validate();
  if (train.sample_shape() != cfg.spec.input_shape || train.class_count() != cfg.spec.class_count) {
    throw ShapeError("teacher: dataset " + to_string(train.sample_shape()) + " with " +
                     std::to_string(train.class_count()) + " classes does not match model input " +
                     to_string(cfg.spec.input_shape) + " with " + std::to_string(cfg.spec.class_count));
  }
  Trajectory t;
  t.spec = cfg.spec;
  t.config = cfg;
  t.snapshots.push_back(teacher_init(cfg));
  train_sgd(cfg.spec, t.snapshots.front(), train.samples(), train.labels(), teacher_sgd_options(cfg),
            [&](std::size_t, const NetworkParams& p, const EpochMetrics& m) {
              t.snapshots.push_back(p.cast(DType::f32));
              t.metrics.push_back(m);
            });
  return t;
}

void save_trajectory(const Trajectory& t, const std::filesystem::path& path) {
  if (t.snapshots.size() != t.epochs() + 1) {
    throw std::invalid_argument("trajectory: " + std::to_string(t.snapshots.size()) +
                                " snapshots for " + std::to_string(t.epochs()) + " epochs");
  }
  const auto& layout = t.snapshots.front().layout;
  ByteWriter w;
  w.put_raw(std::string_view(kBufferMagic.data(), kBufferMagic.size()));
  w.put(kBufferVersion);
  w.put_string(nlohmann::json(t.spec).dump());
  w.put_string(nlohmann::json(t.config).dump());
  w.put(static_cast<std::uint32_t>(t.epochs()));
  w.put(static_cast<std::uint32_t>(layout.size()));
  for (const auto& e : layout) {
    w.put_string(e.name);
    w.put(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put(static_cast<std::uint32_t>(d));
    w.put(static_cast<std::uint64_t>(e.offset));
  }
  for (const auto& s : t.snapshots) {
    if (s.layout != layout) throw std::invalid_argument("trajectory: snapshots disagree on layout");
    const Tensor f = s.flat.cast(DType::f32);
    w.put_span(f.view<float>());
  }
  for (const auto& m : t.metrics) {
    w.put(m.loss);
    w.put(m.accuracy);
  }
  write_file_atomic(path, w.bytes());
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  ByteReader r(read_file(path), "trajectory");
  if (r.peek_raw(4) != std::string_view(kBufferMagic.data(), kBufferMagic.size())) {
    throw FormatError(path.string() + ": not a trajectory file");
  }
  r.get<std::array<char, 4>>();
  const auto version = r.get<std::uint32_t>();
  if (version != kBufferVersion) {
    throw FormatError(path.string() + ": unsupported trajectory version " + std::to_string(version));
  }
  Trajectory t;
  try {
    t.spec = nlohmann::json::parse(r.get_string()).get<ModelSpec>();
    t.config = nlohmann::json::parse(r.get_string()).get<TeacherConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt trajectory header: " + e.what());
  }
  const auto epochs = r.get<std::uint32_t>();
  std::vector<LayoutEntry> layout(r.get<std::uint32_t>());
  for (auto& e : layout) {
    e.name = r.get_string();
    e.shape.resize(r.get<std::uint8_t>());
    for (auto& d : e.shape) d = r.get<std::uint32_t>();
    e.offset = r.get<std::uint64_t>();
  }
  if (layout != param_layout(t.spec)) {
    throw FormatError(path.string() + ": layout table does not match the model spec");
  }
  const std::size_t size = layout.empty() ? 0 : layout.back().offset + numel(layout.back().shape);
  const std::size_t expected = (epochs + 1) * size * sizeof(float) + epochs * 2 * sizeof(double);
  if (r.remaining() != expected) {
    throw FormatError(path.string() + ": truncated trajectory (header declares " +
                      std::to_string(epochs + 1) + " snapshots)");
  }
  for (std::size_t i = 0; i <= epochs; ++i) {
    std::vector<float> v(size);
    r.get_span(std::span<float>(v));
    t.snapshots.push_back(NetworkParams{Tensor::adopt<float>({size}, std::move(v)), layout});
  }
  for (std::size_t i = 0; i < epochs; ++i) {
    EpochMetrics m;
    m.loss = r.get<double>();
    m.accuracy = r.get<double>();
    t.metrics.push_back(m);
  }
  return t;
}

std::string file_digest(const std::filesystem::path& path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : read_file(path)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::pair<std::size_t, NetworkParams> sample_start(const Trajectory& t, std::size_t t_plus,
                                                   std::size_t lookahead, std::mt19937_64& rng) {
  if (t_plus < 1 || t_plus > t.epochs()) {
    throw std::invalid_argument("sample_start: T_plus=" + std::to_string(t_plus) +
                                " must be in [1, " + std::to_string(t.epochs()) + "]");
  }
  if (t_plus - 1 + lookahead > t.epochs()) {
    throw std::invalid_argument("sample_start: start epochs up to " + std::to_string(t_plus - 1) +
                                " plus lookahead " + std::to_string(lookahead) +
                                " exceed the trajectory length " + std::to_string(t.epochs()));
  }
  const std::size_t t0 = std::uniform_int_distribution<std::size_t>(0, t_plus - 1)(rng);
  return {t0, t.snapshots[t0]};
}

}  // namespace widistill
