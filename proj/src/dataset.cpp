#include "widistill/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "widistill/binio.hpp"

namespace widistill {

namespace {

constexpr std::array<char, 4> kPackMagic{'W', 'D', 'P', 'K'};
constexpr std::uint32_t kPackVersion = 1;

}  // namespace

void to_json(nlohmann::json& j, const Manifest& m) {
  j = nlohmann::json{{"class_count", m.class_count},
                     {"sample_shape", m.sample_shape},
                     {"split", m.split},
                     {"provenance", m.provenance},
                     {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, Manifest& m) {
  m.class_count = j.at("class_count").get<std::size_t>();
  m.sample_shape = j.at("sample_shape").get<Shape>();
  m.split = j.value("split", "");
  m.provenance = j.value("provenance", "");
  m.extra = j.value("extra", nlohmann::json::object());
}

LabeledDataset::LabeledDataset(Tensor samples, std::vector<std::uint32_t> labels, Manifest manifest)
    : samples_(std::move(samples)), labels_(std::move(labels)), manifest_(std::move(manifest)) {
  if (labels_.empty()) throw std::invalid_argument("dataset: needs at least one sample");
  Shape expected{labels_.size()};
  expected.insert(expected.end(), manifest_.sample_shape.begin(), manifest_.sample_shape.end());
  if (samples_.shape() != expected) {
    throw ShapeError("dataset: samples " + to_string(samples_.shape()) + " vs expected " +
                     to_string(expected));
  }
  for (std::uint32_t y : labels_) {
    if (y >= manifest_.class_count) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(manifest_.class_count) + ")");
    }
  }
  if (!samples_.all_finite()) throw std::invalid_argument("dataset: non-finite sample values");
}

Tensor LabeledDataset::gather(std::span<const std::uint32_t> rows) const {
  const std::size_t d = feature_count();
  Shape shape{rows.size()};
  shape.insert(shape.end(), manifest_.sample_shape.begin(), manifest_.sample_shape.end());
  return visit_dtype(samples_.dtype(), [&]<typename T>() {
    auto src = samples_.view<T>();
    std::vector<T> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= size()) throw std::out_of_range("dataset: row " + std::to_string(rows[i]));
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return Tensor::adopt<T>(std::move(shape), std::move(out));
  });
}

LabeledDataset LabeledDataset::subset(std::span<const std::uint32_t> rows, std::string split) const {
  std::vector<std::uint32_t> labels;
  labels.reserve(rows.size());
  for (std::uint32_t r : rows) labels.push_back(labels_.at(r));
  Manifest m = manifest_;
  m.split = std::move(split);
  return LabeledDataset(gather(rows), std::move(labels), std::move(m));
}

LabeledDataset LabeledDataset::with_manifest(Manifest manifest) const {
  return LabeledDataset(samples_, labels_, std::move(manifest));
}

std::vector<std::vector<std::uint32_t>> LabeledDataset::indices_by_class() const {
  std::vector<std::vector<std::uint32_t>> out(class_count());
  for (std::uint32_t i = 0; i < size(); ++i) out[labels_[i]].push_back(i);
  return out;
}

bool bit_equal(const LabeledDataset& a, const LabeledDataset& b) {
  return a.samples().bit_equal(b.samples()) && a.labels() == b.labels() &&
         a.manifest() == b.manifest();
}

void save_pack(const LabeledDataset& ds, const std::filesystem::path& path) {
  ByteWriter w;
  w.put_raw(std::string_view(kPackMagic.data(), kPackMagic.size()));
  w.put(kPackVersion);
  w.put(static_cast<std::uint8_t>(ds.samples().dtype()));
  w.put(static_cast<std::uint8_t>(ds.sample_shape().size()));
  for (std::size_t e : ds.sample_shape()) w.put(static_cast<std::uint32_t>(e));
  w.put(static_cast<std::uint64_t>(ds.size()));
  w.put(static_cast<std::uint32_t>(ds.class_count()));
  w.put_span(std::span<const std::uint32_t>(ds.labels()));
  visit_dtype(ds.samples().dtype(), [&]<typename T>() { w.put_span(ds.samples().view<T>()); });
  w.put_string(nlohmann::json(ds.manifest()).dump());
  write_file_atomic(path, w.bytes());
}

LabeledDataset load_pack(const std::filesystem::path& path) {
  ByteReader r(read_file(path), "pack");
  if (r.peek_raw(4) != std::string_view(kPackMagic.data(), kPackMagic.size())) {
    throw FormatError(path.string() + ": not a pack file");
  }
  r.get<std::array<char, 4>>();
  const auto version = r.get<std::uint32_t>();
  if (version != kPackVersion) {
    throw FormatError(path.string() + ": unsupported pack version " + std::to_string(version));
  }
  const auto dtype_code = r.get<std::uint8_t>();
  if (dtype_code > 1) throw FormatError(path.string() + ": unknown dtype code");
  const auto dtype = static_cast<DType>(dtype_code);
  const auto rank = r.get<std::uint8_t>();
  Shape sample_shape(rank);
  for (auto& e : sample_shape) e = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  const auto classes = r.get<std::uint32_t>();

  const std::size_t elem = dtype == DType::f32 ? sizeof(float) : sizeof(double);
  const std::size_t payload = n * sizeof(std::uint32_t) + n * numel(sample_shape) * elem;
  if (r.remaining() < payload + sizeof(std::uint32_t)) {
    throw FormatError(path.string() + ": truncated pack (header declares " + std::to_string(n) +
                      " samples)");
  }
  std::vector<std::uint32_t> labels(n);
  r.get_span(std::span<std::uint32_t>(labels));
  Shape full{n};
  full.insert(full.end(), sample_shape.begin(), sample_shape.end());
  Tensor samples = visit_dtype(dtype, [&]<typename T>() {
    std::vector<T> v(numel(full));
    r.get_span(std::span<T>(v));
    return Tensor::adopt<T>(Shape(full), std::move(v));
  });
  const auto manifest_len = r.get<std::uint32_t>();
  if (r.remaining() != manifest_len) {
    throw FormatError(path.string() + ": truncated pack (payload size does not match header)");
  }
  Manifest manifest;
  try {
    manifest = nlohmann::json::parse(std::string(r.peek_raw(manifest_len))).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt pack manifest: " + e.what());
  }
  if (manifest.sample_shape != sample_shape || manifest.class_count != classes) {
    throw FormatError(path.string() + ": manifest disagrees with pack header");
  }
  return LabeledDataset(std::move(samples), std::move(labels), std::move(manifest));
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train_fraction must be in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::uint32_t> train, test;
  const auto by_class = ds.indices_by_class();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    if (idx.size() < 2) {
      throw std::invalid_argument("split: class " + std::to_string(c) + " has " +
                                  std::to_string(idx.size()) + " samples, need >= 2");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto take = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    take = std::clamp<std::size_t>(take, 1, idx.size() - 1);
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {ds.subset(train, "train"), ds.subset(test, "test")};
}

std::vector<ClassStats> class_stats(const LabeledDataset& ds) {
  const std::size_t d = ds.feature_count();
  std::vector<std::vector<double>> sums(ds.class_count(), std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(ds.class_count(), 0);
  const std::vector<double> x = ds.samples().to_doubles();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto c = ds.labels()[i];
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) sums[c][j] += x[i * d + j];
  }
  std::vector<ClassStats> out;
  for (std::size_t c = 0; c < ds.class_count(); ++c) {
    if (counts[c] > 0) {
      for (double& v : sums[c]) v /= static_cast<double>(counts[c]);
    }
    out.push_back({counts[c], Tensor::from_doubles(ds.sample_shape(), sums[c], DType::f64)});
  }
  return out;
}

}  // namespace widistill
