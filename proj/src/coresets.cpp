#include "widistill/coresets.hpp"

#include <algorithm>
#include <fstream>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "widistill/rng.hpp"

namespace widistill {

std::string to_string(CoresetMethod m) {
  switch (m) {
    case CoresetMethod::random: return "random";
    case CoresetMethod::kmeans: return "kmeans";
    case CoresetMethod::kcenter: return "kcenter";
    case CoresetMethod::herding: return "herding";
  }
  return "?";
}

CoresetMethod parse_coreset_method(std::string_view name) {
  for (auto m : {CoresetMethod::random, CoresetMethod::kmeans, CoresetMethod::kcenter,
                 CoresetMethod::herding}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown coreset method '" + std::string(name) +
                              "' (expected random, kmeans, kcenter or herding)");
}

void to_json(nlohmann::json& j, const CoresetResult& r) {
  j = nlohmann::json{{"method", to_string(r.method)}, {"spc", r.spc}, {"indices", r.indices}};
}

void from_json(const nlohmann::json& j, CoresetResult& r) {
  r.method = parse_coreset_method(j.at("method").get<std::string>());
  r.spc = j.at("spc").get<std::size_t>();
  r.indices = j.at("indices").get<std::vector<std::uint32_t>>();
}

void check_coreset(const CoresetResult& r, const LabeledDataset& ds) {
  const std::size_t c_count = ds.class_count();
  if (r.indices.size() != r.spc * c_count) {
    throw std::invalid_argument("coreset: " + std::to_string(r.indices.size()) + " indices for spc " +
                                std::to_string(r.spc) + " and " + std::to_string(c_count) + " classes");
  }
  std::vector<bool> seen(ds.size(), false);
  for (std::size_t i = 0; i < r.indices.size(); ++i) {
    const auto idx = r.indices[i];
    if (idx >= ds.size()) throw std::invalid_argument("coreset: index " + std::to_string(idx) + " out of range");
    if (seen[idx]) throw std::invalid_argument("coreset: index " + std::to_string(idx) + " repeated");
    seen[idx] = true;
    const std::size_t cls = i / r.spc;
    if (ds.labels()[idx] != cls) {
      throw std::invalid_argument("coreset: index " + std::to_string(idx) + " has label " +
                                  std::to_string(ds.labels()[idx]) + " but sits in class " +
                                  std::to_string(cls));
    }
  }
}

FeatureMatrix FeatureMatrix::select(std::span<const std::uint32_t> which) const {
  FeatureMatrix out{which.size(), dim, {}};
  out.values.reserve(which.size() * dim);
  for (auto i : which) {
    const auto r = row(i);
    out.values.insert(out.values.end(), r.begin(), r.end());
  }
  return out;
}

FeatureMatrix feature_embed(const LabeledDataset& ds) {
  return FeatureMatrix{ds.size(), ds.feature_count(), ds.samples().to_doubles()};
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

namespace {

std::vector<double> mean_row(const FeatureMatrix& pts) {
  std::vector<double> mu(pts.dim, 0.0);
  for (std::size_t i = 0; i < pts.rows; ++i) {
    const auto r = pts.row(i);
    for (std::size_t d = 0; d < pts.dim; ++d) mu[d] += r[d];
  }
  for (double& v : mu) v /= static_cast<double>(pts.rows);
  return mu;
}

std::size_t nearest_to(const FeatureMatrix& pts, std::span<const double> target) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.rows; ++i) {
    const double d = squared_distance(pts.row(i), target);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

void check_k(const FeatureMatrix& pts, std::size_t k, const char* who) {
  if (k == 0 || k > pts.rows) {
    throw std::invalid_argument(std::string(who) + ": cannot pick " + std::to_string(k) + " of " +
                                std::to_string(pts.rows) + " points");
  }
}

}  // namespace

std::vector<std::size_t> kcenter_greedy(const FeatureMatrix& pts, std::size_t k) {
  check_k(pts, k, "kcenter");
  std::vector<std::size_t> chosen{nearest_to(pts, mean_row(pts))};
  std::vector<double> gap(pts.rows);
  for (std::size_t i = 0; i < pts.rows; ++i) gap[i] = squared_distance(pts.row(i), pts.row(chosen[0]));
  while (chosen.size() < k) {
    std::size_t next = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < pts.rows; ++i) {
      if (gap[i] > far) {
        far = gap[i];
        next = i;
      }
    }
    // Every remaining point coincides with a center; take the lowest unused row.
    if (far == 0.0) {
      for (std::size_t i = 0; i < pts.rows; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
          next = i;
          break;
        }
      }
    }
    chosen.push_back(next);
    for (std::size_t i = 0; i < pts.rows; ++i) {
      gap[i] = std::min(gap[i], squared_distance(pts.row(i), pts.row(next)));
    }
  }
  return chosen;
}

std::vector<std::size_t> herding_greedy(const FeatureMatrix& pts, std::size_t k) {
  check_k(pts, k, "herding");
  const auto mu = mean_row(pts);
  std::vector<double> sum(pts.dim, 0.0), cand(pts.dim);
  std::vector<bool> used(pts.rows, false);
  std::vector<std::size_t> chosen;
  while (chosen.size() < k) {
    const double n = static_cast<double>(chosen.size() + 1);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.rows; ++i) {
      if (used[i]) continue;
      const auto r = pts.row(i);
      for (std::size_t d = 0; d < pts.dim; ++d) cand[d] = (sum[d] + r[d]) / n;
      const double dist = squared_distance(mu, cand);
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    used[best] = true;
    chosen.push_back(best);
    const auto r = pts.row(best);
    for (std::size_t d = 0; d < pts.dim; ++d) sum[d] += r[d];
  }
  return chosen;
}

KMeansResult kmeans(const FeatureMatrix& pts, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations, double tol) {
  check_k(pts, k, "kmeans");
  std::mt19937_64 rng(seed);
  KMeansResult out;
  out.centroids = FeatureMatrix{0, pts.dim, {}};
  auto add_centroid = [&](std::size_t i) {
    const auto r = pts.row(i);
    out.centroids.values.insert(out.centroids.values.end(), r.begin(), r.end());
    ++out.centroids.rows;
  };

  add_centroid(std::uniform_int_distribution<std::size_t>(0, pts.rows - 1)(rng));
  std::vector<double> d2(pts.rows);
  for (std::size_t i = 0; i < pts.rows; ++i) d2[i] = squared_distance(pts.row(i), out.centroids.row(0));
  while (out.centroids.rows < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < pts.rows; ++i) {
        if (d2[i] == 0.0) continue;
        pick = i;
        if (u < d2[i]) break;
        u -= d2[i];
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, pts.rows - 1)(rng);
    }
    add_centroid(pick);
    const auto c = out.centroids.row(out.centroids.rows - 1);
    for (std::size_t i = 0; i < pts.rows; ++i) d2[i] = std::min(d2[i], squared_distance(pts.row(i), c));
  }

  out.assignment.assign(pts.rows, 0);
  std::vector<double> sums(k * pts.dim);
  std::vector<std::size_t> counts(k);
  for (out.iterations = 1; out.iterations <= max_iterations; ++out.iterations) {
    for (std::size_t i = 0; i < pts.rows; ++i) out.assignment[i] = nearest_to(out.centroids, pts.row(i));
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < pts.rows; ++i) {
      const auto a = out.assignment[i];
      const auto r = pts.row(i);
      ++counts[a];
      for (std::size_t d = 0; d < pts.dim; ++d) sums[a * pts.dim + d] += r[d];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // an empty cluster keeps its centroid
      double moved = 0.0;
      for (std::size_t d = 0; d < pts.dim; ++d) {
        const double v = sums[c * pts.dim + d] / static_cast<double>(counts[c]);
        const double delta = v - out.centroids.values[c * pts.dim + d];
        moved += delta * delta;
        out.centroids.values[c * pts.dim + d] = v;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift < tol) break;
  }
  out.iterations = std::min(out.iterations, max_iterations);
  for (std::size_t i = 0; i < pts.rows; ++i) out.assignment[i] = nearest_to(out.centroids, pts.row(i));
  return out;
}

std::vector<std::size_t> nearest_unused(const FeatureMatrix& pts, const FeatureMatrix& centroids) {
  if (centroids.rows > pts.rows) throw std::invalid_argument("nearest_unused: more centroids than points");
  std::vector<bool> used(pts.rows, false);
  std::vector<std::size_t> out;
  std::vector<std::size_t> order(pts.rows);
  std::vector<double> dist(pts.rows);
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    for (std::size_t i = 0; i < pts.rows; ++i) {
      order[i] = i;
      dist[i] = squared_distance(pts.row(i), centroids.row(c));
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    const auto it = std::find_if(order.begin(), order.end(), [&](std::size_t i) { return !used[i]; });
    used[*it] = true;
    out.push_back(*it);
  }
  return out;
}

double covering_radius(const FeatureMatrix& pts, std::span<const std::size_t> chosen) {
  if (chosen.empty()) throw std::invalid_argument("covering_radius: no centers");
  double worst = 0.0;
  for (std::size_t i = 0; i < pts.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (auto c : chosen) best = std::min(best, squared_distance(pts.row(i), pts.row(c)));
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

namespace {

template <typename PickFn>
CoresetResult per_class(CoresetMethod method, const LabeledDataset& ds, std::size_t spc, PickFn pick) {
  if (spc == 0) throw std::invalid_argument(to_string(method) + " coreset: spc must be >= 1");
  const auto by_class = ds.indices_by_class();
  CoresetResult out{method, {}, spc};
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < spc) {
      throw std::invalid_argument(to_string(method) + " coreset: class " + std::to_string(c) + " has " +
                                  std::to_string(by_class[c].size()) + " samples, spc is " +
                                  std::to_string(spc));
    }
    for (auto pos : pick(c, by_class[c])) out.indices.push_back(by_class[c][pos]);
  }
  return out;
}

}  // namespace

CoresetResult random_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed) {
  return per_class(CoresetMethod::random, ds, spc, [&](std::size_t c, const std::vector<std::uint32_t>& rows) {
    std::vector<std::size_t> pos(rows.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    std::mt19937_64 rng(derive_seed(seed, "random-coreset", c));
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(spc);
    return pos;
  });
}

CoresetResult kmeans_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t seed) {
  const auto emb = feature_embed(ds);
  return per_class(CoresetMethod::kmeans, ds, spc, [&](std::size_t c, const std::vector<std::uint32_t>& rows) {
    const auto pts = emb.select(rows);
    return nearest_unused(pts, kmeans(pts, spc, derive_seed(seed, "kmeans", c)).centroids);
  });
}

CoresetResult kcenter_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t) {
  const auto emb = feature_embed(ds);
  return per_class(CoresetMethod::kcenter, ds, spc, [&](std::size_t, const std::vector<std::uint32_t>& rows) {
    return kcenter_greedy(emb.select(rows), spc);
  });
}

CoresetResult herding_select(const LabeledDataset& ds, std::size_t spc, std::uint64_t) {
  const auto emb = feature_embed(ds);
  return per_class(CoresetMethod::herding, ds, spc, [&](std::size_t, const std::vector<std::uint32_t>& rows) {
    return herding_greedy(emb.select(rows), spc);
  });
}

CoresetResult select_coreset(CoresetMethod m, const LabeledDataset& ds, std::size_t spc, std::uint64_t seed) {
  switch (m) {
    case CoresetMethod::random: return random_select(ds, spc, seed);
    case CoresetMethod::kmeans: return kmeans_select(ds, spc, seed);
    case CoresetMethod::kcenter: return kcenter_select(ds, spc, seed);
    case CoresetMethod::herding: return herding_select(ds, spc, seed);
  }
  throw std::invalid_argument("select_coreset: bad method");
}

LabeledDataset coreset_dataset(const LabeledDataset& ds, const CoresetResult& r) {
  check_coreset(r, ds);
  auto sub = ds.subset(r.indices, "coreset-" + to_string(r.method));
  Manifest m = sub.manifest();
  m.extra["coreset"] = r;
  return sub.with_manifest(std::move(m));
}

void export_coreset(const LabeledDataset& ds, const CoresetResult& r, const std::filesystem::path& pack_path,
                    const std::filesystem::path& json_path) {
  save_pack(coreset_dataset(ds, r), pack_path);
  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("cannot write " + json_path.string());
  out << nlohmann::json(r).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + json_path.string());
}

}  // namespace widistill
