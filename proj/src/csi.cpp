#include "widistill/csi.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "widistill/rng.hpp"

namespace widistill {

double PathState::length_at(double t) const {
  return start_m + velocity_mps * t + sway_amp_m * std::sin(2.0 * std::numbers::pi * sway_hz * t);
}

void MultipathConfig::validate() const {
  if (!(wavelength_m > 0.0)) throw std::invalid_argument("multipath: wavelength must be > 0");
  if (attenuation.empty()) throw std::invalid_argument("multipath: needs at least one path");
  for (const auto& a : attenuation) {
    if (std::abs(a) > 1.0) throw std::invalid_argument("multipath: |attenuation| must be <= 1");
  }
  if (motion.empty()) throw std::invalid_argument("multipath: needs at least one class");
  for (const auto& per_class : motion) {
    if (per_class.size() != attenuation.size()) {
      throw std::invalid_argument("multipath: every class needs one motion law per path");
    }
  }
  if (subcarrier_offsets_hz.empty() || time_steps == 0) {
    throw std::invalid_argument("multipath: grid must have subcarriers and time steps");
  }
  if (noise_std < 0.0) throw std::invalid_argument("multipath: noise_std must be >= 0");
}

MultipathConfig MultipathConfig::desk_default() {
  MultipathConfig cfg;
  using namespace std::complex_literals;
  cfg.attenuation = {1.0, 0.6 * std::exp(0.7i), 0.4 * std::exp(-1.9i), 0.35 * std::exp(2.3i),
                     0.25 * std::exp(-0.4i)};
  cfg.wavelength_m = kSpeedOfLight / 5.32e9;
  for (int k = 0; k < 30; ++k) cfg.subcarrier_offsets_hz.push_back((k - 14.5) * 625e3);
  cfg.time_steps = 64;
  cfg.sample_period_s = 1.0 / 64.0;
  cfg.noise_std = 0.05;

  // Static paths (line of sight, wall, ceiling) barely move between recordings.
  // The torso and limb paths carry the activity: drift velocity, sway amplitude
  // and sway frequency are class dependent.
  const PathMotion los{{2.98, 3.02}, {0.0, 0.0}, 0.0, 0.0};
  const PathMotion wall{{4.98, 5.02}, {0.0, 0.0}, 0.0, 0.0};
  const PathMotion ceiling{{6.48, 6.52}, {0.0, 0.0}, 0.0, 0.0};
  struct Activity {
    double torso_v, limb_v, limb_amp, limb_hz;
  };
  const Activity activities[] = {
      {-0.45, -0.9, 0.04, 0.8}, {-0.15, 0.6, 0.08, 1.5}, {0.0, 0.0, 0.12, 3.0},
      {0.15, -0.5, 0.06, 2.2},  {0.45, 0.9, 0.10, 1.1},  {0.0, 0.3, 0.15, 2.6},
  };
  for (const auto& a : activities) {
    const PathMotion torso{{3.9, 4.1}, {a.torso_v - 0.02, a.torso_v + 0.02}, 0.01, 0.5};
    const PathMotion limb{{3.4, 3.6}, {a.limb_v - 0.02, a.limb_v + 0.02}, a.limb_amp, a.limb_hz};
    cfg.motion.push_back({los, wall, ceiling, torso, limb});
  }
  return cfg;
}

void to_json(nlohmann::json& j, const MultipathConfig& cfg) {
  nlohmann::json att = nlohmann::json::array();
  for (const auto& a : cfg.attenuation) att.push_back({a.real(), a.imag()});
  nlohmann::json motion = nlohmann::json::array();
  for (const auto& per_class : cfg.motion) {
    nlohmann::json paths = nlohmann::json::array();
    for (const auto& m : per_class) {
      paths.push_back({{"start_m", {m.start_m.lo, m.start_m.hi}},
                       {"velocity_mps", {m.velocity_mps.lo, m.velocity_mps.hi}},
                       {"sway_amp_m", m.sway_amp_m},
                       {"sway_hz", m.sway_hz}});
    }
    motion.push_back(paths);
  }
  j = nlohmann::json{{"attenuation", att},
                     {"motion", motion},
                     {"wavelength_m", cfg.wavelength_m},
                     {"subcarrier_offsets_hz", cfg.subcarrier_offsets_hz},
                     {"time_steps", cfg.time_steps},
                     {"sample_period_s", cfg.sample_period_s},
                     {"noise_std", cfg.noise_std}};
}

double subcarrier_wavelength(const MultipathConfig& cfg, std::size_t k) {
  const double carrier_hz = kSpeedOfLight / cfg.wavelength_m;
  return kSpeedOfLight / (carrier_hz + cfg.subcarrier_offsets_hz.at(k));
}

std::vector<double> amplitude_grid(const MultipathConfig& cfg, std::span<const PathState> paths) {
  if (paths.size() != cfg.path_count()) {
    throw std::invalid_argument("amplitude_grid: " + std::to_string(paths.size()) +
                                " path states for " + std::to_string(cfg.path_count()) + " paths");
  }
  const std::size_t f_count = cfg.subcarrier_offsets_hz.size();
  std::vector<double> out(f_count * cfg.time_steps);
  std::vector<double> lengths(paths.size());
  for (std::size_t t = 0; t < cfg.time_steps; ++t) {
    const double time = static_cast<double>(t) * cfg.sample_period_s;
    for (std::size_t n = 0; n < paths.size(); ++n) lengths[n] = paths[n].length_at(time);
    for (std::size_t k = 0; k < f_count; ++k) {
      const double lambda = subcarrier_wavelength(cfg, k);
      std::complex<double> h{0.0, 0.0};
      for (std::size_t n = 0; n < paths.size(); ++n) {
        h += cfg.attenuation[n] * std::polar(1.0, -2.0 * std::numbers::pi * lengths[n] / lambda);
      }
      out[k * cfg.time_steps + t] = std::abs(h);
    }
  }
  return out;
}

LabeledDataset synth_csi(const MultipathConfig& cfg, std::size_t samples_per_class,
                         std::uint64_t seed, DType dtype) {
  cfg.validate();
  if (samples_per_class == 0) throw std::invalid_argument("synth_csi: samples_per_class must be >= 1");
  const std::size_t classes = cfg.class_count();
  const std::size_t f_count = cfg.subcarrier_offsets_hz.size();
  const std::size_t per_sample = f_count * cfg.time_steps;
  const std::size_t total = classes * samples_per_class;

  std::vector<double> data(total * per_sample);
  std::vector<std::uint32_t> labels(total);
  std::vector<PathState> states(cfg.path_count());
  for (std::size_t i = 0; i < total; ++i) {
    const auto c = static_cast<std::uint32_t>(i % classes);
    labels[i] = c;
    std::mt19937_64 rng(derive_seed(seed, "csi-sample", i));
    auto draw = [&rng](const Range& r) {
      return r.hi > r.lo ? std::uniform_real_distribution<double>(r.lo, r.hi)(rng) : r.lo;
    };
    for (std::size_t n = 0; n < cfg.path_count(); ++n) {
      const PathMotion& m = cfg.motion[c][n];
      states[n] = PathState{draw(m.start_m), draw(m.velocity_mps), m.sway_amp_m, m.sway_hz};
    }
    const auto grid = amplitude_grid(cfg, states);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (std::size_t j = 0; j < per_sample; ++j) {
      data[i * per_sample + j] = grid[j] + (cfg.noise_std > 0.0 ? noise(rng) : 0.0);
    }
  }

  Manifest manifest;
  manifest.class_count = classes;
  manifest.sample_shape = {f_count, cfg.time_steps};
  manifest.split = "all";
  manifest.provenance = "synth_csi seed=" + std::to_string(seed) +
                        " samples_per_class=" + std::to_string(samples_per_class);
  manifest.extra["generator"] = cfg;
  Shape shape{total, f_count, cfg.time_steps};
  return LabeledDataset(Tensor::from_doubles(std::move(shape), data, dtype), std::move(labels),
                        std::move(manifest));
}

}  // namespace widistill
