#pragma once

#include <complex>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "widistill/dataset.hpp"

namespace widistill {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Class-conditional motion law of one propagation path:
/// d(t) = d0 + v * t + sway_amp * sin(2 pi sway_hz t), with d0 and v drawn
/// per sample from the given ranges.
struct PathMotion {
  Range start_m;
  Range velocity_mps;
  double sway_amp_m = 0.0;
  double sway_hz = 0.0;
};

/// Realised motion of one path in one sample.
struct PathState {
  double start_m = 0.0;
  double velocity_mps = 0.0;
  double sway_amp_m = 0.0;
  double sway_hz = 0.0;

  double length_at(double t) const;
};

/// Multipath channel model: H(f, t) = sum_n alpha_n exp(-j 2 pi d_n(t) / lambda_f).
struct MultipathConfig {
  std::vector<std::complex<double>> attenuation;  // per path, |alpha| <= 1
  std::vector<std::vector<PathMotion>> motion;    // [class][path]
  double wavelength_m = 0.0;                      // carrier wavelength
  std::vector<double> subcarrier_offsets_hz;      // relative to the carrier
  std::size_t time_steps = 0;
  double sample_period_s = 0.0;
  double noise_std = 0.0;

  std::size_t path_count() const { return attenuation.size(); }
  std::size_t class_count() const { return motion.size(); }
  void validate() const;

  /// Six gesture-like classes, 30 subcarriers x 64 time steps, five paths.
  static MultipathConfig desk_default();
};

void to_json(nlohmann::json& j, const MultipathConfig& cfg);

inline constexpr double kSpeedOfLight = 299'792'458.0;

/// Wavelength of subcarrier `k` in metres.
double subcarrier_wavelength(const MultipathConfig& cfg, std::size_t k);

/// Noise-free |H| over the [subcarrier, time] grid, row-major.
std::vector<double> amplitude_grid(const MultipathConfig& cfg, std::span<const PathState> paths);

/// Generates `samples_per_class` amplitude samples of shape [F, T] per class.
/// Each sample draws from its own stream derived from (seed, sample index).
LabeledDataset synth_csi(const MultipathConfig& cfg, std::size_t samples_per_class,
                         std::uint64_t seed, DType dtype = DType::f32);

}  // namespace widistill
