#pragma once

// Channel model and latency accounting. Units: sizes in bits, rates in
// bits/s, FLOPs as plain counts, time in seconds, power in W, distance in m.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fmml/common.hpp"

namespace fmml {

struct LinkParams {
  double bandwidth_hz = 1e4;
  double noise_psd = 1e-17;  // W/Hz
  double device_power_w = 0.1;
  double server_power_w = 1.0;
  double carrier_ghz = 2.6;

  void validate() const {
    if (!(bandwidth_hz > 0 && noise_psd > 0 && device_power_w > 0 && server_power_w > 0 && carrier_ghz > 0)) {
      throw ConfigError("link parameters must all be > 0");
    }
  }

  bool operator==(const LinkParams&) const = default;
};

struct ComputeParams {
  double cpu_hz = 5e7;
  double flops_per_cycle = 1.0;
  std::size_t local_iters = 10;
};

inline double path_loss_db(double distance_m, double carrier_ghz) {
  if (!(distance_m > 0.0) || !(carrier_ghz > 0.0)) throw Error("path_loss_db: distance and frequency must be > 0");
  return 32.4 + 20.0 * std::log10(carrier_ghz) + 20.0 * std::log10(distance_m);
}

inline double mean_gain(double distance_m, double carrier_ghz) {
  return std::pow(10.0, -path_loss_db(distance_m, carrier_ghz) / 20.0);
}

/// Rayleigh amplitude with mean 10^(-PL/20); scale sigma = mean * sqrt(2/pi).
inline double sample_gain(Rng& rng, double distance_m, double carrier_ghz) {
  const double sigma = mean_gain(distance_m, carrier_ghz) * std::sqrt(2.0 / std::numbers::pi);
  double u = uniform01(rng);
  while (u <= 0.0) u = uniform01(rng);
  return sigma * std::sqrt(-2.0 * std::log(u));
}

/// Shannon rate B log2(1 + p g^2 / (B N0)).
inline double link_rate(double power_w, double gain, double bandwidth_hz, double noise_psd) {
  if (!(bandwidth_hz > 0.0) || !(noise_psd > 0.0)) throw Error("link_rate: bandwidth and noise density must be > 0");
  return bandwidth_hz * std::log2(1.0 + power_w * gain * gain / (bandwidth_hz * noise_psd));
}

namespace detail {
inline double transfer_time(double bits, double rate) {
  if (bits == 0.0) return 0.0;
  if (!(rate > 0.0)) throw StalledLinkError("cannot move " + std::to_string(bits) + " bits over a zero-rate link");
  return bits / rate;
}
}  // namespace detail

/// Time to download every block scheduled for this device last round.
/// `prev_scheduled[m]` and `sizes_bits[m]` are indexed by block id.
inline double download_latency(std::span<const std::uint8_t> prev_scheduled, std::span<const std::uint64_t> sizes_bits,
                               double rate_down) {
  double bits = 0.0;
  for (std::size_t m = 0; m < prev_scheduled.size(); ++m) {
    if (prev_scheduled[m]) bits += static_cast<double>(sizes_bits[m]);
  }
  return detail::transfer_time(bits, rate_down);
}

/// N_k * (sum of per-iteration FLOPs over trained blocks) / (f_k e_k).
inline double compute_latency(const ComputeParams& params, const std::map<int, std::uint64_t>& flops) {
  double total = 0.0;
  for (const auto& [block, o] : flops) total += static_cast<double>(o);
  return static_cast<double>(params.local_iters) * total / (params.cpu_hz * params.flops_per_cycle);
}

/// Upload time if `candidate` is sent after the blocks already scheduled
/// (those with id < candidate and `scheduled_so_far[id]` set).
inline double cumulative_upload_latency(std::span<const std::uint8_t> scheduled_so_far, int candidate,
                                        std::span<const std::uint64_t> sizes_bits, double rate_up) {
  double bits = static_cast<double>(sizes_bits[static_cast<std::size_t>(candidate)]);
  for (int m = 0; m < candidate; ++m) {
    if (scheduled_so_far[static_cast<std::size_t>(m)]) bits += static_cast<double>(sizes_bits[static_cast<std::size_t>(m)]);
  }
  if (!(rate_up > 0.0)) return INFINITY;
  return bits / rate_up;
}

/// Distances of devices placed uniformly in a disc around the base station,
/// floored at 1 m.
inline std::vector<double> place_devices(std::size_t K, double diameter_m, Rng& rng) {
  std::vector<double> d(K);
  for (double& v : d) v = std::max(1.0, 0.5 * diameter_m * std::sqrt(uniform01(rng)));
  return d;
}

}  // namespace fmml
