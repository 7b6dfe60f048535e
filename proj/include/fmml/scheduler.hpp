#pragma once

// Per-block upload scheduling: rank the owners of each block by a metric that
// trades the benefit of sharing (one minus the device's own softmax
// coefficient) against the round latency the upload would cause, keep the
// top K-hat, then force uploads that have been skipped for too long.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmml/common.hpp"
#include "fmml/wireless.hpp"

namespace fmml {

struct MetricKind {
  enum class Kind { kRatio, kLinear };
  Kind kind = Kind::kRatio;
  double alpha = 0.0;

  static MetricKind ratio() { return {Kind::kRatio, 0.0}; }
  static MetricKind linear(double alpha) { return {Kind::kLinear, alpha}; }
  bool operator==(const MetricKind&) const = default;
};

/// Ratio: (1 - xi_self) / T. Linear: (1 - xi_self) - alpha T, with
/// T = t_down + t_cmp + t_up.
inline double scheduling_metric(const MetricKind& kind, double self_coeff, double t_down, double t_cmp, double t_up) {
  const double latency = t_down + t_cmp + t_up;
  if (kind.kind == MetricKind::Kind::kLinear) return (1.0 - self_coeff) - kind.alpha * latency;
  if (!(latency > 0.0)) throw Error("scheduling_metric: ratio metric needs a positive latency");
  return (1.0 - self_coeff) / latency;
}

/// Upload indicators and staleness counters for every (device, block).
class ScheduleState {
 public:
  ScheduleState() = default;
  ScheduleState(std::size_t num_devices, std::size_t num_blocks, std::size_t quota, int staleness_threshold)
      : devices_(num_devices),
        blocks_(num_blocks),
        quota_(quota),
        threshold_(staleness_threshold),
        uploads_(num_devices * num_blocks, 0),
        staleness_(num_devices * num_blocks, 0) {}

  std::size_t num_devices() const { return devices_; }
  std::size_t num_blocks() const { return blocks_; }
  std::size_t quota() const { return quota_; }
  int staleness_threshold() const { return threshold_; }

  bool uploads(std::size_t device, int block) const { return uploads_[index(device, block)] != 0; }
  int staleness(std::size_t device, int block) const { return staleness_[index(device, block)]; }

  void set(std::size_t device, int block, bool upload, int staleness) {
    uploads_[index(device, block)] = upload ? 1 : 0;
    staleness_[index(device, block)] = staleness;
  }

  /// Indicators of one device over all blocks.
  std::vector<std::uint8_t> device_uploads(std::size_t device) const {
    return {uploads_.begin() + static_cast<std::ptrdiff_t>(device * blocks_),
            uploads_.begin() + static_cast<std::ptrdiff_t>((device + 1) * blocks_)};
  }

  /// Indicators of all devices for one block.
  std::vector<std::uint8_t> block_uploads(int block) const {
    std::vector<std::uint8_t> out(devices_);
    for (std::size_t k = 0; k < devices_; ++k) out[k] = uploads_[index(k, block)];
    return out;
  }

  std::size_t scheduled_count(int block) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < devices_; ++k) n += uploads_[index(k, block)];
    return n;
  }

  void clear_uploads() { std::fill(uploads_.begin(), uploads_.end(), 0); }

  bool operator==(const ScheduleState&) const = default;

 private:
  std::size_t index(std::size_t device, int block) const { return device * blocks_ + static_cast<std::size_t>(block); }

  std::size_t devices_ = 0;
  std::size_t blocks_ = 0;
  std::size_t quota_ = 0;
  int threshold_ = 10;
  std::vector<std::uint8_t> uploads_;
  std::vector<int> staleness_;
};

/// Schedules one block. `metrics[k]` is read only for eligible devices.
/// The top min(quota, #eligible) by metric (ties to the lower device id) upload
/// and reset their counter; the other eligible devices skip and age by one;
/// then any eligible device whose counter reached the threshold is forced to
/// upload. Ineligible devices never upload.
inline ScheduleState schedule_block(ScheduleState state, int block, std::span<const double> metrics,
                                    std::span<const std::uint8_t> eligible) {
  const std::size_t K = state.num_devices();
  std::vector<std::size_t> order;
  for (std::size_t k = 0; k < K; ++k) {
    if (eligible[k]) order.push_back(k);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return metrics[a] > metrics[b]; });
  const std::size_t take = std::min(state.quota(), order.size());
  for (std::size_t k = 0; k < K; ++k) {
    if (!eligible[k]) state.set(k, block, false, 0);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t k = order[i];
    if (i < take) {
      state.set(k, block, true, 0);
    } else {
      state.set(k, block, false, state.staleness(k, block) + 1);
    }
  }
  for (std::size_t k : order) {
    if (state.staleness(k, block) >= state.staleness_threshold()) state.set(k, block, true, 0);
  }
  return state;
}

/// Per-device quantities fixed for the round before scheduling starts.
struct DeviceRoundView {
  ModalitySet owned;
  double t_down = 0.0;
  double t_cmp = 0.0;
  double rate_up = 0.0;
};

struct ScheduleInputs {
  std::vector<DeviceRoundView> devices;
  std::vector<std::uint64_t> sizes_bits;  // per block id
  Matrix self_coeff;                      // devices x blocks, softmax self-coefficient
  MetricKind metric;
};

struct ScheduleOutcome {
  ScheduleState state;
  Matrix metric;  // devices x blocks; NaN where the device does not own the block
};

inline bool owns_block(const ModalitySet& owned, int block, std::size_t num_blocks) {
  return block == static_cast<int>(num_blocks) - 1 || owned.contains(block);
}

/// Schedules blocks in ascending id so each device's upload-latency term sees
/// the blocks it was already given this round. With `random_selection`, the
/// metric is replaced by a uniform draw (random K-hat baseline).
inline ScheduleOutcome schedule_round(const ScheduleInputs& in, ScheduleState state, Rng* random_selection = nullptr) {
  const std::size_t K = state.num_devices();
  const std::size_t B = state.num_blocks();
  if (in.devices.size() != K || in.sizes_bits.size() != B) throw ShapeError("schedule_round: input sizes mismatch");
  ScheduleOutcome out;
  out.metric = Matrix(K, B, NAN);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < B; ++m) {
      if (!owns_block(in.devices[k].owned, int(m), B)) state.set(k, int(m), false, 0);
    }
  }
  for (std::size_t m = 0; m < B; ++m) {
    const int block = static_cast<int>(m);
    std::vector<double> metrics(K, 0.0);
    std::vector<std::uint8_t> eligible(K, 0);
    for (std::size_t k = 0; k < K; ++k) {
      const auto& dev = in.devices[k];
      if (!owns_block(dev.owned, block, B)) continue;
      eligible[k] = 1;
      if (random_selection != nullptr) {
        metrics[k] = uniform01(*random_selection);
      } else {
        const auto so_far = state.device_uploads(k);
        const double t_up = cumulative_upload_latency(so_far, block, in.sizes_bits, dev.rate_up);
        metrics[k] = scheduling_metric(in.metric, in.self_coeff(k, m), dev.t_down, dev.t_cmp, t_up);
      }
      out.metric(k, m) = metrics[k];
    }
    state = schedule_block(std::move(state), block, metrics, eligible);
  }
  out.state = std::move(state);
  return out;
}

/// Time for a device to upload every block it was scheduled for.
inline double upload_latency(const ScheduleState& state, std::size_t device, std::span<const std::uint64_t> sizes_bits,
                             double rate_up) {
  double bits = 0.0;
  for (std::size_t m = 0; m < state.num_blocks(); ++m) {
    if (state.uploads(device, int(m))) bits += static_cast<double>(sizes_bits[m]);
  }
  return detail::transfer_time(bits, rate_up);
}

}  // namespace fmml
