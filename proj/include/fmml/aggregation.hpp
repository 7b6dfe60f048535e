#pragma once

// Learned per-modality aggregation coefficients.
//
// For every block m the server keeps a K x K matrix of raw coefficients. Row k
// is mapped to device k's aggregation weights by a softmax over the devices
// that own the block, then by renormalizing over the devices that uploaded
// this round (the round mask). The raw rows are trained by gradient descent
// on the device's loss, chaining the aggregation Jacobian with an estimate of
// the loss gradient taken from the next round's parameter change.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fmml/common.hpp"
#include "fmml/nn.hpp"

namespace fmml {

enum class GradientEstimate {
  kDescentNormalized,  // (W_prev - w_new) / (eta * N_k)
  kRawDelta,           // w_new - W_prev
};

/// Raw coefficient matrices for all blocks plus block ownership.
class CoefficientState {
 public:
  CoefficientState() = default;

  /// Every raw entry starts at 1/K. `owned[k]` lists the modalities of
  /// device k; the shared block (id M) is owned by every device.
  CoefficientState(std::size_t num_devices, std::size_t num_modalities, const std::vector<ModalitySet>& owned,
                   double learning_rate)
      : devices_(num_devices), blocks_(num_modalities + 1), learning_rate_(learning_rate) {
    if (num_devices < 1) throw ConfigError("coefficient state needs at least one device");
    if (owned.size() != num_devices) throw ConfigError("ownership list does not match device count");
    raw_.assign(blocks_, Matrix(devices_, devices_, 1.0 / static_cast<double>(devices_)));
    participants_.assign(blocks_, std::vector<bool>(devices_, false));
    for (std::size_t k = 0; k < devices_; ++k) {
      for (int m : owned[k]) participants_.at(static_cast<std::size_t>(m))[k] = true;
      participants_[blocks_ - 1][k] = true;
    }
  }

  std::size_t num_devices() const { return devices_; }
  std::size_t num_blocks() const { return blocks_; }
  double learning_rate() const { return learning_rate_; }

  const Matrix& raw(int block) const { return raw_.at(static_cast<std::size_t>(block)); }
  Matrix& raw(int block) { return raw_.at(static_cast<std::size_t>(block)); }

  std::span<const double> raw_row(int block, std::size_t device) const {
    const Matrix& r = raw(block);
    return {r.data.data() + device * devices_, devices_};
  }

  const std::vector<bool>& participants(int block) const { return participants_.at(static_cast<std::size_t>(block)); }

  bool operator==(const CoefficientState&) const = default;

 private:
  std::size_t devices_ = 0;
  std::size_t blocks_ = 0;
  double learning_rate_ = 0.01;
  std::vector<Matrix> raw_;
  std::vector<std::vector<bool>> participants_;
};

/// Softmax of the raw row restricted to participating devices; zero elsewhere.
inline std::vector<double> softmax_row(std::span<const double> raw, const std::vector<bool>& participants) {
  if (participants.size() != raw.size()) throw ShapeError("softmax_row: participant mask length mismatch");
  double peak = -INFINITY;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (participants[i]) peak = std::max(peak, raw[i]);
  }
  if (peak == -INFINITY) throw Error("softmax_row: no participating devices");
  std::vector<double> out(raw.size(), 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (participants[i]) {
      out[i] = std::exp(raw[i] - peak);
      sum += out[i];
    }
  }
  for (double& v : out) v /= sum;
  return out;
}

/// Zeroes masked entries and renormalizes the rest to sum to one.
inline std::vector<double> masked_renormalize(std::span<const double> xi_tilde, std::span<const std::uint8_t> mask) {
  if (mask.size() != xi_tilde.size()) throw ShapeError("masked_renormalize: mask length mismatch");
  double sum = 0.0;
  for (std::size_t i = 0; i < xi_tilde.size(); ++i) {
    if (mask[i]) sum += xi_tilde[i];
  }
  if (!(sum > 0.0)) throw Error("masked_renormalize: every coefficient in the row is masked");
  std::vector<double> out(xi_tilde.size(), 0.0);
  for (std::size_t i = 0; i < xi_tilde.size(); ++i) {
    if (mask[i]) out[i] = xi_tilde[i] / sum;
  }
  return out;
}

/// Round mask for one block: a device that does not upload keeps only its own
/// diagonal entry, its row and column are otherwise zero. Every other entry
/// is one.
inline std::vector<std::uint8_t> build_round_mask(std::span<const std::uint8_t> uploads) {
  const std::size_t K = uploads.size();
  std::vector<std::uint8_t> mask(K * K, 1);
  for (std::size_t k = 0; k < K; ++k) {
    if (uploads[k]) continue;
    for (std::size_t j = 0; j < K; ++j) {
      mask[k * K + j] = 0;
      mask[j * K + k] = 0;
    }
  }
  for (std::size_t k = 0; k < K; ++k) mask[k * K + k] = 1;
  return mask;
}

/// Effective coefficients of row `device` for a block: softmax over owners,
/// then renormalized under the round mask row.
inline std::vector<double> effective_row(std::span<const double> raw, const std::vector<bool>& participants,
                                         std::span<const std::uint8_t> mask_row) {
  return masked_renormalize(softmax_row(raw, participants), mask_row);
}

/// W = sum_k' xi_k' w_k'. Entries with zero coefficient need no upload.
inline ParamBlock aggregate(std::span<const double> xi, const std::map<int, const ParamBlock*>& uploads) {
  const ParamBlock* reference = nullptr;
  for (std::size_t k = 0; k < xi.size(); ++k) {
    if (xi[k] == 0.0) continue;
    auto it = uploads.find(static_cast<int>(k));
    if (it == uploads.end() || it->second == nullptr) {
      throw Error("aggregate: positive coefficient for device " + std::to_string(k) + " without an upload");
    }
    if (reference == nullptr) {
      reference = it->second;
    } else if (!reference->same_structure(*it->second)) {
      throw ShapeError("aggregate: uploaded blocks differ in structure");
    }
  }
  if (reference == nullptr) throw Error("aggregate: coefficient row is all zero");
  ParamBlock out = *reference;
  std::fill(out.values.begin(), out.values.end(), 0.0);
  for (std::size_t k = 0; k < xi.size(); ++k) {
    if (xi[k] == 0.0) continue;
    const auto& w = uploads.at(static_cast<int>(k))->values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += xi[k] * w[i];
  }
  return out;
}

/// D(i, j) = d xi_i / d raw_j for the composed softmax + masked renormalization.
/// The composition equals a softmax over the active set (participants that
/// pass the mask), so D(i, j) = xi_i (delta_ij - xi_j) on that set, zero
/// elsewhere.
inline Matrix coeff_jacobian(std::span<const double> raw, std::span<const std::uint8_t> mask_row,
                             const std::vector<bool>& participants) {
  const std::vector<double> xi = effective_row(raw, participants, mask_row);
  const std::size_t K = raw.size();
  Matrix d(K, K);
  for (std::size_t i = 0; i < K; ++i) {
    if (xi[i] == 0.0) continue;
    for (std::size_t j = 0; j < K; ++j) {
      if (!(participants[j] && mask_row[j])) continue;
      d(i, j) = xi[i] * ((i == j ? 1.0 : 0.0) - xi[j]);
    }
  }
  return d;
}

/// Estimate of the loss gradient at the downloaded aggregate from the
/// parameter change the device made starting from it.
inline ParamBlock estimate_block_gradient(const ParamBlock& prev_aggregate, const ParamBlock& new_upload, double eta,
                                          std::size_t local_iters,
                                          GradientEstimate mode = GradientEstimate::kDescentNormalized) {
  if (!prev_aggregate.same_structure(new_upload)) throw ShapeError("estimate_block_gradient: structure mismatch");
  ParamBlock g = prev_aggregate;
  if (mode == GradientEstimate::kRawDelta) {
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = new_upload.values[i] - prev_aggregate.values[i];
    return g;
  }
  const double scale = eta * static_cast<double>(local_iters);
  if (!(scale > 0.0)) throw Error("estimate_block_gradient: eta * N_k must be positive");
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    g.values[i] = (prev_aggregate.values[i] - new_upload.values[i]) / scale;
  }
  return g;
}

/// What the server keeps from an aggregation of (device, block) to update the
/// corresponding raw row one round later.
struct GradCacheEntry {
  std::vector<double> coefficients;  // effective row used in the aggregation
  Matrix jacobian;                   // d coefficients / d raw row
  std::map<int, ParamBlock> uploads;  // blocks with positive coefficient
  ParamBlock aggregate;
};

class GradCache {
 public:
  void put(std::size_t device, int block, GradCacheEntry entry) { entries_[{device, block}] = std::move(entry); }

  const GradCacheEntry* find(std::size_t device, int block) const {
    auto it = entries_.find({device, block});
    return it == entries_.end() ? nullptr : &it->second;
  }

  bool contains(std::size_t device, int block) const { return entries_.contains({device, block}); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::map<std::pair<std::size_t, int>, GradCacheEntry> entries_;
};

/// grad_j = sum_i D(i, j) <w_i, G>: the chain rule through W = sum_i xi_i w_i.
inline std::vector<double> coeff_grad(const GradCacheEntry& cache, const ParamBlock& block_gradient) {
  const std::size_t K = cache.jacobian.rows;
  std::vector<double> inner(K, 0.0);
  for (const auto& [k, w] : cache.uploads) {
    if (!w.same_structure(block_gradient)) throw ShapeError("coeff_grad: gradient structure mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < w.values.size(); ++i) acc += w.values[i] * block_gradient.values[i];
    inner.at(static_cast<std::size_t>(k)) = acc;
  }
  std::vector<double> grad(K, 0.0);
  for (std::size_t j = 0; j < K; ++j) {
    for (std::size_t i = 0; i < K; ++i) grad[j] += cache.jacobian(i, j) * inner[i];
  }
  return grad;
}

inline std::vector<double> coeff_grad(const GradCache& cache, std::size_t device, int block,
                                      const ParamBlock& block_gradient) {
  const GradCacheEntry* entry = cache.find(device, block);
  if (entry == nullptr) {
    throw Error("coeff_grad: no cached aggregation for device " + std::to_string(device) + ", block " +
                std::to_string(block));
  }
  return coeff_grad(*entry, block_gradient);
}

struct RowGradient {
  int block = 0;
  std::size_t device = 0;
  std::vector<double> values;
};

/// raw <- raw - lr * grad on the given rows only, applied in ascending
/// (device, block) order.
inline CoefficientState coeff_update(CoefficientState state, std::vector<RowGradient> grads) {
  std::sort(grads.begin(), grads.end(), [](const RowGradient& a, const RowGradient& b) {
    return std::pair(a.device, a.block) < std::pair(b.device, b.block);
  });
  const double lr = state.learning_rate();
  for (const auto& g : grads) {
    Matrix& raw = state.raw(g.block);
    if (g.values.size() != raw.cols) throw ShapeError("coeff_update: gradient row length mismatch");
    for (std::size_t j = 0; j < raw.cols; ++j) raw(g.device, j) -= lr * g.values[j];
    for (std::size_t j = 0; j < raw.cols; ++j) {
      if (!std::isfinite(raw(g.device, j))) throw NumericError("coeff_update: non-finite raw coefficient");
    }
  }
  return state;
}

}  // namespace fmml
