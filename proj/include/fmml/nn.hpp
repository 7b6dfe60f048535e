#pragma once

// Small multi-modal network: one dense encoder per modality, features
// concatenated over all modalities (absent ones zero-filled) and fed to a
// dense classifier. Parameters are grouped into one block per modality plus
// the shared classifier block, which is the unit of upload and aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fmml/common.hpp"

namespace fmml {

struct LayerShape {
  std::size_t out = 0;
  std::size_t in = 0;
  bool operator==(const LayerShape&) const = default;
};

inline std::size_t param_count(std::span<const LayerShape> layers) {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.out * l.in + l.out;
  return n;
}

/// Flat parameters of one dense stack. Each layer stores its weight matrix
/// (out x in, row-major) followed by its bias vector.
struct ParamBlock {
  int block_id = 0;
  std::vector<LayerShape> layers;
  std::vector<double> values;

  std::size_t expected_size() const { return param_count(layers); }

  bool same_structure(const ParamBlock& other) const {
    return block_id == other.block_id && layers == other.layers &&
           values.size() == other.values.size();
  }

  void validate() const {
    if (values.size() != expected_size()) {
      throw ShapeError("block " + std::to_string(block_id) + ": " + std::to_string(values.size()) +
                       " values, layers imply " + std::to_string(expected_size()));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("block " + std::to_string(block_id) + ": non-finite value");
    }
  }

  bool operator==(const ParamBlock&) const = default;
};

struct ArchSpec {
  std::vector<std::size_t> input_dims;  // one per modality
  std::vector<std::size_t> encoder_hidden{32};
  std::size_t feature_dim = 16;
  std::vector<std::size_t> classifier_hidden{32};
  std::size_t num_classes = 6;

  std::size_t num_modalities() const { return input_dims.size(); }
  int shared_block() const { return static_cast<int>(input_dims.size()); }

  std::vector<LayerShape> encoder_layers(int modality) const {
    return stack(input_dims.at(static_cast<std::size_t>(modality)), encoder_hidden, feature_dim);
  }

  std::vector<LayerShape> classifier_layers() const {
    return stack(feature_dim * num_modalities(), classifier_hidden, num_classes);
  }

  std::vector<LayerShape> block_layers(int block) const {
    return block == shared_block() ? classifier_layers() : encoder_layers(block);
  }

  void validate() const {
    if (input_dims.empty()) throw ConfigError("arch: at least one modality required");
    auto positive = [](std::size_t v) { return v >= 1; };
    if (!std::all_of(input_dims.begin(), input_dims.end(), positive) ||
        !std::all_of(encoder_hidden.begin(), encoder_hidden.end(), positive) ||
        !std::all_of(classifier_hidden.begin(), classifier_hidden.end(), positive) ||
        feature_dim < 1 || num_classes < 1) {
      throw ConfigError("arch: all dimensions must be >= 1");
    }
  }

 private:
  static std::vector<LayerShape> stack(std::size_t in, const std::vector<std::size_t>& hidden,
                                       std::size_t out) {
    std::vector<LayerShape> layers;
    for (std::size_t h : hidden) {
      layers.push_back({h, in});
      in = h;
    }
    layers.push_back({out, in});
    return layers;
  }
};

/// Parameters held by one device (or by the server on its behalf): a block
/// for every owned modality plus the shared block, and nothing else.
struct MultiModalParams {
  std::size_t num_modalities = 0;
  ModalitySet owned;
  std::map<int, ParamBlock> blocks;

  int shared_block() const { return static_cast<int>(num_modalities); }

  const ParamBlock& block(int id) const {
    auto it = blocks.find(id);
    if (it == blocks.end()) throw ModalityMismatchError("no parameter block " + std::to_string(id));
    return it->second;
  }
  ParamBlock& block(int id) {
    return const_cast<ParamBlock&>(static_cast<const MultiModalParams&>(*this).block(id));
  }

  bool has_block(int id) const { return blocks.contains(id); }

  void validate() const {
    if (blocks.size() != owned.size() + 1 || !blocks.contains(shared_block())) {
      throw ModalityMismatchError("parameter blocks do not match owned modalities");
    }
    for (int m : owned) {
      if (m < 0 || m >= shared_block() || !blocks.contains(m)) {
        throw ModalityMismatchError("missing block for owned modality " + std::to_string(m));
      }
    }
    for (const auto& [id, b] : blocks) {
      if (b.block_id != id) throw ShapeError("block id mismatch");
      b.validate();
    }
  }

  bool same_structure(const MultiModalParams& other) const {
    if (num_modalities != other.num_modalities || owned != other.owned ||
        blocks.size() != other.blocks.size()) {
      return false;
    }
    for (const auto& [id, b] : blocks) {
      auto it = other.blocks.find(id);
      if (it == other.blocks.end() || !b.same_structure(it->second)) return false;
    }
    return true;
  }

  bool operator==(const MultiModalParams&) const = default;
};

/// Same block layout as the parameters it differentiates.
using Gradient = MultiModalParams;

/// Per-modality feature vectors of one sample, keyed by modality.
using Sample = std::map<int, std::vector<double>>;

struct LabeledSample {
  Sample features;
  int label = 0;
  bool operator==(const LabeledSample&) const = default;
};

inline ParamBlock zero_block(const ArchSpec& arch, int block) {
  ParamBlock b;
  b.block_id = block;
  b.layers = arch.block_layers(block);
  b.values.assign(b.expected_size(), 0.0);
  return b;
}

inline MultiModalParams zero_params(const ArchSpec& arch, const ModalitySet& owned) {
  MultiModalParams p;
  p.num_modalities = arch.num_modalities();
  p.owned = owned;
  for (int m : owned) p.blocks.emplace(m, zero_block(arch, m));
  p.blocks.emplace(arch.shared_block(), zero_block(arch, arch.shared_block()));
  return p;
}

/// Glorot-uniform weights, zero biases.
inline MultiModalParams random_params(const ArchSpec& arch, const ModalitySet& owned, Rng& rng) {
  MultiModalParams p = zero_params(arch, owned);
  for (auto& [id, b] : p.blocks) {
    std::size_t offset = 0;
    for (const auto& l : b.layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      for (std::size_t i = 0; i < l.out * l.in; ++i) {
        b.values[offset + i] = (2.0 * uniform01(rng) - 1.0) * limit;
      }
      offset += l.out * l.in + l.out;
    }
  }
  return p;
}

/// Copy of `full` restricted to the given modalities plus the shared block.
inline MultiModalParams restrict_to(const MultiModalParams& full, const ModalitySet& owned) {
  MultiModalParams p;
  p.num_modalities = full.num_modalities;
  p.owned = owned;
  for (int m : owned) p.blocks.emplace(m, full.block(m));
  p.blocks.emplace(full.shared_block(), full.block(full.shared_block()));
  return p;
}

namespace detail {

// Inputs to every layer of a dense stack (post-activation of the previous
// layer) plus the final linear output.
struct StackTrace {
  std::vector<Matrix> inputs;
  Matrix output;
};

inline void dense_forward(const ParamBlock& block, Matrix input, StackTrace& trace) {
  trace.inputs.clear();
  std::size_t offset = 0;
  for (std::size_t l = 0; l < block.layers.size(); ++l) {
    const auto& shape = block.layers[l];
    if (input.cols != shape.in) throw ShapeError("layer input width mismatch");
    const double* w = block.values.data() + offset;
    const double* bias = w + shape.out * shape.in;
    Matrix z(input.rows, shape.out);
    for (std::size_t r = 0; r < input.rows; ++r) {
      const double* x = &input.data[r * input.cols];
      for (std::size_t o = 0; o < shape.out; ++o) {
        const double* wrow = w + o * shape.in;
        double acc = bias[o];
        for (std::size_t i = 0; i < shape.in; ++i) acc += wrow[i] * x[i];
        z(r, o) = acc;
      }
    }
    if (l + 1 < block.layers.size()) {
      for (double& v : z.data) v = std::tanh(v);
    }
    trace.inputs.push_back(std::move(input));
    input = std::move(z);
    offset += shape.out * shape.in + shape.out;
  }
  trace.output = std::move(input);
}

// Accumulates d(loss)/d(block values) into `grad` and returns d(loss)/d(input).
inline Matrix dense_backward(const ParamBlock& block, const StackTrace& trace, Matrix dout,
                             std::vector<double>& grad) {
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& l : block.layers) {
    offsets.push_back(offset);
    offset += l.out * l.in + l.out;
  }
  for (std::size_t li = block.layers.size(); li-- > 0;) {
    const auto& shape = block.layers[li];
    if (li + 1 < block.layers.size()) {
      // Output of this layer went through tanh; it is the next layer's input.
      const Matrix& act = trace.inputs[li + 1];
      for (std::size_t i = 0; i < dout.data.size(); ++i) dout.data[i] *= 1.0 - act.data[i] * act.data[i];
    }
    const Matrix& in = trace.inputs[li];
    const double* w = block.values.data() + offsets[li];
    double* gw = grad.data() + offsets[li];
    double* gb = gw + shape.out * shape.in;
    Matrix din(in.rows, shape.in);
    for (std::size_t r = 0; r < in.rows; ++r) {
      const double* x = &in.data[r * in.cols];
      double* dx = &din.data[r * din.cols];
      for (std::size_t o = 0; o < shape.out; ++o) {
        const double d = dout(r, o);
        if (d == 0.0) continue;
        gb[o] += d;
        double* gwrow = gw + o * shape.in;
        const double* wrow = w + o * shape.in;
        for (std::size_t i = 0; i < shape.in; ++i) {
          gwrow[i] += d * x[i];
          dx[i] += d * wrow[i];
        }
      }
    }
    dout = std::move(din);
  }
  return dout;
}

struct NetworkTrace {
  std::map<int, StackTrace> encoders;
  StackTrace classifier;
};

inline void check_sample(const MultiModalParams& params, const Sample& sample) {
  if (sample.size() != params.owned.size()) {
    throw ModalityMismatchError("sample carries " + std::to_string(sample.size()) + " modalities, device owns " +
                                std::to_string(params.owned.size()));
  }
  for (const auto& [m, x] : sample) {
    if (!params.owned.contains(m)) throw ModalityMismatchError("sample carries unowned modality " + std::to_string(m));
    if (x.size() != params.block(m).layers.front().in) {
      throw ShapeError("modality " + std::to_string(m) + " has dimension " + std::to_string(x.size()));
    }
  }
}

// Scores for the selected samples (rows follow `indices`).
inline Matrix forward_batch(const MultiModalParams& params, std::span<const LabeledSample> data,
                            std::span<const std::size_t> indices, NetworkTrace& trace) {
  const std::size_t rows = indices.size();
  const ParamBlock& head = params.block(params.shared_block());
  const std::size_t head_in = head.layers.front().in;
  if (params.num_modalities == 0 || head_in % params.num_modalities != 0) {
    throw ShapeError("classifier input width not divisible by modality count");
  }
  const std::size_t feat = head_in / params.num_modalities;
  for (std::size_t r = 0; r < rows; ++r) check_sample(params, data[indices[r]].features);
  Matrix fused(rows, head_in);
  for (int m : params.owned) {
    const ParamBlock& enc = params.block(m);
    const std::size_t dim = enc.layers.front().in;
    Matrix x(rows, dim);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& v = data[indices[r]].features.at(m);
      std::copy(v.begin(), v.end(), x.data.begin() + static_cast<std::ptrdiff_t>(r * dim));
    }
    StackTrace& t = trace.encoders[m];
    dense_forward(enc, std::move(x), t);
    if (t.output.cols != feat) throw ShapeError("encoder feature width mismatch");
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < feat; ++j) fused(r, static_cast<std::size_t>(m) * feat + j) = t.output(r, j);
    }
  }
  dense_forward(head, std::move(fused), trace.classifier);
  for (double v : trace.classifier.output.data) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation in forward pass");
  }
  return trace.classifier.output;
}

}  // namespace detail

/// Class scores for one sample carrying exactly the owned modalities.
inline std::vector<double> forward(const MultiModalParams& params, const Sample& sample) {
  detail::check_sample(params, sample);
  const LabeledSample wrapped{sample, 0};
  const std::size_t index = 0;
  detail::NetworkTrace trace;
  Matrix scores = detail::forward_batch(params, std::span(&wrapped, 1), std::span(&index, 1), trace);
  return scores.data;
}

struct LossGrad {
  double loss = 0.0;
  Gradient grad;
};

/// Mean softmax cross-entropy over `data[indices]` and its exact gradient.
inline LossGrad loss_and_grad(const MultiModalParams& params, std::span<const LabeledSample> data,
                              std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("loss_and_grad: empty batch");
  detail::NetworkTrace trace;
  Matrix scores = detail::forward_batch(params, data, indices, trace);
  const std::size_t rows = scores.rows;
  const std::size_t classes = scores.cols;
  const double inv_rows = 1.0 / static_cast<double>(rows);

  LossGrad out;
  Matrix dscores(rows, classes);
  for (std::size_t r = 0; r < rows; ++r) {
    const int label = data[indices[r]].label;
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw Error("label " + std::to_string(label) + " outside 0.." + std::to_string(classes - 1));
    }
    double peak = scores(r, 0);
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, scores(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(scores(r, c) - peak);
    const double log_denom = std::log(denom);
    out.loss += (log_denom - (scores(r, static_cast<std::size_t>(label)) - peak)) * inv_rows;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(scores(r, c) - peak - log_denom);
      dscores(r, c) = (p - (static_cast<int>(c) == label ? 1.0 : 0.0)) * inv_rows;
    }
  }

  out.grad = params;
  for (auto& [id, b] : out.grad.blocks) std::fill(b.values.begin(), b.values.end(), 0.0);

  const int shared = params.shared_block();
  Matrix dfused = detail::dense_backward(params.block(shared), trace.classifier, std::move(dscores),
                                         out.grad.block(shared).values);
  const std::size_t feat = dfused.cols / params.num_modalities;
  for (int m : params.owned) {
    Matrix dfeat(rows, feat);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < feat; ++j) dfeat(r, j) = dfused(r, static_cast<std::size_t>(m) * feat + j);
    }
    detail::dense_backward(params.block(m), trace.encoders.at(m), std::move(dfeat), out.grad.block(m).values);
  }
  return out;
}

inline LossGrad loss_and_grad(const MultiModalParams& params, std::span<const LabeledSample> batch) {
  std::vector<std::size_t> all(batch.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return loss_and_grad(params, batch, all);
}

inline MultiModalParams sgd_step(const MultiModalParams& params, const Gradient& grad, double eta) {
  if (!(eta > 0.0)) throw Error("sgd_step: learning rate must be positive");
  if (!params.same_structure(grad)) throw ShapeError("sgd_step: gradient structure does not match parameters");
  MultiModalParams next = params;
  for (auto& [id, b] : next.blocks) {
    const auto& g = grad.block(id).values;
    for (std::size_t i = 0; i < b.values.size(); ++i) b.values[i] -= eta * g[i];
  }
  return next;
}

/// Index of the largest score (lowest index wins ties).
inline int predict(const MultiModalParams& params, const Sample& sample) {
  const auto scores = forward(params, sample);
  return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

constexpr std::uint64_t kBitsPerValue = 32;

inline std::uint64_t param_size_bits(const ParamBlock& block) {
  return kBitsPerValue * static_cast<std::uint64_t>(block.values.size());
}

/// FLOPs per local iteration for each block the device trains: six per
/// parameter per sample (forward multiply-add plus the two backward products).
inline std::map<int, std::uint64_t> flops_per_iteration(const ArchSpec& arch, const ModalitySet& owned,
                                                        std::size_t batch_size) {
  if (batch_size < 1) throw Error("flops_per_iteration: batch size must be >= 1");
  std::map<int, std::uint64_t> flops;
  auto count = [&](int block) {
    return 6ull * static_cast<std::uint64_t>(param_count(arch.block_layers(block))) * batch_size;
  };
  for (int m : owned) flops[m] = count(m);
  flops[arch.shared_block()] = count(arch.shared_block());
  return flops;
}

}  // namespace fmml
