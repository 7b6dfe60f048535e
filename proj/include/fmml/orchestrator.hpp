#pragma once

// Synchronous round loop: local updates, scheduling, uploads, personalized
// aggregation, coefficient learning, downloads and latency accounting, plus
// the FedAvg, FedProx and local-only baselines.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <thread>
#include <vector>

#include "fmml/aggregation.hpp"
#include "fmml/common.hpp"
#include "fmml/config.hpp"
#include "fmml/data.hpp"
#include "fmml/nn.hpp"
#include "fmml/scheduler.hpp"
#include "fmml/wireless.hpp"

namespace fmml {

struct DeviceState {
  std::size_t id = 0;
  MultiModalParams params;
  DeviceDataset data;
  ComputeParams compute;
  double distance_m = 0.0;
  std::map<int, std::uint64_t> flops;  // per iteration, per trained block
  Rng rng;                             // mini-batch order
};

struct ServerState {
  std::vector<MultiModalParams> personalized;  // W_k
  CoefficientState coeffs;
  GradCache cache;
  ScheduleState schedule;  // indicators of the latest round
  std::size_t round = 0;
};

struct DeviceRecord {
  double t_down = 0.0;
  double t_cmp = 0.0;
  double t_up = 0.0;
  std::vector<int> uploaded_blocks;
  double train_loss = 0.0;
  double accuracy = 0.0;

  double total() const { return t_down + t_cmp + t_up; }
};

/// An effective coefficient row that was used to aggregate block `block` for
/// device `device`, with the round mask row it was built under.
struct AggregationRecord {
  int block = 0;
  std::size_t device = 0;
  std::vector<double> coefficients;
  std::vector<std::uint8_t> mask_row;
};

struct RoundLog {
  std::size_t round = 0;
  std::vector<DeviceRecord> devices;
  double round_time = 0.0;
  double mean_accuracy = 0.0;
  std::vector<double> gains;
  ScheduleState schedule;
  Matrix metric;                   // devices x blocks (NaN: not eligible / not scheduled by metric)
  std::vector<Matrix> raw_coeffs;  // per block, as used this round (before the update)
  std::vector<Matrix> softmax_coeffs;
  std::vector<Matrix> effective_coeffs;  // per block; unaggregated rows are one-hot on self
  std::vector<AggregationRecord> aggregations;
};

/// Accuracy of the model on the given samples.
inline double accuracy(const MultiModalParams& params, std::span<const LabeledSample> samples) {
  if (samples.empty()) return 0.0;
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  detail::NetworkTrace trace;
  const Matrix scores = detail::forward_batch(params, samples, idx, trace);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < scores.rows; ++r) {
    const double* row = &scores.data[r * scores.cols];
    const auto best = static_cast<int>(std::max_element(row, row + scores.cols) - row);
    if (best == samples[r].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

struct PersonalizedAccuracy {
  std::vector<double> per_device;
  double mean = 0.0;
};

/// Each device's current local model on its own test split; unweighted mean.
inline PersonalizedAccuracy evaluate_personalized(const std::vector<DeviceState>& devices) {
  PersonalizedAccuracy out;
  for (const auto& d : devices) {
    if (d.data.test.empty()) throw Error("device " + std::to_string(d.id) + " has an empty test split");
    out.per_device.push_back(accuracy(d.params, d.data.test));
  }
  if (!out.per_device.empty()) {
    out.mean = std::accumulate(out.per_device.begin(), out.per_device.end(), 0.0) /
               static_cast<double>(out.per_device.size());
  }
  return out;
}

struct LocalTraining {
  double lr = 0.0;
  std::size_t iters = 1;
  std::size_t batch_size = 32;
  double prox_mu = 0.0;  // > 0 adds mu (w - w_start) to every gradient
};

/// N mini-batch SGD steps over the training split, visited in a fresh
/// shuffled order each round (wrapping around). Returns the mean batch loss.
inline double local_update_phase(DeviceState& device, const LocalTraining& t) {
  if (t.iters < 1) throw Error("local_update_phase: need at least one iteration");
  const auto& train = device.data.train;
  if (train.empty()) throw Error("device " + std::to_string(device.id) + " has no training data");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, device.rng);
  const std::size_t batch = std::min(t.batch_size, train.size());
  const MultiModalParams anchor = device.params;
  std::vector<std::size_t> idx(batch);
  std::size_t pos = 0;
  double loss_sum = 0.0;
  for (std::size_t it = 0; it < t.iters; ++it) {
    for (std::size_t b = 0; b < batch; ++b) {
      idx[b] = order[pos];
      pos = (pos + 1) % order.size();
    }
    LossGrad lg = loss_and_grad(device.params, train, idx);
    if (t.prox_mu > 0.0) {
      for (auto& [id, g] : lg.grad.blocks) {
        const auto& w = device.params.block(id).values;
        const auto& w0 = anchor.block(id).values;
        for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] += t.prox_mu * (w[i] - w0[i]);
      }
    }
    loss_sum += lg.loss;
    device.params = sgd_step(device.params, lg.grad, t.lr);
  }
  return loss_sum / static_cast<double>(t.iters);
}

inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FMML_SIM_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index must
/// touch only its own state.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

class Simulation {
 public:
  explicit Simulation(RunConfig config) : config_(std::move(config)) {
    config_.validate();
    arch_ = config_.arch();
    const std::size_t K = config_.devices;
    const std::size_t M = config_.modalities;
    owned_ = assign_modalities(K, M, config_.resolved_groups());

    Rng data_rng = make_rng(config_.seed, Stream::kData);
    SyntheticSpec spec = config_.synthetic();
    draw_class_means(spec, data_rng);

    Rng topo_rng = make_rng(config_.seed, Stream::kTopology);
    const auto distances = place_devices(K, config_.area_diameter_m, topo_rng);

    Rng init_rng = make_rng(config_.seed, Stream::kInit);
    ModalitySet all;
    for (std::size_t m = 0; m < M; ++m) all.insert(static_cast<int>(m));
    const MultiModalParams init = random_params(arch_, all, init_rng);

    for (std::size_t m = 0; m <= M; ++m) {
      sizes_bits_.push_back(kBitsPerValue * param_count(arch_.block_layers(static_cast<int>(m))));
    }

    for (std::size_t k = 0; k < K; ++k) {
      DeviceState d;
      d.id = k;
      const auto labels = partition_labels(config_.partition, config_.classes, config_.samples_per_device, data_rng);
      d.data = generate_device_data(spec, labels, owned_[k], static_cast<int>(k), data_rng);
      d.params = restrict_to(init, owned_[k]);
      d.distance_m = distances[k];
      d.compute.cpu_hz = config_.cpu_hz * (1.0 + config_.cpu_hz_spread * (2.0 * uniform01(topo_rng) - 1.0));
      d.compute.flops_per_cycle = config_.flops_per_cycle;
      d.compute.local_iters = config_.local_iters;
      d.flops = flops_per_iteration(arch_, owned_[k], std::min(config_.batch_size, d.data.train.size()));
      d.rng = make_rng(config_.seed, Stream::kBatches, k);
      server_.personalized.push_back(d.params);
      devices_.push_back(std::move(d));
    }
    server_.coeffs = CoefficientState(K, M, owned_, config_.coeff_lr);
    server_.schedule = ScheduleState(K, M + 1, config_.quota(), config_.staleness_threshold);
    threads_ = worker_threads();
  }

  const RunConfig& config() const { return config_; }
  const ArchSpec& arch() const { return arch_; }
  const std::vector<DeviceState>& devices() const { return devices_; }
  std::vector<DeviceState>& devices() { return devices_; }
  const ServerState& server() const { return server_; }
  ServerState& server() { return server_; }
  const std::vector<std::uint64_t>& block_sizes_bits() const { return sizes_bits_; }
  std::size_t num_blocks() const { return config_.modalities + 1; }

  /// Amplitude gains of every device for round t (same across algorithms
  /// and quotas for a given seed).
  std::vector<double> channel_gains(std::size_t round) const {
    Rng rng = make_rng(config_.seed, Stream::kChannel, round);
    std::vector<double> g;
    for (const auto& d : devices_) g.push_back(sample_gain(rng, d.distance_m, config_.link.carrier_ghz));
    return g;
  }

  RoundLog run_round() {
    const std::size_t K = devices_.size();
    const std::size_t B = num_blocks();
    const bool local_only = config_.algorithm == Algorithm::kLocalOnly;
    const bool proposed = config_.algorithm == Algorithm::kProposed;
    RoundLog log;
    log.round = ++server_.round;
    log.devices.resize(K);

    // (1) channel realization
    log.gains = channel_gains(log.round);
    std::vector<double> rate_down(K), rate_up(K);
    for (std::size_t k = 0; k < K; ++k) {
      rate_down[k] = link_rate(config_.link.server_power_w, log.gains[k], config_.link.bandwidth_hz, config_.link.noise_psd);
      rate_up[k] = link_rate(config_.link.device_power_w, log.gains[k], config_.link.bandwidth_hz, config_.link.noise_psd);
    }

    // (2) local updates
    LocalTraining training{config_.lr, config_.local_iters, config_.batch_size,
                           config_.algorithm == Algorithm::kFedProx ? config_.fedprox_mu : 0.0};
    parallel_for(K, threads_, [&](std::size_t k) { log.devices[k].train_loss = local_update_phase(devices_[k], training); });

    // (3) download and compute latency
    const ScheduleState previous = server_.schedule;
    for (std::size_t k = 0; k < K; ++k) {
      if (!local_only) log.devices[k].t_down = download_latency(previous.device_uploads(k), sizes_bits_, rate_down[k]);
      log.devices[k].t_cmp = compute_latency(devices_[k].compute, devices_[k].flops);
    }

    // coefficients as they stand for this round
    log.raw_coeffs.resize(B);
    log.softmax_coeffs.resize(B);
    for (std::size_t m = 0; m < B; ++m) {
      const int block = static_cast<int>(m);
      log.raw_coeffs[m] = server_.coeffs.raw(block);
      log.softmax_coeffs[m] = Matrix(K, K);
      for (std::size_t k = 0; k < K; ++k) {
        if (!server_.coeffs.participants(block)[k]) continue;
        const auto row = softmax_row(server_.coeffs.raw_row(block, k), server_.coeffs.participants(block));
        std::copy(row.begin(), row.end(), log.softmax_coeffs[m].data.begin() + static_cast<std::ptrdiff_t>(k * K));
      }
    }

    // (4) scheduling
    if (local_only) {
      server_.schedule.clear_uploads();
      log.metric = Matrix(K, B, NAN);
    } else {
      ScheduleInputs in;
      in.sizes_bits = sizes_bits_;
      in.metric = config_.metric;
      in.self_coeff = Matrix(K, B, NAN);
      for (std::size_t k = 0; k < K; ++k) {
        in.devices.push_back({owned_[k], log.devices[k].t_down, log.devices[k].t_cmp, rate_up[k]});
        for (std::size_t m = 0; m < B; ++m) in.self_coeff(k, m) = log.softmax_coeffs[m](k, k);
      }
      const bool random = !proposed && config_.baseline_selection == BaselineSelection::kRandom;
      Rng selection = make_rng(config_.seed, Stream::kSelection, log.round);
      ScheduleOutcome outcome = schedule_round(in, server_.schedule, random ? &selection : nullptr);
      server_.schedule = std::move(outcome.state);
      log.metric = std::move(outcome.metric);
    }
    log.schedule = server_.schedule;

    // (5)-(6) uploads and aggregation
    GradCache next_cache;
    std::vector<std::pair<std::pair<std::size_t, int>, ParamBlock>> aggregated;
    log.effective_coeffs.assign(B, Matrix(K, K));
    for (std::size_t m = 0; m < B; ++m) {
      const int block = static_cast<int>(m);
      for (std::size_t k = 0; k < K; ++k) log.effective_coeffs[m](k, k) = 1.0;
      if (local_only) continue;
      const auto flags = server_.schedule.block_uploads(block);
      std::map<int, const ParamBlock*> uploads;
      for (std::size_t k = 0; k < K; ++k) {
        if (flags[k]) uploads[static_cast<int>(k)] = &devices_[k].params.block(block);
      }
      if (uploads.empty()) continue;
      const auto mask = build_round_mask(flags);
      const auto& participants = server_.coeffs.participants(block);
      for (std::size_t k = 0; k < K; ++k) {
        if (!flags[k]) continue;
        const std::span<const std::uint8_t> mask_row(mask.data() + k * K, K);
        std::vector<double> row;
        ParamBlock merged;
        if (proposed) {
          const auto raw = server_.coeffs.raw_row(block, k);
          row = effective_row(raw, participants, mask_row);
          merged = aggregate(row, uploads);
          GradCacheEntry entry;
          entry.coefficients = row;
          entry.jacobian = coeff_jacobian(raw, mask_row, participants);
          for (std::size_t j = 0; j < K; ++j) {
            if (row[j] > 0.0) entry.uploads.emplace(static_cast<int>(j), *uploads.at(static_cast<int>(j)));
          }
          entry.aggregate = merged;
          next_cache.put(k, block, std::move(entry));
        } else {
          merged = mean_of(uploads);
          row.assign(K, 0.0);
          for (const auto& [j, w] : uploads) row[static_cast<std::size_t>(j)] = 1.0 / static_cast<double>(uploads.size());
        }
        check_row(row, mask_row, block, k);
        std::copy(row.begin(), row.end(), log.effective_coeffs[m].data.begin() + static_cast<std::ptrdiff_t>(k * K));
        log.aggregations.push_back({block, k, row, std::vector<std::uint8_t>(mask_row.begin(), mask_row.end())});
        aggregated.push_back({{k, block}, std::move(merged)});
      }
    }

    // (7) coefficient update from last round's cache and this round's uploads
    if (proposed && config_.update_coefficients) {
      std::vector<RowGradient> grads;
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t m = 0; m < B; ++m) {
          const int block = static_cast<int>(m);
          const GradCacheEntry* entry = server_.cache.find(k, block);
          if (entry == nullptr || !server_.schedule.uploads(k, block)) continue;
          const ParamBlock g = estimate_block_gradient(entry->aggregate, devices_[k].params.block(block), config_.lr,
                                                       config_.local_iters, config_.gradient_estimate);
          grads.push_back({block, k, coeff_grad(*entry, g)});
        }
      }
      server_.coeffs = coeff_update(std::move(server_.coeffs), std::move(grads));
    }
    // (8) cache refresh
    server_.cache = std::move(next_cache);

    // (9) server update and downloads
    for (auto& [key, merged] : aggregated) {
      const auto [k, block] = key;
      server_.personalized[k].block(block) = merged;
      devices_[k].params.block(block) = std::move(merged);
    }

    // (10) accounting and evaluation
    for (std::size_t k = 0; k < K; ++k) {
      auto& rec = log.devices[k];
      if (!local_only) rec.t_up = upload_latency(server_.schedule, k, sizes_bits_, rate_up[k]);
      for (std::size_t m = 0; m < B; ++m) {
        if (server_.schedule.uploads(k, static_cast<int>(m))) rec.uploaded_blocks.push_back(static_cast<int>(m));
      }
      log.round_time = std::max(log.round_time, rec.total());
    }
    const auto acc = evaluate_personalized(devices_);
    for (std::size_t k = 0; k < K; ++k) log.devices[k].accuracy = acc.per_device[k];
    log.mean_accuracy = acc.mean;
    return log;
  }

 private:
  static ParamBlock mean_of(const std::map<int, const ParamBlock*>& uploads) {
    ParamBlock out = *uploads.begin()->second;
    std::fill(out.values.begin(), out.values.end(), 0.0);
    for (const auto& [k, w] : uploads) {
      if (!w->same_structure(out)) throw ShapeError("fedavg: uploaded blocks differ in structure");
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += w->values[i];
    }
    const double n = static_cast<double>(uploads.size());
    for (double& v : out.values) v /= n;
    return out;
  }

  static void check_row(const std::vector<double>& row, std::span<const std::uint8_t> mask_row, int block,
                        std::size_t device) {
    double sum = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] < 0.0 || (!mask_row[j] && row[j] != 0.0)) {
        throw NumericError("illegal coefficient for device " + std::to_string(device) + ", block " +
                           std::to_string(block));
      }
      sum += row[j];
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw NumericError("coefficient row of device " + std::to_string(device) + ", block " + std::to_string(block) +
                         " sums to " + std::to_string(sum));
    }
  }

  RunConfig config_;
  ArchSpec arch_;
  std::vector<ModalitySet> owned_;
  std::vector<std::uint64_t> sizes_bits_;
  std::vector<DeviceState> devices_;
  ServerState server_;
  std::size_t threads_ = 1;
};

/// Sum over rounds of the slowest device's download + compute + upload time.
inline double simulated_training_time(const std::vector<RoundLog>& logs) {
  double total = 0.0;
  for (const auto& log : logs) {
    double slowest = 0.0;
    for (const auto& d : log.devices) slowest = std::max(slowest, d.total());
    total += slowest;
  }
  return total;
}

struct RunSummary {
  std::uint64_t seed = 0;
  Algorithm algorithm = Algorithm::kProposed;
  std::size_t rounds = 0;
  double mean_accuracy = 0.0;
  std::vector<double> device_accuracy;
  double total_time_s = 0.0;
};

struct TrainingResult {
  std::vector<RoundLog> logs;
  RunSummary summary;
  std::vector<DeviceState> devices;
  ServerState server;
};

template <typename Observer>
TrainingResult run_training(const RunConfig& config, Observer&& on_round) {
  Simulation sim(config);
  TrainingResult result;
  for (std::size_t t = 0; t < config.rounds; ++t) {
    result.logs.push_back(sim.run_round());
    on_round(sim, result.logs.back());
  }
  const auto acc = evaluate_personalized(sim.devices());
  result.summary = {config.seed, config.algorithm, config.rounds, acc.mean, acc.per_device,
                    simulated_training_time(result.logs)};
  result.devices = sim.devices();
  result.server = sim.server();
  return result;
}

inline TrainingResult run_training(const RunConfig& config) {
  return run_training(config, [](const Simulation&, const RoundLog&) {});
}

}  // namespace fmml
