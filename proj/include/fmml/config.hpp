#pragma once

// Run configuration: JSON load/save with strict key checking, validation,
// and the canned experiment recipes.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fmml/aggregation.hpp"
#include "fmml/common.hpp"
#include "fmml/data.hpp"
#include "fmml/nn.hpp"
#include "fmml/scheduler.hpp"
#include "fmml/wireless.hpp"

namespace fmml {

using json = nlohmann::ordered_json;

enum class Algorithm { kProposed, kFedAvg, kLocalOnly, kFedProx };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kProposed: return "proposed";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kLocalOnly: return "local";
    case Algorithm::kFedProx: return "fedprox";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "proposed") return Algorithm::kProposed;
  if (s == "fedavg") return Algorithm::kFedAvg;
  if (s == "local") return Algorithm::kLocalOnly;
  if (s == "fedprox") return Algorithm::kFedProx;
  throw ConfigError("unknown algorithm '" + std::string(s) + "'");
}

/// How baselines (FedAvg, FedProx) pick their K-hat uploaders.
enum class BaselineSelection { kScheduler, kRandom };

inline bool operator==(const ModalityGroup& a, const ModalityGroup& b) {
  return a.modality_count == b.modality_count && a.devices == b.devices;
}

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t rounds = 50;
  Algorithm algorithm = Algorithm::kProposed;
  double fedprox_mu = 0.01;

  std::size_t devices = 9;
  std::size_t modalities = 2;
  std::string modality_profile = "crema_d";
  std::vector<ModalityGroup> modality_groups;  // overrides the named profile when non-empty
  PartitionScheme partition = PartitionScheme::kNonIID1;

  // data
  std::size_t classes = 6;
  std::vector<std::size_t> input_dims;  // empty: 16, 24, 32, ... per modality
  double noise_std = 1.0;
  double separation = 3.0;
  std::size_t samples_per_device = 300;
  double train_fraction = 0.8;

  // model
  std::vector<std::size_t> encoder_hidden{32};
  std::size_t feature_dim = 16;
  std::vector<std::size_t> classifier_hidden{32};

  // training
  double lr = 2e-4;
  double coeff_lr = 0.01;
  std::size_t local_iters = 10;
  std::size_t batch_size = 32;
  GradientEstimate gradient_estimate = GradientEstimate::kDescentNormalized;
  bool update_coefficients = true;

  // scheduling
  std::optional<std::size_t> khat;  // unset: devices / 3
  int staleness_threshold = 10;
  MetricKind metric = MetricKind::ratio();
  BaselineSelection baseline_selection = BaselineSelection::kScheduler;

  // wireless and compute
  LinkParams link;
  double area_diameter_m = 100.0;
  double cpu_hz = 5e7;
  double cpu_hz_spread = 0.5;  // per-device cpu_hz drawn from cpu_hz * [1 - s, 1 + s]
  double flops_per_cycle = 1.0;

  // output
  std::string output_dir = "out";
  bool coefficient_snapshots = true;  // false: only the final round is written
  bool dump_gains = false;
  bool dump_datasets = false;

  std::size_t quota() const { return khat.value_or(std::max<std::size_t>(1, devices / 3)); }

  std::vector<std::size_t> resolved_input_dims() const {
    if (!input_dims.empty()) return input_dims;
    std::vector<std::size_t> dims;
    for (std::size_t m = 0; m < modalities; ++m) dims.push_back(16 + 8 * m);
    return dims;
  }

  std::vector<ModalityGroup> resolved_groups() const {
    return modality_groups.empty() ? fmml::modality_profile(modality_profile, devices, modalities) : modality_groups;
  }

  ArchSpec arch() const {
    ArchSpec a;
    a.input_dims = resolved_input_dims();
    a.encoder_hidden = encoder_hidden;
    a.feature_dim = feature_dim;
    a.classifier_hidden = classifier_hidden;
    a.num_classes = classes;
    return a;
  }

  SyntheticSpec synthetic() const {
    SyntheticSpec s;
    s.num_classes = classes;
    s.input_dims = resolved_input_dims();
    s.noise_std = noise_std;
    s.separation = separation;
    s.samples_per_device = samples_per_device;
    s.train_fraction = train_fraction;
    return s;
  }

  void validate() const {
    if (devices < 1) throw ConfigError("devices: must be >= 1");
    if (modalities < 1) throw ConfigError("modalities: must be >= 1");
    if (!input_dims.empty() && input_dims.size() != modalities) {
      throw ConfigError("data.input_dims: expected " + std::to_string(modalities) + " entries");
    }
    synthetic().validate();
    arch().validate();
    assign_modalities(devices, modalities, resolved_groups());
    if (partition == PartitionScheme::kNonIID1 && classes < 3) throw ConfigError("partition: noniid1 needs >= 3 classes");
    if (!(lr > 0.0)) throw ConfigError("training.lr: must be > 0");
    if (!(coeff_lr >= 0.0)) throw ConfigError("training.coeff_lr: must be >= 0");
    if (local_iters < 1) throw ConfigError("training.local_iters: must be >= 1");
    if (batch_size < 1) throw ConfigError("training.batch_size: must be >= 1");
    if (fedprox_mu < 0.0) throw ConfigError("fedprox_mu: must be >= 0");
    if (khat && (*khat < 1 || *khat > devices)) {
      throw ConfigError("schedule.khat: must be in 1.." + std::to_string(devices));
    }
    if (staleness_threshold < 1) throw ConfigError("schedule.staleness_threshold: must be >= 1");
    if (!(metric.alpha >= 0.0) || !std::isfinite(metric.alpha)) throw ConfigError("schedule.alpha: must be finite and >= 0");
    link.validate();
    if (!(area_diameter_m > 0.0)) throw ConfigError("link.area_diameter_m: must be > 0");
    if (!(cpu_hz > 0.0) || !(flops_per_cycle > 0.0)) throw ConfigError("compute: cpu_hz and flops_per_cycle must be > 0");
    if (!(cpu_hz_spread >= 0.0 && cpu_hz_spread < 1.0)) throw ConfigError("compute.cpu_hz_spread: must be in [0, 1)");
  }

  bool operator==(const RunConfig&) const = default;
};

inline json to_json(const RunConfig& c) {
  json profile;
  if (c.modality_groups.empty()) {
    profile = c.modality_profile;
  } else {
    profile = json::array();
    for (const auto& g : c.modality_groups) profile.push_back({{"modalities", g.modality_count}, {"devices", g.devices}});
  }
  return {
      {"seed", c.seed},
      {"rounds", c.rounds},
      {"algorithm", to_string(c.algorithm)},
      {"fedprox_mu", c.fedprox_mu},
      {"devices", c.devices},
      {"modalities", c.modalities},
      {"modality_profile", profile},
      {"partition", to_string(c.partition)},
      {"data",
       {{"classes", c.classes},
        {"input_dims", c.input_dims},
        {"noise_std", c.noise_std},
        {"separation", c.separation},
        {"samples_per_device", c.samples_per_device},
        {"train_fraction", c.train_fraction}}},
      {"model",
       {{"encoder_hidden", c.encoder_hidden},
        {"feature_dim", c.feature_dim},
        {"classifier_hidden", c.classifier_hidden}}},
      {"training",
       {{"lr", c.lr},
        {"coeff_lr", c.coeff_lr},
        {"local_iters", c.local_iters},
        {"batch_size", c.batch_size},
        {"gradient_estimate",
         c.gradient_estimate == GradientEstimate::kRawDelta ? "raw_delta" : "descent_normalized"},
        {"update_coefficients", c.update_coefficients}}},
      {"schedule",
       {{"khat", c.khat ? json(*c.khat) : json(nullptr)},
        {"staleness_threshold", c.staleness_threshold},
        {"metric", c.metric.kind == MetricKind::Kind::kLinear ? "linear" : "ratio"},
        {"alpha", c.metric.alpha},
        {"baseline_selection", c.baseline_selection == BaselineSelection::kRandom ? "random" : "scheduler"}}},
      {"link",
       {{"bandwidth_hz", c.link.bandwidth_hz},
        {"noise_psd", c.link.noise_psd},
        {"device_power_w", c.link.device_power_w},
        {"server_power_w", c.link.server_power_w},
        {"carrier_ghz", c.link.carrier_ghz},
        {"area_diameter_m", c.area_diameter_m}}},
      {"compute",
       {{"cpu_hz", c.cpu_hz}, {"cpu_hz_spread", c.cpu_hz_spread}, {"flops_per_cycle", c.flops_per_cycle}}},
      {"output",
       {{"dir", c.output_dir},
        {"coefficient_snapshots", c.coefficient_snapshots},
        {"dump_gains", c.dump_gains},
        {"dump_datasets", c.dump_datasets}}},
  };
}

namespace detail {

// Reads keys from one JSON object, rejecting anything it was not asked about.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where(key) + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(where(it.key().c_str()) + "unknown key");
    }
  }

  std::string where(const std::string& key) const {
    std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return p.empty() ? "config: " : p + ": ";
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses and validates a config; missing keys take the defaults above.
inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::ObjectReader top(j, "");
  top.get("seed", c.seed);
  top.get("rounds", c.rounds);
  std::string algo = to_string(c.algorithm);
  top.get("algorithm", algo);
  c.algorithm = parse_algorithm(algo);
  top.get("fedprox_mu", c.fedprox_mu);
  top.get("devices", c.devices);
  top.get("modalities", c.modalities);
  if (const json* p = top.sub("modality_profile")) {
    if (p->is_string()) {
      c.modality_profile = p->get<std::string>();
    } else if (p->is_array()) {
      for (const auto& g : *p) {
        ModalityGroup group;
        detail::ObjectReader r(g, "modality_profile[]");
        r.get("modalities", group.modality_count);
        r.get("devices", group.devices);
        r.finish();
        c.modality_groups.push_back(group);
      }
    } else {
      throw ConfigError("modality_profile: expected a profile name or a list of groups");
    }
  }
  std::string partition = to_string(c.partition);
  top.get("partition", partition);
  c.partition = parse_partition(partition);

  if (const json* d = top.sub("data")) {
    detail::ObjectReader r(*d, "data");
    r.get("classes", c.classes);
    r.get("input_dims", c.input_dims);
    r.get("noise_std", c.noise_std);
    r.get("separation", c.separation);
    r.get("samples_per_device", c.samples_per_device);
    r.get("train_fraction", c.train_fraction);
    r.finish();
  }
  if (const json* m = top.sub("model")) {
    detail::ObjectReader r(*m, "model");
    r.get("encoder_hidden", c.encoder_hidden);
    r.get("feature_dim", c.feature_dim);
    r.get("classifier_hidden", c.classifier_hidden);
    r.finish();
  }
  if (const json* t = top.sub("training")) {
    detail::ObjectReader r(*t, "training");
    r.get("lr", c.lr);
    r.get("coeff_lr", c.coeff_lr);
    r.get("local_iters", c.local_iters);
    r.get("batch_size", c.batch_size);
    std::string estimate = "descent_normalized";
    r.get("gradient_estimate", estimate);
    if (estimate == "descent_normalized") {
      c.gradient_estimate = GradientEstimate::kDescentNormalized;
    } else if (estimate == "raw_delta") {
      c.gradient_estimate = GradientEstimate::kRawDelta;
    } else {
      throw ConfigError("training.gradient_estimate: expected descent_normalized or raw_delta");
    }
    r.get("update_coefficients", c.update_coefficients);
    r.finish();
  }
  if (const json* s = top.sub("schedule")) {
    detail::ObjectReader r(*s, "schedule");
    if (const json* k = r.sub("khat"); k != nullptr && !k->is_null()) {
      if (!k->is_number_integer()) throw ConfigError("schedule.khat: expected an integer");
      const auto v = k->get<std::int64_t>();
      if (v < 1) throw ConfigError("schedule.khat: must be >= 1");
      c.khat = static_cast<std::size_t>(v);
    }
    r.get("staleness_threshold", c.staleness_threshold);
    std::string metric = "ratio";
    r.get("metric", metric);
    r.get("alpha", c.metric.alpha);
    if (metric == "ratio") {
      c.metric.kind = MetricKind::Kind::kRatio;
    } else if (metric == "linear") {
      c.metric.kind = MetricKind::Kind::kLinear;
    } else {
      throw ConfigError("schedule.metric: expected ratio or linear");
    }
    std::string selection = "scheduler";
    r.get("baseline_selection", selection);
    if (selection == "scheduler") {
      c.baseline_selection = BaselineSelection::kScheduler;
    } else if (selection == "random") {
      c.baseline_selection = BaselineSelection::kRandom;
    } else {
      throw ConfigError("schedule.baseline_selection: expected scheduler or random");
    }
    r.finish();
  }
  if (const json* l = top.sub("link")) {
    detail::ObjectReader r(*l, "link");
    r.get("bandwidth_hz", c.link.bandwidth_hz);
    r.get("noise_psd", c.link.noise_psd);
    r.get("device_power_w", c.link.device_power_w);
    r.get("server_power_w", c.link.server_power_w);
    r.get("carrier_ghz", c.link.carrier_ghz);
    r.get("area_diameter_m", c.area_diameter_m);
    r.finish();
  }
  if (const json* p = top.sub("compute")) {
    detail::ObjectReader r(*p, "compute");
    r.get("cpu_hz", c.cpu_hz);
    r.get("cpu_hz_spread", c.cpu_hz_spread);
    r.get("flops_per_cycle", c.flops_per_cycle);
    r.finish();
  }
  if (const json* o = top.sub("output")) {
    detail::ObjectReader r(*o, "output");
    r.get("dir", c.output_dir);
    r.get("coefficient_snapshots", c.coefficient_snapshots);
    r.get("dump_gains", c.dump_gains);
    r.get("dump_datasets", c.dump_datasets);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Desk-scale setting used by the experiment recipes: nine devices, two
/// modalities with the crema_d ownership profile, six classes, NonIID1.
inline RunConfig desk_config() {
  RunConfig c;
  c.lr = 0.01;
  c.coeff_lr = 30.0;
  c.noise_std = 6.0;
  c.samples_per_device = 150;
  c.khat = 3;
  return c;
}

struct NamedConfig {
  std::string name;
  RunConfig config;
};

inline std::vector<std::string> recipe_names() {
  return {"table1_trend", "table3_trend", "table4_trend", "table5_trend", "fig3_trend"};
}

/// Config batches mirroring the published comparisons at desk scale.
inline std::vector<NamedConfig> recipe_suite(std::string_view name, const RunConfig& base = desk_config()) {
  std::vector<NamedConfig> out;
  const std::size_t K = base.devices;
  const std::vector<std::size_t> quotas{std::max<std::size_t>(1, K / 3), std::max<std::size_t>(1, 2 * K / 3), K};
  auto with_quota = [](RunConfig c, std::size_t q) {
    c.khat = q;
    return c;
  };
  if (name == "table1_trend") {
    for (auto algo : {Algorithm::kFedAvg, Algorithm::kLocalOnly, Algorithm::kFedProx, Algorithm::kProposed}) {
      for (auto scheme : {PartitionScheme::kNonIID1, PartitionScheme::kNonIID2, PartitionScheme::kNonIID3}) {
        RunConfig c = with_quota(base, quotas[0]);
        c.algorithm = algo;
        c.partition = scheme;
        out.push_back({to_string(algo) + "_" + to_string(scheme), c});
      }
    }
  } else if (name == "table3_trend") {
    RunConfig ratio = with_quota(base, quotas[0]);
    ratio.metric = MetricKind::ratio();
    out.push_back({"ratio", ratio});
    for (double alpha : {1e-4, 1e-3, 1e-2}) {
      RunConfig c = ratio;
      c.metric = MetricKind::linear(alpha);
      char label[32];
      std::snprintf(label, sizeof label, "linear_%g", alpha);
      out.push_back({label, c});
    }
  } else if (name == "table4_trend") {
    for (auto algo : {Algorithm::kFedAvg, Algorithm::kFedProx, Algorithm::kProposed}) {
      for (std::size_t q : quotas) {
        RunConfig c = with_quota(base, q);
        c.algorithm = algo;
        out.push_back({to_string(algo) + "_khat" + std::to_string(q), c});
      }
    }
  } else if (name == "table5_trend") {
    for (auto algo : {Algorithm::kFedAvg, Algorithm::kProposed}) {
      for (std::size_t q : quotas) {
        RunConfig c = with_quota(base, q);
        c.algorithm = algo;
        out.push_back({to_string(algo) + "_khat" + std::to_string(q), c});
      }
    }
  } else if (name == "fig3_trend") {
    RunConfig c = with_quota(base, quotas[0]);
    c.coefficient_snapshots = true;
    out.push_back({"proposed_noniid1", c});
  } else {
    throw ConfigError("unknown recipe '" + std::string(name) + "'");
  }
  return out;
}

}  // namespace fmml
