#pragma once

// Synthetic multi-modal classification data: Gaussian class clusters per
// modality, label-skew partitions and heterogeneous modality assignment.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fmml/common.hpp"
#include "fmml/nn.hpp"

namespace fmml {

enum class PartitionScheme { kNonIID1, kNonIID2, kNonIID3 };

inline std::string to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::kNonIID1: return "noniid1";
    case PartitionScheme::kNonIID2: return "noniid2";
    case PartitionScheme::kNonIID3: return "noniid3";
  }
  return "?";
}

inline PartitionScheme parse_partition(std::string_view name) {
  if (name == "noniid1") return PartitionScheme::kNonIID1;
  if (name == "noniid2") return PartitionScheme::kNonIID2;
  if (name == "noniid3") return PartitionScheme::kNonIID3;
  throw ConfigError("unknown partition scheme '" + std::string(name) + "'");
}

struct SyntheticSpec {
  std::size_t num_classes = 6;
  std::vector<std::size_t> input_dims{16, 24};
  double noise_std = 1.0;
  double separation = 3.0;
  std::size_t samples_per_device = 300;
  double train_fraction = 0.8;
  // [class][modality] -> mean vector; filled by draw_class_means.
  std::vector<std::vector<std::vector<double>>> class_means;

  std::size_t num_modalities() const { return input_dims.size(); }

  void validate() const {
    if (num_classes < 2) throw ConfigError("data.classes must be >= 2");
    if (input_dims.empty()) throw ConfigError("data.input_dims must name at least one modality");
    if (std::any_of(input_dims.begin(), input_dims.end(), [](std::size_t d) { return d < 1; })) {
      throw ConfigError("data.input_dims entries must be >= 1");
    }
    if (!(noise_std > 0.0)) throw ConfigError("data.noise_std must be > 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("data.train_fraction must be in (0, 1)");
    if (samples_per_device < 2) throw ConfigError("data.samples_per_device must be >= 2");
  }
};

/// Class means from a unit Gaussian scaled by the separation factor.
inline void draw_class_means(SyntheticSpec& spec, Rng& rng) {
  spec.class_means.assign(spec.num_classes, {});
  for (auto& per_class : spec.class_means) {
    for (std::size_t d : spec.input_dims) {
      std::vector<double> mean(d);
      for (double& v : mean) v = spec.separation * standard_normal(rng);
      per_class.push_back(std::move(mean));
    }
  }
}

struct DeviceDataset {
  int device = 0;
  ModalitySet owned;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
  bool operator==(const DeviceDataset&) const = default;
};

/// Groups of devices by how many modalities each owns.
struct ModalityGroup {
  std::size_t modality_count = 0;
  std::size_t devices = 0;
};

/// Named profiles: "crema_d" (a third own both of two modalities, the rest
/// one), "mosei" (thirds owning three, two and one of three modalities) and
/// "full" (every device owns everything).
inline std::vector<ModalityGroup> modality_profile(std::string_view name, std::size_t K, std::size_t M) {
  if (name == "full") return {{M, K}};
  if (name == "crema_d") {
    if (M != 2) throw ConfigError("modality profile crema_d requires 2 modalities");
    return {{2, K / 3}, {1, K - K / 3}};
  }
  if (name == "mosei") {
    if (M != 3) throw ConfigError("modality profile mosei requires 3 modalities");
    return {{3, K / 3}, {2, K / 3}, {1, K - 2 * (K / 3)}};
  }
  throw ConfigError("unknown modality profile '" + std::string(name) + "'");
}

namespace detail {

inline void combinations(int M, int r, int start, std::vector<int>& cur, std::vector<ModalitySet>& out) {
  if (static_cast<int>(cur.size()) == r) {
    out.emplace_back(cur.begin(), cur.end());
    return;
  }
  for (int m = start; m < M; ++m) {
    cur.push_back(m);
    combinations(M, r, m + 1, cur, out);
    cur.pop_back();
  }
}

}  // namespace detail

/// Devices are assigned group by group; within a group of size-r devices the
/// r-subsets of modalities are handed out cyclically in lexicographic order.
inline std::vector<ModalitySet> assign_modalities(std::size_t K, std::size_t M,
                                                  const std::vector<ModalityGroup>& groups) {
  if (K < 1 || M < 1) throw ConfigError("assign_modalities: need at least one device and one modality");
  std::size_t total = 0;
  for (const auto& g : groups) {
    if (g.modality_count < 1 || g.modality_count > M) {
      throw ConfigError("modality profile: group modality count " + std::to_string(g.modality_count) +
                        " outside 1.." + std::to_string(M));
    }
    total += g.devices;
  }
  if (total != K) {
    throw ConfigError("modality profile covers " + std::to_string(total) + " devices, expected " + std::to_string(K));
  }
  std::vector<ModalitySet> sets;
  for (const auto& g : groups) {
    std::vector<ModalitySet> combos;
    std::vector<int> cur;
    detail::combinations(static_cast<int>(M), static_cast<int>(g.modality_count), 0, cur, combos);
    for (std::size_t i = 0; i < g.devices; ++i) sets.push_back(combos[i % combos.size()]);
  }
  for (std::size_t m = 0; m < M; ++m) {
    bool owned = std::any_of(sets.begin(), sets.end(), [&](const ModalitySet& s) { return s.contains(int(m)); });
    if (!owned) throw ConfigError("modality profile leaves modality " + std::to_string(m) + " without an owner");
  }
  return sets;
}

inline double dominant_fraction(PartitionScheme scheme) {
  return scheme == PartitionScheme::kNonIID2 ? 0.5 : 0.3;
}

/// Label multiset for one device.
///  NonIID1: uniform over a random 3-subset of the classes, every one present.
///  NonIID2/3: ceil(50% / 30%) from one random dominant class, the rest uniform
///  over the remaining classes.
inline std::vector<int> partition_labels(PartitionScheme scheme, std::size_t C, std::size_t D, Rng& rng) {
  std::vector<int> labels;
  labels.reserve(D);
  if (scheme == PartitionScheme::kNonIID1) {
    if (C < 3) throw ConfigError("NonIID1 requires at least 3 classes");
    std::vector<int> classes(C);
    for (std::size_t c = 0; c < C; ++c) classes[c] = static_cast<int>(c);
    shuffle(classes, rng);
    classes.resize(3);
    std::sort(classes.begin(), classes.end());
    for (std::size_t i = 0; i < D; ++i) {
      labels.push_back(i < classes.size() ? classes[i] : classes[uniform_index(rng, classes.size())]);
    }
  } else {
    const int dominant = static_cast<int>(uniform_index(rng, C));
    const auto n_dom = static_cast<std::size_t>(std::ceil(dominant_fraction(scheme) * static_cast<double>(D) - 1e-9));
    for (std::size_t i = 0; i < D; ++i) {
      if (i < n_dom) {
        labels.push_back(dominant);
      } else {
        int other = static_cast<int>(uniform_index(rng, C - 1));
        labels.push_back(other >= dominant ? other + 1 : other);
      }
    }
  }
  shuffle(labels, rng);
  return labels;
}

/// x^m = mean[y][m] + N(0, noise_std^2) per coordinate; the first
/// round(train_fraction * n) samples form the training split.
inline DeviceDataset generate_device_data(const SyntheticSpec& spec, const std::vector<int>& labels,
                                          const ModalitySet& owned, int device, Rng& rng) {
  if (spec.class_means.size() != spec.num_classes) throw ConfigError("synthetic spec has no class means");
  DeviceDataset ds;
  ds.device = device;
  ds.owned = owned;
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(labels.size())));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    LabeledSample s;
    s.label = labels[i];
    for (int m : owned) {
      const auto& mean = spec.class_means.at(static_cast<std::size_t>(labels[i])).at(static_cast<std::size_t>(m));
      std::vector<double> x(mean.size());
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = mean[j] + spec.noise_std * standard_normal(rng);
      s.features.emplace(m, std::move(x));
    }
    (i < n_train ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

/// One row per sample: device, split, label, then x<m>_<j> columns for every
/// modality (empty cells for modalities the device lacks).
inline void write_datasets_csv(const std::string& path, const std::vector<DeviceDataset>& datasets,
                               const std::vector<std::size_t>& input_dims) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path);
  out.precision(17);
  out << "device,split,label";
  for (std::size_t m = 0; m < input_dims.size(); ++m) {
    for (std::size_t j = 0; j < input_dims[m]; ++j) out << ",x" << m << '_' << j;
  }
  out << '\n';
  for (const auto& ds : datasets) {
    for (int split = 0; split < 2; ++split) {
      for (const auto& s : split == 0 ? ds.train : ds.test) {
        out << ds.device << ',' << (split == 0 ? "train" : "test") << ',' << s.label;
        for (std::size_t m = 0; m < input_dims.size(); ++m) {
          auto it = s.features.find(static_cast<int>(m));
          for (std::size_t j = 0; j < input_dims[m]; ++j) {
            out << ',';
            if (it != s.features.end()) out << it->second[j];
          }
        }
        out << '\n';
      }
    }
  }
}

inline std::vector<DeviceDataset> read_datasets_csv(const std::string& path,
                                                    const std::vector<std::size_t>& input_dims) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::map<int, DeviceDataset> by_device;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    std::size_t expected = 3;
    for (std::size_t d : input_dims) expected += d;
    if (cells.size() != expected) throw ShapeError("dataset csv row has " + std::to_string(cells.size()) + " cells");
    const int device = std::stoi(cells[0]);
    LabeledSample s;
    s.label = std::stoi(cells[2]);
    std::size_t col = 3;
    ModalitySet owned;
    for (std::size_t m = 0; m < input_dims.size(); ++m) {
      if (!cells[col].empty()) {
        std::vector<double> x(input_dims[m]);
        for (std::size_t j = 0; j < x.size(); ++j) x[j] = std::stod(cells[col + j]);
        s.features.emplace(static_cast<int>(m), std::move(x));
        owned.insert(static_cast<int>(m));
      }
      col += input_dims[m];
    }
    auto& ds = by_device[device];
    ds.device = device;
    ds.owned = owned;
    (cells[1] == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  std::vector<DeviceDataset> out;
  for (auto& [id, ds] : by_device) out.push_back(std::move(ds));
  return out;
}

}  // namespace fmml
