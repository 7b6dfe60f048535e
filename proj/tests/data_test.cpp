#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include <gtest/gtest.h>

#include "fmml/data.hpp"
#include "test_oracles.hpp"

using namespace fmml;

namespace {

std::map<int, std::size_t> histogram(const std::vector<int>& labels) {
  std::map<int, std::size_t> h;
  for (int l : labels) ++h[l];
  return h;
}

}  // namespace

TEST(Partition, NonIID1HasExactlyThreeClassesEachPresent) {
  Rng rng = make_rng(1, Stream::kData);
  const auto labels = partition_labels(PartitionScheme::kNonIID1, 6, 300, rng);
  ASSERT_EQ(labels.size(), 300u);
  const auto h = histogram(labels);
  EXPECT_EQ(h.size(), 3u);
  for (const auto& [label, n] : h) {
    EXPECT_GE(label, 0);
    EXPECT_LT(label, 6);
    EXPECT_GT(n, 0u);
  }
}

TEST(Partition, NonIID1WithThreeSamplesUsesAllThree) {
  Rng rng = make_rng(2, Stream::kData);
  const auto h = histogram(partition_labels(PartitionScheme::kNonIID1, 6, 3, rng));
  EXPECT_EQ(h.size(), 3u);
}

TEST(Partition, NonIID2DominantIsExactlyHalf) {
  Rng rng = make_rng(3, Stream::kData);
  const auto h = histogram(partition_labels(PartitionScheme::kNonIID2, 6, 100, rng));
  std::size_t top = 0;
  for (const auto& [label, n] : h) top = std::max(top, n);
  EXPECT_EQ(top, 50u);
}

TEST(Partition, NonIID3DominantIsThirtyPercentRoundedUp) {
  Rng rng = make_rng(4, Stream::kData);
  const auto h = histogram(partition_labels(PartitionScheme::kNonIID3, 6, 101, rng));
  std::size_t top = 0;
  for (const auto& [label, n] : h) top = std::max(top, n);
  EXPECT_EQ(top, 31u);  // ceil(30.3)
}

// Property: for every scheme, size, class count and seed the multiset has the
// requested size, valid labels, and the scheme's support or dominance rule.
TEST(Partition, PropertyOverRandomInputs) {
  Rng meta = make_rng(5, Stream::kData);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t C = 3 + uniform_index(meta, 8);
    const std::size_t D = 3 + uniform_index(meta, 400);
    const auto scheme = static_cast<PartitionScheme>(uniform_index(meta, 3));
    Rng rng = make_rng(static_cast<std::uint64_t>(trial), Stream::kData);
    const auto labels = partition_labels(scheme, C, D, rng);
    ASSERT_EQ(labels.size(), D);
    const auto h = histogram(labels);
    for (const auto& [l, n] : h) {
      ASSERT_GE(l, 0);
      ASSERT_LT(l, static_cast<int>(C));
    }
    if (scheme == PartitionScheme::kNonIID1) {
      EXPECT_EQ(h.size(), 3u);
    } else {
      std::size_t top = 0;
      for (const auto& [l, n] : h) top = std::max(top, n);
      const double frac = scheme == PartitionScheme::kNonIID2 ? 0.5 : 0.3;
      EXPECT_GE(top, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(D) - 1e-9)));
    }
  }
}

TEST(Partition, SameSeedSameLabels) {
  Rng a = make_rng(9, Stream::kData);
  Rng b = make_rng(9, Stream::kData);
  EXPECT_EQ(partition_labels(PartitionScheme::kNonIID2, 6, 200, a),
            partition_labels(PartitionScheme::kNonIID2, 6, 200, b));
}

TEST(Partition, NonIID1NeedsThreeClasses) {
  Rng rng = make_rng(1, Stream::kData);
  EXPECT_THROW(partition_labels(PartitionScheme::kNonIID1, 2, 10, rng), ConfigError);
}

TEST(Partition, ParseNames) {
  EXPECT_EQ(parse_partition("noniid3"), PartitionScheme::kNonIID3);
  EXPECT_EQ(to_string(PartitionScheme::kNonIID1), "noniid1");
  EXPECT_THROW(parse_partition("iid"), ConfigError);
}

TEST(Modalities, CremaProfileThirdOwnBoth) {
  const auto sets = assign_modalities(9, 2, modality_profile("crema_d", 9, 2));
  ASSERT_EQ(sets.size(), 9u);
  std::size_t both = 0;
  std::size_t owners[2] = {0, 0};
  for (const auto& s : sets) {
    if (s.size() == 2) ++both;
    for (int m : s) ++owners[m];
  }
  EXPECT_EQ(both, 3u);
  EXPECT_EQ(owners[0], 6u);
  EXPECT_EQ(owners[1], 6u);
  EXPECT_EQ(sets[3], ModalitySet{0});
  EXPECT_EQ(sets[4], ModalitySet{1});
}

TEST(Modalities, MoseiProfileThirds) {
  const auto sets = assign_modalities(9, 3, modality_profile("mosei", 9, 3));
  std::map<std::size_t, std::size_t> by_size;
  for (const auto& s : sets) ++by_size[s.size()];
  EXPECT_EQ(by_size[3], 3u);
  EXPECT_EQ(by_size[2], 3u);
  EXPECT_EQ(by_size[1], 3u);
}

TEST(Modalities, FullProfile) {
  for (const auto& s : assign_modalities(4, 3, modality_profile("full", 4, 3))) EXPECT_EQ(s.size(), 3u);
}

TEST(Modalities, RejectsBadProfiles) {
  EXPECT_THROW(assign_modalities(9, 2, {{2, 3}, {1, 5}}), ConfigError);  // covers 8 devices
  EXPECT_THROW(assign_modalities(2, 3, {{1, 2}}), ConfigError);          // modality 2 unowned
  EXPECT_THROW(assign_modalities(3, 2, {{3, 3}}), ConfigError);
  EXPECT_THROW(modality_profile("crema_d", 9, 3), ConfigError);
  EXPECT_THROW(modality_profile("unknown", 9, 2), ConfigError);
}

TEST(Generate, ShapesAndSplit) {
  SyntheticSpec spec;
  spec.input_dims = {4, 2};
  Rng rng = make_rng(7, Stream::kData);
  draw_class_means(spec, rng);
  const auto labels = partition_labels(PartitionScheme::kNonIID1, 6, 50, rng);
  const auto ds = generate_device_data(spec, labels, {1}, 3, rng);
  EXPECT_EQ(ds.device, 3);
  EXPECT_EQ(ds.train.size(), 40u);
  EXPECT_EQ(ds.test.size(), 10u);
  for (const auto& s : ds.train) {
    ASSERT_EQ(s.features.size(), 1u);
    EXPECT_EQ(s.features.at(1).size(), 2u);
  }
}

TEST(Generate, NoNoiseIsExactlyTheMean) {
  SyntheticSpec spec;
  spec.input_dims = {3};
  spec.noise_std = 1e-300;
  Rng rng = make_rng(8, Stream::kData);
  draw_class_means(spec, rng);
  const auto ds = generate_device_data(spec, {0, 1, 2, 3, 4}, {0}, 0, rng);
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      const auto& mean = spec.class_means[static_cast<std::size_t>(s.label)][0];
      for (std::size_t j = 0; j < mean.size(); ++j) EXPECT_NEAR(s.features.at(0)[j], mean[j], 1e-250);
    }
  }
}

// Well separated clusters are classified almost perfectly by the class means.
TEST(Generate, SeparatedClustersAreNearestCentroidSeparable) {
  SyntheticSpec spec;
  spec.input_dims = {16, 24};
  spec.noise_std = 1.0;
  spec.separation = 3.0;
  Rng rng = make_rng(10, Stream::kData);
  draw_class_means(spec, rng);
  const auto labels = partition_labels(PartitionScheme::kNonIID2, 6, 500, rng);
  const auto ds = generate_device_data(spec, labels, {0, 1}, 0, rng);
  std::size_t correct = 0;
  for (const auto& s : ds.train) correct += oracle::nearest_centroid(spec.class_means, s.features) == s.label;
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(ds.train.size()), 0.99);
}

TEST(Generate, EmpiricalNoiseMatchesSpec) {
  SyntheticSpec spec;
  spec.input_dims = {1};
  spec.num_classes = 2;
  spec.noise_std = 2.5;
  Rng rng = make_rng(12, Stream::kData);
  draw_class_means(spec, rng);
  const std::vector<int> labels(20000, 1);
  const auto ds = generate_device_data(spec, labels, {0}, 0, rng);
  double sum = 0.0, sq = 0.0;
  for (const auto& s : ds.train) {
    const double d = s.features.at(0)[0] - spec.class_means[1][0][0];
    sum += d;
    sq += d * d;
  }
  const double n = static_cast<double>(ds.train.size());
  EXPECT_NEAR(sum / n, 0.0, 0.05);
  EXPECT_NEAR(std::sqrt(sq / n), 2.5, 0.05);
}

TEST(Generate, RequiresMeans) {
  SyntheticSpec spec;
  Rng rng = make_rng(1, Stream::kData);
  EXPECT_THROW(generate_device_data(spec, {0}, {0}, 0, rng), ConfigError);
}

TEST(Spec, Validation) {
  SyntheticSpec spec;
  EXPECT_NO_THROW(spec.validate());
  spec.train_fraction = 1.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = {};
  spec.noise_std = 0.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = {};
  spec.input_dims = {};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(DatasetCsv, RoundTrip) {
  SyntheticSpec spec;
  spec.input_dims = {3, 2};
  Rng rng = make_rng(13, Stream::kData);
  draw_class_means(spec, rng);
  std::vector<DeviceDataset> sets;
  sets.push_back(generate_device_data(spec, {0, 1, 2, 1, 0}, {0, 1}, 0, rng));
  sets.push_back(generate_device_data(spec, {3, 3, 4, 5, 5}, {1}, 1, rng));
  const auto path = (std::filesystem::temp_directory_path() / "fmml_datasets_test.csv").string();
  write_datasets_csv(path, sets, spec.input_dims);
  const auto back = read_datasets_csv(path, spec.input_dims);
  std::filesystem::remove(path);
  EXPECT_EQ(back, sets);
}

TEST(Modalities, LargerMoseiShapeAndSingleDevice) {
  const auto sets = assign_modalities(18, 3, modality_profile("mosei", 18, 3));
  std::map<std::size_t, std::size_t> by_size;
  for (const auto& s : sets) ++by_size[s.size()];
  EXPECT_EQ(by_size[3], 6u);
  EXPECT_EQ(by_size[2], 6u);
  EXPECT_EQ(by_size[1], 6u);
  EXPECT_EQ(assign_modalities(1, 1, modality_profile("full", 1, 1)), std::vector<ModalitySet>{{0}});
}

TEST(Generate, SamplesCarryExactlyTheOwnedModalities) {
  SyntheticSpec spec;
  spec.input_dims = {2, 3, 4};
  Rng rng = make_rng(14, Stream::kData);
  draw_class_means(spec, rng);
  const auto ds = generate_device_data(spec, partition_labels(PartitionScheme::kNonIID3, 6, 31, rng), {0, 2}, 0, rng);
  EXPECT_EQ(ds.train.size() + ds.test.size(), 31u);
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      ASSERT_EQ(s.features.size(), 2u);
      EXPECT_EQ(s.features.at(0).size(), 2u);
      EXPECT_EQ(s.features.at(2).size(), 4u);
    }
  }
}
