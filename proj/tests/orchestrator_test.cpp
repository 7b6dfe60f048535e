#include <cmath>
#include <stdexcept>

#include <gtest/gtest.h>

#include "fmml/orchestrator.hpp"

using namespace fmml;

namespace {

RunConfig small_config(Algorithm algo = Algorithm::kProposed) {
  RunConfig c;
  c.algorithm = algo;
  c.devices = 6;
  c.samples_per_device = 60;
  c.input_dims = {6, 4};
  c.encoder_hidden = {8};
  c.feature_dim = 4;
  c.classifier_hidden = {8};
  c.noise_std = 3.0;
  c.lr = 0.05;
  c.coeff_lr = 5.0;
  c.local_iters = 3;
  c.batch_size = 16;
  c.khat = 2;
  c.staleness_threshold = 4;
  c.rounds = 6;
  return c;
}

double full_loss(const DeviceState& d) { return loss_and_grad(d.params, d.data.train).loss; }

}  // namespace

TEST(LocalUpdate, OneFullBatchStepIsOneSgdStep) {
  Simulation sim(small_config());
  DeviceState d = sim.devices()[0];
  const auto expected = sgd_step(d.params, loss_and_grad(d.params, d.data.train).grad, 0.05);
  local_update_phase(d, {0.05, 1, d.data.train.size(), 0.0});
  for (const auto& [id, b] : expected.blocks) {
    for (std::size_t i = 0; i < b.values.size(); ++i) EXPECT_NEAR(d.params.block(id).values[i], b.values[i], 1e-15);
  }
}

TEST(LocalUpdate, SmallStepFullBatchLossDecreases) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    RunConfig c = small_config();
    c.seed = seed;
    Simulation sim(c);
    for (auto d : sim.devices()) {
      double prev = full_loss(d);
      for (int n = 0; n < 5; ++n) {
        local_update_phase(d, {1e-3, 1, d.data.train.size(), 0.0});
        const double now = full_loss(d);
        EXPECT_LE(now, prev);
        prev = now;
      }
    }
  }
}

TEST(LocalUpdate, ProximalTermPullsTowardStart) {
  Simulation sim(small_config());
  DeviceState plain = sim.devices()[1];
  DeviceState prox = plain;
  const MultiModalParams start = plain.params;
  local_update_phase(plain, {0.05, 8, 16, 0.0});
  local_update_phase(prox, {0.05, 8, 16, 5.0});
  auto dist = [&](const MultiModalParams& p) {
    double s = 0.0;
    for (const auto& [id, b] : p.blocks) {
      for (std::size_t i = 0; i < b.values.size(); ++i) s += std::pow(b.values[i] - start.block(id).values[i], 2);
    }
    return s;
  };
  EXPECT_LT(dist(prox.params), dist(plain.params));
}

TEST(LocalUpdate, RejectsZeroIterations) {
  Simulation sim(small_config());
  DeviceState d = sim.devices()[0];
  EXPECT_THROW(local_update_phase(d, {0.05, 0, 16, 0.0}), Error);
}

TEST(Simulation, SharedInitialization) {
  Simulation sim(small_config());
  const auto& devs = sim.devices();
  const int shared = static_cast<int>(sim.num_blocks()) - 1;
  for (const auto& d : devs) {
    EXPECT_EQ(d.params.block(shared), devs[0].params.block(shared));
    EXPECT_NO_THROW(d.params.validate());
    EXPECT_EQ(d.params.owned, d.data.owned);
  }
}

TEST(Simulation, LocalOnlyNeverTouchesServer) {
  Simulation sim(small_config(Algorithm::kLocalOnly));
  const auto before = sim.server();
  for (int t = 0; t < 3; ++t) {
    const auto log = sim.run_round();
    EXPECT_TRUE(log.aggregations.empty());
    for (const auto& d : log.devices) {
      EXPECT_EQ(d.t_down, 0.0);
      EXPECT_EQ(d.t_up, 0.0);
      EXPECT_GT(d.t_cmp, 0.0);
    }
  }
  EXPECT_EQ(sim.server().personalized, before.personalized);
  EXPECT_EQ(sim.server().coeffs, before.coeffs);
}

TEST(Simulation, FedAvgFullQuotaSyncsSharedBlock) {
  RunConfig c = small_config(Algorithm::kFedAvg);
  c.khat = c.devices;
  Simulation sim(c);
  sim.run_round();
  const int shared = static_cast<int>(sim.num_blocks()) - 1;
  for (const auto& d : sim.devices()) EXPECT_EQ(d.params.block(shared), sim.devices()[0].params.block(shared));
}

TEST(Simulation, FrozenUniformProposedMatchesFedAvg) {
  for (std::uint64_t seed : {0u, 1u}) {
    RunConfig c = small_config();
    c.seed = seed;
    c.khat = c.devices;
    c.update_coefficients = false;
    RunConfig f = c;
    f.algorithm = Algorithm::kFedAvg;
    Simulation a(c), b(f);
    for (int t = 0; t < 3; ++t) {
      a.run_round();
      b.run_round();
      for (std::size_t k = 0; k < a.devices().size(); ++k) {
        for (const auto& [id, blk] : a.devices()[k].params.blocks) {
          const auto& other = b.devices()[k].params.block(id).values;
          for (std::size_t i = 0; i < other.size(); ++i) ASSERT_NEAR(blk.values[i], other[i], 1e-12);
        }
      }
    }
  }
}

// Server/device consistency after downloads, freeze of unscheduled server
// blocks, cache bookkeeping and the coefficient update eligibility rule.
TEST(Simulation, RoundBookkeeping) {
  RunConfig c = small_config();
  c.devices = 9;
  c.khat = 1;
  Simulation sim(c);
  ScheduleState prev_schedule = sim.server().schedule;
  for (int t = 0; t < 8; ++t) {
    const auto before = sim.server();
    const auto log = sim.run_round();
    const auto& server = sim.server();
    const std::size_t K = sim.devices().size();
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t m = 0; m < sim.num_blocks(); ++m) {
        const int block = static_cast<int>(m);
        if (!server.personalized[k].has_block(block)) continue;
        const bool up = server.schedule.uploads(k, block);
        if (up) {
          EXPECT_EQ(server.personalized[k].block(block), sim.devices()[k].params.block(block));
        } else {
          EXPECT_EQ(server.personalized[k].block(block), before.personalized[k].block(block));
        }
        EXPECT_EQ(server.cache.contains(k, block), up);
        const auto now_row = server.coeffs.raw_row(block, k);
        const bool row_changed = !std::equal(now_row.begin(), now_row.end(), before.coeffs.raw_row(block, k).begin());
        if (row_changed) {
          EXPECT_TRUE(prev_schedule.uploads(k, block)) << "round " << log.round;
          EXPECT_TRUE(up);
        }
      }
    }
    double slowest = 0.0;
    for (const auto& d : log.devices) slowest = std::max(slowest, d.total());
    EXPECT_EQ(log.round_time, slowest);
    prev_schedule = server.schedule;
  }
}

TEST(Simulation, UnscheduledDeviceTrainsPurelyLocally) {
  RunConfig c = small_config();
  c.devices = 9;
  c.khat = 1;
  c.staleness_threshold = 50;
  Simulation sim(c);
  sim.run_round();
  // replay round 2 on copies to find the purely local result
  std::vector<DeviceState> replay = sim.devices();
  LocalTraining lt{c.lr, c.local_iters, c.batch_size, 0.0};
  for (auto& d : replay) local_update_phase(d, lt);
  const auto log = sim.run_round();
  std::size_t idle = 0;
  for (std::size_t k = 0; k < replay.size(); ++k) {
    bool any = false;
    for (std::size_t m = 0; m < sim.num_blocks(); ++m) any = any || log.schedule.uploads(k, int(m));
    if (any) continue;
    ++idle;
    EXPECT_EQ(sim.devices()[k].params, replay[k].params);
    EXPECT_EQ(log.devices[k].t_up, 0.0);
  }
  EXPECT_GT(idle, 0u);
}

TEST(Simulation, ChannelGainsIndependentOfAlgorithmAndQuota) {
  RunConfig a = small_config();
  RunConfig b = small_config(Algorithm::kFedAvg);
  b.khat = 5;
  Simulation sa(a), sb(b);
  for (std::size_t t = 1; t < 4; ++t) EXPECT_EQ(sa.channel_gains(t), sb.channel_gains(t));
  EXPECT_NE(sa.channel_gains(1), sa.channel_gains(2));
}

TEST(Training, ZeroRoundsReturnsInitialState) {
  RunConfig c = small_config();
  c.rounds = 0;
  const auto r = run_training(c);
  EXPECT_TRUE(r.logs.empty());
  EXPECT_EQ(r.summary.total_time_s, 0.0);
  Simulation fresh(c);
  for (std::size_t k = 0; k < r.devices.size(); ++k) EXPECT_EQ(r.devices[k].params, fresh.devices()[k].params);
}

TEST(Training, SameSeedSameSummary) {
  const auto a = run_training(small_config());
  const auto b = run_training(small_config());
  EXPECT_EQ(a.summary.mean_accuracy, b.summary.mean_accuracy);
  EXPECT_EQ(a.summary.device_accuracy, b.summary.device_accuracy);
  EXPECT_EQ(a.summary.total_time_s, b.summary.total_time_s);
  for (std::size_t k = 0; k < a.devices.size(); ++k) EXPECT_EQ(a.devices[k].params, b.devices[k].params);
}

TEST(Training, ThreadCountDoesNotChangeResults) {
  // parallel_for with several workers against the sequential loop
  std::vector<double> seq(23), par(23);
  auto work = [](std::size_t i) { return std::sin(static_cast<double>(i)) * 3.0; };
  parallel_for(23, 1, [&](std::size_t i) { seq[i] = work(i); });
  parallel_for(23, 4, [&](std::size_t i) { par[i] = work(i); });
  EXPECT_EQ(seq, par);
  EXPECT_THROW(parallel_for(5, 3, [](std::size_t i) {
                 if (i == 3) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Training, TotalTimeIsSumOfRoundTimes) {
  const auto r = run_training(small_config());
  double sum = 0.0;
  for (const auto& log : r.logs) sum += log.round_time;
  EXPECT_DOUBLE_EQ(r.summary.total_time_s, sum);
}

TEST(TrainingTime, HandCases) {
  RoundLog one;
  one.devices.resize(1);
  one.devices[0] = {0.5, 1.0, 0.25, {}, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(simulated_training_time({one}), 1.75);
  RoundLog two = one;
  two.devices.push_back({2.0, 1.0, 0.0, {}, 0.0, 0.0});
  EXPECT_GE(simulated_training_time({two}), simulated_training_time({one}));
  EXPECT_DOUBLE_EQ(simulated_training_time({one, two}), 1.75 + 3.0);
}

TEST(Evaluate, AlwaysClassZero) {
  ArchSpec arch;
  arch.input_dims = {2};
  arch.encoder_hidden = {};
  arch.feature_dim = 2;
  arch.classifier_hidden = {};
  arch.num_classes = 3;
  DeviceState d;
  d.params = zero_params(arch, {0});
  d.params.block(1).values[6] = 1.0;  // bias of class 0
  for (int i = 0; i < 10; ++i) d.data.test.push_back({{{0, {double(i), -double(i)}}}, 0});
  const auto acc = evaluate_personalized({d});
  EXPECT_EQ(acc.per_device, std::vector<double>{1.0});
  EXPECT_EQ(acc.mean, 1.0);
  d.data.test.clear();
  EXPECT_THROW(evaluate_personalized({d}), Error);
}

TEST(Evaluate, RandomModelIsNearChance) {
  ArchSpec arch;
  arch.input_dims = {5};
  arch.num_classes = 4;
  Rng rng = make_rng(1, Stream::kInit);
  DeviceState d;
  d.params = random_params(arch, {0}, rng);
  for (int i = 0; i < 8000; ++i) {
    std::vector<double> x(5);
    for (double& v : x) v = standard_normal(rng);
    d.data.test.push_back({{{0, x}}, static_cast<int>(uniform_index(rng, 4))});
  }
  EXPECT_NEAR(evaluate_personalized({d}).mean, 0.25, 0.03);
}

TEST(Evaluate, SeparableDataTrainsAboveNinetyPercent) {
  RunConfig c = small_config(Algorithm::kLocalOnly);
  c.noise_std = 1.0;
  c.rounds = 15;
  c.local_iters = 10;
  const auto r = run_training(c);
  EXPECT_GT(r.summary.mean_accuracy, 0.9);
}

TEST(Simulation, InvalidConfigRejectedBeforeRoundOne) {
  RunConfig c = small_config();
  c.khat = 99;
  EXPECT_THROW(Simulation{c}, ConfigError);
}
