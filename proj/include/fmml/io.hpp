#pragma once

// Result files written by a run: rounds.csv, coefficients.csv, schedule.csv,
// gains.csv (optional) and summary.json.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "fmml/config.hpp"
#include "fmml/orchestrator.hpp"

namespace fmml {

inline constexpr const char* kRoundsHeader =
    "round,device,t_down_s,t_cmp_s,t_up_s,t_total_s,round_time_s,uploaded_blocks,train_loss,test_accuracy,"
    "mean_accuracy";
inline constexpr const char* kCoefficientsHeader = "round,block,k,k_prime,raw,softmax,effective";
inline constexpr const char* kScheduleHeader = "round,block,device,scheduled,staleness,metric";
inline constexpr const char* kGainsHeader = "round,device,distance_m,gain";

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline void write_rounds_csv(std::ostream& out, const std::vector<RoundLog>& logs) {
  out << kRoundsHeader << '\n';
  for (const auto& log : logs) {
    for (std::size_t k = 0; k < log.devices.size(); ++k) {
      const auto& d = log.devices[k];
      std::string blocks;
      for (int b : d.uploaded_blocks) blocks += (blocks.empty() ? "" : ";") + std::to_string(b);
      out << log.round << ',' << k << ',' << format_double(d.t_down) << ',' << format_double(d.t_cmp) << ','
          << format_double(d.t_up) << ',' << format_double(d.total()) << ',' << format_double(log.round_time) << ','
          << blocks << ',' << format_double(d.train_loss) << ',' << format_double(d.accuracy) << ','
          << format_double(log.mean_accuracy) << '\n';
    }
  }
}

/// Rows cover pairs of devices that both own the block. With `every_round`
/// false only the final round is written.
inline void write_coefficients_csv(std::ostream& out, const std::vector<RoundLog>& logs, const Simulation& sim,
                                   bool every_round) {
  out << kCoefficientsHeader << '\n';
  const auto& coeffs = sim.server().coeffs;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    if (!every_round && i + 1 != logs.size()) continue;
    const auto& log = logs[i];
    for (std::size_t m = 0; m < log.raw_coeffs.size(); ++m) {
      const auto& owners = coeffs.participants(static_cast<int>(m));
      const std::size_t K = owners.size();
      for (std::size_t k = 0; k < K; ++k) {
        if (!owners[k]) continue;
        for (std::size_t j = 0; j < K; ++j) {
          if (!owners[j]) continue;
          out << log.round << ',' << m << ',' << k << ',' << j << ',' << format_double(log.raw_coeffs[m](k, j)) << ','
              << format_double(log.softmax_coeffs[m](k, j)) << ',' << format_double(log.effective_coeffs[m](k, j))
              << '\n';
        }
      }
    }
  }
}

inline void write_schedule_csv(std::ostream& out, const std::vector<RoundLog>& logs, const Simulation& sim) {
  out << kScheduleHeader << '\n';
  const auto& coeffs = sim.server().coeffs;
  for (const auto& log : logs) {
    for (std::size_t m = 0; m < log.schedule.num_blocks(); ++m) {
      const auto& owners = coeffs.participants(static_cast<int>(m));
      for (std::size_t k = 0; k < log.schedule.num_devices(); ++k) {
        if (!owners[k]) continue;
        out << log.round << ',' << m << ',' << k << ',' << (log.schedule.uploads(k, int(m)) ? 1 : 0) << ','
            << log.schedule.staleness(k, int(m)) << ',' << format_double(log.metric(k, m)) << '\n';
      }
    }
  }
}

inline void write_gains_csv(std::ostream& out, const std::vector<RoundLog>& logs, const Simulation& sim) {
  out << kGainsHeader << '\n';
  for (const auto& log : logs) {
    for (std::size_t k = 0; k < log.gains.size(); ++k) {
      out << log.round << ',' << k << ',' << format_double(sim.devices()[k].distance_m) << ','
          << format_double(log.gains[k]) << '\n';
    }
  }
}

inline json summary_json(const RunConfig& config, const RunSummary& s) {
  return {
      {"seed", s.seed},
      {"algo", to_string(s.algorithm)},
      {"rounds", s.rounds},
      {"mean_personalized_accuracy", s.mean_accuracy},
      {"device_accuracy", s.device_accuracy},
      {"total_simulated_time_s", s.total_time_s},
      {"config", to_json(config)},
  };
}

struct RunOutputs {
  std::vector<RoundLog> logs;
  RunSummary summary;
};

/// Runs the configured training and writes every result file into `dir`.
inline RunOutputs run_and_write(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Simulation sim(config);
  RunOutputs out;
  for (std::size_t t = 0; t < config.rounds; ++t) out.logs.push_back(sim.run_round());
  const auto acc = evaluate_personalized(sim.devices());
  out.summary = {config.seed, config.algorithm, config.rounds, acc.mean, acc.per_device,
                 simulated_training_time(out.logs)};

  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw Error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("rounds.csv");
    write_rounds_csv(f, out.logs);
  }
  {
    auto f = open("coefficients.csv");
    write_coefficients_csv(f, out.logs, sim, config.coefficient_snapshots);
  }
  {
    auto f = open("schedule.csv");
    write_schedule_csv(f, out.logs, sim);
  }
  if (config.dump_gains) {
    auto f = open("gains.csv");
    write_gains_csv(f, out.logs, sim);
  }
  if (config.dump_datasets) {
    std::vector<DeviceDataset> data;
    for (const auto& d : sim.devices()) data.push_back(d.data);
    write_datasets_csv((dir / "datasets.csv").string(), data, config.resolved_input_dims());
  }
  {
    auto f = open("summary.json");
    f << summary_json(config, out.summary).dump(2) << '\n';
  }
  return out;
}

}  // namespace fmml
