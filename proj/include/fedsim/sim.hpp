#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedsim/accounting.hpp"
#include "fedsim/config.hpp"
#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/protocols.hpp"

namespace fedsim {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double evaluate(const Matrix& logits, std::span<const int> labels);
double evaluate(const LayeredNet& model, const Dataset& test);

/// Metrics of one round; round 0 is the evaluation before any training.
/// Per-client quantities are means over clients.
struct RoundMetrics {
  std::size_t round = 0;
  double accuracy = 0.0;
  double up_bytes_per_client = 0.0;
  double down_bytes_per_client = 0.0;
  double client_flops = 0.0;
  double server_flops = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> metrics;
  CostLedger ledger{0};
  std::vector<std::vector<MessageRecord>> traces;  // one per trained round
  std::vector<double> server_batch_losses;         // split only, all rounds
};

struct RunReport {
  SimConfig config;
  std::vector<SeedRun> seeds;
  /// Elementwise mean of the per-seed series.
  std::vector<RoundMetrics> mean;
};

/// Data, clients and server for one seed, ready for round 0.
struct Federation {
  Arch arch;
  LoraConfig lora;
  Dataset test;
  ServerState server;
  std::vector<ClientState> clients;
};

/// Builds the data layout and initial states of one seed. Every party starts
/// from the same frozen base and adapter initialization.
Federation build_federation(const SimConfig& cfg, std::uint64_t seed);

RoundResult run_round(const SimConfig& cfg, Federation& fed);

SeedRun run_seed(const SimConfig& cfg, std::uint64_t seed);

/// Validates, then runs every seed and averages.
RunReport run(const SimConfig& cfg);

/// Keeps large freed blocks in the heap instead of unmapping them. Batch
/// activations are allocated and released constantly; with the default glibc
/// thresholds much of the runtime went to page faults. No-op elsewhere.
void tune_allocator();

std::vector<RoundMetrics> average_series(std::span<const SeedRun> runs);

/// Writes config.resolved, metrics.csv and summary.txt.
void write_run(const RunReport& report, const std::filesystem::path& dir);

inline constexpr const char* kMetricsHeader =
    "round,seed,accuracy,up_bytes_per_client,down_bytes_per_client,client_flops,server_flops";

std::string metrics_csv(const RunReport& report);
std::string run_summary(const RunReport& report);

struct SweepResult {
  std::vector<std::string> values;
  std::vector<RunReport> reports;
  std::string combined_csv;
};

/// One run per value of `key`, everything else fixed. Each run lands in
/// `<out>/<key>=<value>/`; `<out>/sweep.csv` combines their metrics.
SweepResult sweep(const SimConfig& base, const std::string& key,
                  const std::vector<std::string>& values, const std::filesystem::path& out);

/// A finished run read back from disk.
struct StoredRun {
  std::string name;
  std::string framework;
  std::vector<RoundMetrics> mean;
};

StoredRun load_run(const std::filesystem::path& dir);

struct RunSummary {
  std::string name;
  std::string framework;
  double final_accuracy = 0.0;
  double comm_bytes_per_client_per_round = 0.0;
  double client_flops_per_round = 0.0;
  double server_flops_per_round = 0.0;
};

RunSummary summarize(const StoredRun& run);

struct ComparisonReport {
  std::vector<RunSummary> runs;
  std::string text;
  std::string summary_csv;
  std::string series_csv;
};

/// Ranks runs on accuracy, communication and client computation (highest
/// first). A single run gets no ranking section.
ComparisonReport compare_runs(std::span<const StoredRun> runs);

}  // namespace fedsim
