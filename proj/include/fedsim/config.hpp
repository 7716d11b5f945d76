#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/accounting.hpp"
#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/protocols.hpp"

namespace fedsim {

enum class Framework { kFed, kKd, kSplit };

std::string_view to_string(Framework f);

enum class DataSource { kSynthetic, kCsv };

struct DataSpec {
  DataSource source = DataSource::kSynthetic;
  /// Synthetic total before the 80/20 train/test cut; 12504 gives 10003 train.
  std::size_t n = 12504;
  std::size_t features = 32;
  std::size_t classes = 10;
  double separation = 4.0;
  std::string train_csv;
  /// Optional; without it the training CSV is cut 80/20.
  std::string test_csv;
};

/// Everything one simulation needs. Defaults follow the three-client case
/// study layout at desk scale.
struct SimConfig {
  Framework framework = Framework::kFed;
  std::vector<std::size_t> hidden{256};
  LoraConfig lora{8, 32.0, 0.1, {}};  // empty layer list = adapt every layer
  OptimHyper optim;
  KdConfig kd;
  SplitConfig split;
  std::size_t n_clients = 3;
  std::size_t rounds = 100;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 64;
  bool parallel = true;
  DataSpec data;
  PartitionStrategy partition = PartitionStrategy::kIid;
  double dirichlet_beta = 0.5;
  std::vector<std::uint64_t> seeds{0, 1, 42};
  CostModelParams cost;

  /// Input width and class count come from the data spec (or the CSV).
  Arch arch(std::size_t features, std::size_t classes) const;
  /// Adapted layers resolved against an arch.
  LoraConfig resolved_lora(const Arch& arch) const;

  /// Sets one dotted key from its textual value. Throws ConfigError naming
  /// the key on unknown keys or bad values.
  void set(std::string_view key, std::string_view value);

  /// Structural checks that need no data; errors name the offending key.
  void validate() const;

  /// `key = value` lines for every key, in a fixed order.
  std::string resolved() const;
};

/// Parses `key = value` lines with `#` comments on top of the defaults.
SimConfig parse_config(std::string_view text, std::string_view origin = "<config>");
SimConfig load_config(const std::filesystem::path& path);

/// Keys accepted by SimConfig::set, in the order `resolved()` prints them.
const std::vector<std::string>& config_keys();

/// Shortest decimal text that round-trips to the same double.
std::string format_number(double v);

}  // namespace fedsim
