#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fedsim/matrix.hpp"

namespace fedsim {

/// Labeled classification samples: one feature row per label.
struct Dataset {
  Matrix x;
  std::vector<int> y;
  std::size_t classes = 0;

  std::size_t size() const { return y.size(); }
  std::size_t features() const { return x.cols(); }
  bool empty() const { return y.empty(); }

  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> label_histogram() const;
};

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// Gaussian class clusters: each class mean is a seeded random direction of
/// norm `separation`, samples add unit-variance noise. Labels are balanced
/// (i mod C) and the shuffled set is cut 80/20 into train/test.
TrainTest synth_classification(std::size_t n, std::size_t features, std::size_t classes,
                               double separation, std::uint64_t seed);

struct PublicSplit {
  Dataset public_set;
  Dataset remainder;
};

/// Seeded shuffle; the first `n_public` samples become the public set.
PublicSplit split_public(const Dataset& ds, std::size_t n_public, std::uint64_t seed);

enum class PartitionStrategy { kIid, kDirichlet };

struct PartitionSpec {
  std::size_t n_clients = 3;
  PartitionStrategy strategy = PartitionStrategy::kIid;
  double beta = 0.5;
  std::uint64_t seed = 0;
};

inline constexpr int kDirichletMaxRetries = 100;

/// Disjoint index shards covering [0, ds.size()).
std::vector<std::vector<std::size_t>> partition_indices(const Dataset& ds,
                                                        const PartitionSpec& spec);

std::vector<Dataset> partition_clients(const Dataset& ds, const PartitionSpec& spec);

/// Reads `f0,...,f{d-1},label` CSV. The class count is max(label) + 1.
Dataset load_csv(const std::filesystem::path& path);

/// Writes the same format with 17 significant digits per feature.
void save_csv(const Dataset& ds, const std::filesystem::path& path);

}  // namespace fedsim
