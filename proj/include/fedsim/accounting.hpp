#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

/// Serialized payload width. Math runs in 64-bit; payloads model 32-bit
/// deployment by default.
struct CostModelParams {
  std::size_t bytes_per_scalar = 4;

  void validate() const;
};

/// bytes_per_scalar * sum over adapted layers in (from, to] of r * (d_in + d_out).
std::uint64_t adapter_payload_bytes(const LoraConfig& lora, const Arch& arch,
                                    const CostModelParams& p, std::size_t from, std::size_t to);
std::uint64_t adapter_payload_bytes(const LoraConfig& lora, const Arch& arch,
                                    const CostModelParams& p);

std::uint64_t logits_payload_bytes(std::size_t n, std::size_t classes, const CostModelParams& p);

struct SplitTraffic {
  std::uint64_t uplink = 0;    // activations plus one label per sample
  std::uint64_t downlink = 0;  // activation gradients

  friend bool operator==(const SplitTraffic&, const SplitTraffic&) = default;
};

SplitTraffic split_traffic_bytes(std::size_t n_samples, std::size_t split_width,
                                 const CostModelParams& p);

enum class Phase { kEval, kTrain };

/// Forward cost of layers (from, to] for a batch of n:
///   2 n d_in d_out per layer, plus 2 n r (d_in + d_out) when adapted.
/// Training counts backward as twice the forward.
std::uint64_t flops_model(const Arch& arch, const LoraConfig& lora, std::size_t n,
                          std::size_t from, std::size_t to, Phase phase);

struct PartyCost {
  std::uint64_t up_bytes = 0;
  std::uint64_t down_bytes = 0;
  std::uint64_t flops = 0;

  friend bool operator==(const PartyCost&, const PartyCost&) = default;
};

/// Cost deltas of one protocol round.
struct RoundCost {
  std::vector<PartyCost> clients;
  std::uint64_t server_flops = 0;

  explicit RoundCost(std::size_t n_clients = 0) : clients(n_clients) {}

  std::uint64_t total_up() const;
  std::uint64_t total_down() const;
  std::uint64_t total_client_flops() const;
};

/// Per-round cost history for one run, owned by the orchestrator.
class CostLedger {
 public:
  explicit CostLedger(std::size_t n_clients) : n_clients_(n_clients) {}

  void record(const RoundCost& round);

  std::size_t n_clients() const { return n_clients_; }
  const std::vector<RoundCost>& rounds() const { return rounds_; }

  /// Cumulative totals for one client over all recorded rounds.
  PartyCost client_total(std::size_t client) const;
  std::uint64_t server_flops_total() const;

 private:
  std::size_t n_clients_;
  std::vector<RoundCost> rounds_;
};

}  // namespace fedsim
