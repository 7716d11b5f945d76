#include "fedsim/accounting.hpp"

#include <algorithm>
#include <string>

#include "fedsim/errors.hpp"

namespace fedsim {

void CostModelParams::validate() const {
  if (bytes_per_scalar != 2 && bytes_per_scalar != 4 && bytes_per_scalar != 8) {
    throw ConfigError("cost.bytes_per_scalar must be 2, 4 or 8, got " +
                      std::to_string(bytes_per_scalar));
  }
}

std::uint64_t adapter_payload_bytes(const LoraConfig& lora, const Arch& arch,
                                    const CostModelParams& p, std::size_t from, std::size_t to) {
  std::uint64_t scalars = 0;
  for (std::size_t l : lora.adapted_layers) {
    if (l > from && l <= to) scalars += lora.rank * (arch.in_width(l) + arch.out_width(l));
  }
  return scalars * p.bytes_per_scalar;
}

std::uint64_t adapter_payload_bytes(const LoraConfig& lora, const Arch& arch,
                                    const CostModelParams& p) {
  return adapter_payload_bytes(lora, arch, p, 0, arch.depth());
}

std::uint64_t logits_payload_bytes(std::size_t n, std::size_t classes, const CostModelParams& p) {
  return static_cast<std::uint64_t>(n) * classes * p.bytes_per_scalar;
}

SplitTraffic split_traffic_bytes(std::size_t n_samples, std::size_t split_width,
                                 const CostModelParams& p) {
  const std::uint64_t n = n_samples;
  return {n * (split_width + 1) * p.bytes_per_scalar, n * split_width * p.bytes_per_scalar};
}

std::uint64_t flops_model(const Arch& arch, const LoraConfig& lora, std::size_t n,
                          std::size_t from, std::size_t to, Phase phase) {
  std::uint64_t forward = 0;
  for (std::size_t l = from + 1; l <= std::min(to, arch.depth()); ++l) {
    const std::uint64_t d_in = arch.in_width(l);
    const std::uint64_t d_out = arch.out_width(l);
    forward += 2 * n * d_in * d_out;
    if (lora.adapts(l)) forward += 2 * n * lora.rank * (d_in + d_out);
  }
  return phase == Phase::kTrain ? 3 * forward : forward;
}

std::uint64_t RoundCost::total_up() const {
  std::uint64_t t = 0;
  for (const auto& c : clients) t += c.up_bytes;
  return t;
}

std::uint64_t RoundCost::total_down() const {
  std::uint64_t t = 0;
  for (const auto& c : clients) t += c.down_bytes;
  return t;
}

std::uint64_t RoundCost::total_client_flops() const {
  std::uint64_t t = 0;
  for (const auto& c : clients) t += c.flops;
  return t;
}

void CostLedger::record(const RoundCost& round) {
  if (round.clients.size() != n_clients_) {
    throw std::invalid_argument("cost ledger expects " + std::to_string(n_clients_) +
                                " clients per round, got " +
                                std::to_string(round.clients.size()));
  }
  rounds_.push_back(round);
}

PartyCost CostLedger::client_total(std::size_t client) const {
  PartyCost total;
  for (const auto& r : rounds_) {
    total.up_bytes += r.clients.at(client).up_bytes;
    total.down_bytes += r.clients.at(client).down_bytes;
    total.flops += r.clients.at(client).flops;
  }
  return total;
}

std::uint64_t CostLedger::server_flops_total() const {
  std::uint64_t t = 0;
  for (const auto& r : rounds_) t += r.server_flops;
  return t;
}

}  // namespace fedsim
