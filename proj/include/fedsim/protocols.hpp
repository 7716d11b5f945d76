#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "fedsim/accounting.hpp"
#include "fedsim/data.hpp"
#include "fedsim/model.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// ---------------------------------------------------------------------------
// Messages

struct AdapterUpdate {
  AdapterBundle bundle;
};

struct LogitBatch {
  Matrix logits;
};

struct ActivationBatch {
  Matrix activations;
  std::vector<int> labels;
};

struct GradientBatch {
  Matrix gradients;
};

using Message = std::variant<AdapterUpdate, LogitBatch, ActivationBatch, GradientBatch>;

enum class MessageKind { kAdapterUpdate, kLogitBatch, kActivationBatch, kGradientBatch };

std::string_view to_string(MessageKind kind);

MessageKind kind_of(const Message& msg);

/// Serialized scalar count; each label costs one scalar.
std::size_t payload_scalars(const Message& msg);

enum class Direction { kUplink, kDownlink };

struct MessageRecord {
  Direction direction;
  std::size_t client;
  MessageKind kind;
  std::size_t scalars;

  friend bool operator==(const MessageRecord&, const MessageRecord&) = default;
};

/// In-process link between the server and its clients. Every message is
/// traced and its payload charged to the sending or receiving client.
class Channel {
 public:
  Channel(std::size_t n_clients, CostModelParams params) : cost_(n_clients), params_(params) {}

  void uplink(std::size_t client, const Message& msg);
  void downlink(std::size_t client, const Message& msg);

  RoundCost& cost() { return cost_; }
  const RoundCost& cost() const { return cost_; }
  const std::vector<MessageRecord>& trace() const { return trace_; }

 private:
  RoundCost cost_;
  CostModelParams params_;
  std::vector<MessageRecord> trace_;
};

// ---------------------------------------------------------------------------
// Participants and configuration

struct ClientState {
  std::size_t id = 0;
  LayeredNet model;
  Dataset shard;
  AdamState optim;
  Rng rng;
};

/// Global model (fed, kd) or the shared server-side suffix plus the current
/// aggregated prefix (split).
struct ServerState {
  LayeredNet model;
  AdamState optim;
  Rng rng;
  Dataset public_set;           // kd only
  std::size_t split_point = 0;  // split only
};

struct RoundConfig {
  std::size_t local_epochs = 1;
  std::size_t batch_size = 64;
  OptimHyper optim;
  CostModelParams cost;
  bool parallel_clients = true;
};

struct KdConfig {
  std::size_t public_size = 5002;
  double temperature = 1.0;
  /// Weight of the distillation term; 1 - lambda goes to CE on public labels.
  double lambda = 0.5;
  std::size_t server_epochs = 1;
  std::size_t client_epochs = 1;

  void validate() const;
};

struct SplitConfig {
  std::size_t split_point = 1;
  std::size_t samples_per_round = 1667;

  void validate(const Arch& arch) const;
};

struct TrainStats {
  std::uint64_t flops = 0;
  std::vector<double> batch_losses;
};

struct RoundResult {
  RoundCost cost;
  std::vector<MessageRecord> trace;
  /// Training loss of every server-side batch (split only).
  std::vector<double> server_batch_losses;
};

// ---------------------------------------------------------------------------
// Shared pieces

/// Minibatch CE training of all adapters over the client's shard.
TrainStats local_finetune(ClientState& client, std::size_t epochs, std::size_t batch,
                          const OptimHyper& hyper);

/// Weighted elementwise mean; weights are normalized to sum to one.
std::vector<double> aggregate_adapters(std::span<const std::vector<double>> updates,
                                       std::span<const double> weights);

/// Eval-mode logits of the client model on the public inputs.
LogitBatch client_logits(const ClientState& client, const Matrix& public_x,
                         std::uint64_t* flops = nullptr);

LogitBatch aggregate_logits(std::span<const LogitBatch> batches, std::span<const double> weights);

/// Trains `model`'s adapters on
///   lambda * kl_distill_loss(teacher, student, tau) + (1 - lambda) * CE(public labels).
TrainStats distill(LayeredNet& model, const LogitBatch& teacher, const Dataset& public_set,
                   const KdConfig& kd, std::size_t epochs, std::size_t batch, AdamState& optim,
                   const OptimHyper& hyper, Rng& rng);

/// Aggregation weights proportional to shard sizes.
std::vector<double> shard_weights(std::span<const ClientState> clients);

// ---------------------------------------------------------------------------
// Rounds

/// Parameter exchange: broadcast adapters, fine-tune locally, upload, average.
RoundResult fed_round(ServerState& server, std::span<ClientState> clients,
                      const RoundConfig& cfg);

/// Knowledge exchange through logits on the public set.
RoundResult kd_round(ServerState& server, std::span<ClientState> clients, const KdConfig& kd,
                     const RoundConfig& cfg);

/// Split training at layer boundary `server.split_point`: clients run the
/// prefix, the server runs the shared suffix, prefix adapters are averaged
/// once per round.
RoundResult split_round(ServerState& server, std::span<ClientState> clients,
                        const SplitConfig& split, const RoundConfig& cfg);

}  // namespace fedsim
