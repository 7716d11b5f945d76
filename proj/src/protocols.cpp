#include "fedsim/protocols.hpp"

#include <algorithm>
#include <functional>
#include <future>
#include <numeric>
#include <string>

#include "fedsim/errors.hpp"

namespace fedsim {
namespace {

using Objective =
    std::function<std::pair<double, Matrix>(const Matrix& logits, std::span<const std::size_t> idx)>;

void adam_update(LayeredNet& model, std::size_t from, std::size_t to,
                 const AdapterBundle& grads, AdamState& optim, const OptimHyper& hyper) {
  AdapterBundle params = model.export_adapters(from, to);
  if (params.manifest != grads.manifest) {
    throw ShapeError("adapter gradient layout does not match the parameters being updated");
  }
  adam_step(params.values, grads.values, optim, hyper);
  model.import_adapters(params);
}

// Seeded shuffle per epoch, minibatches in order, last partial batch kept.
TrainStats train_adapters(LayeredNet& model, const Matrix& x, std::size_t epochs,
                          std::size_t batch, AdamState& optim, const OptimHyper& hyper, Rng& rng,
                          const Objective& objective) {
  if (batch == 0) throw ConfigError("batch size must be >= 1");
  TrainStats stats;
  const std::size_t n = x.rows();
  const std::size_t depth = model.depth();
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> idx(order.data() + start, std::min(batch, n - start));
      const Matrix xb = x.gather_rows(idx);
      ForwardResult fwd = model.forward_range(xb, 0, depth, Mode::kTrain, &rng);
      auto [loss, grad] = objective(fwd.output, idx);
      BackwardResult bwd = model.backward_range(fwd.tape, grad, /*want_input_grad=*/false);
      adam_update(model, 0, depth, bwd.adapter_grads, optim, hyper);
      stats.batch_losses.push_back(loss);
      stats.flops += flops_model(model.arch(), model.lora(), idx.size(), 0, depth, Phase::kTrain);
    }
  }
  return stats;
}

std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

// Runs fn on every client, concurrently when allowed. Each call touches only
// its own client, so results match sequential execution.
void for_each_client(std::span<ClientState> clients, bool parallel,
                     const std::function<void(ClientState&)>& fn) {
  if (!parallel || clients.size() < 2) {
    for (auto& c : clients) fn(c);
    return;
  }
  std::vector<std::future<void>> jobs;
  jobs.reserve(clients.size());
  for (auto& c : clients) jobs.push_back(std::async(std::launch::async, [&fn, &c] { fn(c); }));
  for (auto& j : jobs) j.get();
}

void check_client_ids(std::span<const ClientState> clients) {
  for (std::size_t i = 0; i < clients.size(); ++i) {
    if (clients[i].id != i) {
      throw std::invalid_argument("client ids must be dense 0..K-1 in order; position " +
                                  std::to_string(i) + " holds id " + std::to_string(clients[i].id));
    }
  }
}

std::vector<double> normalized(std::span<const double> weights, std::size_t expected) {
  if (weights.size() != expected) {
    throw std::invalid_argument("aggregation: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(expected) + " inputs");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("aggregation weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("aggregation weights must not all be zero");
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= total;
  return out;
}

std::size_t reference_index(std::span<const double> w) {
  return static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
}

}  // namespace

std::string_view to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::kAdapterUpdate: return "adapters";
    case MessageKind::kLogitBatch: return "logits";
    case MessageKind::kActivationBatch: return "activations";
    case MessageKind::kGradientBatch: return "gradients";
  }
  return "unknown";
}

MessageKind kind_of(const Message& msg) { return static_cast<MessageKind>(msg.index()); }

std::size_t payload_scalars(const Message& msg) {
  struct Visitor {
    std::size_t operator()(const AdapterUpdate& m) const { return m.bundle.values.size(); }
    std::size_t operator()(const LogitBatch& m) const { return m.logits.size(); }
    std::size_t operator()(const ActivationBatch& m) const {
      return m.activations.size() + m.labels.size();
    }
    std::size_t operator()(const GradientBatch& m) const { return m.gradients.size(); }
  };
  return std::visit(Visitor{}, msg);
}

void Channel::uplink(std::size_t client, const Message& msg) {
  const std::size_t scalars = payload_scalars(msg);
  cost_.clients.at(client).up_bytes += static_cast<std::uint64_t>(scalars) * params_.bytes_per_scalar;
  trace_.push_back({Direction::kUplink, client, kind_of(msg), scalars});
}

void Channel::downlink(std::size_t client, const Message& msg) {
  const std::size_t scalars = payload_scalars(msg);
  cost_.clients.at(client).down_bytes +=
      static_cast<std::uint64_t>(scalars) * params_.bytes_per_scalar;
  trace_.push_back({Direction::kDownlink, client, kind_of(msg), scalars});
}

void KdConfig::validate() const {
  if (public_size < 1) throw ConfigError("kd.public_size must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("kd.temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("kd.lambda must be in [0, 1]");
}

void SplitConfig::validate(const Arch& arch) const {
  if (split_point < 1 || split_point + 1 > arch.depth()) {
    throw ConfigError("split.point must be in [1, " + std::to_string(arch.depth() - 1) + "], got " +
                      std::to_string(split_point));
  }
  if (samples_per_round < 1) throw ConfigError("split.samples_per_round must be >= 1");
}

TrainStats local_finetune(ClientState& client, std::size_t epochs, std::size_t batch,
                          const OptimHyper& hyper) {
  const std::vector<int>& labels = client.shard.y;
  Objective ce = [&labels](const Matrix& logits, std::span<const std::size_t> idx) {
    const auto yb = gather_labels(labels, idx);
    return std::pair{cross_entropy(softmax_rows(logits), yb), cross_entropy_logits_grad(logits, yb)};
  };
  return train_adapters(client.model, client.shard.x, epochs, batch, client.optim, hyper,
                        client.rng, ce);
}

std::vector<double> aggregate_adapters(std::span<const std::vector<double>> updates,
                                       std::span<const double> weights) {
  if (updates.empty()) throw std::invalid_argument("aggregate_adapters: no updates");
  const auto w = normalized(weights, updates.size());
  const std::size_t len = updates.front().size();
  for (const auto& u : updates) {
    if (u.size() != len) {
      throw ShapeError("aggregate_adapters: update lengths " + std::to_string(len) + " and " +
                       std::to_string(u.size()) + " differ");
    }
  }
  // Accumulate offsets from the heaviest update so that identical inputs and
  // one-hot weights reproduce an input bit-exactly.
  const std::size_t ref = reference_index(w);
  std::vector<double> out = updates[ref];
  for (std::size_t k = 0; k < updates.size(); ++k) {
    if (k == ref || w[k] == 0.0) continue;
    for (std::size_t i = 0; i < len; ++i) out[i] += w[k] * (updates[k][i] - updates[ref][i]);
  }
  return out;
}

LogitBatch client_logits(const ClientState& client, const Matrix& public_x, std::uint64_t* flops) {
  if (public_x.rows() == 0) throw std::invalid_argument("client_logits: empty public set");
  LogitBatch out{client.model.predict(public_x)};
  if (flops) {
    *flops += flops_model(client.model.arch(), client.model.lora(), public_x.rows(), 0,
                          client.model.depth(), Phase::kEval);
  }
  return out;
}

LogitBatch aggregate_logits(std::span<const LogitBatch> batches, std::span<const double> weights) {
  if (batches.empty()) throw std::invalid_argument("aggregate_logits: no batches");
  const auto w = normalized(weights, batches.size());
  const Matrix& first = batches.front().logits;
  for (const auto& b : batches) {
    if (b.logits.rows() != first.rows() || b.logits.cols() != first.cols()) {
      throw ShapeError("aggregate_logits: shapes " + first.shape_string() + " and " +
                       b.logits.shape_string() + " differ");
    }
  }
  const std::size_t ref = reference_index(w);
  const Matrix& base = batches[ref].logits;
  Matrix out = base;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    if (k == ref || w[k] == 0.0) continue;
    auto dst = out.values();
    auto src = batches[k].logits.values();
    auto b = base.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w[k] * (src[i] - b[i]);
  }
  return {std::move(out)};
}

TrainStats distill(LayeredNet& model, const LogitBatch& teacher, const Dataset& public_set,
                   const KdConfig& kd, std::size_t epochs, std::size_t batch, AdamState& optim,
                   const OptimHyper& hyper, Rng& rng) {
  if (teacher.logits.rows() != public_set.size() || teacher.logits.cols() != model.arch().classes()) {
    throw ShapeError("distill: teacher logits " + teacher.logits.shape_string() + " for " +
                     std::to_string(public_set.size()) + " public samples and " +
                     std::to_string(model.arch().classes()) + " classes");
  }
  const double lambda = kd.lambda;
  const double tau = kd.temperature;
  Objective objective = [&](const Matrix& logits, std::span<const std::size_t> idx) {
    const auto yb = gather_labels(public_set.y, idx);
    double loss = 0.0;
    Matrix grad(logits.rows(), logits.cols());
    if (lambda > 0.0) {
      const Matrix tb = teacher.logits.gather_rows(idx);
      loss += lambda * kl_distill_loss(tb, logits, tau);
      add_scaled(grad, kl_distill_student_grad(tb, logits, tau), lambda);
    }
    if (lambda < 1.0) {
      loss += (1.0 - lambda) * cross_entropy(softmax_rows(logits), yb);
      add_scaled(grad, cross_entropy_logits_grad(logits, yb), 1.0 - lambda);
    }
    return std::pair{loss, std::move(grad)};
  };
  return train_adapters(model, public_set.x, epochs, batch, optim, hyper, rng, objective);
}

std::vector<double> shard_weights(std::span<const ClientState> clients) {
  std::vector<double> w;
  w.reserve(clients.size());
  for (const auto& c : clients) w.push_back(static_cast<double>(c.shard.size()));
  return w;
}

RoundResult fed_round(ServerState& server, std::span<ClientState> clients,
                      const RoundConfig& cfg) {
  check_client_ids(clients);
  Channel channel(clients.size(), cfg.cost);

  // a1: distribute the global adapters.
  const AdapterUpdate global{server.model.export_adapters()};
  for (auto& c : clients) {
    channel.downlink(c.id, global);
    c.model.import_adapters(global.bundle);
  }

  // a2: local fine-tuning.
  for_each_client(clients, cfg.parallel_clients, [&](ClientState& c) {
    channel.cost().clients[c.id].flops +=
        local_finetune(c, cfg.local_epochs, cfg.batch_size, cfg.optim).flops;
  });

  // a3: upload; a4: aggregate into the global model.
  std::vector<std::vector<double>> uploads;
  uploads.reserve(clients.size());
  for (auto& c : clients) {
    AdapterUpdate up{c.model.export_adapters()};
    channel.uplink(c.id, up);
    uploads.push_back(std::move(up.bundle.values));
  }
  const auto weights = shard_weights(clients);
  server.model.import_adapters(aggregate_adapters(uploads, weights), global.bundle.manifest);

  return {channel.cost(), channel.trace(), {}};
}

RoundResult kd_round(ServerState& server, std::span<ClientState> clients, const KdConfig& kd,
                     const RoundConfig& cfg) {
  const Dataset& pub = server.public_set;
  if (pub.empty()) throw ConfigError("kd round requires a nonempty public set");
  check_client_ids(clients);
  Channel channel(clients.size(), cfg.cost);

  // b1: local fine-tuning; b2: logits on the public set.
  std::vector<LogitBatch> local(clients.size());
  for_each_client(clients, cfg.parallel_clients, [&](ClientState& c) {
    std::uint64_t flops = local_finetune(c, cfg.local_epochs, cfg.batch_size, cfg.optim).flops;
    local[c.id] = client_logits(c, pub.x, &flops);
    channel.cost().clients[c.id].flops += flops;
  });

  // b3: upload logits; b4: aggregate.
  for (auto& c : clients) channel.uplink(c.id, local[c.id]);
  const LogitBatch teacher = aggregate_logits(local, shard_weights(clients));

  // b5: server distillation; b6: global logits.
  channel.cost().server_flops += distill(server.model, teacher, pub, kd, kd.server_epochs,
                                         cfg.batch_size, server.optim, cfg.optim, server.rng)
                                     .flops;
  const LogitBatch global{server.model.predict(pub.x)};
  channel.cost().server_flops += flops_model(server.model.arch(), server.model.lora(), pub.size(),
                                             0, server.model.depth(), Phase::kEval);

  // b7: distribute; b8: client-side distillation.
  for (auto& c : clients) channel.downlink(c.id, global);
  for_each_client(clients, cfg.parallel_clients, [&](ClientState& c) {
    channel.cost().clients[c.id].flops +=
        distill(c.model, global, pub, kd, kd.client_epochs, cfg.batch_size, c.optim, cfg.optim,
                c.rng)
            .flops;
  });

  return {channel.cost(), channel.trace(), {}};
}

RoundResult split_round(ServerState& server, std::span<ClientState> clients,
                        const SplitConfig& split, const RoundConfig& cfg) {
  const std::size_t k = split.split_point;
  const std::size_t depth = server.model.depth();
  split.validate(server.model.arch());
  check_client_ids(clients);
  if (cfg.batch_size == 0) throw ConfigError("batch size must be >= 1");
  server.split_point = k;

  Channel channel(clients.size(), cfg.cost);
  RoundResult result;
  const Arch& arch = server.model.arch();
  const LoraConfig& lora = server.model.lora();

  for (auto& c : clients) {
    if (split.samples_per_round > c.shard.size()) {
      throw ConfigError("split.samples_per_round " + std::to_string(split.samples_per_round) +
                        " exceeds client " + std::to_string(c.id) + " shard size " +
                        std::to_string(c.shard.size()));
    }
    std::vector<std::size_t> order(c.shard.size());
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), c.rng);
      const std::size_t ts = split.samples_per_round;
      for (std::size_t start = 0; start < ts; start += cfg.batch_size) {
        std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, ts - start));

        // c1, c2: client prefix forward; activations and labels go up.
        ForwardResult prefix = c.model.forward_range(c.shard.x.gather_rows(idx), 0, k,
                                                     Mode::kTrain, &c.rng);
        ActivationBatch act{std::move(prefix.output), gather_labels(c.shard.y, idx)};
        channel.uplink(c.id, act);

        // c3: server suffix forward, loss, backward, update.
        ForwardResult suffix =
            server.model.forward_range(act.activations, k, depth, Mode::kTrain, &server.rng);
        result.server_batch_losses.push_back(
            cross_entropy(softmax_rows(suffix.output), act.labels));
        BackwardResult sb = server.model.backward_range(
            suffix.tape, cross_entropy_logits_grad(suffix.output, act.labels));
        adam_update(server.model, k, depth, sb.adapter_grads, server.optim, cfg.optim);
        channel.cost().server_flops += flops_model(arch, lora, idx.size(), k, depth, Phase::kTrain);

        // c4: activation gradients go down; c5: client prefix backward, update.
        GradientBatch grad{std::move(sb.input_grad)};
        channel.downlink(c.id, grad);
        BackwardResult cb = c.model.backward_range(prefix.tape, grad.gradients, false);
        adam_update(c.model, 0, k, cb.adapter_grads, c.optim, cfg.optim);
        channel.cost().clients[c.id].flops += flops_model(arch, lora, idx.size(), 0, k, Phase::kTrain);
      }
    }
  }

  // cc1: upload prefix adapters; cc2: aggregate; cc3: redistribute; cc4: replace.
  std::vector<std::vector<double>> uploads;
  uploads.reserve(clients.size());
  const AdapterManifest prefix_manifest = server.model.manifest(0, k);
  for (auto& c : clients) {
    AdapterUpdate up{c.model.export_adapters(0, k)};
    channel.uplink(c.id, up);
    uploads.push_back(std::move(up.bundle.values));
  }
  const AdapterUpdate merged{
      {aggregate_adapters(uploads, shard_weights(clients)), prefix_manifest}};
  server.model.import_adapters(merged.bundle);
  for (auto& c : clients) {
    channel.downlink(c.id, merged);
    c.model.import_adapters(merged.bundle);
  }

  result.cost = channel.cost();
  result.trace = channel.trace();
  return result;
}

}  // namespace fedsim
