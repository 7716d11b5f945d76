#include <doctest.h>

#include <algorithm>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/protocols.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fedsim;
using testutil::max_abs_diff;
using testutil::random_matrix;

namespace {

struct Setup {
  ServerState server;
  std::vector<ClientState> clients;
};

// Small federation: every party shares the same frozen base and adapters.
Setup make_setup(const Arch& arch, const LoraConfig& lora, std::size_t n_clients,
                 std::size_t per_client, std::size_t n_public, std::uint64_t seed) {
  const std::size_t n_train = n_clients * per_client + n_public;
  auto tt = synth_classification(n_train * 5 / 4 + 10, arch.input_width(), arch.classes(), 4.0,
                                 seed);
  auto ps = split_public(tt.train, n_public, seed + 1);
  std::vector<std::size_t> keep(n_clients * per_client);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  auto shards =
      partition_clients(ps.remainder.subset(keep), PartitionSpec{n_clients, PartitionStrategy::kIid, 0.5, seed});
  Setup s{ServerState{LayeredNet(arch, lora, seed), {}, Rng(seed + 2), ps.public_set, 1}, {}};
  for (std::size_t i = 0; i < n_clients; ++i) {
    s.clients.push_back(ClientState{i, LayeredNet(arch, lora, seed), shards[i], {}, Rng(seed + 100 + i)});
  }
  return s;
}

LoraConfig lora_all(const Arch& arch, std::size_t r, double dropout = 0.1) {
  return LoraConfig{r, 32.0, dropout, LoraConfig::all_layers(arch)};
}

std::vector<MessageKind> kinds(const std::vector<MessageRecord>& trace) {
  std::vector<MessageKind> out;
  for (const auto& r : trace) out.push_back(r.kind);
  return out;
}

RoundConfig round_cfg(std::size_t batch = 32) {
  RoundConfig cfg;
  cfg.batch_size = batch;
  return cfg;
}

}  // namespace

TEST_SUITE("protocols") {

TEST_CASE("payload scalars per message kind") {
  const Arch arch{{6, 8, 4}};
  LayeredNet net(arch, LoraConfig{2, 8, 0.0, {1, 2}}, 0);
  CHECK(payload_scalars(AdapterUpdate{net.export_adapters()}) == 2 * (6 + 8) + 2 * (8 + 4));
  CHECK(payload_scalars(LogitBatch{Matrix(5002, 77)}) == 385154);
  CHECK(payload_scalars(ActivationBatch{Matrix(32, 64), std::vector<int>(32, 0)}) == 2080);
  CHECK(payload_scalars(GradientBatch{Matrix(32, 64)}) == 2048);
  CHECK(to_string(kind_of(LogitBatch{})) == "logits");
  CHECK(to_string(MessageKind::kActivationBatch) == "activations");
}

TEST_CASE("channel charges the right party") {
  Channel ch(2, CostModelParams{4});
  ch.uplink(1, LogitBatch{Matrix(3, 10)});
  ch.downlink(0, GradientBatch{Matrix(2, 5)});
  CHECK(ch.cost().clients[1].up_bytes == 120);
  CHECK(ch.cost().clients[0].down_bytes == 40);
  CHECK(ch.cost().clients[0].up_bytes == 0);
  REQUIRE(ch.trace().size() == 2);
  CHECK(ch.trace()[0] == MessageRecord{Direction::kUplink, 1, MessageKind::kLogitBatch, 30});
  CHECK_THROWS(ch.uplink(2, LogitBatch{Matrix(1, 1)}));
}

TEST_CASE("adapter aggregation examples") {
  const std::vector<double> u{0.1, -2.5, 3.3};
  const std::vector<std::vector<double>> same{u, u, u};
  CHECK(aggregate_adapters(same, std::vector<double>{1, 1, 1}) == u);
  CHECK(aggregate_adapters(same, std::vector<double>{3, 1, 7}) == u);

  const std::vector<std::vector<double>> pair{{0.0, 0.0}, {2.0, 2.0}};
  CHECK(aggregate_adapters(pair, std::vector<double>{1, 1}) == std::vector<double>{1.0, 1.0});
  CHECK(aggregate_adapters(pair, std::vector<double>{1, 0}) == pair[0]);
  CHECK(aggregate_adapters(pair, std::vector<double>{0, 5}) == pair[1]);
  CHECK(aggregate_adapters(pair, std::vector<double>{1, 3}) == std::vector<double>{1.5, 1.5});

  CHECK_THROWS_AS(aggregate_adapters(std::vector<std::vector<double>>{{1.0}, {1.0, 2.0}},
                                     std::vector<double>{1, 1}),
                  ShapeError);
  CHECK_THROWS(aggregate_adapters(pair, std::vector<double>{0, 0}));
  CHECK_THROWS(aggregate_adapters(pair, std::vector<double>{1, -1}));
  CHECK_THROWS(aggregate_adapters(pair, std::vector<double>{1}));
}

TEST_CASE("aggregation is permutation invariant") {
  std::vector<std::vector<double>> ups;
  std::vector<LogitBatch> logits;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Matrix m = random_matrix(1, 50, s);
    ups.emplace_back(m.values().begin(), m.values().end());
    logits.push_back({random_matrix(6, 5, 10 + s)});
  }
  const std::vector<double> w(4, 1.0);
  const auto base = aggregate_adapters(ups, w);
  const auto base_logits = aggregate_logits(logits, w);
  std::vector<std::size_t> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<std::vector<double>> pu;
    std::vector<LogitBatch> pl;
    for (std::size_t i : perm) {
      pu.push_back(ups[i]);
      pl.push_back(logits[i]);
    }
    CHECK(max_abs_diff(aggregate_adapters(pu, w), base) < 1e-12);
    CHECK(max_abs_diff(aggregate_logits(pl, w).logits, base_logits.logits) < 1e-12);
  }

  // Independent mean.
  std::vector<double> mean(50, 0.0);
  for (const auto& u : ups)
    for (std::size_t i = 0; i < 50; ++i) mean[i] += u[i] / 4.0;
  CHECK(max_abs_diff(base, mean) < 1e-12);
}

TEST_CASE("logit aggregation examples") {
  const LogitBatch a{Matrix(2, 3, 0.0)};
  const LogitBatch b{Matrix(2, 3, 2.0)};
  CHECK(aggregate_logits(std::vector<LogitBatch>{a, b}, std::vector<double>{1, 1}).logits ==
        Matrix(2, 3, 1.0));
  CHECK(aggregate_logits(std::vector<LogitBatch>{b, b}, std::vector<double>{2, 1}).logits ==
        b.logits);
  CHECK_THROWS_AS(aggregate_logits(std::vector<LogitBatch>{a, LogitBatch{Matrix(3, 3)}},
                                   std::vector<double>{1, 1}),
                  ShapeError);
}

TEST_CASE("local fine-tuning") {
  const Arch arch{{8, 16, 2}};
  auto s = make_setup(arch, lora_all(arch, 2), 1, 400, 10, 3);
  ClientState& c = s.clients[0];
  const auto before = c.model.export_adapters().values;

  const TrainStats none = local_finetune(c, 0, 32, OptimHyper{});
  CHECK(none.flops == 0);
  CHECK(c.model.export_adapters().values == before);

  const double loss0 = oracle::ce_loss(c.model, c.shard.x, c.shard.y);
  const TrainStats one = local_finetune(c, 1, 32, OptimHyper{});
  CHECK(one.batch_losses.size() == 13);
  CHECK(one.flops == flops_model(arch, c.model.lora(), 400, 0, 2, Phase::kTrain));
  CHECK(oracle::ce_loss(c.model, c.shard.x, c.shard.y) < loss0);

  auto twin = make_setup(arch, lora_all(arch, 2), 1, 400, 10, 3);
  local_finetune(twin.clients[0], 0, 32, OptimHyper{});
  local_finetune(twin.clients[0], 1, 32, OptimHyper{});
  CHECK(twin.clients[0].model.export_adapters().values == c.model.export_adapters().values);
  CHECK(c.model.frozen_fingerprint() == twin.server.model.frozen_fingerprint());
}

TEST_CASE("fed round") {
  const Arch arch{{8, 16, 4}};
  SUBCASE("single client is copied exactly") {
    auto s = make_setup(arch, lora_all(arch, 2), 1, 90, 10, 1);
    fed_round(s.server, s.clients, round_cfg());
    CHECK(s.server.model.export_adapters().values == s.clients[0].model.export_adapters().values);
  }
  SUBCASE("zero local epochs keep the global adapters") {
    auto s = make_setup(arch, lora_all(arch, 2), 3, 30, 10, 2);
    const auto before = s.server.model.export_adapters().values;
    RoundConfig cfg = round_cfg();
    cfg.local_epochs = 0;
    fed_round(s.server, s.clients, cfg);
    CHECK(s.server.model.export_adapters().values == before);
  }
  SUBCASE("ledger and trace") {
    auto s = make_setup(arch, lora_all(arch, 2), 3, 30, 10, 2);
    const auto res = fed_round(s.server, s.clients, round_cfg());
    const std::uint64_t payload = adapter_payload_bytes(s.server.model.lora(), arch, CostModelParams{});
    CHECK(payload == 4 * 2 * ((8 + 16) + (16 + 4)));
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(res.cost.clients[i].up_bytes == payload);
      CHECK(res.cost.clients[i].down_bytes == payload);
      CHECK(res.cost.clients[i].flops == flops_model(arch, s.server.model.lora(), 30, 0, 2, Phase::kTrain));
    }
    CHECK(res.cost.server_flops == 0);
    for (auto k : kinds(res.trace)) CHECK(k == MessageKind::kAdapterUpdate);
    CHECK(res.trace.size() == 6);

    auto doubled = make_setup(arch, lora_all(arch, 4), 3, 30, 10, 2);
    const auto res2 = fed_round(doubled.server, doubled.clients, round_cfg());
    CHECK(res2.cost.clients[0].up_bytes == 2 * payload);
  }
  SUBCASE("parallel and sequential clients agree bit for bit") {
    auto a = make_setup(arch, lora_all(arch, 2), 3, 40, 10, 5);
    auto b = make_setup(arch, lora_all(arch, 2), 3, 40, 10, 5);
    RoundConfig par = round_cfg();
    RoundConfig seq = round_cfg();
    seq.parallel_clients = false;
    for (int r = 0; r < 2; ++r) {
      fed_round(a.server, a.clients, par);
      fed_round(b.server, b.clients, seq);
    }
    CHECK(a.server.model.export_adapters().values == b.server.model.export_adapters().values);
  }
  SUBCASE("client ids must be dense") {
    auto s = make_setup(arch, lora_all(arch, 2), 2, 30, 10, 2);
    s.clients[1].id = 5;
    CHECK_THROWS(fed_round(s.server, s.clients, round_cfg()));
  }
}

TEST_CASE("client logits") {
  const Arch arch{{8, 16, 5}};
  auto s = make_setup(arch, lora_all(arch, 2), 1, 30, 40, 4);
  std::uint64_t flops = 0;
  const LogitBatch a = client_logits(s.clients[0], s.server.public_set.x, &flops);
  CHECK(a.logits.rows() == 40);
  CHECK(a.logits.cols() == 5);
  CHECK(flops == flops_model(arch, s.clients[0].model.lora(), 40, 0, 2, Phase::kEval));
  LayeredNet base(arch, LoraConfig{1, 1.0, 0.0, {1}}, 4);
  CHECK(a.logits == base.predict(s.server.public_set.x));
  CHECK(client_logits(s.clients[0], s.server.public_set.x).logits == a.logits);
  CHECK_THROWS_AS(client_logits(s.clients[0], Matrix(3, 7)), ShapeError);
}

TEST_CASE("distillation") {
  const Arch arch{{8, 16, 4}};
  const KdConfig kd{40, 2.0, 1.0, 1, 1};

  SUBCASE("self distillation is a fixed point") {
    auto s = make_setup(arch, lora_all(arch, 2, 0.0), 1, 30, 40, 6);
    local_finetune(s.clients[0], 1, 16, OptimHyper{});
    LayeredNet& m = s.clients[0].model;
    const auto before = m.export_adapters().values;
    const LogitBatch self{m.predict(s.server.public_set.x)};
    AdamState opt;
    Rng rng(1);
    distill(m, self, s.server.public_set, kd, 2, 16, opt, OptimHyper{}, rng);
    CHECK(m.export_adapters().values == before);
    CHECK(opt.t == 6);
  }

  SUBCASE("lambda zero is supervised fine-tuning on the public set") {
    auto s = make_setup(arch, lora_all(arch, 2), 1, 30, 40, 7);
    LayeredNet model = s.server.model;
    const LogitBatch teacher{random_matrix(40, 4, 3)};
    AdamState opt;
    Rng rng(17);
    KdConfig ce_only = kd;
    ce_only.lambda = 0.0;
    const TrainStats d = distill(model, teacher, s.server.public_set, ce_only, 2, 16, opt, OptimHyper{}, rng);

    ClientState ref{0, s.server.model, s.server.public_set, {}, Rng(17)};
    const TrainStats l = local_finetune(ref, 2, 16, OptimHyper{});
    CHECK(d.batch_losses == l.batch_losses);
    CHECK(d.flops == l.flops);
    CHECK(model.export_adapters().values == ref.model.export_adapters().values);
  }

  SUBCASE("one epoch lowers the distillation objective") {
    auto s = make_setup(arch, lora_all(arch, 2, 0.0), 1, 30, 200, 8);
    LayeredNet teacher_net(arch, lora_all(arch, 2, 0.0), 8);
    auto tb = teacher_net.export_adapters();
    const Matrix noise = random_matrix(1, tb.values.size(), 4, 0.5);
    for (std::size_t i = 0; i < tb.values.size(); ++i) tb.values[i] += noise.values()[i];
    teacher_net.import_adapters(tb);
    const LogitBatch teacher{teacher_net.predict(s.server.public_set.x)};

    LayeredNet& student = s.server.model;
    const double before = kl_distill_loss(teacher.logits, student.predict(s.server.public_set.x), 2.0);
    AdamState opt;
    OptimHyper hyper;
    hyper.lr = 0.01;
    distill(student, teacher, s.server.public_set, kd, 1, 16, opt, hyper, s.server.rng);
    const double after = kl_distill_loss(teacher.logits, student.predict(s.server.public_set.x), 2.0);
    CHECK(after < before);
  }

  SUBCASE("teacher shape is checked") {
    auto s = make_setup(arch, lora_all(arch, 2), 1, 30, 40, 9);
    AdamState opt;
    CHECK_THROWS_AS(distill(s.server.model, LogitBatch{Matrix(39, 4)}, s.server.public_set, kd, 1,
                            16, opt, OptimHyper{}, s.server.rng),
                    ShapeError);
  }
}

TEST_CASE("kd round") {
  const Arch arch{{8, 16, 6}};
  auto s = make_setup(arch, lora_all(arch, 2), 3, 30, 50, 10);
  const KdConfig kd{50, 1.0, 0.5, 1, 1};
  const auto client_before = s.clients[0].model.export_adapters().values;
  const auto res = kd_round(s.server, s.clients, kd, round_cfg(16));
  const std::uint64_t bytes = logits_payload_bytes(50, 6, CostModelParams{});
  for (const auto& c : res.cost.clients) {
    CHECK(c.up_bytes == bytes);
    CHECK(c.down_bytes == bytes);
    const LoraConfig& lora = s.clients[0].model.lora();
    CHECK(c.flops == flops_model(arch, lora, 30, 0, 2, Phase::kTrain) +
                         flops_model(arch, lora, 50, 0, 2, Phase::kEval) +
                         flops_model(arch, lora, 50, 0, 2, Phase::kTrain));
  }
  CHECK(res.cost.server_flops == flops_model(arch, s.server.model.lora(), 50, 0, 2, Phase::kTrain) +
                                     flops_model(arch, s.server.model.lora(), 50, 0, 2, Phase::kEval));
  CHECK(res.trace.size() == 6);
  for (auto k : kinds(res.trace)) CHECK(k == MessageKind::kLogitBatch);
  CHECK(s.clients[0].model.export_adapters().values != client_before);

  auto half = make_setup(arch, lora_all(arch, 2), 3, 30, 25, 10);
  const auto res_half = kd_round(half.server, half.clients, KdConfig{25, 1.0, 0.5, 1, 1}, round_cfg(16));
  CHECK(2 * res_half.cost.total_up() == res.cost.total_up());
  CHECK(2 * res_half.cost.total_down() == res.cost.total_down());

  auto par = make_setup(arch, lora_all(arch, 2), 3, 30, 50, 10);
  RoundConfig seq = round_cfg(16);
  seq.parallel_clients = false;
  kd_round(par.server, par.clients, kd, seq);
  CHECK(par.server.model.export_adapters().values == s.server.model.export_adapters().values);

  ServerState bare = s.server;
  bare.public_set = Dataset{};
  CHECK_THROWS_AS(kd_round(bare, s.clients, kd, round_cfg()), ConfigError);
}

TEST_CASE("split round") {
  const Arch arch{{8, 64, 16, 5}};
  auto s = make_setup(arch, lora_all(arch, 2), 3, 100, 10, 11);
  const SplitConfig split{1, 70};
  const auto res = split_round(s.server, s.clients, split, round_cfg(32));

  // 70 samples in batches of 32: 32, 32, 6.
  const std::uint64_t prefix = adapter_payload_bytes(s.server.model.lora(), arch, CostModelParams{}, 0, 1);
  const SplitTraffic t = split_traffic_bytes(70, 64, CostModelParams{});
  for (const auto& c : res.cost.clients) {
    CHECK(c.up_bytes == t.uplink + prefix);
    CHECK(c.down_bytes == t.downlink + prefix);
    CHECK(c.flops == flops_model(arch, s.server.model.lora(), 70, 0, 1, Phase::kTrain));
  }
  CHECK(res.cost.server_flops == 3 * flops_model(arch, s.server.model.lora(), 70, 1, 3, Phase::kTrain));
  CHECK(res.server_batch_losses.size() == 9);

  std::vector<MessageRecord> expected;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t n : {32, 32, 6}) {
      expected.push_back({Direction::kUplink, c, MessageKind::kActivationBatch, n * 65});
      expected.push_back({Direction::kDownlink, c, MessageKind::kGradientBatch, n * 64});
    }
  }
  for (std::size_t c = 0; c < 3; ++c)
    expected.push_back({Direction::kUplink, c, MessageKind::kAdapterUpdate, prefix / 4});
  for (std::size_t c = 0; c < 3; ++c)
    expected.push_back({Direction::kDownlink, c, MessageKind::kAdapterUpdate, prefix / 4});
  CHECK(res.trace == expected);

  // Every party ends the round on the aggregated prefix.
  const auto server_prefix = s.server.model.export_adapters(0, 1).values;
  for (const auto& c : s.clients) CHECK(c.model.export_adapters(0, 1).values == server_prefix);

  auto doubled = make_setup(arch, lora_all(arch, 2), 3, 150, 10, 11);
  const auto res2 = split_round(doubled.server, doubled.clients, SplitConfig{1, 140}, round_cfg(32));
  CHECK(res2.cost.clients[1].up_bytes - prefix == 2 * (res.cost.clients[1].up_bytes - prefix));
  CHECK(res2.cost.clients[1].down_bytes - prefix == 2 * (res.cost.clients[1].down_bytes - prefix));

  CHECK_THROWS_AS(split_round(s.server, s.clients, SplitConfig{1, 101}, round_cfg()), ConfigError);
  CHECK_THROWS_AS(split_round(s.server, s.clients, SplitConfig{3, 10}, round_cfg()), ConfigError);
  CHECK_THROWS_AS(split_round(s.server, s.clients, SplitConfig{0, 10}, round_cfg()), ConfigError);
}

TEST_CASE("split training matches monolithic training") {
  for (std::size_t k : {1, 2}) {
    CAPTURE(k);
    const auto cmp = oracle::split_vs_monolithic({32, 64, 64, 10}, k, 20, 32, 5);
    CHECK(cmp.batches == 20);
    CHECK(cmp.max_abs_diff < 1e-9);
  }
  const auto deep = oracle::split_vs_monolithic({6, 9, 8, 7, 4}, 3, 10, 16, 2);
  CHECK(deep.max_abs_diff < 1e-9);
}

}  // TEST_SUITE
