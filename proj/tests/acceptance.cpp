// Acceptance runner: one PASS/FAIL line per criterion, details indented
// underneath. Usage: fedsim_acceptance <fedsim-binary> <work-dir>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/sim.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(int id, bool ok, const std::string& what) {
  std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << id << ": " << what << std::endl;
  if (!ok) ++failures;
}

void detail(const std::string& text) { std::cout << "      " << text << std::endl; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

SimConfig one_round(Framework f) {
  SimConfig c;
  c.framework = f;
  c.rounds = 1;
  c.seeds = {0};
  return c;
}

// Independent closed forms, written from the layer widths alone.
std::uint64_t adapter_scalars(const std::vector<std::size_t>& dims, std::size_t r, std::size_t from,
                              std::size_t to) {
  std::uint64_t s = 0;
  for (std::size_t l = from + 1; l <= to; ++l) s += r * (dims[l - 1] + dims[l]);
  return s;
}

std::vector<std::size_t> batch_sizes(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> out;
  for (std::size_t start = 0; start < n; start += batch) out.push_back(std::min(batch, n - start));
  return out;
}

std::uint64_t scalars_of(const std::vector<MessageRecord>& trace, MessageKind kind, std::size_t client) {
  std::uint64_t s = 0;
  for (const auto& r : trace)
    if (r.kind == kind && r.client == client) s += r.scalars;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion_split_composition() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream what;
  for (std::size_t k : {1, 2}) {
    const auto cmp = oracle::split_vs_monolithic({32, 64, 64, 10}, k, 50, 32, 7);
    ok = ok && cmp.batches == 50 && cmp.max_abs_diff < 1e-9;
    what << "k=" << k << " max|dloss|=" << fmt(cmp.max_abs_diff) << " over " << cmp.batches
         << " batches; ";
  }
  const double dt = seconds_since(t0);
  verdict(1, ok && dt < 10.0, "split vs monolithic losses, " + what.str() + fmt(dt) + " s");
}

void criterion_gradient_oracle() {
  const auto t0 = Clock::now();
  const auto check = oracle::finite_difference_check({4, 5, 3}, 2, 0);
  const double dt = seconds_since(t0);
  verdict(2, check.max_rel_error < 1e-6 && dt < 5.0,
          "finite differences on [4,5,3] r=2, " + std::to_string(check.params) +
              " params, max rel err " + fmt(check.max_rel_error) + ", " + fmt(dt) + " s");
}

void criterion_ledger() {
  bool ok = true;
  const SimConfig fed_cfg = one_round(Framework::kFed);
  const auto dims = fed_cfg.arch(32, 10).dims;
  const std::size_t r = fed_cfg.lora.rank;
  const std::size_t bps = 4;

  const SeedRun fed = run_seed(fed_cfg, 0);
  const std::uint64_t fed_bytes = bps * adapter_scalars(dims, r, 0, dims.size() - 1);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& p = fed.ledger.rounds()[0].clients[c];
    ok = ok && p.up_bytes == fed_bytes && p.down_bytes == fed_bytes;
  }
  detail("fed: " + std::to_string(fed.ledger.rounds()[0].clients[0].up_bytes) + " bytes up, expected " +
         std::to_string(fed_bytes));

  for (std::size_t classes : {10, 77}) {
    SimConfig kd_cfg = one_round(Framework::kKd);
    kd_cfg.data.classes = classes;
    const SeedRun kd = run_seed(kd_cfg, 0);
    const std::uint64_t expected = bps * 5002 * classes;
    for (std::size_t c = 0; c < 3; ++c) {
      const auto& p = kd.ledger.rounds()[0].clients[c];
      ok = ok && p.up_bytes == expected && p.down_bytes == expected;
    }
    detail("kd C=" + std::to_string(classes) + ": " +
           std::to_string(kd.ledger.rounds()[0].clients[0].up_bytes) + " bytes each way, expected " +
           std::to_string(expected));
  }

  const SimConfig split_cfg = one_round(Framework::kSplit);
  const SeedRun split = run_seed(split_cfg, 0);
  const std::size_t k = split_cfg.split.split_point;
  std::uint64_t up = 0;
  std::uint64_t down = 0;
  for (std::size_t n : batch_sizes(split_cfg.split.samples_per_round, split_cfg.batch_size)) {
    up += n * (dims[k] + 1);
    down += n * dims[k];
  }
  const std::uint64_t prefix = adapter_scalars(dims, r, 0, k);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& p = split.ledger.rounds()[0].clients[c];
    ok = ok && p.up_bytes == bps * (up + prefix) && p.down_bytes == bps * (down + prefix);
  }
  detail("split: " + std::to_string(split.ledger.rounds()[0].clients[0].up_bytes) + " up / " +
         std::to_string(split.ledger.rounds()[0].clients[0].down_bytes) + " down, expected " +
         std::to_string(bps * (up + prefix)) + " / " + std::to_string(bps * (down + prefix)));
  verdict(3, ok, "per-client per-round ledger equals closed forms exactly");
}

void criterion_linearity() {
  bool ok = true;
  auto fed_bytes = [](std::size_t rank) {
    SimConfig c = one_round(Framework::kFed);
    c.lora.rank = rank;
    const SeedRun s = run_seed(c, 0);
    const auto& p = s.ledger.rounds()[0].clients[0];
    return p.up_bytes + p.down_bytes;
  };
  const auto f4 = fed_bytes(4);
  const auto f8 = fed_bytes(8);
  ok = ok && f8 == 2 * f4;
  detail("fed r=4 -> " + std::to_string(f4) + ", r=8 -> " + std::to_string(f8));

  auto kd_bytes = [](std::size_t pd) {
    SimConfig c = one_round(Framework::kKd);
    c.kd.public_size = pd;
    const SeedRun s = run_seed(c, 0);
    const auto& p = s.ledger.rounds()[0].clients[0];
    return p.up_bytes + p.down_bytes;
  };
  const auto k1 = kd_bytes(2501);
  const auto k2 = kd_bytes(5002);
  ok = ok && k2 == 2 * k1;
  detail("kd |PD|=2501 -> " + std::to_string(k1) + ", |PD|=5002 -> " + std::to_string(k2));

  auto split_bytes = [](std::size_t ts) {
    SimConfig c = one_round(Framework::kSplit);
    c.split.samples_per_round = ts;
    const SeedRun s = run_seed(c, 0);
    const auto& trace = s.traces[0];
    const std::uint64_t scalars = scalars_of(trace, MessageKind::kActivationBatch, 0) +
                                  scalars_of(trace, MessageKind::kGradientBatch, 0);
    const auto& p = s.ledger.rounds()[0].clients[0];
    const std::uint64_t adapters = 4 * scalars_of(trace, MessageKind::kAdapterUpdate, 0);
    if (p.up_bytes + p.down_bytes != 4 * scalars + adapters) return std::uint64_t{0};
    return 4 * scalars;
  };
  const auto s1 = split_bytes(800);
  const auto s2 = split_bytes(1600);
  ok = ok && s1 > 0 && s2 == 2 * s1;
  detail("split TS=800 -> " + std::to_string(s1) + " activation+gradient bytes, TS=1600 -> " +
         std::to_string(s2));
  verdict(4, ok, "doubling r, |PD| or TS exactly doubles the framework's traffic");
}

void criterion_ordering() {
  auto client_cost = [](const SimConfig& c) {
    const SeedRun s = run_seed(c, 0);
    return s.ledger.rounds()[0].clients[0];
  };
  const PartyCost fed = client_cost(one_round(Framework::kFed));
  const PartyCost kd = client_cost(one_round(Framework::kKd));
  const PartyCost split = client_cost(one_round(Framework::kSplit));
  SimConfig kd77_cfg = one_round(Framework::kKd);
  kd77_cfg.data.classes = 77;
  const PartyCost kd77 = client_cost(kd77_cfg);

  const bool flops_ok = kd.flops > fed.flops && fed.flops > split.flops;
  const auto comm = [](const PartyCost& p) { return p.up_bytes + p.down_bytes; };
  const bool comm_ok = comm(split) > comm(kd77) && comm(kd77) > comm(fed);
  detail("client FLOPs/round: kd " + std::to_string(kd.flops) + ", fed " + std::to_string(fed.flops) +
         ", split " + std::to_string(split.flops));
  detail("client bytes/round: split " + std::to_string(comm(split)) + ", kd(C=77) " +
         std::to_string(comm(kd77)) + ", fed " + std::to_string(comm(fed)));
  verdict(5, flops_ok && comm_ok, "FLOPs kd > fed > split and bytes split > kd(C=77) > fed");
}

void criterion_trends() {
  struct Case {
    std::string name;
    SimConfig cfg;
    double accuracy = 0.0;
    double seconds = 0.0;
  };
  std::vector<Case> cases;
  auto add = [&](std::string name, Framework f, auto tweak) {
    SimConfig c;
    c.framework = f;
    tweak(c);
    cases.push_back({std::move(name), c});
  };
  add("fed r=8", Framework::kFed, [](SimConfig&) {});
  add("fed r=1", Framework::kFed, [](SimConfig& c) { c.lora.rank = 1; });
  add("split", Framework::kSplit, [](SimConfig&) {});
  add("kd |PD|=5002", Framework::kKd, [](SimConfig&) {});
  add("kd |PD|=4000", Framework::kKd, [](SimConfig& c) { c.kd.public_size = 4000; });
  add("kd |PD|=250", Framework::kKd, [](SimConfig& c) { c.kd.public_size = 250; });

  bool fast = true;
  for (auto& c : cases) {
    const auto t0 = Clock::now();
    const RunReport r = run(c.cfg);
    c.seconds = seconds_since(t0);
    c.accuracy = r.mean.back().accuracy;
    fast = fast && c.seconds < 60.0;
    detail(c.name + ": mean final accuracy " + fmt(c.accuracy) + " (" + fmt(c.seconds) + " s)");
  }
  const bool a = cases[0].accuracy > cases[1].accuracy;
  const bool b = cases[4].accuracy > cases[5].accuracy;
  const bool c = cases[0].accuracy >= cases[2].accuracy && cases[2].accuracy >= cases[3].accuracy;
  detail(std::string("6a fed r=8 > r=1: ") + (a ? "yes" : "no") + "; 6b kd |PD|=4000 > 250: " +
         (b ? "yes" : "no") + "; 6c fed >= split >= kd: " + (c ? "yes" : "no") +
         "; every run < 60 s: " + (fast ? "yes" : "no"));
  verdict(6, a && b && c && fast, "seed-averaged 100-round trends");
}

void criterion_determinism(const fs::path& cli, const fs::path& work) {
  bool ok = true;
  for (const char* fw : {"fed", "kd", "split"}) {
    const fs::path cfg = work / (std::string(fw) + ".cfg");
    std::ofstream(cfg) << "framework = " << fw << "\ntrain.rounds = 3\n";
    std::string outputs[2];
    for (int i = 0; i < 2; ++i) {
      const fs::path out = work / (std::string(fw) + "_" + std::to_string(i));
      fs::remove_all(out);
      const std::string cmd = "\"" + cli.string() + "\" run --config \"" + cfg.string() +
                              "\" --out \"" + out.string() + "\" > /dev/null";
      if (std::system(cmd.c_str()) != 0) ok = false;
      outputs[i] = slurp(out / "metrics.csv");
    }
    const bool same = !outputs[0].empty() && outputs[0] == outputs[1];
    ok = ok && same;
    detail(std::string(fw) + ": metrics.csv " + std::to_string(outputs[0].size()) + " bytes, " +
           (same ? "identical" : "DIFFERENT"));
  }
  verdict(7, ok, "two CLI runs of the same config give byte-identical metrics.csv");
}

void criterion_protocol_shape() {
  bool ok = true;
  const SeedRun fed = run_seed(one_round(Framework::kFed), 0);
  for (const auto& r : fed.traces[0]) ok = ok && r.kind == MessageKind::kAdapterUpdate;
  ok = ok && fed.traces[0].size() == 6;
  detail("fed: " + std::to_string(fed.traces[0].size()) + " messages, adapters only");

  const SeedRun kd = run_seed(one_round(Framework::kKd), 0);
  for (const auto& r : kd.traces[0]) ok = ok && r.kind == MessageKind::kLogitBatch;
  ok = ok && kd.traces[0].size() == 6;
  detail("kd: " + std::to_string(kd.traces[0].size()) + " messages, logits only");

  const SimConfig split_cfg = one_round(Framework::kSplit);
  const SeedRun split = run_seed(split_cfg, 0);
  std::vector<std::pair<Direction, MessageKind>> expected;
  std::vector<std::size_t> who;
  const std::size_t n_batches = batch_sizes(split_cfg.split.samples_per_round, split_cfg.batch_size).size();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t b = 0; b < n_batches; ++b) {
      expected.push_back({Direction::kUplink, MessageKind::kActivationBatch});
      who.push_back(c);
      expected.push_back({Direction::kDownlink, MessageKind::kGradientBatch});
      who.push_back(c);
    }
  }
  for (Direction d : {Direction::kUplink, Direction::kDownlink}) {
    for (std::size_t c = 0; c < 3; ++c) {
      expected.push_back({d, MessageKind::kAdapterUpdate});
      who.push_back(c);
    }
  }
  const auto& t = split.traces[0];
  bool split_ok = t.size() == expected.size();
  for (std::size_t i = 0; split_ok && i < t.size(); ++i) {
    split_ok = t[i].direction == expected[i].first && t[i].kind == expected[i].second &&
               t[i].client == who[i];
  }
  ok = ok && split_ok;
  detail("split: " + std::to_string(t.size()) + " messages, " + std::to_string(n_batches) +
         " activation/gradient pairs per client then one adapter exchange");
  verdict(8, ok, "message-type traces per framework");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: fedsim_acceptance <fedsim-binary> <work-dir>\n";
    return 2;
  }
  tune_allocator();
  const fs::path cli = argv[1];
  const fs::path work = argv[2];
  fs::create_directories(work);

  criterion_split_composition();
  criterion_gradient_oracle();
  criterion_ledger();
  criterion_linearity();
  criterion_ordering();
  criterion_trends();
  criterion_determinism(cli, work);
  criterion_protocol_shape();

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
