#include "fedsim/sim.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {
namespace {

// Sub-stream ids for derive_seed.
constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kPublicStream = 2;
constexpr std::uint64_t kPartitionStream = 3;
constexpr std::uint64_t kModelStream = 4;
constexpr std::uint64_t kServerStream = 5;
constexpr std::uint64_t kTestSplitStream = 6;
constexpr std::uint64_t kClientStreamBase = 100;

RoundConfig round_config(const SimConfig& cfg) {
  return {cfg.local_epochs, cfg.batch_size, cfg.optim, cfg.cost, cfg.parallel};
}

RoundMetrics metrics_for(std::size_t round, double accuracy, const RoundCost& cost) {
  const double k = static_cast<double>(std::max<std::size_t>(cost.clients.size(), 1));
  return {round,
          accuracy,
          static_cast<double>(cost.total_up()) / k,
          static_cast<double>(cost.total_down()) / k,
          static_cast<double>(cost.total_client_flops()) / k,
          static_cast<double>(cost.server_flops)};
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string metrics_row(const std::string& seed, const RoundMetrics& m) {
  std::ostringstream os;
  os << m.round << ',' << seed << ',' << format_number(m.accuracy) << ','
     << format_number(m.up_bytes_per_client) << ',' << format_number(m.down_bytes_per_client)
     << ',' << format_number(m.client_flops) << ',' << format_number(m.server_flops);
  return os.str();
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, const std::filesystem::path& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw IoError(path.string() + ":" + std::to_string(line) + ": bad numeric cell '" + cell + "'");
  }
}

std::string join_names(const std::vector<RunSummary>& runs) {
  std::string out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (i) out += " > ";
    out += runs[i].name + " (" + runs[i].framework + ")";
  }
  return out;
}

}  // namespace

double evaluate(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() != labels.size()) {
    throw ShapeError("evaluate: " + std::to_string(labels.size()) + " labels for " +
                     logits.shape_string() + " logits");
  }
  if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const LayeredNet& model, const Dataset& test) {
  return evaluate(model.predict(test.x), test.y);
}

Federation build_federation(const SimConfig& cfg, std::uint64_t seed) {
  Dataset train;
  Dataset test;
  if (cfg.data.source == DataSource::kSynthetic) {
    auto tt = synth_classification(cfg.data.n, cfg.data.features, cfg.data.classes,
                                   cfg.data.separation, derive_seed(seed, kDataStream));
    train = std::move(tt.train);
    test = std::move(tt.test);
  } else {
    train = load_csv(cfg.data.train_csv);
    if (!cfg.data.test_csv.empty()) {
      test = load_csv(cfg.data.test_csv);
      if (test.features() != train.features()) {
        throw ConfigError("data.test_csv: feature width differs from data.train_csv");
      }
      const std::size_t classes = std::max(train.classes, test.classes);
      train.classes = test.classes = classes;
    } else {
      if (train.size() < 5) throw ConfigError("data.train_csv: too few rows for a test cut");
      const std::size_t n_test = train.size() - train.size() * 4 / 5;
      auto cut = split_public(train, n_test, derive_seed(seed, kTestSplitStream));
      test = std::move(cut.public_set);
      train = std::move(cut.remainder);
    }
  }

  const Arch arch = cfg.arch(train.features(), train.classes);
  const LoraConfig lora = cfg.resolved_lora(arch);
  try {
    arch.validate();
    lora.validate(arch);
    if (cfg.framework == Framework::kSplit) cfg.split.validate(arch);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model/lora/split: ") + e.what());
  }

  if (cfg.kd.public_size >= train.size()) {
    throw ConfigError("kd.public_size: " + std::to_string(cfg.kd.public_size) +
                      " is not smaller than the training set (" + std::to_string(train.size()) + ")");
  }
  auto split = split_public(train, cfg.kd.public_size, derive_seed(seed, kPublicStream));
  PartitionSpec spec{cfg.n_clients, cfg.partition, cfg.dirichlet_beta,
                     derive_seed(seed, kPartitionStream)};
  auto shards = partition_clients(split.remainder, spec);

  const std::uint64_t model_seed = derive_seed(seed, kModelStream);
  Federation fed{arch, lora, std::move(test),
                 ServerState{LayeredNet(arch, lora, model_seed), {}, Rng(derive_seed(seed, kServerStream)),
                             {}, cfg.split.split_point},
                 {}};
  if (cfg.framework == Framework::kKd) fed.server.public_set = std::move(split.public_set);
  fed.clients.reserve(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (cfg.framework == Framework::kSplit && cfg.split.samples_per_round > shards[i].size()) {
      throw ConfigError("split.samples_per_round: " + std::to_string(cfg.split.samples_per_round) +
                        " exceeds client " + std::to_string(i) + " shard size " +
                        std::to_string(shards[i].size()));
    }
    fed.clients.push_back(ClientState{i, LayeredNet(arch, lora, model_seed), std::move(shards[i]), {},
                                      Rng(derive_seed(seed, kClientStreamBase + i))});
  }
  return fed;
}

RoundResult run_round(const SimConfig& cfg, Federation& fed) {
  const RoundConfig rc = round_config(cfg);
  switch (cfg.framework) {
    case Framework::kFed: return fed_round(fed.server, fed.clients, rc);
    case Framework::kKd: return kd_round(fed.server, fed.clients, cfg.kd, rc);
    case Framework::kSplit: return split_round(fed.server, fed.clients, cfg.split, rc);
  }
  throw std::logic_error("unknown framework");
}

SeedRun run_seed(const SimConfig& cfg, std::uint64_t seed) {
  Federation fed = build_federation(cfg, seed);
  SeedRun out;
  out.seed = seed;
  out.ledger = CostLedger(fed.clients.size());
  out.metrics.push_back(metrics_for(0, evaluate(fed.server.model, fed.test), RoundCost(fed.clients.size())));
  for (std::size_t r = 1; r <= cfg.rounds; ++r) {
    RoundResult res = run_round(cfg, fed);
    out.ledger.record(res.cost);
    out.metrics.push_back(metrics_for(r, evaluate(fed.server.model, fed.test), res.cost));
    out.traces.push_back(std::move(res.trace));
    out.server_batch_losses.insert(out.server_batch_losses.end(), res.server_batch_losses.begin(),
                                   res.server_batch_losses.end());
  }
  return out;
}

std::vector<RoundMetrics> average_series(std::span<const SeedRun> runs) {
  if (runs.empty()) return {};
  const std::size_t len = runs.front().metrics.size();
  std::vector<RoundMetrics> mean(len);
  const double k = static_cast<double>(runs.size());
  for (std::size_t r = 0; r < len; ++r) {
    RoundMetrics& m = mean[r];
    m.round = runs.front().metrics[r].round;
    for (const auto& run : runs) {
      const RoundMetrics& x = run.metrics.at(r);
      m.accuracy += x.accuracy;
      m.up_bytes_per_client += x.up_bytes_per_client;
      m.down_bytes_per_client += x.down_bytes_per_client;
      m.client_flops += x.client_flops;
      m.server_flops += x.server_flops;
    }
    m.accuracy /= k;
    m.up_bytes_per_client /= k;
    m.down_bytes_per_client /= k;
    m.client_flops /= k;
    m.server_flops /= k;
  }
  return mean;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

RunReport run(const SimConfig& cfg) {
  cfg.validate();
  RunReport report;
  report.config = cfg;
  if (cfg.parallel && cfg.seeds.size() > 1) {
    std::vector<std::future<SeedRun>> jobs;
    for (std::uint64_t s : cfg.seeds) {
      jobs.push_back(std::async(std::launch::async, [&cfg, s] { return run_seed(cfg, s); }));
    }
    for (auto& j : jobs) report.seeds.push_back(j.get());
  } else {
    for (std::uint64_t s : cfg.seeds) report.seeds.push_back(run_seed(cfg, s));
  }
  report.mean = average_series(report.seeds);
  return report;
}

std::string metrics_csv(const RunReport& report) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& s : report.seeds) {
    for (const auto& m : s.metrics) os << metrics_row(std::to_string(s.seed), m) << '\n';
  }
  for (const auto& m : report.mean) os << metrics_row("mean", m) << '\n';
  return os.str();
}

std::string run_summary(const RunReport& report) {
  std::ostringstream os;
  const SimConfig& c = report.config;
  os << "framework: " << to_string(c.framework) << '\n';
  os << "clients: " << c.n_clients << "  rounds: " << c.rounds << "  seeds:";
  for (auto s : c.seeds) os << ' ' << s;
  os << '\n';
  if (report.mean.empty()) return os.str();
  const RoundMetrics& last = report.mean.back();
  os << "final mean accuracy: " << format_number(last.accuracy) << '\n';
  for (const auto& s : report.seeds) {
    os << "  seed " << s.seed << ": " << format_number(s.metrics.back().accuracy) << '\n';
  }
  if (report.mean.size() > 1) {
    os << "per-client uplink bytes per round: " << format_number(last.up_bytes_per_client) << '\n';
    os << "per-client downlink bytes per round: " << format_number(last.down_bytes_per_client) << '\n';
    os << "per-client FLOPs per round: " << format_number(last.client_flops) << '\n';
    os << "server FLOPs per round: " << format_number(last.server_flops) << '\n';
  }
  return os.str();
}

void write_run(const RunReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "config.resolved", report.config.resolved());
  write_file(dir / "metrics.csv", metrics_csv(report));
  write_file(dir / "summary.txt", run_summary(report));
}

SweepResult sweep(const SimConfig& base, const std::string& key,
                  const std::vector<std::string>& values, const std::filesystem::path& out) {
  if (values.empty()) throw ConfigError("sweep: no values given for " + key);
  std::vector<SimConfig> configs;
  for (const auto& v : values) {
    SimConfig c = base;
    c.set(key, v);
    c.validate();
    configs.push_back(std::move(c));
  }

  SweepResult result;
  result.values = values;
  std::ostringstream combined;
  combined << "value," << kMetricsHeader << '\n';
  for (std::size_t i = 0; i < configs.size(); ++i) {
    RunReport report = run(configs[i]);
    write_run(report, out / (key + "=" + values[i]));
    std::istringstream rows(metrics_csv(report));
    std::string line;
    std::getline(rows, line);  // header
    while (std::getline(rows, line)) combined << values[i] << ',' << line << '\n';
    result.reports.push_back(std::move(report));
  }
  result.combined_csv = combined.str();
  write_file(out / "sweep.csv", result.combined_csv);
  return result;
}

StoredRun load_run(const std::filesystem::path& dir) {
  StoredRun run;
  run.name = dir.filename().string();
  if (run.name.empty()) run.name = dir.parent_path().filename().string();

  const auto cfg_path = dir / "config.resolved";
  std::istringstream cfg(read_file(cfg_path));
  std::string line;
  while (std::getline(cfg, line)) {
    if (line.rfind("framework", 0) == 0) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        std::string v = line.substr(eq + 1);
        v.erase(0, v.find_first_not_of(' '));
        run.framework = v;
      }
    }
  }
  if (run.framework.empty()) throw IoError(cfg_path.string() + ": no framework entry");

  const auto metrics_path = dir / "metrics.csv";
  std::istringstream metrics(read_file(metrics_path));
  if (!std::getline(metrics, line) || line != kMetricsHeader) {
    throw IoError(metrics_path.string() + ": unexpected header");
  }
  std::size_t line_no = 1;
  while (std::getline(metrics, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != 7) {
      throw IoError(metrics_path.string() + ":" + std::to_string(line_no) + ": expected 7 columns");
    }
    if (cells[1] != "mean") continue;
    RoundMetrics m;
    m.round = static_cast<std::size_t>(parse_cell(cells[0], metrics_path, line_no));
    m.accuracy = parse_cell(cells[2], metrics_path, line_no);
    m.up_bytes_per_client = parse_cell(cells[3], metrics_path, line_no);
    m.down_bytes_per_client = parse_cell(cells[4], metrics_path, line_no);
    m.client_flops = parse_cell(cells[5], metrics_path, line_no);
    m.server_flops = parse_cell(cells[6], metrics_path, line_no);
    run.mean.push_back(m);
  }
  if (run.mean.empty()) throw IoError(metrics_path.string() + ": no mean rows");
  return run;
}

RunSummary summarize(const StoredRun& run) {
  RunSummary s{run.name, run.framework, run.mean.back().accuracy, 0.0, 0.0, 0.0};
  std::size_t trained = 0;
  for (const auto& m : run.mean) {
    if (m.round == 0) continue;
    ++trained;
    s.comm_bytes_per_client_per_round += m.up_bytes_per_client + m.down_bytes_per_client;
    s.client_flops_per_round += m.client_flops;
    s.server_flops_per_round += m.server_flops;
  }
  if (trained > 0) {
    s.comm_bytes_per_client_per_round /= static_cast<double>(trained);
    s.client_flops_per_round /= static_cast<double>(trained);
    s.server_flops_per_round /= static_cast<double>(trained);
  }
  return s;
}

ComparisonReport compare_runs(std::span<const StoredRun> runs) {
  if (runs.empty()) throw std::invalid_argument("report: no runs given");
  ComparisonReport out;
  for (const auto& r : runs) out.runs.push_back(summarize(r));

  std::size_t name_width = 4;
  for (const auto& s : out.runs) name_width = std::max(name_width, s.name.size());
  name_width += 2;

  // The table rounds accuracy for reading; the CSV keeps full precision.
  std::ostringstream text;
  text << std::left << std::setw(static_cast<int>(name_width)) << "run" << std::setw(11)
       << "framework" << std::setw(16) << "final_accuracy" << std::setw(26)
       << "comm_bytes/client/round" << "client_flops/round\n";
  for (const auto& s : out.runs) {
    std::ostringstream acc;
    acc << std::fixed << std::setprecision(4) << s.final_accuracy;
    text << std::left << std::setw(static_cast<int>(name_width)) << s.name << std::setw(11)
         << s.framework << std::setw(16) << acc.str() << std::setw(26)
         << format_number(s.comm_bytes_per_client_per_round)
         << format_number(s.client_flops_per_round) << '\n';
  }
  if (out.runs.size() > 1) {
    auto ranked = [&](auto key) {
      auto v = out.runs;
      std::stable_sort(v.begin(), v.end(),
                       [&](const RunSummary& a, const RunSummary& b) { return key(a) > key(b); });
      return v;
    };
    text << "\nranking, final accuracy (highest first): "
         << join_names(ranked([](const RunSummary& s) { return s.final_accuracy; })) << '\n';
    text << "ranking, communication per client per round (highest first): "
         << join_names(ranked([](const RunSummary& s) { return s.comm_bytes_per_client_per_round; }))
         << '\n';
    text << "ranking, client computation per round (highest first): "
         << join_names(ranked([](const RunSummary& s) { return s.client_flops_per_round; })) << '\n';
  }
  out.text = text.str();

  std::ostringstream summary;
  summary << "run,framework,final_accuracy,comm_bytes_per_client_per_round,client_flops_per_round,"
             "server_flops_per_round\n";
  for (const auto& s : out.runs) {
    summary << s.name << ',' << s.framework << ',' << format_number(s.final_accuracy) << ','
            << format_number(s.comm_bytes_per_client_per_round) << ','
            << format_number(s.client_flops_per_round) << ','
            << format_number(s.server_flops_per_round) << '\n';
  }
  out.summary_csv = summary.str();

  std::ostringstream series;
  series << "run,framework,round,accuracy,up_bytes_per_client,down_bytes_per_client,client_flops,"
            "server_flops\n";
  for (const auto& r : runs) {
    for (const auto& m : r.mean) {
      series << r.name << ',' << r.framework << ',' << m.round
             << ',' << format_number(m.accuracy) << ',' << format_number(m.up_bytes_per_client)
             << ',' << format_number(m.down_bytes_per_client) << ','
             << format_number(m.client_flops) << ',' << format_number(m.server_flops) << '\n';
    }
  }
  out.series_csv = series.str();
  return out;
}

}  // namespace fedsim
