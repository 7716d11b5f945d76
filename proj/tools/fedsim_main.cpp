// Command-line driver: run, sweep and report.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/sim.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

std::vector<std::string> split_values(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    out.push_back(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw fedsim::IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  fedsim::tune_allocator();
  CLI::App app{"Federated fine-tuning simulator: parameter exchange, logit distillation and split learning"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;

  auto* run_cmd = app.add_subcommand("run", "Run one configuration over all of its seeds");
  run_cmd->add_option("--config", config_path, "Configuration file (key = value lines)")->required();
  run_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::string param;
  std::string values;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run one configuration per value of a key");
  sweep_cmd->add_option("--config", config_path, "Base configuration file")->required();
  sweep_cmd->add_option("--param", param, "Dotted configuration key to vary")->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values")->required();
  sweep_cmd->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> run_dirs;
  std::string csv_path;
  std::string series_path;
  auto* report_cmd = app.add_subcommand("report", "Compare finished runs");
  report_cmd->add_option("dirs", run_dirs, "Run directories")->required();
  report_cmd->add_option("--csv", csv_path, "Write the summary table as CSV");
  report_cmd->add_option("--series", series_path, "Write per-round mean series as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run_cmd) {
      const fedsim::SimConfig cfg = fedsim::load_config(config_path);
      const fedsim::RunReport report = fedsim::run(cfg);
      fedsim::write_run(report, out_dir);
      std::cout << fedsim::run_summary(report);
    } else if (*sweep_cmd) {
      const fedsim::SimConfig cfg = fedsim::load_config(config_path);
      const auto result = fedsim::sweep(cfg, param, split_values(values), out_dir);
      std::cout << "wrote " << result.reports.size() << " runs and "
                << (std::filesystem::path(out_dir) / "sweep.csv").string() << '\n';
    } else if (*report_cmd) {
      std::vector<fedsim::StoredRun> runs;
      for (const auto& d : run_dirs) runs.push_back(fedsim::load_run(d));
      const auto cmp = fedsim::compare_runs(runs);
      std::cout << cmp.text;
      if (!csv_path.empty()) write_text(csv_path, cmp.summary_csv);
      if (!series_path.empty()) write_text(series_path, cmp.series_csv);
    }
  } catch (const fedsim::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
