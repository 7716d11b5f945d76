#include "fedsim/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {
namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.x = x.gather_rows(indices);
  out.y.reserve(indices.size());
  for (std::size_t i : indices) out.y.push_back(y[i]);
  out.classes = classes;
  return out;
}

std::vector<std::size_t> Dataset::label_histogram() const {
  std::vector<std::size_t> hist(classes, 0);
  for (int label : y) ++hist[static_cast<std::size_t>(label)];
  return hist;
}

TrainTest synth_classification(std::size_t n, std::size_t features, std::size_t classes,
                               double separation, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (n < classes) throw ConfigError("synthetic data needs n >= classes");
  if (features < 2) throw ConfigError("synthetic data needs at least 2 features");
  if (!(separation >= 0.0) || !std::isfinite(separation)) {
    throw ConfigError("synthetic separation must be finite and >= 0");
  }

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix means(classes, features);
  for (std::size_t c = 0; c < classes; ++c) {
    auto row = means.row(c);
    double norm2 = 0.0;
    for (double& v : row) {
      v = normal(rng);
      norm2 += v * v;
    }
    const double k = norm2 > 0.0 ? separation / std::sqrt(norm2) : 0.0;
    for (double& v : row) v *= k;
  }

  Dataset all;
  all.classes = classes;
  all.x = Matrix(n, features);
  all.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    all.y[i] = static_cast<int>(c);
    auto row = all.x.row(i);
    auto mean = means.row(c);
    for (std::size_t j = 0; j < features; ++j) row[j] = mean[j] + normal(rng);
  }

  auto order = iota_indices(n);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = n * 4 / 5;
  std::span<const std::size_t> all_idx(order);
  return {all.subset(all_idx.first(n_train)), all.subset(all_idx.subspan(n_train))};
}

PublicSplit split_public(const Dataset& ds, std::size_t n_public, std::uint64_t seed) {
  if (n_public >= ds.size()) {
    throw ConfigError("public set size " + std::to_string(n_public) +
                      " must be smaller than the dataset (" + std::to_string(ds.size()) + ")");
  }
  Rng rng(seed);
  auto order = iota_indices(ds.size());
  std::shuffle(order.begin(), order.end(), rng);
  std::span<const std::size_t> idx(order);
  return {ds.subset(idx.first(n_public)), ds.subset(idx.subspan(n_public))};
}

std::vector<std::vector<std::size_t>> partition_indices(const Dataset& ds,
                                                        const PartitionSpec& spec) {
  const std::size_t k = spec.n_clients;
  if (k == 0) throw ConfigError("partition needs at least one client");
  if (ds.size() < k) {
    throw ConfigError("cannot partition " + std::to_string(ds.size()) + " samples over " +
                      std::to_string(k) + " clients");
  }
  Rng rng(spec.seed);

  if (spec.strategy == PartitionStrategy::kIid) {
    auto order = iota_indices(ds.size());
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> shards(k);
    const std::size_t base = ds.size() / k;
    const std::size_t extra = ds.size() % k;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t len = base + (c < extra ? 1 : 0);
      shards[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                       order.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
    return shards;
  }

  if (!(spec.beta > 0.0)) throw ConfigError("partition.beta must be > 0");
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.y[i])].push_back(i);

  std::gamma_distribution<double> gamma(spec.beta, 1.0);
  for (int attempt = 0; attempt < kDirichletMaxRetries; ++attempt) {
    std::vector<std::vector<std::size_t>> shards(k);
    for (auto& members : by_class) {
      if (members.empty()) continue;
      auto shuffled = members;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      std::vector<double> props(k);
      double total = 0.0;
      for (double& p : props) {
        p = gamma(rng);
        total += p;
      }
      if (!(total > 0.0)) {
        std::fill(props.begin(), props.end(), 1.0);
        total = static_cast<double>(k);
      }
      double cumulative = 0.0;
      std::size_t begin = 0;
      for (std::size_t c = 0; c < k; ++c) {
        cumulative += props[c] / total;
        const std::size_t end =
            c + 1 == k ? shuffled.size()
                       : std::min(shuffled.size(), static_cast<std::size_t>(std::floor(
                                                       cumulative * static_cast<double>(shuffled.size()))));
        for (std::size_t i = begin; i < std::max(begin, end); ++i) shards[c].push_back(shuffled[i]);
        begin = std::max(begin, end);
      }
    }
    const bool all_nonempty =
        std::all_of(shards.begin(), shards.end(), [](const auto& s) { return !s.empty(); });
    if (all_nonempty) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  throw PartitionError("Dirichlet partition left a client empty after " +
                       std::to_string(kDirichletMaxRetries) + " draws");
}

std::vector<Dataset> partition_clients(const Dataset& ds, const PartitionSpec& spec) {
  std::vector<Dataset> out;
  for (const auto& shard : partition_indices(ds, spec)) out.push_back(ds.subset(shard));
  return out;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ":1: missing header row");
  const auto header = split_commas(line);
  if (header.size() < 2 || trim(header.back()) != "label") {
    throw ParseError(path.string() + ":1: header must be f0,...,f{d-1},label");
  }
  const std::size_t d = header.size() - 1;

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != d + 1) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(d + 1) + " columns, found " + std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      const auto cell = trim(cells[j]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty() || !std::isfinite(v)) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad feature value '" +
                         std::string(cell) + "' in column " + std::to_string(j));
      }
      values.push_back(v);
    }
    const auto cell = trim(cells[d]);
    int label = 0;
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), label);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty() || label < 0) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad label '" +
                       std::string(cell) + "'");
    }
    labels.push_back(label);
  }
  if (labels.empty()) throw ParseError(path.string() + ": no data rows");

  Dataset ds;
  ds.classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  ds.x = Matrix(labels.size(), d, std::move(values));
  ds.y = std::move(labels);
  return ds;
}

void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t j = 0; j < ds.features(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.x.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
      out.write(buf, res.ptr - buf);
      out << ',';
    }
    out << ds.y[i] << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace fedsim
