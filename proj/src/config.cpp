#include "fedsim/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "fedsim/errors.hpp"

namespace fedsim {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError(std::string(key) + ": invalid value '" + std::string(value) + "' (expected " +
                    std::string(want) + ")");
}

template <typename T>
T parse_integer(std::string_view key, std::string_view text) {
  text = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    bad_value(key, text, "a non-negative integer");
  }
  return v;
}

double parse_real(std::string_view key, std::string_view text) {
  text = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
    bad_value(key, text, "a finite real number");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  bad_value(key, text, "true or false");
}

template <typename T>
std::vector<T> parse_list(std::string_view key, std::string_view text) {
  std::vector<T> out;
  text = trim(text);
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = text.find(',', start);
    out.push_back(parse_integer<T>(key, text.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(items[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(SimConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const SimConfig&)> get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto size_field = [&f](std::string key, std::size_t SimConfig::*member) {
      f.push_back({std::move(key),
                   [member](SimConfig& c, std::string_view k, std::string_view v) {
                     c.*member = parse_integer<std::size_t>(k, v);
                   },
                   [member](const SimConfig& c) { return std::to_string(c.*member); }});
    };

    f.push_back({"framework",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   v = trim(v);
                   if (v == "fed") c.framework = Framework::kFed;
                   else if (v == "kd") c.framework = Framework::kKd;
                   else if (v == "split") c.framework = Framework::kSplit;
                   else bad_value(k, v, "fed, kd or split");
                 },
                 [](const SimConfig& c) { return std::string(to_string(c.framework)); }});

    f.push_back({"model.hidden",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.hidden = parse_list<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return join(c.hidden); }});

    f.push_back({"lora.rank",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.lora.rank = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.lora.rank); }});
    f.push_back({"lora.alpha",
                 [](SimConfig& c, std::string_view k, std::string_view v) { c.lora.alpha = parse_real(k, v); },
                 [](const SimConfig& c) { return format_number(c.lora.alpha); }});
    f.push_back({"lora.dropout",
                 [](SimConfig& c, std::string_view k, std::string_view v) { c.lora.dropout = parse_real(k, v); },
                 [](const SimConfig& c) { return format_number(c.lora.dropout); }});
    f.push_back({"lora.layers",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   if (trim(v) == "all") c.lora.adapted_layers.clear();
                   else c.lora.adapted_layers = parse_list<std::size_t>(k, v);
                   if (trim(v) != "all" && c.lora.adapted_layers.empty()) {
                     bad_value(k, v, "'all' or a list of layer indices");
                   }
                 },
                 [](const SimConfig& c) {
                   return c.lora.adapted_layers.empty() ? std::string("all") : join(c.lora.adapted_layers);
                 }});

    auto real_field = [&f](std::string key, auto getter) {
      f.push_back({std::move(key),
                   [getter](SimConfig& c, std::string_view k, std::string_view v) {
                     getter(c) = parse_real(k, v);
                   },
                   [getter](const SimConfig& c) {
                     return format_number(getter(const_cast<SimConfig&>(c)));
                   }});
    };
    real_field("optim.lr", [](SimConfig& c) -> double& { return c.optim.lr; });
    real_field("optim.beta1", [](SimConfig& c) -> double& { return c.optim.beta1; });
    real_field("optim.beta2", [](SimConfig& c) -> double& { return c.optim.beta2; });
    real_field("optim.eps", [](SimConfig& c) -> double& { return c.optim.eps; });

    f.push_back({"kd.public_size",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.kd.public_size = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.kd.public_size); }});
    real_field("kd.temperature", [](SimConfig& c) -> double& { return c.kd.temperature; });
    real_field("kd.lambda", [](SimConfig& c) -> double& { return c.kd.lambda; });
    f.push_back({"kd.server_epochs",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.kd.server_epochs = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.kd.server_epochs); }});
    f.push_back({"kd.client_epochs",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.kd.client_epochs = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.kd.client_epochs); }});

    f.push_back({"split.point",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.split.split_point = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.split.split_point); }});
    f.push_back({"split.samples_per_round",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.split.samples_per_round = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.split.samples_per_round); }});

    size_field("train.clients", &SimConfig::n_clients);
    size_field("train.rounds", &SimConfig::rounds);
    size_field("train.local_epochs", &SimConfig::local_epochs);
    size_field("train.batch_size", &SimConfig::batch_size);
    f.push_back({"train.parallel",
                 [](SimConfig& c, std::string_view k, std::string_view v) { c.parallel = parse_bool(k, v); },
                 [](const SimConfig& c) { return std::string(c.parallel ? "true" : "false"); }});

    f.push_back({"data.source",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   v = trim(v);
                   if (v == "synthetic") c.data.source = DataSource::kSynthetic;
                   else if (v == "csv") c.data.source = DataSource::kCsv;
                   else bad_value(k, v, "synthetic or csv");
                 },
                 [](const SimConfig& c) {
                   return std::string(c.data.source == DataSource::kCsv ? "csv" : "synthetic");
                 }});
    f.push_back({"data.n",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.data.n = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.data.n); }});
    f.push_back({"data.features",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.data.features = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.data.features); }});
    f.push_back({"data.classes",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.data.classes = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.data.classes); }});
    real_field("data.separation", [](SimConfig& c) -> double& { return c.data.separation; });
    f.push_back({"data.train_csv",
                 [](SimConfig& c, std::string_view, std::string_view v) { c.data.train_csv = trim(v); },
                 [](const SimConfig& c) { return c.data.train_csv; }});
    f.push_back({"data.test_csv",
                 [](SimConfig& c, std::string_view, std::string_view v) { c.data.test_csv = trim(v); },
                 [](const SimConfig& c) { return c.data.test_csv; }});

    f.push_back({"partition.strategy",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   v = trim(v);
                   if (v == "iid") c.partition = PartitionStrategy::kIid;
                   else if (v == "dirichlet") c.partition = PartitionStrategy::kDirichlet;
                   else bad_value(k, v, "iid or dirichlet");
                 },
                 [](const SimConfig& c) {
                   return std::string(c.partition == PartitionStrategy::kIid ? "iid" : "dirichlet");
                 }});
    real_field("partition.beta", [](SimConfig& c) -> double& { return c.dirichlet_beta; });

    f.push_back({"run.seeds",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.seeds = parse_list<std::uint64_t>(k, v);
                 },
                 [](const SimConfig& c) { return join(c.seeds); }});
    f.push_back({"cost.bytes_per_scalar",
                 [](SimConfig& c, std::string_view k, std::string_view v) {
                   c.cost.bytes_per_scalar = parse_integer<std::size_t>(k, v);
                 },
                 [](const SimConfig& c) { return std::to_string(c.cost.bytes_per_scalar); }});
    return f;
  }();
  return table;
}

// Rethrows a validation failure from a component with the config key prefixed.
template <typename Fn>
void check(std::string_view key, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(Framework f) {
  switch (f) {
    case Framework::kFed: return "fed";
    case Framework::kKd: return "kd";
    case Framework::kSplit: return "split";
  }
  return "unknown";
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Arch SimConfig::arch(std::size_t features, std::size_t classes) const {
  Arch a;
  a.dims.push_back(features);
  a.dims.insert(a.dims.end(), hidden.begin(), hidden.end());
  a.dims.push_back(classes);
  return a;
}

LoraConfig SimConfig::resolved_lora(const Arch& a) const {
  LoraConfig out = lora;
  if (out.adapted_layers.empty()) out.adapted_layers = LoraConfig::all_layers(a);
  return out;
}

void SimConfig::set(std::string_view key, std::string_view value) {
  const auto& table = fields();
  const auto it = std::find_if(table.begin(), table.end(),
                               [key](const Field& f) { return f.key == trim(key); });
  if (it == table.end()) throw ConfigError(std::string(trim(key)) + ": unknown configuration key");
  it->set(*this, it->key, value);
}

void SimConfig::validate() const {
  if (hidden.empty()) throw ConfigError("model.hidden: at least one hidden layer is required");
  if (std::find(hidden.begin(), hidden.end(), std::size_t{0}) != hidden.end()) {
    throw ConfigError("model.hidden: widths must be >= 1");
  }
  check("optim", [&] { optim.validate(); });
  check("kd", [&] { kd.validate(); });
  check("cost", [&] { cost.validate(); });
  if (n_clients < 1) throw ConfigError("train.clients: must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
  if (seeds.empty()) throw ConfigError("run.seeds: at least one seed is required");
  if (partition == PartitionStrategy::kDirichlet && !(dirichlet_beta > 0.0)) {
    throw ConfigError("partition.beta: must be > 0");
  }
  if (data.source == DataSource::kSynthetic) {
    if (data.features < 2) throw ConfigError("data.features: must be >= 2");
    if (data.classes < 2) throw ConfigError("data.classes: must be >= 2");
    if (data.n < data.classes) throw ConfigError("data.n: must be >= data.classes");
    if (!(data.separation >= 0.0)) throw ConfigError("data.separation: must be >= 0");
    // Structural checks that depend on the arch are possible up front.
    const Arch a = arch(data.features, data.classes);
    check("lora", [&] { resolved_lora(a).validate(a); });
    if (framework == Framework::kSplit) check("split", [&] { split.validate(a); });
    const std::size_t n_train = data.n * 4 / 5;
    if (kd.public_size >= n_train) {
      throw ConfigError("kd.public_size: " + std::to_string(kd.public_size) +
                        " leaves no training data (train set has " + std::to_string(n_train) + ")");
    }
    const std::size_t remainder = n_train - kd.public_size;
    if (remainder < n_clients) {
      throw ConfigError("train.clients: " + std::to_string(n_clients) + " clients but only " +
                        std::to_string(remainder) + " private samples");
    }
    if (framework == Framework::kSplit && partition == PartitionStrategy::kIid &&
        split.samples_per_round > remainder / n_clients) {
      throw ConfigError("split.samples_per_round: " + std::to_string(split.samples_per_round) +
                        " exceeds the smallest client shard (" +
                        std::to_string(remainder / n_clients) + ")");
    }
  } else if (data.train_csv.empty()) {
    throw ConfigError("data.train_csv: required when data.source = csv");
  }
}

std::string SimConfig::resolved() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

SimConfig parse_config(std::string_view text, std::string_view origin) {
  SimConfig cfg;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    std::string_view line = text.substr(start, nl == std::string_view::npos ? nl : nl - start);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      }
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return cfg;
}

SimConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

}  // namespace fedsim
