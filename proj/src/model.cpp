#include "fedsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "fedsim/errors.hpp"

namespace fedsim {

void Arch::validate() const {
  if (dims.size() < 3) {
    throw ConfigError("arch needs at least two layers, got " +
                      std::to_string(depth()) + " (dims length " + std::to_string(dims.size()) +
                      ")");
  }
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] == 0) throw ConfigError("arch width d" + std::to_string(i) + " must be >= 1");
  }
  if (classes() < 2) throw ConfigError("arch output width must be >= 2 classes");
}

bool LoraConfig::adapts(std::size_t layer) const {
  return std::find(adapted_layers.begin(), adapted_layers.end(), layer) != adapted_layers.end();
}

void LoraConfig::validate(const Arch& arch) const {
  if (rank == 0) throw ConfigError("lora rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora alpha must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lora.dropout must be in [0, 1)");
  for (std::size_t i = 0; i < adapted_layers.size(); ++i) {
    const std::size_t l = adapted_layers[i];
    if (l < 1 || l > arch.depth()) {
      throw ConfigError("adapted layer " + std::to_string(l) + " outside [1, " +
                        std::to_string(arch.depth()) + "]");
    }
    if (i > 0 && adapted_layers[i - 1] >= l) {
      throw ConfigError("adapted layers must be strictly ascending");
    }
    if (rank > std::min(arch.in_width(l), arch.out_width(l))) {
      throw ConfigError("lora rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                        std::to_string(std::min(arch.in_width(l), arch.out_width(l))) +
                        " of layer " + std::to_string(l));
    }
  }
}

std::vector<std::size_t> LoraConfig::all_layers(const Arch& arch) {
  std::vector<std::size_t> layers(arch.depth());
  for (std::size_t l = 1; l <= arch.depth(); ++l) layers[l - 1] = l;
  return layers;
}

std::size_t AdapterManifest::total_scalars() const {
  std::size_t total = 0;
  for (const auto& e : entries) total += e.scalars();
  return total;
}

LayeredNet::LayeredNet(Arch arch, LoraConfig lora, std::uint64_t seed)
    : arch_(std::move(arch)), lora_(std::move(lora)) {
  arch_.validate();
  lora_.validate(arch_);

  Rng rng(seed);
  const std::size_t depth = arch_.depth();
  weights_.reserve(depth);
  biases_.reserve(depth);
  for (std::size_t l = 1; l <= depth; ++l) {
    const std::size_t d_in = arch_.in_width(l);
    const std::size_t d_out = arch_.out_width(l);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d_in)));
    Matrix w(d_out, d_in);
    for (double& v : w.values()) v = dist(rng);
    weights_.push_back(std::move(w));
    biases_.emplace_back(d_out, 0.0);
  }

  adapters_.resize(depth);
  std::normal_distribution<double> a_init(0.0, 0.02);
  for (std::size_t l : lora_.adapted_layers) {
    AdapterPair pair{l, Matrix(lora_.rank, arch_.in_width(l)), Matrix(arch_.out_width(l), lora_.rank)};
    for (double& v : pair.a.values()) v = a_init(rng);
    adapters_[l - 1] = std::move(pair);
  }
}

const AdapterPair* LayeredNet::adapter(std::size_t layer) const {
  if (layer < 1 || layer > depth() || !adapters_[layer - 1]) return nullptr;
  return &*adapters_[layer - 1];
}

Matrix LayeredNet::apply_layer(std::size_t layer, Matrix h, Mode mode, Rng* rng,
                               LayerTape* record) const {
  const auto& bias = biases_[layer - 1];
  Matrix z(h.rows(), bias.size());
  for (std::size_t i = 0; i < z.rows(); ++i) std::copy(bias.begin(), bias.end(), z.row(i).begin());
  gemm_add(z, h, Trans::kNo, weights_[layer - 1], Trans::kYes);

  Matrix mask;
  if (const AdapterPair* ad = adapter(layer)) {
    Matrix u;
    if (mode == Mode::kTrain && lora_.dropout > 0.0) {
      if (rng == nullptr) throw std::invalid_argument("train-mode dropout needs an rng stream");
      mask = dropout_mask(h.rows(), h.cols(), *rng);
      Matrix dropped = h;
      auto dv = dropped.values();
      auto mv = mask.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= mv[i];
      u = gemm_nt(dropped, ad->a);
    } else {
      u = gemm_nt(h, ad->a);
    }
    gemm_add(z, u, Trans::kNo, ad->b, Trans::kYes, lora_.scale());
    if (record) record->adapter_hidden = std::move(u);
  }

  Matrix out = z;
  if (layer < depth()) {
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  }
  if (record) {
    record->input = std::move(h);
    record->dropout_mask = std::move(mask);
    record->pre_activation = std::move(z);
  }
  return out;
}

// Inverted dropout: each entry kept with probability 1 - p and rescaled by
// 1 / (1 - p). Two 32-bit uniforms are taken from every 64-bit draw.
Matrix LayeredNet::dropout_mask(std::size_t rows, std::size_t cols, Rng& rng) const {
  Matrix mask(rows, cols);
  const double keep_scale = 1.0 / (1.0 - lora_.dropout);
  const auto threshold = static_cast<std::uint64_t>(lora_.dropout * 4294967296.0);
  auto mv = mask.values();
  std::size_t i = 0;
  while (i < mv.size()) {
    const std::uint64_t bits = rng();
    mv[i] = (bits & 0xffffffffULL) < threshold ? 0.0 : keep_scale;
    if (++i < mv.size()) {
      mv[i] = (bits >> 32) < threshold ? 0.0 : keep_scale;
      ++i;
    }
  }
  return mask;
}

ForwardResult LayeredNet::forward_range(const Matrix& x, std::size_t from, std::size_t to,
                                        Mode mode, Rng* rng) const {
  if (from >= to || to > depth()) {
    throw ShapeError("forward_range: invalid layer range (" + std::to_string(from) + ", " +
                     std::to_string(to) + "] for depth " + std::to_string(depth()));
  }
  if (x.cols() != arch_.dims[from]) {
    throw ShapeError("forward_range: input " + x.shape_string() + " but d" +
                     std::to_string(from) + " = " + std::to_string(arch_.dims[from]));
  }
  ForwardResult result;
  result.tape.from = from;
  result.tape.to = to;
  result.tape.layers.resize(to - from);
  Matrix h = x;
  for (std::size_t l = from + 1; l <= to; ++l) {
    h = apply_layer(l, std::move(h), mode, rng, &result.tape.layers[l - from - 1]);
  }
  result.output = std::move(h);
  return result;
}

Matrix LayeredNet::predict(const Matrix& x) const {
  if (x.cols() != arch_.input_width()) {
    throw ShapeError("predict: input " + x.shape_string() + " but d0 = " +
                     std::to_string(arch_.input_width()));
  }
  Matrix h = apply_layer(1, x, Mode::kEval, nullptr, nullptr);
  for (std::size_t l = 2; l <= depth(); ++l) {
    h = apply_layer(l, std::move(h), Mode::kEval, nullptr, nullptr);
  }
  return h;
}

BackwardResult LayeredNet::backward_range(const Tape& tape, const Matrix& upstream,
                                          bool want_input_grad) const {
  if (tape.to > depth() || tape.from >= tape.to || tape.layers.size() != tape.to - tape.from) {
    throw ShapeError("backward_range: malformed tape");
  }
  const Matrix& top = tape.layers.back().pre_activation;
  if (upstream.rows() != top.rows() || upstream.cols() != top.cols()) {
    throw ShapeError("backward_range: upstream " + upstream.shape_string() + " but range output " +
                     top.shape_string());
  }

  BackwardResult result;
  result.adapter_grads.manifest = manifest(tape.from, tape.to);
  // Gradients per layer collected top-down, flattened bottom-up at the end.
  std::vector<std::pair<Matrix, Matrix>> per_layer(tape.to - tape.from);

  Matrix grad = upstream;
  for (std::size_t l = tape.to; l > tape.from; --l) {
    const LayerTape& rec = tape.layers[l - tape.from - 1];
    if (l < depth()) {
      auto g = grad.values();
      auto z = rec.pre_activation.values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(z[i] > 0.0)) g[i] = 0.0;
      }
    }
    const bool need_dh = l > tape.from + 1 || want_input_grad;
    Matrix dh;
    if (need_dh) dh = gemm(grad, weights_[l - 1]);

    if (const AdapterPair* ad = adapter(l)) {
      const double s = lora_.scale();
      Matrix d_b = gemm_tn(grad, rec.adapter_hidden);
      for (double& v : d_b.values()) v *= s;
      Matrix d_u = gemm(grad, ad->b);
      for (double& v : d_u.values()) v *= s;

      Matrix d_a(ad->a.rows(), ad->a.cols());
      if (rec.dropout_mask.empty()) {
        gemm_add(d_a, d_u, Trans::kYes, rec.input, Trans::kNo);
        if (need_dh) gemm_add(dh, d_u, Trans::kNo, ad->a, Trans::kNo);
      } else {
        Matrix dropped = rec.input;
        auto dv = dropped.values();
        auto mv = rec.dropout_mask.values();
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= mv[i];
        gemm_add(d_a, d_u, Trans::kYes, dropped, Trans::kNo);
        if (need_dh) {
          Matrix d_dropped = gemm(d_u, ad->a);
          auto dd = d_dropped.values();
          auto hv = dh.values();
          for (std::size_t i = 0; i < dd.size(); ++i) hv[i] += dd[i] * mv[i];
        }
      }
      per_layer[l - tape.from - 1] = {std::move(d_a), std::move(d_b)};
    }
    grad = std::move(dh);
  }

  auto& flat = result.adapter_grads.values;
  flat.reserve(result.adapter_grads.manifest.total_scalars());
  for (const auto& e : result.adapter_grads.manifest.entries) {
    const auto& [d_a, d_b] = per_layer[e.layer - tape.from - 1];
    flat.insert(flat.end(), d_a.values().begin(), d_a.values().end());
    flat.insert(flat.end(), d_b.values().begin(), d_b.values().end());
  }
  if (want_input_grad) result.input_grad = std::move(grad);
  return result;
}

AdapterManifest LayeredNet::manifest(std::size_t from, std::size_t to) const {
  AdapterManifest m;
  for (std::size_t l = from + 1; l <= std::min(to, depth()); ++l) {
    if (adapter(l)) m.entries.push_back({l, lora_.rank, arch_.in_width(l), arch_.out_width(l)});
  }
  return m;
}

AdapterBundle LayeredNet::export_adapters(std::size_t from, std::size_t to) const {
  AdapterBundle bundle{{}, manifest(from, to)};
  bundle.values.reserve(bundle.manifest.total_scalars());
  for (const auto& e : bundle.manifest.entries) {
    const AdapterPair& ad = *adapter(e.layer);
    bundle.values.insert(bundle.values.end(), ad.a.values().begin(), ad.a.values().end());
    bundle.values.insert(bundle.values.end(), ad.b.values().begin(), ad.b.values().end());
  }
  return bundle;
}

void LayeredNet::import_adapters(std::span<const double> values, const AdapterManifest& m) {
  if (values.size() != m.total_scalars()) {
    throw CodecError("adapter import: " + std::to_string(values.size()) +
                     " values but manifest expects " + std::to_string(m.total_scalars()));
  }
  for (const auto& e : m.entries) {
    const AdapterPair* ad = adapter(e.layer);
    if (ad == nullptr || e.rank != lora_.rank || e.d_in != arch_.in_width(e.layer) ||
        e.d_out != arch_.out_width(e.layer)) {
      throw CodecError("adapter import: manifest entry for layer " + std::to_string(e.layer) +
                       " does not match the model's adapter configuration");
    }
  }
  std::size_t offset = 0;
  for (const auto& e : m.entries) {
    AdapterPair& ad = *adapters_[e.layer - 1];
    auto a = ad.a.values();
    auto b = ad.b.values();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), a.size(), a.begin());
    offset += a.size();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), b.size(), b.begin());
    offset += b.size();
  }
}

std::uint64_t LayeredNet::frozen_fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::span<const double> vals) {
    for (double v : vals) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    mix(weights_[l].values());
    mix(biases_[l]);
  }
  return h;
}

}  // namespace fedsim
