#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedsim/matrix.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

/// Layer widths [d0, d1, ..., dL]. Layer l maps d(l-1) -> d(l); rectifier on
/// hidden layers, identity on the output layer L. dL is the class count.
struct Arch {
  std::vector<std::size_t> dims;

  std::size_t depth() const { return dims.empty() ? 0 : dims.size() - 1; }
  std::size_t input_width() const { return dims.front(); }
  std::size_t classes() const { return dims.back(); }
  std::size_t in_width(std::size_t layer) const { return dims[layer - 1]; }
  std::size_t out_width(std::size_t layer) const { return dims[layer]; }

  void validate() const;

  friend bool operator==(const Arch&, const Arch&) = default;
};

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  /// Ascending layer indices in [1, L].
  std::vector<std::size_t> adapted_layers;

  double scale() const { return alpha / static_cast<double>(rank); }
  bool adapts(std::size_t layer) const;
  void validate(const Arch& arch) const;

  static std::vector<std::size_t> all_layers(const Arch& arch);

  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

/// Low-rank update B * A for one layer; A is r x d_in, B is d_out x r.
struct AdapterPair {
  std::size_t layer = 0;
  Matrix a;
  Matrix b;
};

struct ManifestEntry {
  std::size_t layer = 0;
  std::size_t rank = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;

  std::size_t scalars() const { return rank * (d_in + d_out); }

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Layout of a flattened adapter sequence: ascending layer, each layer's A
/// row-major followed by its B row-major.
struct AdapterManifest {
  std::vector<ManifestEntry> entries;

  std::size_t total_scalars() const;

  friend bool operator==(const AdapterManifest&, const AdapterManifest&) = default;
};

struct AdapterBundle {
  std::vector<double> values;
  AdapterManifest manifest;
};

enum class Mode { kEval, kTrain };

struct LayerTape {
  Matrix input;
  Matrix dropout_mask;  // empty when no dropout was applied
  Matrix adapter_hidden;
  Matrix pre_activation;
};

/// Everything backward_range needs to reproduce the chain rule for one
/// forward_range call over layers (from, to].
struct Tape {
  std::size_t from = 0;
  std::size_t to = 0;
  std::vector<LayerTape> layers;
};

struct ForwardResult {
  Matrix output;
  Tape tape;
};

struct BackwardResult {
  /// Gradients for the adapted layers in the range, laid out like export_adapters.
  AdapterBundle adapter_grads;
  /// Gradient w.r.t. the range input; empty if not requested.
  Matrix input_grad;
};

/// Frozen dense classifier with low-rank adapters on selected layers.
class LayeredNet {
 public:
  /// Frozen W_l ~ N(0, 1/d(l-1)), zero biases, A ~ N(0, 0.02^2), B = 0.
  LayeredNet(Arch arch, LoraConfig lora, std::uint64_t seed);

  const Arch& arch() const { return arch_; }
  const LoraConfig& lora() const { return lora_; }
  std::size_t depth() const { return arch_.depth(); }

  /// Applies layers (from, to] to x. Dropout on the adapter input path is
  /// active only in train mode and draws from `rng`.
  ForwardResult forward_range(const Matrix& x, std::size_t from, std::size_t to, Mode mode,
                              Rng* rng = nullptr) const;

  /// Eval-mode forward over all layers without recording a tape.
  Matrix predict(const Matrix& x) const;

  /// Exact gradients through the range recorded in `tape`, given the
  /// gradient of the loss at the range output.
  BackwardResult backward_range(const Tape& tape, const Matrix& upstream,
                                bool want_input_grad = true) const;

  /// Manifest of adapted layers within (from, to].
  AdapterManifest manifest(std::size_t from, std::size_t to) const;
  AdapterManifest manifest() const { return manifest(0, depth()); }

  AdapterBundle export_adapters(std::size_t from, std::size_t to) const;
  AdapterBundle export_adapters() const { return export_adapters(0, depth()); }

  /// Overwrites the adapters listed in `manifest` with `values`.
  void import_adapters(std::span<const double> values, const AdapterManifest& manifest);
  void import_adapters(const AdapterBundle& bundle) {
    import_adapters(bundle.values, bundle.manifest);
  }

  const AdapterPair* adapter(std::size_t layer) const;

  /// FNV-1a over the frozen weights and biases.
  std::uint64_t frozen_fingerprint() const;

  const Matrix& frozen_weight(std::size_t layer) const { return weights_[layer - 1]; }
  std::span<const double> frozen_bias(std::size_t layer) const { return biases_[layer - 1]; }

 private:
  Matrix apply_layer(std::size_t layer, Matrix h, Mode mode, Rng* rng, LayerTape* record) const;
  Matrix dropout_mask(std::size_t rows, std::size_t cols, Rng& rng) const;

  Arch arch_;
  LoraConfig lora_;
  std::vector<Matrix> weights_;               // weights_[l-1] is d(l) x d(l-1)
  std::vector<std::vector<double>> biases_;   // biases_[l-1] has d(l) entries
  std::vector<std::optional<AdapterPair>> adapters_;  // adapters_[l-1]
};

}  // namespace fedsim
