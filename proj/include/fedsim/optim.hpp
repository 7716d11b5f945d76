#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fedsim {

struct OptimHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// Moment accumulators for a flat parameter vector. Empty moments are sized
/// on the first step.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const OptimHyper& hyper);

}  // namespace fedsim
