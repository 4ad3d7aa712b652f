#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mtinet/autograd.hpp"

namespace mtinet {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates keyed by parameter name, plus the step counter.
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
};

/// One bias-corrected Adam update of every parameter in `params`.
/// Throws ContractError if a parameter holds no gradient buffer.
void adam_step(ParameterSet& params, AdamState& state);

}  // namespace mtinet
