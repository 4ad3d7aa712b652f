#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "mtinet/autograd.hpp"

namespace mtinet {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, for gradients near zero.
  double floor = 1e-6;
  /// Coordinates sampled per input tensor; 0 checks every coordinate.
  std::size_t max_coords_per_input = 24;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates where the +-h and +-h/2 central differences disagree, or the
  /// two one-sided slopes do: the probe touched a ReLU / max-pool kink.
  /// These are not compared.
  std::size_t kinks = 0;
  std::string worst;  // "input#index" of the worst coordinate

  bool passed(double tolerance) const { return max_rel_error <= tolerance && kinks * 20 <= checked + kinks; }
};

/// Compares reverse-mode gradients of the scalar `f()` with respect to each
/// of `inputs` against central finite differences. `f` must rebuild its
/// graph from the current input values on every call.
GradCheckResult check_gradients(const std::function<Var()>& f, std::span<Var> inputs,
                                const GradCheckOptions& options = {});

}  // namespace mtinet
