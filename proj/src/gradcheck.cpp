#include "mtinet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mtinet/errors.hpp"
#include "mtinet/rng.hpp"

namespace mtinet {

GradCheckResult check_gradients(const std::function<Var()>& f, std::span<Var> inputs,
                                const GradCheckOptions& options) {
  for (const Var& v : inputs) {
    if (!v.requires_grad()) throw ContractError("check_gradients: every input must require a gradient");
  }
  for (Var& v : inputs) v.grad_mut() = Tensor::zeros(v.shape());
  Var loss = f();
  backward(loss);
  std::vector<Tensor> analytic;
  for (const Var& v : inputs) analytic.push_back(v.grad());

  auto eval = [&f]() {
    NoGradGuard guard;
    return f().item();
  };

  GradCheckResult result;
  Rng rng(options.seed);
  const double h = options.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k].value_mut();
    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(options.max_coords_per_input);
    }
    for (std::size_t i : coords) {
      const double original = x[i];
      const double centre = eval();
      double forward = 0.0, backward_slope = 0.0;
      auto central = [&](double step) {
        x[i] = original + step;
        const double up = eval();
        x[i] = original - step;
        const double down = eval();
        x[i] = original;
        forward = (up - centre) / step;
        backward_slope = (centre - down) / step;
        return (up - down) / (2.0 * step);
      };
      const double numeric_half = central(h / 2);
      const double numeric = central(h);
      const double scale = std::max({std::abs(numeric), std::abs(numeric_half), options.floor});
      // A kink exactly at the probe point keeps both central differences equal
      // but splits the one-sided slopes.
      if (std::abs(numeric - numeric_half) > 1e-3 * scale || std::abs(forward - backward_slope) > 1e-3 * scale) {
        ++result.kinks;
        continue;
      }
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  return result;
}

}  // namespace mtinet
