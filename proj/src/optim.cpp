#include "mtinet/optim.hpp"

#include <cmath>

#include "mtinet/errors.hpp"

namespace mtinet {

void adam_step(ParameterSet& params, AdamState& state) {
  for (const auto& [name, p] : params.parameters()) {
    if (p.grad().shape() != p.shape()) throw ContractError("adam_step: parameter " + name + " has no gradient");
  }
  const AdamOptions& o = state.options;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (auto& [name, p] : params.parameters()) {
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Tensor::zeros(p.shape()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Tensor::zeros(p.shape()));
    Tensor& m = m_it->second;
    Tensor& v = v_it->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ContractError("adam_step: moment shape mismatch for " + name);
    }
    Tensor& theta = p.value_mut();
    const Tensor& g = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      theta[i] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
}

}  // namespace mtinet
