#include "mtinet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "mtinet/errors.hpp"
#include "mtinet/kernels.hpp"

namespace mtinet {

namespace {

thread_local bool g_grad_mode = true;
thread_local bool g_stats_frozen = false;

void ensure_grad(Node& node) {
  if (node.grad.shape() != node.value.shape()) node.grad = Tensor::zeros(node.value.shape());
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::detach() const { return Var(node_->value, false); }

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

bool grad_mode_enabled() noexcept { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }
FrozenStatsGuard::FrozenStatsGuard() : previous_(g_stats_frozen) { g_stats_frozen = true; }
FrozenStatsGuard::~FrozenStatsGuard() { g_stats_frozen = previous_; }

void backward(const Var& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined variable");
  if (loss.size() != 1) throw ContractError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* node : order) {
    node->grad = Tensor::zeros(node->value.shape());
  }
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (node.backward) node.backward(node);
  }
}

Var& ParameterSet::add(const std::string& name, Tensor value) {
  if (params_.count(name) || buffers_.count(name)) throw ContractError("duplicate parameter name " + name);
  return params_.emplace(name, Var(std::move(value), true)).first->second;
}

Var& ParameterSet::add_buffer(const std::string& name, Tensor value) {
  if (params_.count(name) || buffers_.count(name)) throw ContractError("duplicate buffer name " + name);
  return buffers_.emplace(name, Var(std::move(value), false)).first->second;
}

Var& ParameterSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

const Var& ParameterSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  return it->second;
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : params_) v.grad_mut() = Tensor::zeros(v.shape());
}

std::vector<Var> ParameterSet::list() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [name, v] : params_) out.push_back(v);
  return out;
}

void backward(const Var& loss, ParameterSet& params) {
  params.zero_grad();
  backward(loss);
}

namespace ops {

namespace {

using BackwardFn = std::function<void(Node&)>;

// Wraps a computed value; records inputs and closure only when some input
// needs a gradient and recording is on.
Var make_result(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (g_grad_mode) {
    for (const Var& v : inputs) needs = needs || v.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    for (const Var& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(fn);
  }
  return Var::from_node(std::move(node));
}

Var make_result(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool needs = false;
  if (g_grad_mode) {
    for (const Var& v : inputs) needs = needs || v.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    for (const Var& v : inputs) node->inputs.push_back(v.node());
    node->backward = std::move(fn);
  }
  return Var::from_node(std::move(node));
}

// Gradient sink of input i, or nullptr when that input is constant.
Tensor* sink(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  ensure_grad(in);
  return &in.grad;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = sink(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  return make_result(std::move(out), {a}, [factor](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * self.grad[i];
  });
}

Var add_scalar(const Var& a, double offset) {
  Tensor out = a.value();
  for (double& v : out.values()) v += offset;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) {
    throw ShapeError("mul_const: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(c.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return make_result(std::move(out), {a}, [c](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c[i];
  });
}

Var div_scalar(const Var& a, const Var& s) {
  if (s.size() != 1) throw ShapeError("div_scalar: divisor must have one element, got " + shape_string(s.shape()));
  const double d = s.value()[0];
  Tensor out = a.value();
  for (double& v : out.values()) v /= d;
  return make_result(std::move(out), {a, s}, [d](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / d;
    if (Tensor* g = sink(self, 1)) {
      // d(a/d)/dd = -a/d^2 = -out/d
      double acc = 0.0;
      for (std::size_t i = 0; i < self.value.size(); ++i) acc += self.grad[i] * self.value[i];
      (*g)[0] -= acc / d;
    }
  });
}

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(mtinet::sum(a.value()));
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (double& v : g->values()) v += self.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      const Tensor& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > 0.0) (*g)[i] += self.grad[i];
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double y = self.value[i];
        (*g)[i] += self.grad[i] * y * (1.0 - y);
      }
  });
}

Var abs(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::abs(v);
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      const Tensor& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        // subgradient 0 at the tie
        const double s = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
        (*g)[i] += s * self.grad[i];
      }
    }
  });
}

Var log_clamped(const Var& a, double lo, double hi) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::log(std::clamp(v, lo, hi));
  return make_result(std::move(out), {a}, [lo, hi](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      const Tensor& x = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] >= lo && x[i] <= hi) (*g)[i] += self.grad[i] / x[i];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape ref_tail(shape.begin() + 1, shape.end());
    if (p.value().rank() != shape.size() || tail != ref_tail) {
      throw ShapeError("concat: incompatible shapes " + shape_string(parts[0].shape()) + " and " +
                       shape_string(p.shape()));
    }
    rows += p.shape()[0];
  }
  shape[0] = rows;
  Tensor out = Tensor::zeros(shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + offset);
    offset += p.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k)
      if (Tensor* g = sink(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  const Shape& s = a.shape();
  if (s.empty() || count == 0 || begin + count > s[0]) {
    throw ShapeError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") out of range for " +
                     shape_string(s));
  }
  const std::size_t stride = a.size() / s[0];
  Shape shape = s;
  shape[0] = count;
  Tensor out = Tensor::zeros(shape);
  std::copy(a.value().data() + begin * stride, a.value().data() + (begin + count) * stride, out.data());
  return make_result(std::move(out), {a}, [begin, stride](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * stride + i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0];
  const std::size_t n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.value()[i * n + j];
  return make_result(std::move(out), {a}, [m, n](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += self.grad[j * m + i];
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nn(m, n, k, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = sink(self, 0)) kernels::gemm_nt(m, k, n, self.grad.data(), bv.data(), g->data(), true);
    if (Tensor* g = sink(self, 1)) kernels::gemm_tn(k, n, m, av.data(), self.grad.data(), g->data(), true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner extents differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_nt(m, n, k, a.value().data(), b.value().data(), out.data());
  return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = sink(self, 0)) kernels::gemm_nn(m, k, n, self.grad.data(), bv.data(), g->data(), true);
    if (Tensor* g = sink(self, 1)) kernels::gemm_tn(n, k, m, self.grad.data(), av.data(), g->data(), true);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t out_dim = weight.shape()[0];
  const std::size_t in_dim = weight.shape()[1];
  const bool vector_input = x.value().rank() == 1;
  const std::size_t n = vector_input ? 1 : x.shape()[0];
  const std::size_t x_in = vector_input ? x.shape()[0] : (x.value().rank() == 2 ? x.shape()[1] : 0);
  if (x_in != in_dim) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not fit weight " +
                     shape_string(weight.shape()));
  }
  if (bias.shape() != Shape{out_dim}) {
    throw ShapeError("linear: bias " + shape_string(bias.shape()) + " does not fit weight " +
                     shape_string(weight.shape()));
  }
  Tensor out = Tensor::zeros(vector_input ? Shape{out_dim} : Shape{n, out_dim});
  kernels::gemm_nt(n, out_dim, in_dim, x.value().data(), weight.value().data(), out.data());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bias.value()[j];
  return make_result(std::move(out), {x, weight, bias}, [n, in_dim, out_dim](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    if (Tensor* g = sink(self, 0)) kernels::gemm_nn(n, in_dim, out_dim, self.grad.data(), wv.data(), g->data(), true);
    if (Tensor* g = sink(self, 1)) kernels::gemm_tn(out_dim, in_dim, n, self.grad.data(), xv.data(), g->data(), true);
    if (Tensor* g = sink(self, 2))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < out_dim; ++j) (*g)[j] += self.grad[r * out_dim + j];
  });
}

Var softmax_rows(const Var& a) {
  const std::size_t rank = a.value().rank();
  if (rank != 1 && rank != 2) throw ShapeError("softmax_rows: rank must be 1 or 2, got " + shape_string(a.shape()));
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * cols;
    const double top = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - top);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * cols;
        const double* dy = self.grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += y[j] * (dy[j] - dot);
      }
  });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.size() / cols;
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols}) {
    throw ShapeError("layer_norm_rows: affine parameters must have shape (" + std::to_string(cols) + ")");
  }
  Tensor normalized = Tensor::zeros(a.shape());
  std::vector<double> inv_std(rows);
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.value().data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      const double xh = (x[j] - mu) * inv_std[r];
      normalized[r * cols + j] = xh;
      out[r * cols + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  return make_result(std::move(out), {a, gamma, beta},
                     [rows, cols, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
                       const Tensor& gv = self.inputs[1]->value;
                       Tensor* gx = sink(self, 0);
                       Tensor* gg = sink(self, 1);
                       Tensor* gb = sink(self, 2);
                       const double n = static_cast<double>(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * cols;
                         const double* xh = normalized.data() + r * cols;
                         double sum_d = 0.0;
                         double sum_dx = 0.0;
                         for (std::size_t j = 0; j < cols; ++j) {
                           const double d = dy[j] * gv[j];
                           sum_d += d;
                           sum_dx += d * xh[j];
                           if (gg) (*gg)[j] += dy[j] * xh[j];
                           if (gb) (*gb)[j] += dy[j];
                         }
                         if (gx)
                           for (std::size_t j = 0; j < cols; ++j) {
                             const double d = dy[j] * gv[j];
                             (*gx)[r * cols + j] += inv_std[r] / n * (n * d - sum_d - xh[j] * sum_dx);
                           }
                       }
                     });
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  Tensor out = Tensor::zeros({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[j] += a.value()[r * cols + j];
  for (double& v : out.values()) v /= static_cast<double>(rows);
  return make_result(std::move(out), {a}, [rows, cols](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += self.grad[j] / static_cast<double>(rows);
  });
}

Var add_bias_rows(const Var& a, const Var& bias) {
  require_rank(a, 2, "add_bias_rows");
  const std::size_t rows = a.shape()[0];
  const std::size_t cols = a.shape()[1];
  if (bias.shape() != Shape{cols}) {
    throw ShapeError("add_bias_rows: bias " + shape_string(bias.shape()) + " does not fit " + shape_string(a.shape()));
  }
  Tensor out = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] += bias.value()[j];
  return make_result(std::move(out), {a, bias}, [rows, cols](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = sink(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) (*g)[j] += self.grad[r * cols + j];
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const Shape& ws = weight.shape();
  if (ws[1] != x.shape()[0] || ws[2] != ws[3]) {
    throw ShapeError("conv2d: weight " + shape_string(ws) + " does not fit input " + shape_string(x.shape()));
  }
  if (bias.shape() != Shape{ws[0]}) throw ShapeError("conv2d: bias must have shape (" + std::to_string(ws[0]) + ")");
  kernels::WindowGeometry g{x.shape()[0], x.shape()[1], x.shape()[2], ws[2], 1, pad};
  if (x.shape()[1] + 2 * pad < ws[2] || x.shape()[2] + 2 * pad < ws[2]) {
    throw ShapeError("conv2d: kernel larger than padded input " + shape_string(x.shape()));
  }
  const std::size_t co = ws[0];
  const std::size_t ckk = g.col_rows();
  const std::size_t hw = g.col_cols();
  Tensor col = Tensor::zeros({ckk, hw});
  kernels::im2col(g, x.value().data(), col.data());
  Tensor out = Tensor::zeros({co, g.out_height(), g.out_width()});
  kernels::gemm_nn(co, hw, ckk, weight.value().data(), col.data(), out.data());
  for (std::size_t c = 0; c < co; ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] += bias.value()[c];
  // Only keep the unfolded input when the weight needs it.
  if (!weight.requires_grad()) col = Tensor();
  return make_result(std::move(out), {x, weight, bias}, [g, co, ckk, hw, col = std::move(col)](Node& self) {
    const Tensor& wv = self.inputs[1]->value;
    if (Tensor* gw = sink(self, 1)) kernels::gemm_nt(co, ckk, hw, self.grad.data(), col.data(), gw->data(), true);
    if (Tensor* gb = sink(self, 2))
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t i = 0; i < hw; ++i) (*gb)[c] += self.grad[c * hw + i];
    if (Tensor* gx = sink(self, 0)) {
      std::vector<double> dcol(ckk * hw);
      kernels::gemm_tn(ckk, hw, co, wv.data(), self.grad.data(), dcol.data());
      kernels::col2im(g, dcol.data(), gx->data());
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
  require_rank(x, 3, "conv_transpose2d input");
  require_rank(weight, 4, "conv_transpose2d weight");
  const Shape& ws = weight.shape();
  const std::size_t ci = x.shape()[0];
  const std::size_t h = x.shape()[1];
  const std::size_t w = x.shape()[2];
  if (ws[0] != ci || ws[2] != ws[3]) {
    throw ShapeError("conv_transpose2d: weight " + shape_string(ws) + " does not fit input " +
                     shape_string(x.shape()));
  }
  const std::size_t co = ws[1];
  const std::size_t k = ws[2];
  if (bias.shape() != Shape{co}) throw ShapeError("conv_transpose2d: bias must have shape (" + std::to_string(co) + ")");
  if ((h - 1) * stride + k < 2 * pad + 1 || (w - 1) * stride + k < 2 * pad + 1) {
    throw ShapeError("conv_transpose2d: padding leaves an empty output");
  }
  const std::size_t oh = (h - 1) * stride + k - 2 * pad;
  const std::size_t ow = (w - 1) * stride + k - 2 * pad;
  // Output image seen as the "input" of a forward window pass whose output grid is h x w.
  kernels::WindowGeometry g{co, oh, ow, k, stride, pad};
  const std::size_t ckk = co * k * k;
  const std::size_t hw = h * w;
  std::vector<double> cols(ckk * hw);
  kernels::gemm_tn(ckk, hw, ci, weight.value().data(), x.value().data(), cols.data());
  Tensor out = Tensor::zeros({co, oh, ow});
  kernels::col2im(g, cols.data(), out.data());
  for (std::size_t c = 0; c < co; ++c)
    for (std::size_t i = 0; i < oh * ow; ++i) out[c * oh * ow + i] += bias.value()[c];
  return make_result(std::move(out), {x, weight, bias}, [g, ci, ckk, hw, co, oh, ow](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    Tensor* gx = sink(self, 0);
    Tensor* gw = sink(self, 1);
    if (gx || gw) {
      std::vector<double> dcols(ckk * hw);
      kernels::im2col(g, self.grad.data(), dcols.data());
      if (gx) kernels::gemm_nn(ci, hw, ckk, wv.data(), dcols.data(), gx->data(), true);
      if (gw) kernels::gemm_nt(ci, ckk, hw, xv.data(), dcols.data(), gw->data(), true);
    }
    if (Tensor* gb = sink(self, 2))
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t i = 0; i < oh * ow; ++i) (*gb)[c] += self.grad[c * oh * ow + i];
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, const BatchNormState& state, bool training) {
  require_rank(x, 3, "batch_norm");
  const std::size_t groups = state.groups;
  if (groups == 0 || x.shape()[0] % groups) {
    throw ShapeError("batch_norm: " + std::to_string(x.shape()[0]) + " channels do not split into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t channels = x.shape()[0] / groups;
  const std::size_t spatial = x.shape()[1] * x.shape()[2];
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw ShapeError("batch_norm: affine parameters must have shape (" + std::to_string(channels) + ")");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->shape() != Shape{channels} ||
      state.running_var->shape() != Shape{channels}) {
    throw ShapeError("batch_norm: running statistics missing or of wrong shape");
  }
  // Channel c of group g occupies plane g * channels + c.
  auto plane = [channels, spatial](std::size_t g, std::size_t c) { return (g * channels + c) * spatial; };
  const double count = static_cast<double>(groups * spatial);
  Tensor out = Tensor::zeros(x.shape());
  Tensor normalized = Tensor::zeros(x.shape());
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mu = 0.0;
    double var = 0.0;
    if (training) {
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < spatial; ++i) mu += x.value()[plane(g, c) + i];
      mu /= count;
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = x.value()[plane(g, c) + i] - mu;
          var += d * d;
        }
      var /= count;
      const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
      if (!g_stats_frozen) {
        (*state.running_mean)[c] = (1.0 - state.momentum) * (*state.running_mean)[c] + state.momentum * mu;
        (*state.running_var)[c] = (1.0 - state.momentum) * (*state.running_var)[c] + state.momentum * unbiased;
      }
    } else {
      mu = (*state.running_mean)[c];
      var = (*state.running_var)[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t idx = plane(g, c) + i;
        const double xh = (x.value()[idx] - mu) * inv_std[c];
        normalized[idx] = xh;
        out[idx] = gamma.value()[c] * xh + beta.value()[c];
      }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [channels, groups, spatial, count, training, plane, normalized = std::move(normalized),
                      inv_std = std::move(inv_std)](Node& self) {
                       const Tensor& gv = self.inputs[1]->value;
                       Tensor* gx = sink(self, 0);
                       Tensor* gg = sink(self, 1);
                       Tensor* gb = sink(self, 2);
                       for (std::size_t c = 0; c < channels; ++c) {
                         double sum_dy = 0.0;
                         double sum_dy_xh = 0.0;
                         for (std::size_t g = 0; g < groups; ++g)
                           for (std::size_t i = 0; i < spatial; ++i) {
                             const std::size_t idx = plane(g, c) + i;
                             sum_dy += self.grad[idx];
                             sum_dy_xh += self.grad[idx] * normalized[idx];
                           }
                         if (gg) (*gg)[c] += sum_dy_xh;
                         if (gb) (*gb)[c] += sum_dy;
                         if (!gx) continue;
                         const double scale = gv[c] * inv_std[c];
                         for (std::size_t g = 0; g < groups; ++g)
                           for (std::size_t i = 0; i < spatial; ++i) {
                             const std::size_t idx = plane(g, c) + i;
                             (*gx)[idx] += training ? scale / count * (count * self.grad[idx] - sum_dy - normalized[idx] * sum_dy_xh)
                                                    : scale * self.grad[idx];
                           }
                       }
                     });
}

Var max_pool2x2(const Var& x) {
  require_rank(x, 3, "max_pool2x2");
  const std::size_t c = x.shape()[0];
  const std::size_t h = x.shape()[1];
  const std::size_t w = x.shape()[2];
  if (h % 2 || w % 2) throw ShapeError("max_pool2x2: extents must be even, got " + shape_string(x.shape()));
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  const Tensor& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
  return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[o];
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.shape()[0];
  const std::size_t spatial = x.shape()[1] * x.shape()[2];
  Tensor out = Tensor::zeros({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < spatial; ++i) acc += x.value()[ch * spatial + i];
    out[ch] = acc / static_cast<double>(spatial);
  }
  return make_result(std::move(out), {x}, [c, spatial](Node& self) {
    if (Tensor* g = sink(self, 0))
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < spatial; ++i) (*g)[ch * spatial + i] += self.grad[ch] / static_cast<double>(spatial);
  });
}

Var channel_scale(const Var& x, const Var& s) {
  require_rank(x, 3, "channel_scale");
  const std::size_t c = x.shape()[0];
  const std::size_t spatial = x.shape()[1] * x.shape()[2];
  if (s.shape() != Shape{c}) {
    throw ShapeError("channel_scale: scale " + shape_string(s.shape()) + " does not fit " + shape_string(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < spatial; ++i) out[ch * spatial + i] *= s.value()[ch];
  return make_result(std::move(out), {x, s}, [c, spatial](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& sv = self.inputs[1]->value;
    Tensor* gx = sink(self, 0);
    Tensor* gs = sink(self, 1);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t idx = ch * spatial + i;
        if (gx) (*gx)[idx] += self.grad[idx] * sv[ch];
        if (gs) (*gs)[ch] += self.grad[idx] * xv[idx];
      }
  });
}

}  // namespace ops

}  // namespace mtinet
