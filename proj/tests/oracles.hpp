#pragma once

// Independent reference computations for the unit and acceptance tests.
// Written as plain nested loops straight from the definitions; nothing here
// calls into the library's kernels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "mtinet/rng.hpp"
#include "mtinet/tensor.hpp"

namespace oracle {

using mtinet::Tensor;

inline Tensor random_tensor(mtinet::Shape shape, mtinet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Zero-padded cross-correlation, stride 1. weight [co, ci, k, k].
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  const std::size_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
  Tensor out = Tensor::zeros({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double acc = bias[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(xo + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += weight[((o * ci + c) * k + ky) * k + kx] * x.at(c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
        out.at(o, y, xo) = acc;
      }
  return out;
}

/// Transposed convolution by direct scatter. weight [ci, co, k, k].
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                               std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = weight.dim(1), k = weight.dim(2);
  const std::size_t oh = (h - 1) * stride + k - 2 * pad, ow = (w - 1) * stride + k - 2 * pad;
  Tensor out = Tensor::zeros({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i < oh * ow; ++i) out[o * oh * ow + i] = bias[o];
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xi = 0; xi < w; ++xi)
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long oy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ox = static_cast<long>(xi * stride + kx) - static_cast<long>(pad);
              if (oy < 0 || ox < 0 || oy >= static_cast<long>(oh) || ox >= static_cast<long>(ow)) continue;
              out.at(o, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) +=
                  x.at(c, y, xi) * weight[((c * co + o) * k + ky) * k + kx];
            }
  return out;
}

/// Per-channel normalization over the spatial positions (biased variance).
inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  Tensor out = x;
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[ch * n + i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[ch * n + i] - mu) * (x[ch * n + i] - mu);
    var /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      out[ch * n + i] = gamma[ch] * (x[ch * n + i] - mu) / std::sqrt(var + eps) + beta[ch];
  }
  return out;
}

/// Batch of `groups` images stacked as [G*C,H,W]: channel c is normalized with
/// statistics pooled over the spatial positions of all G images.
inline Tensor batch_norm_train_grouped(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                                       double eps = 1e-5) {
  Tensor out = x;
  const std::size_t c = x.dim(0) / groups, n = x.dim(1) * x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> pooled;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < n; ++i) pooled.push_back(x[(g * c + ch) * n + i]);
    double mu = 0.0;
    for (double v : pooled) mu += v;
    mu /= static_cast<double>(pooled.size());
    double var = 0.0;
    for (double v : pooled) var += (v - mu) * (v - mu);
    var /= static_cast<double>(pooled.size());
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = (g * c + ch) * n + i;
        out[idx] = gamma[ch] * (x[idx] - mu) / std::sqrt(var + eps) + beta[ch];
      }
  }
  return out;
}

inline Tensor relu(Tensor x) {
  for (double& v : x.values()) v = std::max(v, 0.0);
  return x;
}

inline Tensor max_pool2x2(const Tensor& x) {
  const std::size_t c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor out = Tensor::zeros({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xo = 0; xo < w; ++xo)
        out.at(ch, y, xo) = std::max({x.at(ch, 2 * y, 2 * xo), x.at(ch, 2 * y, 2 * xo + 1), x.at(ch, 2 * y + 1, 2 * xo),
                                      x.at(ch, 2 * y + 1, 2 * xo + 1)});
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double top = *std::max_element(z.begin(), z.end());
  std::vector<double> out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += (out[i] = std::exp(z[i] - top));
  for (double& v : out) v /= total;
  return out;
}

/// Direct O(N^2) single-head attention: softmax(Q K^T / sqrt(dk)) V Wo with
/// Q = X Wq etc., everything in explicit loops. Returns (output, weights).
struct AttentionResult {
  std::vector<std::vector<double>> output;   // [N][D]
  std::vector<std::vector<double>> weights;  // [N][N]
};

inline AttentionResult attention_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                                      const Tensor& wo) {
  const std::size_t n = x.dim(0), d = x.dim(1), dk = wq.dim(1);
  auto project = [&](const Tensor& w) {
    std::vector<std::vector<double>> p(n, std::vector<double>(dk, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dk; ++j)
        for (std::size_t t = 0; t < d; ++t) p[i][j] += x.at(i, t) * w.at(t, j);
    return p;
  };
  const auto q = project(wq), k = project(wk), v = project(wv);
  AttentionResult r;
  r.weights.resize(n);
  r.output.assign(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < dk; ++t) s[j] += q[i][t] * k[j][t];
      s[j] /= std::sqrt(static_cast<double>(dk));
    }
    r.weights[i] = softmax(s);
    std::vector<double> mixed(dk, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < dk; ++t) mixed[t] += r.weights[i][j] * v[j][t];
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t t = 0; t < dk; ++t) r.output[i][c] += mixed[t] * wo.at(t, c);
  }
  return r;
}

}  // namespace oracle
