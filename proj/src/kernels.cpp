#include "mtinet/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace mtinet::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

void clear_if(bool accumulate, double* c, std::size_t count) {
  if (!accumulate) std::fill(c, c + count, 0.0);
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  const bool parallel = m > 1 && m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  // Transposing b first turns the inner loop into a contiguous axpy.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  const bool parallel = m > 1 && m * n * k >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double api = a[p * m + i];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void im2col(const WindowGeometry& g, const double* image, double* col) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const auto rows = static_cast<std::ptrdiff_t>(g.col_rows());
  const bool parallel = g.col_rows() * g.col_cols() >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t rr = 0; rr < rows; ++rr) {
    const auto r = static_cast<std::size_t>(rr);
    const std::size_t ch = r / kk;
    const std::size_t ky = (r % kk) / g.kernel;
    const std::size_t kx = r % g.kernel;
    const double* plane = image + ch * g.height * g.width;
    double* out = col + r * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
      double* orow = out + oy * ow;
      if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
        std::fill(orow, orow + ow, 0.0);
        continue;
      }
      const double* irow = plane + static_cast<std::size_t>(y) * g.width;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
        orow[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : irow[x];
      }
    }
  }
}

void col2im(const WindowGeometry& g, const double* col, double* image) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const bool parallel = g.channels > 1 && g.col_rows() * g.col_cols() >= kParallelWork;
  // One channel per thread: every image pixel belongs to exactly one channel.
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(g.channels); ++cc) {
    const auto ch = static_cast<std::size_t>(cc);
    double* plane = image + ch * g.height * g.width;
    for (std::size_t q = 0; q < kk; ++q) {
      const std::size_t ky = q / g.kernel;
      const std::size_t kx = q % g.kernel;
      const double* in = col + (ch * kk + q) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
        double* irow = plane + static_cast<std::size_t>(y) * g.width;
        const double* crow = in + oy * ow;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
          if (x >= 0 && x < static_cast<std::ptrdiff_t>(g.width)) irow[x] += crow[ox];
        }
      }
    }
  }
}

namespace serial {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  clear_if(accumulate, c, m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] += s;
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  clear_if(accumulate, c, m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] += s;
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  clear_if(accumulate, c, m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] += s;
    }
}

void im2col(const WindowGeometry& g, const double* image, double* col) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  for (std::size_t ch = 0; ch < g.channels; ++ch)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const std::size_t row = (ch * g.kernel + ky) * g.kernel + kx;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(g.height) && x < static_cast<long>(g.width);
            col[row * oh * ow + oy * ow + ox] =
                inside ? image[(ch * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x)] : 0.0;
          }
      }
}

void col2im(const WindowGeometry& g, const double* col, double* image) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  for (std::size_t ch = 0; ch < g.channels; ++ch)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const std::size_t row = (ch * g.kernel + ky) * g.kernel + kx;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long y = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            const long x = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (y < 0 || x < 0 || y >= static_cast<long>(g.height) || x >= static_cast<long>(g.width)) continue;
            image[(ch * g.height + static_cast<std::size_t>(y)) * g.width + static_cast<std::size_t>(x)] +=
                col[row * oh * ow + oy * ow + ox];
          }
      }
}

}  // namespace serial

}  // namespace mtinet::kernels
