#pragma once

#include <cstddef>

// Dense kernels behind the differentiable ops.
//
// The top-level functions are OpenMP-parallel. Work is split over output
// rows or channels only, each output element is written by exactly one
// thread in a fixed order, so results are bit-identical for any thread count.
// kernels::serial holds plain loop versions used as test references and as
// the baseline in the benchmark.
namespace mtinet::kernels {

/// Geometry of a 2-D sliding window over a (channels, height, width) image.
struct WindowGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_height() * out_width(); }
};

// c[m,n] = a[m,k] * b[k,n]   (c += ... when accumulate)
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);
// c[m,n] = a[m,k] * b[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);
// c[m,n] = a[k,m]^T * b[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);

/// Unfold image patches into columns: col[channels*k*k, out_h*out_w].
void im2col(const WindowGeometry& g, const double* image, double* col);
/// Scatter-add columns back into the image (adjoint of im2col). Accumulates.
void col2im(const WindowGeometry& g, const double* col, double* image);

namespace serial {
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate = false);
void im2col(const WindowGeometry& g, const double* image, double* col);
void col2im(const WindowGeometry& g, const double* col, double* image);
}  // namespace serial

}  // namespace mtinet::kernels
