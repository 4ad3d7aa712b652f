#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "mtinet/tensor.hpp"

// Frequency-domain preprocessing for the spectral encoder branch. Everything
// here works on plain data and sits outside the autograd graph.
namespace mtinet::spectral {

/// H x W complex plane, row-major.
struct ComplexImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::complex<double>> bins;

  ComplexImage() = default;
  ComplexImage(std::size_t h, std::size_t w) : height(h), width(w), bins(h * w) {}

  std::complex<double>& at(std::size_t r, std::size_t c) { return bins[r * width + c]; }
  const std::complex<double>& at(std::size_t r, std::size_t c) const { return bins[r * width + c]; }
  double energy() const;
};

struct HighPassSpec {
  double cutoff_ratio = 0.25;  // radius = ratio * min(H, W) / 2, centred bins

  void validate() const;
  double radius(std::size_t height, std::size_t width) const;
};

bool is_power_of_two(std::size_t n);

/// Unnormalized forward DFT via radix-2 FFT. Extents must be powers of two.
ComplexImage fft2d(const Tensor& image);
ComplexImage fft2d(const ComplexImage& input);
/// Inverse transform including the 1/(H W) factor.
ComplexImage ifft2d(const ComplexImage& spectrum);

/// Direct double-sum DFT, for testing. Refuses extents above 32.
ComplexImage dft2d_oracle(const Tensor& image);

ComplexImage fftshift(const ComplexImage& spectrum);
ComplexImage ifftshift(const ComplexImage& spectrum);

/// Ideal high-pass: zeroes every bin whose centred distance is <= the cutoff radius.
ComplexImage high_pass(const ComplexImage& spectrum, const HighPassSpec& spec);

/// Real part of ifft(high_pass(fft(image))). Throws NumericalError if the
/// imaginary residue exceeds 1e-9.
Tensor spectral_preprocess(const Tensor& image, const HighPassSpec& spec);

}  // namespace mtinet::spectral
