#include "mtinet/spectral.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mtinet/errors.hpp"

namespace mtinet::spectral {

namespace {

using cd = std::complex<double>;

void require_image(const Tensor& image, const char* op) {
  if (image.rank() != 2) throw ShapeError(std::string(op) + ": expected [H,W], got " + shape_string(image.shape()));
}

// In-place iterative radix-2 transform over `n` values spaced `stride` apart.
void fft1d(cd* data, std::size_t n, std::size_t stride, bool inverse) {
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i * stride], data[j * stride]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = (inverse ? 2.0 : -2.0) * std::numbers::pi / static_cast<double>(len);
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        // Twiddles from cos/sin directly rather than a running product keeps
        // round-off at the 1e-15 level for every bin.
        const cd w(std::cos(angle * static_cast<double>(k)), std::sin(angle * static_cast<double>(k)));
        cd& a = data[(start + k) * stride];
        cd& b = data[(start + k + len / 2) * stride];
        const cd t = w * b;
        b = a - t;
        a += t;
      }
    }
  }
}

ComplexImage transform(ComplexImage img, bool inverse) {
  if (!is_power_of_two(img.height) || !is_power_of_two(img.width))
    throw ConfigError("fft2d: extents must be powers of two, got " + std::to_string(img.height) + "x" +
                      std::to_string(img.width));
  for (std::size_t r = 0; r < img.height; ++r) fft1d(img.bins.data() + r * img.width, img.width, 1, inverse);
  for (std::size_t c = 0; c < img.width; ++c) fft1d(img.bins.data() + c, img.height, img.width, inverse);
  if (inverse) {
    const double norm = 1.0 / static_cast<double>(img.height * img.width);
    for (cd& v : img.bins) v *= norm;
  }
  return img;
}

ComplexImage to_complex(const Tensor& image) {
  ComplexImage out(image.dim(0), image.dim(1));
  for (std::size_t i = 0; i < image.size(); ++i) out.bins[i] = image[i];
  return out;
}

ComplexImage roll(const ComplexImage& in, std::size_t dr, std::size_t dc) {
  ComplexImage out(in.height, in.width);
  for (std::size_t r = 0; r < in.height; ++r)
    for (std::size_t c = 0; c < in.width; ++c)
      out.at((r + dr) % in.height, (c + dc) % in.width) = in.at(r, c);
  return out;
}

}  // namespace

double ComplexImage::energy() const {
  double e = 0.0;
  for (const cd& v : bins) e += std::norm(v);
  return e;
}

void HighPassSpec::validate() const {
  if (!(cutoff_ratio >= 0.0 && cutoff_ratio < 1.0))
    throw ConfigError("high-pass cutoff_ratio must lie in [0,1), got " + std::to_string(cutoff_ratio));
}

double HighPassSpec::radius(std::size_t height, std::size_t width) const {
  return cutoff_ratio * static_cast<double>(std::min(height, width)) / 2.0;
}

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

ComplexImage fft2d(const Tensor& image) {
  require_image(image, "fft2d");
  return transform(to_complex(image), false);
}

ComplexImage fft2d(const ComplexImage& input) { return transform(input, false); }

ComplexImage ifft2d(const ComplexImage& spectrum) { return transform(spectrum, true); }

ComplexImage dft2d_oracle(const Tensor& image) {
  require_image(image, "dft2d_oracle");
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h > 32 || w > 32) throw ConfigError("dft2d_oracle: extents above 32 are refused");
  ComplexImage out(h, w);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      cd acc = 0.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double phase = -2.0 * std::numbers::pi *
                               (static_cast<double>(u * y % h) / static_cast<double>(h) +
                                static_cast<double>(v * x % w) / static_cast<double>(w));
          acc += image.at(y, x) * cd(std::cos(phase), std::sin(phase));
        }
      out.at(u, v) = acc;
    }
  return out;
}

ComplexImage fftshift(const ComplexImage& spectrum) { return roll(spectrum, spectrum.height / 2, spectrum.width / 2); }

ComplexImage ifftshift(const ComplexImage& spectrum) {
  return roll(spectrum, (spectrum.height + 1) / 2, (spectrum.width + 1) / 2);
}

ComplexImage high_pass(const ComplexImage& spectrum, const HighPassSpec& spec) {
  spec.validate();
  ComplexImage centred = fftshift(spectrum);
  const double radius = spec.radius(spectrum.height, spectrum.width);
  const double cy = static_cast<double>(spectrum.height / 2), cx = static_cast<double>(spectrum.width / 2);
  for (std::size_t r = 0; r < centred.height; ++r)
    for (std::size_t c = 0; c < centred.width; ++c) {
      const double dy = static_cast<double>(r) - cy, dx = static_cast<double>(c) - cx;
      if (std::sqrt(dy * dy + dx * dx) <= radius) centred.at(r, c) = 0.0;
    }
  return ifftshift(centred);
}

Tensor spectral_preprocess(const Tensor& image, const HighPassSpec& spec) {
  ComplexImage back = ifft2d(high_pass(fft2d(image), spec));
  Tensor out(image.shape());
  double residue = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = back.bins[i].real();
    residue = std::max(residue, std::abs(back.bins[i].imag()));
  }
  if (residue > 1e-9) throw NumericalError("spectral_preprocess: imaginary residue " + std::to_string(residue));
  return out;
}

}  // namespace mtinet::spectral
