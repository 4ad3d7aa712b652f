#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mtinet/errors.hpp"
#include "mtinet/spectral.hpp"
#include "oracles.hpp"

using namespace mtinet;
using namespace mtinet::spectral;

namespace {

double max_diff(const ComplexImage& a, const ComplexImage& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.bins.size(); ++i) m = std::max(m, std::abs(a.bins[i] - b.bins[i]));
  return m;
}

Tensor checkerboard(std::size_t n, double amp) {
  Tensor t({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) t.at(y, x) = ((x + y) % 2 ? -amp : amp);
  return t;
}

Tensor cosine_rows(std::size_t n, std::size_t freq) {
  Tensor t({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      t.at(y, x) = std::cos(2.0 * std::numbers::pi * static_cast<double>(freq * x) / static_cast<double>(n));
  return t;
}

}  // namespace

TEST_CASE("fft2d examples") {
  Tensor impulse({8, 8});
  impulse.at(0, 0) = 1.0;
  for (const auto& v : fft2d(impulse).bins) CHECK(std::abs(v - 1.0) < 1e-12);

  ComplexImage dc = fft2d(Tensor({8, 8}, 2.5));
  CHECK(std::abs(dc.at(0, 0) - 160.0) < 1e-9);
  for (std::size_t i = 1; i < dc.bins.size(); ++i) CHECK(std::abs(dc.bins[i]) < 1e-9);

  CHECK_THROWS_AS(fft2d(Tensor({8, 12})), ConfigError);
  CHECK_THROWS_AS(fft2d(Tensor({3, 3})), ConfigError);
}

TEST_CASE("fft2d agrees with the direct DFT") {
  Rng rng(21);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 8}, {16, 16}, {32, 4}, {32, 32}}) {
    Tensor x = oracle::random_tensor({h, w}, rng, 0.0, 255.0);
    CHECK(max_diff(fft2d(x), dft2d_oracle(x)) < 1e-9);
  }
}

TEST_CASE("dft2d_oracle examples") {
  CHECK(dft2d_oracle(Tensor({1, 1}, 4.0)).at(0, 0) == std::complex<double>(4.0, 0.0));
  Tensor imp({2, 2});
  imp.at(0, 0) = 1.0;
  for (const auto& v : dft2d_oracle(imp).bins) CHECK(std::abs(v - 1.0) < 1e-15);
  CHECK_THROWS_AS(dft2d_oracle(Tensor({64, 2})), ConfigError);

  Rng rng(22);
  Tensor x = oracle::random_tensor({6, 5}, rng), y = oracle::random_tensor({6, 5}, rng);
  const double a = 1.7, b = -0.3;
  Tensor combo({6, 5});
  for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = a * x[i] + b * y[i];
  ComplexImage fx = dft2d_oracle(x), fy = dft2d_oracle(y), fc = dft2d_oracle(combo);
  for (std::size_t i = 0; i < fc.bins.size(); ++i) CHECK(std::abs(fc.bins[i] - (a * fx.bins[i] + b * fy.bins[i])) < 1e-12);
}

TEST_CASE("round trip and Parseval on power-of-two sizes") {
  Rng rng(23);
  for (std::size_t h : {1u, 2u, 4u, 8u, 16u, 32u, 64u})
    for (std::size_t w : {1u, 4u, 64u}) {
      CAPTURE(h);
      CAPTURE(w);
      Tensor x = oracle::random_tensor({h, w}, rng, -10.0, 10.0);
      ComplexImage spec = fft2d(x);
      ComplexImage back = ifft2d(spec);
      double err = 0.0, energy = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        err = std::max(err, std::abs(back.bins[i] - x[i]));
        energy += x[i] * x[i];
      }
      CHECK(err < 1e-9);
      CHECK(std::abs(energy - spec.energy() / static_cast<double>(h * w)) < 1e-9 * std::max(1.0, energy));
    }
}

TEST_CASE("fftshift moves DC to the centre and ifftshift undoes it") {
  Rng rng(24);
  ComplexImage s = fft2d(oracle::random_tensor({8, 16}, rng));
  ComplexImage c = fftshift(s);
  CHECK(c.at(4, 8) == s.at(0, 0));
  CHECK(max_diff(ifftshift(c), s) == 0.0);
}

TEST_CASE("high_pass behaviour") {
  HighPassSpec zero{0.0};
  Tensor flat({8, 8}, 9.0);
  ComplexImage spec = high_pass(fft2d(flat), zero);
  for (const auto& v : ifft2d(spec).bins) CHECK(std::abs(v) < 1e-9);

  // Only DC is removed at ratio 0.
  Rng rng(25);
  ComplexImage r = fft2d(oracle::random_tensor({16, 16}, rng));
  ComplexImage hp = high_pass(r, zero);
  CHECK(hp.at(0, 0) == 0.0);
  for (std::size_t i = 1; i < r.bins.size(); ++i) CHECK(hp.bins[i] == r.bins[i]);

  // The Nyquist checkerboard sits at centred distance n/sqrt(2), beyond every allowed radius.
  for (double ratio : {0.0, 0.25, 0.5, 0.9, 0.999}) {
    Tensor board = checkerboard(16, 3.0);
    ComplexImage out = ifft2d(high_pass(dft2d_oracle(board), HighPassSpec{ratio}));
    for (std::size_t i = 0; i < board.size(); ++i) CHECK(std::abs(out.bins[i] - board[i]) < 1e-9);
  }
  // A cosine at frequency f survives exactly when f exceeds the radius.
  for (std::size_t f = 1; f <= 8; ++f)
    for (double ratio : {0.1, 0.25, 0.5, 0.75, 0.95}) {
      CAPTURE(f);
      CAPTURE(ratio);
      Tensor wave = cosine_rows(16, f);
      ComplexImage out = ifft2d(high_pass(fft2d(wave), HighPassSpec{ratio}));
      const bool passes = static_cast<double>(f) > ratio * 8.0;
      for (std::size_t i = 0; i < wave.size(); ++i) CHECK(std::abs(out.bins[i] - (passes ? wave[i] : 0.0)) < 1e-9);
    }

  for (int trial = 0; trial < 20; ++trial) {
    ComplexImage s(8, 16);
    for (auto& v : s.bins) v = {rng.normal(), rng.normal()};
    CHECK(high_pass(s, HighPassSpec{rng.uniform(0.0, 0.99)}).energy() <= s.energy());
  }

  // conjugate symmetry of real-input spectra survives the mask
  ComplexImage filtered = high_pass(fft2d(oracle::random_tensor({16, 8}, rng)), HighPassSpec{0.4});
  for (std::size_t u = 0; u < 16; ++u)
    for (std::size_t v = 0; v < 8; ++v)
      CHECK(std::abs(filtered.at(u, v) - std::conj(filtered.at((16 - u) % 16, (8 - v) % 8))) < 1e-9);

  CHECK_THROWS_AS(high_pass(r, HighPassSpec{1.0}), ConfigError);
  CHECK_THROWS_AS(high_pass(r, HighPassSpec{-0.1}), ConfigError);
}

TEST_CASE("spectral_preprocess examples and properties") {
  HighPassSpec spec;  // 0.25
  for (double v : spectral_preprocess(Tensor({32, 32}, 80.0), spec).values()) CHECK(std::abs(v) < 1e-9);

  Tensor board = checkerboard(32, 5.0);
  Tensor mixed = board;
  for (double& v : mixed.values()) v += 120.0;
  Tensor out = spectral_preprocess(mixed, spec);
  CHECK(max_abs_diff(out, board) < 1e-9);

  Rng rng(26);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = oracle::random_tensor({32, 32}, rng, 0.0, 255.0);
    HighPassSpec s{rng.uniform(0.01, 0.9)};
    Tensor once = spectral_preprocess(x, s);
    CHECK(max_abs_diff(spectral_preprocess(once, s), once) < 1e-9);
    CHECK(std::abs(mtinet::sum(once) / static_cast<double>(once.size())) < 1e-9);
    CHECK(once.shape() == x.shape());
  }
  CHECK_THROWS_AS(spectral_preprocess(Tensor({4, 4, 4}), spec), ShapeError);
}
