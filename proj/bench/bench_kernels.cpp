// Times the OpenMP kernels against kernels::serial on the shapes the model
// actually uses, then a full training step at 1 and N threads.
#include <CLI11.hpp>
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <vector>

#include "mtinet/kernels.hpp"
#include "mtinet/training.hpp"

using namespace mtinet;
namespace k = mtinet::kernels;

namespace {

double best_ms(std::size_t reps, const std::function<void()>& fn) {
  double best = 1e300;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

void row(const char* name, const std::string& shape, double serial_ms, double omp_ms, double diff) {
  std::printf("%-8s %-22s %10.3f %10.3f %8.2fx %10.1e\n", name, shape.c_str(), serial_ms, omp_ms, serial_ms / omp_ms,
              diff);
}

using Gemm = void (*)(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);

void bench_gemm(const char* name, Gemm omp, Gemm ser, std::size_t m, std::size_t n, std::size_t kk, std::size_t reps,
                std::mt19937_64& rng) {
  const auto a = random_vec(m * kk, rng), b = random_vec(kk * n, rng);
  std::vector<double> c1(m * n), c2(m * n);
  const double ts = best_ms(reps, [&] { ser(m, n, kk, a.data(), b.data(), c1.data(), false); });
  const double to = best_ms(reps, [&] { omp(m, n, kk, a.data(), b.data(), c2.data(), false); });
  row(name, std::to_string(m) + "x" + std::to_string(n) + "x" + std::to_string(kk), ts, to, max_diff(c1, c2));
}

void bench_window(const k::WindowGeometry& g, std::size_t reps, std::mt19937_64& rng) {
  const auto image = random_vec(g.channels * g.height * g.width, rng);
  std::vector<double> col1(g.col_rows() * g.col_cols()), col2(col1.size());
  const std::string shape = std::to_string(g.channels) + "x" + std::to_string(g.height) + "x" +
                            std::to_string(g.width) + " k" + std::to_string(g.kernel);
  double ts = best_ms(reps, [&] { k::serial::im2col(g, image.data(), col1.data()); });
  double to = best_ms(reps, [&] { k::im2col(g, image.data(), col2.data()); });
  row("im2col", shape, ts, to, max_diff(col1, col2));

  std::vector<double> img1(image.size()), img2(image.size());
  ts = best_ms(reps, [&] {
    std::fill(img1.begin(), img1.end(), 0.0);
    k::serial::col2im(g, col1.data(), img1.data());
  });
  to = best_ms(reps, [&] {
    std::fill(img2.begin(), img2.end(), 0.0);
    k::col2im(g, col1.data(), img2.data());
  });
  row("col2im", shape, ts, to, max_diff(img1, img2));
}

double step_ms(std::size_t steps, int threads) {
  omp_set_num_threads(threads);
  const phantom::Dataset ds = phantom::make_dataset(5, phantom::PhantomConfig{}, 1);
  TrainConfig cfg;
  const auto data = prepare_samples(ds, cfg.model);
  TrainingState state(cfg, 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < steps; ++s) {
    const PreparedSample* batch[] = {&data[s % data.size()]};
    train_step(state, batch, cfg);
  }
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
         static_cast<double>(steps);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OpenMP versus serial kernel timings", "mtinet_bench"};
  std::size_t reps = 20;
  std::size_t steps = 20;
  int threads = omp_get_max_threads();
  app.add_option("--reps", reps, "Repetitions per kernel (best time is reported)")->check(CLI::PositiveNumber);
  app.add_option("--steps", steps, "Training steps per thread count")->check(CLI::PositiveNumber);
  app.add_option("--threads", threads, "Thread count for the OpenMP runs")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  omp_set_num_threads(threads);
  std::printf("threads: %d\n", threads);
  std::printf("%-8s %-22s %10s %10s %9s %10s\n", "kernel", "shape", "serial ms", "omp ms", "speedup", "max diff");
  std::mt19937_64 rng(7);
  // Encoder convolutions at 32x32 and 16x16, the token attention and a deconv weight gradient.
  bench_gemm("gemm_nn", k::gemm_nn, k::serial::gemm_nn, 8, 1024, 18, reps, rng);
  bench_gemm("gemm_nn", k::gemm_nn, k::serial::gemm_nn, 32, 256, 288, reps, rng);
  bench_gemm("gemm_nt", k::gemm_nt, k::serial::gemm_nt, 256, 256, 64, reps, rng);
  bench_gemm("gemm_tn", k::gemm_tn, k::serial::gemm_tn, 288, 256, 32, reps, rng);
  bench_gemm("gemm_nn", k::gemm_nn, k::serial::gemm_nn, 256, 256, 256, reps, rng);
  bench_window({2, 32, 32, 3, 1, 1}, reps, rng);
  bench_window({32, 16, 16, 3, 1, 1}, reps, rng);
  bench_window({64, 8, 8, 3, 1, 1}, reps, rng);

  const double one = step_ms(steps, 1);
  const double many = step_ms(steps, threads);
  std::printf("train_step (default model, 32x32): %.2f ms at 1 thread, %.2f ms at %d threads, %.2fx\n", one, many,
              threads, one / many);
  return 0;
}
