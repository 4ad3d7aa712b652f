#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mtinet/tensor.hpp"

// Synthetic four-phase contrast phantoms: one elliptical lesion per slice on a
// smooth liver-like background, with class-specific enhancement curves.
namespace mtinet::phantom {

inline constexpr std::size_t kPhases = 4;  // Pre, Art, PV, Delay
inline constexpr int kHemangioma = 0;
inline constexpr int kHcc = 1;

struct CurveTemplate {
  std::string name;
  std::array<double, kPhases> enhancement;  // normalized, each in [0,1]
};

const CurveTemplate& curve_template(int label);

struct PhantomConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  double noise_sigma = 8.0;
  double base_level = 80.0;
  double contrast_amplitude = 150.0;
  double background_amplitude = 6.0;  // peak of the smooth background field
  double intensity_min = 0.0;
  double intensity_max = 255.0;

  void validate() const;
};

struct Sample {
  Tensor phases;       // [4,H,W]
  Tensor mask;         // [H,W], 0 or 1
  Tensor enhancement;  // [4], noiseless in-lesion mean per phase
  int label = 0;

  std::size_t height() const { return mask.dim(0); }
  std::size_t width() const { return mask.dim(1); }
  Tensor phase(std::size_t p) const;
};

/// Generates one sample. `clamped`, when given, receives the number of pixel
/// values clipped into the intensity range after noise.
Sample generate_sample(std::uint64_t seed, int label, const PhantomConfig& config, std::size_t* clamped = nullptr);

struct ManifestEntry {
  std::string file;
  int label = 0;
  std::array<double, kPhases> enhancement{};
};

struct DatasetManifest {
  int version = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  double noise_sigma = 0.0;
  std::size_t clamped_pixels = 0;
  std::vector<ManifestEntry> samples;

  std::vector<int> labels() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

/// Builds a balanced dataset in memory. Sample i has label i % 2 and seed
/// mix_seed(seed, i).
Dataset make_dataset(std::size_t n_per_class, const PhantomConfig& config, std::uint64_t seed);
/// make_dataset plus one file per sample and manifest.json under `dir`.
Dataset generate_dataset(const std::filesystem::path& dir, std::size_t n_per_class, const PhantomConfig& config,
                         std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& dir);

void write_sample(const std::filesystem::path& path, const Sample& sample);
Sample read_sample(const std::filesystem::path& path);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Class-stratified k-fold partition of sample indices.
std::vector<Fold> kfold_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed);

/// Single stratified split with roughly `test_fraction` of each class held out.
Fold holdout_split(const std::vector<int>& labels, double test_fraction, std::uint64_t seed);

}  // namespace mtinet::phantom
