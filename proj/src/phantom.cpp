#include "mtinet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "mtinet/errors.hpp"
#include "mtinet/rng.hpp"
#include "mtinet/spectral.hpp"

namespace mtinet::phantom {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'I', 'P'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr int kManifestVersion = 1;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string sample_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu.mtip", index);
  return buf;
}

void require_label(int label) {
  if (label != kHemangioma && label != kHcc) throw ContractError("label must be 0 or 1, got " + std::to_string(label));
}

}  // namespace

const CurveTemplate& curve_template(int label) {
  static const CurveTemplate hemangioma{"hemangioma", {0.2, 0.5, 0.8, 0.95}};
  static const CurveTemplate hcc{"hcc", {0.2, 1.0, 0.6, 0.4}};
  require_label(label);
  return label == kHemangioma ? hemangioma : hcc;
}

void PhantomConfig::validate() const {
  for (std::size_t extent : {height, width}) {
    if (extent < 16 || extent > 256 || !spectral::is_power_of_two(extent))
      throw ConfigError("size must be a power of two in [16,256], got " + std::to_string(extent));
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("noise sigma must be >= 0");
  if (!(intensity_max > intensity_min)) throw ConfigError("intensity range is empty");
  if (!(contrast_amplitude >= 0.0) || !(background_amplitude >= 0.0)) throw ConfigError("amplitudes must be >= 0");
  const double peak = base_level + contrast_amplitude;
  if (base_level - background_amplitude < intensity_min || peak > intensity_max || base_level + background_amplitude > intensity_max)
    throw ConfigError("base level and amplitudes leave the intensity range");
}

Tensor Sample::phase(std::size_t p) const {
  const std::size_t hw = height() * width();
  return Tensor({height(), width()}, std::vector<double>(phases.data() + p * hw, phases.data() + (p + 1) * hw));
}

Sample generate_sample(std::uint64_t seed, int label, const PhantomConfig& config, std::size_t* clamped) {
  config.validate();
  require_label(label);
  const std::size_t h = config.height, w = config.width, hw = h * w;
  Rng rng(seed);

  // Lesion: rotated ellipse with semi-axes in [0.1, 0.3] x H, rejected until
  // its area lies in [1, HW/4].
  Tensor mask({h, w});
  for (std::size_t attempt = 0;; ++attempt) {
    if (attempt > 1000) throw NumericalError("could not place a lesion");
    const double a = rng.uniform(0.1, 0.3) * static_cast<double>(h);
    const double b = rng.uniform(0.1, 0.3) * static_cast<double>(h);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double reach = std::max(a, b);
    const double cy = rng.uniform(reach, static_cast<double>(h) - reach);
    const double cx = rng.uniform(reach, static_cast<double>(w) - reach);
    const double ct = std::cos(theta), st = std::sin(theta);
    std::size_t area = 0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
        const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
        const bool inside = u * u + v * v <= 1.0;
        mask.at(y, x) = inside ? 1.0 : 0.0;
        area += inside;
      }
    if (area >= 1 && area <= hw / 4) break;
  }

  // Smooth background: two low-frequency cosines, shared by all phases.
  Tensor field({h, w});
  for (int k = 0; k < 2; ++k) {
    const double fy = static_cast<double>(rng.index(3)), fx = static_cast<double>(1 + rng.index(2));
    const double offset = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        field.at(y, x) += 0.5 * config.background_amplitude *
                          std::cos(2.0 * std::numbers::pi *
                                       (fy * static_cast<double>(y) / static_cast<double>(h) +
                                        fx * static_cast<double>(x) / static_cast<double>(w)) +
                                   offset);
  }

  const CurveTemplate& curve = curve_template(label);
  Sample s;
  s.label = label;
  s.mask = mask;
  s.phases = Tensor({kPhases, h, w});
  s.enhancement = Tensor({kPhases});
  std::size_t clips = 0;
  for (std::size_t p = 0; p < kPhases; ++p) {
    const double lesion = to_f32(config.base_level + curve.enhancement[p] * config.contrast_amplitude);
    s.enhancement[p] = lesion;
    for (std::size_t i = 0; i < hw; ++i) {
      double v = mask[i] > 0.5 ? lesion : config.base_level + field[i];
      if (config.noise_sigma > 0.0) v += config.noise_sigma * rng.normal();
      if (v < config.intensity_min || v > config.intensity_max) {
        ++clips;
        v = std::clamp(v, config.intensity_min, config.intensity_max);
      }
      s.phases[p * hw + i] = to_f32(v);
    }
  }
  if (clamped) *clamped = clips;
  return s;
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& e : samples) out.push_back(e.label);
  return out;
}

Dataset make_dataset(std::size_t n_per_class, const PhantomConfig& config, std::uint64_t seed) {
  if (n_per_class < 5) throw ConfigError("per-class count must be >= 5, got " + std::to_string(n_per_class));
  config.validate();
  Dataset ds;
  ds.manifest.version = kManifestVersion;
  ds.manifest.height = config.height;
  ds.manifest.width = config.width;
  ds.manifest.seed = seed;
  ds.manifest.noise_sigma = config.noise_sigma;
  const std::size_t n = 2 * n_per_class;
  ds.samples.resize(n);
  std::vector<std::size_t> clips(n, 0);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    ds.samples[i] = generate_sample(mix_seed(seed, i), static_cast<int>(i % 2), config, &clips[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    ManifestEntry e;
    e.file = sample_file_name(i);
    e.label = ds.samples[i].label;
    for (std::size_t p = 0; p < kPhases; ++p) e.enhancement[p] = ds.samples[i].enhancement[p];
    ds.manifest.samples.push_back(e);
    ds.manifest.clamped_pixels += clips[i];
  }
  return ds;
}

Dataset generate_dataset(const std::filesystem::path& dir, std::size_t n_per_class, const PhantomConfig& config,
                         std::uint64_t seed) {
  Dataset ds = make_dataset(n_per_class, config, seed);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < ds.size(); ++i) write_sample(dir / ds.manifest.samples[i].file, ds.samples[i]);
  detail::write_text((dir / "manifest.json").string(), manifest_to_json(ds.manifest));
  return ds;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = manifest_from_json(detail::read_text((dir / "manifest.json").string()));
  std::size_t on_disk = 0;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec))
    if (entry.path().extension() == ".mtip") ++on_disk;
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  if (on_disk != ds.manifest.samples.size())
    throw FormatError("manifest lists " + std::to_string(ds.manifest.samples.size()) + " samples but " + dir.string() +
                      " holds " + std::to_string(on_disk));
  for (const ManifestEntry& e : ds.manifest.samples) {
    Sample s = read_sample(dir / e.file);
    if (s.height() != ds.manifest.height || s.width() != ds.manifest.width)
      throw FormatError(e.file + ": extents disagree with the manifest");
    if (s.label != e.label) throw FormatError(e.file + ": label disagrees with the manifest");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_sample(const std::filesystem::path& path, const Sample& s) {
  const std::size_t h = s.height(), w = s.width();
  if (s.phases.shape() != Shape{kPhases, h, w} || s.enhancement.shape() != Shape{kPhases})
    throw ShapeError("write_sample: inconsistent sample shapes");
  std::vector<unsigned char> out;
  out.reserve(16 + 17 * h * w + 17);
  out.insert(out.end(), kMagic, kMagic + 4);
  detail::put_le(out, kFormatVersion);
  detail::put_le(out, static_cast<std::uint32_t>(h));
  detail::put_le(out, static_cast<std::uint32_t>(w));
  for (double v : s.phases.values()) detail::put_le(out, static_cast<float>(v));
  for (double v : s.mask.values()) out.push_back(v > 0.5 ? 1 : 0);
  for (double v : s.enhancement.values()) detail::put_le(out, static_cast<float>(v));
  out.push_back(static_cast<unsigned char>(s.label));
  detail::write_file(path.string(), out);
}

Sample read_sample(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path.string());
  detail::ByteReader in(bytes, path.string());
  const std::string src = path.string();
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) throw FormatError(src + ": bad magic");
  for (int i = 0; i < 4; ++i) in.get<std::uint8_t>("magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kFormatVersion) throw FormatError(src + ": unsupported version " + std::to_string(version));
  const std::size_t h = in.get<std::uint32_t>("height"), w = in.get<std::uint32_t>("width");
  if (h == 0 || w == 0) throw FormatError(src + ": zero height or width");
  const std::size_t hw = h * w;
  const std::size_t expected = 16 + kPhases * hw * 4 + hw + kPhases * 4 + 1;
  if (bytes.size() != expected)
    throw FormatError(src + ": height x width " + std::to_string(h) + "x" + std::to_string(w) + " implies " +
                      std::to_string(expected) + " bytes, file has " + std::to_string(bytes.size()));
  Sample s;
  std::vector<double> phases(kPhases * hw), mask(hw), enh(kPhases);
  for (double& v : phases) v = in.get<float>("phase data");
  for (double& v : mask) {
    const auto m = in.get<std::uint8_t>("mask");
    if (m > 1) throw FormatError(src + ": mask value " + std::to_string(m) + " is not 0/1");
    v = m;
  }
  for (double& v : enh) v = in.get<float>("enhancement");
  const auto label = in.get<std::uint8_t>("label");
  if (label > 1) throw FormatError(src + ": label " + std::to_string(label) + " out of range");
  try {
    s.phases = Tensor({kPhases, h, w}, std::move(phases));
    s.enhancement = Tensor({kPhases}, std::move(enh));
  } catch (const ContractError&) {
    throw FormatError(src + ": non-finite phase or enhancement value");
  }
  s.mask = Tensor({h, w}, std::move(mask));
  s.label = label;
  return s;
}

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["height"] = m.height;
  j["width"] = m.width;
  j["count"] = m.samples.size();
  j["seed"] = m.seed;
  j["noise_sigma"] = m.noise_sigma;
  j["clamped_pixels"] = m.clamped_pixels;
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& e : m.samples)
    j["samples"].push_back({{"file", e.file}, {"label", e.label}, {"enhancement", e.enhancement}});
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    m.version = j.at("version").get<int>();
    if (m.version != kManifestVersion) throw FormatError("manifest: unsupported version " + std::to_string(m.version));
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.noise_sigma = j.at("noise_sigma").get<double>();
    m.clamped_pixels = j.value("clamped_pixels", std::size_t{0});
    std::set<std::string> seen;
    for (const auto& e : j.at("samples")) {
      ManifestEntry entry;
      entry.file = e.at("file").get<std::string>();
      entry.label = e.at("label").get<int>();
      entry.enhancement = e.at("enhancement").get<std::array<double, kPhases>>();
      if (!seen.insert(entry.file).second) throw FormatError("manifest: duplicate file " + entry.file);
      m.samples.push_back(entry);
    }
    if (j.at("count").get<std::size_t>() != m.samples.size()) throw FormatError("manifest: count disagrees with sample list");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

std::vector<Fold> kfold_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2 || k > labels.size())
    throw ConfigError("fold count must lie in [2, " + std::to_string(labels.size()) + "], got " + std::to_string(k));
  std::vector<std::vector<std::size_t>> by_class(2);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require_label(labels[i]);
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> tests(k);
  std::size_t next = 0;  // continues across classes so fold sizes differ by at most one
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng.engine());
    for (std::size_t idx : members) tests[next++ % k].push_back(idx);
  }
  std::vector<Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(tests[f].begin(), tests[f].end());
    folds[f].test = tests[f];
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!std::binary_search(tests[f].begin(), tests[f].end(), i)) folds[f].train.push_back(i);
  }
  return folds;
}

Fold holdout_split(const std::vector<int>& labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in (0,1)");
  const auto k = static_cast<std::size_t>(std::lround(1.0 / test_fraction));
  return kfold_split(labels, std::max<std::size_t>(k, 2), seed).front();
}

}  // namespace mtinet::phantom
