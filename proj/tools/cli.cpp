#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "mtinet/errors.hpp"
#include "mtinet/training.hpp"

namespace mtinet::cli {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) throw IoError("cannot write " + path.string());
}

void write_json(const fs::path& path, const Json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::uint64_t parse_seed(const std::string& text, const std::string& source) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-')
    throw ConfigError(source + " must be a non-negative integer, got '" + text + "'");
  return v;
}

// Precedence: flag, then config file, then MTI_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const Json* doc, const char* env_seed) {
  if (flag) return *flag;
  if (doc && doc->contains("seed")) {
    const Json& s = doc->at("seed");
    if (!s.is_number_unsigned()) throw ConfigError("config: seed must be a non-negative integer");
    return s.get<std::uint64_t>();
  }
  if (env_seed && *env_seed) return parse_seed(env_seed, "MTI_SEED");
  return 0;
}

phantom::PhantomConfig phantom_from_json(const Json& doc, phantom::PhantomConfig base, std::size_t* per_class) {
  if (!doc.is_object()) throw ConfigError("config: phantom must be an object");
  for (const auto& [key, value] : doc.items()) {
    auto number = [&]() {
      if (!value.is_number()) throw ConfigError("config: phantom." + key + " must be a number");
      return value.get<double>();
    };
    auto count = [&]() {
      if (!value.is_number_unsigned()) throw ConfigError("config: phantom." + key + " must be a non-negative integer");
      return value.get<std::size_t>();
    };
    if (key == "size") base.height = base.width = count();
    else if (key == "height") base.height = count();
    else if (key == "width") base.width = count();
    else if (key == "noise_sigma") base.noise_sigma = number();
    else if (key == "base_level") base.base_level = number();
    else if (key == "contrast_amplitude") base.contrast_amplitude = number();
    else if (key == "background_amplitude") base.background_amplitude = number();
    else if (key == "per_class") {
      if (per_class) *per_class = count();
    } else {
      throw ConfigError("config: unknown key phantom." + key);
    }
  }
  return base;
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// Flags shared by train and crossval. Optional members override the config file.
struct TrainFlags {
  fs::path data;
  fs::path config;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<double> disc_lr;
  std::optional<std::size_t> batch_size;
  std::optional<double> w_seg, w_reg, w_cls, w_tim, w_adv;
  bool no_mdief = false, no_spe = false, no_spa = false, no_tim = false, no_tdd = false;
  std::optional<std::string> tasks;

  void attach(CLI::App* cmd) {
    cmd->add_option("--data", data, "Dataset directory")->required();
    cmd->add_option("--config", config, "JSON config file");
    cmd->add_option("--out", out, "Output directory")->required();
    cmd->add_option("--seed", seed, "Training seed (overrides config and MTI_SEED)");
    cmd->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
    cmd->add_option("--lr", lr, "Generator learning rate");
    cmd->add_option("--disc-lr", disc_lr, "Discriminator learning rate (default: --lr)");
    cmd->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
    cmd->add_option("--w-seg", w_seg, "Segmentation loss weight");
    cmd->add_option("--w-reg", w_reg, "Regression loss weight");
    cmd->add_option("--w-cls", w_cls, "Classification loss weight");
    cmd->add_option("--w-tim", w_tim, "Task interaction loss weight");
    cmd->add_option("--w-adv", w_adv, "Adversarial loss weight");
    cmd->add_flag("--no-mdief", no_mdief, "Sum the two encoders instead of entropy fusion");
    cmd->add_flag("--no-spe", no_spe, "Drop the spectral encoder");
    cmd->add_flag("--no-spa", no_spa, "Drop the spatial encoder");
    cmd->add_flag("--no-tim", no_tim, "Drop the task interaction loss");
    cmd->add_flag("--no-tdd", no_tdd, "Drop the discriminator");
    cmd->add_option("--tasks", tasks, "Comma-separated subset of seg,reg,cls");
  }

  /// Defaults, then the config file, then flags.
  TrainConfig resolve(const char* env_seed, Json* doc_out = nullptr) const {
    Json doc = Json::object();
    if (!config.empty()) doc = read_json_file(config);
    if (!doc.is_object()) throw ConfigError("config: top level must be an object");
    TrainConfig c = config_from_json(doc);
    c.seed = resolve_seed(seed, &doc, env_seed);
    if (epochs) c.epochs = *epochs;
    if (lr) c.learning_rate = *lr;
    if (disc_lr) c.disc_learning_rate = *disc_lr;
    if (batch_size) c.batch_size = *batch_size;
    if (w_seg) c.weights.seg = *w_seg;
    if (w_reg) c.weights.reg = *w_reg;
    if (w_cls) c.weights.cls = *w_cls;
    if (w_tim) c.weights.tim = *w_tim;
    if (w_adv) c.weights.adv = *w_adv;
    if (no_mdief) c.model.use_mdief = false;
    if (no_spe) c.model.use_spe = false;
    if (no_spa) c.model.use_spa = false;
    if (no_tim) c.model.use_tim = false;
    if (no_tdd) c.model.use_tdd = false;
    if (tasks) {
      c.model.task_seg = c.model.task_reg = c.model.task_cls = false;
      std::stringstream ss(*tasks);
      std::string t;
      while (std::getline(ss, t, ',')) {
        if (t == "seg") c.model.task_seg = true;
        else if (t == "reg") c.model.task_reg = true;
        else if (t == "cls") c.model.task_cls = true;
        else throw ConfigError("--tasks: unknown task '" + t + "' (expected seg, reg or cls)");
      }
    }
    if (doc_out) *doc_out = std::move(doc);
    return c;
  }
};

/// Loads the dataset and fits the model extents to it.
phantom::Dataset load_for(const fs::path& dir, TrainConfig& config) {
  phantom::Dataset ds = phantom::load_dataset(dir);
  config.model.height = ds.manifest.height;
  config.model.width = ds.manifest.width;
  config.validate();
  return ds;
}

void print_metrics(std::ostream& out, const std::string& prefix, const EvalReport& r) {
  out << prefix;
  out << std::fixed << std::setprecision(2);
  if (r.dsc) out << " DSC " << r.dsc->mean << " IoU " << r.iou->mean;
  if (r.mae) out << " MAE " << r.mae->mean;
  if (r.accuracy) out << std::setprecision(3) << " accuracy " << *r.accuracy;
  out << std::defaultfloat << std::setprecision(6) << "\n";
}

void print_aggregate(std::ostream& out, const Aggregate& a) {
  out << std::fixed << std::setprecision(2);
  if (a.dsc) out << "  DSC " << a.dsc->mean << " ± " << a.dsc->std << "\n";
  if (a.iou) out << "  IoU " << a.iou->mean << " ± " << a.iou->std << "\n";
  if (a.mae) out << "  MAE " << a.mae->mean << " ± " << a.mae->std << "\n";
  if (a.accuracy) out << std::setprecision(3) << "  accuracy " << a.accuracy->mean << " ± " << a.accuracy->std << "\n";
  out << std::defaultfloat << std::setprecision(6);
}

void quantize(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

// The checkpoint stores float32; rounding first makes the saved model the one
// that was evaluated.
void quantize_state(TrainingState& s) {
  for (ParameterSet* ps : {&s.generator.params(), &s.discriminator.params()}) {
    for (auto& [n, v] : ps->parameters()) quantize(v.value_mut());
    for (auto& [n, v] : ps->buffers()) quantize(v.value_mut());
  }
  for (AdamState* a : {&s.generator_opt, &s.discriminator_opt}) {
    for (auto& [n, t] : a->first_moment) quantize(t);
    for (auto& [n, t] : a->second_moment) quantize(t);
  }
}

Json index_list(const std::vector<std::size_t>& v) { return Json(v); }

void write_pgm(const fs::path& path, const Tensor& prob) {
  const std::size_t h = prob.dim(0), w = prob.dim(1);
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double p : prob.values()) bytes.push_back(static_cast<char>(p > 0.5 ? 255 : 0));
  write_text(path, bytes);
}

// ---- commands ----

struct GenerateFlags {
  fs::path out;
  fs::path config;
  std::optional<std::size_t> per_class;
  std::optional<std::size_t> size;
  std::optional<double> noise;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateFlags& f, std::ostream& out, const char* env_seed) {
  const auto start = Clock::now();
  Json doc = Json::object();
  if (!f.config.empty()) doc = read_json_file(f.config);
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  std::size_t per_class = 120;
  phantom::PhantomConfig pc;
  if (doc.contains("phantom")) pc = phantom_from_json(doc.at("phantom"), pc, &per_class);
  if (f.per_class) per_class = *f.per_class;
  if (f.size) pc.height = pc.width = *f.size;
  if (f.noise) pc.noise_sigma = *f.noise;
  const std::uint64_t seed = resolve_seed(f.seed, &doc, env_seed);

  for (std::size_t s : {pc.height, pc.width})
    if (!is_power_of_two(s) || s < 16 || s > 256)
      throw ConfigError("--size: size must be a power of two in [16, 256], got " + std::to_string(s));
  pc.validate();

  out << "seed: " << seed << "\n";
  const phantom::Dataset ds = phantom::generate_dataset(f.out, per_class, pc, seed);
  out << "generated " << ds.size() << " samples (" << per_class << " hemangioma, " << per_class << " HCC), "
      << pc.height << "x" << pc.width << ", sigma " << pc.noise_sigma << ", seed " << seed << ", "
      << ds.manifest.clamped_pixels << " pixels clamped -> " << f.out.string() << "\n";
  write_json(f.out / "timing.json", Json{{"command", "generate"}, {"seconds", seconds_since(start)}});
  return kOk;
}

int cmd_train(const TrainFlags& f, std::ostream& out, const char* env_seed) {
  const auto start = Clock::now();
  TrainConfig config = f.resolve(env_seed);
  const phantom::Dataset ds = load_for(f.data, config);
  out << "seed: " << config.seed << "\n";

  const phantom::Fold split = phantom::holdout_split(ds.manifest.labels(), config.test_fraction, config.seed);
  const auto data = prepare_samples(ds, config.model);
  out << "training on " << split.train.size() << " samples, testing on " << split.test.size() << ", "
      << config.epochs << " epochs\n";

  std::optional<TrainingState> state;
  FoldReport fold = run_fold(data, split, 0, config, &state);
  quantize_state(*state);
  fold.test = evaluate(state->generator, data, split.test);
  print_metrics(out, "test:", fold.test);

  const fs::path ckpt = f.out / "checkpoint.json";
  fs::create_directories(f.out);
  save_checkpoint(ckpt, *state, config);
  write_json(f.out / "report.json",
             Json{{"command", "train"},
                  {"config", config_to_json(config)},
                  {"data", f.data.string()},
                  {"split", {{"train", index_list(split.train)}, {"test", index_list(split.test)}}},
                  {"result", fold_report_json(fold)}});
  write_json(f.out / "timing.json",
             Json{{"command", "train"}, {"seconds", seconds_since(start)}, {"training_seconds", fold.seconds}});
  out << "wrote " << ckpt.string() << " and " << (f.out / "report.json").string() << "\n";
  return kOk;
}

struct CrossvalFlags {
  TrainFlags train;
  std::optional<std::size_t> folds;
  std::size_t jobs = 1;
  bool ablation = false;
  bool synergy = false;
};

int cmd_crossval(const CrossvalFlags& f, std::ostream& out, const char* env_seed) {
  const auto start = Clock::now();
  TrainConfig config = f.train.resolve(env_seed);
  if (f.folds) config.folds = *f.folds;
  const phantom::Dataset ds = load_for(f.train.data, config);
  out << "seed: " << config.seed << "\n";
  fs::create_directories(f.train.out);

  Json timing{{"command", "crossval"}};
  if (f.ablation || f.synergy) {
    const auto rows = f.ablation ? run_ablation(ds, config, f.jobs) : run_synergy(ds, config, f.jobs);
    const std::string table = f.ablation ? ablation_csv(rows) : synergy_csv(rows);
    const fs::path csv = f.train.out / (f.ablation ? "ablation.csv" : "synergy.csv");
    write_text(csv, table);
    Json doc = variants_report_json(rows, config);
    doc["command"] = f.ablation ? "crossval --ablation" : "crossval --synergy";
    write_json(f.train.out / "report.json", doc);
    Json variant_times = Json::object();
    for (const VariantResult& r : rows) {
      double s = 0.0;
      for (const FoldReport& fr : r.report.folds) s += fr.seconds;
      variant_times[r.name] = s;
    }
    timing["variants"] = variant_times;
    out << table;
    out << "wrote " << csv.string() << "\n";
  } else {
    const auto data = prepare_samples(ds, config.model);
    const CrossValReport report = cross_validate(data, ds.manifest.labels(), config, f.jobs);
    for (const FoldReport& fr : report.folds) print_metrics(out, "fold " + std::to_string(fr.fold) + ":", fr.test);
    out << "aggregate over " << report.folds.size() << " folds:\n";
    print_aggregate(out, report.aggregate);
    Json doc = crossval_report_json(report, config);
    doc["command"] = "crossval";
    write_json(f.train.out / "report.json", doc);
    Json fold_times = Json::array();
    for (const FoldReport& fr : report.folds) fold_times.push_back(fr.seconds);
    timing["folds"] = fold_times;
  }
  timing["seconds"] = seconds_since(start);
  timing["jobs"] = f.jobs;
  write_json(f.train.out / "timing.json", timing);
  out << "wrote " << (f.train.out / "report.json").string() << "\n";
  return kOk;
}

struct EvalFlags {
  fs::path model;
  fs::path data;
  fs::path report;
  fs::path dump_masks;
  bool all = false;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  if (!fs::exists(f.model)) throw IoError("checkpoint not found: " + f.model.string());
  LoadedCheckpoint ckpt = load_checkpoint(f.model);
  const TrainConfig& config = ckpt.config;
  const phantom::Dataset ds = phantom::load_dataset(f.data);
  if (ds.manifest.height != config.model.height || ds.manifest.width != config.model.width)
    throw CompatibilityError("checkpoint expects " + std::to_string(config.model.height) + "x" +
                             std::to_string(config.model.width) + " images, dataset has " +
                             std::to_string(ds.manifest.height) + "x" + std::to_string(ds.manifest.width));
  out << "seed: " << config.seed << "\n";

  std::vector<std::size_t> indices;
  if (f.all) {
    for (std::size_t i = 0; i < ds.size(); ++i) indices.push_back(i);
  } else {
    indices = phantom::holdout_split(ds.manifest.labels(), config.test_fraction, config.seed).test;
  }
  const auto data = prepare_samples(ds, config.model);
  const EvalReport report = evaluate(ckpt.state->generator, data, indices);
  print_metrics(out, std::string(f.all ? "all" : "test") + " (" + std::to_string(indices.size()) + " samples):",
                report);

  if (!f.dump_masks.empty()) {
    if (!config.model.task_seg) throw ConfigError("--dump-masks: the checkpoint has no segmentation head");
    fs::create_directories(f.dump_masks);
    for (const SamplePrediction& p : report.predictions) {
      const fs::path name = fs::path(ds.manifest.samples.at(p.index).file).stem();
      write_pgm(f.dump_masks / (name.string() + "_mask.pgm"), p.seg_prob);
    }
    out << "wrote " << report.predictions.size() << " masks to " << f.dump_masks.string() << "\n";
  }

  write_json(f.report, Json{{"command", "eval"},
                            {"config", config_to_json(config)},
                            {"checkpoint", f.model.string()},
                            {"data", f.data.string()},
                            {"subset", f.all ? "all" : "test"},
                            {"indices", index_list(indices)},
                            {"result", eval_report_json(report)}});
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const char* env_seed) {
  CLI::App app{"Multi-task liver lesion toolkit on synthetic four-phase phantoms", "mtinet"};
  app.require_subcommand(1);

  GenerateFlags gen;
  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic phantom dataset");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--config", gen.config, "JSON config file (its \"phantom\" object)");
  generate->add_option("--per-class", gen.per_class, "Samples per class (default 120)");
  generate->add_option("--size", gen.size, "Image height and width, a power of two in [16, 256] (default 32)");
  generate->add_option("--noise", gen.noise, "Gaussian noise sigma (default 8)");
  generate->add_option("--seed", gen.seed, "Dataset seed (overrides config and MTI_SEED)");

  TrainFlags tr;
  CLI::App* train = app.add_subcommand("train", "Train on a stratified train/test split and save a checkpoint");
  tr.attach(train);

  CrossvalFlags cv;
  CLI::App* crossval = app.add_subcommand("crossval", "k-fold cross validation, optionally over variant tables");
  cv.train.attach(crossval);
  crossval->add_option("--folds", cv.folds, "Number of folds (default 5)")->check(CLI::Range(2, 1000));
  crossval->add_option("--jobs", cv.jobs, "Folds trained in parallel")->check(CLI::PositiveNumber);
  CLI::Option* ab = crossval->add_flag("--ablation", cv.ablation, "Run the six ablation variants");
  crossval->add_flag("--synergy", cv.synergy, "Run the four task-combination variants")->excludes(ab);

  EvalFlags ev;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--model", ev.model, "Checkpoint manifest written by train")->required();
  eval->add_option("--data", ev.data, "Dataset directory")->required();
  eval->add_option("--report", ev.report, "Report file to write")->required();
  eval->add_option("--dump-masks", ev.dump_masks, "Write predicted masks as P5 images");
  eval->add_flag("--all", ev.all, "Evaluate every sample instead of the checkpoint's test split");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*generate) return cmd_generate(gen, out, env_seed);
    if (*train) return cmd_train(tr, out, env_seed);
    if (*crossval) return cmd_crossval(cv, out, env_seed);
    return cmd_eval(ev, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CompatibilityError& e) {
    err << "error: incompatible checkpoint: " << e.what() << "\n";
    return kCompatibility;
  } catch (const NumericalError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace mtinet::cli
