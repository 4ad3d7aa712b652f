#include <cmath>
#include <set>

#include "binary_io.hpp"
#include "mtinet/errors.hpp"
#include "mtinet/training.hpp"

namespace mtinet {

namespace {

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "mtinet-checkpoint";

Json mean_std_json(const MeanStd& v) { return Json{{"mean", v.mean}, {"std", v.std}}; }

std::vector<std::string> task_list(const ModelConfig& m) {
  std::vector<std::string> tasks;
  if (m.task_seg) tasks.emplace_back("seg");
  if (m.task_reg) tasks.emplace_back("reg");
  if (m.task_cls) tasks.emplace_back("cls");
  return tasks;
}

Json model_to_json(const ModelConfig& m) {
  return Json{{"size", m.height},
              {"encoder_channels", m.encoder_channels},
              {"decoder_channels", m.decoder_channels},
              {"heads", m.heads},
              {"head_dim", m.head_dim},
              {"depth", m.depth},
              {"ff_dim", m.ff_dim},
              {"disc_dim", m.disc_dim},
              {"disc_heads", m.disc_heads},
              {"disc_head_dim", m.disc_head_dim},
              {"hpf_cutoff", m.high_pass.cutoff_ratio},
              {"share_branch_weights", m.share_branch_weights},
              {"phase_batch_norm", m.phase_batch_norm},
              {"eval_batch_stats", m.eval_batch_stats},
              {"input_scale", m.input_scale},
              {"reg_scale", m.reg_scale},
              {"use_mdief", m.use_mdief},
              {"use_spe", m.use_spe},
              {"use_spa", m.use_spa},
              {"use_tim", m.use_tim},
              {"use_tdd", m.use_tdd},
              {"tasks", task_list(m)}};
}

template <typename T>
void read_field(const Json& obj, const char* key, T& target) {
  if (obj.contains(key)) target = obj.at(key).get<T>();
}

void reject_unknown(const Json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

ModelConfig model_from_json(const Json& j, ModelConfig m) {
  reject_unknown(j,
                 {"size", "encoder_channels", "decoder_channels", "heads", "head_dim", "depth", "ff_dim", "disc_dim",
                  "disc_heads", "disc_head_dim", "hpf_cutoff", "share_branch_weights", "phase_batch_norm", "eval_batch_stats", "input_scale", "reg_scale",
                  "use_mdief", "use_spe", "use_spa", "use_tim", "use_tdd", "tasks"},
                 "model");
  if (j.contains("size")) m.height = m.width = j.at("size").get<std::size_t>();
  read_field(j, "encoder_channels", m.encoder_channels);
  read_field(j, "decoder_channels", m.decoder_channels);
  read_field(j, "heads", m.heads);
  read_field(j, "head_dim", m.head_dim);
  read_field(j, "depth", m.depth);
  read_field(j, "ff_dim", m.ff_dim);
  read_field(j, "disc_dim", m.disc_dim);
  read_field(j, "disc_heads", m.disc_heads);
  read_field(j, "disc_head_dim", m.disc_head_dim);
  read_field(j, "hpf_cutoff", m.high_pass.cutoff_ratio);
  read_field(j, "share_branch_weights", m.share_branch_weights);
  read_field(j, "phase_batch_norm", m.phase_batch_norm);
  read_field(j, "eval_batch_stats", m.eval_batch_stats);
  read_field(j, "input_scale", m.input_scale);
  read_field(j, "reg_scale", m.reg_scale);
  read_field(j, "use_mdief", m.use_mdief);
  read_field(j, "use_spe", m.use_spe);
  read_field(j, "use_spa", m.use_spa);
  read_field(j, "use_tim", m.use_tim);
  read_field(j, "use_tdd", m.use_tdd);
  if (j.contains("tasks")) {
    m.task_seg = m.task_reg = m.task_cls = false;
    for (const auto& t : j.at("tasks")) {
      const auto name = t.get<std::string>();
      if (name == "seg")
        m.task_seg = true;
      else if (name == "reg")
        m.task_reg = true;
      else if (name == "cls")
        m.task_cls = true;
      else
        throw ConfigError("unknown task '" + name + "'");
    }
  }
  return m;
}

// Destinations for checkpoint tensors when loading.
struct Group {
  std::string name;
  std::map<std::string, Var>* vars = nullptr;
  std::map<std::string, Tensor>* moments = nullptr;
};

std::vector<Group> groups_of(TrainingState& s) {
  return {{"generator", &s.generator.params().parameters(), nullptr},
          {"generator_buffers", &s.generator.params().buffers(), nullptr},
          {"discriminator", &s.discriminator.params().parameters(), nullptr},
          {"discriminator_buffers", &s.discriminator.params().buffers(), nullptr},
          {"generator_adam_m", nullptr, &s.generator_opt.first_moment},
          {"generator_adam_v", nullptr, &s.generator_opt.second_moment},
          {"discriminator_adam_m", nullptr, &s.discriminator_opt.first_moment},
          {"discriminator_adam_v", nullptr, &s.discriminator_opt.second_moment}};
}

}  // namespace

Json config_to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"lr", c.learning_rate},
              {"disc_lr", c.discriminator_lr()},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"folds", c.folds},
              {"test_fraction", c.test_fraction},
              {"weights",
               {{"seg", c.weights.seg},
                {"reg", c.weights.reg},
                {"cls", c.weights.cls},
                {"tim", c.weights.tim},
                {"adv", c.weights.adv}}},
              {"model", model_to_json(c.model)}};
}

TrainConfig config_from_json(const Json& doc, TrainConfig c) {
  try {
    reject_unknown(doc,
                   {"epochs", "lr", "disc_lr", "batch_size", "seed", "folds", "test_fraction", "weights", "model",
                    "phantom"},
                   "");
    read_field(doc, "epochs", c.epochs);
    read_field(doc, "lr", c.learning_rate);
    read_field(doc, "disc_lr", c.disc_learning_rate);
    read_field(doc, "batch_size", c.batch_size);
    read_field(doc, "seed", c.seed);
    read_field(doc, "folds", c.folds);
    read_field(doc, "test_fraction", c.test_fraction);
    if (doc.contains("weights")) {
      const Json& w = doc.at("weights");
      reject_unknown(w, {"seg", "reg", "cls", "tim", "adv"}, "weights");
      read_field(w, "seg", c.weights.seg);
      read_field(w, "reg", c.weights.reg);
      read_field(w, "cls", c.weights.cls);
      read_field(w, "tim", c.weights.tim);
      read_field(w, "adv", c.weights.adv);
    }
    if (doc.contains("model")) c.model = model_from_json(doc.at("model"), c.model);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

Json eval_report_json(const EvalReport& r) {
  Json j{{"samples", r.samples}};
  if (r.dsc) j["dsc"] = mean_std_json(*r.dsc);
  if (r.iou) j["iou"] = mean_std_json(*r.iou);
  if (r.mae) j["mae"] = mean_std_json(*r.mae);
  if (r.accuracy) j["accuracy"] = *r.accuracy;
  if (r.confusion) {
    Json counts = Json::array(), pct = Json::array();
    const auto rows = r.confusion->row_percent();
    for (std::size_t t = 0; t < 2; ++t) {
      counts.push_back({r.confusion->counts[t][0], r.confusion->counts[t][1]});
      pct.push_back({rows[t][0], rows[t][1]});
    }
    j["confusion"] = {{"counts", counts}, {"row_percent", pct}};
  }
  return j;
}

Json fold_report_json(const FoldReport& r) {
  Json traces = Json::object();
  for (const auto& [name, values] : r.traces) traces[name] = values;
  return Json{{"fold", r.fold},
              {"train_size", r.train_size},
              {"steps", r.steps},
              {"test", eval_report_json(r.test)},
              {"traces", traces}};
}

Json crossval_report_json(const CrossValReport& r, const TrainConfig& config) {
  Json agg = Json::object();
  if (r.aggregate.dsc) agg["dsc"] = mean_std_json(*r.aggregate.dsc);
  if (r.aggregate.iou) agg["iou"] = mean_std_json(*r.aggregate.iou);
  if (r.aggregate.mae) agg["mae"] = mean_std_json(*r.aggregate.mae);
  if (r.aggregate.accuracy) agg["accuracy"] = mean_std_json(*r.aggregate.accuracy);
  Json folds = Json::array();
  for (const FoldReport& f : r.folds) folds.push_back(fold_report_json(f));
  return Json{{"config", config_to_json(config)}, {"aggregate", agg}, {"folds", folds}};
}

Json variants_report_json(const std::vector<VariantResult>& rows, const TrainConfig& config) {
  Json variants = Json::array();
  for (const VariantResult& v : rows) {
    TrainConfig c = config;
    c.model = v.model;
    Json entry = crossval_report_json(v.report, c);
    entry.erase("config");
    variants.push_back({{"name", v.name}, {"model", model_to_json(v.model)}, {"result", entry}});
  }
  return Json{{"config", config_to_json(config)}, {"variants", variants}};
}

void save_checkpoint(const std::filesystem::path& path, const TrainingState& state, const TrainConfig& config) {
  std::filesystem::path blob = path;
  blob += ".bin";
  Json tensors = Json::array();
  std::vector<unsigned char> bytes;
  auto emit = [&](const char* group, const std::string& name, const Tensor& t) {
    tensors.push_back({{"group", group}, {"name", name}, {"shape", t.shape()}});
    for (double v : t.values()) detail::put_le(bytes, static_cast<float>(v));
  };
  const std::pair<const char*, const std::map<std::string, Var>*> var_groups[] = {
      {"generator", &state.generator.params().parameters()},
      {"generator_buffers", &state.generator.params().buffers()},
      {"discriminator", &state.discriminator.params().parameters()},
      {"discriminator_buffers", &state.discriminator.params().buffers()}};
  const std::pair<const char*, const std::map<std::string, Tensor>*> moment_groups[] = {
      {"generator_adam_m", &state.generator_opt.first_moment},
      {"generator_adam_v", &state.generator_opt.second_moment},
      {"discriminator_adam_m", &state.discriminator_opt.first_moment},
      {"discriminator_adam_v", &state.discriminator_opt.second_moment}};
  for (const auto& [group, vars] : var_groups)
    for (const auto& [name, var] : *vars) emit(group, name, var.value());
  for (const auto& [group, moments] : moment_groups)
    for (const auto& [name, t] : *moments) emit(group, name, t);
  TrainConfig echo = config;
  echo.model = state.generator.config();
  Json manifest{{"format", kCheckpointFormat},
                {"version", kCheckpointVersion},
                {"blob", blob.filename().string()},
                {"config", config_to_json(echo)},
                {"generator_step", state.generator_opt.step},
                {"discriminator_step", state.discriminator_opt.step},
                {"tensors", tensors}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(blob.string(), bytes);
  detail::write_text(path.string(), manifest.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string src = path.string();
  Json manifest;
  try {
    manifest = Json::parse(detail::read_text(src));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(src + ": " + e.what());
  }
  LoadedCheckpoint out;
  std::vector<unsigned char> bytes;
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) throw FormatError(src + ": not a checkpoint");
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion) throw FormatError(src + ": unsupported version " + std::to_string(version));
    out.config = config_from_json(manifest.at("config"));
    bytes = detail::read_file((path.parent_path() / manifest.at("blob").get<std::string>()).string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(src + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(src + ": " + e.what());
  }

  try {
    TrainingState& state = out.state.emplace(out.config, 0);
    const auto groups = groups_of(state);
    std::set<std::pair<std::string, std::string>> seen;
    detail::ByteReader in(bytes, src + ".bin");
    for (const auto& entry : manifest.at("tensors")) {
      const auto group = entry.at("group").get<std::string>();
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      if (!seen.insert({group, name}).second) throw FormatError(src + ": " + group + "/" + name + " listed twice");
      auto g = std::find_if(groups.begin(), groups.end(), [&](const Group& x) { return x.name == group; });
      if (g == groups.end()) throw FormatError(src + ": unknown tensor group " + group);
      Tensor* target = nullptr;
      if (g->vars) {
        auto it = g->vars->find(name);
        if (it == g->vars->end()) throw CompatibilityError(src + ": model has no tensor " + name);
        target = &it->second.value_mut();
      } else {
        // moments exist only for parameters of the matching network
        const auto& params = group.starts_with("generator") ? state.generator.params() : state.discriminator.params();
        if (!params.contains(name)) throw CompatibilityError(src + ": optimizer state for unknown parameter " + name);
        target = &(*g->moments)[name];
        *target = Tensor::zeros(params.at(name).shape());
      }
      if (target->shape() != shape)
        throw CompatibilityError(src + ": parameter " + name + " has shape " + shape_string(shape) + ", model expects " +
                                 shape_string(target->shape()));
      if (in.remaining() < target->size() * 4) throw FormatError(src + ".bin: blob shorter than the manifest declares");
      for (double& v : target->values()) v = in.get<float>("tensor data");
      if (!target->all_finite()) throw FormatError(src + ".bin: non-finite value in " + name);
    }
    if (in.remaining() != 0) throw FormatError(src + ".bin: blob longer than the manifest declares");
    for (const Group& g : groups) {
      if (!g.vars) continue;
      for (const auto& [name, var] : *g.vars)
        if (!seen.count({g.name, name})) throw CompatibilityError(src + ": checkpoint lacks tensor " + name);
    }
    state.generator_opt.step = manifest.at("generator_step").get<std::uint64_t>();
    state.discriminator_opt.step = manifest.at("discriminator_step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(src + ": " + e.what());
  }
  return out;
}

}  // namespace mtinet
