#include "ivpt/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ivpt/image_io.hpp"

namespace fs = std::filesystem;

namespace ivpt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void OptimizerConfig::validate() const {
  if (!(lr_backbone > 0) || !(lr_head > 0)) {
    throw std::invalid_argument("optimizer: learning rates must be > 0");
  }
  if (batch_size < 1) throw std::invalid_argument("optimizer: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("optimizer: epochs must be >= 0");
  if (!(decay_factor > 0) || decay_factor > 1) {
    throw std::invalid_argument("optimizer: decay_factor must be in (0,1]");
  }
  if (decay_every_epochs < 1) {
    throw std::invalid_argument("optimizer: decay_every_epochs must be >= 1");
  }
}

void RunConfig::validate() const {
  backbone.validate();
  fusion.validate();
  weights.validate();
  optimizer.validate();
  if (fusion.per_layer_m.size() != static_cast<size_t>(backbone.num_prompted_layers)) {
    throw std::invalid_argument(
        "config: fusion.per_layer_m length must equal backbone.num_prompted_layers");
  }
  if (data_root.empty()) {
    dataset.validate();
    if (dataset.num_classes != backbone.class_count) {
      throw std::invalid_argument(
          "config: dataset.num_classes must equal backbone.class_count for synthetic runs");
    }
    if (dataset.image_size != backbone.image_size) {
      throw std::invalid_argument(
          "config: dataset.image_size must equal backbone.image_size for synthetic runs");
    }
  }
  if (eval_layer < -1 || eval_layer >= backbone.num_prompted_layers) {
    throw std::invalid_argument("config: eval_layer must be -1 or a prompted-layer position");
  }
  if (output_dir.empty()) throw std::invalid_argument("config: output_dir must be non-empty");
}

nlohmann::json RunConfig::to_flat_json() const {
  nlohmann::json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["backbone.image_size"] = backbone.image_size;
  j["backbone.patch_size"] = backbone.patch_size;
  j["backbone.depth"] = backbone.depth;
  j["backbone.embed_dim"] = backbone.embed_dim;
  j["backbone.num_heads"] = backbone.num_heads;
  j["backbone.num_prompted_layers"] = backbone.num_prompted_layers;
  j["backbone.class_count"] = backbone.class_count;
  j["backbone.mlp_ratio"] = backbone.mlp_ratio;
  j["fusion.per_layer_m"] = fusion.per_layer_m;
  j["fusion.num_groups"] = fusion.num_groups;
  j["fusion.temperature"] = fusion.temperature;
  j["fusion.hard_assignment"] = fusion.hard_assignment;
  j["fusion.use_gelu"] = fusion.use_gelu;
  j["weights.lambda_cls"] = weights.lambda_cls;
  j["weights.lambda_ps"] = weights.lambda_ps;
  j["weights.lambda_con"] = weights.lambda_con;
  j["weights.orthogonality"] = weights.w_orthogonality;
  j["weights.equivariance"] = weights.w_equivariance;
  j["weights.presence_fg"] = weights.w_presence_fg;
  j["weights.presence_bg"] = weights.w_presence_bg;
  j["weights.entropy"] = weights.w_entropy;
  j["weights.total_variation"] = weights.w_total_variation;
  j["optimizer.lr_backbone"] = optimizer.lr_backbone;
  j["optimizer.lr_head"] = optimizer.lr_head;
  j["optimizer.batch_size"] = optimizer.batch_size;
  j["optimizer.epochs"] = optimizer.epochs;
  j["optimizer.decay_factor"] = optimizer.decay_factor;
  j["optimizer.decay_every_epochs"] = optimizer.decay_every_epochs;
  j["dataset.num_parts"] = dataset.num_parts;
  j["dataset.num_classes"] = dataset.num_classes;
  j["dataset.samples_per_class"] = dataset.samples_per_class;
  j["dataset.image_size"] = dataset.image_size;
  j["dataset.jitter"] = dataset.jitter;
  j["dataset.jitter_angle_deg"] = dataset.jitter_angle_deg;
  j["dataset.jitter_translate_frac"] = dataset.jitter_translate_frac;
  j["dataset.jitter_scale_lo"] = dataset.jitter_scale_lo;
  j["dataset.jitter_scale_hi"] = dataset.jitter_scale_hi;
  j["dataset.clutter"] = dataset.clutter;
  j["dataset.seed"] = dataset.seed;
  j["data_root"] = data_root;
  j["keypoint_file"] = keypoint_file;
  j["frozen_backbone"] = frozen_backbone;
  j["eval_layer"] = eval_layer;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  return j;
}

namespace {

// Reads one typed value out of a flat config object, turning type mismatches
// into usage errors that name the key.
template <typename T>
void fetch(const nlohmann::json& j, const std::string& key, T* out) {
  try {
    j.at(key).get_to(*out);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config key '" + key + "': " + e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_flat_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  RunConfig cfg;
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key == "schema_version") {
      int v = 0;
      fetch(j, key, &v);
      if (v != kConfigSchemaVersion) {
        throw std::invalid_argument("config: unsupported schema_version " + std::to_string(v));
      }
    } else if (key == "backbone.image_size") {
      fetch(j, key, &cfg.backbone.image_size);
    } else if (key == "backbone.patch_size") {
      fetch(j, key, &cfg.backbone.patch_size);
    } else if (key == "backbone.depth") {
      fetch(j, key, &cfg.backbone.depth);
    } else if (key == "backbone.embed_dim") {
      fetch(j, key, &cfg.backbone.embed_dim);
    } else if (key == "backbone.num_heads") {
      fetch(j, key, &cfg.backbone.num_heads);
    } else if (key == "backbone.num_prompted_layers") {
      fetch(j, key, &cfg.backbone.num_prompted_layers);
    } else if (key == "backbone.class_count") {
      fetch(j, key, &cfg.backbone.class_count);
    } else if (key == "backbone.mlp_ratio") {
      fetch(j, key, &cfg.backbone.mlp_ratio);
    } else if (key == "fusion.per_layer_m") {
      fetch(j, key, &cfg.fusion.per_layer_m);
    } else if (key == "fusion.num_groups") {
      fetch(j, key, &cfg.fusion.num_groups);
    } else if (key == "fusion.temperature") {
      fetch(j, key, &cfg.fusion.temperature);
    } else if (key == "fusion.hard_assignment") {
      fetch(j, key, &cfg.fusion.hard_assignment);
    } else if (key == "fusion.use_gelu") {
      fetch(j, key, &cfg.fusion.use_gelu);
    } else if (key == "weights.lambda_cls") {
      fetch(j, key, &cfg.weights.lambda_cls);
    } else if (key == "weights.lambda_ps") {
      fetch(j, key, &cfg.weights.lambda_ps);
    } else if (key == "weights.lambda_con") {
      fetch(j, key, &cfg.weights.lambda_con);
    } else if (key == "weights.orthogonality") {
      fetch(j, key, &cfg.weights.w_orthogonality);
    } else if (key == "weights.equivariance") {
      fetch(j, key, &cfg.weights.w_equivariance);
    } else if (key == "weights.presence_fg") {
      fetch(j, key, &cfg.weights.w_presence_fg);
    } else if (key == "weights.presence_bg") {
      fetch(j, key, &cfg.weights.w_presence_bg);
    } else if (key == "weights.entropy") {
      fetch(j, key, &cfg.weights.w_entropy);
    } else if (key == "weights.total_variation") {
      fetch(j, key, &cfg.weights.w_total_variation);
    } else if (key == "optimizer.lr_backbone") {
      fetch(j, key, &cfg.optimizer.lr_backbone);
    } else if (key == "optimizer.lr_head") {
      fetch(j, key, &cfg.optimizer.lr_head);
    } else if (key == "optimizer.batch_size") {
      fetch(j, key, &cfg.optimizer.batch_size);
    } else if (key == "optimizer.epochs") {
      fetch(j, key, &cfg.optimizer.epochs);
    } else if (key == "optimizer.decay_factor") {
      fetch(j, key, &cfg.optimizer.decay_factor);
    } else if (key == "optimizer.decay_every_epochs") {
      fetch(j, key, &cfg.optimizer.decay_every_epochs);
    } else if (key == "dataset.num_parts") {
      fetch(j, key, &cfg.dataset.num_parts);
    } else if (key == "dataset.num_classes") {
      fetch(j, key, &cfg.dataset.num_classes);
    } else if (key == "dataset.samples_per_class") {
      fetch(j, key, &cfg.dataset.samples_per_class);
    } else if (key == "dataset.image_size") {
      fetch(j, key, &cfg.dataset.image_size);
    } else if (key == "dataset.jitter") {
      fetch(j, key, &cfg.dataset.jitter);
    } else if (key == "dataset.jitter_angle_deg") {
      fetch(j, key, &cfg.dataset.jitter_angle_deg);
    } else if (key == "dataset.jitter_translate_frac") {
      fetch(j, key, &cfg.dataset.jitter_translate_frac);
    } else if (key == "dataset.jitter_scale_lo") {
      fetch(j, key, &cfg.dataset.jitter_scale_lo);
    } else if (key == "dataset.jitter_scale_hi") {
      fetch(j, key, &cfg.dataset.jitter_scale_hi);
    } else if (key == "dataset.clutter") {
      fetch(j, key, &cfg.dataset.clutter);
    } else if (key == "dataset.seed") {
      fetch(j, key, &cfg.dataset.seed);
    } else if (key == "data_root") {
      fetch(j, key, &cfg.data_root);
    } else if (key == "keypoint_file") {
      fetch(j, key, &cfg.keypoint_file);
    } else if (key == "frozen_backbone") {
      fetch(j, key, &cfg.frozen_backbone);
    } else if (key == "eval_layer") {
      fetch(j, key, &cfg.eval_layer);
    } else if (key == "seed") {
      fetch(j, key, &cfg.seed);
    } else if (key == "output_dir") {
      fetch(j, key, &cfg.output_dir);
    } else {
      unknown.push_back(key);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown key(s):";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw std::invalid_argument(msg);
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config: parse error in '" + path + "': " + e.what());
  }
  return from_flat_json(j);
}

void RunConfig::apply_override(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override must look like key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;  // unparseable values pass through as strings
  nlohmann::json j = to_flat_json();
  if (!j.contains(key)) throw std::invalid_argument("config: unknown key(s): '" + key + "'");
  j[key] = value;
  *this = from_flat_json(j);
}

bool compatible_for_resume(const RunConfig& a, const RunConfig& b) {
  nlohmann::json ja = a.to_flat_json(), jb = b.to_flat_json();
  // The output directory is placement, and the epoch budget only decides when
  // to stop (per-epoch streams are derived from the epoch index), so neither
  // affects the step-for-step trajectory.
  for (const char* key : {"output_dir", "optimizer.epochs"}) {
    ja.erase(key);
    jb.erase(key);
  }
  return ja == jb;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'I', 'V', 'P', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const char* what) {
  const auto n = read_pod<uint64_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  return s;
}

void write_values(std::ostream& os, const Array& a) {
  write_pod<uint64_t>(os, static_cast<uint64_t>(a.numel()));
  os.write(reinterpret_cast<const char*>(a.data()),
           static_cast<std::streamsize>(sizeof(real) * static_cast<size_t>(a.numel())));
}

void read_values(std::istream& is, Array* a, const char* what) {
  const auto n = read_pod<uint64_t>(is, what);
  if (n != static_cast<uint64_t>(a->numel())) {
    throw std::runtime_error(std::string("checkpoint: element count mismatch for ") + what);
  }
  is.read(reinterpret_cast<char*>(a->data()),
          static_cast<std::streamsize>(sizeof(real) * static_cast<size_t>(n)));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const IvptModel& model,
                     const AdamOptimizer& opt, const CheckpointMeta& meta) {
  ParamRegistry reg;
  model.register_params(reg);
  if (opt.slots().size() != reg.items().size()) {
    throw std::logic_error("save_checkpoint: optimizer state does not match the registry");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCkptMagic, sizeof(kCkptMagic));
  write_pod<uint32_t>(os, kCkptVersion);
  write_string(os, cfg.to_flat_json().dump());
  write_pod<int64_t>(os, meta.epoch);
  write_pod<int64_t>(os, meta.global_step);
  write_pod<real>(os, meta.best_val);
  write_pod<int64_t>(os, opt.step_count());
  write_pod<uint64_t>(os, static_cast<uint64_t>(reg.items().size()));
  for (const auto& item : reg.items()) {
    write_string(os, item.name);
    write_values(os, item.var->value);
  }
  for (size_t i = 0; i < reg.items().size(); ++i) {
    write_values(os, opt.slots()[i].m);
    write_values(os, opt.slots()[i].v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

LoadedRun load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != kCkptVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  LoadedRun run;
  nlohmann::json cj = nlohmann::json::parse(read_string(is, "config"));
  run.config = RunConfig::from_flat_json(cj);
  run.config.validate();
  run.meta.epoch = read_pod<int64_t>(is, "epoch");
  run.meta.global_step = read_pod<int64_t>(is, "global_step");
  run.meta.best_val = read_pod<real>(is, "best_val");
  const auto adam_t = read_pod<int64_t>(is, "optimizer step count");

  run.model = std::make_unique<IvptModel>(run.config.backbone, run.config.fusion,
                                          run.config.seed);
  run.model->set_frozen_backbone(run.config.frozen_backbone);
  ParamRegistry reg;
  run.model->register_params(reg);
  const auto n = read_pod<uint64_t>(is, "parameter count");
  if (n != reg.items().size()) {
    throw std::runtime_error("checkpoint: parameter count does not match the config");
  }
  for (const auto& item : reg.items()) {
    const std::string name = read_string(is, "parameter name");
    if (name != item.name) {
      throw std::runtime_error("checkpoint: parameter order mismatch at '" + name +
                               "' (expected '" + item.name + "')");
    }
    read_values(is, &item.var->value, item.name.c_str());
  }
  run.opt.init(reg);
  for (size_t i = 0; i < reg.items().size(); ++i) {
    read_values(is, &run.opt.slots()[i].m, "optimizer first moment");
    read_values(is, &run.opt.slots()[i].v, "optimizer second moment");
  }
  run.opt.set_step_count(adam_t);
  return run;
}

// ---------------------------------------------------------------------------
// Data assembly
// ---------------------------------------------------------------------------

DataBundle load_data(const RunConfig& cfg) {
  DataBundle data;
  if (cfg.data_root.empty()) {
    SynthDataset ds = generate(cfg.dataset);
    data.all = std::move(ds.samples);
    data.train = std::move(ds.train_indices);
    data.val = std::move(ds.val_indices);
    data.test = std::move(ds.test_indices);
    data.manifest_json = std::move(ds.manifest_json);
  } else {
    LoadReport report;
    data.all = load_folder(cfg.data_root, cfg.keypoint_file, &report);
    if (data.all.empty()) {
      std::string msg = "data: no decodable images under '" + cfg.data_root + "'";
      for (const auto& e : report.errors) msg += "\n  " + e;
      throw std::runtime_error(msg);
    }
    if (static_cast<int64_t>(report.class_names.size()) != cfg.backbone.class_count) {
      throw std::runtime_error("data: folder has " + std::to_string(report.class_names.size()) +
                               " classes but the config expects " +
                               std::to_string(cfg.backbone.class_count));
    }
    split_indices(static_cast<int64_t>(data.all.size()), cfg.dataset.seed, &data.train, &data.val,
                  &data.test);
  }
  const Shape want = {3, cfg.backbone.image_size, cfg.backbone.image_size};
  for (const auto& s : data.all) {
    if (s.image.shape() != want) {
      throw std::runtime_error("data: image '" + s.id + "' is " + shape_str(s.image.shape()) +
                               " but the model expects " + shape_str(want));
    }
  }
  return data;
}

std::vector<AnnotatedSample> select_split(const DataBundle& data, const std::string& split) {
  const std::vector<int64_t>* idx = nullptr;
  if (split == "train") {
    idx = &data.train;
  } else if (split == "val") {
    idx = &data.val;
  } else if (split == "test") {
    idx = &data.test;
  } else if (split == "all") {
    return data.all;
  } else {
    throw std::invalid_argument("split must be train|val|test|all, got '" + split + "'");
  }
  std::vector<AnnotatedSample> out;
  out.reserve(idx->size());
  for (int64_t i : *idx) out.push_back(data.all[static_cast<size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

bool report_finite(const LossReport& r) {
  const real scalars[] = {r.cls,     r.orthogonality,   r.equivariance, r.presence_fg,
                          r.presence_bg, r.entropy,     r.total_variation, r.consistency,
                          r.total};
  for (real v : scalars) {
    if (!std::isfinite(v)) return false;
  }
  for (real v : r.per_layer_ps) {
    if (!std::isfinite(v)) return false;
  }
  for (real v : r.per_layer_consistency) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void fill_batch(const std::vector<AnnotatedSample>& all, const std::vector<int64_t>& order,
                size_t first, size_t count, Array* images, IntArray* labels) {
  const Shape& s = all[static_cast<size_t>(order[first])].image.shape();
  *images = Array({static_cast<int64_t>(count), s[0], s[1], s[2]});
  *labels = IntArray({static_cast<int64_t>(count)});
  const int64_t per = s[0] * s[1] * s[2];
  for (size_t i = 0; i < count; ++i) {
    const AnnotatedSample& sample = all[static_cast<size_t>(order[first + i])];
    for (int64_t j = 0; j < per; ++j) (*images)[static_cast<int64_t>(i) * per + j] = sample.image[j];
    (*labels)[static_cast<int64_t>(i)] = sample.label;
  }
}

nlohmann::json val_record(const MetricReport& rep, int epoch, int64_t step) {
  nlohmann::json j = nlohmann::json::parse(rep.to_json());
  j["type"] = "val";
  j["epoch"] = epoch;
  j["step"] = step;
  return j;
}

}  // namespace

MetricReport evaluate_split(const IvptModel& model, const RunConfig& cfg, const DataBundle& data,
                            const std::string& split, uint64_t stability_seed) {
  EvalOptions opt;
  opt.eval_layer = cfg.eval_layer;
  opt.batch_size = cfg.optimizer.batch_size;
  opt.stability.seed = stability_seed;
  return evaluate_model(model, select_split(data, split), opt);
}

TrainResult train(const RunConfig& cfg, std::ostream& log, const std::string& resume_from) {
  cfg.validate();
  ensure_dir(cfg.output_dir);
  {
    std::ofstream cf(fs::path(cfg.output_dir) / "config.json");
    cf << cfg.to_flat_json().dump(2) << "\n";
  }
  DataBundle data = load_data(cfg);
  if (!data.manifest_json.empty()) {
    std::ofstream mf(fs::path(cfg.output_dir) / "data_manifest.json");
    mf << data.manifest_json;
  }
  if (data.train.empty()) throw std::runtime_error("train: empty training split");

  std::unique_ptr<IvptModel> model;
  AdamOptimizer opt;
  CheckpointMeta meta;
  if (resume_from.empty()) {
    model = std::make_unique<IvptModel>(cfg.backbone, cfg.fusion, cfg.seed);
    model->set_frozen_backbone(cfg.frozen_backbone);
    ParamRegistry reg;
    model->register_params(reg);
    opt.init(reg);
  } else {
    LoadedRun run = load_checkpoint(resume_from);
    if (!compatible_for_resume(run.config, cfg)) {
      throw std::invalid_argument("resume: checkpoint config differs from the requested config");
    }
    model = std::move(run.model);
    opt = std::move(run.opt);
    meta = run.meta;
  }
  ParamRegistry reg;
  model->register_params(reg);

  const std::string best_path = (fs::path(cfg.output_dir) / "checkpoint_best.bin").string();
  const std::string final_path = (fs::path(cfg.output_dir) / "checkpoint_final.bin").string();

  TrainResult result;
  result.best_val_accuracy = meta.best_val;
  int64_t global_step = meta.global_step;

  for (int epoch = static_cast<int>(meta.epoch); epoch < cfg.optimizer.epochs; ++epoch) {
    // Deterministic per-epoch shuffle of the train split.
    std::vector<int64_t> order = data.train;
    Rng shuffle_rng(derive_seed(cfg.seed, "order", static_cast<uint64_t>(epoch)));
    for (int64_t i = 0; i < static_cast<int64_t>(order.size()) - 1; ++i) {
      const int64_t j = shuffle_rng.uniform_int(i, static_cast<int64_t>(order.size()) - 1);
      std::swap(order[i], order[j]);
    }
    const real mult =
        std::pow(cfg.optimizer.decay_factor, real(epoch / cfg.optimizer.decay_every_epochs));
    const real lr_backbone = cfg.optimizer.lr_backbone * mult;
    const real lr_head = cfg.optimizer.lr_head * mult;

    for (size_t first = 0; first < order.size();) {
      const size_t count =
          std::min<size_t>(static_cast<size_t>(cfg.optimizer.batch_size), order.size() - first);
      Array images;
      IntArray labels;
      fill_batch(data.all, order, first, count, &images, &labels);
      const uint64_t step_seed = derive_seed(cfg.seed, "step", static_cast<uint64_t>(global_step));
      StepOutput out;
      try {
        out = model->compute_total_loss(images, labels, cfg.weights, step_seed);
        if (!report_finite(out.report)) throw std::runtime_error("non-finite loss");
      } catch (const std::exception& e) {
        nlohmann::json err;
        err["type"] = "error";
        err["step"] = global_step + 1;
        err["epoch"] = epoch;
        err["what"] = e.what();
        err["batch_indices"] =
            std::vector<int64_t>(order.begin() + static_cast<int64_t>(first),
                                 order.begin() + static_cast<int64_t>(first + count));
        // The per-term breakdown exists whenever the forward itself survived.
        if (out.total) {
          err["report"] = nlohmann::json::parse(out.report.to_json_line(global_step + 1, epoch));
        }
        log << err.dump() << "\n" << std::flush;
        throw std::runtime_error("train: aborted at step " + std::to_string(global_step + 1) +
                                 ": " + e.what() + " (diagnostic record written to the log)");
      }
      opt.zero_grad(reg);
      backward(out.total);
      opt.step(reg, lr_backbone, lr_head);
      ++global_step;

      nlohmann::json line = nlohmann::json::parse(out.report.to_json_line(global_step, epoch));
      line["lr_backbone"] = lr_backbone;
      line["lr_head"] = lr_head;
      line["zero_mass_regions"] = out.diagnostics.zero_mass_regions;
      line["transform_resamples"] = out.diagnostics.transform_resamples;
      line["empty_groups"] = out.diagnostics.empty_groups;
      line["occupancy"] = out.diagnostics.occupancy;
      log << line.dump() << "\n";
      first += count;
    }

    MetricReport val = evaluate_split(*model, cfg, data, "val",
                                      derive_seed(cfg.seed, "val-stability",
                                                  static_cast<uint64_t>(epoch)));
    log << val_record(val, epoch, global_step).dump() << "\n" << std::flush;

    meta.epoch = epoch + 1;
    meta.global_step = global_step;
    if (val.accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = val.accuracy;
      meta.best_val = val.accuracy;
      save_checkpoint(best_path, cfg, *model, opt, meta);
      result.best_checkpoint = best_path;
    }
    result.final_val_accuracy = val.accuracy;
    result.final_val_metrics = val;
  }

  meta.global_step = global_step;
  save_checkpoint(final_path, cfg, *model, opt, meta);
  result.final_checkpoint = final_path;
  result.global_steps = global_step;
  return result;
}

// ---------------------------------------------------------------------------
// Visualization
// ---------------------------------------------------------------------------

namespace {

// Overlay palette: every color carries one full-intensity channel, which the
// 0.35-dimmed background can never reach, so a solidly painted patch decodes
// back to its concept id unambiguously.
constexpr unsigned char kVizPalette[][3] = {
    {255, 0, 0},   {0, 255, 0},   {0, 0, 255},   {255, 255, 0},
    {255, 0, 255}, {0, 255, 255}, {255, 128, 0}, {128, 255, 0},
    {0, 128, 255}, {255, 0, 128}, {128, 0, 255}, {0, 255, 128},
};

Array denormalize(const Array& image) {
  Array out(image.shape());
  const int64_t hw = image.dim(1) * image.dim(2);
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < hw; ++i) {
      out[c * hw + i] = std::clamp(image[c * hw + i] * kPixelStd[c] + kPixelMean[c], 0.0, 1.0);
    }
  }
  return out;
}

Array render_importance_chart(const std::vector<real>& importance) {
  const int64_t h = 64, bar = 16;
  const int64_t w = bar * static_cast<int64_t>(importance.size());
  Array chart({3, h, w}, 1.0);  // white background
  for (size_t g = 0; g < importance.size(); ++g) {
    const real p = std::clamp(importance[g], 0.0, 1.0);
    const int64_t height = std::llround(p * real(h - 1));
    const auto& col = kVizPalette[g % (sizeof(kVizPalette) / sizeof(kVizPalette[0]))];
    for (int64_t y = h - height; y < h; ++y) {
      for (int64_t x = static_cast<int64_t>(g) * bar + 1; x < static_cast<int64_t>(g + 1) * bar - 1;
           ++x) {
        for (int64_t c = 0; c < 3; ++c) chart[c * h * w + y * w + x] = col[c] / 255.0;
      }
    }
  }
  return chart;
}

}  // namespace

std::array<unsigned char, 3> viz_palette_color(int concept_id) {
  const int n = viz_palette_size();
  const auto& c = kVizPalette[((concept_id % n) + n) % n];
  return {c[0], c[1], c[2]};
}

int viz_palette_size() { return static_cast<int>(sizeof(kVizPalette) / sizeof(kVizPalette[0])); }

VisualizeResult visualize(const IvptModel& model, const std::vector<AnnotatedSample>& images,
                          const std::string& out_dir, bool dump_assignments) {
  ensure_dir(out_dir);
  VisualizeResult result;
  const auto& bcfg = model.backbone_config();
  const int64_t grid = bcfg.grid(), patch = bcfg.patch_size, size = bcfg.image_size;
  const Shape want = {3, size, size};
  NoGradGuard ng;
  for (const AnnotatedSample& sample : images) {
    if (sample.image.shape() != want) {
      result.errors.push_back("'" + sample.id + "': image is " + shape_str(sample.image.shape()) +
                              " but the checkpoint expects " + shape_str(want));
      continue;
    }
    Array batch({1, 3, size, size});
    for (int64_t j = 0; j < batch.numel(); ++j) batch[j] = sample.image[j];
    ForwardTrace tr = model.forward(batch, /*with_noise=*/false, 0);
    const Array dimmed = denormalize(sample.image);

    for (int l = 0; l < model.num_prompted_layers(); ++l) {
      const int block = bcfg.first_prompted_layer() + l;
      const LayerTrace& layer = tr.layers[static_cast<size_t>(l)];
      const int64_t m = model.fusion_config().per_layer_m[static_cast<size_t>(l)];
      Array overlay({3, size, size});
      IntArray grid_assignment({grid, grid});
      for (int64_t gy = 0; gy < grid; ++gy) {
        for (int64_t gx = 0; gx < grid; ++gx) {
          const int64_t k = layer.att.assignment[gy * grid + gx];
          grid_assignment[gy * grid + gx] = k;
          const bool fg = k >= 0 && k < m - 1;
          std::array<unsigned char, 3> col{};
          if (fg) col = viz_palette_color(static_cast<int>(k));
          for (int64_t y = gy * patch; y < (gy + 1) * patch; ++y) {
            for (int64_t x = gx * patch; x < (gx + 1) * patch; ++x) {
              for (int64_t c = 0; c < 3; ++c) {
                overlay[c * size * size + y * size + x] =
                    fg ? col[static_cast<size_t>(c)] / 255.0
                       : 0.35 * dimmed[c * size * size + y * size + x];
              }
            }
          }
        }
      }
      const std::string stem = sample.id + "_layer" + std::to_string(block);
      const std::string png = (fs::path(out_dir) / (stem + ".png")).string();
      write_png(png, overlay);
      result.files_written.push_back(png);
      if (dump_assignments) {
        const std::string npy = (fs::path(out_dir) / (stem + "_assignment.npy")).string();
        write_npy_int64(npy, grid_assignment);
        result.files_written.push_back(npy);
      }
    }

    std::vector<Array> scores;
    const int64_t C = bcfg.class_count;
    for (const Var& hs : tr.head_scores) {
      Array s({C});
      for (int64_t c = 0; c < C; ++c) s[c] = hs->value[c];
      scores.push_back(std::move(s));
    }
    const std::vector<real> imp = importance_scores(scores);
    const std::string chart = (fs::path(out_dir) / (sample.id + "_importance.png")).string();
    write_png(chart, render_importance_chart(imp));
    result.files_written.push_back(chart);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

namespace {

std::string schedule_label(const std::vector<int64_t>& m) {
  std::string s = "m=[";
  for (size_t i = 0; i < m.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(m[i]);
  }
  return s + "]";
}

std::string sanitize(const std::string& label) {
  std::string out;
  for (char c : label) {
    out += (std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  }
  return out;
}

}  // namespace

std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis,
                                std::ostream& log) {
  std::vector<std::pair<std::string, RunConfig>> settings;
  if (axis == "layers") {
    // Prompted-layer count sweep; each setting keeps the tail of the base
    // concept schedule so the deepest layers stay comparable.
    for (int k = 1; k <= base.backbone.num_prompted_layers; ++k) {
      RunConfig cfg = base;
      cfg.backbone.num_prompted_layers = k;
      cfg.fusion.per_layer_m.assign(base.fusion.per_layer_m.end() - k,
                                    base.fusion.per_layer_m.end());
      settings.emplace_back("layers=" + std::to_string(k), cfg);
    }
  } else if (axis == "prototype_counts") {
    // Concept-budget sweep holding roughly ten concepts at the layer the
    // metrics read while the prompt depth grows.
    const std::vector<std::vector<int64_t>> schedules = {{10}, {13, 10, 7}, {16, 13, 10, 7}};
    for (const auto& m : schedules) {
      RunConfig cfg = base;
      cfg.fusion.per_layer_m = m;
      cfg.backbone.num_prompted_layers = static_cast<int>(m.size());
      settings.emplace_back(schedule_label(m), cfg);
    }
  } else if (axis == "loss_toggles") {
    settings.emplace_back("full", base);
    RunConfig no_con = base;
    no_con.weights.lambda_con = 0;
    settings.emplace_back("lambda_con=0", no_con);
    RunConfig no_ps = base;
    no_ps.weights.lambda_ps = 0;
    settings.emplace_back("lambda_ps=0", no_ps);
  } else {
    throw std::invalid_argument("ablate axis must be layers|prototype_counts|loss_toggles, got '" +
                                axis + "'");
  }

  std::vector<AblationRow> rows;
  for (auto& [label, cfg] : settings) {
    cfg.output_dir = (fs::path(base.output_dir) / sanitize(label)).string();
    AblationRow row;
    row.setting = label;
    try {
      TrainResult tr = train(cfg, log);
      LoadedRun run = load_checkpoint(tr.final_checkpoint);
      DataBundle data = load_data(run.config);
      MetricReport rep = evaluate_split(*run.model, run.config, data, "test",
                                        derive_seed(cfg.seed, "ablate-eval"));
      row.consistency = rep.consistency;
      row.stability = rep.stability;
      row.accuracy = rep.accuracy;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "setting\tCon.\tSta.\tAcc.\n";
  os.setf(std::ios::fixed);
  os.precision(2);
  for (const auto& row : rows) {
    if (row.ok) {
      os << row.setting << "\t" << row.consistency << "\t" << row.stability << "\t" << row.accuracy
         << "\n";
    } else {
      os << row.setting << "\t-\t-\t-\n";
    }
  }
  return os.str();
}

}  // namespace ivpt
