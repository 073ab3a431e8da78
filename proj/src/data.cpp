#include "ivpt/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ivpt/image_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace ivpt {

namespace {

constexpr real kPi = 3.14159265358979323846;
constexpr real kBackgroundBase = 0.12;
// Object geometry as fractions of the image size: ring radius of the part
// centers and the part's own half-size.
constexpr real kRingFrac = 0.22;
constexpr real kPartFrac = 0.11;

const std::array<std::array<real, 3>, 8> kPalette = {{
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.20, 0.30, 0.90},  // blue
    {0.95, 0.85, 0.10},  // yellow
    {0.85, 0.20, 0.80},  // magenta
    {0.10, 0.80, 0.85},  // cyan
    {0.95, 0.55, 0.10},  // orange
    {0.92, 0.92, 0.92},  // white
}};

// Containment test in the part's local frame (unit half-size, y down).
bool inside_shape(int shape, real lx, real ly) {
  switch (shape % 4) {
    case 0:  // circle
      return lx * lx + ly * ly <= 1.0;
    case 1:  // square (area-matched to the circle's footprint)
      return std::max(std::abs(lx), std::abs(ly)) <= 0.85;
    case 2:  // up-pointing triangle, apex at the top of the cell
      return ly <= 0.8 && ly >= 1.85 * std::abs(lx) - 1.05;
    default:  // diamond
      return std::abs(lx) + std::abs(ly) <= 1.1;
  }
}

int64_t global_index(const SynthConfig& cfg, int class_id, int index) {
  return static_cast<int64_t>(class_id) * cfg.samples_per_class + index;
}

}  // namespace

void SynthConfig::validate() const {
  if (num_parts < 1) throw std::invalid_argument("SynthConfig: num_parts must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("SynthConfig: num_classes must be >= 1");
  if (num_classes > palette_size()) {
    throw std::invalid_argument(
        "SynthConfig: num_classes exceeds the attribute capacity of the color palette (" +
        std::to_string(palette_size()) + ")");
  }
  if (samples_per_class < 1) throw std::invalid_argument("SynthConfig: samples_per_class >= 1");
  if (image_size < 16) throw std::invalid_argument("SynthConfig: image_size must be >= 16");
  if (jitter_angle_deg < 0 || jitter_translate_frac < 0 || jitter_translate_frac > 0.1) {
    throw std::invalid_argument("SynthConfig: jitter ranges out of bounds");
  }
  if (!(jitter_scale_lo > 0) || jitter_scale_lo > jitter_scale_hi || jitter_scale_hi > 1.5) {
    throw std::invalid_argument("SynthConfig: jitter scale range invalid");
  }
  if (clutter < 0 || clutter > 1) throw std::invalid_argument("SynthConfig: clutter in [0,1]");
}

std::string SynthConfig::canonical() const {
  std::ostringstream s;
  s << "num_parts=" << num_parts << ";num_classes=" << num_classes
    << ";samples_per_class=" << samples_per_class << ";image_size=" << image_size
    << ";jitter=" << (jitter ? 1 : 0) << ";angle=" << jitter_angle_deg
    << ";translate=" << jitter_translate_frac << ";scale_lo=" << jitter_scale_lo
    << ";scale_hi=" << jitter_scale_hi << ";clutter=" << clutter << ";seed=" << seed;
  return s.str();
}

int palette_size() { return static_cast<int>(kPalette.size()); }

std::array<real, 3> palette_color(int idx) {
  return kPalette[static_cast<size_t>(idx) % kPalette.size()];
}

int attribute_palette_index(int class_id, int part_id) {
  return (part_id + class_id) % palette_size();
}

uint64_t config_hash(const SynthConfig& cfg) {
  // FNV-1a 64 over the canonical serialization.
  uint64_t h = 1469598103934665603ull;
  for (char c : cfg.canonical()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

void split_indices(int64_t n, uint64_t seed, std::vector<int64_t>* train,
                   std::vector<int64_t>* val, std::vector<int64_t>* test) {
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, "splits"));
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = rng.uniform_int(0, i);
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  const int64_t n_train = n * 70 / 100;
  const int64_t n_val = n * 15 / 100;
  train->assign(perm.begin(), perm.begin() + n_train);
  val->assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  test->assign(perm.begin() + n_train + n_val, perm.end());
}

AnnotatedSample render_sample(const SynthConfig& cfg, int class_id, int index,
                              IntArray* part_mask) {
  const int64_t sz = cfg.image_size;
  const int64_t g = global_index(cfg, class_id, index);
  // Geometry and background draw from separate derived streams so the clutter
  // level never shifts the object placement for a given seed.
  Rng geom(derive_seed(cfg.seed, "synth-geom", static_cast<uint64_t>(g)));
  Rng bg(derive_seed(cfg.seed, "synth-bg", static_cast<uint64_t>(g)));

  real angle = 0, scale = 1, tx = 0, ty = 0;
  if (cfg.jitter) {
    angle = geom.uniform(-cfg.jitter_angle_deg, cfg.jitter_angle_deg) * kPi / 180.0;
    scale = geom.uniform(cfg.jitter_scale_lo, cfg.jitter_scale_hi);
    tx = geom.uniform(-cfg.jitter_translate_frac, cfg.jitter_translate_frac) * real(sz);
    ty = geom.uniform(-cfg.jitter_translate_frac, cfg.jitter_translate_frac) * real(sz);
  }
  const real cx = real(sz - 1) / 2 + tx, cy = real(sz - 1) / 2 + ty;
  const real ring = kRingFrac * real(sz) * scale;
  const real half = kPartFrac * real(sz) * scale;
  const real ca = std::cos(angle), sa = std::sin(angle);

  Array raw({3, sz, sz});
  for (int64_t i = 0; i < 3 * sz * sz; ++i) raw[i] = kBackgroundBase;
  if (cfg.clutter > 0) {
    const real amp = 0.05 * cfg.clutter;
    for (int64_t i = 0; i < 3 * sz * sz; ++i) raw[i] += bg.uniform(-amp, amp);
    const int blobs = static_cast<int>(std::lround(cfg.clutter * 8));
    for (int bi = 0; bi < blobs; ++bi) {
      const int64_t bw = bg.uniform_int(4, 12), bh = bg.uniform_int(4, 12);
      const int64_t bx = bg.uniform_int(0, sz - 1), by = bg.uniform_int(0, sz - 1);
      const real col[3] = {bg.uniform(0.05, 0.35), bg.uniform(0.05, 0.35),
                           bg.uniform(0.05, 0.35)};
      for (int64_t y = by; y < std::min(by + bh, sz); ++y) {
        for (int64_t x = bx; x < std::min(bx + bw, sz); ++x) {
          for (int64_t c = 0; c < 3; ++c) raw[c * sz * sz + y * sz + x] = col[c];
        }
      }
    }
  }

  IntArray mask({sz, sz}, -1);
  std::vector<std::pair<real, real>> centers(static_cast<size_t>(cfg.num_parts));
  for (int k = 0; k < cfg.num_parts; ++k) {
    // Part centers sit on a ring, 45 degrees offset so the default 4 parts
    // occupy the diagonals; the whole object rotates rigidly with the jitter.
    const real phi = angle + (45.0 + 360.0 * k / cfg.num_parts) * kPi / 180.0;
    const real px = cx + ring * std::cos(phi);
    const real py = cy + ring * std::sin(phi);
    centers[static_cast<size_t>(k)] = {px, py};
    const auto col = palette_color(attribute_palette_index(class_id, k));
    for (int64_t y = 0; y < sz; ++y) {
      for (int64_t x = 0; x < sz; ++x) {
        const real dx = real(x) - px, dy = real(y) - py;
        const real lx = (ca * dx + sa * dy) / half;
        const real ly = (-sa * dx + ca * dy) / half;
        if (inside_shape(k, lx, ly)) {
          mask[y * sz + x] = k;
          for (int64_t c = 0; c < 3; ++c) raw[c * sz * sz + y * sz + x] = col[c];
        }
      }
    }
  }

  AnnotatedSample s;
  {
    std::ostringstream id;
    id << "class" << class_id << "_" << std::setw(4) << std::setfill('0') << index;
    s.id = id.str();
  }
  s.label = class_id;

  // Keypoints from the rendered raster: centroid of each part's visible
  // pixels. All shapes are convex, so the centroid lies inside; under
  // occlusion (possible for dense part rings) fall back to the member pixel
  // nearest the centroid.
  for (int k = 0; k < cfg.num_parts; ++k) {
    Keypoint kp;
    kp.part_id = k;
    real sx = 0, sy = 0;
    int64_t count = 0;
    for (int64_t y = 0; y < sz; ++y) {
      for (int64_t x = 0; x < sz; ++x) {
        if (mask[y * sz + x] == k) {
          sx += real(x);
          sy += real(y);
          ++count;
        }
      }
    }
    if (count > 0) {
      kp.x = sx / real(count);
      kp.y = sy / real(count);
      const int64_t rx = std::lround(kp.x), ry = std::lround(kp.y);
      if (mask[ry * sz + rx] != k) {
        real best = 1e30;
        for (int64_t y = 0; y < sz; ++y) {
          for (int64_t x = 0; x < sz; ++x) {
            if (mask[y * sz + x] != k) continue;
            const real d = (real(x) - kp.x) * (real(x) - kp.x) +
                           (real(y) - kp.y) * (real(y) - kp.y);
            if (d < best) {
              best = d;
              kp.x = real(x);
              kp.y = real(y);
            }
          }
        }
      }
      kp.visible = true;
    }
    s.keypoints.push_back(kp);
  }

  // Normalize with the pinned constants.
  s.image = Array({3, sz, sz});
  for (int64_t c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < sz * sz; ++i) {
      s.image[c * sz * sz + i] = (raw[c * sz * sz + i] - kPixelMean[c]) / kPixelStd[c];
    }
  }
  if (part_mask) *part_mask = mask;
  return s;
}

SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset ds;
  ds.config = cfg;
  const int64_t n = int64_t(cfg.num_classes) * cfg.samples_per_class;
  ds.samples.reserve(static_cast<size_t>(n));
  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int i = 0; i < cfg.samples_per_class; ++i) {
      ds.samples.push_back(render_sample(cfg, c, i));
    }
  }
  split_indices(n, cfg.seed, &ds.train_indices, &ds.val_indices, &ds.test_indices);

  nlohmann::json man;
  man["schema_version"] = 1;
  man["dataset"] = "synthetic-parts";
  man["config"] = {{"num_parts", cfg.num_parts},
                   {"num_classes", cfg.num_classes},
                   {"samples_per_class", cfg.samples_per_class},
                   {"image_size", cfg.image_size},
                   {"jitter", cfg.jitter},
                   {"jitter_angle_deg", cfg.jitter_angle_deg},
                   {"jitter_translate_frac", cfg.jitter_translate_frac},
                   {"jitter_scale_lo", cfg.jitter_scale_lo},
                   {"jitter_scale_hi", cfg.jitter_scale_hi},
                   {"clutter", cfg.clutter},
                   {"seed", cfg.seed}};
  {
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << config_hash(cfg);
    man["config_hash"] = hex.str();
  }
  man["normalization"] = {{"mean", {kPixelMean[0], kPixelMean[1], kPixelMean[2]}},
                          {"std", {kPixelStd[0], kPixelStd[1], kPixelStd[2]}}};
  nlohmann::json palette = nlohmann::json::array();
  for (int i = 0; i < palette_size(); ++i) {
    const auto c = palette_color(i);
    palette.push_back({c[0], c[1], c[2]});
  }
  man["palette"] = palette;
  nlohmann::json table = nlohmann::json::array();
  for (int c = 0; c < cfg.num_classes; ++c) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < cfg.num_parts; ++p) row.push_back(attribute_palette_index(c, p));
    table.push_back(row);
  }
  man["attribute_table"] = table;
  man["splits"] = {{"rule", "shuffled 70/15/15, stream 'splits' of the dataset seed"},
                   {"train", ds.train_indices.size()},
                   {"val", ds.val_indices.size()},
                   {"test", ds.test_indices.size()}};
  man["num_samples"] = n;
  ds.manifest_json = man.dump(2) + "\n";
  return ds;
}

void write_folder(const SynthDataset& ds, const std::string& root) {
  fs::create_directories(root);
  std::ofstream kp(fs::path(root) / "keypoints.txt");
  if (!kp) throw std::runtime_error(root + ": cannot write keypoints.txt");
  for (const auto& s : ds.samples) {
    const fs::path dir = fs::path(root) / ("class" + std::to_string(s.label));
    fs::create_directories(dir);
    const int64_t sz = s.image.dim(1);
    Array raw({3, sz, sz});
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t i = 0; i < sz * sz; ++i) {
        raw[c * sz * sz + i] = s.image[c * sz * sz + i] * kPixelStd[c] + kPixelMean[c];
      }
    }
    write_png((dir / (s.id + ".png")).string(), raw);
    for (const auto& k : s.keypoints) {
      kp << s.id << " " << k.part_id << " " << std::fixed << std::setprecision(4) << k.x << " "
         << k.y << " " << (k.visible ? 1 : 0) << "\n";
    }
  }
  std::ofstream man(fs::path(root) / "manifest.json");
  man << ds.manifest_json;
}

std::vector<AnnotatedSample> load_folder(const std::string& root, const std::string& keypoint_file,
                                         LoadReport* report) {
  LoadReport local;
  LoadReport& rep = report ? *report : local;

  std::map<std::string, std::vector<Keypoint>> kp_by_id;
  if (!keypoint_file.empty() && fs::exists(keypoint_file)) {
    std::ifstream f(keypoint_file);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::string id;
      Keypoint k;
      int vis = 0;
      if (row >> id >> k.part_id >> k.x >> k.y >> vis) {
        k.visible = vis != 0;
        kp_by_id[id].push_back(k);
      } else {
        rep.errors.push_back("keypoints: malformed row: " + line);
      }
    }
  }

  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  rep.class_names = class_dirs;

  std::vector<AnnotatedSample> out;
  for (size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / class_dirs[label])) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      Array raw;
      try {
        raw = read_png(p.string());
      } catch (const std::exception& e) {
        ++rep.undecodable;
        rep.errors.push_back(e.what());
        continue;
      }
      AnnotatedSample s;
      s.id = p.stem().string();
      s.label = static_cast<int>(label);
      const int64_t sz2 = raw.dim(1) * raw.dim(2);
      s.image = Array({3, raw.dim(1), raw.dim(2)});
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t i = 0; i < sz2; ++i) {
          s.image[c * sz2 + i] = (raw[c * sz2 + i] - kPixelMean[c]) / kPixelStd[c];
        }
      }
      auto it = kp_by_id.find(s.id);
      if (it != kp_by_id.end()) {
        s.keypoints = it->second;
      } else {
        ++rep.missing_keypoints;
      }
      ++rep.images_loaded;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace ivpt
