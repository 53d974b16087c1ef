#include "coseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace coseg {

const ImageSample& Dataset::by_id(const std::string& id) const {
  for (const auto& s : samples)
    if (s.id == id) return s;
  throw std::out_of_range("dataset: unknown sample id " + id);
}

std::vector<const ImageSample*> Dataset::split(const std::string& name) const {
  const std::vector<std::string>* ids = nullptr;
  if (name == "train") ids = &manifest.splits.train;
  else if (name == "val") ids = &manifest.splits.val;
  else if (name == "test") ids = &manifest.splits.test;
  else throw std::invalid_argument("dataset: unknown split " + name);
  std::vector<const ImageSample*> out;
  for (const auto& id : *ids) out.push_back(&by_id(id));
  return out;
}

namespace synth {

namespace {

std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%05d", index);
  return buf;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b;
  x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27; x *= 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Smooth random field: coarse Gaussian noise bilinearly upsampled.
std::vector<float> smooth_field(int H, int W, int coarse, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const int ch = coarse + 1, cw = coarse + 1;
  std::vector<float> grid(static_cast<std::size_t>(ch) * cw);
  for (auto& v : grid) v = static_cast<float>(nd(rng));
  std::vector<float> field(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    double fy = static_cast<double>(y) / H * coarse;
    int y0 = static_cast<int>(fy);
    double wy = fy - y0;
    for (int x = 0; x < W; ++x) {
      double fx = static_cast<double>(x) / W * coarse;
      int x0 = static_cast<int>(fx);
      double wx = fx - x0;
      double v = grid[y0 * cw + x0] * (1 - wy) * (1 - wx) +
                 grid[y0 * cw + x0 + 1] * (1 - wy) * wx +
                 grid[(y0 + 1) * cw + x0] * wy * (1 - wx) +
                 grid[(y0 + 1) * cw + x0 + 1] * wy * wx;
      field[static_cast<std::size_t>(y) * W + x] = static_cast<float>(v);
    }
  }
  return field;
}

struct Ellipse {
  double cy, cx, a, b, theta;
  std::vector<std::pair<int, int>> pixels(int H, int W) const {
    std::vector<std::pair<int, int>> out;
    int r = static_cast<int>(std::ceil(std::max(a, b))) + 1;
    double ct = std::cos(theta), st = std::sin(theta);
    for (int y = static_cast<int>(cy) - r; y <= static_cast<int>(cy) + r; ++y) {
      for (int x = static_cast<int>(cx) - r; x <= static_cast<int>(cx) + r; ++x) {
        if (y < 0 || y >= H || x < 0 || x >= W) {
          // off-image pixels make the placement invalid
          double dy = y - cy, dx = x - cx;
          double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
          if (u * u + v * v <= 1.0) return {};
          continue;
        }
        double dy = y - cy, dx = x - cx;
        double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
        if (u * u + v * v <= 1.0) out.push_back({y, x});
      }
    }
    return out;
  }
};

bool region_4connected(const std::vector<std::pair<int, int>>& px) {
  if (px.empty()) return false;
  std::map<std::pair<int, int>, bool> seen;
  for (auto& p : px) seen[p] = false;
  std::vector<std::pair<int, int>> stack{px[0]};
  seen[px[0]] = true;
  std::size_t visited = 1;
  while (!stack.empty()) {
    auto [y, x] = stack.back();
    stack.pop_back();
    for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      auto it = seen.find({y + dy, x + dx});
      if (it != seen.end() && !it->second) {
        it->second = true;
        ++visited;
        stack.push_back(it->first);
      }
    }
  }
  return visited == px.size();
}

}  // namespace

ImageSample generate_sample(const SynthConfig& cfg, int index) {
  cfg.validate();
  std::mt19937_64 rng(mix(static_cast<std::uint64_t>(cfg.seed), static_cast<std::uint64_t>(index)));
  const int H = cfg.H, W = cfg.W, K = cfg.n_classes;

  ImageSample s;
  s.id = sample_id(index);
  s.semantic.H = H; s.semantic.W = W; s.semantic.ids.assign(static_cast<std::size_t>(H) * W, 0);
  s.instance.H = H; s.instance.W = W; s.instance.ids.assign(static_cast<std::size_t>(H) * W, 0);

  // Tissue: thresholded argmax over per-class smooth fields. Coarse grid
  // resolution follows the configured blob count.
  std::uniform_int_distribution<int> bc(cfg.blob_count_min, cfg.blob_count_max);
  std::vector<std::vector<float>> fields;
  for (int k = 0; k < K; ++k) {
    int coarse = std::max(2, static_cast<int>(std::lround(std::sqrt(static_cast<double>(bc(rng))) + 1)));
    fields.push_back(smooth_field(H, W, coarse, rng));
  }
  const float bg_threshold = 0.25f;
  for (std::size_t i = 0; i < s.semantic.ids.size(); ++i) {
    int best = -1;
    float bv = bg_threshold;
    for (int k = 0; k < K; ++k)
      if (fields[k][i] > bv) { bv = fields[k][i]; best = k; }
    s.semantic.ids[i] = best + 1;  // 0 stays background
  }

  // Class pixel lists for nucleus placement.
  std::vector<std::vector<std::size_t>> class_px(K);
  for (std::size_t i = 0; i < s.semantic.ids.size(); ++i)
    if (s.semantic.ids[i] > 0) class_px[s.semantic.ids[i] - 1].push_back(i);

  std::int32_t next_id = 1;
  std::uniform_real_distribution<double> ur(cfg.radius_min, cfg.radius_max);
  std::uniform_real_distribution<double> ut(0.0, M_PI);
  for (int k = 0; k < K; ++k) {
    if (class_px[k].empty() || cfg.nuclei_density_per_class[k] <= 0) continue;
    double lambda = cfg.nuclei_density_per_class[k] * class_px[k].size() / 1000.0;
    std::poisson_distribution<int> pc(lambda);
    int want = pc(rng);
    std::uniform_int_distribution<std::size_t> pick(0, class_px[k].size() - 1);
    for (int n = 0; n < want; ++n) {
      for (int attempt = 0; attempt < 10; ++attempt) {
        std::size_t c = class_px[k][pick(rng)];
        Ellipse e{static_cast<double>(c / W), static_cast<double>(c % W), ur(rng), ur(rng), ut(rng)};
        auto px = e.pixels(H, W);
        if (px.empty()) continue;
        bool ok = true;
        for (auto [y, x] : px) {
          if (s.semantic.at(y, x) != k + 1 || s.instance.at(y, x) != 0) { ok = false; break; }
        }
        if (!ok || !region_4connected(px)) continue;
        for (auto [y, x] : px) s.instance.at(y, x) = next_id;
        ++next_id;
        break;
      }
    }
  }

  // Distractors: nucleus-shaped blobs fully inside the background. Rendered
  // like nuclei below but absent from the labels.
  std::vector<std::uint8_t> distractor(s.semantic.ids.size(), 0);
  if (cfg.distractor_density > 0) {
    std::vector<std::size_t> bg_px;
    for (std::size_t i = 0; i < s.semantic.ids.size(); ++i)
      if (s.semantic.ids[i] == 0) bg_px.push_back(i);
    if (!bg_px.empty()) {
      double lambda = cfg.distractor_density * bg_px.size() / 1000.0;
      std::poisson_distribution<int> pc(lambda);
      int want = pc(rng);
      std::uniform_int_distribution<std::size_t> pick(0, bg_px.size() - 1);
      for (int n = 0; n < want; ++n) {
        for (int attempt = 0; attempt < 10; ++attempt) {
          std::size_t c = bg_px[pick(rng)];
          Ellipse e{static_cast<double>(c / W), static_cast<double>(c % W), ur(rng), ur(rng), ut(rng)};
          auto px = e.pixels(H, W);
          if (px.empty()) continue;
          bool ok = true;
          for (auto [y, x] : px)
            if (s.semantic.at(y, x) != 0) { ok = false; break; }
          if (!ok) continue;
          for (auto [y, x] : px) distractor[static_cast<std::size_t>(y) * W + x] = 1;
          break;
        }
      }
    }
  }

  // Render: near-identical tissue hues (contrast knob), dark nuclei, noise.
  s.image.H = H; s.image.W = W; s.image.rgb.resize(static_cast<std::size_t>(H) * W * 3);
  const float base[3] = {0.82f, 0.62f, 0.72f};
  const float bg[3] = {0.93f, 0.91f, 0.93f};
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      int cls = s.semantic.at(y, x);
      float px[3];
      if (cls == 0) {
        for (int c = 0; c < 3; ++c) px[c] = bg[c];
      } else {
        double shift = cfg.class_contrast * (cls - 1);
        px[0] = base[0] - static_cast<float>(shift);
        px[1] = base[1] + static_cast<float>(0.5 * shift);
        px[2] = base[2] + static_cast<float>(shift);
      }
      if (s.instance.at(y, x) > 0 || distractor[static_cast<std::size_t>(y) * W + x]) {
        px[0] *= 0.38f; px[1] *= 0.32f; px[2] *= 0.52f;
      }
      for (int c = 0; c < 3; ++c) {
        float v = px[c] + static_cast<float>(noise(rng));
        v = std::min(std::max(v, 0.f), 1.f);
        // quantize to 8-bit levels so the PNG round trip is lossless
        s.image.at(y, x, c) = std::lround(v * 255.f) / 255.f;
      }
    }
  }
  return s;
}

HVMaps hv_targets(const LabelMap& instance) {
  HVMaps hv;
  hv.H = instance.H; hv.W = instance.W;
  hv.h.assign(static_cast<std::size_t>(hv.H) * hv.W, 0.f);
  hv.v.assign(hv.h.size(), 0.f);

  std::map<std::int32_t, std::vector<std::size_t>> regions;
  for (std::size_t i = 0; i < instance.ids.size(); ++i)
    if (instance.ids[i] > 0) regions[instance.ids[i]].push_back(i);

  for (const auto& [id, px] : regions) {
    double cy = 0, cx = 0;
    for (auto i : px) { cy += static_cast<double>(i / instance.W); cx += static_cast<double>(i % instance.W); }
    cy /= px.size(); cx /= px.size();
    double max_dx = 0, max_dy = 0;
    for (auto i : px) {
      max_dx = std::max(max_dx, std::abs(static_cast<double>(i % instance.W) - cx));
      max_dy = std::max(max_dy, std::abs(static_cast<double>(i / instance.W) - cy));
    }
    for (auto i : px) {
      double dx = static_cast<double>(i % instance.W) - cx;
      double dy = static_cast<double>(i / instance.W) - cy;
      hv.h[i] = max_dx > 0 ? static_cast<float>(dx / max_dx) : 0.f;
      hv.v[i] = max_dy > 0 ? static_cast<float>(dy / max_dy) : 0.f;
    }
  }
  return hv;
}

void binary_targets(const ImageSample& s, LabelMap& tissue_fg, LabelMap& nuclei_fg) {
  tissue_fg.H = nuclei_fg.H = s.semantic.H;
  tissue_fg.W = nuclei_fg.W = s.semantic.W;
  tissue_fg.ids.resize(s.semantic.ids.size());
  nuclei_fg.ids.resize(s.semantic.ids.size());
  for (std::size_t i = 0; i < s.semantic.ids.size(); ++i) {
    tissue_fg.ids[i] = s.semantic.ids[i] > 0 ? 1 : 0;
    nuclei_fg.ids[i] = s.instance.ids[i] > 0 ? 1 : 0;
  }
}

std::string config_hash(const SynthConfig& cfg) {
  json j{{"H", cfg.H}, {"W", cfg.W}, {"K", cfg.n_classes},
         {"blob_min", cfg.blob_count_min}, {"blob_max", cfg.blob_count_max},
         {"densities", cfg.nuclei_density_per_class},
         {"r_min", cfg.radius_min}, {"r_max", cfg.radius_max},
         {"noise", cfg.noise_sigma}, {"distractors", cfg.distractor_density},
         {"contrast", cfg.class_contrast}, {"seed", cfg.seed}};
  std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) { h ^= c; h *= 0x100000001b3ULL; }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

bool instances_connected(const LabelMap& instance, std::string* offending) {
  std::map<std::int32_t, std::vector<std::size_t>> regions;
  for (std::size_t i = 0; i < instance.ids.size(); ++i)
    if (instance.ids[i] > 0) regions[instance.ids[i]].push_back(i);
  for (const auto& [id, px] : regions) {
    std::vector<std::pair<int, int>> pts;
    pts.reserve(px.size());
    for (auto i : px)
      pts.push_back({static_cast<int>(i / instance.W), static_cast<int>(i % instance.W)});
    if (!region_4connected(pts)) {
      if (offending) *offending = "instance id " + std::to_string(id);
      return false;
    }
  }
  return true;
}

Manifest generate_dataset(const SynthConfig& cfg, int n, const std::string& out_dir) {
  cfg.validate();
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  fs::create_directories(fs::path(out_dir) / "semantic", ec);
  fs::create_directories(fs::path(out_dir) / "instance", ec);
  if (ec) throw std::runtime_error("generate_dataset: cannot create " + out_dir);

  Manifest m;
  m.config_hash = config_hash(cfg);
  const int n_val = n / 10, n_test = n / 5;
  const int n_train = n - n_val - n_test;
  for (int i = 0; i < n; ++i) {
    ImageSample s = generate_sample(cfg, i);
    io::write_rgb8((fs::path(out_dir) / "images" / (s.id + ".png")).string(), s.image);
    io::write_gray8((fs::path(out_dir) / "semantic" / (s.id + ".png")).string(), s.semantic);
    io::write_gray16((fs::path(out_dir) / "instance" / (s.id + ".png")).string(), s.instance);
    if (i < n_train) m.splits.train.push_back(s.id);
    else if (i < n_train + n_val) m.splits.val.push_back(s.id);
    else m.splits.test.push_back(s.id);
  }
  json j{{"version", m.version},
         {"splits", {{"train", m.splits.train}, {"val", m.splits.val}, {"test", m.splits.test}}},
         {"config_hash", m.config_hash}};
  std::ofstream f(fs::path(out_dir) / "manifest.json");
  if (!f) throw std::runtime_error("generate_dataset: cannot write manifest in " + out_dir);
  f << j.dump(2) << "\n";
  return m;
}

Dataset ingest_folder(const std::string& dir) {
  Dataset ds;
  fs::path root(dir);
  if (!fs::exists(root / "manifest.json"))
    throw std::runtime_error("ingest: no manifest.json under " + dir);
  std::ifstream f(root / "manifest.json");
  json j = json::parse(f);
  ds.manifest.version = j.value("version", 1);
  ds.manifest.config_hash = j.value("config_hash", "");
  ds.manifest.splits.train = j["splits"]["train"].get<std::vector<std::string>>();
  ds.manifest.splits.val = j["splits"]["val"].get<std::vector<std::string>>();
  ds.manifest.splits.test = j["splits"]["test"].get<std::vector<std::string>>();

  auto load = [&](const std::string& id) {
    ImageSample s;
    s.id = id;
    s.image = io::read_rgb8((root / "images" / (id + ".png")).string());
    s.semantic = io::read_gray8((root / "semantic" / (id + ".png")).string());
    s.instance = io::read_gray16((root / "instance" / (id + ".png")).string());
    if (s.semantic.H != s.image.H || s.semantic.W != s.image.W || !s.semantic.same_shape(s.instance))
      throw ValidationError("ingest: shape mismatch in sample " + id);
    if (s.image.H % 16 != 0 || s.image.W % 16 != 0)
      throw ValidationError("ingest: dims not divisible by 16 in sample " + id);
    std::string off;
    if (!instances_connected(s.instance, &off))
      throw ValidationError("ingest: disconnected " + off + " in instance/" + id + ".png");
    return s;
  };
  for (const auto* split : {&ds.manifest.splits.train, &ds.manifest.splits.val,
                            &ds.manifest.splits.test})
    for (const auto& id : *split) ds.samples.push_back(load(id));
  return ds;
}

}  // namespace synth
}  // namespace coseg
