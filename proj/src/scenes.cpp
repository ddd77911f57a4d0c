#include "deskdet/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace deskdet {

namespace {

constexpr std::uint64_t kSceneStream = 0x5ce11e5ULL;

struct Rgb {
  double r, g, b;
};

// Two class pairs share a color and differ only in texture.
constexpr Rgb kClassColor[5] = {
    {0.85, 0.20, 0.20},  // 0: solid red
    {0.20, 0.80, 0.25},  // 1: green, horizontal stripes
    {0.20, 0.80, 0.25},  // 2: green, vertical stripes
    {0.25, 0.40, 0.90},  // 3: blue, checker
    {0.25, 0.40, 0.90},  // 4: blue, dots
};

// Texture mask in box-local integer coordinates; 1 = full color, 0 = dimmed.
bool texture_on(int class_id, int lx, int ly) {
  switch (class_id) {
    case 0: return true;
    case 1: return (ly / 2) % 2 == 0;          // horizontal stripes, 4 px period
    case 2: return (lx / 2) % 2 == 0;          // vertical stripes
    case 3: return ((lx / 3) + (ly / 3)) % 2 == 0;  // checker, 3 px cells
    case 4: {                                   // dots on a 5 px lattice
      const int mx = lx % 5, my = ly % 5;
      return (mx >= 1 && mx <= 3) && (my >= 1 && my <= 3);
    }
    default: return true;
  }
}

void render_object(Array& img, const Annotation& ann, double brightness, Rng& rng) {
  const int size = img.dim(0);
  const Rgb base = kClassColor[static_cast<std::size_t>(ann.class_id % 5)];
  const int x_lo = std::max(0, static_cast<int>(std::floor(ann.box.x1)));
  const int x_hi = std::min(size - 1, static_cast<int>(std::ceil(ann.box.x2)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(ann.box.y1)));
  const int y_hi = std::min(size - 1, static_cast<int>(std::ceil(ann.box.y2)));
  for (int py = y_lo; py <= y_hi; ++py) {
    for (int px = x_lo; px <= x_hi; ++px) {
      const double cx = px + 0.5, cy = py + 0.5;
      if (cx < ann.box.x1 || cx >= ann.box.x2 || cy < ann.box.y1 || cy >= ann.box.y2) continue;
      const int lx = px - x_lo, ly = py - y_lo;
      const double tex = texture_on(ann.class_id, lx, ly) ? 1.0 : 0.35;
      const double f = brightness * tex;
      double* pix = &img.data[static_cast<std::size_t>((py * size + px) * 3)];
      pix[0] = base.r * f + rng.normal(0.0, 0.02);
      pix[1] = base.g * f + rng.normal(0.0, 0.02);
      pix[2] = base.b * f + rng.normal(0.0, 0.02);
    }
  }
}

void clamp_image(Array& img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Scene generate_scene(int id, std::uint64_t seed, Split split, const SceneConfig& cfg) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(id), kSceneStream));
  const int size = cfg.image_size;

  Scene scene;
  scene.id = id;
  scene.split = split;
  scene.image = Array::zeros({size, size, 3});

  const double phase_x = rng.uniform(0.0, 6.28318530717958648);
  const double phase_y = rng.uniform(0.0, 6.28318530717958648);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double wave = 0.06 * std::sin(2.0 * 3.14159265358979324 * x / 17.0 + phase_x) *
                          std::sin(2.0 * 3.14159265358979324 * y / 13.0 + phase_y);
      double* pix = &scene.image.data[static_cast<std::size_t>((y * size + x) * 3)];
      for (int c = 0; c < 3; ++c) pix[c] = 0.22 + wave + rng.uniform(-0.03, 0.03);
    }
  }

  const int count = rng.uniform_int(0, cfg.max_objects);
  for (int k = 0; k < count; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      const double w = rng.uniform(cfg.min_side, cfg.max_side);
      const double h = rng.uniform(cfg.min_side, cfg.max_side);
      const double x1 = rng.uniform(0.0, size - w);
      const double y1 = rng.uniform(0.0, size - h);
      Box box{x1, y1, x1 + w, y1 + h};
      if (box.area() < cfg.min_area) continue;
      bool ok = true;
      for (const auto& other : scene.annotations) {
        if (iou(box, other.box) > cfg.max_overlap_iou) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      Annotation ann;
      ann.class_id = rng.uniform_int(0, cfg.num_classes - 1);
      ann.box = box;
      const double brightness = rng.uniform(0.75, 1.15);
      render_object(scene.image, ann, brightness, rng);
      scene.annotations.push_back(ann);
      placed = true;
    }
  }
  clamp_image(scene.image);
  return scene;
}

std::vector<Scene> generate_dataset(int num_scenes, double labeled_fraction,
                                    std::uint64_t seed, const SceneConfig& cfg) {
  if (num_scenes <= 0) throw std::invalid_argument("generate_dataset: num_scenes must be > 0");
  if (labeled_fraction <= 0.0 || labeled_fraction > 1.0) {
    throw std::invalid_argument("generate_dataset: labeled_fraction must be in (0,1]");
  }
  const int n_labeled = static_cast<int>(std::lround(num_scenes * labeled_fraction));
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(num_scenes));
  for (int id = 0; id < num_scenes; ++id) {
    const Split split = id < n_labeled ? Split::kLabeled : Split::kUnlabeled;
    out.push_back(generate_scene(id, seed, split, cfg));
  }
  return out;
}

Box map_box(const Box& b, const TransformRecord& t) {
  if (!t.hflip) return b;
  return Box{t.image_width - b.x2, b.y1, t.image_width - b.x1, b.y2};
}

Box unmap_box(const Box& b, const TransformRecord& t) {
  return map_box(b, t);  // horizontal flip is an involution
}

namespace {

void hflip_image(Array& img) {
  const int size = img.dim(0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size / 2; ++x) {
      for (int c = 0; c < 3; ++c) {
        std::swap(img.data[static_cast<std::size_t>((y * size + x) * 3 + c)],
                  img.data[static_cast<std::size_t>((y * size + size - 1 - x) * 3 + c)]);
      }
    }
  }
}

void gaussian_blur3(Array& img, double sigma) {
  const int size = img.dim(0);
  double k[3];
  const double s2 = 2.0 * sigma * sigma;
  k[0] = std::exp(-1.0 / s2);
  k[1] = 1.0;
  k[2] = k[0];
  double kern[9];
  double norm = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      kern[i * 3 + j] = k[i] * k[j];
      norm += kern[i * 3 + j];
    }
  for (double& v : kern) v /= norm;

  Array src = img;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int yy = std::clamp(y + dy, 0, size - 1);
          for (int dx = -1; dx <= 1; ++dx) {
            const int xx = std::clamp(x + dx, 0, size - 1);
            acc += kern[(dy + 1) * 3 + (dx + 1)] *
                   src.data[static_cast<std::size_t>((yy * size + xx) * 3 + c)];
          }
        }
        img.data[static_cast<std::size_t>((y * size + x) * 3 + c)] = acc;
      }
    }
  }
}

}  // namespace

AugmentedView apply_augmentation(const Scene& scene, const AugmentationSpec& spec) {
  Rng rng(spec.seed);
  const int size = scene.image.dim(0);

  AugmentedView view;
  view.image = scene.image;
  view.transform.image_width = size;
  view.transform.hflip = rng.bernoulli(spec.flip_prob);
  if (view.transform.hflip) hflip_image(view.image);

  if (spec.kind == AugKind::kStrong) {
    if (rng.bernoulli(spec.channel_jitter_prob)) {
      double f[3];
      for (double& v : f) v = rng.uniform(spec.channel_jitter_lo, spec.channel_jitter_hi);
      for (std::size_t i = 0; i < view.image.data.size(); i += 3) {
        for (int c = 0; c < 3; ++c)
          view.image.data[i + static_cast<std::size_t>(c)] =
              std::clamp(view.image.data[i + static_cast<std::size_t>(c)] * f[c], 0.0, 1.0);
      }
    }
    if (rng.bernoulli(spec.grayscale_prob)) {
      for (std::size_t i = 0; i < view.image.data.size(); i += 3) {
        const double m =
            (view.image.data[i] + view.image.data[i + 1] + view.image.data[i + 2]) / 3.0;
        view.image.data[i] = view.image.data[i + 1] = view.image.data[i + 2] = m;
      }
    }
    if (rng.bernoulli(spec.blur_prob)) {
      gaussian_blur3(view.image, rng.uniform(spec.blur_sigma_lo, spec.blur_sigma_hi));
    }
    for (int stage = 0; stage < 3; ++stage) {
      if (!rng.bernoulli(spec.cutout_probs[stage])) continue;
      const double area =
          rng.uniform(spec.cutout_scale_lo[stage], spec.cutout_scale_hi[stage]) * size * size;
      const double ratio = rng.uniform(spec.cutout_ratio_lo[stage], spec.cutout_ratio_hi[stage]);
      int cw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * ratio))), 1, size);
      int ch = std::clamp(static_cast<int>(std::lround(std::sqrt(area / ratio))), 1, size);
      const int x0 = rng.uniform_int(0, size - cw);
      const int y0 = rng.uniform_int(0, size - ch);
      for (int y = y0; y < y0 + ch; ++y)
        for (int x = x0; x < x0 + cw; ++x)
          for (int c = 0; c < 3; ++c)
            view.image.data[static_cast<std::size_t>((y * size + x) * 3 + c)] = rng.uniform();
    }
  }

  view.boxes.reserve(scene.annotations.size());
  for (const auto& ann : scene.annotations) view.boxes.push_back(map_box(ann.box, view.transform));
  return view;
}

// ---------------------------------------------------------------------------
// manifest + dumps
// ---------------------------------------------------------------------------

namespace {
const char* split_name(Split s) { return s == Split::kLabeled ? "labeled" : "unlabeled"; }
}  // namespace

void write_manifest(const std::string& path, const std::vector<Scene>& scenes,
                    const DatasetMeta& meta) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  nlohmann::json header{{"type", "deskdet-manifest"},
                        {"version", 1},
                        {"num_scenes", meta.num_scenes},
                        {"labeled_fraction", meta.labeled_fraction},
                        {"seed", meta.seed},
                        {"image_size", meta.scene.image_size},
                        {"num_classes", meta.scene.num_classes},
                        {"max_objects", meta.scene.max_objects}};
  out << header.dump() << "\n";
  for (const auto& s : scenes) {
    nlohmann::json rec{{"id", s.id}, {"split", split_name(s.split)}};
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& a : s.annotations) {
      anns.push_back({{"class", a.class_id}, {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}}});
    }
    rec["annotations"] = anns;
    out << rec.dump() << "\n";
  }
}

std::pair<DatasetMeta, std::vector<ManifestEntry>> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_manifest: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("type", "") != "deskdet-manifest") {
    throw std::runtime_error("read_manifest: not a manifest file");
  }
  DatasetMeta meta;
  meta.num_scenes = header.at("num_scenes").get<int>();
  meta.labeled_fraction = header.at("labeled_fraction").get<double>();
  meta.seed = header.at("seed").get<std::uint64_t>();
  meta.scene.image_size = header.at("image_size").get<int>();
  meta.scene.num_classes = header.at("num_classes").get<int>();
  meta.scene.max_objects = header.at("max_objects").get<int>();

  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    ManifestEntry e;
    e.id = rec.at("id").get<int>();
    e.split = rec.at("split").get<std::string>() == "labeled" ? Split::kLabeled : Split::kUnlabeled;
    for (const auto& a : rec.at("annotations")) {
      Annotation ann;
      ann.class_id = a.at("class").get<int>();
      const auto& b = a.at("box");
      ann.box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      e.annotations.push_back(ann);
    }
    entries.push_back(std::move(e));
  }
  return {meta, entries};
}

void write_ppm(const std::string& path, const Array& image) {
  if (image.ndim() != 3 || image.dim(2) != 3) {
    throw std::invalid_argument("write_ppm: expects HxWx3");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (double v : image.data) {
    const int q = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
    out.put(static_cast<char>(q));
  }
}

}  // namespace deskdet
