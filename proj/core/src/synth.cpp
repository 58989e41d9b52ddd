#include "busyshot/synth.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "busyshot/errors.hpp"
#include "busyshot/rng.hpp"

namespace busyshot {

namespace {

constexpr std::array<const char*, kSynthShapes> kShapeNames{"disk",  "square", "triangle", "ring",
                                                            "cross", "diamond", "bar",     "frame"};
constexpr std::array<const char*, kSynthColours> kColourNames{
    "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "black"};
constexpr std::array<std::array<int, 3>, kSynthColours> kColours{{{205, 40, 40},
                                                                   {40, 170, 60},
                                                                   {50, 70, 215},
                                                                   {225, 210, 50},
                                                                   {200, 60, 200},
                                                                   {60, 205, 215},
                                                                   {240, 140, 30},
                                                                   {25, 25, 25}}};

// Unit-scale shape membership in local coordinates.
bool inside(int shape, double u, double v) {
  const double au = std::abs(u);
  const double av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v <= 0.6 && v >= -1.0 && au <= (v + 1.0) * 0.62;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 4: return (au <= 0.32 && av <= 1.0) || (av <= 0.32 && au <= 1.0);
    case 5: return au + av <= 1.1;
    case 6: return au <= 1.2 && av <= 0.4;
    default: {
      const double m = std::max(au, av);
      return m <= 0.85 && m >= 0.5;
    }
  }
}

struct Placement {
  double cx, cy, scale, angle;
};

// Pixels covered by the shape, as a 0/1 mask over the canvas.
std::vector<std::uint8_t> render(int shape, const Placement& p, int h, int w, int& count) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  const double c = std::cos(p.angle);
  const double s = std::sin(p.angle);
  const double reach = 1.3 * p.scale + 1.0;
  const int y0 = std::max(0, static_cast<int>(std::floor(p.cy - reach)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(p.cy + reach)));
  const int x0 = std::max(0, static_cast<int>(std::floor(p.cx - reach)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(p.cx + reach)));
  count = 0;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - p.cx;
      const double dy = y + 0.5 - p.cy;
      const double u = (c * dx + s * dy) / p.scale;
      const double v = (-s * dx + c * dy) / p.scale;
      if (inside(shape, u, v)) {
        out[static_cast<std::size_t>(y) * w + x] = 1;
        ++count;
      }
    }
  }
  return out;
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

void paint_background(RgbImage& img, KeyedRng& rng) {
  const double base = rng.uniform(95.0, 165.0);
  const double fx = rng.uniform(0.05, 0.3);
  const double fy = rng.uniform(0.05, 0.3);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double amp = rng.uniform(6.0, 18.0);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double g = base + amp * std::sin(fx * x + phase) * std::cos(fy * y) + rng.uniform(-10.0, 10.0);
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = clamp_byte(g + rng.uniform(-4.0, 4.0));
    }
  }
}

bool try_scene(const SceneSpec& spec, std::uint64_t seed, std::uint64_t attempt, const std::vector<int>& pool,
               SyntheticScene& scene) {
  // the object count and classes stay fixed across regenerations so retries do not bias them
  KeyedRng content(seed, {~0ULL});
  const int h = spec.height;
  const int w = spec.width;
  const double canvas = static_cast<double>(h) * w;
  const int drawn = spec.min_objects + static_cast<int>(content.below(
                                           static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
  const int n_objects = std::min(drawn, static_cast<int>(pool.size()));
  std::vector<int> classes = pool;
  keyed_shuffle(classes.begin(), classes.end(), content);
  classes.resize(static_cast<std::size_t>(n_objects));
  KeyedRng rng(seed, {attempt});

  std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
  std::vector<int> full_area;
  std::vector<int> visible;
  for (int i = 0; i < n_objects; ++i) {
    const int shape = classes[i] / kSynthColours;
    const double target = rng.uniform(spec.min_area, spec.max_area) * canvas;
    bool placed = false;
    for (int t = 0; t < spec.placement_retries && !placed; ++t) {
      Placement p{0.0, 0.0, 1.0, rng.uniform(-1.0, 1.0) * spec.max_rotation_deg * 3.141592653589793 / 180.0};
      int count = 0;
      std::vector<std::uint8_t> m;
      // measure at a reference scale, rescale to the target area, then re-measure
      p.scale = 10.0;
      p.cx = w / 2.0;
      p.cy = h / 2.0;
      render(shape, p, h, w, count);
      p.scale *= std::sqrt(target / std::max(1, count));
      const double half = 1.25 * p.scale;
      if (2.0 * half >= std::min(h, w)) break;
      p.cx = rng.uniform(half, w - half);
      p.cy = rng.uniform(half, h - half);
      m = render(shape, p, h, w, count);
      if (count == 0) continue;
      // every earlier object must keep enough visible pixels
      std::vector<int> lost(static_cast<std::size_t>(i), 0);
      for (std::size_t k = 0; k < m.size(); ++k) {
        if (m[k] && owner[k] >= 0) ++lost[owner[k]];
      }
      bool ok = true;
      for (int j = 0; j < i && ok; ++j) ok = visible[j] - lost[j] >= spec.min_visible * full_area[j];
      if (!ok) continue;
      for (int j = 0; j < i; ++j) visible[j] -= lost[j];
      for (std::size_t k = 0; k < m.size(); ++k) {
        if (m[k]) owner[k] = i;
      }
      full_area.push_back(count);
      visible.push_back(count);
      placed = true;
    }
    if (!placed) return false;
  }

  scene.image = RgbImage(h, w);
  paint_background(scene.image, rng);
  scene.objects.clear();
  for (int i = 0; i < n_objects; ++i) {
    const auto& col = kColours[classes[i] % kSynthColours];
    AnnotatedSample s;
    s.class_id = classes[i];
    s.annotation_kind = AnnotationKind::rle;
    s.mask = SoftMask(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (owner[static_cast<std::size_t>(y) * w + x] != i) continue;
        s.mask.at(y, x) = 1.0f;
        for (int ch = 0; ch < 3; ++ch) scene.image.at(y, x, ch) = clamp_byte(col[ch] + rng.uniform(-14.0, 14.0));
      }
    }
    s.area_fraction = s.mask.mass() / canvas;
    scene.objects.push_back(std::move(s));
  }
  return true;
}

}  // namespace

std::string synthetic_class_name(std::int64_t class_id) {
  if (class_id < 0 || class_id >= kSynthShapes * kSynthColours) {
    throw std::out_of_range("synthetic class id out of range");
  }
  return std::string(kColourNames[class_id % kSynthColours]) + "_" + kShapeNames[class_id / kSynthColours];
}

void validate(const SceneSpec& spec) {
  if (spec.height < 16 || spec.width < 16) throw ConfigError("synthetic canvas must be at least 16x16");
  if (spec.num_classes < 1 || spec.num_classes > kSynthShapes * kSynthColours) {
    throw ConfigError("synthetic class count must be in [1, 64]");
  }
  if (spec.min_objects < 1 || spec.max_objects < spec.min_objects) {
    throw ConfigError("invalid objects-per-scene range");
  }
  if (spec.max_objects > spec.num_classes) {
    throw ConfigError("objects per scene exceed the class vocabulary");
  }
  if (!(spec.min_area > 0.0) || spec.max_area < spec.min_area || spec.max_area > 0.5) {
    throw ConfigError("invalid object area range");
  }
  if (spec.min_visible < 0.0 || spec.min_visible > 1.0) throw ConfigError("min_visible must lie in [0,1]");
}

SyntheticScene generate_synthetic_scene(const SceneSpec& spec, std::uint64_t seed) {
  std::vector<int> all(static_cast<std::size_t>(spec.num_classes));
  std::iota(all.begin(), all.end(), 0);
  return generate_synthetic_scene(spec, seed, all);
}

SyntheticScene generate_synthetic_scene(const SceneSpec& spec, std::uint64_t seed, const std::vector<int>& class_pool) {
  validate(spec);
  if (class_pool.empty()) throw ConfigError("empty class pool");
  for (int c : class_pool) {
    if (c < 0 || c >= spec.num_classes) throw ConfigError("class " + std::to_string(c) + " outside the vocabulary");
  }
  SyntheticScene scene;
  for (int attempt = 0; attempt < spec.max_regenerations; ++attempt) {
    if (try_scene(spec, seed, static_cast<std::uint64_t>(attempt), class_pool, scene)) return scene;
  }
  throw ConfigError("could not place synthetic objects after " + std::to_string(spec.max_regenerations) +
                    " regenerations; reduce object count or area");
}

SyntheticCorpus generate_synthetic_corpus(const SceneSpec& spec, int scenes_per_class, std::uint64_t seed,
                                          const std::vector<std::vector<int>>& class_groups) {
  validate(spec);
  if (scenes_per_class < 1) throw ConfigError("scenes_per_class must be positive");
  std::vector<std::vector<int>> groups = class_groups;
  if (groups.empty()) {
    groups.emplace_back(static_cast<std::size_t>(spec.num_classes));
    std::iota(groups.front().begin(), groups.front().end(), 0);
  }
  SyntheticCorpus out;
  for (int c = 0; c < spec.num_classes; ++c) out.dataset.categories.push_back({c, synthetic_class_name(c)});
  std::int64_t ann_id = 1;
  std::size_t scene_index = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& pool = groups[g];
    const int cap = static_cast<int>(pool.size());
    double mean_objects = 0.0;
    for (int n = spec.min_objects; n <= spec.max_objects; ++n) mean_objects += std::min(n, cap);
    mean_objects /= spec.max_objects - spec.min_objects + 1;
    const auto n_scenes = static_cast<std::size_t>(
        std::ceil(static_cast<double>(pool.size()) * scenes_per_class / mean_objects));
    for (std::size_t i = 0; i < n_scenes; ++i, ++scene_index) {
      const std::uint64_t scene_seed = splitmix64(seed ^ splitmix64(splitmix64(g) + i));
      SyntheticScene scene = generate_synthetic_scene(spec, scene_seed, pool);
      const auto image_id = static_cast<std::int64_t>(scene_index + 1);
      char name[32];
      std::snprintf(name, sizeof name, "images/%06zu.png", scene_index + 1);
      out.dataset.images.push_back({image_id, name, spec.height, spec.width});
      for (auto& obj : scene.objects) {
        Annotation a;
        a.id = ann_id++;
        a.image_id = image_id;
        a.category_id = obj.class_id;
        a.geometry = encode_rle(obj.mask);
        out.dataset.annotations.push_back(std::move(a));
      }
      out.pixels.push_back(std::move(scene.image));
    }
  }
  spdlog::debug("generated {} synthetic scenes", scene_index);
  return out;
}

void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < corpus.pixels.size(); ++i) {
    write_png(dir / corpus.dataset.images[i].file, corpus.pixels[i]);
  }
  save_manifest(dir / "manifest.json", corpus.dataset);
}

}  // namespace busyshot
