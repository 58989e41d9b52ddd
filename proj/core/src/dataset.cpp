#include "busyshot/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace busyshot {

using nlohmann::json;

AnnotationKind kind_of(const Geometry& g) {
  if (std::holds_alternative<Polygons>(g)) return AnnotationKind::polygon;
  if (std::holds_alternative<BBox>(g)) return AnnotationKind::bbox;
  return AnnotationKind::rle;
}

namespace {

// Returns an error message for unusable geometry, empty when valid.
std::string parse_geometry(const json& ann, const ImageRecord* image, Geometry& out) {
  if (ann.contains("segmentation") && !ann.at("segmentation").is_null()) {
    const json& seg = ann.at("segmentation");
    if (seg.is_array()) {
      Polygons poly;
      for (const json& ring : seg) {
        if (!ring.is_array()) return "polygon ring is not an array";
        std::vector<double> coords;
        for (const json& v : ring) {
          if (!v.is_number()) return "polygon coordinate is not a number";
          coords.push_back(v.get<double>());
        }
        if (coords.size() % 2 != 0) return "polygon has an odd number of coordinates";
        if (coords.size() < 6) return "polygon has fewer than 3 vertices";
        poly.rings.push_back(std::move(coords));
      }
      if (poly.rings.empty()) return "segmentation has no polygons";
      out = std::move(poly);
      return {};
    }
    if (seg.is_object()) {
      if (!seg.contains("size") || !seg.contains("counts") || !seg.at("counts").is_array()) {
        return "RLE segmentation needs size and uncompressed counts";
      }
      RunLength rle;
      const auto size = seg.at("size").get<std::vector<int>>();
      if (size.size() != 2) return "RLE size must be [height, width]";
      rle.height = size[0];
      rle.width = size[1];
      std::uint64_t total = 0;
      for (const json& c : seg.at("counts")) {
        if (!c.is_number_unsigned() && !(c.is_number_integer() && c.get<std::int64_t>() >= 0)) {
          return "RLE count is not a non-negative integer";
        }
        rle.counts.push_back(c.get<std::uint32_t>());
        total += rle.counts.back();
      }
      if (total != static_cast<std::uint64_t>(rle.height) * rle.width) {
        return "RLE counts do not cover the mask";
      }
      if (image && (image->height != rle.height || image->width != rle.width)) {
        return "RLE size differs from image size";
      }
      out = std::move(rle);
      return {};
    }
    return "unsupported segmentation encoding";
  }
  if (ann.contains("bbox")) {
    const json& b = ann.at("bbox");
    if (!b.is_array() || b.size() != 4) return "bbox must have 4 numbers";
    for (const json& v : b) {
      if (!v.is_number()) return "bbox entry is not a number";
    }
    BBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    if (!(box.w > 0.0) || !(box.h > 0.0)) return "bbox has no area";
    out = box;
    return {};
  }
  return "annotation has neither segmentation nor bbox";
}

void fill_spans(SoftMask& mask, int y, std::vector<double>& xs) {
  std::sort(xs.begin(), xs.end());
  for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
    const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
    const int x1 = std::min(mask.width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
    for (int x = x0; x < x1; ++x) mask.at(y, x) = 1.0f;
  }
}

}  // namespace

RawDataset parse_manifest(const json& manifest, const std::filesystem::path& root) {
  RawDataset ds;
  ds.root = root;
  try {
    for (const json& im : manifest.at("images")) {
      ds.images.push_back({im.at("id").get<std::int64_t>(), im.value("file", std::string{}),
                           im.at("height").get<int>(), im.at("width").get<int>()});
    }
    for (const json& c : manifest.at("categories")) {
      ds.categories.push_back({c.at("id").get<std::int64_t>(), c.value("name", std::string{})});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
  std::unordered_map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : ds.images) {
    if (!images.emplace(im.id, &im).second) {
      throw DataError("duplicate image id " + std::to_string(im.id));
    }
  }
  std::unordered_set<std::int64_t> categories;
  for (const auto& c : ds.categories) categories.insert(c.id);

  std::vector<std::string> dangling;
  const json empty = json::array();
  for (const json& a : manifest.contains("annotations") ? manifest.at("annotations") : empty) {
    Annotation ann;
    try {
      ann.id = a.at("id").get<std::int64_t>();
      ann.image_id = a.at("image_id").get<std::int64_t>();
      ann.category_id = a.at("category_id").get<std::int64_t>();
    } catch (const json::exception& e) {
      throw DataError(std::string("annotation missing id fields: ") + e.what());
    }
    const auto img = images.find(ann.image_id);
    if (img == images.end()) {
      dangling.push_back("annotation " + std::to_string(ann.id) + " -> missing image " +
                         std::to_string(ann.image_id));
      continue;
    }
    if (!categories.contains(ann.category_id)) {
      dangling.push_back("annotation " + std::to_string(ann.id) + " -> missing category " +
                         std::to_string(ann.category_id));
      continue;
    }
    const std::string problem = parse_geometry(a, img->second, ann.geometry);
    if (!problem.empty()) {
      const std::string msg = "annotation " + std::to_string(ann.id) + ": " + problem;
      spdlog::warn("rejected {}", msg);
      ds.rejected.push_back(msg);
      continue;
    }
    ds.annotations.push_back(std::move(ann));
  }
  if (!dangling.empty()) {
    std::string msg = "dangling references in manifest:";
    for (const auto& d : dangling) msg += "\n  " + d;
    throw DataError(msg);
  }
  return ds;
}

RawDataset load_annotations(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  return parse_manifest(manifest, manifest_path.parent_path());
}

json to_manifest_json(const RawDataset& dataset) {
  json out;
  out["images"] = json::array();
  for (const auto& im : dataset.images) {
    out["images"].push_back(
        {{"id", im.id}, {"file", im.file}, {"height", im.height}, {"width", im.width}});
  }
  out["categories"] = json::array();
  for (const auto& c : dataset.categories) out["categories"].push_back({{"id", c.id}, {"name", c.name}});
  out["annotations"] = json::array();
  for (const auto& a : dataset.annotations) {
    json j{{"id", a.id}, {"image_id", a.image_id}, {"category_id", a.category_id}};
    if (const auto* p = std::get_if<Polygons>(&a.geometry)) {
      j["segmentation"] = p->rings;
    } else if (const auto* b = std::get_if<BBox>(&a.geometry)) {
      j["bbox"] = {b->x, b->y, b->w, b->h};
    } else {
      const auto& r = std::get<RunLength>(a.geometry);
      j["segmentation"] = {{"size", {r.height, r.width}}, {"counts", r.counts}};
    }
    out["annotations"].push_back(std::move(j));
  }
  return out;
}

void save_manifest(const std::filesystem::path& manifest_path, const RawDataset& dataset) {
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  std::ofstream out(manifest_path);
  if (!out) throw DataError("cannot write manifest " + manifest_path.string());
  out << to_manifest_json(dataset).dump() << '\n';
}

SoftMask rasterize(const Geometry& geometry, int height, int width) {
  SoftMask mask(height, width);
  if (const auto* b = std::get_if<BBox>(&geometry)) {
    const int x0 = std::max(0, static_cast<int>(std::ceil(b->x - 0.5)));
    const int x1 = std::min(width, static_cast<int>(std::ceil(b->x + b->w - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(b->y - 0.5)));
    const int y1 = std::min(height, static_cast<int>(std::ceil(b->y + b->h - 0.5)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) mask.at(y, x) = 1.0f;
    }
    return mask;
  }
  if (const auto* r = std::get_if<RunLength>(&geometry)) {
    if (r->height != height || r->width != width) throw ShapeError("RLE size differs from image");
    std::size_t pos = 0;
    bool fg = false;
    for (std::uint32_t run : r->counts) {
      for (std::uint32_t i = 0; i < run; ++i, ++pos) {
        if (fg) mask.at(static_cast<int>(pos % height), static_cast<int>(pos / height)) = 1.0f;
      }
      fg = !fg;
    }
    return mask;
  }
  const auto& poly = std::get<Polygons>(geometry);
  std::vector<double> xs;
  for (const auto& ring : poly.rings) {
    const std::size_t nv = ring.size() / 2;
    SoftMask ring_mask(height, width);
    for (int y = 0; y < height; ++y) {
      const double py = y + 0.5;
      xs.clear();
      for (std::size_t i = 0; i < nv; ++i) {
        const std::size_t j = (i + 1) % nv;
        const double xa = ring[2 * i];
        const double ya = ring[2 * i + 1];
        const double xb = ring[2 * j];
        const double yb = ring[2 * j + 1];
        if ((ya > py) != (yb > py)) xs.push_back(xa + (py - ya) * (xb - xa) / (yb - ya));
      }
      fill_spans(ring_mask, y, xs);
    }
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
      mask.values[i] = std::max(mask.values[i], ring_mask.values[i]);
    }
  }
  return mask;
}

RunLength encode_rle(const SoftMask& mask) {
  RunLength r;
  r.height = mask.height;
  r.width = mask.width;
  bool fg = false;
  std::uint32_t run = 0;
  for (int x = 0; x < mask.width; ++x) {
    for (int y = 0; y < mask.height; ++y) {
      const bool v = mask.at(y, x) >= 0.5f;
      if (v != fg) {
        r.counts.push_back(run);
        run = 0;
        fg = v;
      }
      ++run;
    }
  }
  r.counts.push_back(run);
  return r;
}

RawDataset filter_dataset(const RawDataset& raw, const FilterConfig& config) {
  std::unordered_map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : raw.images) images.emplace(im.id, &im);

  std::vector<Annotation> kept;
  for (const auto& a : raw.annotations) {
    const ImageRecord& im = *images.at(a.image_id);
    const SoftMask m = rasterize(a.geometry, im.height, im.width);
    Annotation copy = a;
    copy.area_fraction = m.mass() / (static_cast<double>(im.height) * im.width);
    // inclusive bound; the epsilon absorbs rounding of the decimal threshold
    if (copy.area_fraction + 1e-12 >= config.min_area_fraction) kept.push_back(std::move(copy));
  }

  std::map<std::int64_t, std::set<std::int64_t>> images_per_class;
  for (const auto& a : kept) images_per_class[a.category_id].insert(a.image_id);
  std::set<std::int64_t> classes;
  for (const auto& [cls, imgs] : images_per_class) {
    if (config.min_images_per_class <= 0 ||
        imgs.size() >= static_cast<std::size_t>(config.min_images_per_class)) {
      classes.insert(cls);
    } else {
      spdlog::info("dropping class {} with {} images", cls, imgs.size());
    }
  }

  RawDataset out;
  out.root = raw.root;
  out.rejected = raw.rejected;
  std::set<std::int64_t> used_images;
  for (auto& a : kept) {
    if (!classes.contains(a.category_id)) continue;
    used_images.insert(a.image_id);
    out.annotations.push_back(std::move(a));
  }
  for (const auto& c : raw.categories) {
    if (classes.contains(c.id)) out.categories.push_back(c);
  }
  for (const auto& im : raw.images) {
    if (used_images.contains(im.id)) out.images.push_back(im);
  }
  return out;
}

DatasetStats compute_stats(const RawDataset& filtered) {
  if (filtered.annotations.empty()) throw DataError("cannot compute statistics of an empty dataset");
  std::unordered_map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : filtered.images) images.emplace(im.id, &im);
  std::map<std::int64_t, std::set<std::int64_t>> imgs_of_class;
  std::map<std::int64_t, std::set<std::int64_t>> classes_of_img;
  double area = 0.0;
  for (const auto& a : filtered.annotations) {
    imgs_of_class[a.category_id].insert(a.image_id);
    classes_of_img[a.image_id].insert(a.category_id);
    double af = a.area_fraction;
    if (af < 0.0) {
      const ImageRecord& im = *images.at(a.image_id);
      af = rasterize(a.geometry, im.height, im.width).mass() / (static_cast<double>(im.height) * im.width);
    }
    area += af;
  }
  DatasetStats s;
  s.samples = filtered.annotations.size();
  s.classes = imgs_of_class.size();
  double ipc = 0.0;
  for (const auto& [c, imgs] : imgs_of_class) ipc += static_cast<double>(imgs.size());
  s.imgs_per_class = ipc / static_cast<double>(imgs_of_class.size());
  double cpi = 0.0;
  for (const auto& [i, cls] : classes_of_img) cpi += static_cast<double>(cls.size());
  s.classes_per_img = cpi / static_cast<double>(classes_of_img.size());
  s.mean_area_per_sample = area / static_cast<double>(s.samples);
  return s;
}

json stats_to_json(const DatasetStats& stats) {
  return {{"samples", stats.samples},
          {"classes", stats.classes},
          {"imgs_per_class", stats.imgs_per_class},
          {"classes_per_img", stats.classes_per_img},
          {"mean_area_per_sample", stats.mean_area_per_sample}};
}

std::vector<std::int64_t> Corpus::class_ids() const {
  std::set<std::int64_t> ids;
  for (const auto& s : samples) ids.insert(s.class_id);
  return {ids.begin(), ids.end()};
}

InputStats compute_input_stats(const std::vector<RgbImage>& images) {
  InputStats st;
  std::array<double, 3> sum{};
  std::array<double, 3> sq{};
  double count = 0.0;
  for (const auto& im : images) {
    for (std::size_t i = 0; i < im.pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) {
        const double v = im.pixels[i + c] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(im.pixels.size() / 3);
  }
  if (count == 0.0) return st;
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    st.mean[c] = static_cast<float>(mean);
    st.stddev[c] = static_cast<float>(std::max(1e-3, std::sqrt(std::max(0.0, sq[c] / count - mean * mean))));
  }
  return st;
}

Corpus build_corpus(const RawDataset& filtered, std::vector<RgbImage> pixels) {
  if (pixels.size() != filtered.images.size()) {
    throw DataError("pixel buffers do not match the image list");
  }
  Corpus corpus;
  corpus.images = filtered.images;
  corpus.pixels = std::move(pixels);
  std::unordered_map<std::int64_t, std::size_t> image_index;
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    const auto& rec = corpus.images[i];
    if (corpus.pixels[i].height != rec.height || corpus.pixels[i].width != rec.width) {
      throw DataError("image " + std::to_string(rec.id) + " has unexpected dimensions");
    }
    image_index.emplace(rec.id, i);
  }
  for (const auto& c : filtered.categories) corpus.class_names[c.id] = c.name;

  std::map<std::pair<std::size_t, std::int64_t>, std::size_t> sample_of;
  for (const auto& a : filtered.annotations) {
    const std::size_t idx = image_index.at(a.image_id);
    const auto& rec = corpus.images[idx];
    const SoftMask m = rasterize(a.geometry, rec.height, rec.width);
    const auto key = std::make_pair(idx, a.category_id);
    auto it = sample_of.find(key);
    if (it == sample_of.end()) {
      AnnotatedSample s;
      s.image_id = rec.id;
      s.image_index = idx;
      s.class_id = a.category_id;
      s.mask = m;
      s.annotation_kind = kind_of(a.geometry);
      sample_of.emplace(key, corpus.samples.size());
      corpus.samples.push_back(std::move(s));
    } else {
      SoftMask& u = corpus.samples[it->second].mask;
      for (std::size_t i = 0; i < u.values.size(); ++i) u.values[i] = std::max(u.values[i], m.values[i]);
    }
  }
  for (auto& s : corpus.samples) {
    s.area_fraction = s.mask.mass() / (static_cast<double>(s.mask.height) * s.mask.width);
  }
  corpus.stats = compute_input_stats(corpus.pixels);
  return corpus;
}

Corpus build_corpus(const RawDataset& filtered) {
  std::vector<RgbImage> pixels;
  pixels.reserve(filtered.images.size());
  for (const auto& im : filtered.images) pixels.push_back(read_png(filtered.root / im.file));
  return build_corpus(filtered, std::move(pixels));
}

}  // namespace busyshot
