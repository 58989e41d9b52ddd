#pragma once

// Annotation manifests (COCO-style JSON), rasterization, the class/area
// filtering rules, summary statistics, and the in-memory sample corpus.
//
// Manifest schema:
//   {
//     "images":      [ {"id": int, "file": str, "height": int, "width": int} ],
//     "categories":  [ {"id": int, "name": str} ],
//     "annotations": [ {"id": int, "image_id": int, "category_id": int,
//                       "segmentation": [[x0,y0,x1,y1,...], ...]      polygons, even-odd fill
//                                     | {"size": [h,w], "counts": [..]}  uncompressed RLE,
//                                                                       column-major, starts
//                                                                       with a background run
//                       | "bbox": [x, y, w, h] } ]
//   }
// Image files are resolved relative to the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "busyshot/encoder.hpp"
#include "busyshot/image.hpp"

namespace busyshot {

enum class AnnotationKind { polygon, bbox, rle };

struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  bool operator==(const BBox&) const = default;
};

/// One or more rings of interleaved x,y vertex coordinates.
struct Polygons {
  std::vector<std::vector<double>> rings;
  bool operator==(const Polygons&) const = default;
};

struct RunLength {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
  bool operator==(const RunLength&) const = default;
};

using Geometry = std::variant<Polygons, BBox, RunLength>;

AnnotationKind kind_of(const Geometry& g);

struct ImageRecord {
  std::int64_t id = 0;
  std::string file;
  int height = 0;
  int width = 0;
  bool operator==(const ImageRecord&) const = default;
};

struct Category {
  std::int64_t id = 0;
  std::string name;
  bool operator==(const Category&) const = default;
};

struct Annotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  Geometry geometry;
  double area_fraction = -1.0;  // filled in by filter_dataset
  bool operator==(const Annotation&) const = default;
};

struct RawDataset {
  std::filesystem::path root;
  std::vector<ImageRecord> images;
  std::vector<Category> categories;
  std::vector<Annotation> annotations;
  std::vector<std::string> rejected;  // one message per dropped malformed record
};

RawDataset parse_manifest(const nlohmann::json& manifest, const std::filesystem::path& root = {});
RawDataset load_annotations(const std::filesystem::path& manifest_path);
nlohmann::json to_manifest_json(const RawDataset& dataset);
void save_manifest(const std::filesystem::path& manifest_path, const RawDataset& dataset);

/// Pixel-centre test: pixel (x, y) is inside when (x + 0.5, y + 0.5) is.
SoftMask rasterize(const Geometry& geometry, int height, int width);
RunLength encode_rle(const SoftMask& mask);

struct FilterConfig {
  int min_images_per_class = 200;     // 0 disables the class filter
  double min_area_fraction = 0.002;   // inclusive lower bound
};

/// Drops annotations below the area threshold, then classes with too few
/// distinct images, then images left without annotations. Area fractions are
/// recorded on the surviving annotations.
RawDataset filter_dataset(const RawDataset& raw, const FilterConfig& config = {});

struct DatasetStats {
  std::size_t samples = 0;  // image-annotation pairs
  std::size_t classes = 0;
  double imgs_per_class = 0.0;
  double classes_per_img = 0.0;
  double mean_area_per_sample = 0.0;
};

DatasetStats compute_stats(const RawDataset& filtered);
nlohmann::json stats_to_json(const DatasetStats& stats);

/// One image paired with one class and the union of that class's masks in the image.
struct AnnotatedSample {
  std::int64_t image_id = 0;
  std::size_t image_index = 0;  // into Corpus::images
  std::int64_t class_id = 0;
  SoftMask mask;
  AnnotationKind annotation_kind = AnnotationKind::polygon;
  double area_fraction = 0.0;
};

struct Corpus {
  std::vector<ImageRecord> images;
  std::vector<RgbImage> pixels;  // parallel to images
  std::vector<AnnotatedSample> samples;
  std::map<std::int64_t, std::string> class_names;
  InputStats stats;

  std::vector<std::int64_t> class_ids() const;
  Image image_of(const AnnotatedSample& s) const { return to_image(pixels[s.image_index]); }
};

/// Builds the sample corpus from a filtered dataset whose pixels are already in memory.
Corpus build_corpus(const RawDataset& filtered, std::vector<RgbImage> pixels);
/// Same, loading every image from disk relative to `filtered.root`.
Corpus build_corpus(const RawDataset& filtered);

InputStats compute_input_stats(const std::vector<RgbImage>& images);

}  // namespace busyshot
