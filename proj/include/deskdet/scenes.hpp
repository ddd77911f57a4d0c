#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deskdet/array.hpp"
#include "deskdet/geometry.hpp"
#include "deskdet/rng.hpp"

namespace deskdet {

enum class Split { kLabeled, kUnlabeled };

struct Annotation {
  int class_id = 0;
  Box box;
};

/// One synthetic image plus its ground truth. Pixels are HxWx3 in [0,1].
/// Scenes are pure functions of (dataset seed, id), so images never need to
/// be stored: the manifest plus the seed regenerates them exactly.
struct Scene {
  Array image;
  std::vector<Annotation> annotations;
  int id = 0;
  Split split = Split::kUnlabeled;
};

struct SceneConfig {
  int image_size = 64;
  int num_classes = 5;
  int max_objects = 6;
  double min_side = 8.0;
  double max_side = 28.0;
  double max_overlap_iou = 0.3;  // pairwise occlusion cap between objects
  double min_area = 16.0;
};

/// Classes render as color+texture pairs chosen so that two class pairs share
/// a color and differ only in texture; photometric augmentation then makes
/// classification genuinely ambiguous without texture cues.
///   0 solid red, 1/2 green horizontal/vertical stripes, 3/4 blue checker/dots.
Scene generate_scene(int id, std::uint64_t seed, Split split, const SceneConfig& cfg);

std::vector<Scene> generate_dataset(int num_scenes, double labeled_fraction,
                                    std::uint64_t seed, const SceneConfig& cfg = {});

enum class AugKind { kWeak, kStrong };

struct AugmentationSpec {
  AugKind kind = AugKind::kWeak;
  std::uint64_t seed = 0;

  double flip_prob = 0.5;
  // strong-only stages
  double channel_jitter_prob = 0.8;
  double channel_jitter_lo = 0.6, channel_jitter_hi = 1.4;
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
  double cutout_probs[3] = {0.7, 0.5, 0.3};
  double cutout_scale_lo[3] = {0.05, 0.02, 0.02};
  double cutout_scale_hi[3] = {0.2, 0.2, 0.2};
  double cutout_ratio_lo[3] = {0.3, 0.1, 0.05};
  double cutout_ratio_hi[3] = {3.3, 6.0, 8.0};

  static AugmentationSpec weak(std::uint64_t seed) { return {AugKind::kWeak, seed}; }
  static AugmentationSpec strong(std::uint64_t seed) { return {AugKind::kStrong, seed}; }
};

/// Geometry of an applied augmentation; enough to map boxes between the
/// original frame and the view frame in either direction.
struct TransformRecord {
  bool hflip = false;
  double image_width = 0.0;
};

Box map_box(const Box& b, const TransformRecord& t);    // original -> view
Box unmap_box(const Box& b, const TransformRecord& t);  // view -> original

struct AugmentedView {
  Array image;
  std::vector<Box> boxes;  // annotation boxes mapped into the view frame
  TransformRecord transform;
};

/// Flip moves pixels and boxes together; photometric stages and cutout leave
/// geometry untouched.
AugmentedView apply_augmentation(const Scene& scene, const AugmentationSpec& spec);

// --- manifest + image dump ---

struct DatasetMeta {
  int num_scenes = 0;
  double labeled_fraction = 0.0;
  std::uint64_t seed = 0;
  SceneConfig scene;
};

struct ManifestEntry {
  int id = 0;
  Split split = Split::kUnlabeled;
  std::vector<Annotation> annotations;
};

/// JSON-lines: one header record, then one record per scene.
void write_manifest(const std::string& path, const std::vector<Scene>& scenes,
                    const DatasetMeta& meta);
std::pair<DatasetMeta, std::vector<ManifestEntry>> read_manifest(const std::string& path);

/// 8-bit binary PPM dump of an HxWx3 image in [0,1].
void write_ppm(const std::string& path, const Array& image);

}  // namespace deskdet
