#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "disdet/box.hpp"

namespace disdet {

/// Scene layout parameters of the Shapes2D benchmark.
struct SceneSpec {
  int64_t image_size = 64;
  int num_classes = 3;  // circle, square, triangle
  int min_objects = 1;
  int max_objects = 4;
  double min_size = 0.2;  // object extent as a fraction of the image side
  double max_size = 0.4;
  // Object hue range in degrees. Backgrounds are always dark blue, so the
  // target hue rotation moves them while the object palette stays covered.
  double object_hue_min = 0.0;
  double object_hue_max = 360.0;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

enum class Shape : int { kCircle = 0, kSquare = 1, kTriangle = 2 };

using Rgb = std::array<double, 3>;

struct SceneObject {
  Shape shape;
  BoundingBox box;
  Rgb color;
};

/// Style-free scene: geometry and base colours only.
struct Scene {
  Rgb background;
  std::vector<SceneObject> objects;
};

/// Appearance transform applied on top of a rendered scene. Never touches
/// geometry.
struct DomainStyle {
  std::string name = "source";
  double hue_rotation_deg = 0.0;
  double haze_alpha = 0.0;
  double haze_level = 0.8;  // fog colour (grey level on [0,1])
  double noise_amplitude = 0.0;
  int64_t noise_cell = 8;  // value-noise lattice spacing in pixels

  int domain() const { return name == "target" ? 1 : 0; }

  static DomainStyle source();
  /// Hue rotation 120 deg, fog alpha 0.35 toward light grey, value noise 0.1.
  static DomainStyle target();
  static DomainStyle named(const std::string& name);
};

/// Per-image seed derived from (seed, index, stream) by SplitMix64 mixing.
uint64_t derive_seed(uint64_t seed, uint64_t index, uint64_t stream);

Scene sample_scene(const SceneSpec& spec, uint64_t seed, int64_t index);

/// Whether the pixel centre (px+0.5, py+0.5) lies inside the object.
bool covers(const SceneObject& obj, double x, double y);

/// Float image (3,H,W) on [0,1].
torch::Tensor render_scene(const Scene& scene, int64_t image_size);
torch::Tensor apply_style(const torch::Tensor& rgb, const DomainStyle& style, uint64_t noise_seed);
torch::Tensor to_uint8(const torch::Tensor& rgb);

/// Renders image `index` of a split in the given style, uint8 (3,H,W).
torch::Tensor render_image(const SceneSpec& spec, const DomainStyle& style, uint64_t seed,
                           int64_t index);

struct GenerateOptions {
  std::string split = "train";
  unsigned threads = 1;
};

/// Writes images and manifests into `out_dir`. Everything is staged first
/// and moved into place only on success.
void generate(const SceneSpec& spec, const DomainStyle& style, int64_t n_images,
              const std::filesystem::path& out_dir, const GenerateOptions& options = {});

}  // namespace disdet
