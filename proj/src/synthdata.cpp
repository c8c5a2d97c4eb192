#include "disdet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <thread>

#include "disdet/dataset.hpp"

namespace disdet {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const SceneSpec& s) {
  j = json{{"image_size", s.image_size}, {"num_classes", s.num_classes},
           {"min_objects", s.min_objects}, {"max_objects", s.max_objects},
           {"min_size", s.min_size},     {"max_size", s.max_size},
           {"object_hue_min", s.object_hue_min}, {"object_hue_max", s.object_hue_max},
           {"seed", s.seed}};
}

void from_json(const json& j, SceneSpec& s) {
  const SceneSpec d;
  s.image_size = j.value("image_size", d.image_size);
  s.num_classes = j.value("num_classes", d.num_classes);
  s.min_objects = j.value("min_objects", d.min_objects);
  s.max_objects = j.value("max_objects", d.max_objects);
  s.min_size = j.value("min_size", d.min_size);
  s.max_size = j.value("max_size", d.max_size);
  s.object_hue_min = j.value("object_hue_min", d.object_hue_min);
  s.object_hue_max = j.value("object_hue_max", d.object_hue_max);
  s.seed = j.value("seed", d.seed);
  if (s.image_size < 16 || s.num_classes < 1 || s.num_classes > 3 || s.min_objects < 1 ||
      s.max_objects < s.min_objects || !(s.min_size > 0.0) || s.max_size < s.min_size ||
      s.max_size > 0.9 || s.object_hue_max < s.object_hue_min) {
    throw std::invalid_argument("invalid scene spec");
  }
}

DomainStyle DomainStyle::source() { return DomainStyle{}; }

DomainStyle DomainStyle::target() {
  DomainStyle s;
  s.name = "target";
  s.hue_rotation_deg = 120.0;
  s.haze_alpha = 0.35;
  s.noise_amplitude = 0.1;
  return s;
}

DomainStyle DomainStyle::named(const std::string& name) {
  if (name == "source") return source();
  if (name == "target") return target();
  throw std::invalid_argument("unknown style '" + name + "' (expected source|target)");
}

uint64_t derive_seed(uint64_t seed, uint64_t index, uint64_t stream) {
  auto mix = [](uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ index) ^ (stream * 0xD1B54A32D192ED03ULL));
}

namespace {

constexpr uint64_t kSceneStream = 1;
constexpr uint64_t kStyleStream = 2;

Rgb hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  Rgb rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

std::array<double, 3> rgb_to_hsv(const Rgb& rgb) {
  const double mx = std::max({rgb[0], rgb[1], rgb[2]});
  const double mn = std::min({rgb[0], rgb[1], rgb[2]});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == rgb[0]) {
      h = 60.0 * std::fmod((rgb[1] - rgb[2]) / d, 6.0);
    } else if (mx == rgb[1]) {
      h = 60.0 * ((rgb[2] - rgb[0]) / d + 2.0);
    } else {
      h = 60.0 * ((rgb[0] - rgb[1]) / d + 4.0);
    }
  }
  return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

}  // namespace

Scene sample_scene(const SceneSpec& spec, uint64_t seed, int64_t index) {
  std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(index), kSceneStream));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&](int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
  };

  Scene scene;
  // Dark, desaturated blue-ish backgrounds with bright, saturated objects.
  scene.background = hsv_to_rgb(uniform(200.0, 260.0), uniform(0.2, 0.5), uniform(0.12, 0.3));

  const int64_t size = spec.image_size;
  const auto min_px = std::max<int64_t>(4, std::llround(spec.min_size * static_cast<double>(size)));
  const auto max_px = std::max<int64_t>(min_px, std::llround(spec.max_size * static_cast<double>(size)));
  const auto wanted = uniform_int(spec.min_objects, spec.max_objects);
  constexpr int kMaxAttempts = 100;
  for (int64_t n = 0; n < wanted; ++n) {
    const auto shape = static_cast<Shape>(uniform_int(0, spec.num_classes - 1));
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      const auto extent = uniform_int(min_px, max_px);
      // one pixel of margin to the border
      const auto x0 = uniform_int(1, size - 1 - extent);
      const auto y0 = uniform_int(1, size - 1 - extent);
      BoundingBox box(static_cast<double>(x0), static_cast<double>(y0),
                      static_cast<double>(x0 + extent), static_cast<double>(y0 + extent));
      const bool disjoint = std::all_of(scene.objects.begin(), scene.objects.end(),
                                        [&](const SceneObject& o) { return iou(o.box, box) == 0.0; });
      if (!disjoint) continue;
      const Rgb color = hsv_to_rgb(uniform(spec.object_hue_min, spec.object_hue_max), uniform(0.7, 1.0), uniform(0.75, 1.0));
      scene.objects.push_back({shape, box, color});
      break;
    }
  }
  return scene;
}

bool covers(const SceneObject& obj, double x, double y) {
  const auto& b = obj.box;
  if (x < b.x_min() || x > b.x_max() || y < b.y_min() || y > b.y_max()) return false;
  switch (obj.shape) {
    case Shape::kSquare:
      return true;
    case Shape::kCircle: {
      const double r = 0.5 * b.width();
      const double dx = x - b.center_x();
      const double dy = y - b.center_y();
      return dx * dx + dy * dy <= r * r;
    }
    case Shape::kTriangle: {
      // apex at top centre, base along the bottom edge
      const double t = (y - b.y_min()) / b.height();
      return std::abs(x - b.center_x()) <= 0.5 * b.width() * t;
    }
  }
  return false;
}

torch::Tensor render_scene(const Scene& scene, int64_t image_size) {
  auto img = torch::empty({3, image_size, image_size}, torch::kFloat64);
  auto a = img.accessor<double, 3>();
  for (int64_t y = 0; y < image_size; ++y) {
    for (int64_t x = 0; x < image_size; ++x) {
      Rgb c = scene.background;
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      for (const auto& obj : scene.objects) {
        if (covers(obj, px, py)) c = obj.color;
      }
      for (int ch = 0; ch < 3; ++ch) a[ch][y][x] = c[static_cast<std::size_t>(ch)];
    }
  }
  return img;
}

torch::Tensor apply_style(const torch::Tensor& rgb, const DomainStyle& style, uint64_t noise_seed) {
  auto out = rgb.to(torch::kFloat64).clone();
  const int64_t h = out.size(1);
  const int64_t w = out.size(2);
  auto a = out.accessor<double, 3>();

  if (style.hue_rotation_deg != 0.0) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        auto hsv = rgb_to_hsv({a[0][y][x], a[1][y][x], a[2][y][x]});
        auto c = hsv_to_rgb(hsv[0] + style.hue_rotation_deg, hsv[1], hsv[2]);
        for (int ch = 0; ch < 3; ++ch) a[ch][y][x] = c[static_cast<std::size_t>(ch)];
      }
    }
  }

  if (style.noise_amplitude > 0.0) {
    // Smooth value noise: random lattice values in [-1,1], smoothstep interpolation.
    std::mt19937_64 rng(noise_seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const int64_t cell = std::max<int64_t>(1, style.noise_cell);
    const int64_t gw = w / cell + 2;
    const int64_t gh = h / cell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gw * gh));
    for (auto& v : lattice) v = unit(rng);
    auto at = [&](int64_t gy, int64_t gx) { return lattice[static_cast<std::size_t>(gy * gw + gx)]; };
    for (int64_t y = 0; y < h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(cell);
      const auto gy = static_cast<int64_t>(fy);
      const double ty = smoothstep(fy - static_cast<double>(gy));
      for (int64_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(cell);
        const auto gx = static_cast<int64_t>(fx);
        const double tx = smoothstep(fx - static_cast<double>(gx));
        const double top = at(gy, gx) * (1 - tx) + at(gy, gx + 1) * tx;
        const double bottom = at(gy + 1, gx) * (1 - tx) + at(gy + 1, gx + 1) * tx;
        const double n = style.noise_amplitude * (top * (1 - ty) + bottom * ty);
        for (int ch = 0; ch < 3; ++ch) a[ch][y][x] += n;
      }
    }
  }

  if (style.haze_alpha > 0.0) {
    out.mul_(1.0 - style.haze_alpha).add_(style.haze_alpha * style.haze_level);
  }
  return out.clamp_(0.0, 1.0);
}

torch::Tensor to_uint8(const torch::Tensor& rgb) {
  return (rgb.to(torch::kFloat64) * 255.0).round().clamp(0, 255).to(torch::kUInt8);
}

torch::Tensor render_image(const SceneSpec& spec, const DomainStyle& style, uint64_t seed,
                           int64_t index) {
  const Scene scene = sample_scene(spec, seed, index);
  auto rgb = render_scene(scene, spec.image_size);
  rgb = apply_style(rgb, style, derive_seed(seed, static_cast<uint64_t>(index), kStyleStream));
  return to_uint8(rgb);
}

namespace {

std::string image_id(const std::string& split, int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(index));
  return split + "_" + buf;
}

}  // namespace

void generate(const SceneSpec& spec, const DomainStyle& style, int64_t n_images,
              const fs::path& out_dir, const GenerateOptions& options) {
  if (n_images < 1) throw std::invalid_argument("generate: n_images must be at least 1");
  if (options.split.empty()) throw std::invalid_argument("generate: empty split name");

  fs::create_directories(out_dir);
  const fs::path staging = out_dir / ".staging";
  fs::remove_all(staging);
  fs::create_directories(staging / layout::kImagesDir);

  try {
    std::vector<AnnotationLine> lines(static_cast<std::size_t>(n_images));
    auto work = [&](int64_t begin, int64_t end) {
      for (int64_t i = begin; i < end; ++i) {
        const Scene scene = sample_scene(spec, spec.seed, i);
        auto& line = lines[static_cast<std::size_t>(i)];
        line.image_id = image_id(options.split, i);
        line.domain = static_cast<Domain>(style.domain());
        for (const auto& obj : scene.objects) line.boxes.push_back({obj.box, static_cast<int>(obj.shape)});
        auto rgb = apply_style(render_scene(scene, spec.image_size), style,
                               derive_seed(spec.seed, static_cast<uint64_t>(i), kStyleStream));
        write_rgb_png(staging / layout::kImagesDir / (line.image_id + ".png"), to_uint8(rgb));
      }
    };

    const unsigned threads = std::max(1u, std::min<unsigned>(options.threads,
                                                             static_cast<unsigned>(n_images)));
    if (threads == 1) {
      work(0, n_images);
    } else {
      std::vector<std::exception_ptr> errors(threads);
      {
        std::vector<std::jthread> pool;
        const int64_t chunk = (n_images + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
          const int64_t begin = std::min<int64_t>(n_images, t * chunk);
          const int64_t end = std::min<int64_t>(n_images, begin + chunk);
          pool.emplace_back([&, t, begin, end] {
            try {
              work(begin, end);
            } catch (...) {
              errors[t] = std::current_exception();
            }
          });
        }
      }
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }

    if (style.domain() == 1) {
      // Target boxes are kept out of the training manifest.
      write_manifest(staging / layout::kSealedManifest, lines);
      auto unlabeled = lines;
      for (auto& l : unlabeled) l.boxes.clear();
      write_manifest(staging / layout::kManifest, unlabeled);
    } else {
      write_manifest(staging / layout::kManifest, lines);
    }

    for (const char* name : {layout::kImagesDir, layout::kManifest, layout::kSealedManifest}) {
      fs::remove_all(out_dir / name);
      if (fs::exists(staging / name)) fs::rename(staging / name, out_dir / name);
    }
    fs::remove_all(staging);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
}

}  // namespace disdet
