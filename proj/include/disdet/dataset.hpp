#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "disdet/box.hpp"

namespace disdet {

enum class Domain : int { kSource = 0, kTarget = 1 };

/// One line of an annotation manifest:
/// {image_id, boxes: [[x_min,y_min,x_max,y_max]], labels: [int], domain: 0|1}
struct AnnotationLine {
  std::string image_id;
  std::vector<AnnotatedBox> boxes;
  Domain domain = Domain::kSource;
};

nlohmann::json to_json(const AnnotationLine& line);
AnnotationLine annotation_from_json(const nlohmann::json& j);

std::vector<AnnotationLine> read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const std::vector<AnnotationLine>& lines);

/// File names inside a dataset directory.
namespace layout {
inline constexpr const char* kImagesDir = "images";
/// Training manifest. Target-domain splits carry empty box lists here.
inline constexpr const char* kManifest = "annotations.jsonl";
/// Boxes of target-domain images, read only by the evaluator.
inline constexpr const char* kSealedManifest = "sealed_annotations.jsonl";
}  // namespace layout

/// Reads/writes 8-bit RGB PNG. In memory images are uint8 tensors (3,H,W).
torch::Tensor read_rgb_png(const std::filesystem::path& file);
void write_rgb_png(const std::filesystem::path& file, const torch::Tensor& chw_uint8);
void write_gray_png(const std::filesystem::path& file, const torch::Tensor& hw_uint8);

struct ImageRecord {
  std::string image_id;
  torch::Tensor pixels;  // uint8 (3,H,W)
  std::vector<AnnotatedBox> boxes;
  Domain domain = Domain::kSource;
};

/// Fully materialized dataset split.
class Dataset {
 public:
  enum class Boxes {
    kTraining,  // training manifest only; target boxes stay sealed
    kEvaluation  // sealed manifest takes precedence when present
  };

  static Dataset load(const std::filesystem::path& dir, Boxes which = Boxes::kTraining);

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ImageRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<ImageRecord>& records() const { return records_; }

  /// Largest label + 1 over all boxes, 0 when there are none.
  int max_label_count() const;

  /// Mean of each channel over all pixels, on the [0,1] scale.
  std::vector<double> channel_mean() const;

 private:
  std::vector<ImageRecord> records_;
};

/// Converts uint8 images to float, scales to [0,1] and subtracts the
/// per-channel mean. Input (3,H,W) or (N,3,H,W).
torch::Tensor normalize_images(const torch::Tensor& uint8_images,
                               const std::vector<double>& channel_mean);

/// One optimization step's worth of data. Target images never carry boxes.
struct DomainBatch {
  torch::Tensor source_images;  // (Ns,3,H,W) normalized
  std::vector<std::vector<AnnotatedBox>> source_boxes;
  torch::Tensor target_images;  // (Nt,3,H,W) normalized

  int64_t num_source() const { return source_images.defined() ? source_images.size(0) : 0; }
  int64_t num_target() const { return target_images.defined() ? target_images.size(0) : 0; }
  /// 0 for every source image followed by 1 for every target image.
  std::vector<int> domain_tags() const;
};

DomainBatch make_batch(const Dataset& source, const std::vector<std::size_t>& source_indices,
                       const Dataset& target, const std::vector<std::size_t>& target_indices,
                       const std::vector<double>& channel_mean);

}  // namespace disdet
