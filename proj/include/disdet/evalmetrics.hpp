#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "disdet/box.hpp"
#include "disdet/dataset.hpp"
#include "disdet/training.hpp"

namespace disdet {

struct Detection {
  std::string image_id;
  BoundingBox box;
  int label = 0;
  double confidence = 0.0;
};

struct GroundTruthImage {
  std::string image_id;
  std::vector<AnnotatedBox> boxes;
};

enum class ApProtocol { kAllPoint, kElevenPoint };

struct APResult {
  /// nullopt for classes without ground truth; they are left out of the mean.
  std::vector<std::optional<double>> per_class;
  double map = 0.0;
  double iou_threshold = 0.5;
  ApProtocol protocol = ApProtocol::kAllPoint;
};

/// Area under the interpolated precision-recall curve. `recall` and
/// `precision` are the cumulative values at each ranked detection.
double ap_from_curve(const std::vector<double>& recall, const std::vector<double>& precision,
                     ApProtocol protocol);

/// AP of one class. Detections are ranked by confidence (stable for ties)
/// and matched greedily: a detection is a true positive when its best-IoU
/// ground truth of the same class reaches the threshold and is still
/// unmatched.
std::optional<double> class_average_precision(const std::vector<Detection>& detections,
                                              const std::vector<GroundTruthImage>& truth, int label,
                                              double iou_threshold = 0.5,
                                              ApProtocol protocol = ApProtocol::kAllPoint);

APResult average_precision(const std::vector<Detection>& detections,
                           const std::vector<GroundTruthImage>& truth, int num_classes,
                           double iou_threshold = 0.5, ApProtocol protocol = ApProtocol::kAllPoint);

// ---------------------------------------------------------------------------

struct InferenceOptions {
  std::string head = "d_di";
  double score_floor = 0.05;
  double nms = 0.5;
  int64_t batch_size = 16;
};

/// Detections for a batch of normalized images (N,3,H,W); `image_ids` names
/// each row.
std::vector<Detection> detect(DisentangledDetector& net, const torch::Tensor& images,
                              const std::vector<std::string>& image_ids,
                              const InferenceOptions& options);

std::vector<Detection> detect_dataset(DisentangledDetector& net, const Dataset& data,
                                      const std::vector<double>& pixel_mean,
                                      const InferenceOptions& options);

struct EvalOutputs {
  std::optional<std::filesystem::path> detections_jsonl;
  std::optional<std::filesystem::path> metrics_csv;
};

std::vector<std::string> class_names(int num_classes);

/// Loads a checkpoint, runs inference on an evaluation split (boxes from the
/// sealed manifest when present) and scores it.
APResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                  const EvalOutputs& outputs = {}, ApProtocol protocol = ApProtocol::kAllPoint);

APResult evaluate(LoadedModel& model, const Dataset& data, const EvalOutputs& outputs = {},
                  ApProtocol protocol = ApProtocol::kAllPoint);

/// Fixed-width table: one column per class plus mAP, in percent.
std::string format_ap_table(const APResult& result);

void write_detections_jsonl(const std::filesystem::path& file, const std::vector<Detection>& dets);
void write_metrics_csv(const std::filesystem::path& file, const APResult& result);

// ---------------------------------------------------------------------------

/// Channel-max projection min-max scaled to 8 bit, (H,W). A constant map
/// becomes all zeros.
torch::Tensor feature_heatmap(const torch::Tensor& fmap_chw);

/// Writes base.png, dir.png and dsr.png (second-layer maps) for one image.
void dump_features(const std::filesystem::path& checkpoint, const std::filesystem::path& image,
                   const std::filesystem::path& out_dir);

}  // namespace disdet
