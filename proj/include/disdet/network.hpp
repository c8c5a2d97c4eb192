#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "disdet/box.hpp"

namespace disdet {

/// Architecture hyper-parameters. Defaults target 64x64 inputs.
struct NetConfig {
  int64_t in_channels = 3;
  int64_t num_classes = 3;
  int64_t c1 = 64;   // channels of the first-layer maps (stride 4)
  int64_t c2 = 128;  // channels of the second-layer maps (stride 8)
  int64_t rpn_hidden = 128;
  int64_t head_hidden = 256;
  int64_t classifier_hidden = 128;
  int64_t mi_hidden = 128;
  int64_t roi_size = 4;
  double anchor_size = 24.0;
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};
  double rpn_nms = 0.7;
  double rpn_positive_iou = 0.7;
  double rpn_negative_iou = 0.3;
  int64_t top_k_train = 32;
  int64_t top_k_eval = 16;
  /// Zero-init the last convolution of E_DIR1, so a fresh network starts
  /// from F1 = F_b1. Second-layer maps feed ReLU heads directly and keep a
  /// random init (an all-zero map would block their gradients).
  bool zero_init_residual = true;
  /// Disables the first disentangled layer: F1 := F_b1.
  bool one_layer = false;

  int64_t stride1() const { return 4; }
  int64_t stride2() const { return 8; }
  int64_t num_anchors() const { return static_cast<int64_t>(anchor_ratios.size()); }
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

// ---------------------------------------------------------------------------
// Tensor box helpers. Boxes are float (K,4) in corner format.

/// Pairwise IoU, (N,M).
torch::Tensor box_iou_matrix(const torch::Tensor& a, const torch::Tensor& b);

/// Standard (dx, dy, dw, dh) box parameterization with per-coordinate weights.
struct BoxCoder {
  std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};

  torch::Tensor encode(const torch::Tensor& reference, const torch::Tensor& target) const;
  torch::Tensor decode(const torch::Tensor& reference, const torch::Tensor& deltas) const;
};

/// Greedy non-maximum suppression; returns kept indices sorted by score.
torch::Tensor nms(const torch::Tensor& boxes, const torch::Tensor& scores, double threshold);

torch::Tensor boxes_to_tensor(const std::vector<AnnotatedBox>& boxes);
torch::Tensor labels_to_tensor(const std::vector<AnnotatedBox>& boxes);

// ---------------------------------------------------------------------------

/// Scored candidate boxes in image pixels, sorted by objectness within each image.
struct ProposalSet {
  torch::Tensor boxes;        // float (K,4)
  torch::Tensor objectness;   // float (K), in [0,1]
  torch::Tensor batch_index;  // int64 (K)

  int64_t size() const { return boxes.defined() ? boxes.size(0) : 0; }
  bool empty() const { return size() == 0; }
  BoundingBox box(int64_t i) const;
  /// Subset belonging to image b.
  ProposalSet for_image(int64_t b) const;

  static ProposalSet empty_set();
  static ProposalSet concat(const std::vector<ProposalSet>& parts);
};

/// Which feature map a set of RoI crops was sampled from.
enum class Branch { kBase, kInvariant, kSpecific, kReconstructed };

struct RoIFeatures {
  torch::Tensor data;  // (K, C, S, S)
  Branch branch = Branch::kBase;

  int64_t size() const { return data.defined() ? data.size(0) : 0; }
};

/// Bilinear RoI alignment with one sample at the centre of each of the SxS
/// cells. Boxes are in input pixels; `stride` maps them onto `fmap`, whose
/// cell (i,j) is centred at ((j+0.5)*stride, (i+0.5)*stride).
RoIFeatures roi_align(const torch::Tensor& fmap, const ProposalSet& proposals, int64_t out_size,
                      double stride, Branch branch);

/// Identity forward, gradient scaled by -lambda backward.
torch::Tensor grl(const torch::Tensor& x, double lambda);

// ---------------------------------------------------------------------------
// Parameter groups

/// Stack of 3x3 conv + ReLU blocks; `strides` gives one block per entry.
class ConvStageImpl : public torch::nn::Module {
 public:
  ConvStageImpl(std::vector<int64_t> channels, std::vector<int64_t> strides);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::ModuleList convs_;
};
TORCH_MODULE(ConvStage);

/// Three channel-preserving 3x3 convolutions, ReLU between, linear output.
class ExtractorImpl : public torch::nn::Module {
 public:
  ExtractorImpl(int64_t channels, bool zero_init_last);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr};
};
TORCH_MODULE(Extractor);

struct RpnOutput {
  torch::Tensor logits;   // (B, A_total)
  torch::Tensor deltas;   // (B, A_total, 4)
  torch::Tensor anchors;  // (A_total, 4), shared by every image
};

class RpnImpl : public torch::nn::Module {
 public:
  explicit RpnImpl(const NetConfig& cfg);
  RpnOutput forward(const torch::Tensor& fmap);

  /// Anchor grid for a (height, width) feature map, ordered (y, x, ratio).
  torch::Tensor anchors(int64_t height, int64_t width) const;

 private:
  double anchor_size_;
  std::vector<double> ratios_;
  double stride_;
  torch::nn::Conv2d conv_{nullptr}, cls_{nullptr}, reg_{nullptr};
};
TORCH_MODULE(Rpn);

struct DetectionOutput {
  torch::Tensor logits;  // (K, num_classes + 1); index 0 is background
  torch::Tensor deltas;  // (K, num_classes, 4)
};

class DetectionHeadImpl : public torch::nn::Module {
 public:
  DetectionHeadImpl(int64_t in_features, int64_t hidden, int64_t num_classes);
  DetectionOutput forward(const torch::Tensor& rois);
  void zero_output_layers();

 private:
  int64_t num_classes_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, cls_{nullptr}, reg_{nullptr};
};
TORCH_MODULE(DetectionHead);

/// Global average pool, three fully-connected layers, one logit.
class DomainClassifierImpl : public torch::nn::Module {
 public:
  DomainClassifierImpl(int64_t channels, int64_t hidden);
  /// Logit of the target-domain probability, shape (B).
  torch::Tensor forward(const torch::Tensor& fmap);
  void zero_output_layer();

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, fc3_{nullptr};
};
TORCH_MODULE(DomainClassifier);

/// Statistics network T(x, z) of the mutual-information estimator.
class MiStatisticImpl : public torch::nn::Module {
 public:
  MiStatisticImpl(int64_t x_dim, int64_t z_dim, int64_t hidden);
  /// x (n, x_dim), z (n, z_dim) -> (n)
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& z);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr}, fc3_{nullptr};
};
TORCH_MODULE(MiStatistic);

/// 1x1 convolution 2C -> C applied to concatenated (invariant, specific) crops.
class ReconstructorImpl : public torch::nn::Module {
 public:
  explicit ReconstructorImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& concatenated);
  torch::nn::Conv2d& conv() { return conv_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Reconstructor);

// ---------------------------------------------------------------------------

struct FirstLayerMaps {
  torch::Tensor f_b1, f_di1, f_ds1, f1;
};

struct SecondLayerMaps {
  torch::Tensor f_b2, f_di2, f_ds2;
};

/// The seven named maps of both disentangled layers.
struct DisentangledState {
  torch::Tensor f_b1, f_di1, f_ds1, f1, f_b2, f_di2, f_ds2;
};

/// Which optional branches a forward pass computes.
struct BranchMask {
  bool invariant = true;
  bool specific = true;
};

/// Full detector. Every trainable parameter belongs to exactly one named
/// group, and groups can be frozen independently.
class DisentangledDetectorImpl : public torch::nn::Module {
 public:
  explicit DisentangledDetectorImpl(const NetConfig& cfg);

  const NetConfig& config() const { return cfg_; }

  static const std::vector<std::string>& group_names();
  torch::nn::Module& group(const std::string& name);
  std::vector<torch::Tensor> group_parameters(const std::string& name);
  void set_group_trainable(const std::string& name, bool trainable);
  /// Makes exactly `names` trainable and freezes every other group.
  void set_trainable_groups(const std::vector<std::string>& names);

  FirstLayerMaps forward_first_layer(const torch::Tensor& images, BranchMask mask = {});
  SecondLayerMaps forward_second_layer(const torch::Tensor& f1, BranchMask mask = {});
  DisentangledState forward_all(const torch::Tensor& images);

  RpnOutput rpn_forward(const torch::Tensor& f_di2);
  /// Decodes, clips, suppresses and keeps the top_k proposals of every image.
  ProposalSet select_proposals(const RpnOutput& rpn, int64_t top_k, int64_t image_height,
                               int64_t image_width) const;
  ProposalSet propose(const torch::Tensor& f_di2, int64_t top_k, int64_t image_height,
                      int64_t image_width);

  RoIFeatures align(const torch::Tensor& f2_map, const ProposalSet& proposals, Branch branch) const;

  DetectionOutput detect(const std::string& head, const RoIFeatures& rois);
  torch::Tensor classify_domain(const std::string& classifier, const torch::Tensor& fmap,
                                double grl_lambda, bool reverse = true);
  /// Pre-sigmoid form of classify_domain, for losses computed in log space.
  torch::Tensor classify_domain_logit(const std::string& classifier, const torch::Tensor& fmap,
                                      double grl_lambda, bool reverse = true);
  DomainClassifier& domain_classifier(const std::string& name);
  RoIFeatures reconstruct(const RoIFeatures& a_di, const RoIFeatures& a_ds);

  ConvStage e_b1{nullptr}, e_b2{nullptr};
  Extractor e_dir1{nullptr}, e_dsr1{nullptr}, e_dir2{nullptr}, e_dsr2{nullptr};
  Rpn rpn{nullptr};
  DetectionHead d_b{nullptr}, d_di{nullptr};
  DomainClassifier c_b1{nullptr}, c_ds1{nullptr}, c_b2{nullptr}, c_ds2{nullptr};
  MiStatistic t1{nullptr}, t2{nullptr};
  Reconstructor r{nullptr};

 private:
  NetConfig cfg_;
};
TORCH_MODULE(DisentangledDetector);

/// Target-domain logit, through a GRL when `reverse`.
torch::Tensor domain_logit(DomainClassifier& classifier, const torch::Tensor& fmap, double grl_lambda,
                           bool reverse = true);

/// Probability in (0,1) of the target domain, through a GRL when `reverse`.
torch::Tensor domain_probability(DomainClassifier& classifier, const torch::Tensor& fmap,
                                 double grl_lambda, bool reverse = true);

}  // namespace disdet
