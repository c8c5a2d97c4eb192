#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "disdet/box.hpp"
#include "disdet/dataset.hpp"
#include "disdet/network.hpp"

namespace disdet {

struct FocalConfig {
  double alpha = 1.0;
  double gamma = 2.0;
};

inline constexpr double kProbabilityClamp = 1e-7;

/// alpha (1-p)^gamma (-log p), batch mean. `p` is the probability assigned
/// to the correct label and is clamped to [eps, 1-eps].
torch::Tensor focal_loss(const torch::Tensor& p, const FocalConfig& cfg);
double focal_loss(double p, const FocalConfig& cfg);

/// Focal loss of a domain classifier. `target_probability` is the classifier
/// output; the correct-label probability is 1 - output for source images.
torch::Tensor domain_focal_loss(const torch::Tensor& target_probability, Domain domain,
                                const FocalConfig& cfg);

/// Same loss from the classifier's target-domain logit, evaluated with
/// log-sigmoid. No clamp, so a confidently wrong classifier still gets a
/// gradient.
torch::Tensor domain_focal_loss_from_logits(const torch::Tensor& target_logit, Domain domain,
                                            const FocalConfig& cfg);

// ---------------------------------------------------------------------------
// Detection

inline constexpr double kDetectionMatchIou = 0.5;
inline constexpr std::array<double, 4> kHeadBoxWeights{10.0, 10.0, 5.0, 5.0};

using TruthPerImage = std::vector<std::vector<AnnotatedBox>>;

struct DetectionTargets {
  torch::Tensor labels;      // int64 (K); 0 = background, c+1 = class c
  torch::Tensor regression;  // float (K,4), valid where labels > 0
};

DetectionTargets match_proposals(const ProposalSet& proposals, const TruthPerImage& truth,
                                 double iou_threshold = kDetectionMatchIou);

struct DetectionLoss {
  torch::Tensor total;
  torch::Tensor classification;
  torch::Tensor regression;
  int64_t num_foreground = 0;
  bool skipped = false;  // no proposals
};

/// Cross-entropy over all proposals plus smooth-L1 (beta 1) on the matched
/// class's deltas for foreground proposals, both normalized by the proposal
/// count.
DetectionLoss detection_loss(const DetectionOutput& out, const ProposalSet& proposals,
                             const TruthPerImage& truth);

/// Objectness (balanced between positive and negative anchors) plus box
/// regression on positives. Anchors with IoU >= positive_iou, and the best
/// anchor of every ground truth, are positive; below negative_iou negative.
torch::Tensor rpn_loss(const RpnOutput& out, const TruthPerImage& truth, const NetConfig& cfg);

// ---------------------------------------------------------------------------
// Mutual information

struct MISamplePair {
  torch::Tensor joint_x;     // (n, dx)
  torch::Tensor joint_z;     // (n, dz), row i drawn together with joint_x row i
  torch::Tensor marginal_z;  // (n, dz), joint_z shuffled within the batch
};

MISamplePair make_mi_pairs(const torch::Tensor& x, const torch::Tensor& z,
                           const std::vector<int64_t>& permutation);

/// Donsker-Varadhan bound mean(T_joint) - log mean(exp T_marginal), computed
/// with log-sum-exp.
torch::Tensor mine_lower_bound(const torch::Tensor& t_joint, const torch::Tensor& t_marginal);

struct MineResult {
  /// Forward value equals the bound; its gradient replaces the batch
  /// denominator of the log term by the moving average.
  torch::Tensor objective;
  double value = 0.0;
};

/// Bias-corrected MINE: keeps a moving average of mean(exp T_marginal), in
/// log space.
class MineEstimator {
 public:
  explicit MineEstimator(double momentum = 0.99) : momentum_(momentum) {}

  /// `update_average` false leaves the moving average untouched, for a
  /// second evaluation on the same batch.
  MineResult estimate(MiStatistic& statistic, const MISamplePair& pairs, bool update_average = true);

  bool initialized() const { return initialized_; }
  double log_moving_average() const { return log_ema_; }
  void restore(bool initialized, double log_ema) {
    initialized_ = initialized;
    log_ema_ = log_ema;
  }

 private:
  double momentum_;
  bool initialized_ = false;
  double log_ema_ = 0.0;
};

// ---------------------------------------------------------------------------
// Relations and reconstruction

/// Row-softmax of P P^T for pooled RoI features P (k,m).
torch::Tensor build_adjacency(const torch::Tensor& pooled);

struct ScalarLoss {
  torch::Tensor value;
  bool skipped = false;
};

/// Sum over images of ||A_di - A_b||_F^2, averaged over images that have
/// proposals. The base branch is treated as a constant.
ScalarLoss relation_consistency_loss(const RoIFeatures& rois_di, const RoIFeatures& rois_b,
                                     const torch::Tensor& batch_index);

/// Mean squared elementwise difference.
ScalarLoss reconstruction_loss(const RoIFeatures& a_r, const RoIFeatures& a_b);

// ---------------------------------------------------------------------------
// Stage compositions

struct LossWeights {
  double detection = 1.0;
  double focal = 1.0;
  double mi = 1.0;
  double relation = 1.0;
  double reconstruction = 1.0;

  /// Weight of a named term, by prefix (det_/rpn, focal_, mi, rel_, recon_).
  double for_term(const std::string& name) const;
  bool adaptation_disabled() const {
    return focal == 0.0 && mi == 0.0 && relation == 0.0 && reconstruction == 0.0;
  }
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const FocalConfig& f);
void from_json(const nlohmann::json& j, FocalConfig& f);

/// Named loss terms of one stage. Names follow `<kind>_<where>_<domain>`,
/// e.g. focal_ds1_s, mi2_t, rel_s, recon_t, det_b, det_di, rpn.
using TermMap = std::map<std::string, torch::Tensor>;

enum class StageId { kDecomposition, kSeparation, kReconstruction };
std::string stage_tag(StageId id);

/// Terms each stage's objective may contain.
const std::vector<std::string>& stage_terms(StageId id);

/// Weighted sum of `terms`; throws if a term does not belong to the stage.
torch::Tensor compose_stage(StageId id, const TermMap& terms, const LossWeights& weights);
torch::Tensor compose_stage_fd(const TermMap& terms, const LossWeights& weights);
torch::Tensor compose_stage_fs(const TermMap& terms, const LossWeights& weights);
torch::Tensor compose_stage_fr(const TermMap& terms, const LossWeights& weights);

/// Scalar values of the terms a stage produced in one iteration.
struct LossReport {
  std::string stage;
  std::vector<std::pair<std::string, double>> terms;
  std::vector<std::string> skipped;

  void add(const std::string& name, double value) { terms.emplace_back(name, value); }
  std::optional<double> get(const std::string& name) const;
  double total() const;
  /// {iter, stage, term: value, ..., skipped: [...]}
  nlohmann::json to_json(int64_t iteration) const;
};

}  // namespace disdet
