#include "disdet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace disdet {

using nlohmann::json;

torch::Tensor focal_loss(const torch::Tensor& p, const FocalConfig& cfg) {
  auto pc = p.clamp(kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto weight = cfg.alpha * torch::pow(1.0 - pc, cfg.gamma);
  return (weight * -torch::log(pc)).mean();
}

double focal_loss(double p, const FocalConfig& cfg) {
  const double pc = std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return cfg.alpha * std::pow(1.0 - pc, cfg.gamma) * -std::log(pc);
}

torch::Tensor domain_focal_loss(const torch::Tensor& target_probability, Domain domain,
                                const FocalConfig& cfg) {
  return focal_loss(domain == Domain::kTarget ? target_probability : 1.0 - target_probability, cfg);
}

torch::Tensor domain_focal_loss_from_logits(const torch::Tensor& target_logit, Domain domain,
                                            const FocalConfig& cfg) {
  const auto log_p = torch::log_sigmoid(domain == Domain::kTarget ? target_logit : -target_logit);
  const auto weight = cfg.alpha * torch::pow(1.0 - torch::exp(log_p), cfg.gamma);
  return (weight * -log_p).mean();
}

// ---------------------------------------------------------------------------

DetectionTargets match_proposals(const ProposalSet& proposals, const TruthPerImage& truth,
                                 double iou_threshold) {
  const int64_t k = proposals.size();
  auto labels = torch::zeros({k}, torch::kLong);
  const auto options = proposals.boxes.defined() ? proposals.boxes.options() : torch::TensorOptions();
  auto regression = torch::zeros({k, 4}, options);
  const BoxCoder coder{kHeadBoxWeights};
  for (int64_t b = 0; b < static_cast<int64_t>(truth.size()); ++b) {
    const auto& gt = truth[static_cast<std::size_t>(b)];
    if (gt.empty()) continue;
    auto idx = (proposals.batch_index == b).nonzero().squeeze(1);
    if (idx.numel() == 0) continue;
    auto boxes = proposals.boxes.index_select(0, idx);
    auto gt_boxes = boxes_to_tensor(gt).to(boxes.dtype());
    auto [best_iou, best_gt] = box_iou_matrix(boxes, gt_boxes).max(1);
    auto fg = best_iou >= iou_threshold;
    auto gt_labels = labels_to_tensor(gt).index_select(0, best_gt) + 1;
    labels.index_copy_(0, idx, torch::where(fg, gt_labels, torch::zeros_like(gt_labels)));
    regression.index_copy_(0, idx, coder.encode(boxes, gt_boxes.index_select(0, best_gt)));
  }
  return {labels, regression};
}

DetectionLoss detection_loss(const DetectionOutput& out, const ProposalSet& proposals,
                             const TruthPerImage& truth) {
  DetectionLoss loss;
  const int64_t k = proposals.size();
  if (k == 0) {
    loss.skipped = true;
    loss.total = loss.classification = loss.regression = torch::zeros({});
    return loss;
  }
  TORCH_CHECK(out.logits.size(0) == k, "detection_loss: output/proposal count mismatch");
  auto targets = match_proposals(proposals, truth);
  loss.classification = torch::nn::functional::cross_entropy(out.logits, targets.labels);
  auto fg = (targets.labels > 0).nonzero().squeeze(1);
  loss.num_foreground = fg.numel();
  if (loss.num_foreground > 0) {
    auto cls = targets.labels.index_select(0, fg) - 1;
    auto deltas = out.deltas.index_select(0, fg);
    auto picked = deltas.gather(1, cls.view({-1, 1, 1}).expand({-1, 1, 4})).squeeze(1);
    loss.regression = torch::nn::functional::smooth_l1_loss(
                          picked, targets.regression.index_select(0, fg).to(picked.dtype()),
                          torch::nn::functional::SmoothL1LossFuncOptions().reduction(torch::kSum)) /
                      static_cast<double>(k);
  } else {
    loss.regression = out.deltas.sum() * 0.0;
  }
  loss.total = loss.classification + loss.regression;
  return loss;
}

torch::Tensor rpn_loss(const RpnOutput& out, const TruthPerImage& truth, const NetConfig& cfg) {
  const int64_t batch = out.logits.size(0);
  TORCH_CHECK(static_cast<int64_t>(truth.size()) == batch, "rpn_loss: truth/batch mismatch");
  const BoxCoder coder;
  auto total = out.logits.sum() * 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    const auto& gt = truth[static_cast<std::size_t>(b)];
    auto logits = out.logits[b];
    if (gt.empty()) {
      total = total + torch::nn::functional::binary_cross_entropy_with_logits(
                          logits, torch::zeros_like(logits));
      continue;
    }
    auto gt_boxes = boxes_to_tensor(gt);
    auto ious = box_iou_matrix(out.anchors, gt_boxes);  // (A,G)
    auto [best_iou, best_gt] = ious.max(1);
    auto labels = torch::full_like(best_iou, -1.0);
    labels.masked_fill_(best_iou < cfg.rpn_negative_iou, 0.0);
    labels.masked_fill_(best_iou >= cfg.rpn_positive_iou, 1.0);
    // Every ground truth keeps its best anchor(s), even below the threshold.
    auto gt_best = std::get<0>(ious.max(0));
    auto is_best = ((ious == gt_best.unsqueeze(0)) & (gt_best.unsqueeze(0) > 0)).any(1);
    labels.masked_fill_(is_best, 1.0);

    auto pos = (labels == 1.0).nonzero().squeeze(1);
    auto neg = (labels == 0.0).nonzero().squeeze(1);
    auto objectness = out.logits.new_zeros({});
    if (pos.numel() > 0) {
      auto lp = logits.index_select(0, pos);
      objectness = objectness + 0.5 * torch::nn::functional::binary_cross_entropy_with_logits(
                                          lp, torch::ones_like(lp));
    }
    if (neg.numel() > 0) {
      auto ln = logits.index_select(0, neg);
      objectness = objectness + 0.5 * torch::nn::functional::binary_cross_entropy_with_logits(
                                          ln, torch::zeros_like(ln));
    }
    auto regression = out.logits.new_zeros({});
    if (pos.numel() > 0) {
      auto anchors = out.anchors.index_select(0, pos);
      auto targets = coder.encode(anchors, gt_boxes.index_select(0, best_gt.index_select(0, pos)));
      regression = torch::nn::functional::smooth_l1_loss(
                       out.deltas[b].index_select(0, pos), targets.to(out.deltas.dtype()),
                       torch::nn::functional::SmoothL1LossFuncOptions().reduction(torch::kSum)) /
                   static_cast<double>(pos.numel());
    }
    total = total + objectness + regression;
  }
  return total / static_cast<double>(batch);
}

// ---------------------------------------------------------------------------

MISamplePair make_mi_pairs(const torch::Tensor& x, const torch::Tensor& z,
                           const std::vector<int64_t>& permutation) {
  TORCH_CHECK(x.size(0) == z.size(0), "make_mi_pairs: x/z sample counts differ");
  TORCH_CHECK(static_cast<int64_t>(permutation.size()) == z.size(0),
              "make_mi_pairs: permutation length mismatch");
  auto perm = torch::tensor(permutation, torch::kLong);
  return {x, z, z.index_select(0, perm)};
}

torch::Tensor mine_lower_bound(const torch::Tensor& t_joint, const torch::Tensor& t_marginal) {
  const auto n = static_cast<double>(t_marginal.size(0));
  return t_joint.mean() - (torch::logsumexp(t_marginal, 0) - std::log(n));
}

MineResult MineEstimator::estimate(MiStatistic& statistic, const MISamplePair& pairs,
                                   bool update_average) {
  const int64_t n = pairs.joint_x.size(0);
  if (n < 2 || pairs.joint_z.size(0) != n || pairs.marginal_z.size(0) != n) {
    throw std::invalid_argument("mine_estimate needs matching joint/marginal batches of size >= 2");
  }
  auto t_joint = statistic->forward(pairs.joint_x, pairs.joint_z);
  auto t_marginal = statistic->forward(pairs.joint_x, pairs.marginal_z);
  auto bound = mine_lower_bound(t_joint, t_marginal);

  const double batch_log_mean =
      (torch::logsumexp(t_marginal.detach(), 0) - std::log(static_cast<double>(n))).item<double>();
  double log_average = batch_log_mean;
  if (initialized_) {
    const double a = std::log(momentum_) + log_ema_;
    const double b = std::log1p(-momentum_) + batch_log_mean;
    const double hi = std::max(a, b);
    log_average = hi + std::log(std::exp(a - hi) + std::exp(b - hi));
  }
  if (update_average) {
    log_ema_ = log_average;
    initialized_ = true;
  }
  // d log E[e^T] ~ d E[e^T] / EMA
  auto corrected = t_joint.mean() - torch::exp(t_marginal - log_average).mean();
  MineResult result;
  result.objective = bound.detach() + (corrected - corrected.detach());
  result.value = bound.item<double>();
  return result;
}

// ---------------------------------------------------------------------------

torch::Tensor build_adjacency(const torch::Tensor& pooled) {
  TORCH_CHECK(pooled.dim() == 2 && pooled.size(0) >= 1, "build_adjacency expects (k>=1, m)");
  return torch::softmax(pooled.matmul(pooled.t()), 1);
}

ScalarLoss relation_consistency_loss(const RoIFeatures& rois_di, const RoIFeatures& rois_b,
                                     const torch::Tensor& batch_index) {
  TORCH_CHECK(rois_di.size() == rois_b.size() && batch_index.size(0) == rois_di.size(),
              "relation_consistency_loss: inputs must come from the same proposals");
  if (rois_di.size() == 0) return {torch::zeros({}), true};
  auto p_di = rois_di.data.mean({2, 3});
  auto p_b = rois_b.data.detach().mean({2, 3});
  auto images = std::get<0>(at::_unique(batch_index, /*sorted=*/true));
  auto total = p_di.new_zeros({});
  for (int64_t i = 0; i < images.size(0); ++i) {
    auto idx = (batch_index == images[i]).nonzero().squeeze(1);
    auto diff = build_adjacency(p_di.index_select(0, idx)) - build_adjacency(p_b.index_select(0, idx));
    total = total + diff.pow(2).sum();
  }
  return {total / static_cast<double>(images.size(0)), false};
}

ScalarLoss reconstruction_loss(const RoIFeatures& a_r, const RoIFeatures& a_b) {
  if (!a_r.data.defined() || !a_b.data.defined() || a_r.data.sizes() != a_b.data.sizes()) {
    throw std::invalid_argument("reconstruction_loss: shape mismatch");
  }
  if (a_r.size() == 0) return {torch::zeros({}), true};
  return {(a_r.data - a_b.data).pow(2).mean(), false};
}

// ---------------------------------------------------------------------------

double LossWeights::for_term(const std::string& name) const {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("det_") || starts("rpn")) return detection;
  if (starts("focal_")) return focal;
  if (starts("mi")) return mi;
  if (starts("rel_")) return relation;
  if (starts("recon_")) return reconstruction;
  throw std::invalid_argument("unknown loss term '" + name + "'");
}

void to_json(json& j, const LossWeights& w) {
  j = json{{"detection", w.detection},
           {"focal", w.focal},
           {"mi", w.mi},
           {"relation", w.relation},
           {"reconstruction", w.reconstruction}};
}

void from_json(const json& j, LossWeights& w) {
  const LossWeights d;
  w.detection = j.value("detection", d.detection);
  w.focal = j.value("focal", d.focal);
  w.mi = j.value("mi", d.mi);
  w.relation = j.value("relation", d.relation);
  w.reconstruction = j.value("reconstruction", d.reconstruction);
}

void to_json(json& j, const FocalConfig& f) { j = json{{"alpha", f.alpha}, {"gamma", f.gamma}}; }

void from_json(const json& j, FocalConfig& f) {
  const FocalConfig d;
  f.alpha = j.value("alpha", d.alpha);
  f.gamma = j.value("gamma", d.gamma);
  if (f.alpha < 0.0 || f.gamma < 0.0) throw std::invalid_argument("focal alpha/gamma must be >= 0");
}

std::string stage_tag(StageId id) {
  switch (id) {
    case StageId::kDecomposition: return "fd";
    case StageId::kSeparation: return "fs";
    case StageId::kReconstruction: return "fr";
  }
  return "?";
}

const std::vector<std::string>& stage_terms(StageId id) {
  static const std::vector<std::string> fd{
      "rpn",          "det_b",        "det_di",      "focal_b1_s",  "focal_ds1_s", "focal_b2_s",
      "focal_ds2_s",  "focal_b1_t",   "focal_ds1_t", "focal_b2_t",  "focal_ds2_t"};
  static const std::vector<std::string> fs{
      "det_di", "focal_ds2_s", "mi2_s", "rel_s", "focal_ds1_s", "mi1_s",
      "focal_ds2_t", "mi2_t", "rel_t", "focal_ds1_t", "mi1_t"};
  static const std::vector<std::string> fr{"recon_s", "recon_t"};
  switch (id) {
    case StageId::kDecomposition: return fd;
    case StageId::kSeparation: return fs;
    case StageId::kReconstruction: return fr;
  }
  return fr;
}

torch::Tensor compose_stage(StageId id, const TermMap& terms, const LossWeights& weights) {
  const auto& allowed = stage_terms(id);
  torch::Tensor total = torch::zeros({});
  for (const auto& [name, value] : terms) {
    if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) {
      throw std::invalid_argument("term '" + name + "' is not part of stage " + stage_tag(id));
    }
    total = total + weights.for_term(name) * value;
  }
  return total;
}

torch::Tensor compose_stage_fd(const TermMap& terms, const LossWeights& weights) {
  return compose_stage(StageId::kDecomposition, terms, weights);
}

torch::Tensor compose_stage_fs(const TermMap& terms, const LossWeights& weights) {
  return compose_stage(StageId::kSeparation, terms, weights);
}

torch::Tensor compose_stage_fr(const TermMap& terms, const LossWeights& weights) {
  return compose_stage(StageId::kReconstruction, terms, weights);
}

std::optional<double> LossReport::get(const std::string& name) const {
  for (const auto& [n, v] : terms) {
    if (n == name) return v;
  }
  return std::nullopt;
}

double LossReport::total() const {
  double sum = 0.0;
  for (const auto& [n, v] : terms) sum += v;
  return sum;
}

json LossReport::to_json(int64_t iteration) const {
  json j{{"iter", iteration}, {"stage", stage}};
  for (const auto& [n, v] : terms) j[n] = v;
  if (!skipped.empty()) j["skipped"] = skipped;
  return j;
}

}  // namespace disdet
