#include "disdet/training.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "disdet/synthdata.hpp"

namespace disdet {

using nlohmann::json;

void to_json(json& j, const TrainConfig& c) {
  j = json{{"net", c.net},
           {"focal", c.focal},
           {"weights", c.weights},
           {"iterations", c.iterations},
           {"iterations_phase2", c.iterations_phase2},
           {"lr", c.lr},
           {"lr_phase2", c.lr_phase2},
           {"momentum", c.momentum},
           {"grad_clip", c.grad_clip},
           {"source_per_step", c.source_per_step},
           {"target_per_step", c.target_per_step},
           {"seed", c.seed},
           {"grl_lambda", c.grl_lambda},
           {"dsr_adversarial", c.dsr_adversarial},
           {"mine_momentum", c.mine_momentum},
           {"mi_nonnegative", c.mi_nonnegative},
           {"append_ground_truth", c.append_ground_truth},
           {"stages", c.stages},
           {"sequential_stages", c.sequential_stages},
           {"one_stage", c.one_stage},
           {"checkpoint_every", c.checkpoint_every},
           {"pixel_mean", c.pixel_mean},
           {"eval_head", c.eval_head},
           {"eval_score_floor", c.eval_score_floor},
           {"eval_nms", c.eval_nms}};
}

void from_json(const json& j, TrainConfig& c) {
  static const std::vector<std::string> known{
      "net", "focal", "weights", "iterations", "iterations_phase2", "lr", "lr_phase2", "momentum",
      "grad_clip", "source_per_step", "target_per_step", "seed", "grl_lambda", "dsr_adversarial",
      "mine_momentum", "mi_nonnegative", "append_ground_truth", "stages", "sequential_stages", "one_stage",
      "checkpoint_every", "pixel_mean", "eval_head", "eval_score_floor", "eval_nms"};
  if (!j.is_object()) throw std::invalid_argument("training config must be a JSON object");
  for (const auto& item : j.items()) {
    if (std::find(known.begin(), known.end(), item.key()) == known.end()) {
      throw std::invalid_argument("unknown config key '" + item.key() + "'");
    }
  }
  const TrainConfig d;
  c.net = j.value("net", json::object()).get<NetConfig>();
  c.focal = j.value("focal", json::object()).get<FocalConfig>();
  c.weights = j.value("weights", json::object()).get<LossWeights>();
  c.iterations = j.value("iterations", d.iterations);
  c.iterations_phase2 = j.value("iterations_phase2", d.iterations_phase2);
  c.lr = j.value("lr", d.lr);
  c.lr_phase2 = j.value("lr_phase2", d.lr_phase2);
  c.momentum = j.value("momentum", d.momentum);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.source_per_step = j.value("source_per_step", d.source_per_step);
  c.target_per_step = j.value("target_per_step", d.target_per_step);
  c.seed = j.value("seed", d.seed);
  c.grl_lambda = j.value("grl_lambda", d.grl_lambda);
  c.dsr_adversarial = j.value("dsr_adversarial", d.dsr_adversarial);
  c.mine_momentum = j.value("mine_momentum", d.mine_momentum);
  c.mi_nonnegative = j.value("mi_nonnegative", d.mi_nonnegative);
  c.append_ground_truth = j.value("append_ground_truth", d.append_ground_truth);
  c.stages = j.value("stages", d.stages);
  c.sequential_stages = j.value("sequential_stages", d.sequential_stages);
  c.one_stage = j.value("one_stage", d.one_stage);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.pixel_mean = j.value("pixel_mean", d.pixel_mean);
  c.eval_head = j.value("eval_head", d.eval_head);
  c.eval_score_floor = j.value("eval_score_floor", d.eval_score_floor);
  c.eval_nms = j.value("eval_nms", d.eval_nms);

  if (c.iterations < 0 || c.iterations_phase2 < 0) throw std::invalid_argument("iterations must be >= 0");
  if (c.lr < 0.0 || c.lr_phase2 < 0.0) throw std::invalid_argument("learning rates must be >= 0");
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (c.source_per_step < 1 || c.target_per_step < 1) {
    throw std::invalid_argument("images per step must be >= 1 for each domain");
  }
  if (!(c.mine_momentum > 0.0 && c.mine_momentum < 1.0)) {
    throw std::invalid_argument("mine_momentum must be in (0,1)");
  }
  for (const auto& s : c.stages) {
    if (s != "fd" && s != "fs" && s != "fr") throw std::invalid_argument("unknown stage '" + s + "'");
  }
  if (c.eval_head != "d_di" && c.eval_head != "d_b") {
    throw std::invalid_argument("eval_head must be d_di or d_b");
  }
  if (!c.pixel_mean.empty() && c.pixel_mean.size() != 3) {
    throw std::invalid_argument("pixel_mean needs 3 entries");
  }
  if (c.checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

TrainConfig load_train_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return j.get<TrainConfig>();
}

// ---------------------------------------------------------------------------

std::string to_string(SubStepKind kind) {
  switch (kind) {
    case SubStepKind::kDetection: return "detection";
    case SubStepKind::kDomainFocal: return "domain_focal";
    case SubStepKind::kInvariantDetection: return "invariant_detection";
    case SubStepKind::kSpecificFocal: return "specific_focal";
    case SubStepKind::kMutualInformation: return "mutual_information";
    case SubStepKind::kRelation: return "relation";
    case SubStepKind::kReconstruction: return "reconstruction";
    case SubStepKind::kJoint: return "joint";
  }
  return "?";
}

const Stage* StagePlan::find(const std::string& tag) const {
  for (const auto& s : stages) {
    if (s.tag == tag) return &s;
  }
  return nullptr;
}

namespace {

double weight_of(SubStepKind kind, const LossWeights& w) {
  switch (kind) {
    case SubStepKind::kDetection:
    case SubStepKind::kInvariantDetection: return w.detection;
    case SubStepKind::kDomainFocal:
    case SubStepKind::kSpecificFocal: return w.focal;
    case SubStepKind::kMutualInformation: return w.mi;
    case SubStepKind::kRelation: return w.relation;
    case SubStepKind::kReconstruction: return w.reconstruction;
    case SubStepKind::kJoint: return 1.0;
  }
  return 0.0;
}

std::vector<std::string> groups_of(SubStepKind kind) {
  switch (kind) {
    case SubStepKind::kDetection:
      return {"e_b1", "e_dir1", "e_b2", "e_dir2", "rpn", "d_b", "d_di"};
    case SubStepKind::kDomainFocal:
      return {"e_b1", "e_dsr1", "c_b1", "c_ds1", "e_b2", "e_dsr2", "c_b2", "c_ds2"};
    case SubStepKind::kInvariantDetection: return {"e_dir1", "e_dir2", "d_di"};
    case SubStepKind::kSpecificFocal: return {"e_dsr1", "c_ds1", "e_dsr2", "c_ds2"};
    case SubStepKind::kMutualInformation:
      return {"e_dir1", "e_dsr1", "t1", "e_dir2", "e_dsr2", "t2"};
    case SubStepKind::kRelation: return {"e_dir2"};
    case SubStepKind::kReconstruction: return {"e_dir2", "e_dsr2", "r"};
    case SubStepKind::kJoint: return DisentangledDetectorImpl::group_names();
  }
  return {};
}

bool first_disentangled_group(const std::string& g) {
  return g == "e_dir1" || g == "e_dsr1" || g == "c_ds1" || g == "t1";
}

const std::vector<SubStepKind>& kinds_of_stage(const std::string& tag) {
  static const std::vector<SubStepKind> fd{SubStepKind::kDetection, SubStepKind::kDomainFocal};
  static const std::vector<SubStepKind> fs{SubStepKind::kInvariantDetection,
                                           SubStepKind::kSpecificFocal,
                                           SubStepKind::kMutualInformation, SubStepKind::kRelation};
  static const std::vector<SubStepKind> fr{SubStepKind::kReconstruction};
  if (tag == "fd") return fd;
  if (tag == "fs") return fs;
  return fr;
}

SubStep make_step(SubStepKind kind, const TrainConfig& cfg) {
  SubStep step{kind, groups_of(kind)};
  if (cfg.net.one_layer) {
    std::erase_if(step.groups, first_disentangled_group);
  }
  return step;
}

}  // namespace

StagePlan build_plan(const TrainConfig& cfg) {
  StagePlan plan;
  if (cfg.one_stage) {
    plan.stages.push_back({"all", {make_step(SubStepKind::kJoint, cfg)}});
    return plan;
  }
  for (const auto& tag : cfg.stages) {
    Stage stage{tag, {}};
    for (auto kind : kinds_of_stage(tag)) {
      if (weight_of(kind, cfg.weights) == 0.0) continue;
      stage.steps.push_back(make_step(kind, cfg));
    }
    if (!stage.steps.empty()) plan.stages.push_back(std::move(stage));
  }
  return plan;
}

// ---------------------------------------------------------------------------

namespace {

constexpr uint64_t kSourceStream = 11;
constexpr uint64_t kTargetStream = 12;
constexpr uint64_t kMarginalStream = 13;

/// Source proposals followed by that image's ground truth, image by image.
ProposalSet with_ground_truth(const ProposalSet& proposals, const TruthPerImage& truth) {
  std::vector<ProposalSet> parts;
  for (std::size_t b = 0; b < truth.size(); ++b) {
    const auto bi = static_cast<int64_t>(b);
    parts.push_back(proposals.for_image(bi));
    if (truth[b].empty()) continue;
    const auto n = static_cast<int64_t>(truth[b].size());
    parts.push_back({boxes_to_tensor(truth[b]), torch::ones({n}), torch::full({n}, bi, torch::kLong)});
  }
  return ProposalSet::concat(parts);
}

/// Rows of `rois` whose image index lies in [lo, hi).
torch::Tensor rows_in(const torch::Tensor& batch_index, int64_t lo, int64_t hi) {
  return ((batch_index >= lo) & (batch_index < hi)).nonzero().squeeze(1);
}

RoIFeatures take(const RoIFeatures& rois, const torch::Tensor& rows) {
  return {rois.data.index_select(0, rows), rois.branch};
}

torch::Tensor all_images(const DomainBatch& batch) {
  if (batch.num_target() == 0) return batch.source_images;
  if (batch.num_source() == 0) return batch.target_images;
  return torch::cat({batch.source_images, batch.target_images});
}

torch::Tensor weighted_sum(const TermMap& terms, const LossWeights& w) {
  torch::Tensor total = torch::zeros({});
  for (const auto& [name, value] : terms) total = total + w.for_term(name) * value;
  return total;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)), plan_(build_plan(cfg_)) {
  torch::manual_seed(cfg_.seed);
  net_ = DisentangledDetector(cfg_.net);
  for (const auto& g : DisentangledDetectorImpl::group_names()) {
    auto params = net_->group_parameters(g);
    if (params.empty()) continue;
    optimizers_[g] = std::make_unique<torch::optim::SGD>(
        params, torch::optim::SGDOptions(cfg_.lr).momentum(cfg_.momentum));
  }
  mine_.fill(MineEstimator(cfg_.mine_momentum));
}

std::vector<const Stage*> Trainer::active_stages() const {
  std::vector<const Stage*> out;
  if (plan_.stages.empty()) return out;
  if (!cfg_.sequential_stages) {
    for (const auto& s : plan_.stages) out.push_back(&s);
    return out;
  }
  const auto n = static_cast<int64_t>(plan_.stages.size());
  const int64_t total = std::max<int64_t>(1, cfg_.total_iterations());
  const int64_t phase = std::min(n - 1, iteration_ * n / total);
  out.push_back(&plan_.stages[static_cast<std::size_t>(phase)]);
  return out;
}

void Trainer::set_learning_rate(double lr) {
  for (auto& [name, opt] : optimizers_) {
    for (auto& group : opt->param_groups()) {
      static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    }
  }
}

std::vector<int64_t> Trainer::permutation(int64_t n) {
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg_.seed, static_cast<uint64_t>(iteration_),
                                  kMarginalStream + 16 * draws_++));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

void Trainer::refresh_stage_proposals(const DomainBatch& batch) {
  torch::NoGradGuard guard;
  auto x = all_images(batch);
  auto l1 = net_->forward_first_layer(x, {true, false});
  auto l2 = net_->forward_second_layer(l1.f1, {true, false});
  stage_proposals_ = net_->propose(l2.f_di2, cfg_.net.top_k_train, x.size(2), x.size(3));
}

std::vector<LossReport> Trainer::run_iteration(const DomainBatch& batch) {
  set_learning_rate(cfg_.lr_at(iteration_));
  draws_ = 0;
  std::vector<LossReport> reports;
  for (const Stage* stage : active_stages()) {
    stage_proposals_.reset();
    LossReport merged;
    merged.stage = stage->tag;
    for (const auto& step : stage->steps) {
      auto r = run_substep(step, stage->tag, batch);
      merged.terms.insert(merged.terms.end(), r.terms.begin(), r.terms.end());
      merged.skipped.insert(merged.skipped.end(), r.skipped.begin(), r.skipped.end());
    }
    reports.push_back(std::move(merged));
  }
  stage_proposals_.reset();
  ++iteration_;
  return reports;
}

LossReport Trainer::run_substep(const SubStep& step, const std::string& stage_tag,
                                const DomainBatch& batch) {
  net_->set_trainable_groups(step.groups);
  net_->zero_grad();
  LossReport report;
  report.stage = stage_tag;
  TermMap terms;
  if (step.kind == SubStepKind::kJoint) {
    for (auto kind : {SubStepKind::kDetection, SubStepKind::kDomainFocal,
                      SubStepKind::kMutualInformation, SubStepKind::kRelation,
                      SubStepKind::kReconstruction}) {
      if (weight_of(kind, cfg_.weights) == 0.0) continue;
      compute_terms(kind, batch, terms, report);
    }
  } else {
    compute_terms(step.kind, batch, terms, report);
  }
  if (terms.empty()) return report;

  torch::Tensor total;
  if (stage_tag == "fd") {
    total = compose_stage_fd(terms, cfg_.weights);
  } else if (stage_tag == "fs") {
    total = compose_stage_fs(terms, cfg_.weights);
  } else if (stage_tag == "fr") {
    total = compose_stage_fr(terms, cfg_.weights);
  } else {
    total = weighted_sum(terms, cfg_.weights);
  }
  for (const auto& [name, value] : terms) report.add(name, value.item<double>());
  if (!total.requires_grad()) return report;

  total.backward();
  // The statistics networks maximize the bound the extractors minimize.
  for (const char* g : {"t1", "t2"}) {
    for (auto& p : net_->group_parameters(g)) {
      if (p.grad().defined()) p.mutable_grad().neg_();
    }
  }
  std::vector<torch::Tensor> params;
  for (const auto& g : step.groups) {
    auto ps = net_->group_parameters(g);
    params.insert(params.end(), ps.begin(), ps.end());
  }
  if (cfg_.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(params, cfg_.grad_clip);
  for (const auto& g : step.groups) {
    auto it = optimizers_.find(g);
    if (it != optimizers_.end()) it->second->step();
  }
  return report;
}

void Trainer::compute_terms(SubStepKind kind, const DomainBatch& batch, TermMap& terms,
                            LossReport& report) {
  const int64_t ns = batch.num_source();
  const int64_t nt = batch.num_target();
  const bool two_layers = !cfg_.net.one_layer;

  switch (kind) {
    case SubStepKind::kDetection:
    case SubStepKind::kInvariantDetection: {
      if (ns == 0) return;
      const auto& x = batch.source_images;
      const int64_t h = x.size(2), w = x.size(3);
      auto l1 = net_->forward_first_layer(x, {true, false});
      auto l2 = net_->forward_second_layer(l1.f1, {true, false});
      ProposalSet proposals;
      if (kind == SubStepKind::kDetection) {
        auto rpn = net_->rpn_forward(l2.f_di2);
        terms["rpn"] = rpn_loss(rpn, batch.source_boxes, cfg_.net);
        proposals = net_->select_proposals(rpn, cfg_.net.top_k_train, h, w);
      } else {
        if (!stage_proposals_) refresh_stage_proposals(batch);
        auto rows = rows_in(stage_proposals_->batch_index, 0, ns);
        proposals = {stage_proposals_->boxes.index_select(0, rows),
                     stage_proposals_->objectness.index_select(0, rows),
                     stage_proposals_->batch_index.index_select(0, rows)};
      }
      if (cfg_.append_ground_truth) proposals = with_ground_truth(proposals, batch.source_boxes);
      if (proposals.empty()) {
        report.skipped.push_back(kind == SubStepKind::kDetection ? "det_b" : "det_di");
        return;
      }
      if (kind == SubStepKind::kDetection) {
        auto a_b = net_->align(l2.f_b2, proposals, Branch::kBase);
        terms["det_b"] = detection_loss(net_->detect("d_b", a_b), proposals, batch.source_boxes).total;
      }
      auto a_di = net_->align(l2.f_di2, proposals, Branch::kInvariant);
      terms["det_di"] = detection_loss(net_->detect("d_di", a_di), proposals, batch.source_boxes).total;
      return;
    }

    case SubStepKind::kDomainFocal:
    case SubStepKind::kSpecificFocal: {
      auto x = all_images(batch);
      auto l1 = net_->forward_first_layer(x, {true, true});
      auto l2 = net_->forward_second_layer(l1.f1, {false, true});
      struct Probe {
        const char* classifier;
        const char* where;
        torch::Tensor fmap;
        bool reverse;
      };
      std::vector<Probe> probes;
      if (kind == SubStepKind::kDomainFocal) probes.push_back({"c_b1", "b1", l1.f_b1, true});
      if (two_layers) probes.push_back({"c_ds1", "ds1", l1.f_ds1, cfg_.dsr_adversarial});
      if (kind == SubStepKind::kDomainFocal) probes.push_back({"c_b2", "b2", l2.f_b2, true});
      probes.push_back({"c_ds2", "ds2", l2.f_ds2, cfg_.dsr_adversarial});
      for (const auto& p : probes) {
        auto logit = net_->classify_domain_logit(p.classifier, p.fmap, cfg_.grl_lambda, p.reverse);
        const std::string stem = std::string("focal_") + p.where;
        if (ns > 0) {
          terms[stem + "_s"] = domain_focal_loss_from_logits(logit.narrow(0, 0, ns), Domain::kSource,
                                                                 cfg_.focal);
        }
        if (nt > 0) {
          terms[stem + "_t"] = domain_focal_loss_from_logits(logit.narrow(0, ns, nt), Domain::kTarget,
                                                                 cfg_.focal);
        }
      }
      return;
    }

    case SubStepKind::kMutualInformation: {
      if (!stage_proposals_) refresh_stage_proposals(batch);
      auto x = all_images(batch);
      auto l1 = net_->forward_first_layer(x, {true, true});
      auto l2 = net_->forward_second_layer(l1.f1, {true, true});
      const std::array<std::pair<int64_t, int64_t>, 2> ranges{{{0, ns}, {ns, ns + nt}}};
      auto mi_term = [&](MiStatistic& t, MineEstimator& mine, torch::Tensor xs, torch::Tensor zs) {
        // Batch standardization with detached statistics. MI is unchanged by
        // per-dimension affine maps, and T stays stable while feature scales
        // drift under the adversarial updates.
        auto standardize = [](const torch::Tensor& v) {
          auto m = v.detach().mean(0, true);
          auto s = v.detach().std(0, false, true).clamp_min(1e-5);
          return (v - m) / s;
        };
        xs = standardize(xs);
        zs = standardize(zs);
        const auto perm = permutation(xs.size(0));
        auto result = mine.estimate(t, make_mi_pairs(xs, zs, perm));
        if (!cfg_.mi_nonnegative || result.value > 0.0) return result.objective;
        return mine.estimate(t, make_mi_pairs(xs.detach(), zs.detach(), perm), false).objective;
      };
      const std::array<const char*, 2> suffix{"_s", "_t"};
      if (two_layers) {
        for (std::size_t d = 0; d < 2; ++d) {
          const auto [lo, hi] = ranges[d];
          const std::string name = std::string("mi1") + suffix[d];
          if (hi - lo == 0) continue;
          auto vectors = [&](const torch::Tensor& f) {
            return f.narrow(0, lo, hi - lo).permute({0, 2, 3, 1}).reshape({-1, f.size(1)});
          };
          auto xi = vectors(l1.f_di1);
          auto zi = vectors(l1.f_ds1);
          terms[name] = mi_term(net_->t1, mine_[d], xi, zi);
        }
      }
      const auto& props = *stage_proposals_;
      if (props.empty()) {
        report.skipped.push_back("mi2_s");
        report.skipped.push_back("mi2_t");
        return;
      }
      auto p_di = net_->align(l2.f_di2, props, Branch::kInvariant).data.mean({2, 3});
      auto p_ds = net_->align(l2.f_ds2, props, Branch::kSpecific).data.mean({2, 3});
      for (std::size_t d = 0; d < 2; ++d) {
        const auto [lo, hi] = ranges[d];
        const std::string name = std::string("mi2") + suffix[d];
        auto rows = rows_in(props.batch_index, lo, hi);
        if (rows.size(0) < 2) {
          if (hi > lo) report.skipped.push_back(name);
          continue;
        }
        terms[name] = mi_term(net_->t2, mine_[2 + d], p_di.index_select(0, rows),
                              p_ds.index_select(0, rows));
      }
      return;
    }

    case SubStepKind::kRelation: {
      if (!stage_proposals_) refresh_stage_proposals(batch);
      const auto& props = *stage_proposals_;
      auto x = all_images(batch);
      auto l1 = net_->forward_first_layer(x, {true, false});
      auto l2 = net_->forward_second_layer(l1.f1, {true, false});
      if (props.empty()) {
        report.skipped.push_back("rel_s");
        report.skipped.push_back("rel_t");
        return;
      }
      auto a_di = net_->align(l2.f_di2, props, Branch::kInvariant);
      auto a_b = net_->align(l2.f_b2.detach(), props, Branch::kBase);
      const std::array<std::tuple<const char*, int64_t, int64_t>, 2> parts{
          {{"rel_s", 0, ns}, {"rel_t", ns, ns + nt}}};
      for (const auto& [name, lo, hi] : parts) {
        if (hi == lo) continue;
        auto rows = rows_in(props.batch_index, lo, hi);
        auto loss = relation_consistency_loss(take(a_di, rows), take(a_b, rows),
                                              props.batch_index.index_select(0, rows));
        if (loss.skipped) {
          report.skipped.push_back(name);
        } else {
          terms[name] = loss.value;
        }
      }
      return;
    }

    case SubStepKind::kReconstruction: {
      auto x = all_images(batch);
      auto l1 = net_->forward_first_layer(x, {true, false});
      auto l2 = net_->forward_second_layer(l1.f1, {true, true});
      ProposalSet props;
      {
        torch::NoGradGuard guard;
        props = net_->propose(l2.f_di2.detach(), cfg_.net.top_k_train, x.size(2), x.size(3));
      }
      if (props.empty()) {
        report.skipped.push_back("recon_s");
        report.skipped.push_back("recon_t");
        return;
      }
      auto a_di = net_->align(l2.f_di2, props, Branch::kInvariant);
      auto a_ds = net_->align(l2.f_ds2, props, Branch::kSpecific);
      auto a_b = net_->align(l2.f_b2.detach(), props, Branch::kBase);
      auto a_r = net_->reconstruct(a_di, a_ds);
      const std::array<std::tuple<const char*, int64_t, int64_t>, 2> parts{
          {{"recon_s", 0, ns}, {"recon_t", ns, ns + nt}}};
      for (const auto& [name, lo, hi] : parts) {
        if (hi == lo) continue;
        auto rows = rows_in(props.batch_index, lo, hi);
        if (rows.size(0) == 0) {
          report.skipped.push_back(name);
          continue;
        }
        terms[name] = reconstruction_loss(take(a_r, rows), take(a_b, rows)).value;
      }
      return;
    }

    case SubStepKind::kJoint: return;
  }
}

std::map<std::string, torch::Tensor> Trainer::snapshot() {
  std::map<std::string, torch::Tensor> out;
  for (const auto& g : DisentangledDetectorImpl::group_names()) {
    for (const auto& item : net_->group(g).named_parameters()) {
      out[g + "/" + item.key()] = item.value().detach().clone();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

torch::Tensor bytes_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<int64_t>(s.size())}, torch::kUInt8);
  std::copy(s.begin(), s.end(), t.data_ptr<uint8_t>());
  return t;
}

std::string tensor_bytes(const torch::Tensor& t) {
  auto c = t.contiguous();
  const auto* p = c.data_ptr<uint8_t>();
  return std::string(p, p + c.numel());
}

struct ArchiveHeader {
  TrainConfig config;
  int64_t iteration = 0;
};

ArchiveHeader read_header(torch::serialize::InputArchive& ar, const std::filesystem::path& file) {
  torch::Tensor version, iteration, config;
  try {
    ar.read("format_version", version);
    ar.read("iteration", iteration);
    ar.read("config", config);
  } catch (const c10::Error&) {
    throw std::runtime_error("checkpoint " + file.string() + " is missing required records");
  }
  if (version.item<int64_t>() != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint " + file.string() + " has unsupported format version " +
                             std::to_string(version.item<int64_t>()));
  }
  ArchiveHeader h;
  h.config = json::parse(tensor_bytes(config)).get<TrainConfig>();
  h.iteration = iteration.item<int64_t>();
  return h;
}

void load_params(DisentangledDetector& net, torch::serialize::InputArchive& ar) {
  torch::serialize::InputArchive params;
  ar.read("params", params);
  for (const auto& g : DisentangledDetectorImpl::group_names()) {
    torch::serialize::InputArchive sub;
    params.read(g, sub);
    net->group(g).load(sub);
  }
}

torch::serialize::InputArchive open_archive(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw std::runtime_error("checkpoint " + file.string() + " not found");
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(file.string());
  } catch (const c10::Error&) {
    throw std::runtime_error("checkpoint " + file.string() + " is unreadable");
  }
  return ar;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& file) {
  torch::serialize::OutputArchive ar;
  ar.write("format_version", torch::tensor(kCheckpointFormatVersion));
  ar.write("iteration", torch::tensor(iteration_));
  ar.write("config", bytes_tensor(json(cfg_).dump()));

  torch::serialize::OutputArchive params;
  for (const auto& g : DisentangledDetectorImpl::group_names()) {
    torch::serialize::OutputArchive sub;
    net_->group(g).save(sub);
    params.write(g, sub);
  }
  ar.write("params", params);

  torch::serialize::OutputArchive optim;
  for (const auto& [g, opt] : optimizers_) {
    torch::serialize::OutputArchive sub;
    opt->save(sub);
    optim.write(g, sub);
  }
  ar.write("optimizer", optim);

  auto mine = torch::zeros({4, 2}, torch::kFloat64);
  for (std::size_t i = 0; i < mine_.size(); ++i) {
    mine[static_cast<int64_t>(i)][0] = mine_[i].initialized() ? 1.0 : 0.0;
    mine[static_cast<int64_t>(i)][1] = mine_[i].log_moving_average();
  }
  ar.write("mine", mine);

  const auto tmp = std::filesystem::path(file.string() + ".tmp");
  ar.save_to(tmp.string());
  std::filesystem::rename(tmp, file);
}

Trainer Trainer::from_checkpoint(const std::filesystem::path& file) {
  auto ar = open_archive(file);
  auto header = read_header(ar, file);
  Trainer t(header.config);
  t.iteration_ = header.iteration;
  load_params(t.net_, ar);
  torch::serialize::InputArchive optim;
  ar.read("optimizer", optim);
  for (auto& [g, opt] : t.optimizers_) {
    torch::serialize::InputArchive sub;
    optim.read(g, sub);
    opt->load(sub);
  }
  torch::Tensor mine;
  ar.read("mine", mine);
  for (std::size_t i = 0; i < t.mine_.size(); ++i) {
    const auto row = static_cast<int64_t>(i);
    t.mine_[i].restore(mine[row][0].item<double>() != 0.0, mine[row][1].item<double>());
  }
  return t;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  auto ar = open_archive(checkpoint);
  auto header = read_header(ar, checkpoint);
  LoadedModel m;
  m.config = header.config;
  m.iteration = header.iteration;
  m.net = DisentangledDetector(m.config.net);
  load_params(m.net, ar);
  m.net->eval();
  return m;
}

std::string checkpoint_name(int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%06lld.pt", static_cast<long long>(iteration));
  return buf;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> batch_indices(uint64_t seed, uint64_t stream, int64_t iteration,
                                       int64_t per_step, std::size_t dataset_size) {
  if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  uint64_t cached_epoch = ~0ULL;
  for (int64_t k = 0; k < per_step; ++k) {
    const auto pos = static_cast<uint64_t>(iteration * per_step + k);
    const uint64_t epoch = pos / dataset_size;
    if (epoch != cached_epoch) {
      perm.resize(dataset_size);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed(seed, epoch, stream));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % dataset_size]);
  }
  return out;
}

void configure_determinism() {
  const char* v = std::getenv("DISDET_DETERMINISTIC");
  if (v != nullptr && std::string(v) == "1") {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
  }
}

TrainResult train(TrainConfig cfg, const TrainPaths& paths, const ProgressFn& progress) {
  auto source = Dataset::load(paths.source, Dataset::Boxes::kTraining);
  auto target = Dataset::load(paths.target, Dataset::Boxes::kTraining);
  return train(std::move(cfg), source, target, paths.out, paths.resume, progress);
}

TrainResult train(TrainConfig cfg, const Dataset& source, const Dataset& target,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume, const ProgressFn& progress) {
  if (source.empty()) throw std::invalid_argument("source dataset is empty");
  if (target.empty()) throw std::invalid_argument("target dataset is empty");
  if (source.max_label_count() > cfg.net.num_classes) {
    throw std::invalid_argument("source labels exceed num_classes=" + std::to_string(cfg.net.num_classes));
  }
  std::filesystem::create_directories(out_dir);

  std::optional<Trainer> trainer;
  if (resume) {
    trainer.emplace(Trainer::from_checkpoint(*resume));
  } else {
    if (cfg.pixel_mean.empty()) cfg.pixel_mean = source.channel_mean();
    trainer.emplace(cfg);
  }
  const TrainConfig& c = trainer->config();

  TrainResult result;
  result.log = out_dir / "train_log.jsonl";
  std::ofstream log(result.log, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + result.log.string());

  auto checkpoint = [&] {
    auto file = out_dir / checkpoint_name(trainer->iteration());
    trainer->save_checkpoint(file);
    result.checkpoints.push_back(file);
    result.final_checkpoint = file;
  };
  if (!resume) checkpoint();

  const int64_t total = c.total_iterations();
  while (trainer->iteration() < total) {
    const int64_t it = trainer->iteration();
    auto s_idx = batch_indices(c.seed, kSourceStream, it, c.source_per_step, source.size());
    auto t_idx = batch_indices(c.seed, kTargetStream, it, c.target_per_step, target.size());
    auto batch = make_batch(source, s_idx, target, t_idx, c.pixel_mean);
    auto reports = trainer->run_iteration(batch);
    for (const auto& r : reports) log << r.to_json(it).dump() << '\n';
    if (progress) progress(it, reports);
    const int64_t done = trainer->iteration();
    if (done == total || (c.checkpoint_every > 0 && done % c.checkpoint_every == 0)) {
      log.flush();
      checkpoint();
    }
  }
  if (result.final_checkpoint.empty()) result.final_checkpoint = *resume;
  return result;
}

}  // namespace disdet
