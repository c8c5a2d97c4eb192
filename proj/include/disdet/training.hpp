#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "disdet/dataset.hpp"
#include "disdet/losses.hpp"
#include "disdet/network.hpp"

namespace disdet {

struct TrainConfig {
  NetConfig net;
  FocalConfig focal;
  LossWeights weights;

  int64_t iterations = 3000;         // first learning-rate phase
  int64_t iterations_phase2 = 1000;  // second phase at lr_phase2
  double lr = 0.001;
  double lr_phase2 = 0.0001;
  double momentum = 0.9;
  /// Global gradient-norm clip per sub-step; 0 disables.
  double grad_clip = 0.0;
  int64_t source_per_step = 2;
  int64_t target_per_step = 2;
  uint64_t seed = 0;

  double grl_lambda = 1.0;
  /// C_ds classifiers sit behind the GRL like C_b. Off: E_DSR (and through
  /// it E_b) is trained to make the domain easy to classify, which pulls the
  /// base features away from alignment.
  bool dsr_adversarial = true;
  double mine_momentum = 0.99;
  /// Extractors get no gradient from an MI term whose estimate is <= 0.
  /// Mutual information is non-negative, so a negative estimate only means
  /// T lags behind; minimizing it further lets the extractors exploit T.
  bool mi_nonnegative = true;
  /// Adds the ground-truth boxes to the RPN proposals of source images
  /// during training.
  bool append_ground_truth = true;

  /// Active stages, in order, drawn from {fd, fs, fr}.
  std::vector<std::string> stages{"fd", "fs", "fr"};
  /// Run the stages as consecutive thirds of the budget instead of cycling
  /// all of them inside every iteration.
  bool sequential_stages = false;
  /// Every loss in one joint update of every group.
  bool one_stage = false;

  int64_t checkpoint_every = 1000;  // 0: initial and final only
  std::vector<double> pixel_mean;   // empty: computed from the source split
  std::string eval_head = "d_di";
  double eval_score_floor = 0.05;
  double eval_nms = 0.5;

  int64_t total_iterations() const { return iterations + iterations_phase2; }
  double lr_at(int64_t iteration) const { return iteration < iterations ? lr : lr_phase2; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Reads a JSON config document. Keys absent from the file keep defaults.
TrainConfig load_train_config(const std::filesystem::path& file);

// ---------------------------------------------------------------------------

enum class SubStepKind {
  kDetection,           // both heads, RPN, base and invariant extractors
  kDomainFocal,         // all four domain classifiers
  kInvariantDetection,  // invariant head on the separation proposals
  kSpecificFocal,       // specific-branch classifiers
  kMutualInformation,   // MINE on both layers
  kRelation,            // relation consistency
  kReconstruction,      // proposal-level reconstruction
  kJoint                // every term at once
};

std::string to_string(SubStepKind kind);

struct SubStep {
  SubStepKind kind;
  std::vector<std::string> groups;  // parameter groups this sub-step updates
};

struct Stage {
  std::string tag;  // fd, fs, fr or all
  std::vector<SubStep> steps;
};

struct StagePlan {
  std::vector<Stage> stages;

  const Stage* find(const std::string& tag) const;
};

/// Sub-steps and update sets implied by the config: drops zero-weighted
/// losses, the first disentangled layer in one-layer mode, and stages not
/// listed in `stages`.
StagePlan build_plan(const TrainConfig& cfg);

// ---------------------------------------------------------------------------

inline constexpr int64_t kCheckpointFormatVersion = 1;

/// Mutable training state: network, one momentum-SGD optimizer per
/// parameter group, MINE moving averages and the iteration counter.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  const StagePlan& plan() const { return plan_; }
  DisentangledDetector& net() { return net_; }
  int64_t iteration() const { return iteration_; }

  /// One pass of every active stage over `batch`, then iteration += 1.
  std::vector<LossReport> run_iteration(const DomainBatch& batch);

  /// Runs a single sub-step; exposed for the freezing tests.
  LossReport run_substep(const SubStep& step, const std::string& stage_tag,
                         const DomainBatch& batch);

  /// Stages active at the current iteration.
  std::vector<const Stage*> active_stages() const;

  void save_checkpoint(const std::filesystem::path& file);
  static Trainer from_checkpoint(const std::filesystem::path& file);

  /// Copy of every parameter keyed "<group>/<name>".
  std::map<std::string, torch::Tensor> snapshot();

  const MineEstimator& mine_estimator(std::size_t i) const { return mine_.at(i); }

 private:
  void compute_terms(SubStepKind kind, const DomainBatch& batch, TermMap& terms,
                     LossReport& report);
  void refresh_stage_proposals(const DomainBatch& batch);
  std::vector<int64_t> permutation(int64_t n);
  void set_learning_rate(double lr);

  TrainConfig cfg_;
  StagePlan plan_;
  DisentangledDetector net_{nullptr};
  std::map<std::string, std::unique_ptr<torch::optim::SGD>> optimizers_;
  std::array<MineEstimator, 4> mine_;  // layer1 s/t, layer2 s/t
  int64_t iteration_ = 0;
  uint64_t draws_ = 0;  // random draws within the current iteration
  std::optional<ProposalSet> stage_proposals_;
};

/// Model half of a checkpoint, for inference.
struct LoadedModel {
  TrainConfig config;
  DisentangledDetector net{nullptr};
  int64_t iteration = 0;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

/// Batch indices of iteration `iteration`: consecutive slices of per-epoch
/// permutations derived from (seed, epoch).
std::vector<std::size_t> batch_indices(uint64_t seed, uint64_t stream, int64_t iteration,
                                       int64_t per_step, std::size_t dataset_size);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path log;
};

struct TrainPaths {
  std::filesystem::path source;
  std::filesystem::path target;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
};

/// Callback for progress output; receives the iteration's reports.
using ProgressFn = std::function<void(int64_t, const std::vector<LossReport>&)>;

/// Full training run: initial, periodic and final checkpoints plus a JSON
/// lines loss log under `paths.out`.
TrainResult train(TrainConfig cfg, const TrainPaths& paths, const ProgressFn& progress = {});

/// Same as above with datasets already in memory.
TrainResult train(TrainConfig cfg, const Dataset& source, const Dataset& target,
                  const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const ProgressFn& progress = {});

std::string checkpoint_name(int64_t iteration);

/// Honours DISDET_DETERMINISTIC=1 (single thread, deterministic kernels).
void configure_determinism();

}  // namespace disdet
