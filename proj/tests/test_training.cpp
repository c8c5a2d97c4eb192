#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "disdet/synthdata.hpp"
#include "disdet/training.hpp"
#include "test_util.hpp"

using namespace disdet;
using disdet::testing::TempDir;

namespace fs = std::filesystem;

namespace {

using GroupSet = std::set<std::string>;

// Update sets per stage, written out from the training schedule.
const GroupSet kFdGroups{"e_b1", "e_dir1", "e_dsr1", "e_b2", "e_dir2", "e_dsr2", "rpn",
                         "d_b",  "d_di",   "c_b1",   "c_ds1", "c_b2",  "c_ds2"};
const GroupSet kFsGroups{"e_dir1", "e_dsr1", "e_dir2", "e_dsr2", "d_di", "c_ds1", "c_ds2", "t1", "t2"};
const GroupSet kFrGroups{"e_dir2", "e_dsr2", "r"};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string group_of(const std::string& key) { return key.substr(0, key.find('/')); }

/// Groups with at least one parameter that differs between snapshots.
GroupSet changed_groups(const std::map<std::string, torch::Tensor>& before,
                        const std::map<std::string, torch::Tensor>& after) {
  GroupSet changed;
  for (const auto& [k, v] : before) {
    if (!torch::equal(v, after.at(k))) changed.insert(group_of(k));
  }
  return changed;
}

class TrainingTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("training");
    SceneSpec spec;
    spec.image_size = 32;
    spec.seed = 1;
    generate(spec, DomainStyle::source(), 8, *dir_ / "src");
    spec.seed = 2;
    generate(spec, DomainStyle::target(), 8, *dir_ / "tgt");
    spec.seed = 3;
    generate(spec, DomainStyle::target(), 8, *dir_ / "tgt2");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static Dataset source() { return Dataset::load(*dir_ / "src"); }
  static Dataset target(const char* name = "tgt") { return Dataset::load(*dir_ / name); }

  static DomainBatch batch(int64_t iteration) {
    const auto s = source();
    const auto t = target();
    return make_batch(s, batch_indices(1, 1, iteration, 2, s.size()), t,
                      batch_indices(1, 2, iteration, 2, t.size()), s.channel_mean());
  }

  static TempDir* dir_;
};

TempDir* TrainingTest::dir_ = nullptr;

}  // namespace

TEST(Plan, DefaultHasThreeStagesInOrder) {
  const auto plan = build_plan(TrainConfig{});
  ASSERT_EQ(plan.stages.size(), 3u);
  EXPECT_EQ(plan.stages[0].tag, "fd");
  EXPECT_EQ(plan.stages[1].tag, "fs");
  EXPECT_EQ(plan.stages[2].tag, "fr");
  EXPECT_EQ(plan.find("fs"), &plan.stages[1]);
  EXPECT_EQ(plan.find("all"), nullptr);
}

TEST(Plan, StageUpdateSetsMatchSchedule) {
  const auto plan = build_plan(TrainConfig{});
  const std::map<std::string, GroupSet> expected{{"fd", kFdGroups}, {"fs", kFsGroups}, {"fr", kFrGroups}};
  for (const auto& stage : plan.stages) {
    GroupSet all;
    for (const auto& step : stage.steps) all.insert(step.groups.begin(), step.groups.end());
    EXPECT_EQ(all, expected.at(stage.tag)) << stage.tag;
  }
}

TEST(Plan, SeparationNeverUpdatesBaseExtractors) {
  const auto plan = build_plan(TrainConfig{});
  for (const auto& step : plan.find("fs")->steps) {
    for (const auto& g : step.groups) {
      EXPECT_NE(g, "e_b1") << to_string(step.kind);
      EXPECT_NE(g, "e_b2") << to_string(step.kind);
    }
  }
}

TEST(Plan, OneLayerDropsFirstLayerBranches) {
  TrainConfig c;
  c.net.one_layer = true;
  for (const auto& stage : build_plan(c).stages) {
    for (const auto& step : stage.steps) {
      for (const auto& g : step.groups) {
        EXPECT_TRUE(g != "e_dir1" && g != "e_dsr1" && g != "c_ds1" && g != "t1") << g;
      }
    }
  }
}

TEST(Plan, ZeroWeightsAndStageSelectionDropSteps) {
  TrainConfig c;
  c.weights.relation = 0.0;
  c.stages = {"fd", "fs"};
  const auto plan = build_plan(c);
  ASSERT_EQ(plan.stages.size(), 2u);
  for (const auto& step : plan.find("fs")->steps) EXPECT_NE(step.kind, SubStepKind::kRelation);

  TrainConfig joint;
  joint.one_stage = true;
  const auto jp = build_plan(joint);
  ASSERT_EQ(jp.stages.size(), 1u);
  EXPECT_EQ(jp.stages[0].tag, "all");
  ASSERT_EQ(jp.stages[0].steps.size(), 1u);
  EXPECT_EQ(jp.stages[0].steps[0].kind, SubStepKind::kJoint);
  EXPECT_EQ(jp.stages[0].steps[0].groups.size(), DisentangledDetectorImpl::group_names().size());
}

TEST(Plan, SequentialStagesSplitTheBudget) {
  auto c = disdet::testing::tiny_config();
  c.iterations = 6;
  c.iterations_phase2 = 0;
  c.sequential_stages = true;
  Trainer t(c);
  ASSERT_EQ(t.active_stages().size(), 1u);
  EXPECT_EQ(t.active_stages()[0]->tag, "fd");
}

TEST_F(TrainingTest, EachSubStepTouchesOnlyItsGroups) {
  auto c = disdet::testing::tiny_config();
  Trainer trainer(c);
  const auto b = batch(0);
  for (const auto& stage : trainer.plan().stages) {
    for (const auto& step : stage.steps) {
      const auto before = trainer.snapshot();
      trainer.run_substep(step, stage.tag, b);
      const auto changed = changed_groups(before, trainer.snapshot());
      const GroupSet allowed(step.groups.begin(), step.groups.end());
      for (const auto& g : changed) {
        EXPECT_TRUE(allowed.count(g)) << to_string(step.kind) << " changed " << g;
      }
    }
  }
}

TEST_F(TrainingTest, EachStageFreezesEverythingOutsideItsUpdateSetOverTenIterations) {
  const std::map<std::string, GroupSet> expected{{"fd", kFdGroups}, {"fs", kFsGroups}, {"fr", kFrGroups}};
  for (const auto& [tag, allowed] : expected) {
    auto c = disdet::testing::tiny_config();
    c.stages = {tag};
    c.iterations = 10;
    c.iterations_phase2 = 0;
    Trainer trainer(c);
    const auto before = trainer.snapshot();
    for (int64_t it = 0; it < 10; ++it) trainer.run_iteration(batch(it));
    const auto changed = changed_groups(before, trainer.snapshot());
    EXPECT_FALSE(changed.empty()) << tag;
    for (const auto& g : changed) EXPECT_TRUE(allowed.count(g)) << tag << " changed " << g;
    if (tag == "fs") {
      EXPECT_FALSE(changed.count("e_b1"));
      EXPECT_FALSE(changed.count("e_b2"));
    }
  }
}

TEST_F(TrainingTest, ZeroLearningRateLeavesParametersUnchanged) {
  auto c = disdet::testing::tiny_config();
  c.lr = 0.0;
  c.lr_phase2 = 0.0;
  Trainer trainer(c);
  const auto before = trainer.snapshot();
  for (int64_t it = 0; it < 3; ++it) trainer.run_iteration(batch(it));
  EXPECT_TRUE(changed_groups(before, trainer.snapshot()).empty());
  EXPECT_EQ(trainer.iteration(), 3);
}

TEST_F(TrainingTest, ZeroIterationsWritesOnlyTheInitialCheckpoint) {
  TempDir out("train_zero");
  auto c = disdet::testing::tiny_config();
  c.iterations = 0;
  c.iterations_phase2 = 0;
  const auto r = train(c, source(), target(), out.path());
  ASSERT_EQ(r.checkpoints.size(), 1u);
  EXPECT_EQ(r.final_checkpoint.filename(), checkpoint_name(0));
  EXPECT_TRUE(fs::exists(r.final_checkpoint));
  EXPECT_EQ(fs::file_size(r.log), 0u);
  EXPECT_EQ(checkpoint_name(0), "ckpt_000000.pt");
}

TEST_F(TrainingTest, RunsAreDeterministic) {
  TempDir a("train_det_a"), b("train_det_b");
  const auto c = disdet::testing::tiny_config();
  const auto ra = train(c, source(), target(), a.path());
  const auto rb = train(c, source(), target(), b.path());
  const auto log = slurp(ra.log);
  EXPECT_FALSE(log.empty());
  EXPECT_EQ(log, slurp(rb.log));
  auto ma = load_model(ra.final_checkpoint);
  auto mb = load_model(rb.final_checkpoint);
  const auto pa = ma.net->named_parameters();
  const auto pb = mb.net->named_parameters();
  for (const auto& item : pa) EXPECT_TRUE(disdet::testing::bitwise_equal(item.value(), pb[item.key()]));
}

TEST_F(TrainingTest, ResumedRunMatchesUninterruptedRun) {
  TempDir full("train_full"), resumed("train_resumed");
  auto c = disdet::testing::tiny_config();
  c.checkpoint_every = 3;
  const auto rf = train(c, source(), target(), full.path());
  ASSERT_EQ(rf.checkpoints.size(), 3u);  // 0, 3, 6
  const auto rr = train(c, source(), target(), resumed.path(), full / checkpoint_name(3));
  EXPECT_EQ(rr.final_checkpoint.filename(), checkpoint_name(6));

  auto mf = load_model(rf.final_checkpoint);
  auto mr = load_model(rr.final_checkpoint);
  EXPECT_EQ(mr.iteration, 6);
  const auto pf = mf.net->named_parameters();
  const auto pr = mr.net->named_parameters();
  for (const auto& item : pf) EXPECT_TRUE(disdet::testing::bitwise_equal(item.value(), pr[item.key()])) << item.key();

  // the resumed log holds exactly the second half of the full log
  std::istringstream full_log(slurp(rf.log));
  std::vector<std::string> lines;
  for (std::string l; std::getline(full_log, l);) lines.push_back(l);
  std::string tail;
  for (const auto& l : lines) {
    if (nlohmann::json::parse(l).at("iter").get<int64_t>() >= 3) tail += l + "\n";
  }
  EXPECT_EQ(slurp(rr.log), tail);
}

TEST_F(TrainingTest, CheckpointRestoresOptimizerAndEstimatorState) {
  TempDir out("train_ckpt");
  Trainer t(disdet::testing::tiny_config());
  for (int64_t it = 0; it < 2; ++it) t.run_iteration(batch(it));
  t.save_checkpoint(out / "c.pt");
  auto back = Trainer::from_checkpoint(out / "c.pt");
  EXPECT_EQ(back.iteration(), 2);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.mine_estimator(i).initialized(), t.mine_estimator(i).initialized());
    EXPECT_EQ(back.mine_estimator(i).log_moving_average(), t.mine_estimator(i).log_moving_average());
  }
  const auto r1 = t.run_iteration(batch(2));
  const auto r2 = back.run_iteration(batch(2));
  ASSERT_EQ(r1.size(), r2.size());
  for (std::size_t i = 0; i < r1.size(); ++i) EXPECT_EQ(r1[i].to_json(2), r2[i].to_json(2));
  EXPECT_THROW(Trainer::from_checkpoint(out / "missing.pt"), std::runtime_error);
}

TEST_F(TrainingTest, WithoutAdaptationTargetDataHasNoInfluence) {
  TempDir a("train_noadapt_a"), b("train_noadapt_b");
  auto c = disdet::testing::tiny_config();
  c.weights.focal = c.weights.mi = c.weights.relation = c.weights.reconstruction = 0.0;
  const auto ra = train(c, source(), target("tgt"), a.path());
  const auto rb = train(c, source(), target("tgt2"), b.path());
  EXPECT_EQ(slurp(ra.log), slurp(rb.log));
  auto ma = load_model(ra.final_checkpoint);
  auto mb = load_model(rb.final_checkpoint);
  const auto pb = mb.net->named_parameters();
  for (const auto& item : ma.net->named_parameters()) {
    EXPECT_TRUE(disdet::testing::bitwise_equal(item.value(), pb[item.key()])) << item.key();
  }
}

TEST_F(TrainingTest, LossLogCarriesStageTags) {
  TempDir out("train_tags");
  const auto r = train(disdet::testing::tiny_config(), source(), target(), out.path());
  std::istringstream log(slurp(r.log));
  std::vector<std::string> tags;
  for (std::string l; std::getline(log, l);) {
    const auto j = nlohmann::json::parse(l);
    if (j.at("iter") == 0) tags.push_back(j.at("stage"));
  }
  EXPECT_EQ(tags, (std::vector<std::string>{"fd", "fs", "fr"}));
}

TEST_F(TrainingTest, RejectsLabelsBeyondClassCount) {
  TempDir out("train_labels");
  auto c = disdet::testing::tiny_config();
  c.net.num_classes = 1;
  EXPECT_THROW(train(c, source(), target(), out.path()), std::invalid_argument);
}

TEST(BatchIndices, EpochsArePermutations) {
  std::vector<std::size_t> seen;
  for (int64_t it = 0; it < 5; ++it) {
    const auto idx = batch_indices(4, 1, it, 2, 10);
    ASSERT_EQ(idx.size(), 2u);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(batch_indices(4, 1, 7, 2, 10), batch_indices(4, 1, 7, 2, 10));
  EXPECT_NE(batch_indices(4, 1, 0, 5, 10), batch_indices(4, 2, 0, 5, 10));
  EXPECT_THROW(batch_indices(4, 1, 0, 2, 0), std::invalid_argument);
}

TEST(TrainConfigJson, RoundTrip) {
  auto c = disdet::testing::tiny_config();
  c.stages = {"fd", "fr"};
  c.weights.relation = 0.25;
  c.grl_lambda = 0.3;
  c.pixel_mean = {0.1, 0.2, 0.3};
  nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  nlohmann::json again = back;
  EXPECT_EQ(j, again);
  EXPECT_EQ(back.stages, c.stages);
  EXPECT_EQ(back.net.c1, 8);
}

TEST(TrainConfigJson, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(nlohmann::json({{"iteratons", 5}}).get<TrainConfig>(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"stages", {"fx"}}}).get<TrainConfig>(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"lr", -1.0}}).get<TrainConfig>(), std::invalid_argument);
  EXPECT_THROW(nlohmann::json({{"pixel_mean", {0.5}}}).get<TrainConfig>(), std::invalid_argument);
  EXPECT_EQ(nlohmann::json::object().get<TrainConfig>().iterations, TrainConfig{}.iterations);
}

TEST(TrainConfigJson, LoadsFromFile) {
  TempDir tmp("cfg");
  std::ofstream(tmp / "c.json") << R"({"iterations": 12, "net": {"c1": 4}})";
  const auto c = load_train_config(tmp / "c.json");
  EXPECT_EQ(c.iterations, 12);
  EXPECT_EQ(c.net.c1, 4);
  std::ofstream(tmp / "bad.json") << "{";
  EXPECT_THROW(load_train_config(tmp / "bad.json"), std::invalid_argument);
  EXPECT_THROW(load_train_config(tmp / "none.json"), std::runtime_error);
}
