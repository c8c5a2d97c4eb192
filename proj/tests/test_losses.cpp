#include <random>

#include <gtest/gtest.h>

#include "disdet/losses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace disdet;

namespace {

/// Central-difference gradient of a scalar function of one double tensor.
torch::Tensor numeric_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x,
                               double h = 1e-6) {
  auto g = torch::zeros_like(x);
  auto flat = x.detach().clone().reshape({-1});
  auto gf = g.view({-1});
  for (int64_t i = 0; i < flat.size(0); ++i) {
    auto plus = flat.clone();
    auto minus = flat.clone();
    plus[i] += h;
    minus[i] -= h;
    gf[i] = (f(plus.view_as(x)) - f(minus.view_as(x))).item<double>() / (2 * h);
  }
  return g;
}

double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0) {
  auto x = x0.detach().clone().requires_grad_(true);
  f(x).backward();
  auto numeric = numeric_gradient(f, x0);
  return ((x.grad() - numeric).norm() / (x.grad().norm() + numeric.norm() + 1e-12)).item<double>();
}

RoIFeatures rois(const torch::Tensor& t, Branch b = Branch::kInvariant) { return {t, b}; }

}  // namespace

// ---------------------------------------------------------------------------
// Focal loss

TEST(FocalLoss, HalfProbabilityWithoutFocusingIsLn2) {
  EXPECT_NEAR(focal_loss(0.5, {1.0, 0.0}), std::log(2.0), 1e-9);
}

TEST(FocalLoss, DefaultFocusingAtPointNine) {
  // 0.1^2 * -ln 0.9, evaluated by hand: 0.01 * 0.105360515657826 = 1.05360515657826e-3
  EXPECT_NEAR(focal_loss(0.9, {1.0, 2.0}), 1.05360515657826e-3, 1e-7);
}

TEST(FocalLoss, TensorAndScalarFormsAgree) {
  auto p = torch::tensor({0.1, 0.35, 0.9}, torch::kFloat64);
  const FocalConfig cfg{0.75, 2.0};
  const double expected = (focal_loss(0.1, cfg) + focal_loss(0.35, cfg) + focal_loss(0.9, cfg)) / 3.0;
  EXPECT_NEAR(focal_loss(p, cfg).item<double>(), expected, 1e-12);
}

TEST(FocalLoss, WithoutFocusingEqualsCrossEntropy) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
  for (int i = 0; i < 1000; ++i) {
    const double p = u(rng);
    EXPECT_NEAR(focal_loss(p, {1.0, 0.0}), -std::log(p), 1e-9);
  }
}

TEST(FocalLoss, DecreasesMonotonicallyTowardZero) {
  for (double gamma : {0.0, 1.0, 2.0, 5.0}) {
    double prev = INFINITY;
    for (int i = 1; i < 1000; ++i) {
      const double v = focal_loss(i / 1000.0, {1.0, gamma});
      EXPECT_LT(v, prev);
      prev = v;
    }
    EXPECT_LT(focal_loss(1.0 - 1e-9, {1.0, gamma}), 1e-6);
  }
}

TEST(FocalLoss, DomainLabelsSelectTheCorrectProbability) {
  auto p_target = torch::tensor({0.8}, torch::kFloat64);
  const FocalConfig cfg;
  EXPECT_NEAR(domain_focal_loss(p_target, Domain::kTarget, cfg).item<double>(), focal_loss(0.8, cfg), 1e-12);
  EXPECT_NEAR(domain_focal_loss(p_target, Domain::kSource, cfg).item<double>(), focal_loss(0.2, cfg), 1e-12);
}

TEST(FocalLoss, LogitFormMatchesProbabilityForm) {
  auto logits = torch::linspace(-6, 6, 25, torch::kFloat64);
  const FocalConfig cfg;
  for (auto d : {Domain::kSource, Domain::kTarget}) {
    EXPECT_NEAR(domain_focal_loss_from_logits(logits, d, cfg).item<double>(),
                domain_focal_loss(torch::sigmoid(logits), d, cfg).item<double>(), 1e-9);
  }
}

TEST(FocalLoss, LogitFormKeepsGradientWhenConfidentlyWrong) {
  auto logit = torch::tensor({40.0}, torch::kFloat64).requires_grad_(true);
  auto loss = domain_focal_loss_from_logits(logit, Domain::kSource, {});
  loss.backward();
  EXPECT_NEAR(loss.item<double>(), 40.0, 1e-6);
  EXPECT_GT(logit.grad().item<double>(), 0.5);
}

TEST(FocalLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(1);
  auto logits = torch::randn({6}, torch::kFloat64) * 2;
  auto f = [](const torch::Tensor& z) { return domain_focal_loss_from_logits(z, Domain::kTarget, {0.5, 2.0}); };
  EXPECT_LT(gradient_error(f, logits), 1e-4);
  auto p = torch::rand({6}, torch::kFloat64) * 0.9 + 0.05;
  auto g = [](const torch::Tensor& q) { return focal_loss(q, {1.0, 2.0}); };
  EXPECT_LT(gradient_error(g, p), 1e-4);
}

// ---------------------------------------------------------------------------
// Detection

TEST(DetectionLoss, PerfectPredictionApproachesZero) {
  ProposalSet props{torch::tensor({{0.0f, 0.0f, 10.0f, 10.0f}, {30.0f, 30.0f, 40.0f, 40.0f}}), torch::ones({2}),
                    torch::zeros({2}, torch::kLong)};
  const TruthPerImage truth{{{BoundingBox(0, 0, 10, 10), 1}}};
  DetectionOutput out{torch::tensor({{-50.0f, -50.0f, 50.0f, -50.0f}, {50.0f, -50.0f, -50.0f, -50.0f}}),
                      torch::zeros({2, 3, 4})};
  auto loss = detection_loss(out, props, truth);
  EXPECT_EQ(loss.num_foreground, 1);
  EXPECT_LT(loss.total.item<double>(), 1e-6);
}

TEST(DetectionLoss, UniformLogitsWithoutForegroundGiveLn4) {
  ProposalSet props{torch::tensor({{0.0f, 0.0f, 5.0f, 5.0f}, {10.0f, 10.0f, 20.0f, 20.0f}}), torch::ones({2}),
                    torch::zeros({2}, torch::kLong)};
  DetectionOutput out{torch::zeros({2, 4}), torch::randn({2, 3, 4})};
  auto loss = detection_loss(out, props, TruthPerImage{{}});
  EXPECT_EQ(loss.num_foreground, 0);
  EXPECT_NEAR(loss.total.item<double>(), std::log(4.0), 1e-6);
}

TEST(DetectionLoss, TwoProposalCaseMatchesTermByTermOracle) {
  // Proposal 0 overlaps the ground truth with IoU 81/129, proposal 1 is background.
  ProposalSet props{torch::tensor({{0.0, 0.0, 10.0, 10.0}, {20.0, 20.0, 30.0, 30.0}}, torch::kFloat64),
                    torch::ones({2}), torch::zeros({2}, torch::kLong)};
  const TruthPerImage truth{{{BoundingBox(1, 1, 11, 12), 2}}};
  auto logits = torch::tensor({{0.2, -0.4, 1.1, 0.3}, {0.7, 0.1, -0.2, 0.5}}, torch::kFloat64);
  auto deltas = torch::zeros({2, 3, 4}, torch::kFloat64);
  deltas[0][2] = torch::tensor({0.4, 1.0, -0.3, 2.5}, torch::kFloat64);
  auto loss = detection_loss({logits, deltas}, props, truth);

  auto ce = [](std::vector<double> z, int k) {
    double s = 0;
    for (double v : z) s += std::exp(v);
    return std::log(s) - z[static_cast<std::size_t>(k)];
  };
  const double classification = 0.5 * (ce({0.2, -0.4, 1.1, 0.3}, 3) + ce({0.7, 0.1, -0.2, 0.5}, 0));
  // targets with weights (10,10,5,5): centres (5,5) -> (6,6.5), sizes 10x10 -> 10x11
  const double t[4] = {10.0 * 0.1, 10.0 * 0.15, 5.0 * std::log(1.0), 5.0 * std::log(1.1)};
  const double d[4] = {0.4, 1.0, -0.3, 2.5};
  double smooth = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double e = std::abs(d[i] - t[i]);
    smooth += e < 1.0 ? 0.5 * e * e : e - 0.5;
  }
  EXPECT_EQ(loss.num_foreground, 1);
  EXPECT_NEAR(loss.classification.item<double>(), classification, 1e-9);
  EXPECT_NEAR(loss.regression.item<double>(), smooth / 2.0, 1e-9);
  EXPECT_NEAR(loss.total.item<double>(), classification + smooth / 2.0, 1e-9);
}

TEST(DetectionLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(2);
  ProposalSet props{torch::tensor({{0.0, 0.0, 10.0, 10.0}, {2.0, 1.0, 12.0, 12.0}, {20.0, 20.0, 30.0, 30.0}},
                                  torch::kFloat64),
                    torch::ones({3}), torch::zeros({3}, torch::kLong)};
  const TruthPerImage truth{{{BoundingBox(1, 1, 11, 12), 0}}};
  auto deltas = torch::randn({3, 3, 4}, torch::kFloat64) * 0.3;
  auto f = [&](const torch::Tensor& z) { return detection_loss({z, deltas}, props, truth).total; };
  EXPECT_LT(gradient_error(f, torch::randn({3, 4}, torch::kFloat64)), 1e-4);
  auto logits = torch::randn({3, 4}, torch::kFloat64);
  auto g = [&](const torch::Tensor& d) { return detection_loss({logits, d}, props, truth).total; };
  EXPECT_LT(gradient_error(g, deltas), 1e-4);
}

TEST(DetectionLoss, NoProposalsIsSkipped) {
  auto loss = detection_loss({torch::zeros({0, 4}), torch::zeros({0, 3, 4})}, ProposalSet::empty_set(),
                             TruthPerImage{{}});
  EXPECT_TRUE(loss.skipped);
}

// ---------------------------------------------------------------------------
// Mutual information

TEST(Mine, ConstantStatisticGivesZeroBound) {
  for (double c : {0.0, -3.0, 7.5}) {
    auto t = torch::full({16}, c, torch::kFloat64);
    EXPECT_EQ(mine_lower_bound(t, t).item<double>(), 0.0) << "c=" << c;
  }
}

TEST(Mine, ZeroStatisticNetworkEstimatesZero) {
  MiStatistic t(2, 2, 8);
  {
    torch::NoGradGuard guard;
    for (auto& p : t->parameters()) p.zero_();
  }
  MineEstimator mine;
  auto x = torch::randn({10, 2});
  auto z = torch::randn({10, 2});
  auto r = mine.estimate(t, make_mi_pairs(x, z, {9, 8, 7, 6, 5, 4, 3, 2, 1, 0}));
  EXPECT_EQ(r.value, 0.0);
}

TEST(Mine, BoundIgnoresMarginalOrder) {
  torch::manual_seed(4);
  auto tj = torch::randn({32}, torch::kFloat64);
  auto tm = torch::randn({32}, torch::kFloat64);
  auto perm = torch::randperm(32, torch::kLong);
  EXPECT_NEAR(mine_lower_bound(tj, tm).item<double>(), mine_lower_bound(tj, tm.index_select(0, perm)).item<double>(),
              1e-12);
}

TEST(Mine, MarginalPairsAreAPermutationOfZ) {
  auto x = torch::arange(4, torch::kFloat32).view({4, 1});
  auto z = torch::arange(10, 14, torch::kFloat32).view({4, 1});
  auto pairs = make_mi_pairs(x, z, {2, 0, 3, 1});
  EXPECT_TRUE(torch::equal(pairs.joint_z, z));
  EXPECT_TRUE(torch::equal(pairs.marginal_z.view({4}), torch::tensor({12.0f, 10.0f, 13.0f, 11.0f})));
  EXPECT_THROW(make_mi_pairs(x, z, {0, 1}), std::exception);
}

TEST(Mine, ObjectiveValueEqualsBoundAndGradientUsesMovingAverage) {
  torch::manual_seed(5);
  MiStatistic t(1, 1, 8);
  MineEstimator mine(0.9);
  auto [x, z] = oracle::gaussian_pairs(64, 0.5);
  std::vector<int64_t> perm(64);
  std::iota(perm.rbegin(), perm.rend(), 0);
  auto pairs = make_mi_pairs(x, z, perm);
  auto r = mine.estimate(t, pairs);
  EXPECT_NEAR(r.objective.item<double>(), r.value, 1e-6);
  EXPECT_TRUE(mine.initialized());
  const double ema = mine.log_moving_average();
  mine.estimate(t, pairs, /*update_average=*/false);
  EXPECT_EQ(mine.log_moving_average(), ema);
}

TEST(Mine, IndependentVariablesEstimateNearZero) {
  const double est = oracle::train_mine(0.0, 2000, 21);
  EXPECT_LE(std::abs(est), 0.05) << est;
}

TEST(Mine, CorrelatedGaussianMatchesAnalyticInformation) {
  const double est = oracle::train_mine(0.8, 5000, 22);
  EXPECT_NEAR(oracle::gaussian_mi(0.8), 0.5108256237659907, 1e-12);
  EXPECT_NEAR(est, oracle::gaussian_mi(0.8), 0.1) << est;
}

TEST(Mine, BoundGradientMatchesFiniteDifferences) {
  torch::manual_seed(6);
  auto tm = torch::randn({8}, torch::kFloat64);
  auto f = [&](const torch::Tensor& tj) { return mine_lower_bound(tj, tm); };
  EXPECT_LT(gradient_error(f, torch::randn({8}, torch::kFloat64)), 1e-4);
  auto tj = torch::randn({8}, torch::kFloat64);
  auto g = [&](const torch::Tensor& m) { return mine_lower_bound(tj, m); };
  EXPECT_LT(gradient_error(g, torch::randn({8}, torch::kFloat64)), 1e-4);
}

// ---------------------------------------------------------------------------
// Relations

TEST(Adjacency, SingleRowIsOne) {
  auto a = build_adjacency(torch::randn({1, 5}));
  EXPECT_EQ(a.sizes(), (std::vector<int64_t>{1, 1}));
  EXPECT_FLOAT_EQ(a.item<float>(), 1.0f);
}

TEST(Adjacency, RowsSumToOneOverRandomInputs) {
  torch::manual_seed(7);
  for (int i = 0; i < 1000; ++i) {
    const int64_t k = 1 + i % 9;
    auto a = build_adjacency(torch::randn({k, 6}, torch::kFloat64) * (1 + i % 4));
    EXPECT_LT((a.sum(1) - 1.0).abs().max().item<double>(), 1e-6);
  }
}

TEST(Adjacency, IdenticalInputRowsGiveIdenticalRows) {
  auto p = torch::randn({4, 3});
  p[2] = p[0];
  auto a = build_adjacency(p);
  EXPECT_TRUE(torch::allclose(a[0], a[2]));
}

TEST(RelationLoss, IdenticalBranchesGiveZero) {
  auto f = torch::randn({5, 4, 2, 2});
  auto loss = relation_consistency_loss(rois(f), rois(f.clone(), Branch::kBase), torch::tensor({0, 0, 1, 1, 1}));
  EXPECT_FALSE(loss.skipped);
  EXPECT_EQ(loss.value.item<double>(), 0.0);
}

TEST(RelationLoss, SingleProposalGivesZero) {
  auto loss = relation_consistency_loss(rois(torch::randn({1, 4, 2, 2})), rois(torch::randn({1, 4, 2, 2})),
                                        torch::tensor({0}));
  EXPECT_EQ(loss.value.item<double>(), 0.0);
}

TEST(RelationLoss, MatchesBruteForceOracle) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t k = 3, c = 4, s = 2;
    auto di = torch::empty({k, c, s, s}, torch::kFloat64);
    auto b = torch::empty({k, c, s, s}, torch::kFloat64);
    auto da = di.accessor<double, 4>();
    auto ba = b.accessor<double, 4>();
    std::vector<std::vector<double>> pd(k, std::vector<double>(c)), pb(k, std::vector<double>(c));
    for (int64_t i = 0; i < k; ++i)
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < s; ++y)
          for (int64_t x = 0; x < s; ++x) {
            da[i][ch][y][x] = n01(rng);
            ba[i][ch][y][x] = n01(rng);
            pd[i][ch] += da[i][ch][y][x] / (s * s);
            pb[i][ch] += ba[i][ch][y][x] / (s * s);
          }
    const double expected = oracle::relation_loss({pd}, {pb});
    auto got = relation_consistency_loss(rois(di), rois(b, Branch::kBase), torch::zeros({k}, torch::kLong));
    EXPECT_NEAR(got.value.item<double>(), expected, 1e-6);
  }
}

TEST(RelationLoss, AveragesOverImages) {
  torch::manual_seed(9);
  auto di = torch::randn({5, 3, 1, 1}, torch::kFloat64);
  auto b = torch::randn({5, 3, 1, 1}, torch::kFloat64);
  auto idx = torch::tensor({0, 0, 2, 2, 2}, torch::kLong);
  auto whole = relation_consistency_loss(rois(di), rois(b), idx).value.item<double>();
  auto first = relation_consistency_loss(rois(di.narrow(0, 0, 2)), rois(b.narrow(0, 0, 2)), idx.narrow(0, 0, 2));
  auto second = relation_consistency_loss(rois(di.narrow(0, 2, 3)), rois(b.narrow(0, 2, 3)), idx.narrow(0, 2, 3));
  EXPECT_NEAR(whole, 0.5 * (first.value.item<double>() + second.value.item<double>()), 1e-12);
}

TEST(RelationLoss, NonNegativeAndZeroOnlyForEqualAdjacencies) {
  torch::manual_seed(10);
  for (int i = 0; i < 200; ++i) {
    auto di = torch::randn({4, 3, 2, 2}, torch::kFloat64);
    auto b = torch::randn({4, 3, 2, 2}, torch::kFloat64);
    auto v = relation_consistency_loss(rois(di), rois(b), torch::zeros({4}, torch::kLong)).value.item<double>();
    EXPECT_GT(v, 0.0);
  }
}

TEST(RelationLoss, OnlyTheInvariantBranchReceivesGradient) {
  auto di = torch::randn({3, 2, 2, 2}, torch::kFloat64).requires_grad_(true);
  auto b = torch::randn({3, 2, 2, 2}, torch::kFloat64).requires_grad_(true);
  relation_consistency_loss(rois(di), rois(b), torch::zeros({3}, torch::kLong)).value.backward();
  EXPECT_TRUE(di.grad().defined());
  EXPECT_FALSE(b.grad().defined());
}

TEST(RelationLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(11);
  auto b = torch::randn({4, 3, 2, 2}, torch::kFloat64);
  auto idx = torch::tensor({0, 0, 0, 1}, torch::kLong);
  auto f = [&](const torch::Tensor& d) { return relation_consistency_loss(rois(d), rois(b), idx).value; };
  EXPECT_LT(gradient_error(f, torch::randn({4, 3, 2, 2}, torch::kFloat64)), 1e-4);
}

// ---------------------------------------------------------------------------
// Reconstruction

TEST(ReconstructionLoss, ExactCopyGivesZero) {
  auto a = torch::randn({3, 4, 2, 2});
  EXPECT_EQ(reconstruction_loss(rois(a, Branch::kReconstructed), rois(a.clone(), Branch::kBase)).value.item<double>(),
            0.0);
}

TEST(ReconstructionLoss, UnitOffsetGivesOne) {
  auto a = torch::randn({3, 4, 2, 2}, torch::kFloat64);
  EXPECT_NEAR(reconstruction_loss(rois(a + 1.0), rois(a)).value.item<double>(), 1.0, 1e-12);
}

TEST(ReconstructionLoss, MatchesElementwiseOracle) {
  torch::manual_seed(12);
  auto r = torch::randn({2, 3, 2, 2}, torch::kFloat64);
  auto b = torch::randn({2, 3, 2, 2}, torch::kFloat64);
  auto rf = r.reshape({-1});
  auto bf = b.reshape({-1});
  double sum = 0.0;
  for (int64_t i = 0; i < rf.size(0); ++i) {
    const double d = rf[i].item<double>() - bf[i].item<double>();
    sum += d * d;
  }
  EXPECT_NEAR(reconstruction_loss(rois(r), rois(b)).value.item<double>(), sum / rf.size(0), 1e-6);
  EXPECT_THROW(reconstruction_loss(rois(r), rois(b.narrow(0, 0, 1))), std::invalid_argument);
}

TEST(ReconstructionLoss, IdentityReconstructorWithEqualInputsGivesZero) {
  torch::manual_seed(13);
  const int64_t c = 5;
  Reconstructor rec(c);
  {
    torch::NoGradGuard guard;
    rec->conv()->weight.zero_();
    rec->conv()->bias.zero_();
    for (int64_t i = 0; i < c; ++i) rec->conv()->weight[i][i][0][0] = 1.0f;
  }
  auto a_b = torch::randn({4, c, 3, 3});
  auto a_ds = torch::randn({4, c, 3, 3});
  auto a_r = rec->forward(torch::cat({a_b, a_ds}, 1));
  EXPECT_EQ(reconstruction_loss(rois(a_r), rois(a_b)).value.item<double>(), 0.0);
}

TEST(ReconstructionLoss, GradientMatchesFiniteDifferences) {
  torch::manual_seed(14);
  auto b = torch::randn({2, 3, 2, 2}, torch::kFloat64);
  auto f = [&](const torch::Tensor& r) { return reconstruction_loss(rois(r), rois(b)).value; };
  EXPECT_LT(gradient_error(f, torch::randn({2, 3, 2, 2}, torch::kFloat64)), 1e-4);
}

// ---------------------------------------------------------------------------
// Stage composition

TEST(ComposeStage, ZeroTermsComposeToZero) {
  TermMap terms{{"det_b", torch::zeros({})}, {"focal_b1_s", torch::zeros({})}, {"focal_ds2_t", torch::zeros({})}};
  EXPECT_EQ(compose_stage_fd(terms, {}).item<double>(), 0.0);
  EXPECT_EQ(compose_stage_fs({{"mi1_s", torch::zeros({})}, {"rel_t", torch::zeros({})}}, {}).item<double>(), 0.0);
  EXPECT_EQ(compose_stage_fr({}, {}).item<double>(), 0.0);
}

TEST(ComposeStage, UnitWeightsSumTheReportedTerms) {
  TermMap terms{{"det_b", torch::tensor(0.5)},        {"det_di", torch::tensor(0.25)},
                {"rpn", torch::tensor(0.125)},        {"focal_b1_s", torch::tensor(0.3)},
                {"focal_ds1_t", torch::tensor(0.7)},  {"focal_b2_t", torch::tensor(0.1)}};
  LossReport report;
  for (const auto& [k, v] : terms) report.add(k, v.item<double>());
  EXPECT_NEAR(compose_stage_fd(terms, {}).item<double>(), report.total(), 1e-6);

  TermMap fs{{"det_di", torch::tensor(1.0)}, {"mi2_s", torch::tensor(0.2)}, {"rel_s", torch::tensor(0.4)}};
  LossWeights w;
  w.relation = 0.5;
  w.mi = 2.0;
  EXPECT_NEAR(compose_stage_fs(fs, w).item<double>(), 1.0 + 0.4 + 0.2, 1e-6);
  EXPECT_NEAR(compose_stage_fr({{"recon_s", torch::tensor(0.3)}, {"recon_t", torch::tensor(0.2)}}, {}).item<double>(),
              0.5, 1e-6);
}

TEST(ComposeStage, RejectsTermsOfOtherStages) {
  EXPECT_THROW(compose_stage_fd({{"rel_s", torch::tensor(1.0)}}, {}), std::invalid_argument);
  EXPECT_THROW(compose_stage_fs({{"det_b", torch::tensor(1.0)}}, {}), std::invalid_argument);
  EXPECT_THROW(compose_stage_fr({{"mi1_s", torch::tensor(1.0)}}, {}), std::invalid_argument);
}

TEST(LossReport, JsonCarriesStageAndTerms) {
  LossReport r;
  r.stage = "fs";
  r.add("rel_s", 0.5);
  r.skipped.push_back("mi2_t");
  const auto j = r.to_json(12);
  EXPECT_EQ(j.at("iter"), 12);
  EXPECT_EQ(j.at("stage"), "fs");
  EXPECT_EQ(j.at("rel_s"), 0.5);
  EXPECT_EQ(j.at("skipped"), nlohmann::json::array({"mi2_t"}));
  EXPECT_EQ(r.get("rel_s"), 0.5);
  EXPECT_FALSE(r.get("rel_t").has_value());
}
