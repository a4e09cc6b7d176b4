#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cdlab/dbm.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/evaluation.hpp"
#include "cdlab/ops.hpp"
#include "planted.hpp"

using namespace cdlab;
using cdlab::testing::make_planted_task;
using cdlab::testing::PlantedBackend;
using cdlab::testing::PlantedTask;

namespace {

const PlantedTask& task() {
  static const PlantedTask t = make_planted_task(11);
  return t;
}

std::vector<InterventionExample> self_pairs(const std::vector<InterventionExample>& records) {
  std::vector<InterventionExample> out;
  for (const auto& r : records) {
    if (r.base_city == r.source_city) out.push_back(r);
  }
  return out;
}

// Squared norm of the projection of unit vector u onto span of the selected
// rows of R.
double captured(const Tensor& R, const Selection& sel, const std::vector<double>& u) {
  double total = 0.0;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (!sel[i]) continue;
    double c = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) c += R.at(i, k) * u[k];
    total += c * c;
  }
  return total;
}

std::vector<double> row(const Tensor& m, std::size_t r) {
  std::vector<double> v(m.cols());
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = m.at(r, c);
  return v;
}

}  // namespace

TEST(Interpolate, ZeroMaskIsTheMidpoint) {
  const auto fb = Tensor::vector({1.0, -2.0, 4.0}), fs = Tensor::vector({3.0, 2.0, 0.0});
  for (double T : {10.0, 1.0, 0.1}) {
    const auto f = interpolate(fb, fs, Tensor::zeros({3}), T);
    EXPECT_EQ(f.values(), (std::vector<double>{2.0, 0.0, 2.0}));
  }
}

TEST(Interpolate, SaturatedMaskTakesSource) {
  const auto fb = Tensor::vector({1.0, -2.0, 4.0}), fs = Tensor::vector({3.0, 2.0, 0.5});
  for (double T : {10.0, 5.0, 0.1}) {
    const auto f = interpolate(fb, fs, Tensor::filled({3}, 1000.0), T);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(f.values()[i], fs.values()[i], 1e-12);
    const auto g = interpolate(fb, fs, Tensor::filled({3}, -1000.0), T);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g.values()[i], fb.values()[i], 1e-12);
  }
}

TEST(Interpolate, IdenticalEndpointsAreExact) {
  const auto f = Tensor::vector({0.1, -7.3, 1e-9, 123.456});
  for (double mv : {-3.0, 0.0, 0.7, 40.0}) {
    EXPECT_EQ(interpolate(f, f, Tensor::filled({4}, mv), 0.37).values(), f.values());
  }
}

TEST(Interpolate, Batched) {
  const auto fb = Tensor::matrix(2, 2, {0, 0, 1, 1}), fs = Tensor::matrix(2, 2, {4, 4, 5, 5});
  const auto f = interpolate(fb, fs, Tensor::vector({-1000.0, 1000.0}), 1.0);
  EXPECT_EQ(f.values(), (std::vector<double>{0, 4, 1, 5}));
}

TEST(Interpolate, Mismatches) {
  EXPECT_THROW(interpolate(Tensor::zeros({3}), Tensor::zeros({4}), Tensor::zeros({3}), 1.0),
               DimensionError);
  EXPECT_THROW(interpolate(Tensor::zeros({3}), Tensor::zeros({3}), Tensor::zeros({2}), 1.0),
               DimensionError);
  EXPECT_THROW(interpolate(Tensor::zeros({3}), Tensor::zeros({3}), Tensor::zeros({3}), 0.0),
               ContractError);
}

TEST(Binarize, SignRule) {
  EXPECT_EQ(binarize(Tensor::vector({-1.0, 2.0, 0.0})), (Selection{false, true, false}));
  EXPECT_EQ(binarize(Tensor::filled({4}, -0.5)), Selection(4, false));
  EXPECT_EQ(binarize(Tensor::vector({1e-300})), Selection{true});
}

TEST(Temperature, LinearFromStartToEnd) {
  MaskParams mp;
  mp.epochs = 20;
  EXPECT_DOUBLE_EQ(mp.temperature(0), 10.0);
  EXPECT_DOUBLE_EQ(mp.temperature(19), 0.1);
  for (std::size_t e = 1; e < 20; ++e) {
    EXPECT_LT(mp.temperature(e), mp.temperature(e - 1));
    EXPECT_NEAR(mp.temperature(e - 1) - mp.temperature(e), 9.9 / 19.0, 1e-12);
  }
  mp.epochs = 1;
  EXPECT_DOUBLE_EQ(mp.temperature(0), 0.1);
}

TEST(Snapping, FractionOutsideBand) {
  MaskParams mp;
  mp.m = Tensor::vector({-5.0, -0.001, 0.0, 0.002, 3.0});
  // at T = 0.1: σ(-50), σ(-0.01), 0.5, σ(0.02), σ(30)
  EXPECT_DOUBLE_EQ(snapped_fraction(mp, 0.1), 2.0 / 5.0);
  EXPECT_DOUBLE_EQ(snapped_fraction(mp, 1e-6), 4.0 / 5.0);
}

TEST(InterventionLoss, SelfPairsGiveBaseModelLossAndNoMaskGradient) {
  const auto& t = task();
  PlantedBackend be(t);
  const auto records = self_pairs(t.split.train);
  ASSERT_FALSE(records.empty());
  for (const auto& space : {FeatureSpace::neurons(8), FeatureSpace::das(OrthParam::random(8, 3))}) {
    Tensor m = Tensor::vector({0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.1, -3.0}, true);
    MaskParams mp;
    mp.m = m;
    const auto loss = intervention_loss(be, space.bind(), mp.gate(2.0), records);

    double ce = 0.0;
    for (const auto& r : records) {
      const auto lg = be.clean_logits(r.base_city, r.queried);
      ce += ops::softmax_cross_entropy(lg, r.label).item();
    }
    ce /= static_cast<double>(records.size());
    EXPECT_NEAR(loss.item(), ce, 1e-9);

    backward(loss);
    for (double g : m.grad()) EXPECT_NEAR(g, 0.0, 1e-10);
  }
}

TEST(InterventionLoss, EmptyBatchThrows) {
  PlantedBackend be(task());
  EXPECT_THROW(intervention_loss(be, FeatureSpace::neurons(8).bind(), Tensor::zeros({8}), {}),
               ContractError);
}

TEST(TrainMask, NeuronMaskOnPlantedTask) {
  const auto& t = task();
  PlantedBackend be(t);
  DbmTrainConfig cfg;
  cfg.target = Attribute::Country;
  auto space = FeatureSpace::neurons(8);
  std::vector<MaskCurvePoint> seen;
  const auto r = train_mask(be, space, t.split.train, t.split.val, cfg,
                            [&](const MaskCurvePoint& p) { seen.push_back(p); });
  ASSERT_EQ(r.curve.size(), 20u);
  ASSERT_EQ(seen.size(), 20u);
  EXPECT_DOUBLE_EQ(r.curve.front().temperature, 10.0);
  EXPECT_DOUBLE_EQ(r.curve.back().temperature, 0.1);
  EXPECT_GE(snapped_fraction(r.mask, r.mask.t_end), 0.95);
  EXPECT_FALSE(r.mask.m.requires_grad());
  for (const auto& p : r.curve) {
    EXPECT_TRUE(std::isfinite(p.train_loss));
    EXPECT_GE(p.val_accuracy, 0.0);
    EXPECT_LE(p.val_accuracy, 1.0);
  }
}

TEST(TrainMask, JointDasRecoversThePlantedSubspace) {
  const auto& t = task();
  PlantedBackend be(t);
  for (auto target : kAttributes) {
    DbmTrainConfig cfg;
    cfg.target = target;
    cfg.joint_das = true;
    auto space = FeatureSpace::das(OrthParam::random(8, 7));
    const auto before = space.orth().A.values();
    const auto r = train_mask(be, space, t.split.train, t.split.val, cfg);
    EXPECT_NE(space.orth().A.values(), before);
    EXPECT_FALSE(space.orth().A.requires_grad());
    const auto R = space.orth().rotation();
    EXPECT_LE(orthogonality_error(R), 1e-5);

    const auto sel = binarize(r.mask);
    const auto s = evaluate_selection(be, space, sel, t.split.test, target);
    EXPECT_GE(s.disentangle(), 95.0);

    // The selected rotated coordinates span the planted block of the target
    // and next to nothing of the other attribute's block.
    const auto planted = cdlab::testing::planted_selection(target);
    const auto other = cdlab::testing::planted_selection(
        target == Attribute::Country ? Attribute::Continent : Attribute::Country);
    for (std::size_t i = 0; i < 8; ++i) {
      const double c = captured(R, sel, row(t.r_true, i));
      if (planted[i]) EXPECT_GT(c, 0.95) << attribute_name(target) << " dim " << i;
      if (other[i]) EXPECT_LT(c, 0.05) << attribute_name(target) << " dim " << i;
    }
  }
}

TEST(TrainMask, SoftAndHardAgreeAfterAnnealing) {
  const auto& t = task();
  PlantedBackend be(t);
  DbmTrainConfig cfg;
  cfg.target = Attribute::Continent;
  cfg.joint_das = true;
  auto space = FeatureSpace::das(OrthParam::random(8, 7));
  const auto r = train_mask(be, space, t.split.train, t.split.val, cfg);
  const auto records = filter_target(t.split.test, cfg.target);
  NoGradGuard ng;
  const auto soft = predict(be, space.bind(), r.mask.gate(r.mask.t_end), records);
  const auto hard = predict(be, space.bind(), selection_gate(binarize(r.mask)), records);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < soft.size(); ++i) differ += soft[i] != hard[i];
  EXPECT_LE(static_cast<double>(differ), 0.02 * static_cast<double>(records.size()));
}

TEST(TrainMask, SameSeedSameMask) {
  const auto& t = task();
  PlantedBackend be(t);
  DbmTrainConfig cfg;
  cfg.epochs = 3;
  auto a_space = FeatureSpace::neurons(8), b_space = FeatureSpace::neurons(8);
  const auto a = train_mask(be, a_space, t.split.train, {}, cfg);
  const auto b = train_mask(be, b_space, t.split.train, {}, cfg);
  EXPECT_EQ(a.mask.m.values(), b.mask.m.values());
  EXPECT_TRUE(std::isnan(a.curve.back().val_accuracy));
  cfg.seed = 99;
  auto c_space = FeatureSpace::neurons(8);
  EXPECT_NE(train_mask(be, c_space, t.split.train, {}, cfg).mask.m.values(), a.mask.m.values());
}

TEST(TrainMask, ConfigErrors) {
  const auto& t = task();
  PlantedBackend be(t);
  auto space = FeatureSpace::neurons(8);
  DbmTrainConfig cfg;
  cfg.joint_das = true;
  EXPECT_THROW(train_mask(be, space, t.split.train, {}, cfg), ConfigError);
  cfg = {};
  cfg.t_end = cfg.t_start;
  EXPECT_THROW(train_mask(be, space, t.split.train, {}, cfg), ConfigError);
  cfg = {};
  cfg.batch = 0;
  EXPECT_THROW(train_mask(be, space, t.split.train, {}, cfg), ConfigError);
  cfg = {};
  EXPECT_THROW(train_mask(be, space, {}, {}, cfg), ContractError);
  cfg.mask_init = std::nan("");
  EXPECT_THROW(train_mask(be, space, t.split.train, {}, cfg), TrainingError);
}

TEST(MaskFiles, RoundTripWithRotation) {
  MaskParams mp;
  mp.m = Tensor::vector({0.5, -0.25, 3.0});
  mp.t_start = 8.0;
  mp.t_end = 0.2;
  mp.epochs = 7;
  const auto das = OrthParam::random(3, 4);
  const auto dir = std::filesystem::temp_directory_path() / "cdlab_test_dbm";
  std::filesystem::create_directories(dir);
  write_mask(dir / "m.ckpt", mp, {{"layer", "1"}, {"space", "das"}}, &das);
  const auto back = read_mask(dir / "m.ckpt");
  EXPECT_EQ(back.mask.m.values(), mp.m.values());
  EXPECT_EQ(back.mask.t_start, 8.0);
  EXPECT_EQ(back.mask.t_end, 0.2);
  EXPECT_EQ(back.mask.epochs, 7u);
  ASSERT_TRUE(back.das.has_value());
  EXPECT_EQ(back.das->A.values(), das.A.values());
  EXPECT_EQ(back.meta, (MetaList{{"layer", "1"}, {"space", "das"}}));

  write_mask(dir / "n.ckpt", mp, {}, nullptr);
  EXPECT_FALSE(read_mask(dir / "n.ckpt").das.has_value());
}

TEST(MaskFiles, IndexText) {
  EXPECT_EQ(mask_index_text({false, true, false, true}, "layer 1\nspace neurons"),
            "# layer 1\n# space neurons\n# selected 2 of 4\n1\n3\n");
}
