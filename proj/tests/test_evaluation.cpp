#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cdlab/dbm.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/evaluation.hpp"
#include "cdlab/intervention.hpp"
#include "cdlab/ops.hpp"
#include "cdlab/rng.hpp"
#include "fig1b.hpp"
#include "planted.hpp"
#include "tiny_lm.hpp"

using namespace cdlab;
using cdlab::testing::PlantedBackend;
using cdlab::testing::PlantedTask;

namespace {

const PlantedTask& planted() {
  static const PlantedTask t = cdlab::testing::make_planted_task(11);
  return t;
}

struct TinySetup {
  const cdlab::testing::TinyLm& lm;
  LmBackend backend;
  DataSplit split;
  std::shared_ptr<const Sae> sae;
};

const TinySetup& tiny() {
  static const TinySetup s = [] {
    const auto& t = cdlab::testing::tiny_lm();
    const auto d = t.model.config().d_model;
    return TinySetup{t, LmBackend(t.model, t.world, 0),
                     split_examples(generate_examples(t.kept), 2),
                     std::make_shared<Sae>(init_sae(d, 4 * d, SaeVariant::Standard, 0, 0.3, 5))};
  }();
  return s;
}

std::vector<FeatureSpace> tiny_spaces() {
  const auto d = tiny().lm.model.config().d_model;
  return {FeatureSpace::neurons(d), FeatureSpace::das(OrthParam::random(d, 3)),
          FeatureSpace::sae(tiny().sae)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.numel(), b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

Selection random_selection(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Selection s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = rng.uniform() < 0.5;
  return s;
}

// Logits of the base prompt with h patched in, computed by a full forward
// pass rather than the backend's cached suffix.
Tensor full_patch(TokenId city, Attribute queried, const Tensor& h) {
  const auto& t = tiny().lm;
  const auto pp = build_prompt(t.world.vocab, city);
  const auto& prompt = queried == Attribute::Country ? pp.country_prompt : pp.continent_prompt;
  return t.model.forward_with_patch(prompt, {0, query_position(prompt)}, h);
}

}  // namespace

TEST(LmBackendHook, HiddenAndPatchAgreeWithTheModel) {
  const auto& s = tiny();
  for (const auto& f : s.lm.kept) {
    for (auto q : kAttributes) {
      const auto pp = build_prompt(s.lm.world.vocab, f.city);
      const auto& prompt = q == Attribute::Country ? pp.country_prompt : pp.continent_prompt;
      const auto read = s.lm.model.forward_with_read(prompt, {0, query_position(prompt)});
      EXPECT_LE(max_abs_diff(s.backend.hidden(f.city, q), read.hidden), 1e-12);
      EXPECT_LE(max_abs_diff(s.backend.clean_logits(f.city, q), read.logits), 1e-9);
      EXPECT_EQ(s.backend.answer(f.city, q), f.attribute(q));
    }
  }
}

TEST(Interchange, SelfPairEqualsReconstructedPatch) {
  const auto& s = tiny();
  for (const auto& space : tiny_spaces()) {
    for (std::uint64_t seed : {1u, 2u}) {
      const auto sel = random_selection(space.feature_dim(), seed);
      for (const auto& f : s.lm.kept) {
        const auto q = seed == 1 ? Attribute::Country : Attribute::Continent;
        const auto got = interchange(s.backend, space, sel, f.city, f.city, q);
        const auto want = full_patch(f.city, q, space.round_trip(s.backend.hidden(f.city, q)));
        ASSERT_LE(max_abs_diff(got, want), 1e-6) << space.name();
      }
    }
  }
}

TEST(Interchange, EmptySelectionIsCleanForExactSpaces) {
  const auto& s = tiny();
  const auto spaces = tiny_spaces();
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& space = spaces[k];
    const Selection none(space.feature_dim(), false);
    for (const auto& base : s.lm.kept) {
      const auto& src = s.lm.kept[(&base - s.lm.kept.data() + 5) % s.lm.kept.size()];
      for (auto q : kAttributes) {
        ASSERT_LE(max_abs_diff(interchange(s.backend, space, none, base.city, src.city, q),
                               s.backend.clean_logits(base.city, q)),
                  1e-6)
            << space.name();
      }
    }
  }
}

TEST(Interchange, EmptySelectionInSaeSpaceIsTheReconstruction) {
  const auto& s = tiny();
  const auto space = FeatureSpace::sae(s.sae);
  const Selection none(space.feature_dim(), false);
  const auto& base = s.lm.kept[0];
  const auto& src = s.lm.kept[3];
  const auto got = interchange(s.backend, space, none, base.city, src.city, Attribute::Country);
  const auto recon = full_patch(base.city, Attribute::Country,
                                s.sae->reconstruct(s.backend.hidden(base.city, Attribute::Country)));
  EXPECT_LE(max_abs_diff(got, recon), 1e-6);
  EXPECT_GT(max_abs_diff(got, s.backend.clean_logits(base.city, Attribute::Country)), 1e-6);
}

TEST(Interchange, FullNeuronPatchMovesTheAnswerToTheSource) {
  const auto& s = tiny();
  const auto space = FeatureSpace::neurons(s.backend.d_model());
  const Selection all(space.feature_dim(), true);
  std::size_t moved = 0, total = 0;
  for (const auto& b : s.lm.kept) {
    for (const auto& src : s.lm.kept) {
      if (src.country == b.country) continue;
      ++total;
      moved += argmax(interchange(s.backend, space, all, b.city, src.city, Attribute::Country)) ==
               src.country;
    }
  }
  EXPECT_GE(static_cast<double>(moved), 0.9 * static_cast<double>(total));
}

TEST(Interchange, ErrorRestorationMakesSaeEmptySelectionClean) {
  const auto& s = tiny();
  const auto space = FeatureSpace::sae(s.sae);
  InterchangeOptions opt;
  opt.error_restoration = true;
  const Selection none(space.feature_dim(), false);
  const auto& b = s.lm.kept[1];
  EXPECT_LE(max_abs_diff(interchange(s.backend, space, none, b.city, s.lm.kept[4].city,
                                     Attribute::Continent, opt),
                         s.backend.clean_logits(b.city, Attribute::Continent)),
            1e-6);
}

TEST(Interchange, SelectionLengthMustMatch) {
  const auto& s = tiny();
  const auto space = FeatureSpace::neurons(s.backend.d_model());
  const auto& c = s.lm.kept[0].city;
  EXPECT_THROW(interchange(s.backend, space, Selection(3, true), c, c, Attribute::Country),
               ContractError);
  EXPECT_THROW(evaluate_selection(s.backend, space, Selection(3, true), s.split.test,
                                  Attribute::Country),
               ContractError);
}

TEST(Scoring, DisentangleIsTheMeanAndSymmetric) {
  EXPECT_DOUBLE_EQ(disentangle_score(46, 96), 71.0);
  EXPECT_DOUBLE_EQ(disentangle_score(93, 94), 93.5);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const double a = 100 * rng.uniform(), b = 100 * rng.uniform();
    EXPECT_EQ(disentangle_score(a, b), disentangle_score(b, a));
  }
}

TEST(Scoring, DisplayRoundsHalfUp) {
  EXPECT_EQ(display_round(93.5), 94);
  EXPECT_EQ(display_round(42.5), 43);
  EXPECT_EQ(display_round(59.5), 60);
  EXPECT_EQ(display_round(71.0), 71);
  EXPECT_EQ(display_round(0.49), 0);
  EXPECT_EQ(display_round(99.999), 100);
}

TEST(Scoring, PublishedLayerOnePairs) {
  for (const auto& c : cdlab::testing::published_layer1()) {
    const bool country = c.target == Attribute::Country;
    const double intervened = country ? c.country_acc : c.continent_acc;
    const double preserved = country ? c.continent_acc : c.country_acc;
    const auto fx = cdlab::testing::fixture_for(intervened, preserved, c.target);
    const auto sides = score_sides(fx.predictions, fx.records);
    EXPECT_DOUBLE_EQ(sides.intervened, intervened);
    EXPECT_DOUBLE_EQ(sides.preserved, preserved);
    EXPECT_LE(std::abs(sides.disentangle() - static_cast<double>(c.printed_disentangle)), 0.5)
        << c.space << " " << attribute_name(c.target);
  }
}

TEST(Scoring, SidesNeedBothHalves) {
  auto fx = cdlab::testing::fixture_for(50, 50, Attribute::Country);
  fx.predictions.pop_back();
  EXPECT_THROW(score_sides(fx.predictions, fx.records), ContractError);
  fx = cdlab::testing::fixture_for(50, 50, Attribute::Country);
  fx.records.resize(100);
  fx.predictions.resize(100);
  EXPECT_THROW(score_sides(fx.predictions, fx.records), ContractError);
}

TEST(Partition, PublishedNeuronColumn) {
  Selection sel(100, false);
  for (std::size_t i = 0; i < 89; ++i) sel[i] = true;
  const auto p = partition_from_activity(std::vector<bool>(100, true), sel);
  EXPECT_DOUBLE_EQ(p.inactive, 0.0);
  EXPECT_DOUBLE_EQ(p.intervened, 0.89);
  EXPECT_NEAR(p.active_nonintervened, 0.11, 1e-12);
}

TEST(Partition, NothingActiveNothingSelected) {
  const auto p = partition_from_activity(std::vector<bool>(7, false), Selection(7, false));
  EXPECT_EQ(p.inactive, 1.0);
  EXPECT_EQ(p.intervened, 0.0);
  EXPECT_EQ(p.active_nonintervened, 0.0);
}

TEST(Partition, SelectedFeaturesAreNeverInactive) {
  const auto p = partition_from_activity({false, false, true, true}, {true, false, false, true});
  EXPECT_DOUBLE_EQ(p.inactive, 0.25);
  EXPECT_DOUBLE_EQ(p.intervened, 0.5);
  EXPECT_DOUBLE_EQ(p.active_nonintervened, 0.25);
}

TEST(Partition, AlwaysSumsToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + rng.below(700);
    std::vector<bool> active(n);
    Selection sel(n);
    for (std::size_t i = 0; i < n; ++i) {
      active[i] = rng.uniform() < 0.3;
      sel[i] = rng.uniform() < 0.1;
    }
    const auto p = partition_from_activity(active, sel);
    ASSERT_NEAR(p.sum(), 1.0, 1e-6);
    for (double v : {p.inactive, p.intervened, p.active_nonintervened}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_THROW(partition_from_activity({true}, {true, false}), ContractError);
}

TEST(Partition, DenseSpacesHaveNoInactiveFeatures) {
  const auto& t = planted();
  PlantedBackend be(t);
  for (const auto& space : {FeatureSpace::neurons(8), FeatureSpace::das(OrthParam::random(8, 1))}) {
    const auto p = sparsity_partition(be, space, Selection(8, false), t.split.test);
    EXPECT_EQ(p.inactive, 0.0);
    EXPECT_EQ(p.active_nonintervened, 1.0);
  }
  // An SAE whose encoder bias keeps every feature off.
  auto sae = std::make_shared<Sae>(init_sae(8, 32, SaeVariant::Standard, 0, 0.1, 2));
  sae->b_e = Tensor::filled({32}, -1e6);
  Selection sel(32, false);
  sel[5] = true;
  const auto p = sparsity_partition(be, FeatureSpace::sae(sae), sel, t.split.test);
  EXPECT_DOUBLE_EQ(p.intervened, 1.0 / 32.0);
  EXPECT_DOUBLE_EQ(p.inactive, 31.0 / 32.0);
}

TEST(Reconstruction, ExactSpacesLoseNothing) {
  const auto& t = planted();
  PlantedBackend be(t);
  const auto prompts = base_prompts(t.split.test);
  EXPECT_EQ(prompts.size(), 2 * t.world.facts.size());
  const auto n = reconstruction_report(be, FeatureSpace::neurons(8), prompts);
  EXPECT_EQ(n.loss, 0.0);
  EXPECT_EQ(n.knowledge, 100.0);
  EXPECT_EQ(n.n_prompts, prompts.size());
  const auto d = reconstruction_report(be, FeatureSpace::das(OrthParam::random(8, 4)), prompts);
  EXPECT_LE(d.loss, 1e-9);
  EXPECT_EQ(d.knowledge, 100.0);
}

TEST(Reconstruction, LossIsTheSaeMseTerm) {
  const auto& t = planted();
  PlantedBackend be(t);
  auto sae = std::make_shared<Sae>(init_sae(8, 32, SaeVariant::Standard, 0, 0.1, 7));
  const auto prompts = base_prompts(t.split.test);
  std::vector<double> rows;
  for (const auto& [city, q] : prompts) {
    const auto h = be.hidden(city, q);
    rows.insert(rows.end(), h.values().begin(), h.values().end());
  }
  const auto n = prompts.size();
  const auto corpus = matrix_corpus(Tensor::matrix(n, 8, std::move(rows)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const auto report = reconstruction_report(be, FeatureSpace::sae(sae), prompts);
  EXPECT_NEAR(report.loss, sae_loss(*sae, nullptr, corpus, idx).mse.item(), 1e-12);
  EXPECT_GT(report.loss, 0.0);
}

TEST(Reconstruction, TrainedSaeOnTheToyModel) {
  const auto& s = tiny();
  SaeTrainConfig cfg;
  cfg.dict_mult = 4;
  cfg.epochs = 100;
  const auto corpus = build_activation_corpus(s.lm.model, s.lm.world, 0);
  auto sae = std::make_shared<Sae>(train_sae(cfg, corpus));
  const auto r = reconstruction_report(s.backend, FeatureSpace::sae(sae), base_prompts(s.split.test));
  EXPECT_GT(r.loss, 0.0);
  EXPECT_GE(r.knowledge, 80.0);
}

TEST(EmptyBaseline, NeuronsMatchTheEnumeratedLabels) {
  const auto& t = planted();
  PlantedBackend be(t);
  for (auto target : kAttributes) {
    // With nothing swapped the model answers for the base city, so an
    // intervened record only counts when the source shares the attribute.
    std::size_t n_int = 0, hit_int = 0;
    for (const auto& r : filter_target(t.split.test, target)) {
      if (!r.changes_output()) continue;
      ++n_int;
      hit_int += be.answer(r.base_city, r.queried) == r.label;
    }
    const double want = 0.5 * (100.0 * static_cast<double>(hit_int) / static_cast<double>(n_int) + 100.0);
    EXPECT_NEAR(empty_intervention_baseline(be, FeatureSpace::neurons(8), t.split.test, target), want,
                1e-9);
  }
}

TEST(EmptyBaseline, SelfPairsAlwaysScore) {
  const auto& t = planted();
  PlantedBackend be(t);
  auto sae = std::make_shared<Sae>(init_sae(8, 32, SaeVariant::Standard, 0, 0.1, 7));
  std::vector<InterventionExample> self;
  for (const auto& r : t.split.test) {
    if (r.base_city == r.source_city) self.push_back(r);
  }
  for (const auto& space : {FeatureSpace::neurons(8), FeatureSpace::das(OrthParam::random(8, 2))}) {
    const auto recs = filter_target(self, Attribute::Country);
    const auto preds = predict(be, space.bind(), selection_gate(Selection(8, false)), recs);
    EXPECT_EQ(label_accuracy(preds, recs), 1.0);
  }
  // Lossy reconstruction can only lower the baseline here.
  const auto sae_space = FeatureSpace::sae(sae);
  const auto recon = reconstruction_report(be, sae_space, base_prompts(t.split.test));
  ASSERT_LT(recon.knowledge, 100.0);
  EXPECT_LE(empty_intervention_baseline(be, sae_space, t.split.test, Attribute::Country),
            empty_intervention_baseline(be, FeatureSpace::neurons(8), t.split.test, Attribute::Country));
}

TEST(PlantedOracle, TrueRotationWithPlantedMaskIsPerfect) {
  const auto& t = planted();
  PlantedBackend be(t);
  // DAS with R = R_true has the planted blocks as coordinates. Cayley only
  // reaches det +1, so flip a noise row of R_true if needed.
  Eigen::Matrix<double, 8, 8, Eigen::RowMajor> r(t.r_true.values().data());
  if (r.determinant() < 0) r.row(7) *= -1.0;
  const auto R = Tensor::matrix(8, 8, std::vector<double>(r.data(), r.data() + 64));
  // R = (I - S)(I + S)^-1  <=>  S = (I + R)^-1 (I - R)
  const auto I = Tensor::eye(8);
  const auto space = FeatureSpace::das(OrthParam{ops::solve(ops::add(I, R), ops::sub(I, R))});
  ASSERT_LE(max_abs_diff(space.orth().rotation(), R), 1e-9);
  for (auto target : kAttributes) {
    const auto sides = evaluate_selection(be, space, cdlab::testing::planted_selection(target),
                                          t.split.test, target);
    EXPECT_DOUBLE_EQ(sides.intervened, 100.0);
    EXPECT_DOUBLE_EQ(sides.preserved, 100.0);
  }
}

TEST(PlantedOracle, FullPatchDominatesLearnedNeuronMasks) {
  const auto& t = planted();
  PlantedBackend be(t);
  for (auto target : kAttributes) {
    auto space = FeatureSpace::neurons(8);
    DbmTrainConfig cfg;
    cfg.target = target;
    const auto mask = train_mask(be, space, t.split.train, t.split.val, cfg);
    const auto learned = evaluate_selection(be, space, binarize(mask.mask), t.split.test, target);
    const auto full = evaluate_selection(be, space, Selection(8, true), t.split.test, target);
    EXPECT_GE(full.intervened, learned.intervened);
    EXPECT_EQ(full.intervened, 100.0);
  }
}

TEST(EvaluateCell, FieldsAreConsistent) {
  const auto& t = planted();
  PlantedBackend be(t);
  const auto space = FeatureSpace::neurons(8);
  const auto sel = cdlab::testing::planted_selection(Attribute::Continent);
  const auto r = evaluate_cell(be, space, sel, t.split.test, Attribute::Continent, 3);
  EXPECT_EQ(r.layer, 3u);
  EXPECT_EQ(r.space, "neurons");
  EXPECT_EQ(r.target, Attribute::Continent);
  EXPECT_DOUBLE_EQ(r.disentangle, 0.5 * (r.intervened_acc + r.preserved_acc));
  EXPECT_NEAR(r.inactive_frac + r.intervened_frac + r.active_nonintervened_frac, 1.0, 1e-6);
  EXPECT_DOUBLE_EQ(r.intervened_frac, 2.0 / 8.0);
  EXPECT_EQ(r.recon_loss, 0.0);
  EXPECT_EQ(r.recon_knowledge, 100.0);
  EXPECT_EQ(r.n_records, filter_target(t.split.test, Attribute::Continent).size());
  EXPECT_DOUBLE_EQ(r.empty_baseline,
                   empty_intervention_baseline(be, space, t.split.test, Attribute::Continent));
  EXPECT_THROW(evaluate_cell(be, space, sel, {}, Attribute::Continent, 3), ContractError);
}

TEST(ReportFiles, JsonlRoundTripIsExact) {
  EvalReport a;
  a.layer = 2;
  a.space = "sae:e2e_ds";
  a.target = Attribute::Continent;
  a.intervened_acc = 100.0 / 3.0;
  a.preserved_acc = 0.1 + 0.2;
  a.disentangle = disentangle_score(a.intervened_acc, a.preserved_acc);
  a.inactive_frac = 0.977;
  a.intervened_frac = 1.0 / 512.0;
  a.active_nonintervened_frac = 1.0 - a.inactive_frac - a.intervened_frac;
  a.recon_loss = 2245.123456789;
  a.recon_knowledge = 67.0;
  a.empty_baseline = 1e-300;
  a.n_records = 1280;
  EvalReport b = a;
  b.space = "neurons";
  b.target = Attribute::Country;
  const auto text = reports_to_jsonl({a, b});
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  const auto back = reports_from_jsonl(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], a);
  EXPECT_EQ(back[1], b);
  EXPECT_EQ(reports_to_jsonl(back), text);
  EXPECT_THROW(reports_from_jsonl("{\"layer\": 1}\n"), FormatError);
  EXPECT_THROW(reports_from_jsonl("not json\n"), FormatError);
}

TEST(ReportFiles, SweepMarksAbsentCells) {
  EvalReport r;
  r.layer = 0;
  r.space = "das";
  r.target = Attribute::Country;
  r.disentangle = 93.5;
  r.empty_baseline = 50.25;
  const auto tsv = sweep_tsv({r}, {{1, "sae:e2e_ds", Attribute::Country}, {0, "das", Attribute::Country}});
  EXPECT_EQ(tsv,
            "layer\tspace\tattr\tdisentangle\tbaseline\n"
            "0\tdas\tcountry\t93.5\t50.25\n"
            "1\tsae:e2e_ds\tcountry\tabsent\tabsent\n");
}

TEST(ReportFiles, LayerTableShowsRoundedValues) {
  std::vector<EvalReport> reports;
  for (const auto& c : cdlab::testing::published_layer1()) {
    if (c.space != "neurons" && c.space != "das") continue;
    EvalReport r;
    r.layer = 1;
    r.space = c.space;
    r.target = c.target;
    const bool country = c.target == Attribute::Country;
    r.intervened_acc = country ? c.country_acc : c.continent_acc;
    r.preserved_acc = country ? c.continent_acc : c.country_acc;
    r.disentangle = disentangle_score(r.intervened_acc, r.preserved_acc);
    r.intervened_frac = c.intervened;
    r.active_nonintervened_frac = 1.0 - c.intervened;
    r.recon_knowledge = 100.0;
    reports.push_back(r);
  }
  const auto table = render_layer_table(reports, 1, {"neurons", "das", "sae:topk"});
  EXPECT_NE(table.find("Layer 1"), std::string::npos);
  EXPECT_NE(table.find("Country-Intervened Continent-Preserved"), std::string::npos);
  EXPECT_NE(table.find("Continent-Intervened Country-Preserved"), std::string::npos);
  // neurons 71 and das 93.5 -> 94 in the country block, a dash for the missing SAE
  const auto pos = table.find("Disentangle Score");
  ASSERT_NE(pos, std::string::npos);
  const auto line = table.substr(pos, table.find('\n', pos) - pos);
  EXPECT_NE(line.find("71"), std::string::npos);
  EXPECT_NE(line.find("94"), std::string::npos);
  EXPECT_NE(line.find("-"), std::string::npos);
  EXPECT_NE(table.find("0.890"), std::string::npos);
  EXPECT_EQ(render_layer_table(reports, 1, {"neurons"}), render_layer_table(reports, 1, {"neurons"}));
}
