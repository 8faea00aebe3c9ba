#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowdistill/pipeline.hpp"
#include "testutil.hpp"

using namespace flowdistill;
using testutil::max_abs_diff;

namespace {

PipelineConfig tiny_cfg() {
  PipelineConfig c;
  c.epochs = 6;
  c.learning_rate = 2e-3;
  c.batch_size = 2;
  c.seed = 11;
  c.height = 32;
  c.width = 32;
  c.dataset_size = 4;
  c.afwm.base_width = 8;
  c.afwm.corr_radius = 1;
  c.gm.depth = 2;
  c.gm.base_width = 8;
  return c;
}

// Training is deterministic, so one shared run feeds several cases.
const TeacherResult& shared_teacher() {
  static const TeacherResult r = train_teacher<float>(tiny_cfg());
  return r;
}

const StudentResult& shared_student() {
  static const StudentResult r = [] {
    PipelineConfig c = tiny_cfg();
    c.distill = DistillMode::kAdjustable;
    return train_student<float>(c, shared_teacher().checkpoint);
  }();
  return r;
}

bool entries_identical(const Checkpoint& a, const Checkpoint& b) {
  if (a.entries().size() != b.entries().size()) return false;
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || ea.shape != eb.shape || ea.values != eb.values)
      return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("teacher training descends, logs components, and is reproducible") {
  const auto& r = shared_teacher();
  REQUIRE(r.history.size() == 6);
  for (const auto& row : r.history) {
    CHECK(std::isfinite(row.total));
    CHECK(row.l1 >= 0.0);
    CHECK(row.perceptual >= 0.0);
    CHECK(row.smooth > 0.0);  // charbonnier floor keeps this strictly positive
    const double recombined = row.l1 * 1.0 + row.perceptual * 0.2 + row.smooth * 6.0;
    CHECK(row.total == doctest::Approx(recombined).epsilon(1e-3));
  }
  CHECK(r.history.back().total < r.history.front().total);

  const auto again = train_teacher<float>(tiny_cfg());
  CHECK(entries_identical(r.checkpoint, again.checkpoint));

  CHECK(r.checkpoint.meta_str("phase") == "teacher");
  CHECK(r.checkpoint.meta_int("afwm.cond_channels") == 12);
  CHECK(r.checkpoint.meta_int("gm.in_channels") == 15);
  CHECK(r.checkpoint.meta_int("image.height") == 32);
}

TEST_CASE("zero epochs returns the untouched initialization") {
  PipelineConfig cfg = tiny_cfg();
  cfg.epochs = 0;
  const auto r = train_teacher<float>(cfg);
  CHECK(r.history.empty());

  Rng rng(derive_seed(cfg.seed, seedstream::kTeacherInit));
  Afwm<float> afwm(cfg.afwm, rng);
  TryOnGenerator<float> gm(teacher_gm_config(cfg), rng);
  for (const auto& [name, t] : combined_params(afwm, gm)) {
    const auto* e = r.checkpoint.find(name);
    REQUIRE(e != nullptr);
    REQUIRE(e->values.size() == t.size());
    bool same = true;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (e->values[i] != t.data()[i]) same = false;
    CAPTURE(name);
    CHECK(same);
  }
}

TEST_CASE("tutor outputs are deterministic, detached, and visibly dressed") {
  const PipelineConfig cfg = tiny_cfg();
  Rng scratch(0);
  Afwm<float> ta(cfg.afwm, scratch);
  TryOnGenerator<float> tg(teacher_gm_config(cfg), scratch);
  auto tp = combined_params(ta, tg);
  shared_teacher().checkpoint.load_params_into(tp);

  const auto ds = synth_dataset<float>(cfg.dataset_size,
                                       derive_seed(cfg.seed, seedstream::kDataset),
                                       cfg.synth());
  const auto u1 = generate_tutor(ta, tg, ds[0]);
  const auto u2 = generate_tutor(ta, tg, ds[0]);
  CHECK(max_abs_diff(u1, u2) == 0.0);
  CHECK(!u1.requires_grad());
  REQUIRE(u1.shape() == ds[0].person.shape());

  // The tutor dressed the person in the alternate garment, so the rendering
  // must differ from the photo on the garment region.
  double diff = 0.0;
  const int h = u1.dim(2), w = u1.dim(3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (ds[0].garment_mask.at(0, 0, y, x) != 1.0f) continue;
      for (int c = 0; c < 3; ++c)
        diff = std::max(diff, std::abs(static_cast<double>(u1.at(0, c, y, x)) -
                                       ds[0].person.at(0, c, y, x)));
    }
  CHECK(diff > 1e-4);
}

TEST_CASE("student training logs gates, stays finite, and is reproducible") {
  const auto& r = shared_student();
  REQUIRE(r.history.size() == 6);
  for (const auto& row : r.history) {
    CHECK(std::isfinite(row.total));
    CHECK(row.kd >= 0.0);
    CHECK(row.gate_rate >= 0.0);
    CHECK(row.gate_rate <= 1.0);
    const double recombined =
        row.l1 * 1.0 + row.perceptual * 0.2 + row.smooth * 6.0 + row.kd;
    CHECK(row.total == doctest::Approx(recombined).epsilon(1e-3));
  }

  CHECK(r.checkpoint.meta_str("phase") == "student");
  CHECK(r.checkpoint.meta_str("distill") == "adjustable");
  CHECK(r.checkpoint.meta_int("afwm.cond_channels") == 3);
  CHECK(r.checkpoint.meta_int("gm.in_channels") == 6);

  PipelineConfig cfg = tiny_cfg();
  cfg.distill = DistillMode::kAdjustable;
  const auto again = train_student<float>(cfg, shared_teacher().checkpoint);
  CHECK(entries_identical(r.checkpoint, again.checkpoint));
}

TEST_CASE("distillation modes: off zeroes the extra term, fixed always distills") {
  PipelineConfig cfg = tiny_cfg();
  cfg.epochs = 2;

  cfg.distill = DistillMode::kOff;
  const auto off = train_student<float>(cfg, shared_teacher().checkpoint);
  for (const auto& row : off.history) {
    CHECK(row.kd == 0.0);
    CHECK(row.gate_rate == 0.0);
  }
  CHECK(off.checkpoint.meta_str("distill") == "off");

  cfg.distill = DistillMode::kFixed;
  const auto fixed = train_student<float>(cfg, shared_teacher().checkpoint);
  for (const auto& row : fixed.history) {
    CHECK(row.kd > 0.0);
    CHECK(row.gate_rate == 1.0);
  }
  CHECK(!entries_identical(off.checkpoint, fixed.checkpoint));

  // Against a competent tutor every gate stays open early on, making the
  // adjustable mode coincide with fixed. An untrained tutor is beatable, so
  // there the gate must actually close sometimes.
  PipelineConfig hard = tiny_cfg();
  hard.epochs = 0;
  const auto raw_teacher = train_teacher<float>(hard);
  hard.epochs = 4;
  hard.corruption_prob = 1.0;
  hard.distill = DistillMode::kAdjustable;
  const auto adj = train_student<float>(hard, raw_teacher.checkpoint);
  hard.distill = DistillMode::kFixed;
  const auto hard_fixed = train_student<float>(hard, raw_teacher.checkpoint);
  CHECK(adj.history.back().gate_rate < 1.0);
  CHECK(!entries_identical(adj.checkpoint, hard_fixed.checkpoint));
}

TEST_CASE("no gradient ever reaches the frozen tutor") {
  const PipelineConfig cfg = tiny_cfg();
  Rng scratch(0);
  Afwm<float> ta(cfg.afwm, scratch);
  TryOnGenerator<float> tg(teacher_gm_config(cfg), scratch);
  auto tutor_params = combined_params(ta, tg);
  shared_teacher().checkpoint.load_params_into(tutor_params);
  for (auto& [name, p] : tutor_params) p.set_requires_grad(false);

  Rng srng(derive_seed(cfg.seed, seedstream::kStudentInit));
  Afwm<float> sa(student_afwm_config(cfg), srng);
  TryOnGenerator<float> sg(student_gm_config(cfg), srng);

  const auto ds = synth_dataset<float>(2, derive_seed(cfg.seed, seedstream::kDataset),
                                       cfg.synth());
  const auto sig = tutor_signals(ta, tg, ds[0]);
  CHECK(!sig.tutor_image.requires_grad());
  CHECK(!sig.generated.requires_grad());

  auto run = run_try_on(sa, sg, ds[0].clothes, sig.tutor_image);
  auto gate = gate_psi(sig.generated, run.image, ds[0].person);
  std::fill(gate.psi.begin(), gate.psi.end(), 1);
  auto hint = hint_loss(sig.cond_features, run.pyramids.condition, gate);
  auto pred = pred_loss(sig.flows, run.cascade, gate);
  auto total = l1_loss(run.image, ds[0].person) +
               kd_loss(hint, pred, cfg.weights) +
               second_order_smooth(run.cascade);
  total.backward();

  for (const auto& [name, p] : tutor_params) {
    CAPTURE(name);
    CHECK(!p.has_grad());
  }
  int live = 0;
  for (const auto& [name, p] : combined_params(sa, sg))
    if (p.has_grad()) ++live;
  CHECK(live > 0);
}

TEST_CASE("incompatible teacher checkpoints are refused") {
  PipelineConfig cfg = tiny_cfg();
  cfg.afwm.base_width = 16;
  CHECK_THROWS_WITH_AS(train_student<float>(cfg, shared_teacher().checkpoint),
                       doctest::Contains("afwm.base_width"), std::invalid_argument);

  PipelineConfig ok = tiny_cfg();
  CHECK_THROWS_WITH_AS(train_student<float>(ok, shared_student().checkpoint),
                       doctest::Contains("not a teacher"), std::invalid_argument);
}

TEST_CASE("inference is deterministic and checks its inputs") {
  const PipelineConfig cfg = tiny_cfg();
  const auto ds = synth_dataset<float>(2, derive_seed(cfg.seed, seedstream::kEval),
                                       cfg.synth());
  const auto a = infer<float>(shared_student().checkpoint, ds[0].person, ds[0].clothes);
  const auto b = infer<float>(shared_student().checkpoint, ds[0].person, ds[0].clothes);
  REQUIRE(a.image.shape() == ds[0].person.shape());
  REQUIRE(a.warped.shape() == ds[0].person.shape());
  CHECK(max_abs_diff(a.image, b.image) == 0.0);
  CHECK(max_abs_diff(a.warped, b.warped) == 0.0);
  for (float v : a.image.data()) {
    CHECK(v > -1.0f);
    CHECK(v < 1.0f);
  }
  CHECK(!a.image.requires_grad());

  // A teacher checkpoint wants the 12-channel stack, not a photo.
  CHECK_THROWS_WITH_AS(
      infer<float>(shared_teacher().checkpoint, ds[0].person, ds[0].clothes),
      doctest::Contains("channels"), std::invalid_argument);

  const double e1 = eval_student<float>(shared_student().checkpoint, cfg, 2);
  const double e2 = eval_student<float>(shared_student().checkpoint, cfg, 2);
  CHECK(e1 == e2);
  CHECK(e1 > 0.0);
  CHECK(std::isfinite(e1));
}

}  // TEST_SUITE
