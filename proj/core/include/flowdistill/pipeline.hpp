#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowdistill/afwm.hpp"
#include "flowdistill/checkpoint.hpp"
#include "flowdistill/generator.hpp"
#include "flowdistill/losses.hpp"
#include "flowdistill/optim.hpp"
#include "flowdistill/synth.hpp"

namespace flowdistill {

enum class DistillMode { kOff, kFixed, kAdjustable };

inline const char* to_string(DistillMode m) {
  switch (m) {
    case DistillMode::kOff: return "off";
    case DistillMode::kFixed: return "fixed";
    default: return "adjustable";
  }
}

inline DistillMode parse_distill_mode(const std::string& s) {
  if (s == "off") return DistillMode::kOff;
  if (s == "fixed") return DistillMode::kFixed;
  if (s == "adjustable") return DistillMode::kAdjustable;
  throw std::invalid_argument("unknown distillation mode '" + s +
                              "' (expected off, fixed, or adjustable)");
}

// Everything a training run needs. The parser-based branch consumes the
// 12-channel conditioning stack; the parser-free student consumes a plain
// image, so its configs are derived rather than stored.
struct PipelineConfig {
  int epochs = 30;
  double learning_rate = 2e-3;
  int batch_size = 1;  // singles maximize optimizer steps per pass at this scale
  std::uint64_t seed = 1;
  int height = 64;
  int width = 48;
  int dataset_size = 16;
  double corruption_prob = 0.0;
  DistillMode distill = DistillMode::kAdjustable;
  LossWeights weights;
  // Conditioning width stays 12 for the parser-based branch; gm.in_channels
  // is derived from the inputs, never read. Width 16 is the desk default:
  // enough capacity for the synthetic sets at a single-core training budget.
  AfwmConfig afwm{.levels = 3, .base_width = 16};
  GmConfig gm{.in_channels = 12, .depth = 3, .base_width = 16};

  SynthConfig synth() const {
    SynthConfig s;
    s.height = height;
    s.width = width;
    s.corruption_prob = corruption_prob;
    return s;
  }

  void validate() const {
    check(epochs >= 0, "pipeline: epochs must be non-negative");
    check(std::isfinite(learning_rate) && learning_rate > 0.0,
          "pipeline: learning rate must be positive");
    check(batch_size >= 1, "pipeline: batch size must be positive");
    check(dataset_size >= 1, "pipeline: dataset size must be positive");
    synth().validate();
    afwm.validate();
    const int div = 1 << std::max(afwm.levels, gm.depth);
    check(height % div == 0 && width % div == 0,
          "pipeline: image size " + std::to_string(height) + "x" +
              std::to_string(width) + " must be divisible by " + std::to_string(div));
  }
};

inline GmConfig teacher_gm_config(const PipelineConfig& cfg) {
  GmConfig g = cfg.gm;
  g.in_channels = cfg.afwm.clothes_channels + cfg.afwm.cond_channels;
  return g;
}

// The student swaps the parsing stack for a plain 3-channel image.
inline AfwmConfig student_afwm_config(const PipelineConfig& cfg) {
  AfwmConfig a = cfg.afwm;
  a.cond_channels = 3;
  return a;
}

inline GmConfig student_gm_config(const PipelineConfig& cfg) {
  GmConfig g = cfg.gm;
  g.in_channels = cfg.afwm.clothes_channels + 3;
  return g;
}

struct TeacherEpoch {
  int epoch = 0;
  double l1 = 0.0, perceptual = 0.0, smooth = 0.0, total = 0.0;
};

struct StudentEpoch {
  int epoch = 0;
  double l1 = 0.0, perceptual = 0.0, smooth = 0.0, kd = 0.0;
  double gate_rate = 0.0;  // fraction of sample slots whose distillation was on
  double total = 0.0;
};

struct TeacherResult {
  Checkpoint checkpoint;
  std::vector<TeacherEpoch> history;
};

struct StudentResult {
  Checkpoint checkpoint;
  std::vector<StudentEpoch> history;
};

namespace seedstream {
// Sub-streams derived from the run seed; the constants just keep them apart.
inline constexpr std::uint64_t kDataset = 101;
inline constexpr std::uint64_t kTeacherInit = 102;
inline constexpr std::uint64_t kStudentInit = 103;
inline constexpr std::uint64_t kPerceptual = 104;
inline constexpr std::uint64_t kEpochOrder = 105;
inline constexpr std::uint64_t kEval = 106;
}  // namespace seedstream

template <typename T>
double scalar_value(const Tensor<T>& t) {
  return static_cast<double>(t.data()[0]);
}

inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[i], idx[static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1))]);
  return idx;
}

template <typename T>
ParamMap<T> combined_params(const Afwm<T>& afwm, const TryOnGenerator<T>& gm) {
  ParamMap<T> p = afwm.params();
  auto g = gm.params();
  p.insert(p.end(), g.begin(), g.end());
  return p;
}

template <typename T>
std::vector<Tensor<T>> param_values(const ParamMap<T>& m) {
  std::vector<Tensor<T>> v;
  v.reserve(m.size());
  for (const auto& kv : m) v.push_back(kv.second);
  return v;
}

// One full try-on pass: flow estimation, warping, generation.
template <typename T>
struct TryOnOutputs {
  PyramidPair<T> pyramids;
  FlowCascade<T> cascade;
  Tensor<T> warped;
  Tensor<T> image;
};

template <typename T>
TryOnOutputs<T> run_try_on(const Afwm<T>& afwm, const TryOnGenerator<T>& gm,
                           const Tensor<T>& clothes, const Tensor<T>& condition) {
  TryOnOutputs<T> o;
  o.pyramids = afwm.extract_pyramids(clothes, condition);
  o.cascade = afwm.estimate_flows(o.pyramids);
  o.warped = warp_clothes(clothes, o.cascade);
  o.image = gm.forward(concat_channels(o.warped, condition));
  return o;
}

template <typename T>
Checkpoint make_checkpoint(const std::string& phase, const PipelineConfig& cfg,
                           const AfwmConfig& acfg, const GmConfig& gcfg,
                           const ParamMap<T>& params) {
  Checkpoint ck;
  ck.meta["phase"] = phase;
  ck.meta["seed"] = std::to_string(cfg.seed);
  ck.meta["image.height"] = std::to_string(cfg.height);
  ck.meta["image.width"] = std::to_string(cfg.width);
  ck.meta["afwm.levels"] = std::to_string(acfg.levels);
  ck.meta["afwm.base_width"] = std::to_string(acfg.base_width);
  ck.meta["afwm.corr_radius"] = std::to_string(acfg.corr_radius);
  ck.meta["afwm.clothes_channels"] = std::to_string(acfg.clothes_channels);
  ck.meta["afwm.cond_channels"] = std::to_string(acfg.cond_channels);
  ck.meta["gm.in_channels"] = std::to_string(gcfg.in_channels);
  ck.meta["gm.depth"] = std::to_string(gcfg.depth);
  ck.meta["gm.base_width"] = std::to_string(gcfg.base_width);
  ck.meta["gm.out_channels"] = std::to_string(gcfg.out_channels);
  ck.add_params(params);
  return ck;
}

// Trains the parser-based warm/generate pair jointly: the generated image is
// scored against the worn photo and the flow cascade is kept smooth.
template <typename T>
TeacherResult train_teacher(const PipelineConfig& cfg) {
  cfg.validate();
  auto dataset = synth_dataset<T>(cfg.dataset_size,
                                  derive_seed(cfg.seed, seedstream::kDataset),
                                  cfg.synth());
  Rng init_rng(derive_seed(cfg.seed, seedstream::kTeacherInit));
  Afwm<T> afwm(cfg.afwm, init_rng);
  TryOnGenerator<T> gm(teacher_gm_config(cfg), init_rng);
  Rng percep_rng(derive_seed(cfg.seed, seedstream::kPerceptual));
  PerceptualExtractor<T> extractor(percep_rng, 3);

  auto params = combined_params(afwm, gm);
  Adam<T> opt(param_values(params), T(cfg.learning_rate));

  TeacherResult out;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(T(decayed_lr(cfg.learning_rate, epoch, cfg.epochs)));
    Rng order_rng(derive_seed(derive_seed(cfg.seed, seedstream::kEpochOrder),
                              static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled_indices(cfg.dataset_size, order_rng);

    TeacherEpoch row;
    row.epoch = epoch;
    int steps = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<Tensor<T>> pc, pcond, pt;
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = b; k < end; ++k) {
        const auto& s = dataset[order[k]];
        pc.push_back(s.clothes);
        pcond.push_back(person_representation(s));
        pt.push_back(s.person);
      }
      auto clothes = stack_batch<T>(pc);
      auto cond = stack_batch<T>(pcond);
      auto target = stack_batch<T>(pt);

      auto run = run_try_on(afwm, gm, clothes, cond);
      auto l1 = l1_loss(run.image, target);
      auto perc = perceptual_loss(run.image, target, extractor);
      auto smooth = second_order_smooth(run.cascade);
      auto total = scale(l1, T(cfg.weights.lambda_l1)) +
                   scale(perc, T(cfg.weights.lambda_perceptual)) +
                   scale(smooth, T(cfg.weights.lambda_smooth));
      const double tv = scalar_value(total);
      if (!std::isfinite(tv))
        throw std::runtime_error("train_teacher: loss is not finite at epoch " +
                                 std::to_string(epoch) + " step " +
                                 std::to_string(steps));
      opt.zero_grad();
      total.backward();
      opt.step();

      row.l1 += scalar_value(l1);
      row.perceptual += scalar_value(perc);
      row.smooth += scalar_value(smooth);
      row.total += tv;
      ++steps;
    }
    row.l1 /= steps;
    row.perceptual /= steps;
    row.smooth /= steps;
    row.total /= steps;
    out.history.push_back(row);
  }

  out.checkpoint = make_checkpoint("teacher", cfg, cfg.afwm, teacher_gm_config(cfg), params);
  return out;
}

// Renders the tutor's try-on of the sample's alternate garment: the image the
// student later receives as its "person wearing something else" input.
template <typename T>
Tensor<T> generate_tutor(const Afwm<T>& afwm, const TryOnGenerator<T>& gm,
                         const TryOnSample<T>& sample) {
  NoGradGuard guard;
  auto cond = person_representation(sample);
  return run_try_on(afwm, gm, sample.alt_clothes, cond).image;
}

// Per-sample distillation signals, all detached: the tutor image consumed by
// the student, plus the tutor's own-garment generation, flow cascade, and
// condition-branch features that the distillation losses compare against.
template <typename T>
struct TutorSignals {
  Tensor<T> tutor_image;
  Tensor<T> generated;
  FlowCascade<T> flows;
  std::vector<Tensor<T>> cond_features;
};

template <typename T>
TutorSignals<T> tutor_signals(const Afwm<T>& afwm, const TryOnGenerator<T>& gm,
                              const TryOnSample<T>& sample) {
  NoGradGuard guard;
  TutorSignals<T> sig;
  auto cond = person_representation(sample);
  sig.tutor_image = run_try_on(afwm, gm, sample.alt_clothes, cond).image;
  auto own = run_try_on(afwm, gm, sample.clothes, cond);
  sig.generated = own.image;
  sig.flows = own.cascade;
  sig.cond_features = own.pyramids.condition;
  return sig;
}

inline void require_teacher_compatible(const Checkpoint& ck, const PipelineConfig& cfg) {
  check(ck.meta_str("phase") == "teacher",
        "train_student: checkpoint phase '" + ck.meta_str("phase") +
            "' is not a teacher");
  const GmConfig tg = teacher_gm_config(cfg);
  const std::pair<const char*, int> expected[] = {
      {"afwm.levels", cfg.afwm.levels},
      {"afwm.base_width", cfg.afwm.base_width},
      {"afwm.corr_radius", cfg.afwm.corr_radius},
      {"afwm.clothes_channels", cfg.afwm.clothes_channels},
      {"afwm.cond_channels", cfg.afwm.cond_channels},
      {"gm.in_channels", tg.in_channels},
      {"gm.depth", tg.depth},
      {"gm.base_width", tg.base_width},
      {"gm.out_channels", tg.out_channels},
  };
  for (const auto& [key, want] : expected) {
    const int got = ck.meta_int(key);
    check(got == want, "train_student: teacher checkpoint has " + std::string(key) +
                           "=" + std::to_string(got) + ", configured value is " +
                           std::to_string(want));
  }
}

// Distills the frozen tutor into a parser-free student. The student sees only
// the tutor's rendering (a plain image) plus the garment; its target is the
// real photo, optionally helped by gated feature/flow distillation.
template <typename T>
StudentResult train_student(const PipelineConfig& cfg, const Checkpoint& teacher) {
  cfg.validate();
  require_teacher_compatible(teacher, cfg);
  auto dataset = synth_dataset<T>(cfg.dataset_size,
                                  derive_seed(cfg.seed, seedstream::kDataset),
                                  cfg.synth());

  // The tutor's weights come from the checkpoint; the init seed is irrelevant.
  Rng scratch_rng(0);
  Afwm<T> tutor_afwm(cfg.afwm, scratch_rng);
  TryOnGenerator<T> tutor_gm(teacher_gm_config(cfg), scratch_rng);
  auto tutor_params = combined_params(tutor_afwm, tutor_gm);
  teacher.load_params_into(tutor_params);
  for (auto& kv : tutor_params) kv.second.set_requires_grad(false);

  Rng student_rng(derive_seed(cfg.seed, seedstream::kStudentInit));
  Afwm<T> st_afwm(student_afwm_config(cfg), student_rng);
  TryOnGenerator<T> st_gm(student_gm_config(cfg), student_rng);
  Rng percep_rng(derive_seed(cfg.seed, seedstream::kPerceptual));
  PerceptualExtractor<T> extractor(percep_rng, 3);

  // All tutor outputs are fixed by the frozen weights, so compute them once.
  std::vector<TutorSignals<T>> signals;
  signals.reserve(dataset.size());
  for (const auto& s : dataset) signals.push_back(tutor_signals(tutor_afwm, tutor_gm, s));

  auto params = combined_params(st_afwm, st_gm);
  Adam<T> opt(param_values(params), T(cfg.learning_rate));

  StudentResult out;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(T(decayed_lr(cfg.learning_rate, epoch, cfg.epochs)));
    Rng order_rng(derive_seed(derive_seed(cfg.seed, seedstream::kEpochOrder),
                              static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled_indices(cfg.dataset_size, order_rng);

    StudentEpoch row;
    row.epoch = epoch;
    int steps = 0;
    long gates_on = 0, gate_slots = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<Tensor<T>> pc, pcond, pt, pgen;
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = b; k < end; ++k) {
        const auto& s = dataset[order[k]];
        const auto& sig = signals[order[k]];
        pc.push_back(s.clothes);
        pcond.push_back(sig.tutor_image);
        pt.push_back(s.person);
        pgen.push_back(sig.generated);
      }
      auto clothes = stack_batch<T>(pc);
      auto cond = stack_batch<T>(pcond);
      auto target = stack_batch<T>(pt);

      auto run = run_try_on(st_afwm, st_gm, clothes, cond);
      auto l1 = l1_loss(run.image, target);
      auto perc = perceptual_loss(run.image, target, extractor);
      auto smooth = second_order_smooth(run.cascade);
      auto total = scale(l1, T(cfg.weights.lambda_l1)) +
                   scale(perc, T(cfg.weights.lambda_perceptual)) +
                   scale(smooth, T(cfg.weights.lambda_smooth));

      if (cfg.distill != DistillMode::kOff) {
        auto gate = gate_psi(stack_batch<T>(pgen), run.image, target);
        if (cfg.distill == DistillMode::kFixed)
          std::fill(gate.psi.begin(), gate.psi.end(), 1);
        FlowCascade<T> tflows;
        std::vector<Tensor<T>> tfeats;
        const std::size_t levels = signals.front().flows.flows.size();
        for (std::size_t l = 0; l < levels; ++l) {
          std::vector<Tensor<T>> fl, ft;
          for (std::size_t k = b; k < end; ++k) {
            fl.push_back(signals[order[k]].flows.flows[l]);
            ft.push_back(signals[order[k]].cond_features[l]);
          }
          tflows.flows.push_back(stack_batch<T>(fl));
          tfeats.push_back(stack_batch<T>(ft));
        }
        auto hint = hint_loss(tfeats, run.pyramids.condition, gate);
        auto pred = pred_loss(tflows, run.cascade, gate);
        auto kd = kd_loss(hint, pred, cfg.weights);
        total = total + kd;
        row.kd += scalar_value(kd);
        for (int v : gate.psi) gates_on += v;
        gate_slots += static_cast<long>(gate.psi.size());
      } else {
        gate_slots += static_cast<long>(end - b);
      }

      const double tv = scalar_value(total);
      if (!std::isfinite(tv))
        throw std::runtime_error("train_student: loss is not finite at epoch " +
                                 std::to_string(epoch) + " step " +
                                 std::to_string(steps));
      opt.zero_grad();
      total.backward();
      opt.step();

      row.l1 += scalar_value(l1);
      row.perceptual += scalar_value(perc);
      row.smooth += scalar_value(smooth);
      row.total += tv;
      ++steps;
    }
    row.l1 /= steps;
    row.perceptual /= steps;
    row.smooth /= steps;
    row.kd /= steps;
    row.total /= steps;
    row.gate_rate = gate_slots > 0 ? static_cast<double>(gates_on) / gate_slots : 0.0;
    out.history.push_back(row);
  }

  out.checkpoint = make_checkpoint("student", cfg, student_afwm_config(cfg),
                                   student_gm_config(cfg), params);
  out.checkpoint.meta["distill"] = to_string(cfg.distill);
  return out;
}

template <typename T>
struct InferResult {
  Tensor<T> image;
  Tensor<T> warped;
};

// Rebuilds the models recorded in the checkpoint and runs one try-on pass.
// `condition` is the plain person image for a student checkpoint, or the
// 12-channel conditioning stack for a teacher checkpoint.
template <typename T>
InferResult<T> infer(const Checkpoint& ck, const Tensor<T>& condition,
                     const Tensor<T>& clothes) {
  NoGradGuard guard;
  AfwmConfig acfg;
  acfg.levels = ck.meta_int("afwm.levels");
  acfg.base_width = ck.meta_int("afwm.base_width");
  acfg.corr_radius = ck.meta_int("afwm.corr_radius");
  acfg.clothes_channels = ck.meta_int("afwm.clothes_channels");
  acfg.cond_channels = ck.meta_int("afwm.cond_channels");
  GmConfig gcfg;
  gcfg.in_channels = ck.meta_int("gm.in_channels");
  gcfg.depth = ck.meta_int("gm.depth");
  gcfg.base_width = ck.meta_int("gm.base_width");
  gcfg.out_channels = ck.meta_int("gm.out_channels");

  check(condition.ndim() == 4 && condition.dim(1) == acfg.cond_channels,
        "infer: conditioning input has " +
            std::to_string(condition.ndim() == 4 ? condition.dim(1) : -1) +
            " channels, the checkpoint expects " + std::to_string(acfg.cond_channels));

  Rng scratch_rng(0);
  Afwm<T> afwm(acfg, scratch_rng);
  TryOnGenerator<T> gm(gcfg, scratch_rng);
  auto params = combined_params(afwm, gm);
  ck.load_params_into(params);

  auto run = run_try_on(afwm, gm, clothes, condition);
  return {run.image, run.warped};
}

// Held-out reconstruction score: the student re-dresses each person in the
// garment they are already wearing, so the photo itself is the target.
template <typename T>
double eval_student(const Checkpoint& ck, const PipelineConfig& cfg, int count) {
  check(count >= 1, "eval_student: count must be positive");
  SynthConfig scfg = cfg.synth();
  scfg.corruption_prob = 0.0;
  auto ds = synth_dataset<T>(count, derive_seed(cfg.seed, seedstream::kEval), scfg);
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& s : ds) {
    auto r = infer<T>(ck, s.person, s.clothes);
    total += scalar_value(l1_loss(r.image, s.person));
  }
  return total / count;
}

}  // namespace flowdistill
