#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "flowdistill/afwm.hpp"
#include "flowdistill/layers.hpp"
#include "flowdistill/ops.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

struct LossWeights {
  double lambda_l1 = 1.0;
  double lambda_perceptual = 0.2;
  double lambda_smooth = 6.0;
  double lambda_hint = 0.04;
  double lambda_pred = 1.0;
};

// Charbonnier constants shared by the smoothness penalty.
inline constexpr double kCharbonnierEps = 1e-3;
inline constexpr double kCharbonnierAlpha = 0.45;

// Penalty floor: value of the charbonnier function at zero.
inline double charbonnier_floor() {
  return std::pow(kCharbonnierEps * kCharbonnierEps, kCharbonnierAlpha);
}

// ---------------------------------------------------------------------------
// Frozen feature pyramid for the perceptual term
// ---------------------------------------------------------------------------

// Four stride-2 conv stages with frozen, seeded random weights. Stands in for
// a pretrained feature stack at desk scale; weights are reproducible from the
// seed alone so they never need to be stored.
template <typename T>
class PerceptualExtractor {
 public:
  PerceptualExtractor() = default;

  explicit PerceptualExtractor(Rng& rng, int in_channels = 3) {
    int cin = in_channels;
    for (int w : {16, 32, 64, 128}) {
      stages_.emplace_back(cin, w, 3, 2, 1, rng);
      stages_.back().weight.set_requires_grad(false);
      stages_.back().bias.set_requires_grad(false);
      cin = w;
    }
  }

  std::vector<Tensor<T>> features(const Tensor<T>& x) const {
    std::vector<Tensor<T>> out;
    out.reserve(stages_.size());
    Tensor<T> h = x;
    for (const auto& stage : stages_) {
      h = leaky_relu(stage.forward(h));
      out.push_back(h);
    }
    return out;
  }

  int stage_count() const { return static_cast<int>(stages_.size()); }

 private:
  std::vector<Conv2dLayer<T>> stages_;
};

template <typename T>
Tensor<T> perceptual_loss(const Tensor<T>& generated, const Tensor<T>& target,
                          const PerceptualExtractor<T>& extractor) {
  detail::check_same_shape(generated, target, "perceptual_loss");
  auto fg = extractor.features(generated);
  auto ft = extractor.features(target);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t m = 0; m < fg.size(); ++m)
    total = total + l1_loss(fg[m], ft[m]);
  return total;
}

// ---------------------------------------------------------------------------
// Second-order flow smoothness
// ---------------------------------------------------------------------------

// Mean charbonnier penalty on second differences f[t-pi] + f[t+pi] - 2 f[t]
// along the horizontal, vertical, and both diagonal directions; points whose
// neighbors leave the grid are skipped. Mean is over every included (sample,
// point, direction, channel) term of this level.
template <typename T>
Tensor<T> second_order_smooth_level(const FlowField<T>& flow) {
  check_flow_field(flow, "second_order_smooth");
  const int n = flow.dim(0), c = flow.dim(1), h = flow.dim(2), w = flow.dim(3);
  static constexpr int kDirs[4][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}};

  long count = 0;
  for (const auto& d : kDirs) {
    const long ys = std::max(0L, static_cast<long>(h) - 2 * std::abs(d[0]));
    const long xs = std::max(0L, static_cast<long>(w) - 2 * std::abs(d[1]));
    count += ys * xs;
  }
  count *= static_cast<long>(n) * c;
  if (count == 0) return Tensor<T>::scalar(T(0));

  const T e2 = T(kCharbonnierEps) * T(kCharbonnierEps);
  const T alpha = T(kCharbonnierAlpha);
  const T* f = flow.data().data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  T acc = T(0);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const T* ch = f + (static_cast<std::size_t>(ni) * c + ci) * plane;
      for (const auto& d : kDirs) {
        const int ay = std::abs(d[0]), ax = std::abs(d[1]);
        for (int y = ay; y < h - ay; ++y)
          for (int x = ax; x < w - ax; ++x) {
            const T prev = ch[static_cast<std::size_t>(y - d[0]) * w + (x - d[1])];
            const T next = ch[static_cast<std::size_t>(y + d[0]) * w + (x + d[1])];
            const T mid = ch[static_cast<std::size_t>(y) * w + x];
            const T v = prev + next - T(2) * mid;
            acc += std::pow(v * v + e2, alpha);
          }
      }
    }

  const T value = acc / static_cast<T>(count);
  return Tensor<T>::make_result(
      Shape{1}, {value}, {flow},
      [flow, n, c, h, w, plane, count, e2, alpha](Node<T>& o) mutable {
        if (!flow.requires_grad()) return;
        const T g0 = o.grad[0] / static_cast<T>(count);
        const T* f = flow.data().data();
        T* g = flow.grad().data();
        for (int ni = 0; ni < n; ++ni)
          for (int ci = 0; ci < c; ++ci) {
            const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * plane;
            for (const auto& d : kDirs) {
              const int ay = std::abs(d[0]), ax = std::abs(d[1]);
              for (int y = ay; y < h - ay; ++y)
                for (int x = ax; x < w - ax; ++x) {
                  const std::size_t ip = base + static_cast<std::size_t>(y - d[0]) * w + (x - d[1]);
                  const std::size_t in = base + static_cast<std::size_t>(y + d[0]) * w + (x + d[1]);
                  const std::size_t im = base + static_cast<std::size_t>(y) * w + x;
                  const T v = f[ip] + f[in] - T(2) * f[im];
                  const T dw = g0 * alpha * std::pow(v * v + e2, alpha - T(1)) * T(2) * v;
                  g[ip] += dw;
                  g[in] += dw;
                  g[im] -= T(2) * dw;
                }
            }
          }
      });
}

// Sum of the per-level means over the whole cascade; keeps the weight
// resolution-independent while still covering every level.
template <typename T>
Tensor<T> second_order_smooth(const FlowCascade<T>& cascade) {
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto& f : cascade.flows) total = total + second_order_smooth_level(f);
  return total;
}

template <typename T>
Tensor<T> total_generation_loss(const Tensor<T>& generated, const Tensor<T>& target,
                                const FlowCascade<T>& cascade,
                                const PerceptualExtractor<T>& extractor,
                                const LossWeights& weights) {
  auto total = scale(l1_loss(generated, target), T(weights.lambda_l1));
  total = total + scale(perceptual_loss(generated, target, extractor),
                        T(weights.lambda_perceptual));
  total = total + scale(second_order_smooth(cascade), T(weights.lambda_smooth));
  return total;
}

// ---------------------------------------------------------------------------
// Adjustable distillation
// ---------------------------------------------------------------------------

// Per-sample gate: distill only where the tutor's image is strictly closer to
// the target than the student's (ties disable distillation).
template <typename T>
struct GateDecision {
  std::vector<int> psi;
  std::vector<T> tutor_error, student_error;

  double gate_rate() const {
    if (psi.empty()) return 0.0;
    double on = 0;
    for (int v : psi) on += v;
    return on / static_cast<double>(psi.size());
  }
};

template <typename T>
GateDecision<T> gate_psi(const Tensor<T>& tutor_image,
                         const Tensor<T>& student_image,
                         const Tensor<T>& target_image) {
  detail::check_same_shape(tutor_image, student_image, "gate_psi");
  detail::check_same_shape(tutor_image, target_image, "gate_psi");
  check(tutor_image.ndim() == 4, "gate_psi: expects NCHW images");
  NoGradGuard ng;  // the comparison never feeds gradients
  const int n = tutor_image.dim(0);
  const std::size_t per = tutor_image.size() / n;
  const T* u = tutor_image.data().data();
  const T* s = student_image.data().data();
  const T* t = target_image.data().data();
  GateDecision<T> out;
  out.psi.resize(n);
  out.tutor_error.resize(n);
  out.student_error.resize(n);
  for (int b = 0; b < n; ++b) {
    T ue = T(0), se = T(0);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      ue += std::abs(u[i] - t[i]);
      se += std::abs(s[i] - t[i]);
    }
    out.tutor_error[b] = ue / static_cast<T>(per);
    out.student_error[b] = se / static_cast<T>(per);
    out.psi[b] = out.tutor_error[b] < out.student_error[b] ? 1 : 0;
  }
  return out;
}

namespace detail {

// (1/B) sum_b psi_b * sqrt(mean_i (s_bi - u_bi)^2); gradient flows into s
// (and u, when it is not detached).
template <typename T>
Tensor<T> masked_rms(const Tensor<T>& u, const Tensor<T>& s,
                     const std::vector<int>& psi) {
  check_same_shape(u, s, "hint_loss");
  check(static_cast<int>(psi.size()) == u.dim(0),
        "hint_loss: gate covers " + std::to_string(psi.size()) +
            " samples but features carry " + std::to_string(u.dim(0)));
  const int n = u.dim(0);
  const std::size_t per = u.size() / n;
  const T* up = u.data().data();
  const T* sp = s.data().data();
  std::vector<T> rms(n, T(0));
  T acc = T(0);
  for (int b = 0; b < n; ++b) {
    if (!psi[b]) continue;
    T sq = T(0);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const T d = sp[i] - up[i];
      sq += d * d;
    }
    rms[b] = std::sqrt(sq / static_cast<T>(per));
    acc += rms[b];
  }
  const T value = acc / static_cast<T>(n);
  return Tensor<T>::make_result(
      Shape{1}, {value}, {u, s}, [u, s, psi, n, per, rms](Node<T>& o) mutable {
        const T* up = u.data().data();
        const T* sp = s.data().data();
        T* gu = u.requires_grad() ? u.grad().data() : nullptr;
        T* gs = s.requires_grad() ? s.grad().data() : nullptr;
        if (!gu && !gs) return;
        for (int b = 0; b < n; ++b) {
          if (!psi[b] || rms[b] <= T(0)) continue;
          const T scale = o.grad[0] / (static_cast<T>(n) * static_cast<T>(per) * rms[b]);
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            const T d = sp[i] - up[i];
            if (gs) gs[i] += scale * d;
            if (gu) gu[i] -= scale * d;
          }
        }
      });
}

// (1/B) sum_b psi_b * mean_i |u_bi - s_bi|; subgradient 0 at exact ties.
template <typename T>
Tensor<T> masked_mean_abs(const Tensor<T>& u, const Tensor<T>& s,
                          const std::vector<int>& psi) {
  check_same_shape(u, s, "pred_loss");
  check(static_cast<int>(psi.size()) == u.dim(0),
        "pred_loss: gate covers " + std::to_string(psi.size()) +
            " samples but flows carry " + std::to_string(u.dim(0)));
  const int n = u.dim(0);
  const std::size_t per = u.size() / n;
  const T* up = u.data().data();
  const T* sp = s.data().data();
  T acc = T(0);
  for (int b = 0; b < n; ++b) {
    if (!psi[b]) continue;
    T e = T(0);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) e += std::abs(sp[i] - up[i]);
    acc += e / static_cast<T>(per);
  }
  const T value = acc / static_cast<T>(n);
  return Tensor<T>::make_result(
      Shape{1}, {value}, {u, s}, [u, s, psi, n, per](Node<T>& o) mutable {
        const T* up = u.data().data();
        const T* sp = s.data().data();
        T* gu = u.requires_grad() ? u.grad().data() : nullptr;
        T* gs = s.requires_grad() ? s.grad().data() : nullptr;
        if (!gu && !gs) return;
        const T g0 = o.grad[0] / (static_cast<T>(n) * static_cast<T>(per));
        for (int b = 0; b < n; ++b) {
          if (!psi[b]) continue;
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            const T d = sp[i] - up[i];
            const T sgn = d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0);
            if (gs) gs[i] += g0 * sgn;
            if (gu) gu[i] -= g0 * sgn;
          }
        }
      });
}

}  // namespace detail

// Feature (hint) distillation over the condition-branch pyramids: RMS of the
// feature gap per level, gated per sample, summed across levels.
template <typename T>
Tensor<T> hint_loss(const std::vector<Tensor<T>>& tutor_features,
                    const std::vector<Tensor<T>>& student_features,
                    const GateDecision<T>& gate) {
  check(tutor_features.size() == student_features.size(),
        "hint_loss: tutor has " + std::to_string(tutor_features.size()) +
            " levels, student " + std::to_string(student_features.size()));
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < tutor_features.size(); ++i)
    total = total + detail::masked_rms(tutor_features[i], student_features[i], gate.psi);
  return total;
}

// Flow (prediction) distillation: per-level mean absolute flow gap, gated per
// sample, summed across levels.
template <typename T>
Tensor<T> pred_loss(const FlowCascade<T>& tutor_flows,
                    const FlowCascade<T>& student_flows,
                    const GateDecision<T>& gate) {
  check(tutor_flows.flows.size() == student_flows.flows.size(),
        "pred_loss: tutor has " + std::to_string(tutor_flows.flows.size()) +
            " levels, student " + std::to_string(student_flows.flows.size()));
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < tutor_flows.flows.size(); ++i)
    total = total + detail::masked_mean_abs(tutor_flows.flows[i],
                                            student_flows.flows[i], gate.psi);
  return total;
}

template <typename T>
Tensor<T> kd_loss(const Tensor<T>& hint, const Tensor<T>& pred,
                  const LossWeights& weights) {
  return scale(hint, T(weights.lambda_hint)) + scale(pred, T(weights.lambda_pred));
}

}  // namespace flowdistill
