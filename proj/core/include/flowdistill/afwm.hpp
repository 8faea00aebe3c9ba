#pragma once

#include <string>
#include <vector>

#include "flowdistill/layers.hpp"
#include "flowdistill/ops.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

struct AfwmConfig {
  int levels = 3;           // pyramid depth N
  int base_width = 32;      // channels at the finest level, doubling per level
  int corr_radius = 2;      // displacement window radius d
  int clothes_channels = 3;
  int cond_channels = 12;

  // Widths follow a geometric ladder capped at 256.
  int level_width(int level) const {  // level is 1-based
    long w = base_width;
    for (int i = 1; i < level; ++i) w = std::min(w * 2, 256L);
    return static_cast<int>(w);
  }

  void validate() const {
    check(levels >= 2, "afwm: levels must be >= 2, got " + std::to_string(levels));
    check(corr_radius >= 1, "afwm: correlation radius must be >= 1, got " +
                                std::to_string(corr_radius));
    check(base_width >= 1 && clothes_channels >= 1 && cond_channels >= 1,
          "afwm: channel counts must be positive");
  }
};

// Two same-shaped feature ladders: one over the garment image, one over the
// condition input. Index 0 is level 1 (finest, H/2); index N-1 the coarsest.
template <typename T>
struct PyramidPair {
  std::vector<Tensor<T>> clothes;
  std::vector<Tensor<T>> condition;
};

// Estimated flows ordered coarse to fine: flows[0] lives at the coarsest
// feature resolution, flows.back() at the finest (half image resolution).
template <typename T>
struct FlowCascade {
  std::vector<FlowField<T>> flows;
};

// One encoder branch: per level a stride-2 conv followed by two residual
// blocks.
template <typename T>
struct PyramidEncoder {
  struct Level {
    Conv2dLayer<T> down;
    ResidualBlock<T> res1, res2;
  };
  std::vector<Level> levels;

  PyramidEncoder() = default;

  PyramidEncoder(int in_channels, const AfwmConfig& cfg, Rng& rng) {
    int cin = in_channels;
    for (int l = 1; l <= cfg.levels; ++l) {
      const int w = cfg.level_width(l);
      levels.push_back({Conv2dLayer<T>(cin, w, 3, 2, 1, rng),
                        ResidualBlock<T>(w, rng), ResidualBlock<T>(w, rng)});
      cin = w;
    }
  }

  std::vector<Tensor<T>> forward(const Tensor<T>& x) const {
    std::vector<Tensor<T>> out;
    out.reserve(levels.size());
    Tensor<T> h = x;
    for (const auto& lvl : levels) {
      h = leaky_relu(lvl.down.forward(h));
      h = lvl.res2.forward(lvl.res1.forward(h));
      out.push_back(h);
    }
    return out;
  }

  void collect(const std::string& prefix, ParamMap<T>& out) const {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      levels[i].down.collect(p + ".down", out);
      levels[i].res1.collect(p + ".res1", out);
      levels[i].res2.collect(p + ".res2", out);
    }
  }
};

// Per-level refinement parameters: stack_a maps the correlation volume to a
// residual flow, stack_b refines from the re-warped features. Both end in a
// zero-initialized layer so a fresh network starts as the identity warp.
template <typename T>
struct FlowNetworkLevel {
  ConvStack<T> stack_a, stack_b;

  FlowNetworkLevel() = default;

  FlowNetworkLevel(int feature_width, int corr_radius, Rng& rng) {
    const int corr_ch = (2 * corr_radius + 1) * (2 * corr_radius + 1);
    stack_a = ConvStack<T>({corr_ch, 64, 32, 16, 2}, rng, /*zero_last=*/true);
    stack_b = ConvStack<T>({2 * feature_width, 64, 32, 16, 2}, rng, /*zero_last=*/true);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) const {
    stack_a.collect(prefix + ".a", out);
    stack_b.collect(prefix + ".b", out);
  }
};

// One cascade stage. Passing no previous flow (coarsest level) starts from
// the zero flow at the feature resolution.
template <typename T>
FlowField<T> flow_network_step(const Tensor<T>& c_i, const Tensor<T>& p_i,
                               const FlowField<T>* f_prev,
                               const FlowNetworkLevel<T>& params,
                               int corr_radius) {
  check(c_i.shape() == p_i.shape(),
        "flow_network_step: branch features differ, " + shape_str(c_i.shape()) +
            " vs " + shape_str(p_i.shape()));
  const int n = c_i.dim(0), h = c_i.dim(2), w = c_i.dim(3);

  FlowField<T> f1;
  if (f_prev) {
    check_flow_field(*f_prev, "flow_network_step");
    check(f_prev->dim(2) * 2 == h && f_prev->dim(3) * 2 == w,
          "flow_network_step: previous flow " + shape_str(f_prev->shape()) +
              " is not half the feature size " + shape_str(c_i.shape()));
    f1 = upsample2x(*f_prev, Upsample::kBilinear);
  } else {
    f1 = FlowField<T>(Shape{n, 2, h, w}, T(0));
  }

  auto warped1 = grid_sample(c_i, f1);
  auto corr = correlation(warped1, p_i, corr_radius);
  auto residual_a = params.stack_a.forward(corr);
  auto f2 = f1 + residual_a;

  auto warped2 = grid_sample(c_i, f2);
  auto residual_b = params.stack_b.forward(concat_channels(warped2, p_i));
  return f2 + residual_b;
}

template <typename T>
class Afwm {
 public:
  Afwm() = default;

  Afwm(const AfwmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    clothes_enc_ = PyramidEncoder<T>(cfg.clothes_channels, cfg, rng);
    cond_enc_ = PyramidEncoder<T>(cfg.cond_channels, cfg, rng);
    for (int l = 1; l <= cfg.levels; ++l)
      fn_.emplace_back(cfg.level_width(l), cfg.corr_radius, rng);
  }

  const AfwmConfig& config() const { return cfg_; }

  PyramidPair<T> extract_pyramids(const Tensor<T>& clothes,
                                  const Tensor<T>& condition) const {
    check(clothes.ndim() == 4 && condition.ndim() == 4,
          "extract_pyramids: expects NCHW inputs");
    check(clothes.dim(2) == condition.dim(2) && clothes.dim(3) == condition.dim(3),
          "extract_pyramids: branch inputs differ spatially, " +
              shape_str(clothes.shape()) + " vs " + shape_str(condition.shape()));
    check(clothes.dim(1) == cfg_.clothes_channels,
          "extract_pyramids: garment input " + shape_str(clothes.shape()) +
              " does not carry the configured " +
              std::to_string(cfg_.clothes_channels) + " channels");
    check(condition.dim(1) == cfg_.cond_channels,
          "extract_pyramids: condition input " + shape_str(condition.shape()) +
              " does not carry the configured " +
              std::to_string(cfg_.cond_channels) + " channels");
    const int div = 1 << cfg_.levels;
    const int h = clothes.dim(2), w = clothes.dim(3);
    check(h % div == 0 && w % div == 0,
          "extract_pyramids: spatial size " + std::to_string(h) + "x" +
              std::to_string(w) + " is not divisible by 2^levels = " +
              std::to_string(div) + "; pad to " +
              std::to_string((h + div - 1) / div * div) + "x" +
              std::to_string((w + div - 1) / div * div));
    return {clothes_enc_.forward(clothes), cond_enc_.forward(condition)};
  }

  FlowCascade<T> estimate_flows(const PyramidPair<T>& pyr) const {
    check(pyr.clothes.size() == fn_.size() && pyr.condition.size() == fn_.size(),
          "estimate_flows: pyramid depth does not match the configured levels");
    FlowCascade<T> out;
    out.flows.reserve(fn_.size());
    FlowField<T> prev;
    for (int level = cfg_.levels; level >= 1; --level) {
      const auto& c = pyr.clothes[level - 1];
      const auto& p = pyr.condition[level - 1];
      prev = flow_network_step(c, p, out.flows.empty() ? nullptr : &prev,
                               fn_[level - 1], cfg_.corr_radius);
      out.flows.push_back(prev);
    }
    return out;
  }

  ParamMap<T> params() const {
    ParamMap<T> out;
    clothes_enc_.collect("afwm.clothes", out);
    cond_enc_.collect("afwm.cond", out);
    for (std::size_t i = 0; i < fn_.size(); ++i)
      fn_[i].collect("afwm.fn." + std::to_string(i), out);
    return out;
  }

 private:
  AfwmConfig cfg_;
  PyramidEncoder<T> clothes_enc_, cond_enc_;
  std::vector<FlowNetworkLevel<T>> fn_;  // index 0 = level 1 (finest)
};

// Warps the raw garment image by the finest cascade flow; the cascade tops
// out at half image resolution, so the flow is upsampled once first.
template <typename T>
Tensor<T> warp_clothes(const Tensor<T>& clothes_image,
                       const FlowCascade<T>& cascade) {
  check(!cascade.flows.empty(), "warp_clothes: empty cascade");
  const auto& finest = cascade.flows.back();
  check_flow_field(finest, "warp_clothes");
  check(clothes_image.ndim() == 4, "warp_clothes: expects an NCHW image");
  check(finest.dim(2) * 2 == clothes_image.dim(2) &&
            finest.dim(3) * 2 == clothes_image.dim(3),
        "warp_clothes: finest flow " + shape_str(finest.shape()) +
            " does not upsample to the image size " +
            shape_str(clothes_image.shape()));
  auto full = upsample2x(finest, Upsample::kBilinear);
  return grid_sample(clothes_image, full);
}

}  // namespace flowdistill
