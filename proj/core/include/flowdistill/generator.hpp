#pragma once

#include <string>
#include <vector>

#include "flowdistill/layers.hpp"
#include "flowdistill/ops.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

struct GmConfig {
  int in_channels = 12;  // composed condition stack
  int depth = 3;         // down/up levels
  int base_width = 32;
  int out_channels = 3;

  int level_width(int level) const {  // level 0 = full resolution
    long w = base_width;
    for (int i = 0; i < level; ++i) w = std::min(w * 2, 128L);
    return static_cast<int>(w);
  }

  void validate() const {
    check(depth >= 2, "generator: depth must be >= 2, got " + std::to_string(depth));
    check(in_channels >= 1 && base_width >= 1 && out_channels >= 1,
          "generator: channel counts must be positive");
  }
};

// U-Net with residual blocks on every level and concatenated skip paths; the
// head squashes to [-1,1] with tanh so outputs live in image range.
template <typename T>
class TryOnGenerator {
 public:
  TryOnGenerator() = default;

  TryOnGenerator(const GmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    stem_ = Conv2dLayer<T>(cfg.in_channels, cfg.level_width(0), 3, 1, 1, rng);
    stem_res_ = ResidualBlock<T>(cfg.level_width(0), rng);
    for (int l = 1; l <= cfg.depth; ++l) {
      down_.emplace_back(cfg.level_width(l - 1), cfg.level_width(l), 3, 2, 1, rng);
      down_res_.emplace_back(cfg.level_width(l), rng);
    }
    bottleneck_ = ResidualBlock<T>(cfg.level_width(cfg.depth), rng);
    for (int l = cfg.depth; l >= 1; --l) {
      up_.emplace_back(cfg.level_width(l), cfg.level_width(l - 1), 3, 1, 1, rng);
      fuse_.emplace_back(2 * cfg.level_width(l - 1), cfg.level_width(l - 1), 3, 1, 1, rng);
      up_res_.emplace_back(cfg.level_width(l - 1), rng);
    }
    head_ = Conv2dLayer<T>(cfg.level_width(0), cfg.out_channels, 3, 1, 1, rng);
  }

  const GmConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& condition_stack) const {
    check(condition_stack.ndim() == 4 &&
              condition_stack.dim(1) == cfg_.in_channels,
          "generator: condition stack " + shape_str(condition_stack.shape()) +
              " does not carry the configured " +
              std::to_string(cfg_.in_channels) + " channels");
    const int div = 1 << cfg_.depth;
    check(condition_stack.dim(2) % div == 0 && condition_stack.dim(3) % div == 0,
          "generator: spatial size of " + shape_str(condition_stack.shape()) +
              " is not divisible by 2^depth = " + std::to_string(div));

    // Every conv below the head is normalized per channel before activation:
    // the network stays well-scaled at any depth and the tanh head keeps
    // receiving inputs in its responsive range instead of drifting into the
    // saturated tails, where float32 gradients vanish outright.
    std::vector<Tensor<T>> skips;
    auto h = stem_res_.forward(leaky_relu(instance_norm(stem_.forward(condition_stack))));
    skips.push_back(h);
    for (std::size_t l = 0; l < down_.size(); ++l) {
      h = down_res_[l].forward(leaky_relu(instance_norm(down_[l].forward(h))));
      if (l + 1 < down_.size()) skips.push_back(h);
    }
    h = bottleneck_.forward(h);
    for (std::size_t u = 0; u < up_.size(); ++u) {
      h = leaky_relu(instance_norm(up_[u].forward(upsample2x(h, Upsample::kBilinear))));
      const auto& skip = skips[skips.size() - 1 - u];
      h = leaky_relu(instance_norm(fuse_[u].forward(concat_channels(h, skip))));
      h = up_res_[u].forward(h);
    }
    return tanh_op(head_.forward(h));
  }

  ParamMap<T> params() const {
    ParamMap<T> out;
    stem_.collect("gm.stem", out);
    stem_res_.collect("gm.stem_res", out);
    for (std::size_t i = 0; i < down_.size(); ++i) {
      down_[i].collect("gm.down." + std::to_string(i), out);
      down_res_[i].collect("gm.down_res." + std::to_string(i), out);
    }
    bottleneck_.collect("gm.bottleneck", out);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      up_[i].collect("gm.up." + std::to_string(i), out);
      fuse_[i].collect("gm.fuse." + std::to_string(i), out);
      up_res_[i].collect("gm.up_res." + std::to_string(i), out);
    }
    head_.collect("gm.head", out);
    return out;
  }

 private:
  GmConfig cfg_;
  Conv2dLayer<T> stem_, head_;
  ResidualBlock<T> stem_res_, bottleneck_;
  std::vector<Conv2dLayer<T>> down_, up_, fuse_;
  std::vector<ResidualBlock<T>> down_res_, up_res_;
};

template <typename T>
Tensor<T> gm_forward(const Tensor<T>& condition_stack,
                     const TryOnGenerator<T>& gm) {
  return gm.forward(condition_stack);
}

}  // namespace flowdistill
