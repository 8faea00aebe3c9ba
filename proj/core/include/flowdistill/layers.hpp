#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "flowdistill/ops.hpp"
#include "flowdistill/rng.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

// Named parameter list; names are hierarchical ("enc.0.conv1.weight") and
// stable across runs, which is what the checkpoint format keys on.
template <typename T>
using ParamMap = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
std::vector<Tensor<T>> param_tensors(const ParamMap<T>& params) {
  std::vector<Tensor<T>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

template <typename T>
std::size_t param_count(const ParamMap<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight, bias;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;

  Conv2dLayer(int cin, int cout, int k, int stride_, int padding_, Rng& rng,
              bool zero_init = false)
      : stride(stride_), padding(padding_) {
    if (zero_init) {
      weight = Tensor<T>(Shape{cout, cin, k, k}, T(0), true);
    } else {
      // fan-in scaled uniform init
      const T bound = std::sqrt(T(6) / static_cast<T>(cin * k * k));
      weight = Tensor<T>::rand_uniform(Shape{cout, cin, k, k}, rng, -bound, bound);
      weight.set_requires_grad(true);
    }
    bias = Tensor<T>(Shape{cout}, T(0), true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }

  void collect(const std::string& prefix, ParamMap<T>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// Two 3x3 convs with a skip connection; channel count is preserved.
template <typename T>
struct ResidualBlock {
  Conv2dLayer<T> conv1, conv2;

  ResidualBlock() = default;

  ResidualBlock(int channels, Rng& rng)
      : conv1(channels, channels, 3, 1, 1, rng),
        conv2(channels, channels, 3, 1, 1, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    auto h = leaky_relu(conv1.forward(x));
    return leaky_relu(x + conv2.forward(h));
  }

  void collect(const std::string& prefix, ParamMap<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

// Plain chain of 3x3 same-padding convs with leaky rectifiers between layers
// (none after the last). `zero_last` zeroes the final layer so the stack
// starts out emitting zeros — used by flow refinement heads.
template <typename T>
struct ConvStack {
  std::vector<Conv2dLayer<T>> layers;

  ConvStack() = default;

  ConvStack(const std::vector<int>& channels, Rng& rng, bool zero_last = false) {
    check(channels.size() >= 2, "ConvStack: need at least in/out channels");
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
      const bool last = i + 2 == channels.size();
      layers.emplace_back(channels[i], channels[i + 1], 3, 1, 1, rng,
                          zero_last && last);
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(h);
      if (i + 1 < layers.size()) h = leaky_relu(h);
    }
    return h;
  }

  void collect(const std::string& prefix, ParamMap<T>& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

}  // namespace flowdistill
