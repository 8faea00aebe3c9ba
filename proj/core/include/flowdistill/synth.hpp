#pragma once

#include <cmath>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "flowdistill/ops.hpp"
#include "flowdistill/rng.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

struct SynthConfig {
  int height = 64;
  int width = 48;
  double corruption_prob = 0.0;  // chance the parsing channels are damaged

  void validate() const {
    check(height % 16 == 0 && width % 16 == 0,
          "synth: image size " + std::to_string(height) + "x" + std::to_string(width) +
              " must be divisible by 16");
    check(corruption_prob >= 0.0 && corruption_prob <= 1.0,
          "synth: corruption probability must lie in [0,1]");
  }
};

// One training exemplar. The parsing stack (preserved mask + segmentation +
// pose heatmaps) conditions the parser-based models only; garment_mask and
// gt_flow are clean evaluation targets that never enter a model.
template <typename T>
struct TryOnSample {
  Tensor<T> clothes;        // (1,3,H,W) flat garment, [-1,1]
  Tensor<T> person;         // (1,3,H,W) person wearing the garment
  Tensor<T> alt_clothes;    // (1,3,H,W) a different garment
  Tensor<T> preserved_mask; // (1,1,H,W) hair/face/lower-body analog, binary
  Tensor<T> segmentation;   // (1,5,H,W) one-hot {bg, head, garment, arms, legs}
  Tensor<T> pose;           // (1,6,H,W) keypoint heatmaps in [0,1]
  Tensor<T> garment_mask;   // (1,1,H,W) where person pixels come from the garment
  FlowField<T> gt_flow;     // (1,2,H,W) maps person pixels into the garment image
};

// The 12-channel conditioning stack consumed by the parser-based branch.
template <typename T>
Tensor<T> person_representation(const TryOnSample<T>& s) {
  return concat_channels({s.preserved_mask, s.segmentation, s.pose});
}

// Person pixels restricted to the preserved region (constant input, no graph).
template <typename T>
Tensor<T> preserved_image(const TryOnSample<T>& s) {
  Tensor<T> out(s.person.shape());
  const int c = s.person.dim(1), h = s.person.dim(2), w = s.person.dim(3);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.at(0, ci, y, x) = s.person.at(0, ci, y, x) * s.preserved_mask.at(0, 0, y, x);
  return out;
}

namespace detail {

struct Color {
  double r, g, b;
};

inline Color rand_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

template <typename T>
void fill_rect(Tensor<T>& img, int x0, int y0, int x1, int y1, const Color& c) {
  const int h = img.dim(2), w = img.dim(3);
  for (int y = std::max(0, y0); y <= std::min(h - 1, y1); ++y)
    for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x) {
      img.at(0, 0, y, x) = T(c.r);
      img.at(0, 1, y, x) = T(c.g);
      img.at(0, 2, y, x) = T(c.b);
    }
}

template <typename T>
void fill_rect_class(Tensor<T>& img, std::vector<int>& seg, int cls, int x0, int y0,
                     int x1, int y1, const Color& c) {
  fill_rect(img, x0, y0, x1, y1, c);
  const int h = img.dim(2), w = img.dim(3);
  for (int y = std::max(0, y0); y <= std::min(h - 1, y1); ++y)
    for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x) seg[y * w + x] = cls;
}

template <typename T>
void fill_ellipse_class(Tensor<T>& img, std::vector<int>& seg, int cls, double cx,
                        double cy, double rx, double ry, const Color& c) {
  const int h = img.dim(2), w = img.dim(3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = (x - cx) / rx, dy = (y - cy) / ry;
      if (dx * dx + dy * dy <= 1.0) {
        img.at(0, 0, y, x) = T(c.r);
        img.at(0, 1, y, x) = T(c.g);
        img.at(0, 2, y, x) = T(c.b);
        seg[y * w + x] = cls;
      }
    }
}

template <typename T>
void add_keypoint(Tensor<T>& pose, int channel, double cx, double cy,
                  double sigma = 2.0) {
  const int h = pose.dim(2), w = pose.dim(3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      const T v = T(std::exp(-d2 / (2.0 * sigma * sigma)));
      pose.at(0, channel, y, x) = std::max(pose.at(0, channel, y, x), v);
    }
}

// A flat-lay garment: near-white background, colored body with horizontal
// stripes and a small logo glyph. Returns the image and writes the garment's
// bounding rectangle (inclusive) to the out-parameters.
template <typename T>
Tensor<T> render_garment(Rng& rng, int h, int w, int& gx0, int& gy0, int& gx1,
                         int& gy1) {
  Tensor<T> img(Shape{1, 3, h, w});
  const double bg = rng.uniform(0.82, 0.95);
  fill_rect(img, 0, 0, w - 1, h - 1, {bg, bg, bg});

  gx0 = w / 8 + static_cast<int>(rng.below(3));
  gx1 = w - 1 - w / 8 - static_cast<int>(rng.below(3));
  gy0 = h / 8 + static_cast<int>(rng.below(3));
  gy1 = h - 1 - h / 8 - static_cast<int>(rng.below(3));

  const Color base = rand_color(rng, -0.9, 0.6);
  fill_rect(img, gx0, gy0, gx1, gy1, base);

  const Color stripe = rand_color(rng, -0.6, 0.9);
  const int period = 3 + static_cast<int>(rng.below(4));
  for (int y = gy0; y <= gy1; ++y)
    if ((y - gy0) % period == 0) fill_rect(img, gx0, y, gx1, y, stripe);

  const Color logo = rand_color(rng, -0.9, 0.9);
  const int ls = std::max(2, w / 12);
  const int lx = gx0 + 2 + static_cast<int>(rng.below(std::max(1, gx1 - gx0 - ls - 4)));
  const int ly = gy0 + 2 + static_cast<int>(rng.below(std::max(1, gy1 - gy0 - ls - 4)));
  fill_rect(img, lx, ly, lx + ls, ly + ls, logo);

  return img;
}

}  // namespace detail

// Procedurally renders one sample: a stylized person (head, arms, legs, torso)
// composed with a garment deformed onto the torso by a known smooth warp.
template <typename T>
TryOnSample<T> synth_sample(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const int h = cfg.height, w = cfg.width;

  TryOnSample<T> s;
  s.person = Tensor<T>(Shape{1, 3, h, w});
  s.preserved_mask = Tensor<T>(Shape{1, 1, h, w});
  s.segmentation = Tensor<T>(Shape{1, 5, h, w});
  s.pose = Tensor<T>(Shape{1, 6, h, w});
  s.garment_mask = Tensor<T>(Shape{1, 1, h, w});
  s.gt_flow = FlowField<T>(Shape{1, 2, h, w});

  std::vector<int> seg(static_cast<std::size_t>(h) * w, 0);

  // Background and body parts; class codes {0 bg, 1 head, 2 garment, 3 arms,
  // 4 legs}.
  const double bgv = rng.uniform(-0.95, -0.55);
  detail::fill_rect(s.person, 0, 0, w - 1, h - 1, {bgv, bgv, bgv});
  const detail::Color skin = {rng.uniform(0.2, 0.75), rng.uniform(0.0, 0.5),
                              rng.uniform(-0.3, 0.2)};
  const detail::Color pants = detail::rand_color(rng, -0.85, -0.2);
  const detail::Color hair = detail::rand_color(rng, -0.95, -0.4);
  const detail::Color undershirt = detail::rand_color(rng, -0.5, 0.0);

  const int jx = static_cast<int>(rng.below(3)) - 1;  // small placement jitter
  const int jy = static_cast<int>(rng.below(3)) - 1;

  // Legs (lower body, preserved).
  const int ly0 = static_cast<int>(0.64 * h) + jy, ly1 = static_cast<int>(0.97 * h);
  detail::fill_rect_class(s.person, seg, 4, static_cast<int>(0.32 * w) + jx, ly0,
                          static_cast<int>(0.47 * w) + jx, ly1, pants);
  detail::fill_rect_class(s.person, seg, 4, static_cast<int>(0.53 * w) + jx, ly0,
                          static_cast<int>(0.68 * w) + jx, ly1, pants);

  // Torso region; mostly covered by the garment below.
  const int tx0 = static_cast<int>(0.28 * w) + jx, tx1 = static_cast<int>(0.72 * w) + jx;
  const int ty0 = static_cast<int>(0.25 * h) + jy, ty1 = static_cast<int>(0.62 * h) + jy;
  detail::fill_rect_class(s.person, seg, 2, tx0, ty0, tx1, ty1, undershirt);

  // Arms flanking the torso.
  const int ay0 = ty0 + 1, ay1 = static_cast<int>(0.55 * h) + jy;
  detail::fill_rect_class(s.person, seg, 3, static_cast<int>(0.16 * w) + jx, ay0,
                          tx0 - 1, ay1, skin);
  detail::fill_rect_class(s.person, seg, 3, tx1 + 1, ay0,
                          static_cast<int>(0.84 * w) + jx, ay1, skin);

  // Head with a hair cap (preserved).
  const double hcx = 0.5 * w + jx, hcy = 0.14 * h + jy;
  const double hrx = 0.115 * w, hry = 0.10 * h;
  detail::fill_ellipse_class(s.person, seg, 1, hcx, hcy, hrx, hry, skin);
  detail::fill_ellipse_class(s.person, seg, 1, hcx, hcy - 0.5 * hry, hrx, 0.55 * hry,
                             hair);

  // Pose keypoints: head, neck, hands, hips.
  detail::add_keypoint(s.pose, 0, hcx, hcy);
  detail::add_keypoint(s.pose, 1, 0.5 * w + jx, ty0);
  detail::add_keypoint(s.pose, 2, 0.21 * w + jx, ay1);
  detail::add_keypoint(s.pose, 3, 0.79 * w + jx, ay1);
  detail::add_keypoint(s.pose, 4, tx0 + 1, ty1);
  detail::add_keypoint(s.pose, 5, tx1 - 1, ty1);

  // The garment and its known placement warp: an affine map of the torso box
  // onto the garment rectangle plus a horizontal sinusoidal bend.
  int gx0, gy0, gx1, gy1;
  s.clothes = detail::render_garment<T>(rng, h, w, gx0, gy0, gx1, gy1);
  const double amp = rng.uniform(0.5, 1.8);
  const double cycles = 1.0 + static_cast<double>(rng.below(2));
  const double phase = rng.uniform(0.0, 6.283185307179586);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = static_cast<double>(x - tx0) / (tx1 - tx0);
      const double v = static_cast<double>(y - ty0) / (ty1 - ty0);
      const double sx = gx0 + u * (gx1 - gx0) + amp * std::sin(6.283185307179586 * v * cycles + phase);
      const double sy = gy0 + v * (gy1 - gy0);
      s.gt_flow.at(0, 0, y, x) = T(2.0 * (sx - x) / (w - 1));
      s.gt_flow.at(0, 1, y, x) = T(2.0 * (sy - y) / (h - 1));
    }

  // Compose: sample the garment through the warp and paste it wherever the
  // warp lands strictly inside the garment rectangle and the torso box.
  Tensor<T> support(Shape{1, 1, h, w});
  for (int y = gy0; y <= gy1; ++y)
    for (int x = gx0; x <= gx1; ++x) support.at(0, 0, y, x) = T(1);
  auto warped = grid_sample(s.clothes, s.gt_flow);
  auto wsupport = grid_sample(support, s.gt_flow);
  for (int y = ty0; y <= std::min(ty1, h - 1); ++y)
    for (int x = std::max(0, tx0); x <= std::min(tx1, w - 1); ++x) {
      if (y < 0 || wsupport.at(0, 0, y, x) <= T(0.999)) continue;
      for (int c = 0; c < 3; ++c) s.person.at(0, c, y, x) = warped.at(0, c, y, x);
      s.garment_mask.at(0, 0, y, x) = T(1);
      seg[y * w + x] = 2;
    }

  // Preserved region: head + lower body.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int cls = seg[y * w + x];
      s.segmentation.at(0, cls, y, x) = T(1);
      if (cls == 1 || cls == 4) s.preserved_mask.at(0, 0, y, x) = T(1);
    }

  // Parsing corruption: shift the whole segmentation stack and erode the
  // garment class. The displacement scales with the image so the damaged
  // parse genuinely contradicts the photo instead of being absorbable as
  // per-sample noise. The random draws happen unconditionally so a sample
  // differs from its uncorrupted twin only in the parsing channels.
  const bool corrupt = rng.uniform() < cfg.corruption_prob;
  const int my = std::max(2, h / 8), mx = std::max(2, w / 8);
  const int sdx = (rng.bernoulli(0.5) ? 1 : -1) *
                  (mx + static_cast<int>(rng.below(static_cast<std::uint64_t>(mx) / 2 + 1)));
  const int sdy = (rng.bernoulli(0.5) ? 1 : -1) *
                  (my + static_cast<int>(rng.below(static_cast<std::uint64_t>(my) / 2 + 1)));
  if (corrupt) {
    Tensor<T> shifted(Shape{1, 5, h, w});
    for (int c = 0; c < 5; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y - sdy, sx = x - sdx;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            shifted.at(0, c, y, x) = s.segmentation.at(0, c, sy, sx);
        }
    // Two 3x3 erosion passes on the garment class.
    for (int pass = 0; pass < 2; ++pass) {
      Tensor<T> eroded(Shape{1, 1, h, w});
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          T m = T(1);
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              m = std::min(m, (yy >= 0 && yy < h && xx >= 0 && xx < w)
                                  ? shifted.at(0, 2, yy, xx)
                                  : T(0));
            }
          eroded.at(0, 0, y, x) = m;
        }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          shifted.at(0, 2, y, x) = eroded.at(0, 0, y, x);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        s.segmentation.at(0, 2, y, x) = shifted.at(0, 2, y, x);
    for (int c = 0; c < 5; ++c) {
      if (c == 2) continue;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          s.segmentation.at(0, c, y, x) = shifted.at(0, c, y, x);
    }
  }

  // A standalone alternate garment; datasets overwrite this with another
  // sample's garment.
  int ax0, ay0_, ax1, ay1_;
  Rng alt_rng(derive_seed(seed, 17));
  s.alt_clothes = detail::render_garment<T>(alt_rng, h, w, ax0, ay0_, ax1, ay1_);

  return s;
}

// Deterministic dataset: sample i derives its own seed, so the result is
// independent of worker-thread scheduling. FLOWDISTILL_THREADS caps the
// generation workers.
template <typename T>
std::vector<TryOnSample<T>> synth_dataset(int count, std::uint64_t master_seed,
                                          const SynthConfig& cfg) {
  check(count >= 1, "synth_dataset: count must be positive");
  cfg.validate();
  std::vector<TryOnSample<T>> out(count);

  unsigned workers = std::thread::hardware_concurrency();
  if (const char* env = std::getenv("FLOWDISTILL_THREADS")) {
    const long parsed = std::strtol(env, nullptr, 10);
    if (parsed >= 1) workers = static_cast<unsigned>(parsed);
  }
  workers = std::max(1u, std::min(workers, static_cast<unsigned>(count)));

  auto fill = [&](int begin, int end) {
    for (int i = begin; i < end; ++i)
      out[i] = synth_sample<T>(derive_seed(master_seed, static_cast<std::uint64_t>(i)), cfg);
  };
  if (workers == 1) {
    fill(0, count);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (count + static_cast<int>(workers) - 1) / static_cast<int>(workers);
    for (unsigned t = 0; t < workers; ++t) {
      const int begin = static_cast<int>(t) * chunk;
      if (begin >= count) break;
      pool.emplace_back(fill, begin, std::min(count, begin + chunk));
    }
    for (auto& th : pool) th.join();
  }

  // Alternate garments come from other samples in the set (seeded picks).
  if (count >= 2) {
    Rng pick(derive_seed(master_seed, 0x11ee));
    for (int i = 0; i < count; ++i) {
      int j = static_cast<int>(pick.below(static_cast<std::uint64_t>(count - 1)));
      if (j >= i) ++j;
      out[i].alt_clothes = out[j].clothes;
    }
  }
  return out;
}

}  // namespace flowdistill
