#include <cmath>
#include <vector>

#include "doctest.h"
#include "flowdistill/ops.hpp"
#include "testutil.hpp"

using flowdistill::NoGradGuard;
using flowdistill::Rng;
using flowdistill::Shape;
using flowdistill::Tensor;
using flowdistill::Upsample;
using testutil::check_grad;
using testutil::max_abs_diff;
using testutil::rand_away_from_zero;
using testutil::rand_interior_flow;

namespace {

// Direct convolution written as plain nested loops, the reference the fast
// path is checked against.
Tensor<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w,
                        const Tensor<double>& b, int stride, int pad) {
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int hout = (h + 2 * pad - kh) / stride + 1;
  const int wout = (ww + 2 * pad - kw) / stride + 1;
  Tensor<double> out(Shape{n, cout, hout, wout});
  for (int ni = 0; ni < n; ++ni)
    for (int co = 0; co < cout; ++co)
      for (int oy = 0; oy < hout; ++oy)
        for (int ox = 0; ox < wout; ++ox) {
          double acc = b.data()[co];
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride + ky - pad;
                const int ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= ww) continue;
                acc += x.at(ni, ci, iy, ix) * w.at(co, ci, ky, kx);
              }
          out.at(ni, co, oy, ox) = acc;
        }
  return out;
}

// Bilinear sampling reference: unnormalize, clamp to the border, take all
// four taps.
Tensor<double> grid_sample_ref(const Tensor<double>& src, const Tensor<double>& flow) {
  const int n = src.dim(0), c = src.dim(1), hs = src.dim(2), ws = src.dim(3);
  const int ho = flow.dim(2), wo = flow.dim(3);
  Tensor<double> out(Shape{n, c, ho, wo});
  for (int ni = 0; ni < n; ++ni)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const double gx = wo > 1 ? 2.0 * ox / (wo - 1) - 1.0 : -1.0;
        const double gy = ho > 1 ? 2.0 * oy / (ho - 1) - 1.0 : -1.0;
        double ix = (gx + flow.at(ni, 0, oy, ox) + 1.0) * 0.5 * (ws - 1);
        double iy = (gy + flow.at(ni, 1, oy, ox) + 1.0) * 0.5 * (hs - 1);
        ix = std::min(std::max(ix, 0.0), double(ws - 1));
        iy = std::min(std::max(iy, 0.0), double(hs - 1));
        const int x0 = static_cast<int>(std::floor(ix));
        const int y0 = static_cast<int>(std::floor(iy));
        const int x1 = std::min(x0 + 1, ws - 1);
        const int y1 = std::min(y0 + 1, hs - 1);
        const double tx = ix - x0, ty = iy - y0;
        for (int ci = 0; ci < c; ++ci) {
          const double v =
              (1 - ty) * ((1 - tx) * src.at(ni, ci, y0, x0) + tx * src.at(ni, ci, y0, x1)) +
              ty * ((1 - tx) * src.at(ni, ci, y1, x0) + tx * src.at(ni, ci, y1, x1));
          out.at(ni, ci, oy, ox) = v;
        }
      }
  return out;
}

// Correlation reference: zero-padded dot products over channels, scaled by
// 1/C, displacement (dy,dx) stored at channel (dy+d)*(2d+1)+(dx+d).
Tensor<double> correlation_ref(const Tensor<double>& a, const Tensor<double>& b,
                               int d) {
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  const int win = 2 * d + 1;
  Tensor<double> out(Shape{n, win * win, h, w});
  for (int ni = 0; ni < n; ++ni)
    for (int dy = -d; dy <= d; ++dy)
      for (int dx = -d; dx <= d; ++dx)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            const int by = y + dy, bx = x + dx;
            if (by >= 0 && by < h && bx >= 0 && bx < w)
              for (int ci = 0; ci < c; ++ci)
                acc += a.at(ni, ci, y, x) * b.at(ni, ci, by, bx);
            out.at(ni, (dy + d) * win + (dx + d), y, x) = acc / c;
          }
  return out;
}

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("elementwise arithmetic values and gradients") {
  Rng rng(11);
  auto a = rand_away_from_zero(Shape{2, 3}, rng);
  auto b = rand_away_from_zero(Shape{2, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{2, 3}, rng);

  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK((a + b).data()[i] == doctest::Approx(a.data()[i] + b.data()[i]));
    CHECK((a - b).data()[i] == doctest::Approx(a.data()[i] - b.data()[i]));
    CHECK((a * b).data()[i] == doctest::Approx(a.data()[i] * b.data()[i]));
    CHECK((2.5 * a).data()[i] == doctest::Approx(2.5 * a.data()[i]));
  }

  auto loss = [&] { return flowdistill::sum(flowdistill::mul(flowdistill::add(a, b), flowdistill::mul(a, m))); };
  check_grad(a, loss);
  b.zero_grad();
  check_grad(b, loss);

  CHECK_THROWS_WITH_AS(flowdistill::add(a, Tensor<double>(Shape{3, 2})),
                       doctest::Contains("shape mismatch"), std::invalid_argument);
}

TEST_CASE("activations") {
  Tensor<double> x(Shape{5}, std::vector<double>{-2.0, -0.5, 0.0, 0.5, 2.0}, true);
  auto y = flowdistill::leaky_relu(x, 0.1);
  CHECK(y.data()[0] == doctest::Approx(-0.2));
  CHECK(y.data()[1] == doctest::Approx(-0.05));
  CHECK(y.data()[2] == 0.0);
  CHECK(y.data()[3] == 0.5);
  CHECK(y.data()[4] == 2.0);

  Rng rng(3);
  auto z = rand_away_from_zero(Shape{2, 4}, rng, 0.1);
  z.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{2, 4}, rng);
  check_grad(z, [&] { return flowdistill::sum(flowdistill::mul(flowdistill::leaky_relu(z, 0.1), m)); });
  z.zero_grad();
  check_grad(z, [&] { return flowdistill::sum(flowdistill::mul(flowdistill::tanh_op(z), m)); });

  auto t = flowdistill::tanh_op(Tensor<double>(Shape{1}, 100.0));
  CHECK(t.data()[0] == doctest::Approx(1.0));

  Tensor<double> pos(Shape{3}, std::vector<double>{0.25, 1.0, 4.0}, true);
  auto s = flowdistill::sqrt_op(pos);
  CHECK(s.data()[0] == doctest::Approx(0.5));
  CHECK(s.data()[2] == doctest::Approx(2.0));
  auto ms = Tensor<double>::randn(Shape{3}, rng);
  check_grad(pos, [&] { return flowdistill::sum(flowdistill::mul(flowdistill::sqrt_op(pos), ms)); },
             1e-6, 1e-4);
}

TEST_CASE("charbonnier penalty") {
  const double eps = 1e-3, alpha = 0.45;
  Tensor<double> zero(Shape{1}, 0.0);
  CHECK(flowdistill::charbonnier(zero, eps, alpha).data()[0] ==
        doctest::Approx(std::pow(eps * eps, alpha)));

  Tensor<double> x(Shape{3}, std::vector<double>{-1.5, 0.2, 3.0});
  auto y = flowdistill::charbonnier(x, eps, alpha);
  for (int i = 0; i < 3; ++i)
    CHECK(y.data()[i] ==
          doctest::Approx(std::pow(x.data()[i] * x.data()[i] + eps * eps, alpha)));

  Rng rng(5);
  auto g = rand_away_from_zero(Shape{2, 3}, rng, 0.05);
  g.set_requires_grad(true);
  check_grad(g, [&] { return flowdistill::sum(flowdistill::charbonnier(g, eps, alpha)); });
}

TEST_CASE("reductions and l1 loss") {
  Rng rng(17);
  auto x = rand_away_from_zero(Shape{3, 4}, rng);
  x.set_requires_grad(true);

  CHECK(flowdistill::mean(x).item() == doctest::Approx(flowdistill::sum(x).item() / 12.0));
  double sq = 0.0;
  for (double v : x.data()) sq += v * v;
  CHECK(flowdistill::sum_squares(x).item() == doctest::Approx(sq));

  check_grad(x, [&] { return flowdistill::mean(flowdistill::mul(x, x)); });
  x.zero_grad();
  check_grad(x, [&] { return flowdistill::sum_squares(x); });

  // keep |a-b| bounded away from 0 so the FD probe stays on one side
  auto a = rand_away_from_zero(Shape{2, 5}, rng, 0.5, 1.0);
  Tensor<double> b(Shape{2, 5}, 0.0);
  a.set_requires_grad(true);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a.data()[i]);
  CHECK(flowdistill::l1_loss(a, b).item() == doctest::Approx(acc / 10.0));
  check_grad(a, [&] { return flowdistill::l1_loss(a, b); });
}

TEST_CASE("conv2d hand values") {
  Tensor<double> x(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
  Tensor<double> b(Shape{1}, 0.0);
  auto y = flowdistill::conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0));

  // 1x1 identity kernel passes the input through
  Rng rng(23);
  auto img = Tensor<double>::randn(Shape{2, 1, 4, 5}, rng);
  Tensor<double> id(Shape{1, 1, 1, 1}, 1.0);
  auto out = flowdistill::conv2d(img, id, b, 1, 0);
  CHECK(max_abs_diff(out, img) == 0.0);

  // bias shows up untouched on zero input
  Tensor<double> zx(Shape{1, 2, 3, 3}, 0.0);
  auto wz = Tensor<double>::randn(Shape{4, 2, 3, 3}, rng);
  Tensor<double> bias(Shape{4}, std::vector<double>{1, -2, 3, -4});
  auto yb = flowdistill::conv2d(zx, wz, bias, 1, 1);
  for (int co = 0; co < 4; ++co)
    for (int i = 0; i < 9; ++i)
      CHECK(yb.data()[co * 9 + i] == doctest::Approx(bias.data()[co]));
}

TEST_CASE("conv2d matches the nested-loop reference") {
  Rng rng(29);
  for (const auto& [stride, pad] : std::vector<std::pair<int, int>>{{1, 0}, {1, 1}, {2, 1}, {2, 0}}) {
    auto x = Tensor<double>::randn(Shape{2, 3, 7, 6}, rng);
    auto w = Tensor<double>::randn(Shape{4, 3, 3, 3}, rng);
    auto b = Tensor<double>::randn(Shape{4}, rng);
    auto fast = flowdistill::conv2d(x, w, b, stride, pad);
    auto ref = conv_ref(x, w, b, stride, pad);
    REQUIRE(fast.shape() == ref.shape());
    CHECK(max_abs_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("conv2d gradients") {
  Rng rng(31);
  auto x = Tensor<double>::randn(Shape{1, 2, 5, 4}, rng);
  auto w = Tensor<double>::randn(Shape{3, 2, 3, 3}, rng, 0.5);
  auto b = Tensor<double>::randn(Shape{3}, rng);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{1, 3, 3, 2}, rng);
  auto loss = [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::conv2d(x, w, b, 2, 1), m));
  };
  check_grad(x, loss);
  w.zero_grad();
  b.zero_grad();
  check_grad(w, loss);
  b.zero_grad();
  check_grad(b, loss);
}

TEST_CASE("conv2d rejects mismatched shapes") {
  Tensor<double> x(Shape{1, 3, 4, 4});
  Tensor<double> w(Shape{2, 4, 3, 3});
  Tensor<double> b(Shape{2});
  CHECK_THROWS_WITH_AS(flowdistill::conv2d(x, w, b, 1, 1),
                       doctest::Contains("channels mismatch"), std::invalid_argument);
  Tensor<double> w2(Shape{2, 3, 3, 3});
  Tensor<double> b2(Shape{3});
  CHECK_THROWS_WITH_AS(flowdistill::conv2d(x, w2, b2, 1, 1),
                       doctest::Contains("bias"), std::invalid_argument);
  Tensor<double> tiny(Shape{1, 3, 2, 2});
  CHECK_THROWS_WITH_AS(flowdistill::conv2d(tiny, w2, b, 1, 0),
                       doctest::Contains("larger than"), std::invalid_argument);
}

TEST_CASE("grid_sample with zero flow is a bitwise identity") {
  Rng rng(37);
  auto src = Tensor<double>::randn(Shape{2, 3, 5, 7}, rng);
  Tensor<double> flow(Shape{2, 2, 5, 7}, 0.0);
  auto out = flowdistill::grid_sample(src, flow);
  REQUIRE(out.shape() == src.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == src.data()[i]);  // exact, not approximate
}

TEST_CASE("grid_sample shifts by whole pixels") {
  // flow_x = 2/(W-1) moves sampling one pixel right; border clamps.
  const int h = 4, w = 5;
  Rng rng(41);
  auto src = Tensor<double>::randn(Shape{1, 1, h, w}, rng);
  Tensor<double> flow(Shape{1, 2, h, w}, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) flow.at(0, 0, y, x) = 2.0 / (w - 1);
  auto out = flowdistill::grid_sample(src, flow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      CHECK(out.at(0, 0, y, x) == doctest::Approx(src.at(0, 0, y, std::min(x + 1, w - 1))));
}

TEST_CASE("grid_sample matches the reference on random flows") {
  Rng rng(43);
  auto src = Tensor<double>::randn(Shape{2, 3, 6, 5}, rng);
  auto flow = rand_interior_flow(2, 6, 5, rng);
  auto out = flowdistill::grid_sample(src, flow);
  auto ref = grid_sample_ref(src, flow);
  CHECK(max_abs_diff(out, ref) < 1e-12);

  // far out-of-range flow clamps to the border pixel
  Tensor<double> big(Shape{1, 2, 3, 3}, 5.0);
  auto clamped = flowdistill::grid_sample(Tensor<double>(Shape{1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}), big);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) CHECK(clamped.at(0, 0, y, x) == 9.0);
}

TEST_CASE("grid_sample gradients") {
  Rng rng(47);
  auto src = Tensor<double>::randn(Shape{1, 2, 5, 6}, rng);
  auto flow = rand_interior_flow(1, 5, 6, rng);
  src.set_requires_grad(true);
  flow.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{1, 2, 5, 6}, rng);
  auto loss = [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::grid_sample(src, flow), m));
  };
  check_grad(src, loss);
  src.zero_grad();
  check_grad(flow, loss);
}

TEST_CASE("grid_sample rejects bad flow shapes") {
  Tensor<double> src(Shape{1, 3, 4, 4});
  CHECK_THROWS_WITH_AS(flowdistill::grid_sample(src, Tensor<double>(Shape{1, 3, 4, 4})),
                       doctest::Contains("2 channels"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(flowdistill::grid_sample(src, Tensor<double>(Shape{2, 2, 4, 4})),
                       doctest::Contains("batch"), std::invalid_argument);
}

TEST_CASE("correlation hand value and layout") {
  // Single channel, 2x2, radius 1: displacement (0,1) lands in channel 5.
  Tensor<double> a(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> b(Shape{1, 1, 2, 2}, std::vector<double>{10, 20, 30, 40});
  auto c = flowdistill::correlation(a, b, 1);
  REQUIRE(c.shape() == Shape{1, 9, 2, 2});
  CHECK(c.at(0, 4, 0, 0) == doctest::Approx(1.0 * 10.0));   // (0,0)
  CHECK(c.at(0, 5, 0, 0) == doctest::Approx(1.0 * 20.0));   // (0,+1)
  CHECK(c.at(0, 7, 0, 0) == doctest::Approx(1.0 * 30.0));   // (+1,0)
  CHECK(c.at(0, 8, 0, 0) == doctest::Approx(1.0 * 40.0));   // (+1,+1)
  CHECK(c.at(0, 0, 0, 0) == 0.0);                            // (-1,-1) off grid
  CHECK(c.at(0, 1, 1, 0) == doctest::Approx(3.0 * 10.0));   // (-1,0)
}

TEST_CASE("correlation matches the reference and scales by channels") {
  Rng rng(53);
  auto a = Tensor<double>::randn(Shape{2, 4, 5, 6}, rng);
  auto b = Tensor<double>::randn(Shape{2, 4, 5, 6}, rng);
  for (int d : {1, 2}) {
    auto fast = flowdistill::correlation(a, b, d);
    auto ref = correlation_ref(a, b, d);
    REQUIRE(fast.shape() == ref.shape());
    CHECK(max_abs_diff(fast, ref) < 1e-12);
  }
}

TEST_CASE("correlation swap identity") {
  // corr(a,b) at displacement (dy,dx), pixel t equals corr(b,a) at (-dy,-dx),
  // pixel t+(dy,dx) wherever both are in range.
  Rng rng(59);
  auto a = Tensor<double>::randn(Shape{1, 3, 4, 5}, rng);
  auto b = Tensor<double>::randn(Shape{1, 3, 4, 5}, rng);
  const int d = 1, win = 2 * d + 1;
  auto ab = flowdistill::correlation(a, b, d);
  auto ba = flowdistill::correlation(b, a, d);
  for (int dy = -d; dy <= d; ++dy)
    for (int dx = -d; dx <= d; ++dx)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
          const int ty = y + dy, tx = x + dx;
          if (ty < 0 || ty >= 4 || tx < 0 || tx >= 5) continue;
          const int fwd = (dy + d) * win + (dx + d);
          const int rev = (-dy + d) * win + (-dx + d);
          CHECK(ab.at(0, fwd, y, x) == doctest::Approx(ba.at(0, rev, ty, tx)));
        }
}

TEST_CASE("correlation gradients") {
  Rng rng(61);
  auto a = Tensor<double>::randn(Shape{1, 3, 4, 4}, rng);
  auto b = Tensor<double>::randn(Shape{1, 3, 4, 4}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{1, 9, 4, 4}, rng);
  auto loss = [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::correlation(a, b, 1), m));
  };
  check_grad(a, loss);
  a.zero_grad();
  check_grad(b, loss);
}

TEST_CASE("upsample2x nearest replicates blocks") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto y = flowdistill::upsample2x(x, Upsample::kNearest);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == want[i]);
}

TEST_CASE("upsample2x bilinear keeps constants and interpolates midpoints") {
  Tensor<double> c(Shape{2, 3, 3, 4}, 2.5);
  auto yc = flowdistill::upsample2x(c, Upsample::kBilinear);
  for (double v : yc.data()) CHECK(v == doctest::Approx(2.5));

  // 1-D ramp along x: interior outputs sit halfway between neighbors.
  Tensor<double> ramp(Shape{1, 1, 1, 4}, std::vector<double>{0, 1, 2, 3});
  auto yr = flowdistill::upsample2x(ramp, Upsample::kBilinear);
  REQUIRE(yr.shape() == Shape{1, 1, 2, 8});
  CHECK(yr.at(0, 0, 0, 0) == doctest::Approx(0.0));    // clamped edge
  CHECK(yr.at(0, 0, 0, 1) == doctest::Approx(0.25));
  CHECK(yr.at(0, 0, 0, 2) == doctest::Approx(0.75));
  CHECK(yr.at(0, 0, 0, 3) == doctest::Approx(1.25));
  CHECK(yr.at(0, 0, 0, 7) == doctest::Approx(3.0));
}

TEST_CASE("upsample2x gradients") {
  Rng rng(67);
  auto x = Tensor<double>::randn(Shape{1, 2, 3, 3}, rng);
  x.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{1, 2, 6, 6}, rng);
  for (auto mode : {Upsample::kNearest, Upsample::kBilinear}) {
    x.zero_grad();
    check_grad(x, [&] {
      return flowdistill::sum(flowdistill::mul(flowdistill::upsample2x(x, mode), m));
    });
  }
}

TEST_CASE("avg_pool and nearest downsample") {
  Tensor<double> x(Shape{1, 1, 2, 4},
                   std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  auto p = flowdistill::avg_pool(x, 2);
  REQUIRE(p.shape() == Shape{1, 1, 1, 2});
  CHECK(p.data()[0] == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
  CHECK(p.data()[1] == doctest::Approx((3 + 4 + 7 + 8) / 4.0));

  auto dnn = flowdistill::downsample_nearest(x, 2);
  REQUIRE(dnn.shape() == Shape{1, 1, 1, 2});
  CHECK(dnn.data()[0] == 1.0);
  CHECK(dnn.data()[1] == 3.0);

  CHECK_THROWS_WITH_AS(flowdistill::avg_pool(Tensor<double>(Shape{1, 1, 3, 4}), 2),
                       doctest::Contains("not divisible"), std::invalid_argument);

  Rng rng(71);
  auto g = Tensor<double>::randn(Shape{1, 2, 4, 4}, rng);
  g.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{1, 2, 2, 2}, rng);
  check_grad(g, [&] { return flowdistill::sum(flowdistill::mul(flowdistill::avg_pool(g, 2), m)); });
  g.zero_grad();
  check_grad(g, [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::downsample_nearest(g, 2), m));
  });
}

TEST_CASE("concat_channels layout and gradients") {
  Rng rng(73);
  auto a = Tensor<double>::randn(Shape{2, 2, 3, 3}, rng);
  auto b = Tensor<double>::randn(Shape{2, 1, 3, 3}, rng);
  auto c = Tensor<double>::randn(Shape{2, 3, 3, 3}, rng);
  auto cat = flowdistill::concat_channels({a, b, c});
  REQUIRE(cat.shape() == Shape{2, 6, 3, 3});
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        CHECK(cat.at(n, 0, y, x) == a.at(n, 0, y, x));
        CHECK(cat.at(n, 1, y, x) == a.at(n, 1, y, x));
        CHECK(cat.at(n, 2, y, x) == b.at(n, 0, y, x));
        CHECK(cat.at(n, 3, y, x) == c.at(n, 0, y, x));
        CHECK(cat.at(n, 5, y, x) == c.at(n, 2, y, x));
      }

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{2, 6, 3, 3}, rng);
  auto loss = [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::concat_channels({a, b, c}), m));
  };
  check_grad(a, loss);
  a.zero_grad();
  check_grad(b, loss);

  CHECK_THROWS_WITH_AS(flowdistill::concat_channels(a, Tensor<double>(Shape{2, 1, 4, 3})),
                       doctest::Contains("incompatible"), std::invalid_argument);
}

TEST_CASE("stack_batch layout and gradients") {
  Rng rng(74);
  auto a = Tensor<double>::randn(Shape{1, 2, 3, 3}, rng);
  auto b = Tensor<double>::randn(Shape{2, 2, 3, 3}, rng);
  auto s = flowdistill::stack_batch<double>({a, b});
  REQUIRE(s.shape() == Shape{3, 2, 3, 3});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        CHECK(s.at(0, c, y, x) == a.at(0, c, y, x));
        CHECK(s.at(1, c, y, x) == b.at(0, c, y, x));
        CHECK(s.at(2, c, y, x) == b.at(1, c, y, x));
      }

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{3, 2, 3, 3}, rng);
  auto loss = [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::stack_batch<double>({a, b}), m));
  };
  check_grad(a, loss);
  a.zero_grad();
  check_grad(b, loss);

  CHECK_THROWS_WITH_AS(flowdistill::stack_batch<double>({a, Tensor<double>(Shape{1, 2, 4, 3})}),
                       doctest::Contains("incompatible"), std::invalid_argument);
}

TEST_CASE("instance_norm statistics and gradients") {
  Rng rng(75);
  auto x = Tensor<double>::randn(Shape{2, 3, 4, 5}, rng, 2.5, -1.0);
  auto y = flowdistill::instance_norm(x);
  REQUIRE(y.shape() == x.shape());

  // Each (sample, channel) plane comes out zero-mean, unit-variance (up to
  // the eps cushion), and matches the direct two-pass computation.
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double mu = 0.0, var = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) mu += x.at(n, c, i, j);
      mu /= 20.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
          const double d = x.at(n, c, i, j) - mu;
          var += d * d;
        }
      var /= 20.0;
      double omu = 0.0, ovar = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
          const double expect = (x.at(n, c, i, j) - mu) / std::sqrt(var + 1e-5);
          CHECK(std::abs(y.at(n, c, i, j) - expect) < 1e-12);
          omu += y.at(n, c, i, j);
          ovar += y.at(n, c, i, j) * y.at(n, c, i, j);
        }
      CHECK(std::abs(omu / 20.0) < 1e-12);
      CHECK(std::abs(ovar / 20.0 - var / (var + 1e-5)) < 1e-10);
    }

  x.set_requires_grad(true);
  auto m = Tensor<double>::randn(Shape{2, 3, 4, 5}, rng);
  check_grad(x, [&] {
    return flowdistill::sum(flowdistill::mul(flowdistill::instance_norm(x), m));
  });

  // A constant plane normalizes to zero through the eps cushion; a dyadic
  // constant keeps the mean subtraction exact so the zeros are bitwise.
  Tensor<double> flat(Shape{1, 1, 3, 3});
  for (auto& v : flat.data()) v = 0.75;
  auto fy = flowdistill::instance_norm(flat);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(fy.at(0, 0, i, j) == 0.0);

  CHECK_THROWS_WITH_AS(flowdistill::instance_norm(Tensor<double>(Shape{2, 3, 4})),
                       doctest::Contains("NCHW"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(flowdistill::instance_norm(x, 0.0),
                       doctest::Contains("eps"), std::invalid_argument);
}

}  // TEST_SUITE
