#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <swrgbd/training.hpp>

#include "gradcheck.hpp"

#include <random>

using namespace swrgbd;
using DT = Tensor<double>;

namespace {

DepthMap<double> const_depth(int h, int w, double z) {
  DepthMap<double> d;
  d.values = DT::full({1, h, w}, z);
  d.validity = DT::ones({1, h, w});
  return d;
}

// Tiny textured stereo frame; colors in [0,1], mild depth relief.
FramePlanes<double> toy_frame(int h, int w, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  FramePlanes<double> f;
  f.color_l = DT::uninit({3, h, w});
  f.color_r = DT::uninit({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = 0.5 + 0.4 * std::sin(0.9 * x + 0.7 * y + c + seed);
        f.color_l.at3(c, y, x) = v;
        f.color_r.at3(c, y, x) = std::clamp(v + 0.05 * (u(rng) - 0.5), 0.0, 1.0);
      }
  f.depth_l = const_depth(h, w, 2.0);
  f.depth_r = const_depth(h, w, 2.0);
  for (int64_t i = 0; i < f.depth_l.values.size(); ++i) {
    f.depth_l.values.at(i) += 0.3 * std::sin(0.5 * i);
    f.depth_r.values.at(i) = f.depth_l.values.at(i);
  }
  return f;
}

}  // namespace

TEST_CASE("warping loss vanishes for perfect depth") {
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  auto f = toy_frame(16, 16, 1);
  auto loss = warping_loss(f.color_l, f.depth_l, f.depth_l, rig);
  CHECK(loss.scalar() == doctest::Approx(0.0));
}

TEST_CASE("warping a constant image is insensitive to depth error") {
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  auto flat = DT::full({3, 16, 16}, 0.42);
  auto z = const_depth(16, 16, 2.0);
  auto zbad = const_depth(16, 16, 2.6);
  auto loss = warping_loss(flat, z, zbad, rig);
  CHECK(loss.scalar() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("warping loss matches a brute-force pixelwise oracle on 8x8") {
  CameraRig rig = CameraRig::make_default(8, 8, 100.0, 0.06);
  auto f = toy_frame(8, 8, 3);
  auto zhat = const_depth(8, 8, 0.0);
  for (int64_t i = 0; i < 64; ++i) zhat.values.at(i) = f.depth_l.values.at(i) + 0.1;
  auto loss = warping_loss(f.color_l, f.depth_l, zhat, rig);
  CHECK(loss.scalar() > 0.0);

  // Oracle: resample each pixel with u = (-d, 0) by direct bilinear lookups.
  const double fxb = rig.left.fx * rig.baseline();
  auto sample = [&](int c, double y, double x) {
    x = std::clamp(x, 0.0, 7.0);
    const int x0 = (int)std::floor(x);
    const int x1 = std::min(x0 + 1, 7);
    const double wx = x - x0;
    return f.color_l.at3(c, (int)y, x0) * (1 - wx) + f.color_l.at3(c, (int)y, x1) * wx;
  };
  double acc = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double d = fxb / f.depth_l.values.at3(0, y, x);
        const double dh = fxb / zhat.values.at3(0, y, x);
        const double diff = sample(c, y, x - d) - sample(c, y, x - dh);
        acc += diff * diff;
      }
  acc /= 3 * 64;
  CHECK(loss.scalar() == doctest::Approx(acc).epsilon(1e-9));
}

TEST_CASE("warping loss grows with local image gradient") {
  CameraRig rig = CameraRig::make_default(16, 16, 100.0, 0.06);
  auto z = const_depth(16, 16, 2.0);
  auto zh = const_depth(16, 16, 2.1);
  // Smooth versus sharp horizontal texture at the same depth error.
  auto img_smooth = DT::uninit({3, 16, 16});
  auto img_sharp = DT::uninit({3, 16, 16});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        img_smooth.at3(c, y, x) = 0.5 + 0.4 * std::sin(0.2 * x);
        img_sharp.at3(c, y, x) = 0.5 + 0.4 * std::sin(2.1 * x);
      }
  const double ls = warping_loss(img_smooth, z, zh, rig).scalar();
  const double lf = warping_loss(img_sharp, z, zh, rig).scalar();
  CHECK(lf > ls);
}

TEST_CASE("rd_loss composition and breakdown") {
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  auto gt = toy_frame(16, 16, 5);
  ReconPlanes<double> rec;
  rec.color_l = gt.color_l.detach();
  rec.color_r = gt.color_r.detach();
  rec.depth_l = gt.depth_l;
  rec.depth_r = gt.depth_r;
  rec.has_depth = true;
  auto rate = DT::scalar_tensor(1234.0);

  // Perfect reconstruction: loss reduces to gamma * rate_bpp.
  LossConfig cfg;
  cfg.gamma = 2.0;
  auto parts = rd_loss(gt, rec, rate, cfg, rig);
  CHECK(parts.fd == 0.0);
  CHECK(parts.lwarp == 0.0);
  CHECK(parts.zmse == 0.0);
  CHECK(parts.total.scalar() == doctest::Approx(2.0 * 1234.0 / 256.0));

  // gamma = 0: loss equals D alone.
  ReconPlanes<double> noisy = rec;
  noisy.color_l = DT::full({3, 16, 16}, 0.25);
  LossConfig d_only;
  d_only.gamma = 0.0;
  auto p2 = rd_loss(gt, noisy, rate, d_only, rig);
  CHECK(p2.total.scalar() == doctest::Approx(p2.fd + d_only.alpha * p2.lwarp +
                                             d_only.beta * p2.zmse));
  CHECK(p2.fd > 0.0);

  // The MSE ablation arm (alpha = 0, beta = 1) keeps only color + depth MSE.
  LossConfig mse_arm;
  mse_arm.alpha = 0.0;
  mse_arm.beta = 1.0;
  mse_arm.gamma = 0.0;
  ReconPlanes<double> bad_depth = rec;
  bad_depth.depth_l.values = DT::full({1, 16, 16}, 2.4);
  auto p3 = rd_loss(gt, bad_depth, rate, mse_arm, rig);
  CHECK(p3.total.scalar() == doctest::Approx(p3.fd + p3.zmse));

  // Components are individually nonnegative.
  for (double v : {p3.fd, p3.lwarp, p3.zmse, p3.rate_bpp}) CHECK(v >= 0.0);
}

TEST_CASE("total-loss gradients on sampled parameters vs finite differences") {
  std::mt19937 rng(9);
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  auto gt = toy_frame(16, 16, 7);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, rig.scene_scale, 41);
  pair.visit_params([](const std::string&, DT& t) { t.array() *= 0.25; });
  LossConfig cfg;
  cfg.gamma = 4.0;

  auto loss_fn = [&] {
    std::mt19937 noise_rng(777);  // frozen noise draw per evaluation
    auto x = canonical_input(gt, rig, pair.geometry, pair.color_only);
    auto codes = pair.preprocess(x);
    auto [rec_codes, rate] =
        proxy_encode_decode(codes, ProxyConfig{8, delta_schedule(cfg.gamma), ProxyMode::noisy},
                            &noise_rng);
    auto rec = postprocess(rec_codes, rig, pair);
    return rd_loss(gt, rec, rate.bits, cfg, rig).total;
  };
  // Joint direction over a sampled 0.1% of all parameters.
  const double rel = swrgbd::testing::directional_gradcheck(loss_fn, pair.parameters(),
                                                            0.001, rng, 1e-4);
  CHECK(rel <= 5e-3);
}

TEST_CASE("short training run reduces the smoothed loss (3 seeds)") {
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  std::vector<FramePlanes<float>> frames;
  for (uint32_t i = 0; i < 4; ++i) {
    auto d = toy_frame(16, 16, 100 + i);
    FramePlanes<float> f;
    f.color_l = d.color_l.cast<float>();
    f.color_r = d.color_r.cast<float>();
    f.depth_l = {d.depth_l.values.cast<float>(), d.depth_l.validity.cast<float>()};
    f.depth_r = {d.depth_r.values.cast<float>(), d.depth_r.validity.cast<float>()};
    frames.push_back(std::move(f));
  }
  for (uint64_t seed : {1u, 2u, 3u}) {
    auto pair = build_variant<float>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                     4.0, rig.scene_scale, seed);
    TrainConfig tc;
    tc.steps = 200;
    tc.crop = 16;
    tc.seed = seed;
    LossConfig cfg;
    auto result = train_pair(pair, frames, rig, cfg, tc);
    REQUIRE_FALSE(result.diverged);
    REQUIRE((int)result.log.size() == 200);
    auto smoothed = [&](int from, int n) {
      double s = 0;
      for (int i = from; i < from + n; ++i) s += result.log[i].loss;
      return s / n;
    };
    CHECK(smoothed(180, 20) < smoothed(0, 20));
  }
}

TEST_CASE("same seed trains to bit-identical parameters") {
  CameraRig rig = CameraRig::make_default(16, 16, 60.0);
  std::vector<FramePlanes<float>> frames;
  auto d = toy_frame(16, 16, 200);
  FramePlanes<float> f;
  f.color_l = d.color_l.cast<float>();
  f.color_r = d.color_r.cast<float>();
  f.depth_l = {d.depth_l.values.cast<float>(), d.depth_l.validity.cast<float>()};
  f.depth_r = {d.depth_r.values.cast<float>(), d.depth_r.validity.cast<float>()};
  frames.push_back(std::move(f));

  std::string bytes[2];
  for (int run = 0; run < 2; ++run) {
    auto pair = build_variant<float>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                     4.0, rig.scene_scale, 9);
    TrainConfig tc;
    tc.steps = 10;
    tc.crop = 16;
    tc.seed = 9;
    auto result = train_pair(pair, frames, rig, LossConfig{}, tc);
    REQUIRE_FALSE(result.diverged);
    bytes[run] = serialize_checkpoint(pair);
  }
  CHECK(bytes[0] == bytes[1]);
}
