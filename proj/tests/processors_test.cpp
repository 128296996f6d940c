#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <swrgbd/processors.hpp>

#include "gradcheck.hpp"

#include <cstdio>
#include <random>

using namespace swrgbd;
using swrgbd::testing::random_tensor;
using DT = Tensor<double>;

namespace {

FramePlanes<double> random_frame(int h, int w, std::mt19937& rng) {
  FramePlanes<double> f;
  f.color_l = swrgbd::testing::random_tensor({3, h, w}, rng, 0.0, 1.0);
  f.color_r = swrgbd::testing::random_tensor({3, h, w}, rng, 0.0, 1.0);
  std::uniform_real_distribution<double> uz(1.0, 4.0);
  for (auto* d : {&f.depth_l, &f.depth_r}) {
    d->values = DT::uninit({1, h, w});
    d->validity = DT::ones({1, h, w});
    for (int64_t i = 0; i < d->values.size(); ++i) d->values.at(i) = uz(rng);
  }
  return f;
}

}  // namespace

TEST_CASE("U-Net layer shapes follow the architecture table at 64x64") {
  std::mt19937 rng(1);
  auto unet = UNet<float>::make(12, 12, rng);
  auto x = swrgbd::testing::random_tensor_s<float>({1, 12, 64, 64}, rng, -0.5f, 0.5f);
  auto y = unet.forward(x);
  CHECK(y.shape() == Shape{1, 12, 64, 64});

  // Spot the internal stage extents via the parameter shapes.
  CHECK(unet.c1.w.shape() == Shape{64, 12, 3, 3});
  CHECK(unet.c3.w.shape() == Shape{128, 64, 5, 5});
  CHECK(unet.c9.w.shape() == Shape{512, 512, 5, 5});
  CHECK(unet.t11.w.shape() == Shape{512, 512, 5, 5});
  CHECK(unet.c13.w.shape() == Shape{512, 1024, 3, 3});
  CHECK(unet.c23.w.shape() == Shape{12, 64, 3, 3});
}

TEST_CASE("MLP keeps spatial extents and uses hidden width 512") {
  std::mt19937 rng(2);
  auto mlp = Mlp<float>::make(6, rng);
  CHECK(mlp.l1.w.shape() == Shape{512, 6, 1, 1});
  CHECK(mlp.l2.w.shape() == Shape{6, 512, 1, 1});
  auto x = swrgbd::testing::random_tensor_s<float>({1, 6, 24, 24}, rng);
  CHECK(mlp.forward(x).shape() == Shape{1, 6, 24, 24});
}

TEST_CASE("default pair parameter count matches the frozen table-derived constant") {
  // Independently derived from the layer tables: two U-Nets of 33,487,116
  // parameters, two C=6 MLPs (6,662 each) and one C=12 MLP (12,812).
  int64_t unet = 0;
  const int conv[][4] = {{64, 12, 3, 1},   {64, 64, 3, 1},   {128, 64, 5, 2},
                         {128, 128, 3, 1}, {256, 128, 5, 2}, {256, 256, 3, 1},
                         {512, 256, 5, 2}, {512, 512, 3, 1}, {512, 512, 5, 2},
                         {512, 512, 3, 1}, {512, 512, 5, 0}, {512, 1024, 3, 1},
                         {256, 512, 5, 0}, {256, 512, 3, 1}, {128, 256, 5, 0},
                         {128, 256, 3, 1}, {64, 128, 5, 0},  {64, 128, 3, 1},
                         {12, 64, 3, 1}};
  for (auto& l : conv) unet += (int64_t)l[0] * l[1] * l[2] * l[2] + l[0];
  CHECK(unet == 33487116);
  auto mlp_params = [](int64_t c) { return 512 * c + 512 + c * 512 + c; };
  const int64_t expected = 2 * unet + 2 * mlp_params(6) + mlp_params(12);
  CHECK(expected == 67000368);

  auto pair = build_variant<float>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                   4.0, 2.0, 7);
  CHECK(pair.param_count() == expected);
}

TEST_CASE("preprocess emits two 6-channel groups of clamped codes") {
  std::mt19937 rng(3);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 11);
  auto x = random_tensor({12, 32, 32}, rng, 0.0, 1.0);
  auto codes = pair.preprocess(x);
  CHECK(codes.shape() == Shape{12, 32, 32});
  for (int64_t i = 0; i < codes.size(); ++i) {
    CHECK(codes.at(i) >= 0.0);
    CHECK(codes.at(i) <= 1.0);
  }
}

TEST_CASE("zero parameters give zero codes") {
  std::mt19937 rng(4);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 5);
  pair.visit_params([](const std::string&, DT& t) { t.array().setZero(); });
  auto x = random_tensor({12, 16, 16}, rng, 0.0, 1.0);
  auto codes = pair.preprocess(x);
  for (int64_t i = 0; i < codes.size(); ++i) CHECK(codes.at(i) == 0.0);
}

TEST_CASE("K=6 zeroes the trailing channels") {
  std::mt19937 rng(5);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 6,
                                    4.0, 2.0, 13);
  auto x = random_tensor({12, 16, 16}, rng, 0.0, 1.0);
  auto codes = pair.preprocess(x);
  for (int c = 6; c < 12; ++c)
    for (int i = 0; i < 256; ++i) CHECK(codes.at3(c, i / 16, i % 16) == 0.0);
}

TEST_CASE("channel-count mismatch raises a configuration error") {
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 1);
  auto bad = DT::zeros({2, 16, 16});
  CHECK_THROWS_WITH_AS(pair.preprocess(bad), doctest::Contains("canonicalized"), ShapeError);
}

TEST_CASE("variant wiring") {
  auto four = build_variant<double>(ArchVariant::four_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 2);
  CHECK(four.pre_mlps.size() == 4);
  CHECK(four.pre_mlps[0].l1.w.shape() == Shape{512, 3, 1, 1});
  CHECK(four.pre_mlps[0].l2.w.shape() == Shape{3, 512, 1, 1});

  auto single = build_variant<double>(ArchVariant::single_mlp, GeometryMode::world, false,
                                      12, 4.0, 2.0, 3);
  CHECK(single.pre_mlps.size() == 1);
  CHECK(single.pre_mlps[0].l1.w.shape() == Shape{512, 12, 1, 1});

  auto col = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, true, 6, 4.0,
                                   2.0, 4);
  CHECK(col.width() == 6);
  CHECK(col.pre_mlps.size() == 1);
  std::mt19937 rng(6);
  auto x = random_tensor({6, 16, 16}, rng, 0.0, 1.0);
  CHECK(col.preprocess(x).shape() == Shape{6, 16, 16});

  CHECK_THROWS_AS(build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 7,
                                        4.0, 2.0, 1),
                  ShapeError);
}

TEST_CASE("canonical_input layouts per geometry mode") {
  std::mt19937 rng(7);
  CameraRig rig = CameraRig::make_default(16, 16, 40.0);
  auto f = random_frame(16, 16, rng);
  auto world = canonical_input(f, rig, GeometryMode::world, false);
  CHECK(world.shape() == Shape{12, 16, 16});
  auto cam = canonical_input(f, rig, GeometryMode::camera, false);
  CHECK(cam.shape() == Shape{12, 16, 16});
  auto dep = canonical_input(f, rig, GeometryMode::depth, false);
  CHECK(dep.shape() == Shape{12, 16, 16});
  // Depth mode: channels 8..11 are the zero padding.
  for (int c = 8; c < 12; ++c) CHECK(dep.at3(c, 5, 5) == 0.0);
  auto col = canonical_input(f, rig, GeometryMode::world, true);
  CHECK(col.shape() == Shape{6, 16, 16});
}

TEST_CASE("postprocess yields the frame shape contract") {
  std::mt19937 rng(8);
  CameraRig rig = CameraRig::make_default(16, 16, 40.0);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 21);
  auto codes = random_tensor({12, 16, 16}, rng, 0.0, 1.0);
  auto rec = postprocess(codes, rig, pair);
  CHECK(rec.color_l.shape() == Shape{3, 16, 16});
  CHECK(rec.color_r.shape() == Shape{3, 16, 16});
  CHECK(rec.has_depth);
  CHECK(rec.depth_l.values.shape() == Shape{1, 16, 16});
  CHECK(rec.depth_r.values.shape() == Shape{1, 16, 16});
}

TEST_CASE("zero-parameter postprocess reproduces the denormalization constants") {
  CameraRig rig = CameraRig::make_default(16, 16, 40.0);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 22);
  pair.visit_params([](const std::string&, DT& t) { t.array().setZero(); });
  auto codes = DT::full({12, 16, 16}, 0.3);
  auto rec = postprocess(codes, rig, pair);
  // Raw outputs are all zero; world coords denormalize to the rig midpoint,
  // whose camera-frame z is 0 -> everything lands at z=0, invalid.
  CHECK(rec.color_l.at(0) == 0.0);
  const Eigen::Vector3d mid_cam = rig.pose_left.inverse().apply(rig.midpoint());
  CHECK(rec.depth_l.values.at(0) == doctest::Approx(mid_cam.z()));
  CHECK(rec.depth_l.validity.at(0) == 0.0);
}

TEST_CASE("processors are pure: same input, bit-identical output") {
  std::mt19937 rng(9);
  auto pair = build_variant<float>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                   4.0, 2.0, 33);
  auto x = swrgbd::testing::random_tensor_s<float>({12, 32, 32}, rng, 0.0f, 1.0f);
  auto c1 = pair.preprocess(x);
  auto c2 = pair.preprocess(x);
  for (int64_t i = 0; i < c1.size(); ++i) REQUIRE(c1.at(i) == c2.at(i));
}

TEST_CASE("non-multiple-of-16 inputs are padded and cropped back") {
  std::mt19937 rng(10);
  auto pair = build_variant<float>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                   4.0, 2.0, 34);
  auto x = swrgbd::testing::random_tensor_s<float>({12, 20, 24}, rng, 0.0f, 1.0f);
  auto codes = pair.preprocess(x);
  CHECK(codes.shape() == Shape{12, 20, 24});
  CHECK(pair.postprocess_raw(codes).shape() == Shape{12, 20, 24});
}

TEST_CASE("end-to-end chain is differentiable (tiny pair surrogate)") {
  // Gradient check through preprocess -> postprocess on a 16x16 input with
  // a small random sample of the 67M parameters.
  std::mt19937 rng(11);
  auto pair = build_variant<double>(ArchVariant::two_mlp, GeometryMode::world, false, 12,
                                    4.0, 2.0, 55);
  // Shrink parameter magnitudes for a well-conditioned check.
  pair.visit_params([&](const std::string&, DT& t) { t.array() *= 0.25; });
  auto x = random_tensor({12, 16, 16}, rng, 0.0, 1.0);
  auto target = random_tensor({12, 16, 16}, rng, 0.0, 1.0);

  auto loss_fn = [&] { return mse(pair.postprocess_raw(pair.preprocess(x)), target); };
  // Pick a handful of parameters across the pair.
  std::vector<DT*> params = pair.parameters();
  std::vector<DT*> sample = {params[0], params[5], params[20], params.back()};
  auto res = swrgbd::testing::check_gradients(loss_fn, sample, 1e-4, 3, &rng);
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("checkpoint round trip preserves parameters and metadata") {
  auto pair = build_variant<float>(ArchVariant::four_mlp, GeometryMode::camera, false, 9,
                                   8.0, 1.5, 77);
  const std::string path = "ckpt_test.swckpt";
  save_checkpoint(path, pair);
  auto back = load_checkpoint<float>(path);
  CHECK(back.arch == ArchVariant::four_mlp);
  CHECK(back.geometry == GeometryMode::camera);
  CHECK(back.K == 9);
  CHECK(back.gamma == 8.0);
  CHECK(back.scene_scale == 1.5);
  CHECK(pair_identity_hash(back) == pair_identity_hash(pair));

  auto pa = pair.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  int64_t mismatches = 0;
  for (size_t i = 0; i < pa.size(); ++i)
    for (int64_t j = 0; j < pa[i]->size(); ++j) mismatches += pa[i]->at(j) != pb[i]->at(j);
  CHECK(mismatches == 0);
  std::remove(path.c_str());
}
