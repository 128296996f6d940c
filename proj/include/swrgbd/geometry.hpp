#pragma once

// Pinhole stereo camera model: depth <-> camera coordinates <-> world
// coordinates, disparity from depth and dense backward warping. The tensor
// ops stay differentiable in depth; rig parameters are fixed doubles.
//
// Conventions: pixel (u,v) = (column, row) indexed from 0, camera looks down
// +z, poses map camera to world (X_w = R X_c + t). Depth maps hold the
// camera-frame z in meters; validity 0 marks backdrop pixels with no geometry.

#include "swrgbd/conv.hpp"
#include "swrgbd/tensor.hpp"

#include <json.hpp>

#include <Eigen/Geometry>

namespace swrgbd {

inline constexpr double kZNear = 0.05;  // meters
inline constexpr double kZFar = 20.0;
inline constexpr double kDefaultSceneScale = 2.0;

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    require(fx > 0 && fy > 0, "intrinsics: focal lengths must be positive");
    require(cx >= 0 && cx < width && cy >= 0 && cy < height,
            "intrinsics: principal point outside the image");
  }
};

struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return R * x + t; }

  RigidTransform inverse() const {
    RigidTransform inv;
    inv.R = R.transpose();
    inv.t = -(R.transpose() * t);
    return inv;
  }

  void validate() const {
    const Eigen::Matrix3d e = R.transpose() * R - Eigen::Matrix3d::Identity();
    require(e.cwiseAbs().maxCoeff() <= 1e-6, "pose: rotation is not orthonormal");
    require(R.determinant() > 0, "pose: rotation determinant must be +1");
  }
};

struct CameraRig {
  CameraIntrinsics left, right;
  RigidTransform pose_left, pose_right;  // camera -> world
  double scene_scale = kDefaultSceneScale;

  void validate() const {
    left.validate();
    right.validate();
    pose_left.validate();
    pose_right.validate();
    require((pose_left.R - pose_right.R).cwiseAbs().maxCoeff() <= 1e-6,
            "rig: stereo pair is not rectified (rotations differ)");
    // Translation between centers must lie along camera x.
    const Eigen::Vector3d d = pose_left.R.transpose() * (pose_right.t - pose_left.t);
    require(std::abs(d.y()) <= 1e-9 + 1e-6 * std::abs(d.x()) &&
                std::abs(d.z()) <= 1e-9 + 1e-6 * std::abs(d.x()),
            "rig: camera offset is not along the rectified x axis");
    require(baseline() > 0, "rig: baseline must be positive");
  }

  double baseline() const { return (pose_left.t - pose_right.t).norm(); }

  Eigen::Vector3d midpoint() const { return 0.5 * (pose_left.t + pose_right.t); }

  const CameraIntrinsics& cam(int view) const { return view == 0 ? left : right; }
  const RigidTransform& pose(int view) const { return view == 0 ? pose_left : pose_right; }

  // A forward-facing rig centered at the origin with the given IPD baseline.
  static CameraRig make_default(int width, int height, double focal_px,
                                double baseline_m = 0.063) {
    CameraRig rig;
    rig.left = {focal_px, focal_px, (width - 1) / 2.0, (height - 1) / 2.0, width, height};
    rig.right = rig.left;
    rig.pose_left.t = Eigen::Vector3d(-baseline_m / 2, 0, 0);
    rig.pose_right.t = Eigen::Vector3d(baseline_m / 2, 0, 0);
    return rig;
  }
};

inline nlohmann::json intrinsics_to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx},
          {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}
inline CameraIntrinsics intrinsics_from_json(const nlohmann::json& j) {
  CameraIntrinsics c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  return c;
}
inline nlohmann::json pose_to_json(const RigidTransform& p) {
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i * 3 + j] = p.R(i, j);
  return {{"R", r}, {"t", {p.t.x(), p.t.y(), p.t.z()}}};
}
inline RigidTransform pose_from_json(const nlohmann::json& j) {
  RigidTransform p;
  const auto& r = j.at("R");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) p.R(i, k) = r.at(i * 3 + k);
  const auto& t = j.at("t");
  p.t = Eigen::Vector3d(t.at(0), t.at(1), t.at(2));
  return p;
}
inline nlohmann::json rig_to_json(const CameraRig& rig) {
  return {{"left", intrinsics_to_json(rig.left)},
          {"right", intrinsics_to_json(rig.right)},
          {"pose_left", pose_to_json(rig.pose_left)},
          {"pose_right", pose_to_json(rig.pose_right)},
          {"scene_scale", rig.scene_scale}};
}
inline CameraRig rig_from_json(const nlohmann::json& j) {
  CameraRig rig;
  rig.left = intrinsics_from_json(j.at("left"));
  rig.right = intrinsics_from_json(j.at("right"));
  rig.pose_left = pose_from_json(j.at("pose_left"));
  rig.pose_right = pose_from_json(j.at("pose_right"));
  rig.scene_scale = j.value("scene_scale", kDefaultSceneScale);
  return rig;
}

template <typename S>
struct DepthMap {
  Tensor<S> values;    // (1,H,W), meters
  Tensor<S> validity;  // (1,H,W), {0,1}, plain data

  int height() const { return values.dim(1); }
  int width() const { return values.dim(2); }
};

enum class FlowSource { ground_truth, reconstructed };

template <typename S>
struct WarpField {
  Tensor<S> flow;  // (2,H,W): channel 0 = x displacement, channel 1 = y
  FlowSource source = FlowSource::ground_truth;
};

// Per-pixel ray table (u-cx)/fx, (v-cy)/fy for a crop at the given origin.
template <typename S>
Tensor<S> pixel_ray_table(const CameraIntrinsics& cam, int h, int w, int origin_x,
                          int origin_y, int axis) {
  Tensor<S> t = Tensor<S>::uninit({1, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      t.at3(0, y, x) = axis == 0 ? S((origin_x + x - cam.cx) / cam.fx)
                                 : S((origin_y + y - cam.cy) / cam.fy);
  return t;
}

// Lifts depth to per-pixel camera-frame (X,Y,Z); differentiable in depth.
// origin_* give the absolute position of a crop inside the full image.
template <typename S>
Tensor<S> depth_to_camera_coords(const DepthMap<S>& depth, const CameraIntrinsics& cam,
                                 int origin_x = 0, int origin_y = 0) {
  const int h = depth.height(), w = depth.width();
  for (int64_t i = 0; i < depth.values.size(); ++i)
    if (depth.validity.at(i) > S(0.5) && !(depth.values.at(i) > S(0)))
      throw std::domain_error("depth_to_camera_coords: nonpositive depth at valid pixel " +
                              std::to_string(i));
  Tensor<S> ax = pixel_ray_table<S>(cam, h, w, origin_x, origin_y, 0);
  Tensor<S> ay = pixel_ray_table<S>(cam, h, w, origin_x, origin_y, 1);
  Tensor<S> X = mul(ax, depth.values);
  Tensor<S> Y = mul(ay, depth.values);
  return concat_channels(concat_channels(X, Y), depth.values);
}

// Applies the rigid transform to a (3,H,W) coordinate map.
template <typename S>
Tensor<S> transform_coords(const Tensor<S>& coords, const RigidTransform& pose) {
  require(coords.rank() == 3 && coords.dim(0) == 3,
          "transform_coords: want (3,H,W), got " + shape_str(coords.shape()));
  pose.validate();
  Tensor<S> ch[3] = {slice_channels(coords, 0, 1), slice_channels(coords, 1, 1),
                     slice_channels(coords, 2, 1)};
  Tensor<S> out[3];
  for (int i = 0; i < 3; ++i) {
    Tensor<S> acc = scale(ch[0], S(pose.R(i, 0)));
    acc = add(acc, scale(ch[1], S(pose.R(i, 1))));
    acc = add(acc, scale(ch[2], S(pose.R(i, 2))));
    out[i] = shift(acc, S(pose.t(i)));
  }
  return concat_channels(concat_channels(out[0], out[1]), out[2]);
}

template <typename S>
Tensor<S> camera_to_world(const Tensor<S>& coords, const RigidTransform& pose) {
  return transform_coords(coords, pose);
}

template <typename S>
Tensor<S> world_to_camera(const Tensor<S>& coords, const RigidTransform& pose) {
  return transform_coords(coords, pose.inverse());
}

// Projects world coordinates back to a per-view depth map. Pixels landing at
// z <= z_near are marked invalid rather than raising.
template <typename S>
DepthMap<S> world_coords_to_depth(const Tensor<S>& world, const RigidTransform& pose,
                                  double z_near = kZNear) {
  Tensor<S> cam = world_to_camera(world, pose);
  DepthMap<S> d;
  d.values = slice_channels(cam, 2, 1);
  d.validity = Tensor<S>::uninit(d.values.shape());
  for (int64_t i = 0; i < d.values.size(); ++i)
    d.validity.at(i) = d.values.at(i) > S(z_near) ? S(1) : S(0);
  return d;
}

// Normalization of world coordinates for network I/O: subtract the rig
// midpoint, divide by the scene scale.
template <typename S>
Tensor<S> normalize_world(const Tensor<S>& world, const CameraRig& rig) {
  const Eigen::Vector3d mid = rig.midpoint();
  Tensor<S> out[3];
  for (int i = 0; i < 3; ++i)
    out[i] = scale(shift(slice_channels(world, i, 1), S(-mid(i))), S(1.0 / rig.scene_scale));
  return concat_channels(concat_channels(out[0], out[1]), out[2]);
}

template <typename S>
Tensor<S> denormalize_world(const Tensor<S>& norm, const CameraRig& rig) {
  const Eigen::Vector3d mid = rig.midpoint();
  Tensor<S> out[3];
  for (int i = 0; i < 3; ++i)
    out[i] = shift(scale(slice_channels(norm, i, 1), S(rig.scene_scale)), S(mid(i)));
  return concat_channels(concat_channels(out[0], out[1]), out[2]);
}

// Rectified-pinhole disparity d = fx * baseline / Z, horizontal only.
// Invalid pixels are evaluated at z_far so the field stays finite there.
template <typename S>
WarpField<S> disparity_from_depth(const DepthMap<S>& depth, const CameraRig& rig,
                                  FlowSource source = FlowSource::ground_truth) {
  rig.validate();
  for (int64_t i = 0; i < depth.values.size(); ++i)
    if (depth.validity.at(i) > S(0.5) && !(depth.values.at(i) > S(0)))
      throw std::domain_error("disparity_from_depth: nonpositive depth at valid pixel " +
                              std::to_string(i));
  const S fxb = S(rig.left.fx * rig.baseline());
  // z_safe = z at valid pixels, z_far elsewhere (mask is constant data).
  Tensor<S> far_fill = Tensor<S>::uninit(depth.values.shape());
  for (int64_t i = 0; i < far_fill.size(); ++i)
    far_fill.at(i) = depth.validity.at(i) > S(0.5) ? S(0) : S(kZFar);
  Tensor<S> z_safe = add(mul(depth.values, depth.validity), far_fill);
  Tensor<S> d = scale(reciprocal(z_safe), fxb);
  WarpField<S> field;
  field.flow = concat_channels(d, Tensor<S>::zeros(d.shape()));
  field.source = source;
  return field;
}

// Backward warp: y(p) = bilinear_sample(x, p + u(p)), border-clamped.
template <typename S>
Tensor<S> warp(const Tensor<S>& image, const WarpField<S>& field) {
  require(image.rank() == 3, "warp: image must be (C,H,W)");
  const int h = image.dim(1), w = image.dim(2);
  require(field.flow.dim(1) == h && field.flow.dim(2) == w,
          "warp: flow extent " + shape_str(field.flow.shape()) + " != image " +
              shape_str(image.shape()));
  Tensor<S> grid = Tensor<S>::uninit({2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      grid.at3(0, y, x) = S(x);
      grid.at3(1, y, x) = S(y);
    }
  return bilinear_sample(image, add(grid, field.flow));
}

// Negates the horizontal component: the left-to-right warp uses u = (-d, 0).
template <typename S>
WarpField<S> negate_flow_x(const WarpField<S>& f) {
  auto [fx, fy] = split_channels(f.flow, 1);
  WarpField<S> out;
  out.flow = concat_channels(scale(fx, S(-1)), fy);
  out.source = f.source;
  return out;
}

}  // namespace swrgbd
