#pragma once

// Rate-distortion objective and the optimization loop: one trained
// pre/post-processor pair per RD weight gamma.
//
// Loss scale: distortion terms are masked MSEs on the 8-bit sample scale
// (multiplied by 255^2) and the rate term is proxy bits per pixel, which
// puts the gamma range {0.5..32} on a useful operating curve. Depth enters
// the MSE term normalized by the scene scale so its energy is comparable
// to color.

#include "swrgbd/processors.hpp"
#include "swrgbd/proxy_codec.hpp"

#include <fstream>
#include <random>

namespace swrgbd {

enum class ColorDistortion { mse };  // pluggable slot; only MSE is built in

struct LossConfig {
  double gamma = 4.0;
  double alpha = 1.0;  // warping-loss weight
  double beta = 0.1;   // depth-MSE weight
  ColorDistortion color_distortion = ColorDistortion::mse;

  void validate() const {
    require(gamma >= 0 && alpha >= 0 && beta >= 0,
            "loss config: gamma, alpha, beta must be nonnegative");
  }
};

struct TrainConfig {
  int steps = 2000;
  int batch = 2;
  int crop = 64;
  double lr = 1e-4;
  uint64_t seed = 1;
  std::vector<double> gammas = {0.5, 2, 4, 8, 16, 32};
  int snapshot_every = 100;

  void validate() const {
    require(steps > 0 && batch > 0, "train config: steps and batch must be positive");
    require(crop > 0 && crop % 16 == 0, "train config: crop size must be a multiple of 16");
    require(!gammas.empty(), "train config: gamma list must be nonempty");
  }
};

inline constexpr double kSampleEnergyScale = 255.0 * 255.0;

// Warping loss for one view: compare warps of the color image under the
// true and reconstructed disparity. The reconstructed depth is clamped at
// z_near so early-training outputs cannot blow up the flow.
template <typename S>
Tensor<S> warping_loss(const Tensor<S>& color, const DepthMap<S>& depth_gt,
                       const DepthMap<S>& depth_rec, const CameraRig& rig) {
  WarpField<S> d = disparity_from_depth(depth_gt, rig);
  const S fxb = S(rig.left.fx * rig.baseline());
  Tensor<S> dhat = scale(reciprocal(clamp_min(depth_rec.values, S(kZNear))), fxb);
  WarpField<S> dh;
  dh.flow = concat_channels(dhat, Tensor<S>::zeros(dhat.shape()));
  dh.source = FlowSource::reconstructed;
  Tensor<S> j = warp(color, negate_flow_x(d));
  Tensor<S> jh = warp(color, negate_flow_x(dh));
  return mse(j, jh, depth_gt.validity);
}

template <typename S>
struct LossParts {
  Tensor<S> total;
  double fd = 0, lwarp = 0, zmse = 0;  // 255^2-scaled distortion components
  double rate_bpp = 0, rate_bits = 0;
};

namespace detail {
template <typename S>
Tensor<S> masked_mse_or_zero(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& mask) {
  if (mask.array().sum() <= S(0)) return Tensor<S>::zeros({1});
  return mse(a, b, mask);
}
}  // namespace detail

// D + gamma * R with the component breakdown. The rate argument is the
// proxy's total bit estimate over all code channels of this frame.
template <typename S>
LossParts<S> rd_loss(const FramePlanes<S>& gt, const ReconPlanes<S>& recon,
                     const Tensor<S>& rate_bits, const LossConfig& cfg, const CameraRig& rig) {
  cfg.validate();
  const int64_t npix = (int64_t)gt.color_l.dim(1) * gt.color_l.dim(2);
  const S kd = S(kSampleEnergyScale);

  Tensor<S> fd01 = scale(add(detail::masked_mse_or_zero(gt.color_l, recon.color_l, gt.depth_l.validity),
                             detail::masked_mse_or_zero(gt.color_r, recon.color_r, gt.depth_r.validity)),
                         S(0.5));
  Tensor<S> d_total = scale(fd01, kd);

  LossParts<S> parts;
  Tensor<S> lwarp01, zmse01;
  if (recon.has_depth) {
    lwarp01 = scale(add(warping_loss(gt.color_l, gt.depth_l, recon.depth_l, rig),
                        warping_loss(gt.color_r, gt.depth_r, recon.depth_r, rig)),
                    S(0.5));
    const S zs = S(1.0 / rig.scene_scale);
    zmse01 = scale(add(detail::masked_mse_or_zero(scale(gt.depth_l.values, zs),
                                                  scale(recon.depth_l.values, zs),
                                                  gt.depth_l.validity),
                       detail::masked_mse_or_zero(scale(gt.depth_r.values, zs),
                                                  scale(recon.depth_r.values, zs),
                                                  gt.depth_r.validity)),
                   S(0.5));
    if (cfg.alpha > 0) d_total = add(d_total, scale(lwarp01, kd * S(cfg.alpha)));
    if (cfg.beta > 0) d_total = add(d_total, scale(zmse01, kd * S(cfg.beta)));
  }

  Tensor<S> rate_bpp = scale(rate_bits, S(1.0 / npix));
  parts.total = cfg.gamma > 0 ? add(d_total, scale(rate_bpp, S(cfg.gamma))) : d_total;
  parts.fd = (double)fd01.scalar() * kSampleEnergyScale;
  if (recon.has_depth) {
    parts.lwarp = (double)lwarp01.scalar() * kSampleEnergyScale;
    parts.zmse = (double)zmse01.scalar() * kSampleEnergyScale;
  }
  parts.rate_bpp = rate_bpp.scalar();
  parts.rate_bits = rate_bits.scalar();
  return parts;
}

template <typename S>
struct Adam {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor<S>*> params;
  std::vector<ArrayX<S>> m, v;

  explicit Adam(std::vector<Tensor<S>*> p, double lr_ = 1e-4) : lr(lr_), params(std::move(p)) {
    for (auto* q : params) {
      m.push_back(ArrayX<S>::Zero(q->size()));
      v.push_back(ArrayX<S>::Zero(q->size()));
    }
  }

  void step() {
    ++t;
    const S c1 = S(1.0 / (1.0 - std::pow(beta1, (double)t)));
    const S c2 = S(1.0 / (1.0 - std::pow(beta2, (double)t)));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = *params[i];
      if (p.grad().size() == 0) continue;
      const ArrayX<S>& g = p.grad();
      m[i] = S(beta1) * m[i] + S(1 - beta1) * g;
      v[i] = S(beta2) * v[i] + S(1 - beta2) * g.square();
      p.array() -= S(lr) * (m[i] * c1) / ((v[i] * c2).sqrt() + S(eps));
    }
  }

  void zero_grad() {
    for (auto* p : params) p->zero_grad();
  }
};

struct TrainLogRow {
  int step;
  double loss, fd, lwarp, zmse, rate_bits;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  bool diverged = false;
  int last_step = 0;
};

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream f(path);
  require(f.good(), "train log: cannot open " + path);
  f << "step,loss,fd,lwarp,zmse,rate_bits\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%d,%.8g,%.8g,%.8g,%.8g,%.8g\n", r.step, r.loss, r.fd,
                  r.lwarp, r.zmse, r.rate_bits);
    f << line;
  }
}

namespace detail {
template <typename S>
FramePlanes<S> crop_frame(const FramePlanes<S>& f, int ox, int oy, int size) {
  FramePlanes<S> c;
  c.color_l = crop(f.color_l, ox, oy, size, size);
  c.color_r = crop(f.color_r, ox, oy, size, size);
  c.depth_l.values = crop(f.depth_l.values, ox, oy, size, size);
  c.depth_l.validity = crop(f.depth_l.validity, ox, oy, size, size);
  c.depth_r.values = crop(f.depth_r.values, ox, oy, size, size);
  c.depth_r.validity = crop(f.depth_r.validity, ox, oy, size, size);
  return c;
}

template <typename S>
std::vector<ArrayX<S>> snapshot_params(ProcessorPair<S>& pair) {
  std::vector<ArrayX<S>> snap;
  pair.visit_params([&](const std::string&, Tensor<S>& t) { snap.push_back(t.array()); });
  return snap;
}

template <typename S>
void restore_params(ProcessorPair<S>& pair, const std::vector<ArrayX<S>>& snap) {
  size_t i = 0;
  pair.visit_params([&](const std::string&, Tensor<S>& t) { t.array() = snap[i++]; });
}
}  // namespace detail

// Joint optimization of one pre/post pair through the noisy proxy.
// Deterministic given the seed. On divergence (non-finite loss) the
// parameters roll back to the last snapshot and the run stops early.
template <typename S>
TrainResult train_pair(ProcessorPair<S>& pair, const std::vector<FramePlanes<S>>& frames,
                       const CameraRig& rig, const LossConfig& loss_cfg,
                       const TrainConfig& tc,
                       const std::function<void(const TrainLogRow&)>& on_step = nullptr) {
  loss_cfg.validate();
  tc.validate();
  require(!frames.empty(), "train_pair: dataset is empty");
  const int h = frames[0].color_l.dim(1), w = frames[0].color_l.dim(2);
  require(tc.crop <= h && tc.crop <= w, "train_pair: crop larger than the frames");

  std::mt19937 rng((uint32_t)tc.seed);
  std::uniform_int_distribution<int> pick_frame(0, (int)frames.size() - 1);
  std::uniform_int_distribution<int> pick_ox(0, w - tc.crop), pick_oy(0, h - tc.crop);

  ProxyConfig proxy{8, delta_schedule(loss_cfg.gamma), ProxyMode::noisy};
  Adam<S> opt(pair.parameters(), tc.lr);
  auto snapshot = detail::snapshot_params(pair);
  int snapshot_step = 0;

  TrainResult result;
  for (int step = 0; step < tc.steps; ++step) {
    Tensor<S> batch_loss;
    double fd = 0, lwarp = 0, zmse = 0, rate_bits = 0;
    for (int b = 0; b < tc.batch; ++b) {
      const int fi = pick_frame(rng);
      const int ox = pick_ox(rng), oy = pick_oy(rng);
      FramePlanes<S> cropped = detail::crop_frame(frames[fi], ox, oy, tc.crop);
      Tensor<S> x = canonical_input(cropped, rig, pair.geometry, pair.color_only, ox, oy);
      Tensor<S> codes = pair.preprocess(x);
      auto [rec_codes, rate] = proxy_encode_decode(codes, proxy, &rng);
      ReconPlanes<S> rec = postprocess(rec_codes, rig, pair);
      LossParts<S> parts = rd_loss(cropped, rec, rate.bits, loss_cfg, rig);
      batch_loss = b == 0 ? parts.total : add(batch_loss, parts.total);
      fd += parts.fd;
      lwarp += parts.lwarp;
      zmse += parts.zmse;
      rate_bits += parts.rate_bits;
    }
    Tensor<S> loss = scale(batch_loss, S(1.0 / tc.batch));

    TrainLogRow row{step, (double)loss.scalar(), fd / tc.batch, lwarp / tc.batch,
                    zmse / tc.batch, rate_bits / tc.batch};
    if (!std::isfinite(row.loss)) {
      detail::restore_params(pair, snapshot);
      result.diverged = true;
      result.last_step = snapshot_step;
      return result;
    }
    backward(loss);
    opt.step();
    opt.zero_grad();
    result.log.push_back(row);
    result.last_step = step;
    if (on_step) on_step(row);
    if (tc.snapshot_every > 0 && (step + 1) % tc.snapshot_every == 0) {
      snapshot = detail::snapshot_params(pair);
      snapshot_step = step;
    }
  }
  return result;
}

}  // namespace swrgbd
