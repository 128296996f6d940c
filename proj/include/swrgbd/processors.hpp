#pragma once

// Neural pre/post-processor pair. The preprocessor maps a canonicalized
// 12-channel stereo RGB-D input (color + normalized coordinates, both views)
// to K-channel neural codes in [0,1]; the postprocessor maps decoded codes
// back to color and geometry. Both are one U-Net plus per-group 1x1-conv
// MLPs; the U-Net output is split across the groups and added to the MLP
// outputs.
//
// ReLU follows every convolution except each U-Net's last layer and each
// MLP's second layer (linear heads). Inputs are reflect-padded to multiples
// of 16 for the four stride-2 stages and cropped back afterwards.

#include "swrgbd/conv.hpp"
#include "swrgbd/geometry.hpp"

#include <json.hpp>

#include <fstream>
#include <random>
#include <sstream>

namespace swrgbd {

template <typename S>
struct ConvLayer {
  Tensor<S> w, b;
  int stride = 1;

  static ConvLayer make(int out_c, int in_c, int k, int stride, std::mt19937& rng) {
    ConvLayer l;
    l.stride = stride;
    l.w = Tensor<S>::uninit({out_c, in_c, k, k}).set_requires_grad(true);
    const double bound = std::sqrt(6.0 / (in_c * k * k));  // Kaiming uniform, fan-in
    std::uniform_real_distribution<double> u(-bound, bound);
    for (int64_t i = 0; i < l.w.size(); ++i) l.w.at(i) = S(u(rng));
    l.b = Tensor<S>::zeros({out_c}).set_requires_grad(true);
    return l;
  }
  // Transposed layout (I,O,K,K).
  static ConvLayer make_transposed(int in_c, int out_c, int k, std::mt19937& rng) {
    ConvLayer l;
    l.stride = 2;
    l.w = Tensor<S>::uninit({in_c, out_c, k, k}).set_requires_grad(true);
    const double bound = std::sqrt(6.0 / (in_c * k * k));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (int64_t i = 0; i < l.w.size(); ++i) l.w.at(i) = S(u(rng));
    l.b = Tensor<S>::zeros({out_c}).set_requires_grad(true);
    return l;
  }
};

// 23-layer U-Net: 10 encoder convolutions (four stride-2 stages), four
// transposed-convolution upsampling stages with skip concatenations, and a
// linear 3x3 head.
template <typename S>
struct UNet {
  int in_ch = 12, out_ch = 12;
  ConvLayer<S> c1, c2, c3, c4, c5, c6, c7, c8, c9, c10;
  ConvLayer<S> t11, t14, t17, t20;
  ConvLayer<S> c13, c16, c19, c22, c23;

  static UNet make(int in_ch, int out_ch, std::mt19937& rng) {
    UNet u;
    u.in_ch = in_ch;
    u.out_ch = out_ch;
    u.c1 = ConvLayer<S>::make(64, in_ch, 3, 1, rng);
    u.c2 = ConvLayer<S>::make(64, 64, 3, 1, rng);
    u.c3 = ConvLayer<S>::make(128, 64, 5, 2, rng);
    u.c4 = ConvLayer<S>::make(128, 128, 3, 1, rng);
    u.c5 = ConvLayer<S>::make(256, 128, 5, 2, rng);
    u.c6 = ConvLayer<S>::make(256, 256, 3, 1, rng);
    u.c7 = ConvLayer<S>::make(512, 256, 5, 2, rng);
    u.c8 = ConvLayer<S>::make(512, 512, 3, 1, rng);
    u.c9 = ConvLayer<S>::make(512, 512, 5, 2, rng);
    u.c10 = ConvLayer<S>::make(512, 512, 3, 1, rng);
    u.t11 = ConvLayer<S>::make_transposed(512, 512, 5, rng);
    u.c13 = ConvLayer<S>::make(512, 1024, 3, 1, rng);
    u.t14 = ConvLayer<S>::make_transposed(512, 256, 5, rng);
    u.c16 = ConvLayer<S>::make(256, 512, 3, 1, rng);
    u.t17 = ConvLayer<S>::make_transposed(256, 128, 5, rng);
    u.c19 = ConvLayer<S>::make(128, 256, 3, 1, rng);
    u.t20 = ConvLayer<S>::make_transposed(128, 64, 5, rng);
    u.c22 = ConvLayer<S>::make(64, 128, 3, 1, rng);
    u.c23 = ConvLayer<S>::make(out_ch, 64, 3, 1, rng);
    return u;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    auto cv = [](const Tensor<S>& in, const ConvLayer<S>& l) {
      return relu(conv2d(in, l.w, l.b, l.stride));
    };
    auto up = [](const Tensor<S>& in, const ConvLayer<S>& l) {
      return relu(conv2d_transposed(in, l.w, l.b, 2));
    };
    Tensor<S> a1 = cv(x, c1);
    Tensor<S> a2 = cv(a1, c2);
    Tensor<S> a4 = cv(cv(a2, c3), c4);
    Tensor<S> a6 = cv(cv(a4, c5), c6);
    Tensor<S> a8 = cv(cv(a6, c7), c8);
    Tensor<S> a10 = cv(cv(a8, c9), c10);
    Tensor<S> d = cv(concat_channels(up(a10, t11), a8), c13);
    d = cv(concat_channels(up(d, t14), a6), c16);
    d = cv(concat_channels(up(d, t17), a4), c19);
    d = cv(concat_channels(up(d, t20), a2), c22);
    return conv2d(d, c23.w, c23.b, 1);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    auto layer = [&](const char* name, ConvLayer<S>& l) {
      fn(prefix + name + ".w", l.w);
      fn(prefix + name + ".b", l.b);
    };
    layer("c1", c1), layer("c2", c2), layer("c3", c3), layer("c4", c4);
    layer("c5", c5), layer("c6", c6), layer("c7", c7), layer("c8", c8);
    layer("c9", c9), layer("c10", c10), layer("t11", t11), layer("c13", c13);
    layer("t14", t14), layer("c16", c16), layer("t17", t17), layer("c19", c19);
    layer("t20", t20), layer("c22", c22), layer("c23", c23);
  }
};

// Two 1x1 convolutions C -> 512 -> C.
template <typename S>
struct Mlp {
  ConvLayer<S> l1, l2;

  static Mlp make(int channels, std::mt19937& rng) {
    Mlp m;
    m.l1 = ConvLayer<S>::make(512, channels, 1, 1, rng);
    m.l2 = ConvLayer<S>::make(channels, 512, 1, 1, rng);
    return m;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return conv2d(relu(conv2d(x, l1.w, l1.b, 1)), l2.w, l2.b, 1);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "l1.w", l1.w);
    fn(prefix + "l1.b", l1.b);
    fn(prefix + "l2.w", l2.w);
    fn(prefix + "l2.b", l2.b);
  }
};

enum class ArchVariant { two_mlp, four_mlp, single_mlp };
enum class GeometryMode { world, camera, depth };

inline std::string to_string(ArchVariant a) {
  switch (a) {
    case ArchVariant::two_mlp: return "two_mlp";
    case ArchVariant::four_mlp: return "four_mlp";
    case ArchVariant::single_mlp: return "single_mlp";
  }
  return "?";
}
inline std::string to_string(GeometryMode g) {
  switch (g) {
    case GeometryMode::world: return "world";
    case GeometryMode::camera: return "camera";
    case GeometryMode::depth: return "depth";
  }
  return "?";
}
inline ArchVariant arch_from_string(const std::string& s) {
  if (s == "two_mlp") return ArchVariant::two_mlp;
  if (s == "four_mlp") return ArchVariant::four_mlp;
  if (s == "single_mlp") return ArchVariant::single_mlp;
  throw ShapeError("unknown architecture variant: " + s);
}
inline GeometryMode geometry_from_string(const std::string& s) {
  if (s == "world") return GeometryMode::world;
  if (s == "camera") return GeometryMode::camera;
  if (s == "depth") return GeometryMode::depth;
  throw ShapeError("unknown geometry mode: " + s);
}

template <typename S>
struct ProcessorPair {
  ArchVariant arch = ArchVariant::two_mlp;
  GeometryMode geometry = GeometryMode::world;
  bool color_only = false;
  int K = 12;
  double gamma = 4.0;
  double scene_scale = kDefaultSceneScale;

  UNet<S> pre_unet, post_unet;
  std::vector<Mlp<S>> pre_mlps;
  Mlp<S> post_mlp;

  int width() const { return color_only ? 6 : 12; }

  // (offset, size) of the channel group handled by each preprocessor MLP.
  std::vector<std::pair<int, int>> groups() const {
    const int w = width();
    switch (arch) {
      case ArchVariant::single_mlp: return {{0, w}};
      case ArchVariant::two_mlp:
        return color_only ? std::vector<std::pair<int, int>>{{0, 6}}
                          : std::vector<std::pair<int, int>>{{0, 6}, {6, 6}};
      case ArchVariant::four_mlp: {
        std::vector<std::pair<int, int>> g;
        for (int o = 0; o < w; o += 3) g.push_back({o, 3});
        return g;
      }
    }
    return {};
  }

  void validate() const {
    require(K % 3 == 0 && K > 0 && K <= width(),
            "processor pair: K=" + std::to_string(K) + " must be a positive multiple of 3 <= " +
                std::to_string(width()));
  }

  // Canonicalized input -> clamped K-channel neural codes. Accepts (C,H,W).
  Tensor<S> preprocess(const Tensor<S>& input) const {
    require(input.rank() == 3, "preprocess: want (C,H,W) input");
    require(input.dim(0) == width(),
            "preprocess: input has " + std::to_string(input.dim(0)) + " channels but this " +
                "pair expects " + std::to_string(width()) +
                " (canonicalized per its geometry mode)");
    Tensor<S> x = input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)});
    Tensor<S> padded = pad16(x);
    Tensor<S> u = pre_unet.forward(padded);
    Tensor<S> out;
    const auto gs = groups();
    for (size_t g = 0; g < gs.size(); ++g) {
      Tensor<S> part = add(pre_mlps[g].forward(slice_channels(padded, gs[g].first, gs[g].second)),
                           slice_channels(u, gs[g].first, gs[g].second));
      out = g == 0 ? part : concat_channels(out, part);
    }
    out = crop(out, 0, 0, input.dim(2), input.dim(1));
    out = clamp01(out);
    out = zero_channels_from(out, K);
    return out.reshaped({width(), input.dim(1), input.dim(2)});
  }

  // Decoded codes -> 12 (or 6) raw output channels: L-RGB, R-RGB and, unless
  // color_only, the two views' geometry channels.
  Tensor<S> postprocess_raw(const Tensor<S>& codes) const {
    require(codes.rank() == 3, "postprocess: want (K,H,W) codes");
    require(codes.dim(0) == width(), "postprocess: codes have " + std::to_string(codes.dim(0)) +
                                         " channels, expected " + std::to_string(width()) +
                                         " (zero-padded when K is smaller)");
    Tensor<S> x = codes.reshaped({1, codes.dim(0), codes.dim(1), codes.dim(2)});
    Tensor<S> padded = pad16(x);
    Tensor<S> y = add(post_mlp.forward(padded), post_unet.forward(padded));
    y = crop(y, 0, 0, codes.dim(2), codes.dim(1));
    return y.reshaped({width(), codes.dim(1), codes.dim(2)});
  }

  template <typename Fn>
  void visit_params(Fn&& fn) {
    pre_unet.visit("pre.unet.", fn);
    for (size_t i = 0; i < pre_mlps.size(); ++i)
      pre_mlps[i].visit("pre.mlp" + std::to_string(i) + ".", fn);
    post_unet.visit("post.unet.", fn);
    post_mlp.visit("post.mlp.", fn);
  }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    visit_params([&](const std::string&, Tensor<S>& t) { out.push_back(&t); });
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    visit_params([&](const std::string&, Tensor<S>& t) { n += t.size(); });
    return n;
  }

 private:
  static Tensor<S> pad16(const Tensor<S>& x) {
    const int h = x.dim(2), w = x.dim(3);
    const int ph = (16 - h % 16) % 16, pw = (16 - w % 16) % 16;
    if (ph == 0 && pw == 0) return x;
    return pad_reflect(x, 0, pw, 0, ph);
  }
};

// Builds a freshly initialized pair for one ablation arm.
template <typename S>
ProcessorPair<S> build_variant(ArchVariant arch, GeometryMode geometry, bool color_only,
                               int K, double gamma, double scene_scale, uint64_t seed) {
  ProcessorPair<S> p;
  p.arch = arch;
  p.geometry = geometry;
  p.color_only = color_only;
  p.K = K;
  p.gamma = gamma;
  p.scene_scale = scene_scale;
  p.validate();
  std::mt19937 rng((uint32_t)(seed ^ 0x9e3779b97f4a7c15ULL));
  const int w = p.width();
  p.pre_unet = UNet<S>::make(w, w, rng);
  for (auto [off, size] : p.groups()) {
    (void)off;
    p.pre_mlps.push_back(Mlp<S>::make(size, rng));
  }
  p.post_unet = UNet<S>::make(w, w, rng);
  p.post_mlp = Mlp<S>::make(w, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Canonicalization and frame reconstruction around the processors
// ---------------------------------------------------------------------------

template <typename S>
struct FramePlanes {
  Tensor<S> color_l, color_r;  // (3,H,W) in [0,1]
  DepthMap<S> depth_l, depth_r;
};

// Assembles the preprocessor input for a pair's geometry mode. origin_* give
// the crop's absolute position inside the full image so ray tables stay
// correct for crops.
template <typename S>
Tensor<S> canonical_input(const FramePlanes<S>& f, const CameraRig& rig, GeometryMode mode,
                          bool color_only, int origin_x = 0, int origin_y = 0) {
  Tensor<S> colors = concat_channels(f.color_l, f.color_r);
  if (color_only) return colors;
  const S inv_scale = S(1.0 / rig.scene_scale);
  auto geom_view = [&](const DepthMap<S>& d, int view) -> Tensor<S> {
    switch (mode) {
      case GeometryMode::world:
        return normalize_world(
            camera_to_world(depth_to_camera_coords(d, rig.cam(view), origin_x, origin_y),
                            rig.pose(view)),
            rig);
      case GeometryMode::camera:
        return scale(depth_to_camera_coords(d, rig.cam(view), origin_x, origin_y), inv_scale);
      case GeometryMode::depth:
        return scale(d.values, inv_scale);
    }
    return {};
  };
  Tensor<S> gl = geom_view(f.depth_l, 0);
  Tensor<S> gr = geom_view(f.depth_r, 1);
  Tensor<S> geom = concat_channels(gl, gr);
  if (mode == GeometryMode::depth) {
    // One channel per view, zero-padded to keep the 12-channel input.
    geom = concat_channels(geom, Tensor<S>::zeros({4, geom.dim(1), geom.dim(2)}));
  }
  return concat_channels(colors, geom);
}

template <typename S>
struct ReconPlanes {
  Tensor<S> color_l, color_r;
  DepthMap<S> depth_l, depth_r;  // absent for color_only pairs
  bool has_depth = false;
};

// Runs the postprocessor and converts its geometry channels back to
// per-view depth maps (world-to-camera for the canonical mode).
template <typename S>
ReconPlanes<S> postprocess(const Tensor<S>& codes, const CameraRig& rig,
                           const ProcessorPair<S>& pair) {
  Tensor<S> raw = pair.postprocess_raw(codes);
  ReconPlanes<S> out;
  out.color_l = slice_channels(raw, 0, 3);
  out.color_r = slice_channels(raw, 3, 3);
  if (pair.color_only) return out;
  out.has_depth = true;
  const S sscale = S(rig.scene_scale);
  auto depth_view = [&](int view, int ch_off, int ch_n) -> DepthMap<S> {
    Tensor<S> g = slice_channels(raw, ch_off, ch_n);
    switch (pair.geometry) {
      case GeometryMode::world:
        return world_coords_to_depth(denormalize_world(g, rig), rig.pose(view));
      case GeometryMode::camera: {
        DepthMap<S> d;
        d.values = scale(slice_channels(g, 2, 1), sscale);
        d.validity = Tensor<S>::uninit(d.values.shape());
        for (int64_t i = 0; i < d.values.size(); ++i)
          d.validity.at(i) = d.values.at(i) > S(kZNear) ? S(1) : S(0);
        return d;
      }
      case GeometryMode::depth: {
        DepthMap<S> d;
        d.values = scale(g, sscale);
        d.validity = Tensor<S>::uninit(d.values.shape());
        for (int64_t i = 0; i < d.values.size(); ++i)
          d.validity.at(i) = d.values.at(i) > S(kZNear) ? S(1) : S(0);
        return d;
      }
    }
    return {};
  };
  if (pair.geometry == GeometryMode::depth) {
    out.depth_l = depth_view(0, 6, 1);
    out.depth_r = depth_view(1, 7, 1);
  } else {
    out.depth_l = depth_view(0, 6, 3);
    out.depth_r = depth_view(1, 9, 3);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: magic "SWRGBD1", JSON header with the tensor
// manifest, raw little-endian float32 data in manifest order.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "SWRGBD1";

inline uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename S>
std::string serialize_checkpoint(ProcessorPair<S>& pair) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string blob;
  pair.visit_params([&](const std::string& name, Tensor<S>& t) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
    for (int64_t i = 0; i < t.size(); ++i) {
      const float v = (float)t.at(i);
      blob.append(reinterpret_cast<const char*>(&v), 4);
    }
  });
  nlohmann::json header = {{"version", 1},
                           {"arch", to_string(pair.arch)},
                           {"geometry", to_string(pair.geometry)},
                           {"color_only", pair.color_only},
                           {"K", pair.K},
                           {"gamma", pair.gamma},
                           {"scene_scale", pair.scene_scale},
                           {"manifest", manifest}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic, 7);
  const uint32_t len = (uint32_t)hs.size();
  out.append(reinterpret_cast<const char*>(&len), 4);
  out += hs;
  out += blob;
  return out;
}

template <typename S>
uint64_t pair_identity_hash(ProcessorPair<S>& pair) {
  const std::string bytes = serialize_checkpoint(pair);
  return fnv1a64(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
}

template <typename S>
void save_checkpoint(const std::string& path, ProcessorPair<S>& pair) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "save_checkpoint: cannot open " + path);
  const std::string bytes = serialize_checkpoint(pair);
  f.write(bytes.data(), (std::streamsize)bytes.size());
  require(f.good(), "save_checkpoint: write failed for " + path);
}

template <typename S = float>
ProcessorPair<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_checkpoint: cannot open " + path);
  char magic[7];
  f.read(magic, 7);
  require(f.gcount() == 7 && std::string(magic, 7) == kCheckpointMagic,
          "load_checkpoint: bad magic in " + path);
  uint32_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 4);
  std::string hs(len, '\0');
  f.read(hs.data(), len);
  require(f.good(), "load_checkpoint: truncated header in " + path);
  const nlohmann::json header = nlohmann::json::parse(hs);

  ProcessorPair<S> pair = build_variant<S>(
      arch_from_string(header.at("arch")), geometry_from_string(header.at("geometry")),
      header.at("color_only"), header.at("K"), header.at("gamma"), header.at("scene_scale"),
      0);
  size_t idx = 0;
  const auto& manifest = header.at("manifest");
  pair.visit_params([&](const std::string& name, Tensor<S>& t) {
    require(idx < manifest.size(), "load_checkpoint: manifest shorter than parameter list");
    const auto& entry = manifest.at(idx++);
    require(entry.at("name") == name, "load_checkpoint: manifest order mismatch at " + name);
    const Shape shape = entry.at("shape").get<Shape>();
    require(shape == t.shape(), "load_checkpoint: shape mismatch for " + name);
    std::vector<float> buf(t.size());
    f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)(t.size() * 4));
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = S(buf[i]);
  });
  require(f.good(), "load_checkpoint: truncated parameter data in " + path);
  require(idx == manifest.size(), "load_checkpoint: manifest longer than parameter list");
  return pair;
}

}  // namespace swrgbd
