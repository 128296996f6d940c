#pragma once

// Dense float tensors with reverse-mode automatic differentiation.
// Channel-first image layout: (C,H,W) or (N,C,H,W), row-major storage.
// A graph of TensorNodes is built implicitly by the free functions below
// and traversed once, in reverse topological order, by backward().
//
// Everything is templated on the scalar so the same graph can be replayed
// in double precision for finite-difference checks. Production code uses
// float. Summation order is fixed (row-major / Eigen's sequential kernels),
// so forward passes are bit-reproducible for fixed inputs.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace swrgbd {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Graph recording can be suspended (inference, deployment paths).
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
struct TensorNode {
  Shape shape;
  ArrayX<S> value;
  ArrayX<S> grad;  // allocated lazily by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backprop;  // null on leaves

  void accum_grad_alloc() {
    if (grad.size() == 0) grad = ArrayX<S>::Zero(value.size());
  }
};

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape), requires_grad);
    t.node_->value.setZero();
    return t;
  }
  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    Tensor t = uninit(std::move(shape), requires_grad);
    t.node_->value.setConstant(v);
    return t;
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(1), requires_grad);
  }
  static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
    require((int64_t)data.size() == shape_numel(shape),
            "tensor: data length " + std::to_string(data.size()) +
                " != numel of shape " + shape_str(shape));
    Tensor t = uninit(std::move(shape), requires_grad);
    std::copy(data.begin(), data.end(), t.node_->value.data());
    return t;
  }
  static Tensor scalar_tensor(S v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }
  static Tensor uninit(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<S>>();
    t.node_->shape = std::move(shape);
    t.node_->value.resize(shape_numel(t.node_->shape));
    t.node_->requires_grad = requires_grad && grad_enabled();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(i); }
  int rank() const { return (int)node_->shape.size(); }
  int64_t size() const { return node_->value.size(); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  ArrayX<S>& array() { return node_->value; }
  const ArrayX<S>& array() const { return node_->value; }

  // Flat index accessors; image helpers assume the trailing dims are (H,W).
  S& at(int64_t i) { return node_->value(i); }
  S at(int64_t i) const { return node_->value(i); }
  S& at3(int c, int y, int x) {
    const Shape& s = node_->shape;
    return node_->value(((int64_t)c * s[1] + y) * s[2] + x);
  }
  S at3(int c, int y, int x) const {
    const Shape& s = node_->shape;
    return node_->value(((int64_t)c * s[1] + y) * s[2] + x);
  }

  S scalar() const {
    require(size() == 1, "scalar(): tensor has " + std::to_string(size()) + " elements");
    return node_->value(0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }
  const ArrayX<S>& grad() const { return node_->grad; }
  ArrayX<S>& grad() { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  bool all_finite() const { return node_->value.isFinite().all(); }

  // Value copy detached from the graph.
  Tensor detach() const {
    Tensor t = uninit(shape());
    t.node_->value = node_->value;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t = Tensor<T>::uninit(shape());
    t.array() = node_->value.template cast<T>();
    return t;
  }

  // Same storage reinterpreted with a new shape (copying; gradient passes through).
  Tensor reshaped(Shape s) const;

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;

  template <typename T>
  friend Tensor<T> make_op(Shape, std::vector<Tensor<T>>, std::function<void(TensorNode<T>&)>);
};

// Builds the result node of an op: shape, inputs, and the backward closure.
// The closure reads self.grad and accumulates into the parents' grads.
template <typename S>
Tensor<S> make_op(Shape shape, std::vector<Tensor<S>> inputs,
                  std::function<void(TensorNode<S>&)> backprop) {
  bool needs = false;
  if (grad_enabled())
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  Tensor<S> out = Tensor<S>::uninit(std::move(shape));
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->backprop = std::move(backprop);
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node());
  }
  return out;
}

template <typename S>
void accum(TensorNode<S>& n, const ArrayX<S>& g) {
  n.accum_grad_alloc();
  n.grad += g;
}

// Topologically ordered record of a backward traversal.
template <typename S>
struct Graph {
  std::vector<std::shared_ptr<TensorNode<S>>> order;  // parents before children

  static Graph build(const Tensor<S>& root) {
    Graph g;
    std::unordered_set<const TensorNode<S>*> seen;
    // Iterative post-order DFS over parents.
    struct Item {
      std::shared_ptr<TensorNode<S>> node;
      size_t next_parent = 0;
    };
    std::vector<Item> stack;
    if (root.node() && root.node()->requires_grad) stack.push_back({root.node()});
    while (!stack.empty()) {
      Item& top = stack.back();
      if (top.next_parent == 0 && seen.count(top.node.get())) {
        stack.pop_back();
        continue;
      }
      if (top.next_parent < top.node->parents.size()) {
        auto p = top.node->parents[top.next_parent++];
        if (p->requires_grad && !seen.count(p.get())) stack.push_back({p});
      } else {
        seen.insert(top.node.get());
        g.order.push_back(top.node);
        stack.pop_back();
      }
    }
    return g;
  }

  // Seeds the root with 1 and propagates; each node is visited exactly once.
  void run_backward() {
    if (order.empty()) return;
    auto& root = *order.back();
    require(root.value.size() == 1, "backward: root must be scalar");
    root.accum_grad_alloc();
    root.grad(0) += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<S>& n = **it;
      if (n.backprop && n.grad.size() > 0) n.backprop(n);
    }
  }
};

template <typename S>
void backward(const Tensor<S>& root) {
  require(root.size() == 1, "backward: root must be a scalar tensor");
  Graph<S>::build(root).run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() == b.shape()) return;
  const Shape &sa = a.shape(), &sb = b.shape();
  size_t ax = 0;
  while (ax < std::min(sa.size(), sb.size()) && sa[ax] == sb[ax]) ++ax;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " +
                   shape_str(sb) + " (first differing axis " + std::to_string(ax) + ")");
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  Tensor<S> out = make_op<S>(a.shape(), {a, b}, [an, bn](TensorNode<S>& self) {
    if (an->requires_grad) accum(*an, self.grad);
    if (bn->requires_grad) accum(*bn, self.grad);
  });
  out.array() = a.array() + b.array();
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  Tensor<S> out = make_op<S>(a.shape(), {a, b}, [an, bn](TensorNode<S>& self) {
    if (an->requires_grad) accum(*an, self.grad);
    if (bn->requires_grad) {
      bn->accum_grad_alloc();
      bn->grad -= self.grad;
    }
  });
  out.array() = a.array() - b.array();
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  Tensor<S> out = make_op<S>(a.shape(), {a, b}, [an, bn](TensorNode<S>& self) {
    if (an->requires_grad) accum(*an, ArrayX<S>(self.grad * bn->value));
    if (bn->requires_grad) accum(*bn, ArrayX<S>(self.grad * an->value));
  });
  out.array() = a.array() * b.array();
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S k) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an, k](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(self.grad * k));
  });
  out.array() = a.array() * k;
  return out;
}

template <typename S>
Tensor<S> shift(const Tensor<S>& a, S k) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an](TensorNode<S>& self) {
    accum(*an, self.grad);
  });
  out.array() = a.array() + k;
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(self.grad * (an->value > S(0)).template cast<S>()));
  });
  out.array() = a.array().max(S(0));
  return out;
}

// Hard clip to [0,1]; zero gradient outside the interval.
template <typename S>
Tensor<S> clamp01(const Tensor<S>& a) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an](TensorNode<S>& self) {
    ArrayX<S> inside =
        ((an->value >= S(0)) && (an->value <= S(1))).template cast<S>();
    accum(*an, ArrayX<S>(self.grad * inside));
  });
  out.array() = a.array().max(S(0)).min(S(1));
  return out;
}

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& a, S lo) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an, lo](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(self.grad * (an->value > lo).template cast<S>()));
  });
  out.array() = a.array().max(lo);
  return out;
}

template <typename S>
Tensor<S> reciprocal(const Tensor<S>& a) {
  auto an = a.node();
  Tensor<S> out = make_op<S>(a.shape(), {a}, [an](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(-self.grad / (an->value * an->value)));
  });
  out.array() = a.array().inverse();
  return out;
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

template <typename S>
Tensor<S> Tensor<S>::reshaped(Shape s) const {
  require(shape_numel(s) == size(), "reshape: numel mismatch " + shape_str(shape()) +
                                        " -> " + shape_str(s));
  auto self = *this;
  auto n = node_;
  Tensor<S> out = make_op<S>(s, {self}, [n](TensorNode<S>& o) { accum(*n, o.grad); });
  out.array() = node_->value;
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (fixed row-major accumulation)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto an = a.node();
  Tensor<S> out = make_op<S>({1}, {a}, [an](TensorNode<S>& self) {
    an->accum_grad_alloc();
    an->grad += self.grad(0);
  });
  out.array()(0) = a.array().sum();
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / S(a.size());
  auto an = a.node();
  Tensor<S> out = make_op<S>({1}, {a}, [an, inv](TensorNode<S>& self) {
    an->accum_grad_alloc();
    an->grad += self.grad(0) * inv;
  });
  out.array()(0) = a.array().sum() * inv;
  return out;
}

namespace detail {
// Expands a (1,H,W)/(N,1,H,W) mask over the channel axis of x's shape when
// needed; masks are plain data, no gradient flows through them.
template <typename S>
ArrayX<S> mask_for(const Tensor<S>& x, const Tensor<S>& m) {
  if (m.shape() == x.shape()) return m.array();
  Shape xs = x.shape(), ms = m.shape();
  require(xs.size() == ms.size(), "mask: rank mismatch " + shape_str(ms) + " vs " +
                                      shape_str(xs));
  int caxis = (int)xs.size() - 3;
  require(caxis >= 0 && ms[caxis] == 1, "mask: incompatible shape " + shape_str(ms) +
                                            " for data " + shape_str(xs));
  Shape rest_same = xs;
  rest_same[caxis] = 1;
  require(rest_same == ms, "mask: incompatible shape " + shape_str(ms) + " for data " +
                               shape_str(xs));
  int64_t plane = 1;
  for (size_t i = caxis + 1; i < xs.size(); ++i) plane *= xs[i];
  int64_t outer = 1;
  for (int i = 0; i < caxis; ++i) outer *= xs[i];
  ArrayX<S> full(x.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int c = 0; c < xs[caxis]; ++c)
      full.segment((o * xs[caxis] + c) * plane, plane) = m.array().segment(o * plane, plane);
  return full;
}
}  // namespace detail

template <typename S>
Tensor<S> mean(const Tensor<S>& a, const Tensor<S>& mask) {
  ArrayX<S> m = detail::mask_for(a, mask);
  const S msum = m.sum();
  require(msum > S(0), "masked mean: mask selects no elements");
  auto an = a.node();
  auto mshared = std::make_shared<ArrayX<S>>(std::move(m));
  Tensor<S> out = make_op<S>({1}, {a}, [an, mshared, msum](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(*mshared * (self.grad(0) / msum)));
  });
  out.array()(0) = (a.array() * *mshared).sum() / msum;
  return out;
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mse");
  auto an = a.node(), bn = b.node();
  const S inv = S(1) / S(a.size());
  auto diff = std::make_shared<ArrayX<S>>(a.array() - b.array());
  Tensor<S> out = make_op<S>({1}, {a, b}, [an, bn, diff, inv](TensorNode<S>& self) {
    ArrayX<S> g = *diff * (S(2) * inv * self.grad(0));
    if (an->requires_grad) accum(*an, g);
    if (bn->requires_grad) {
      bn->accum_grad_alloc();
      bn->grad -= g;
    }
  });
  out.array()(0) = diff->square().sum() * inv;
  return out;
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& mask) {
  check_same_shape(a, b, "mse");
  ArrayX<S> m = detail::mask_for(a, mask);
  const S msum = m.sum();
  require(msum > S(0), "masked mse: mask selects no elements");
  auto an = a.node(), bn = b.node();
  auto diff = std::make_shared<ArrayX<S>>((a.array() - b.array()) * m);
  Tensor<S> out = make_op<S>({1}, {a, b}, [an, bn, diff, msum](TensorNode<S>& self) {
    // diff is pre-masked and mask is 0/1, so masking twice is a no-op.
    ArrayX<S> g = *diff * (S(2) / msum * self.grad(0));
    if (an->requires_grad) accum(*an, g);
    if (bn->requires_grad) {
      bn->accum_grad_alloc();
      bn->grad -= g;
    }
  });
  out.array()(0) = diff->square().sum() / msum;
  return out;
}

// Population variance.
template <typename S>
Tensor<S> variance(const Tensor<S>& a) {
  const S inv = S(1) / S(a.size());
  const S mu = a.array().sum() * inv;
  auto an = a.node();
  Tensor<S> out = make_op<S>({1}, {a}, [an, inv, mu](TensorNode<S>& self) {
    accum(*an, ArrayX<S>((an->value - mu) * (S(2) * inv * self.grad(0))));
  });
  out.array()(0) = (a.array() - mu).square().sum() * inv;
  return out;
}

template <typename S>
Tensor<S> variance(const Tensor<S>& a, const Tensor<S>& mask) {
  ArrayX<S> m = detail::mask_for(a, mask);
  const S msum = m.sum();
  require(msum > S(0), "masked variance: mask selects no elements");
  const S mu = (a.array() * m).sum() / msum;
  auto an = a.node();
  auto mshared = std::make_shared<ArrayX<S>>(std::move(m));
  Tensor<S> out = make_op<S>({1}, {a}, [an, mshared, msum, mu](TensorNode<S>& self) {
    accum(*an, ArrayX<S>(*mshared * (an->value - mu) * (S(2) / msum * self.grad(0))));
  });
  out.array()(0) = ((a.array() - mu).square() * *mshared).sum() / msum;
  return out;
}

// ---------------------------------------------------------------------------
// Channel concat / split (layouts (C,H,W) and (N,C,H,W))
// ---------------------------------------------------------------------------

namespace detail {
template <typename S>
void concat_axes(const Tensor<S>& a, int& caxis, int64_t& outer, int64_t& plane) {
  const Shape& s = a.shape();
  require(s.size() == 3 || s.size() == 4,
          "concat/split: want rank 3 or 4 tensor, got " + shape_str(s));
  caxis = (int)s.size() - 3;
  outer = 1;
  for (int i = 0; i < caxis; ++i) outer *= s[i];
  plane = (int64_t)s[s.size() - 2] * s[s.size() - 1];
}
}  // namespace detail

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  int caxis;
  int64_t outer, plane;
  detail::concat_axes(a, caxis, outer, plane);
  Shape sa = a.shape(), sb = b.shape();
  require(sa.size() == sb.size(), "concat: rank mismatch");
  for (size_t i = 0; i < sa.size(); ++i)
    if ((int)i != caxis)
      require(sa[i] == sb[i], "concat: extent mismatch on axis " + std::to_string(i) +
                                  ": " + shape_str(sa) + " vs " + shape_str(sb));
  const int ca = sa[caxis], cb = sb[caxis];
  Shape so = sa;
  so[caxis] = ca + cb;
  auto an = a.node(), bn = b.node();
  Tensor<S> out = make_op<S>(so, {a, b}, [an, bn, outer, plane, ca, cb](TensorNode<S>& self) {
    for (int64_t o = 0; o < outer; ++o) {
      const int64_t base = o * (ca + cb) * plane;
      if (an->requires_grad) {
        an->accum_grad_alloc();
        an->grad.segment(o * ca * plane, ca * plane) += self.grad.segment(base, ca * plane);
      }
      if (bn->requires_grad) {
        bn->accum_grad_alloc();
        bn->grad.segment(o * cb * plane, cb * plane) +=
            self.grad.segment(base + ca * plane, cb * plane);
      }
    }
  });
  for (int64_t o = 0; o < outer; ++o) {
    const int64_t base = o * (ca + cb) * plane;
    out.array().segment(base, ca * plane) = a.array().segment(o * ca * plane, ca * plane);
    out.array().segment(base + ca * plane, cb * plane) =
        b.array().segment(o * cb * plane, cb * plane);
  }
  return out;
}

// Slice of channels [c0, c0+n) with gradient routed back to the source range.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, int c0, int n) {
  int caxis;
  int64_t outer, plane;
  detail::concat_axes(x, caxis, outer, plane);
  const int cx = x.shape()[caxis];
  require(c0 >= 0 && n > 0 && c0 + n <= cx,
          "slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c0 + n) +
              ") out of " + std::to_string(cx) + " channels");
  Shape so = x.shape();
  so[caxis] = n;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(so, {x}, [xn, outer, plane, cx, c0, n](TensorNode<S>& self) {
    xn->accum_grad_alloc();
    for (int64_t o = 0; o < outer; ++o)
      xn->grad.segment((o * cx + c0) * plane, n * plane) +=
          self.grad.segment(o * n * plane, n * plane);
  });
  for (int64_t o = 0; o < outer; ++o)
    out.array().segment(o * n * plane, n * plane) =
        x.array().segment((o * cx + c0) * plane, n * plane);
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& x, int at) {
  int caxis;
  int64_t outer, plane;
  detail::concat_axes(x, caxis, outer, plane);
  const int cx = x.shape()[caxis];
  require(at > 0 && at < cx, "split_channels: split point " + std::to_string(at) +
                                 " outside (0," + std::to_string(cx) + ")");
  return {slice_channels(x, 0, at), slice_channels(x, at, cx - at)};
}

// Zeroes channels >= k; gradient passes only through kept channels.
template <typename S>
Tensor<S> zero_channels_from(const Tensor<S>& x, int k) {
  int caxis;
  int64_t outer, plane;
  detail::concat_axes(x, caxis, outer, plane);
  const int cx = x.shape()[caxis];
  require(k >= 0 && k <= cx, "zero_channels_from: k out of range");
  if (k == cx) return x;
  auto xn = x.node();
  Tensor<S> out = make_op<S>(x.shape(), {x}, [xn, outer, plane, cx, k](TensorNode<S>& self) {
    xn->accum_grad_alloc();
    for (int64_t o = 0; o < outer; ++o)
      xn->grad.segment(o * cx * plane, k * plane) += self.grad.segment(o * cx * plane, k * plane);
  });
  out.array() = x.array();
  for (int64_t o = 0; o < outer; ++o)
    out.array().segment((o * cx + k) * plane, (int64_t)(cx - k) * plane).setZero();
  return out;
}

}  // namespace swrgbd
