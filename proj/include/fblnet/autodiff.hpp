#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fblnet/errors.hpp"
#include "fblnet/kernels.hpp"
#include "fblnet/tensor.hpp"

namespace fblnet {

// Reverse-mode tape. Every op builds a node whose closure scatters the node's
// gradient into its parents. Values live in the node, so the graph owns all
// activations until the caller drops the root.

template <typename T>
struct TapeNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TapeNode<T>>> parents;
  std::function<void(TapeNode<T>&)> backward_fn;
};

template <typename T>
using Var = std::shared_ptr<TapeNode<T>>;

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<TapeNode<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad && g_grad_enabled;
  return n;
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<void(TapeNode<T>&)> bwd) {
  auto n = std::make_shared<TapeNode<T>>();
  n->value = std::move(value);
  bool rq = false;
  for (const auto& p : parents) rq = rq || p->requires_grad;
  if (rq && g_grad_enabled) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return n;
}

template <typename T>
Tensor<T>& grad_of(const Var<T>& v) {
  if (v->grad.empty()) v->grad = Tensor<T>(v->value.shape(), T(0));
  return v->grad;
}

template <typename T>
void backward(const Var<T>& root) {
  FBL_CHECK(root->value.numel() == 1, Err::Shape, "backward expects a scalar root");
  root->grad = Tensor<T>(root->value.shape(), T(1));

  std::vector<TapeNode<T>*> order;
  std::unordered_set<TapeNode<T>*> seen;
  std::vector<std::pair<TapeNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TapeNode<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------- elementwise ----------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  FBL_CHECK(same_shape(a->value, b->value), Err::Shape, "add: shape mismatch");
  Tensor<T> out(a->value.shape());
  kernels::add_t(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node<T>(std::move(out), {a, b}, [a, b](TapeNode<T>& self) {
    if (a->requires_grad) kernels::axpy_t(T(1), self.grad.data(), grad_of(a).data(), self.grad.numel());
    if (b->requires_grad) kernels::axpy_t(T(1), self.grad.data(), grad_of(b).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  FBL_CHECK(same_shape(a->value, b->value), Err::Shape, "sub: shape mismatch");
  Tensor<T> out(a->value.shape());
  kernels::sub_t(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node<T>(std::move(out), {a, b}, [a, b](TapeNode<T>& self) {
    if (a->requires_grad) kernels::axpy_t(T(1), self.grad.data(), grad_of(a).data(), self.grad.numel());
    if (b->requires_grad) kernels::axpy_t(T(-1), self.grad.data(), grad_of(b).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  FBL_CHECK(same_shape(a->value, b->value), Err::Shape, "mul: shape mismatch");
  Tensor<T> out(a->value.shape());
  kernels::mul_t(a->value.data(), b->value.data(), out.data(), out.numel());
  return make_node<T>(std::move(out), {a, b}, [a, b](TapeNode<T>& self) {
    std::int64_t n = self.grad.numel();
    if (a->requires_grad) {
      Tensor<T>& da = grad_of(a);
      for (std::int64_t i = 0; i < n; ++i) da[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor<T>& db = grad_of(b);
      for (std::int64_t i = 0; i < n; ++i) db[i] += self.grad[i] * a->value[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  FBL_CHECK(same_shape(a->value, b->value), Err::Shape, "div: shape mismatch");
  Tensor<T> out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
  return make_node<T>(std::move(out), {a, b}, [a, b](TapeNode<T>& self) {
    std::int64_t n = self.grad.numel();
    if (a->requires_grad) {
      Tensor<T>& da = grad_of(a);
      for (std::int64_t i = 0; i < n; ++i) da[i] += self.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      Tensor<T>& db = grad_of(b);
      for (std::int64_t i = 0; i < n; ++i)
        db[i] -= self.grad[i] * self.value[i] / b->value[i];
    }
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s;
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    kernels::axpy_t(T(1), self.grad.data(), grad_of(a).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  kernels::scale_t(s, out.data(), out.numel());
  return make_node<T>(std::move(out), {a}, [a, s](TapeNode<T>& self) {
    kernels::axpy_t(s, self.grad.data(), grad_of(a).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->value.shape());
  kernels::relu_t(a->value.data(), out.data(), out.numel());
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    kernels::relu_bwd_t(a->value.data(), self.grad.data(), grad_of(a).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-a->value[i]));
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      T y = self.value[i];
      da[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Var<T> log_op(const Var<T>& a) {
  Tensor<T> out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) da[i] += self.grad[i] / a->value[i];
  });
}

template <typename T>
Var<T> sqrt_op(const Var<T>& a) {
  Tensor<T> out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a->value[i]);
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (std::int64_t i = 0; i < self.grad.numel(); ++i)
      da[i] += self.grad[i] * T(0.5) / self.value[i];
  });
}

// ---------------- reductions and scalar broadcasts ----------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out(Shape{1});
  out[0] = kernels::sum_t(a->value.data(), a->value.numel());
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    T g = self.grad[0];
    for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  T inv = T(1) / static_cast<T>(a->value.numel());
  Tensor<T> out(Shape{1});
  out[0] = kernels::sum_t(a->value.data(), a->value.numel()) * inv;
  return make_node<T>(std::move(out), {a}, [a, inv](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    T g = self.grad[0] * inv;
    for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += g;
  });
}

// x - s, s a 1-element var broadcast over x
template <typename T>
Var<T> sub_bscalar(const Var<T>& x, const Var<T>& s) {
  Tensor<T> out = x->value;
  T sv = s->value[0];
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= sv;
  return make_node<T>(std::move(out), {x, s}, [x, s](TapeNode<T>& self) {
    if (x->requires_grad)
      kernels::axpy_t(T(1), self.grad.data(), grad_of(x).data(), self.grad.numel());
    if (s->requires_grad)
      grad_of(s)[0] -= kernels::sum_t(self.grad.data(), self.grad.numel());
  });
}

template <typename T>
Var<T> div_bscalar(const Var<T>& x, const Var<T>& s) {
  Tensor<T> out = x->value;
  T sv = s->value[0];
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= sv;
  return make_node<T>(std::move(out), {x, s}, [x, s](TapeNode<T>& self) {
    T sv = s->value[0];
    if (x->requires_grad) kernels::axpy_t(T(1) / sv, self.grad.data(), grad_of(x).data(), self.grad.numel());
    if (s->requires_grad)
      grad_of(s)[0] -= kernels::dot_t(self.grad.data(), self.value.data(), self.grad.numel()) / sv;
  });
}

template <typename T>
Var<T> mul_bscalar(const Var<T>& x, const Var<T>& s) {
  Tensor<T> out = x->value;
  kernels::scale_t(s->value[0], out.data(), out.numel());
  return make_node<T>(std::move(out), {x, s}, [x, s](TapeNode<T>& self) {
    if (x->requires_grad)
      kernels::axpy_t(s->value[0], self.grad.data(), grad_of(x).data(), self.grad.numel());
    if (s->requires_grad)
      grad_of(s)[0] += kernels::dot_t(self.grad.data(), x->value.data(), self.grad.numel());
  });
}

// ---------------- structure ----------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a->value.reshaped(s);
  return make_node<T>(std::move(out), {a}, [a](TapeNode<T>& self) {
    kernels::axpy_t(T(1), self.grad.data(), grad_of(a).data(), self.grad.numel());
  });
}

template <typename T>
Var<T> select_batch(const Var<T>& a, int b) {
  const Shape& s = a->value.shape();
  FBL_CHECK(a->value.rank() >= 1 && b >= 0 && b < s[0], Err::Shape, "select_batch out of range");
  Shape os(s.begin() + 1, s.end());
  if (os.empty()) os = {1};
  std::int64_t stride = shape_numel(os);
  Tensor<T> out(os);
  const T* src = a->value.data() + static_cast<std::int64_t>(b) * stride;
  std::copy(src, src + stride, out.data());
  return make_node<T>(std::move(out), {a}, [a, b, stride](TapeNode<T>& self) {
    T* dst = grad_of(a).data() + static_cast<std::int64_t>(b) * stride;
    kernels::axpy_t(T(1), self.grad.data(), dst, stride);
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  FBL_CHECK(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            Err::Shape, "concat_channels: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
  int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor<T> out(Shape{B, Ca + Cb, H, W});
  for (int n = 0; n < B; ++n) {
    const T* pa = a->value.data() + static_cast<std::int64_t>(n) * Ca * plane;
    const T* pb = b->value.data() + static_cast<std::int64_t>(n) * Cb * plane;
    T* po = out.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
    std::copy(pa, pa + Ca * plane, po);
    std::copy(pb, pb + Cb * plane, po + Ca * plane);
  }
  return make_node<T>(std::move(out), {a, b}, [a, b, B, Ca, Cb, plane](TapeNode<T>& self) {
    for (int n = 0; n < B; ++n) {
      const T* po = self.grad.data() + static_cast<std::int64_t>(n) * (Ca + Cb) * plane;
      if (a->requires_grad)
        kernels::axpy_t(T(1), po, grad_of(a).data() + static_cast<std::int64_t>(n) * Ca * plane,
                        Ca * plane);
      if (b->requires_grad)
        kernels::axpy_t(T(1), po + Ca * plane,
                        grad_of(b).data() + static_cast<std::int64_t>(n) * Cb * plane, Cb * plane);
    }
  });
}

// (B,C,H,W) -> (B,H*W,C)
template <typename T>
Var<T> nchw_to_tokens(const Var<T>& a) {
  const Shape& s = a->value.shape();
  FBL_CHECK(s.size() == 4, Err::Shape, "nchw_to_tokens expects rank 4");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor<T> out(Shape{B, H * W, C});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = a->value.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      T* dst = out.data() + static_cast<std::int64_t>(n) * hw * C + c;
      for (std::int64_t t = 0; t < hw; ++t) dst[t * C] = src[t];
    }
  return make_node<T>(std::move(out), {a}, [a, B, C, hw](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        T* dst = da.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        const T* src = self.grad.data() + static_cast<std::int64_t>(n) * hw * C + c;
        for (std::int64_t t = 0; t < hw; ++t) dst[t] += src[t * C];
      }
  });
}

// (B,H*W,C) -> (B,C,H,W)
template <typename T>
Var<T> tokens_to_nchw(const Var<T>& a, int H, int W) {
  const Shape& s = a->value.shape();
  FBL_CHECK(s.size() == 3 && s[1] == H * W, Err::Shape, "tokens_to_nchw: token count mismatch");
  int B = s[0], C = s[2];
  std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor<T> out(Shape{B, C, H, W});
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      T* dst = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
      const T* src = a->value.data() + static_cast<std::int64_t>(n) * hw * C + c;
      for (std::int64_t t = 0; t < hw; ++t) dst[t] = src[t * C];
    }
  return make_node<T>(std::move(out), {a, }, [a, B, C, hw](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (int n = 0; n < B; ++n)
      for (int c = 0; c < C; ++c) {
        const T* src = self.grad.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
        T* dst = da.data() + static_cast<std::int64_t>(n) * hw * C + c;
        for (std::int64_t t = 0; t < hw; ++t) dst[t * C] += src[t];
      }
  });
}

namespace detail {

// (B, side*side, C) <-> (B*nWin, win*win, C) index plumbing shared by the
// forward/backward of window_partition and window_merge.
template <typename T, bool Accumulate>
void window_copy(const T* src, T* dst, int B, int side, int C, int win, bool to_windows) {
  int nw = side / win;
  for (int n = 0; n < B; ++n)
    for (int wy = 0; wy < nw; ++wy)
      for (int wx = 0; wx < nw; ++wx) {
        std::int64_t wbase =
            ((static_cast<std::int64_t>(n) * nw * nw + wy * nw + wx) * win * win) * C;
        for (int y = 0; y < win; ++y)
          for (int x = 0; x < win; ++x) {
            std::int64_t tok = static_cast<std::int64_t>(wy * win + y) * side + (wx * win + x);
            std::int64_t gbase = (static_cast<std::int64_t>(n) * side * side + tok) * C;
            std::int64_t woff = wbase + (static_cast<std::int64_t>(y) * win + x) * C;
            const T* s = to_windows ? src + gbase : src + woff;
            T* d = to_windows ? dst + woff : dst + gbase;
            if constexpr (Accumulate)
              for (int c = 0; c < C; ++c) d[c] += s[c];
            else
              std::copy(s, s + C, d);
          }
      }
}

}  // namespace detail

template <typename T>
Var<T> window_partition(const Var<T>& a, int side, int win) {
  const Shape& s = a->value.shape();
  FBL_CHECK(s.size() == 3 && s[1] == side * side, Err::Shape, "window_partition: bad token grid");
  FBL_CHECK(win >= 1 && side % win == 0, Err::Window,
            "stage side " + std::to_string(side) + " not divisible by window " + std::to_string(win));
  int B = s[0], C = s[2];
  int nw = side / win;
  Tensor<T> out(Shape{B * nw * nw, win * win, C});
  detail::window_copy<T, false>(a->value.data(), out.data(), B, side, C, win, true);
  return make_node<T>(std::move(out), {a}, [a, B, side, C, win](TapeNode<T>& self) {
    detail::window_copy<T, true>(self.grad.data(), grad_of(a).data(), B, side, C, win, false);
  });
}

template <typename T>
Var<T> window_merge(const Var<T>& a, int side, int win, int B) {
  const Shape& s = a->value.shape();
  int nw = side / win;
  FBL_CHECK(s.size() == 3 && s[0] == B * nw * nw && s[1] == win * win, Err::Shape,
            "window_merge: bad window stack");
  int C = s[2];
  Tensor<T> out(Shape{B, side * side, C});
  detail::window_copy<T, false>(a->value.data(), out.data(), B, side, C, win, false);
  return make_node<T>(std::move(out), {a}, [a, B, side, C, win](TapeNode<T>& self) {
    detail::window_copy<T, true>(self.grad.data(), grad_of(a).data(), B, side, C, win, true);
  });
}

// 2x2 neighborhood gather: (B, side*side, C) -> (B, (side/2)^2, 4C)
template <typename T>
Var<T> token_merge_2x2(const Var<T>& a, int side) {
  const Shape& s = a->value.shape();
  FBL_CHECK(s.size() == 3 && s[1] == side * side && side % 2 == 0, Err::Shape,
            "token_merge_2x2: bad grid");
  int B = s[0], C = s[2];
  int half = side / 2;
  Tensor<T> out(Shape{B, half * half, 4 * C});
  for (int n = 0; n < B; ++n)
    for (int y = 0; y < half; ++y)
      for (int x = 0; x < half; ++x) {
        T* dst = out.data() +
                 (static_cast<std::int64_t>(n) * half * half + static_cast<std::int64_t>(y) * half + x) * 4 * C;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            std::int64_t tok = static_cast<std::int64_t>(2 * y + dy) * side + (2 * x + dx);
            const T* src = a->value.data() + (static_cast<std::int64_t>(n) * side * side + tok) * C;
            std::copy(src, src + C, dst + (dy * 2 + dx) * C);
          }
      }
  return make_node<T>(std::move(out), {a}, [a, B, C, side, half](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (int n = 0; n < B; ++n)
      for (int y = 0; y < half; ++y)
        for (int x = 0; x < half; ++x) {
          const T* src = self.grad.data() +
                         (static_cast<std::int64_t>(n) * half * half + static_cast<std::int64_t>(y) * half + x) * 4 * C;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              std::int64_t tok = static_cast<std::int64_t>(2 * y + dy) * side + (2 * x + dx);
              T* dst = da.data() + (static_cast<std::int64_t>(n) * side * side + tok) * C;
              const T* s2 = src + (dy * 2 + dx) * C;
              for (int c = 0; c < C; ++c) dst[c] += s2[c];
            }
        }
  });
}

template <typename T>
Var<T> gather_pixels(const Var<T>& a, std::vector<std::int64_t> idx) {
  Tensor<T> out(Shape{static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    FBL_CHECK(idx[i] >= 0 && idx[i] < a->value.numel(), Err::Shape, "gather_pixels: index out of range");
    out[static_cast<std::int64_t>(i)] = a->value[idx[i]];
  }
  return make_node<T>(std::move(out), {a}, [a, idx = std::move(idx)](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (std::size_t i = 0; i < idx.size(); ++i) da[idx[i]] += self.grad[static_cast<std::int64_t>(i)];
  });
}

// ---------------- linear algebra ----------------

// (M,Ci) x (Co,Ci)^T + bias. Leading dims of x beyond the last are flattened.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape& xs = x->value.shape();
  int ci = xs.back();
  FBL_CHECK(w->value.rank() == 2 && w->value.dim(1) == ci, Err::Shape, "linear: weight mismatch");
  int co = w->value.dim(0);
  std::int64_t m = x->value.numel() / ci;
  Shape os = xs;
  os.back() = co;
  Tensor<T> out(os);
  kernels::gemm_t<T>('n', 't', static_cast<int>(m), co, ci, T(1), x->value.data(), ci,
                     w->value.data(), ci, T(0), out.data(), co);
  if (b) {
    FBL_CHECK(b->value.numel() == co, Err::Shape, "linear: bias mismatch");
    for (std::int64_t r = 0; r < m; ++r)
      kernels::add_t(out.data() + r * co, b->value.data(), out.data() + r * co, co);
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  return make_node<T>(std::move(out), std::move(parents), [x, w, b, m, ci, co](TapeNode<T>& self) {
    const T* dy = self.grad.data();
    if (x->requires_grad)
      kernels::gemm_t<T>('n', 'n', static_cast<int>(m), ci, co, T(1), dy, co, w->value.data(), ci,
                         T(1), grad_of(x).data(), ci);
    if (w->requires_grad)
      kernels::gemm_t<T>('t', 'n', co, ci, static_cast<int>(m), T(1), dy, co, x->value.data(), ci,
                         T(1), grad_of(w).data(), ci);
    if (b && b->requires_grad) {
      Tensor<T>& db = grad_of(b);
      for (std::int64_t r = 0; r < m; ++r)
        kernels::add_t(db.data(), dy + r * co, db.data(), co);
    }
  });
}

// Batched matmul on rank-3 stacks: (G,M,K) x (G,K,N), or (G,N,K) with trans_b.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
  const Shape& sa = a->value.shape();
  const Shape& sb = b->value.shape();
  FBL_CHECK(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0], Err::Shape, "bmm: rank/batch mismatch");
  int G = sa[0], M = sa[1], K = sa[2];
  int N = trans_b ? sb[1] : sb[2];
  FBL_CHECK(trans_b ? sb[2] == K : sb[1] == K, Err::Shape, "bmm: inner dim mismatch");
  Tensor<T> out(Shape{G, M, N});
  std::int64_t as = static_cast<std::int64_t>(M) * K, bs = static_cast<std::int64_t>(sb[1]) * sb[2],
               cs = static_cast<std::int64_t>(M) * N;
  for (int g = 0; g < G; ++g)
    kernels::gemm_t<T>('n', trans_b ? 't' : 'n', M, N, K, T(1), a->value.data() + g * as,
                       K, b->value.data() + g * bs, trans_b ? K : N, T(0), out.data() + g * cs, N);
  return make_node<T>(std::move(out), {a, b}, [a, b, G, M, N, K, as, bs, cs, trans_b](TapeNode<T>& self) {
    for (int g = 0; g < G; ++g) {
      const T* dy = self.grad.data() + g * cs;
      if (a->requires_grad) {
        // dA = dY * op(B)^T
        if (!trans_b)
          kernels::gemm_t<T>('n', 't', M, K, N, T(1), dy, N, b->value.data() + g * bs, N, T(1),
                             grad_of(a).data() + g * as, K);
        else
          kernels::gemm_t<T>('n', 'n', M, K, N, T(1), dy, N, b->value.data() + g * bs, K, T(1),
                             grad_of(a).data() + g * as, K);
      }
      if (b->requires_grad) {
        if (!trans_b)
          kernels::gemm_t<T>('t', 'n', K, N, M, T(1), a->value.data() + g * as, K, dy, N, T(1),
                             grad_of(b).data() + g * bs, N);
        else
          kernels::gemm_t<T>('t', 'n', N, K, M, T(1), dy, N, a->value.data() + g * as, K, T(1),
                             grad_of(b).data() + g * bs, K);
      }
    }
  });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& a) {
  const Shape& s = a->value.shape();
  int d = s.back();
  std::int64_t rows = a->value.numel() / d;
  Tensor<T> out(s);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = a->value.data() + r * d;
    T* y = out.data() + r * d;
    T mx = x[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T z = T(0);
    for (int i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    T inv = T(1) / z;
    for (int i = 0; i < d; ++i) y[i] *= inv;
  }
  return make_node<T>(std::move(out), {a}, [a, rows, d](TapeNode<T>& self) {
    Tensor<T>& da = grad_of(a);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * d;
      const T* dy = self.grad.data() + r * d;
      T dotv = kernels::dot_t(dy, y, d);
      T* dx = da.data() + r * d;
      for (int i = 0; i < d; ++i) dx[i] += y[i] * (dy[i] - dotv);
    }
  });
}

// ---------------- conv / norm / resize ----------------

namespace detail {

template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            T* col) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) *
                           (static_cast<std::int64_t>(Ho) * Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) dst[static_cast<std::int64_t>(oy) * Wo + ox] = T(0);
            continue;
          }
          const T* src = x + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            dst[static_cast<std::int64_t>(oy) * Wo + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, T* x) {
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) *
                                 (static_cast<std::int64_t>(Ho) * Wo);
        for (int oy = 0; oy < Ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (static_cast<std::int64_t>(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[static_cast<std::int64_t>(oy) * Wo + ox];
          }
        }
      }
}

struct LerpAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

// Half-pixel mapping (align_corners=false), clamped to the frame.
inline LerpAxis lerp_axis(int in, int out) {
  LerpAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w1.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    int hi = lo + 1 < in ? lo + 1 : in - 1;
    ax.i0[o] = lo;
    ax.i1[o] = hi;
    ax.w1[o] = src - lo;
  }
  return ax;
}

template <typename T>
void bilinear_fwd(const T* x, int C, int H, int W, int Ho, int Wo, const LerpAxis& ay,
                  const LerpAxis& axx, T* y) {
  for (int c = 0; c < C; ++c) {
    const T* plane = x + static_cast<std::int64_t>(c) * H * W;
    T* out = y + static_cast<std::int64_t>(c) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const T* r0 = plane + static_cast<std::int64_t>(ay.i0[oy]) * W;
      const T* r1 = plane + static_cast<std::int64_t>(ay.i1[oy]) * W;
      T fy = static_cast<T>(ay.w1[oy]);
      for (int ox = 0; ox < Wo; ++ox) {
        T fx = static_cast<T>(axx.w1[ox]);
        T top = r0[axx.i0[ox]] * (T(1) - fx) + r0[axx.i1[ox]] * fx;
        T bot = r1[axx.i0[ox]] * (T(1) - fx) + r1[axx.i1[ox]] * fx;
        out[static_cast<std::int64_t>(oy) * Wo + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
}

template <typename T>
void bilinear_bwd(const T* dy, int C, int H, int W, int Ho, int Wo, const LerpAxis& ay,
                  const LerpAxis& axx, T* dx) {
  for (int c = 0; c < C; ++c) {
    T* plane = dx + static_cast<std::int64_t>(c) * H * W;
    const T* g = dy + static_cast<std::int64_t>(c) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      T fy = static_cast<T>(ay.w1[oy]);
      for (int ox = 0; ox < Wo; ++ox) {
        T fx = static_cast<T>(axx.w1[ox]);
        T gv = g[static_cast<std::int64_t>(oy) * Wo + ox];
        plane[static_cast<std::int64_t>(ay.i0[oy]) * W + axx.i0[ox]] += gv * (T(1) - fy) * (T(1) - fx);
        plane[static_cast<std::int64_t>(ay.i0[oy]) * W + axx.i1[ox]] += gv * (T(1) - fy) * fx;
        plane[static_cast<std::int64_t>(ay.i1[oy]) * W + axx.i0[ox]] += gv * fy * (T(1) - fx);
        plane[static_cast<std::int64_t>(ay.i1[oy]) * W + axx.i1[ox]] += gv * fy * fx;
      }
    }
  }
}

// Plain-tensor resize used by the data pipeline and the knowledge buffer.
template <typename T>
Tensor<T> bilinear_resize_plain(const Tensor<T>& x, int Ho, int Wo) {
  const Shape& s = x.shape();
  FBL_CHECK(s.size() == 3 || s.size() == 4, Err::Shape, "bilinear_resize_plain expects rank 3/4");
  int C = s.size() == 4 ? s[0] * s[1] : s[0];
  int H = s[s.size() - 2], W = s[s.size() - 1];
  LerpAxis ay = lerp_axis(H, Ho), ax = lerp_axis(W, Wo);
  Shape os = s;
  os[s.size() - 2] = Ho;
  os[s.size() - 1] = Wo;
  Tensor<T> out(os);
  bilinear_fwd(x.data(), C, H, W, Ho, Wo, ay, ax, out.data());
  return out;
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const Shape& xs = x->value.shape();
  const Shape& ws = w->value.shape();
  FBL_CHECK(xs.size() == 4 && ws.size() == 4, Err::Shape, "conv2d expects rank-4 input and weight");
  FBL_CHECK(xs[1] == ws[1], Err::Shape,
            "conv2d: channel mismatch " + shape_str(xs) + " vs " + shape_str(ws));
  int B = xs[0], Ci = xs[1], H = xs[2], W = xs[3];
  int Co = ws[0], kh = ws[2], kw = ws[3];
  int Ho = (H + 2 * pad - kh) / stride + 1;
  int Wo = (W + 2 * pad - kw) / stride + 1;
  FBL_CHECK(Ho > 0 && Wo > 0, Err::Shape, "conv2d: empty output");
  std::int64_t ck = static_cast<std::int64_t>(Ci) * kh * kw;
  std::int64_t ow = static_cast<std::int64_t>(Ho) * Wo;
  Tensor<T> out(Shape{B, Co, Ho, Wo});
  {
    Tensor<T> col(Shape{static_cast<int>(ck), static_cast<int>(ow)});
    for (int n = 0; n < B; ++n) {
      detail::im2col(x->value.data() + static_cast<std::int64_t>(n) * Ci * H * W, Ci, H, W, kh, kw,
                     stride, pad, Ho, Wo, col.data());
      T* o = out.data() + static_cast<std::int64_t>(n) * Co * ow;
      kernels::gemm_t<T>('n', 'n', Co, static_cast<int>(ow), static_cast<int>(ck), T(1),
                         w->value.data(), static_cast<int>(ck), col.data(), static_cast<int>(ow),
                         T(0), o, static_cast<int>(ow));
      if (b)
        for (int c = 0; c < Co; ++c)
          for (std::int64_t i = 0; i < ow; ++i) o[c * ow + i] += b->value[c];
    }
  }
  std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
  auto bwd = [x, w, b, B, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad, ck, ow](TapeNode<T>& self) {
    // The column matrix is rebuilt per sample rather than kept from the
    // forward pass; it is the largest buffer in the graph.
    Tensor<T> col(Shape{static_cast<int>(ck), static_cast<int>(ow)});
    for (int n = 0; n < B; ++n) {
      const T* dy = self.grad.data() + static_cast<std::int64_t>(n) * Co * ow;
      if (w->requires_grad) {
        detail::im2col(x->value.data() + static_cast<std::int64_t>(n) * Ci * H * W, Ci, H, W, kh,
                       kw, stride, pad, Ho, Wo, col.data());
        kernels::gemm_t<T>('n', 't', Co, static_cast<int>(ck), static_cast<int>(ow), T(1), dy,
                           static_cast<int>(ow), col.data(), static_cast<int>(ow), T(1),
                           grad_of(w).data(), static_cast<int>(ck));
      }
      if (x->requires_grad) {
        kernels::gemm_t<T>('t', 'n', static_cast<int>(ck), static_cast<int>(ow), Co, T(1),
                           w->value.data(), static_cast<int>(ck), dy, static_cast<int>(ow), T(0),
                           col.data(), static_cast<int>(ow));
        detail::col2im_acc(col.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                           grad_of(x).data() + static_cast<std::int64_t>(n) * Ci * H * W);
      }
      if (b && b->requires_grad) {
        Tensor<T>& db = grad_of(b);
        for (int c = 0; c < Co; ++c) db[c] += kernels::sum_t(dy + c * ow, ow);
      }
    }
  };
  return make_node<T>(std::move(out), std::move(parents), std::move(bwd));
}

// Running stats live in the owning module and are updated in place during
// training-mode forwards; they are not part of the tape.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>* run_mean,
                   Tensor<T>* run_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape& s = x->value.shape();
  FBL_CHECK(s.size() == 4, Err::Shape, "batchnorm2d expects rank 4");
  int B = s[0], C = s[1];
  std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  std::int64_t m = static_cast<std::int64_t>(B) * plane;
  Tensor<T> mean(Shape{C}), invstd(Shape{C});
  if (training) {
    for (int c = 0; c < C; ++c) {
      T sm = T(0);
      for (int n = 0; n < B; ++n)
        sm += kernels::sum_t(x->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane, plane);
      T mu = sm / static_cast<T>(m);
      T sv = T(0);
      for (int n = 0; n < B; ++n) {
        const T* p = x->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          T d = p[i] - mu;
          sv += d * d;
        }
      }
      T var = sv / static_cast<T>(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      if (run_mean && run_var) {
        T unbiased = m > 1 ? sv / static_cast<T>(m - 1) : var;
        (*run_mean)[c] = (T(1) - momentum) * (*run_mean)[c] + momentum * mu;
        (*run_var)[c] = (T(1) - momentum) * (*run_var)[c] + momentum * unbiased;
      }
    }
  } else {
    FBL_CHECK(run_mean && run_var, Err::Eval, "batchnorm2d eval mode requires running stats");
    for (int c = 0; c < C; ++c) {
      mean[c] = (*run_mean)[c];
      invstd[c] = T(1) / std::sqrt((*run_var)[c] + eps);
    }
  }
  Tensor<T> out(s);
  for (int n = 0; n < B; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      T* o = out.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      T g = gamma->value[c] * invstd[c];
      T sh = beta->value[c] - mean[c] * g;
      for (std::int64_t i = 0; i < plane; ++i) o[i] = p[i] * g + sh;
    }
  auto bwd = [x, gamma, beta, mean = std::move(mean), invstd = std::move(invstd), B, C, plane, m,
              training](TapeNode<T>& self) {
    Tensor<T>* dx = x->requires_grad ? &grad_of(x) : nullptr;
    Tensor<T>* dg = gamma->requires_grad ? &grad_of(gamma) : nullptr;
    Tensor<T>* db = beta->requires_grad ? &grad_of(beta) : nullptr;
    for (int c = 0; c < C; ++c) {
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int n = 0; n < B; ++n) {
        const T* dy = self.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        const T* xv = x->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (xv[i] - mean[c]) * invstd[c];
        }
      }
      if (dg) (*dg)[c] += sum_dy_xhat;
      if (db) (*db)[c] += sum_dy;
      if (dx) {
        T g = gamma->value[c] * invstd[c];
        if (training) {
          T k1 = sum_dy / static_cast<T>(m);
          T k2 = sum_dy_xhat / static_cast<T>(m);
          for (int n = 0; n < B; ++n) {
            const T* dy = self.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            const T* xv = x->value.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            T* dxp = dx->data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              T xhat = (xv[i] - mean[c]) * invstd[c];
              dxp[i] += g * (dy[i] - k1 - xhat * k2);
            }
          }
        } else {
          for (int n = 0; n < B; ++n) {
            const T* dy = self.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            T* dxp = dx->data() + (static_cast<std::int64_t>(n) * C + c) * plane;
            kernels::axpy_t(g, dy, dxp, plane);
          }
        }
      }
    }
  };
  return make_node<T>(std::move(out), {x, gamma, beta}, std::move(bwd));
}

// Normalizes over the last dim; gamma/beta have that length.
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Shape& s = x->value.shape();
  int d = s.back();
  FBL_CHECK(gamma->value.numel() == d && beta->value.numel() == d, Err::Shape, "layernorm: affine mismatch");
  std::int64_t rows = x->value.numel() / d;
  Tensor<T> out(s);
  Tensor<T> mu(Shape{static_cast<int>(rows)}), is(Shape{static_cast<int>(rows)});
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* p = x->value.data() + r * d;
    T m = kernels::sum_t(p, d) / static_cast<T>(d);
    T v = T(0);
    for (int i = 0; i < d; ++i) {
      T dv = p[i] - m;
      v += dv * dv;
    }
    v /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(v + eps);
    mu[r] = m;
    is[r] = inv;
    T* o = out.data() + r * d;
    for (int i = 0; i < d; ++i) o[i] = (p[i] - m) * inv * gamma->value[i] + beta->value[i];
  }
  auto bwd = [x, gamma, beta, mu = std::move(mu), is = std::move(is), rows, d](TapeNode<T>& self) {
    Tensor<T>* dx = x->requires_grad ? &grad_of(x) : nullptr;
    Tensor<T>* dg = gamma->requires_grad ? &grad_of(gamma) : nullptr;
    Tensor<T>* db = beta->requires_grad ? &grad_of(beta) : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* p = x->value.data() + r * d;
      const T* dy = self.grad.data() + r * d;
      T inv = is[r], m = mu[r];
      T sum_g = T(0), sum_gx = T(0);
      for (int i = 0; i < d; ++i) {
        T xhat = (p[i] - m) * inv;
        T gi = dy[i] * gamma->value[i];
        sum_g += gi;
        sum_gx += gi * xhat;
        if (dg) (*dg)[i] += dy[i] * xhat;
        if (db) (*db)[i] += dy[i];
      }
      if (dx) {
        T* dxp = dx->data() + r * d;
        T k1 = sum_g / static_cast<T>(d), k2 = sum_gx / static_cast<T>(d);
        for (int i = 0; i < d; ++i) {
          T xhat = (p[i] - m) * inv;
          dxp[i] += inv * (dy[i] * gamma->value[i] - k1 - xhat * k2);
        }
      }
    }
  };
  return make_node<T>(std::move(out), {x, gamma, beta}, std::move(bwd));
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int Ho, int Wo) {
  const Shape& s = x->value.shape();
  FBL_CHECK(s.size() == 4, Err::Shape, "upsample_bilinear expects rank 4");
  int B = s[0], C = s[1], H = s[2], W = s[3];
  detail::LerpAxis ay = detail::lerp_axis(H, Ho), ax = detail::lerp_axis(W, Wo);
  Tensor<T> out(Shape{B, C, Ho, Wo});
  detail::bilinear_fwd(x->value.data(), B * C, H, W, Ho, Wo, ay, ax, out.data());
  return make_node<T>(std::move(out), {x},
                      [x, B, C, H, W, Ho, Wo, ay = std::move(ay), ax = std::move(ax)](TapeNode<T>& self) {
                        detail::bilinear_bwd(self.grad.data(), B * C, H, W, Ho, Wo, ay, ax,
                                             grad_of(x).data());
                      });
}

// tokens (B,N,D) scaled per-position by attention ka (D,N): out = tok * ka^T * scale
template <typename T>
Var<T> guide_mul(const Var<T>& tokens, const Var<T>& ka, T scale) {
  const Shape& ts = tokens->value.shape();
  const Shape& ks = ka->value.shape();
  FBL_CHECK(ts.size() == 3 && ks.size() == 2 && ks[0] == ts[2] && ks[1] == ts[1], Err::Shape,
            "guide_mul: attention grid mismatch");
  int B = ts[0], N = ts[1], D = ts[2];
  Tensor<T> out(ts);
  for (int n = 0; n < B; ++n)
    for (int t = 0; t < N; ++t) {
      const T* src = tokens->value.data() + (static_cast<std::int64_t>(n) * N + t) * D;
      T* dst = out.data() + (static_cast<std::int64_t>(n) * N + t) * D;
      for (int c = 0; c < D; ++c) dst[c] = src[c] * ka->value.at(c, t) * scale;
    }
  return make_node<T>(std::move(out), {tokens, ka}, [tokens, ka, B, N, D, scale](TapeNode<T>& self) {
    for (int n = 0; n < B; ++n)
      for (int t = 0; t < N; ++t) {
        const T* dy = self.grad.data() + (static_cast<std::int64_t>(n) * N + t) * D;
        const T* tv = tokens->value.data() + (static_cast<std::int64_t>(n) * N + t) * D;
        if (tokens->requires_grad) {
          T* dt = grad_of(tokens).data() + (static_cast<std::int64_t>(n) * N + t) * D;
          for (int c = 0; c < D; ++c) dt[c] += dy[c] * ka->value.at(c, t) * scale;
        }
        if (ka->requires_grad) {
          Tensor<T>& dk = grad_of(ka);
          for (int c = 0; c < D; ++c) dk.at(c, t) += dy[c] * tv[c] * scale;
        }
      }
  });
}

}  // namespace fblnet
