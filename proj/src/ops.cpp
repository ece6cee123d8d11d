#include "densessm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <limits>

namespace densessm {

namespace {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const MatRM<T>>;
template <class T>
using Map = Eigen::Map<MatRM<T>>;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

struct Broadcast {
  Shape out;
  std::size_t n = 0;        // output elements
  std::size_t a_inner = 0;  // a is indexed by i % a_inner
  std::size_t b_inner = 0;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b || is_suffix(b, a)) {
    bc.out = a;
  } else if (is_suffix(a, b)) {
    bc.out = b;
  } else {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  }
  bc.n = shape_numel(bc.out);
  bc.a_inner = shape_numel(a);
  bc.b_inner = shape_numel(b);
  return bc;
}

// Applies f(i_out, i_a, i_b) over the broadcast; the smaller operand repeats
// in whole blocks, so no per-element modulo is needed.
template <class F>
void for_broadcast(const Broadcast& bc, F f) {
  const std::size_t inner = std::min(bc.a_inner, bc.b_inner);
  const bool a_small = bc.a_inner < bc.b_inner;
  const bool b_small = bc.b_inner < bc.a_inner;
  for (std::size_t base = 0; base < bc.n; base += inner) {
    const std::size_t oa = a_small ? 0 : base, ob = b_small ? 0 : base;
    for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j, ob + j);
  }
}

template <class T, class Fwd, class Da, class Db>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* op, Fwd fwd, Da da, Db db) {
  const Broadcast bc = plan_broadcast(a.shape(), b.shape(), op);
  Tensor<T> out(bc.out);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.mutable_ptr();
  if (bc.n == 0) return record<T>(std::move(out), {a, b}, op, [](Node<T>&) {});
  for_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = fwd(pa[ia], pb[ib]); });
  return record<T>(std::move(out), {a, b}, op, [bc, da, db](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* xa = self.parents[0]->value.ptr();
    const T* xb = self.parents[1]->value.ptr();
    if (T* ga = self.parent_grad(0)) {
      for_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * da(xa[ia], xb[ib]); });
    }
    if (T* gb = self.parent_grad(1)) {
      for_broadcast(bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * db(xa[ia], xb[ib]); });
    }
  });
}

// `deriv(x, y)` is dy/dx given input x and output y.
template <class T, class Fwd, class Deriv>
Var<T> unary(const Var<T>& a, const char* op, Fwd fwd, Deriv deriv) {
  Tensor<T> out(a.shape());
  const T* pa = a.value().ptr();
  T* po = out.mutable_ptr();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  return record<T>(std::move(out), {a}, op, [deriv](Node<T>& self) {
    T* ga = self.parent_grad(0);
    if (!ga) return;
    const T* g = self.grad.ptr();
    const T* x = self.parents[0]->value.ptr();
    const T* y = self.value.ptr();
    for (std::size_t i = 0; i < self.value.numel(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

std::size_t leading(const Shape& s) {
  std::size_t m = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) m *= s[i];
  return m;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(
      a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a, "sigmoid", [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  return unary<T>(a, "silu", [](T x) { return silu_scalar(x); },
                  [](T x, T) {
                    const T s = sigmoid_scalar(x);
                    return s * (T(1) + x * (T(1) - s));
                  });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  return unary<T>(
      a, "softplus", [](T x) { return softplus_scalar(x); },
      [](T x, T) { return x > T(20) ? T(1) : sigmoid_scalar(x); });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(
      a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> elementwise(Elementwise op, const Var<T>& a) {
  switch (op) {
    case Elementwise::exp: return exp(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::silu: return silu(a);
    case Elementwise::softplus: return softplus(a);
    default: throw ArgumentError("elementwise: binary op called with one argument");
  }
}

template <class T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>& b) {
  switch (op) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    default: throw ArgumentError("elementwise: unary op called with two arguments");
  }
}

template <class T>
Tensor<T> matmul_tensor(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = leading(a.shape()), k = b.dim(0), n = b.dim(1);
  Shape os = a.shape();
  os.back() = n;
  Tensor<T> out(os);
  Map<T>(out.mutable_ptr(), m, n).noalias() = CMap<T>(a.ptr(), m, k) * CMap<T>(b.ptr(), k, n);
  return out;
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = matmul_tensor(a.value(), b.value());
  const std::size_t m = leading(a.shape()), k = b.dim(0), n = b.dim(1);
  return record<T>(std::move(out), {a, b}, "matmul", [m, k, n](Node<T>& self) {
    CMap<T> g(self.grad.ptr(), m, n);
    if (T* ga = self.parent_grad(0)) {
      Map<T>(ga, m, k).noalias() += g * CMap<T>(self.parents[1]->value.ptr(), k, n).transpose();
    }
    if (T* gb = self.parent_grad(1)) {
      Map<T>(gb, k, n).noalias() += CMap<T>(self.parents[0]->value.ptr(), m, k).transpose() * g;
    }
  });
}

template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (b.rank() != 2 || a.rank() < 1 || a.shape().back() != b.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  const std::size_t m = leading(a.shape()), k = b.dim(1), n = b.dim(0);
  Shape os = a.shape();
  os.back() = n;
  Tensor<T> out(os);
  Map<T>(out.mutable_ptr(), m, n).noalias() =
      CMap<T>(a.value().ptr(), m, k) * CMap<T>(b.value().ptr(), n, k).transpose();
  return record<T>(std::move(out), {a, b}, "matmul_nt", [m, k, n](Node<T>& self) {
    CMap<T> g(self.grad.ptr(), m, n);
    if (T* ga = self.parent_grad(0)) {
      Map<T>(ga, m, k).noalias() += g * CMap<T>(self.parents[1]->value.ptr(), n, k);
    }
    if (T* gb = self.parent_grad(1)) {
      Map<T>(gb, n, k).noalias() += g.transpose() * CMap<T>(self.parents[0]->value.ptr(), m, k);
    }
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return record<T>(Tensor<T>::scalar(s), {a}, "sum", [](Node<T>& self) {
    T* ga = self.parent_grad(0);
    if (!ga) return;
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.parents[0]->value.numel(); ++i) ga[i] += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  if (a.numel() == 0) throw ArgumentError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, T eps) {
  if (weight.rank() != 1 || x.rank() < 1 || x.shape().back() != weight.dim(0)) {
    throw DimensionError("rms_norm: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t d = weight.dim(0), rows = leading(x.shape());
  Tensor<T> out(x.shape());
  std::vector<T> inv(rows);
  const T* px = x.value().ptr();
  const T* pw = weight.value().ptr();
  T* po = out.mutable_ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T ms = 0;
    for (std::size_t j = 0; j < d; ++j) ms += px[r * d + j] * px[r * d + j];
    inv[r] = T(1) / std::sqrt(ms / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] * inv[r] * pw[j];
  }
  return record<T>(std::move(out), {x, weight}, "rms_norm", [inv = std::move(inv), d, rows](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* xv = self.parents[0]->value.ptr();
    const T* w = self.parents[1]->value.ptr();
    T* gx = self.parent_grad(0);
    T* gw = self.parent_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xr = xv + r * d;
      const T* gr = g + r * d;
      if (gw) {
        for (std::size_t j = 0; j < d; ++j) gw[j] += gr[j] * xr[j] * inv[r];
      }
      if (gx) {
        // y_j = x_j * s * w_j, s = (mean(x^2) + eps)^(-1/2)
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * w[j] * xr[j];
        const T s3 = inv[r] * inv[r] * inv[r] / static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gr[j] * w[j] * inv[r] - xr[j] * dot * s3;
      }
    }
  });
}

template <class T>
Var<T> embedding(const Var<T>& table, const Tokens& tokens) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Tensor<T> out(Shape{tokens.batch, tokens.seq, d});
  const T* pt = table.value().ptr();
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    std::copy_n(pt + static_cast<std::size_t>(tokens.ids[i]) * d, d, out.mutable_ptr() + i * d);
  }
  return record<T>(std::move(out), {table}, "embedding", [ids = tokens.ids, d](Node<T>& self) {
    T* gt = self.parent_grad(0);
    if (!gt) return;
    const T* g = self.grad.ptr();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = gt + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
    }
  });
}

template <class T>
Var<T> cross_entropy_logits(const Var<T>& logits, std::span<const std::int32_t> targets) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy_logits: logits must have a vocabulary axis");
  const std::size_t vocab = logits.shape().back(), rows = leading(logits.shape());
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " positions");
  }
  if (rows == 0) throw ArgumentError("cross_entropy_logits: no positions");
  const T* pl = logits.value().ptr();
  std::vector<T> probs(rows * vocab);
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw IndexError("target " + std::to_string(tgt) + " outside [0, " + std::to_string(vocab) + ")");
    }
    const T* row = pl + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - mx);
      z += probs[r * vocab + j];
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
    total += static_cast<double>(std::log(z) + mx - row[tgt]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(rows));
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  return record<T>(Tensor<T>::scalar(loss), {logits}, "cross_entropy",
                   [probs = std::move(probs), tg = std::move(tg), rows, vocab](Node<T>& self) {
                     T* gl = self.parent_grad(0);
                     if (!gl) return;
                     const T g = self.grad[0] / static_cast<T>(rows);
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += g * probs[r * vocab + j];
                       gl[r * vocab + static_cast<std::size_t>(tg[r])] -= g;
                     }
                   });
}

template <class T>
Var<T> slice_last(const Var<T>& x, std::size_t start, std::size_t len) {
  const std::size_t d = x.shape().back();
  if (start + len > d) {
    throw DimensionError("slice_last [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") outside last extent " + std::to_string(d));
  }
  const std::size_t rows = leading(x.shape());
  Shape os = x.shape();
  os.back() = len;
  Tensor<T> out(os);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().ptr() + r * d + start, len, out.mutable_ptr() + r * len);
  return record<T>(std::move(out), {x}, "slice_last", [rows, d, start, len](Node<T>& self) {
    T* gx = self.parent_grad(0);
    if (!gx) return;
    const T* g = self.grad.ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) gx[r * d + start + j] += g[r * len + j];
    }
  });
}

template <class T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_last of nothing");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    widths.push_back(l.back());
    l.pop_back();
    if (l != lead) throw DimensionError("concat_last: leading shapes differ");
    total += widths.back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape os = lead;
  os.push_back(total);
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].value().ptr() + r * widths[k], widths[k], out.mutable_ptr() + r * total + off);
    }
    off += widths[k];
  }
  return record<T>(std::move(out), parts, "concat_last", [widths, rows, total](Node<T>& self) {
    const T* g = self.grad.ptr();
    std::size_t o = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (T* gp = self.parent_grad(k)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + o + j];
        }
      }
      o += widths[k];
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshape(std::move(shape));
  return record<T>(std::move(out), {x}, "reshape", [](Node<T>& self) {
    T* gx = self.parent_grad(0);
    if (!gx) return;
    const T* g = self.grad.ptr();
    for (std::size_t i = 0; i < self.value.numel(); ++i) gx[i] += g[i];
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len) {
  if (x.rank() != 2 || start + len > x.dim(0)) {
    throw DimensionError("slice_rows [" + std::to_string(start) + ", " + std::to_string(start + len) + ") of " +
                         shape_str(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  const T* src = x.value().ptr() + start * cols;
  Tensor<T> out(Shape{len, cols}, std::vector<T>(src, src + len * cols));
  return record<T>(std::move(out), {x}, "slice_rows", [start, cols](Node<T>& self) {
    T* gx = self.parent_grad(0);
    if (!gx) return;
    const T* g = self.grad.ptr();
    for (std::size_t i = 0; i < self.value.numel(); ++i) gx[start * cols + i] += g[i];
  });
}

#define DENSESSM_INSTANTIATE_OPS(T)                                                        \
  template Var<T> elementwise<T>(Elementwise, const Var<T>&);                              \
  template Var<T> elementwise<T>(Elementwise, const Var<T>&, const Var<T>&);               \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> exp<T>(const Var<T>&);                                                   \
  template Var<T> sigmoid<T>(const Var<T>&);                                               \
  template Var<T> silu<T>(const Var<T>&);                                                  \
  template Var<T> softplus<T>(const Var<T>&);                                              \
  template Var<T> relu<T>(const Var<T>&);                                                  \
  template Var<T> scale<T>(const Var<T>&, T);                                              \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                 \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> sum<T>(const Var<T>&);                                                   \
  template Var<T> mean<T>(const Var<T>&);                                                  \
  template Var<T> rms_norm<T>(const Var<T>&, const Var<T>&, T);                            \
  template Var<T> embedding<T>(const Var<T>&, const Tokens&);                              \
  template Var<T> cross_entropy_logits<T>(const Var<T>&, std::span<const std::int32_t>);   \
  template Var<T> slice_last<T>(const Var<T>&, std::size_t, std::size_t);                  \
  template Var<T> concat_last<T>(const std::vector<Var<T>>&);                              \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                        \
  template Var<T> slice_rows<T>(const Var<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> matmul_tensor<T>(const Tensor<T>&, const Tensor<T>&);

DENSESSM_INSTANTIATE_OPS(float)
DENSESSM_INSTANTIATE_OPS(double)

}  // namespace densessm
