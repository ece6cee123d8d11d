#include "densessm/ssm_kernels.hpp"

#include <Eigen/Core>
#include <atomic>
#include <cmath>

namespace densessm {

namespace {

std::atomic<bool> g_decay_fault{false};

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Strided = Eigen::Map<const MatRM<T>, 0, Eigen::OuterStride<>>;
template <class T>
using StridedMut = Eigen::Map<MatRM<T>, 0, Eigen::OuterStride<>>;

void require_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw DimensionError(std::string(op) + ": " + detail);
}

// D[t, i] = gamma^(t - i) for i <= t.
template <class T>
MatRM<T> decay_mask(double gamma, std::size_t len) {
  const int shift = g_decay_fault.load() ? 1 : 0;
  std::vector<T> pw(len);
  for (std::size_t j = 0; j < len; ++j) pw[j] = static_cast<T>(std::pow(gamma, static_cast<double>(j) + shift));
  MatRM<T> d = MatRM<T>::Zero(len, len);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i <= t; ++i) d(t, i) = pw[t - i];
  }
  return d;
}

}  // namespace

namespace testing {
void set_decay_mask_fault(bool enabled) { g_decay_fault.store(enabled); }
bool decay_mask_fault() { return g_decay_fault.load(); }
}  // namespace testing

template <class T>
DiscreteSSM<T>::DiscreteSSM(Tensor<T> a_bar, Tensor<T> b_bar, Tensor<T> c)
    : a_bar_(std::move(a_bar)), b_bar_(std::move(b_bar)), c_(std::move(c)) {
  require_shape(a_bar_.rank() == 2, "DiscreteSSM", "a_bar must be [channels, d_state], got " + shape_str(a_bar_.shape()));
  require_shape(b_bar_.shape() == a_bar_.shape() && c_.shape() == a_bar_.shape(), "DiscreteSSM",
                "a_bar, b_bar and c must share a shape");
  for (T v : a_bar_.data()) {
    if (!(std::abs(v) < T(1))) throw DomainError("DiscreteSSM: |a_bar| must be < 1 for a stable recurrence");
  }
}

template <class T>
Tensor<T> ssm_recurrent_step(const Tensor<T>& h_prev, const DiscreteSSM<T>& ssm, const Tensor<T>& x_t) {
  const std::size_t dd = ssm.channels(), ss = ssm.d_state();
  require_shape(h_prev.shape() == Shape({dd, ss}), "ssm_recurrent_step",
                "state " + shape_str(h_prev.shape()) + " vs system " + shape_str(ssm.a_bar().shape()));
  require_shape(x_t.shape() == Shape({dd}), "ssm_recurrent_step", "input " + shape_str(x_t.shape()));
  Tensor<T> h(Shape{dd, ss});
  for (std::size_t d = 0; d < dd; ++d) {
    for (std::size_t n = 0; n < ss; ++n) {
      const std::size_t i = d * ss + n;
      h[i] = ssm.a_bar()[i] * h_prev[i] + ssm.b_bar()[i] * x_t[d];
    }
  }
  return h;
}

template <class T>
Tensor<T> ssm_output(const DiscreteSSM<T>& ssm, const Tensor<T>& h_t) {
  const std::size_t dd = ssm.channels(), ss = ssm.d_state();
  require_shape(h_t.shape() == Shape({dd, ss}), "ssm_output", "state " + shape_str(h_t.shape()));
  Tensor<T> y(Shape{dd});
  for (std::size_t d = 0; d < dd; ++d) {
    T acc = 0;
    for (std::size_t n = 0; n < ss; ++n) acc += ssm.c()[d * ss + n] * h_t[d * ss + n];
    y[d] = acc;
  }
  return y;
}

template <class T>
Tensor<T> ssm_conv_kernel(const DiscreteSSM<T>& ssm, std::size_t length) {
  if (length < 1) throw ArgumentError("ssm_conv_kernel: length must be >= 1");
  const std::size_t dd = ssm.channels(), ss = ssm.d_state();
  Tensor<T> k(Shape{length, dd});
  // powers[d, n] = a_bar^t, advanced once per t
  std::vector<T> powers(dd * ss, T(1));
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t d = 0; d < dd; ++d) {
      T acc = 0;
      for (std::size_t n = 0; n < ss; ++n) {
        const std::size_t i = d * ss + n;
        acc += ssm.c()[i] * powers[i] * ssm.b_bar()[i];
      }
      k[t * dd + d] = acc;
    }
    for (std::size_t i = 0; i < powers.size(); ++i) powers[i] *= ssm.a_bar()[i];
  }
  return k;
}

template <class T>
Tensor<T> ssm_conv_apply(const Tensor<T>& x, const Tensor<T>& kernel) {
  require_shape(x.rank() == 2 && kernel.rank() == 2 && x.dim(1) == kernel.dim(1), "ssm_conv_apply",
                "x " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  const std::size_t len = x.dim(0), dd = x.dim(1);
  if (kernel.dim(0) < len) {
    throw DimensionError("ssm_conv_apply: kernel length " + std::to_string(kernel.dim(0)) +
                         " shorter than sequence length " + std::to_string(len));
  }
  Tensor<T> y(Shape{len, dd});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < dd; ++d) {
      T acc = 0;
      for (std::size_t i = 0; i <= t; ++i) acc += kernel[(t - i) * dd + d] * x[i * dd + d];
      y[t * dd + d] = acc;
    }
  }
  return y;
}

template <class T>
Discretized<T> selective_discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(a.rank() == 2, "selective_discretize", "a must be [D, S]");
  const std::size_t dd = a.dim(0), ss = a.dim(1);
  const bool single = delta.rank() == 1;
  const std::size_t len = single ? 1 : delta.dim(0);
  require_shape(single ? (delta.dim(0) == dd && b.shape() == Shape({ss}))
                       : (delta.rank() == 2 && delta.dim(1) == dd && b.shape() == Shape({len, ss})),
                "selective_discretize",
                "delta " + shape_str(delta.shape()) + ", a " + shape_str(a.shape()) + ", b " + shape_str(b.shape()));
  for (T v : delta.data()) {
    if (!(v > T(0))) throw DomainError("selective_discretize: delta must be positive");
  }
  for (T v : a.data()) {
    if (!(v < T(0))) throw DomainError("selective_discretize: a must be negative");
  }
  Shape out_shape = single ? Shape{dd, ss} : Shape{len, dd, ss};
  Discretized<T> out{Tensor<T>(out_shape), Tensor<T>(out_shape)};
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < dd; ++d) {
      const T dt = delta[t * dd + d];
      for (std::size_t n = 0; n < ss; ++n) {
        const std::size_t i = (t * dd + d) * ss + n;
        out.a_bar[i] = std::exp(dt * a[d * ss + n]);
        out.b_bar[i] = dt * b[t * ss + n];
      }
    }
  }
  return out;
}

template <class T>
ScanResult<T> selective_scan(const Tensor<T>& x, const SelectiveParams<T>& params, const Tensor<T>& d_skip) {
  require_shape(x.rank() == 2, "selective_scan", "x must be [T, D]");
  const std::size_t len = x.dim(0), dd = x.dim(1);
  require_shape(params.delta.shape() == x.shape(), "selective_scan", "delta must match x");
  require_shape(params.a.rank() == 2 && params.a.dim(0) == dd, "selective_scan", "a must be [D, S]");
  const std::size_t ss = params.a.dim(1);
  require_shape(params.c.shape() == Shape({len, ss}), "selective_scan", "c must be [T, S]");
  require_shape(d_skip.shape() == Shape({dd}), "selective_scan", "d_skip must be [D]");
  const Discretized<T> disc = selective_discretize(params.delta, params.a, params.b);

  ScanResult<T> r{Tensor<T>(Shape{len, dd}), Tensor<T>(Shape{len, dd, ss})};
  std::vector<T> h(dd * ss, T(0));
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t d = 0; d < dd; ++d) {
      T acc = 0;
      for (std::size_t n = 0; n < ss; ++n) {
        const std::size_t i = d * ss + n, ti = t * dd * ss + i;
        h[i] = disc.a_bar[ti] * h[i] + disc.b_bar[ti] * x[t * dd + d];
        r.h_seq[ti] = h[i];
        acc += params.c[t * ss + n] * h[i];
      }
      r.y[t * dd + d] = acc + d_skip[d] * x[t * dd + d];
    }
  }
  return r;
}

RetentionHead::RetentionHead(double g, std::size_t dk, std::size_t dv) : gamma(g), d_k(dk), d_v(dv) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw DomainError("retention decay gamma must lie in (0, 1)");
}

template <class T>
RetentionStep<T> retention_recurrent_step(const Tensor<T>& s_prev, const RetentionHead& head, const Tensor<T>& q,
                                          const Tensor<T>& k, const Tensor<T>& v) {
  const std::size_t dk = head.d_k, dv = head.d_v;
  require_shape(s_prev.shape() == Shape({dk, dv}) && q.shape() == Shape({dk}) && k.shape() == Shape({dk}) &&
                    v.shape() == Shape({dv}),
                "retention_recurrent_step",
                "state " + shape_str(s_prev.shape()) + ", q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                    ", v " + shape_str(v.shape()));
  const T g = static_cast<T>(head.gamma);
  RetentionStep<T> out{Tensor<T>(Shape{dk, dv}), Tensor<T>(Shape{dv})};
  for (std::size_t i = 0; i < dk; ++i) {
    for (std::size_t j = 0; j < dv; ++j) out.s[i * dv + j] = g * s_prev[i * dv + j] + k[i] * v[j];
  }
  for (std::size_t j = 0; j < dv; ++j) {
    T acc = 0;
    for (std::size_t i = 0; i < dk; ++i) acc += q[i] * out.s[i * dv + j];
    out.y[j] = acc;
  }
  return out;
}

template <class T>
Tensor<T> retention_parallel(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const RetentionHead& head) {
  require_shape(q.rank() == 2 && k.shape() == q.shape() && v.rank() == 2 && v.dim(0) == q.dim(0) &&
                    q.dim(1) == head.d_k && v.dim(1) == head.d_v,
                "retention_parallel",
                "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  const std::size_t len = q.dim(0);
  Eigen::Map<const MatRM<T>> qm(q.ptr(), len, head.d_k), km(k.ptr(), len, head.d_k), vm(v.ptr(), len, head.d_v);
  const MatRM<T> a = (qm * km.transpose()).cwiseProduct(decay_mask<T>(head.gamma, len));
  Tensor<T> y(Shape{len, head.d_v});
  Eigen::Map<MatRM<T>>(y.mutable_ptr(), len, head.d_v).noalias() = a * vm;
  return y;
}

std::vector<double> decay_schedule(std::size_t n_heads) {
  if (n_heads < 1) throw ArgumentError("decay_schedule: n_heads must be >= 1");
  std::vector<double> g(n_heads);
  for (std::size_t i = 0; i < n_heads; ++i) g[i] = 1.0 - std::ldexp(1.0, -5 - static_cast<int>(i));
  return g;
}

template <class T>
Var<T> retention_parallel_op(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const double> gammas) {
  require_shape(q.rank() == 3 && k.shape() == q.shape() && v.rank() == 3 && v.dim(0) == q.dim(0) &&
                    v.dim(1) == q.dim(1),
                "retention_parallel_op",
                "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  const std::size_t nb = q.dim(0), len = q.dim(1), heads = gammas.size();
  require_shape(heads > 0 && q.dim(2) % heads == 0 && v.dim(2) % heads == 0, "retention_parallel_op",
                "head count must divide q/k and v widths");
  const std::size_t dk = q.dim(2) / heads, dv = v.dim(2) / heads;
  const std::size_t qs = q.dim(2), vs = v.dim(2);

  std::vector<MatRM<T>> masks;
  for (double g : gammas) {
    RetentionHead check(g, dk, dv);
    masks.push_back(decay_mask<T>(g, len));
  }
  Tensor<T> out(Shape{nb, len, vs});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Strided<T> qm(q.value().ptr() + b * len * qs + h * dk, len, dk, Eigen::OuterStride<>(qs));
      Strided<T> km(k.value().ptr() + b * len * qs + h * dk, len, dk, Eigen::OuterStride<>(qs));
      Strided<T> vm(v.value().ptr() + b * len * vs + h * dv, len, dv, Eigen::OuterStride<>(vs));
      StridedMut<T> ym(out.mutable_ptr() + b * len * vs + h * dv, len, dv, Eigen::OuterStride<>(vs));
      const MatRM<T> a = (qm * km.transpose()).cwiseProduct(masks[h]);
      ym.noalias() = a * vm;
    }
  }
  return record<T>(std::move(out), {q, k, v}, "retention_parallel",
                   [masks = std::move(masks), nb, len, heads, dk, dv, qs, vs](Node<T>& self) {
                     const T* pq = self.parents[0]->value.ptr();
                     const T* pk = self.parents[1]->value.ptr();
                     const T* pv = self.parents[2]->value.ptr();
                     T* gq = self.parent_grad(0);
                     T* gk = self.parent_grad(1);
                     T* gv = self.parent_grad(2);
                     for (std::size_t b = 0; b < nb; ++b) {
                       for (std::size_t h = 0; h < heads; ++h) {
                         const std::size_t qo = b * len * qs + h * dk, vo = b * len * vs + h * dv;
                         Strided<T> qm(pq + qo, len, dk, Eigen::OuterStride<>(qs));
                         Strided<T> km(pk + qo, len, dk, Eigen::OuterStride<>(qs));
                         Strided<T> vm(pv + vo, len, dv, Eigen::OuterStride<>(vs));
                         Strided<T> gy(self.grad.ptr() + vo, len, dv, Eigen::OuterStride<>(vs));
                         const MatRM<T> da = (gy * vm.transpose()).cwiseProduct(masks[h]);
                         if (gq) StridedMut<T>(gq + qo, len, dk, Eigen::OuterStride<>(qs)).noalias() += da * km;
                         if (gk) {
                           StridedMut<T>(gk + qo, len, dk, Eigen::OuterStride<>(qs)).noalias() += da.transpose() * qm;
                         }
                         if (gv) {
                           const MatRM<T> a = (qm * km.transpose()).cwiseProduct(masks[h]);
                           StridedMut<T>(gv + vo, len, dv, Eigen::OuterStride<>(vs)).noalias() += a.transpose() * gy;
                         }
                       }
                     }
                   });
}

template <class T>
Var<T> selective_scan_states(const Var<T>& x, const Var<T>& delta, const Var<T>& a, const Var<T>& b) {
  require_shape(x.rank() == 3 && delta.shape() == x.shape() && a.rank() == 2 && a.dim(0) == x.dim(2) && b.rank() == 3 &&
                    b.dim(0) == x.dim(0) && b.dim(1) == x.dim(1) && b.dim(2) == a.dim(1),
                "selective_scan_states",
                "x " + shape_str(x.shape()) + ", delta " + shape_str(delta.shape()) + ", a " + shape_str(a.shape()) +
                    ", b " + shape_str(b.shape()));
  const std::size_t nb = x.dim(0), len = x.dim(1), dd = x.dim(2), ss = a.dim(1);
  const T* px = x.value().ptr();
  const T* pdt = delta.value().ptr();
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  Tensor<T> out(Shape{nb, len, dd, ss});
  T* ph = out.mutable_ptr();
  using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
  Vec abar(ss);
  for (std::size_t bi = 0; bi < nb; ++bi) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t bt = bi * len + t;
      const T* prev = t ? ph + (bt - 1) * dd * ss : nullptr;
      T* cur = ph + bt * dd * ss;
      const T* brow = pb + bt * ss;
      for (std::size_t d = 0; d < dd; ++d) {
        const T dt = pdt[bt * dd + d];
        const T u = dt * px[bt * dd + d];
        abar = (dt * Vec::Map(pa + d * ss, ss)).exp();
        for (std::size_t n = 0; n < ss; ++n) {
          const T hp = prev ? prev[d * ss + n] : T(0);
          cur[d * ss + n] = abar[n] * hp + u * brow[n];
        }
      }
    }
  }
  return record<T>(std::move(out), {x, delta, a, b}, "selective_scan", [nb, len, dd, ss](Node<T>& self) {
    const T* px = self.parents[0]->value.ptr();
    const T* pdt = self.parents[1]->value.ptr();
    const T* pa = self.parents[2]->value.ptr();
    const T* pb = self.parents[3]->value.ptr();
    const T* ph = self.value.ptr();
    const T* gh = self.grad.ptr();
    T* gx = self.parent_grad(0);
    T* gdt = self.parent_grad(1);
    T* ga = self.parent_grad(2);
    T* gb = self.parent_grad(3);
    std::vector<T> carry(dd * ss);  // a_bar_{t+1} * G_{t+1}
    using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
    Vec abar_row(ss);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      std::fill(carry.begin(), carry.end(), T(0));
      for (std::size_t t = len; t-- > 0;) {
        const std::size_t bt = bi * len + t;
        const T* prev = t ? ph + (bt - 1) * dd * ss : nullptr;
        const T* brow = pb + bt * ss;
        for (std::size_t d = 0; d < dd; ++d) {
          const T dt = pdt[bt * dd + d];
          const T xv = px[bt * dd + d];
          const T* arow = pa + d * ss;
          abar_row = (dt * Vec::Map(arow, ss)).exp();
          T acc_dt = 0, acc_x = 0;
          for (std::size_t n = 0; n < ss; ++n) {
            const std::size_t i = d * ss + n;
            const T g = gh[bt * dd * ss + i] + carry[i];
            const T abar = abar_row[n];
            const T hp = prev ? prev[i] : T(0);
            acc_dt += g * (arow[n] * abar * hp + brow[n] * xv);
            acc_x += g * dt * brow[n];
            if (ga) ga[i] += g * dt * abar * hp;
            if (gb) gb[bt * ss + n] += g * dt * xv;
            carry[i] = abar * g;
          }
          if (gdt) gdt[bt * dd + d] += acc_dt;
          if (gx) gx[bt * dd + d] += acc_x;
        }
      }
    }
  });
}

template <class T>
Var<T> state_readout(const Var<T>& h, const Var<T>& c) {
  require_shape(h.rank() == 4 && c.rank() == 3 && c.dim(0) == h.dim(0) && c.dim(1) == h.dim(1) && c.dim(2) == h.dim(3),
                "state_readout", "h " + shape_str(h.shape()) + ", c " + shape_str(c.shape()));
  const std::size_t rows = h.dim(0) * h.dim(1), dd = h.dim(2), ss = h.dim(3);
  Tensor<T> out(Shape{h.dim(0), h.dim(1), dd});
  const T* ph = h.value().ptr();
  const T* pc = c.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < dd; ++d) {
      T acc = 0;
      for (std::size_t n = 0; n < ss; ++n) acc += ph[(r * dd + d) * ss + n] * pc[r * ss + n];
      out[r * dd + d] = acc;
    }
  }
  return record<T>(std::move(out), {h, c}, "state_readout", [rows, dd, ss](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* ph = self.parents[0]->value.ptr();
    const T* pc = self.parents[1]->value.ptr();
    T* gh = self.parent_grad(0);
    T* gc = self.parent_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t d = 0; d < dd; ++d) {
        const T gv = g[r * dd + d];
        for (std::size_t n = 0; n < ss; ++n) {
          if (gh) gh[(r * dd + d) * ss + n] += gv * pc[r * ss + n];
          if (gc) gc[r * ss + n] += gv * ph[(r * dd + d) * ss + n];
        }
      }
    }
  });
}

template <class T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_shape(x.rank() == 3 && w.rank() == 2 && w.dim(1) == x.dim(2) && bias.shape() == Shape({x.dim(2)}),
                "causal_conv1d", "x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()));
  const std::size_t nb = x.dim(0), len = x.dim(1), dd = x.dim(2), width = w.dim(0);
  Tensor<T> out(x.shape());
  const T* px = x.value().ptr();
  const T* pw = w.value().ptr();
  const T* pbias = bias.value().ptr();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      T* o = out.mutable_ptr() + (b * len + t) * dd;
      for (std::size_t d = 0; d < dd; ++d) o[d] = pbias[d];
      for (std::size_t j = 0; j < width; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(width - 1);
        if (src < 0) continue;
        const T* xr = px + (b * len + static_cast<std::size_t>(src)) * dd;
        for (std::size_t d = 0; d < dd; ++d) o[d] += pw[j * dd + d] * xr[d];
      }
    }
  }
  return record<T>(std::move(out), {x, w, bias}, "causal_conv1d", [nb, len, dd, width](Node<T>& self) {
    const T* g = self.grad.ptr();
    const T* px = self.parents[0]->value.ptr();
    const T* pw = self.parents[1]->value.ptr();
    T* gx = self.parent_grad(0);
    T* gw = self.parent_grad(1);
    T* gbias = self.parent_grad(2);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t t = 0; t < len; ++t) {
        const T* gr = g + (b * len + t) * dd;
        if (gbias) {
          for (std::size_t d = 0; d < dd; ++d) gbias[d] += gr[d];
        }
        for (std::size_t j = 0; j < width; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(width - 1);
          if (src < 0) continue;
          const std::size_t so = (b * len + static_cast<std::size_t>(src)) * dd;
          for (std::size_t d = 0; d < dd; ++d) {
            if (gw) gw[j * dd + d] += gr[d] * px[so + d];
            if (gx) gx[so + d] += gr[d] * pw[j * dd + d];
          }
        }
      }
    }
  });
}

#define DENSESSM_INSTANTIATE_KERNELS(T)                                                                         \
  template class DiscreteSSM<T>;                                                                                \
  template Tensor<T> ssm_recurrent_step<T>(const Tensor<T>&, const DiscreteSSM<T>&, const Tensor<T>&);         \
  template Tensor<T> ssm_output<T>(const DiscreteSSM<T>&, const Tensor<T>&);                                    \
  template Tensor<T> ssm_conv_kernel<T>(const DiscreteSSM<T>&, std::size_t);                                    \
  template Tensor<T> ssm_conv_apply<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Discretized<T> selective_discretize<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template ScanResult<T> selective_scan<T>(const Tensor<T>&, const SelectiveParams<T>&, const Tensor<T>&);      \
  template RetentionStep<T> retention_recurrent_step<T>(const Tensor<T>&, const RetentionHead&, const Tensor<T>&, \
                                                        const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> retention_parallel<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                                           const RetentionHead&);                                               \
  template Var<T> retention_parallel_op<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::span<const double>); \
  template Var<T> selective_scan_states<T>(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&);         \
  template Var<T> state_readout<T>(const Var<T>&, const Var<T>&);                                               \
  template Var<T> causal_conv1d<T>(const Var<T>&, const Var<T>&, const Var<T>&);

DENSESSM_INSTANTIATE_KERNELS(float)
DENSESSM_INSTANTIATE_KERNELS(double)

}  // namespace densessm
