#pragma once

#include <span>
#include <vector>

#include "densessm/autograd.hpp"

namespace densessm {

/// Time-invariant discretized SSM with a diagonal transition per channel.
/// Every tensor is [channels, d_state]: channel d owns an independent
/// single-input single-output system with d_state diagonal modes.
template <class T>
class DiscreteSSM {
 public:
  DiscreteSSM(Tensor<T> a_bar, Tensor<T> b_bar, Tensor<T> c);

  std::size_t channels() const { return a_bar_.dim(0); }
  std::size_t d_state() const { return a_bar_.dim(1); }
  const Tensor<T>& a_bar() const { return a_bar_; }
  const Tensor<T>& b_bar() const { return b_bar_; }
  const Tensor<T>& c() const { return c_; }

 private:
  Tensor<T> a_bar_, b_bar_, c_;
};

/// h_t = a_bar * h_prev + b_bar * x_t, h [D, S], x_t [D].
template <class T>
Tensor<T> ssm_recurrent_step(const Tensor<T>& h_prev, const DiscreteSSM<T>& ssm, const Tensor<T>& x_t);

/// y_t[d] = sum_n c[d, n] h_t[d, n].
template <class T>
Tensor<T> ssm_output(const DiscreteSSM<T>& ssm, const Tensor<T>& h_t);

/// Impulse-response kernel [length, D]: K[t, d] = sum_n c a_bar^t b_bar.
template <class T>
Tensor<T> ssm_conv_kernel(const DiscreteSSM<T>& ssm, std::size_t length);

/// Causal convolution y_t = sum_{i <= t} K_{t-i} x_i over x [T, D].
template <class T>
Tensor<T> ssm_conv_apply(const Tensor<T>& x, const Tensor<T>& kernel);

template <class T>
struct SelectiveParams {
  Tensor<T> delta;  // [T, D], positive
  Tensor<T> a;      // [D, S], negative
  Tensor<T> b;      // [T, S]
  Tensor<T> c;      // [T, S]
};

template <class T>
struct Discretized {
  Tensor<T> a_bar;  // [T, D, S]
  Tensor<T> b_bar;  // [T, D, S]
};

/// Zero-order hold for the transition, Euler for the input matrix:
/// a_bar = exp(delta * a), b_bar = delta * b. Accepts delta [T, D] with
/// b [T, S], or a single step delta [D] with b [S] (leading T dropped).
template <class T>
Discretized<T> selective_discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
struct ScanResult {
  Tensor<T> y;      // [T, D]
  Tensor<T> h_seq;  // [T, D, S]
};

template <class T>
ScanResult<T> selective_scan(const Tensor<T>& x, const SelectiveParams<T>& params, const Tensor<T>& d_skip);

struct RetentionHead {
  double gamma;
  std::size_t d_k;
  std::size_t d_v;

  RetentionHead(double gamma, std::size_t d_k, std::size_t d_v);
};

template <class T>
struct RetentionStep {
  Tensor<T> s;  // [d_k, d_v]
  Tensor<T> y;  // [d_v]
};

/// S_t = gamma S_{t-1} + k^T v, y_t = q S_t.
template <class T>
RetentionStep<T> retention_recurrent_step(const Tensor<T>& s_prev, const RetentionHead& head, const Tensor<T>& q,
                                          const Tensor<T>& k, const Tensor<T>& v);

/// Y = ((Q K^T) * D) V with D[t, i] = gamma^(t-i) for i <= t, else 0.
template <class T>
Tensor<T> retention_parallel(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const RetentionHead& head);

/// gamma_i = 1 - 2^(-5-i).
std::vector<double> decay_schedule(std::size_t n_heads);

// ---- differentiable batched kernels used by the blocks in parallel mode ----

/// Multi-head retention over q, k [B, T, H*dk] and v [B, T, H*dv].
template <class T>
Var<T> retention_parallel_op(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const double> gammas);

/// Selective-scan hidden states: x, delta [B, T, D], a [D, S], b [B, T, S]
/// -> h [B, T, D, S] with h_t = exp(delta a) h_{t-1} + delta b x.
template <class T>
Var<T> selective_scan_states(const Var<T>& x, const Var<T>& delta, const Var<T>& a, const Var<T>& b);

/// y[b, t, d] = sum_n h[b, t, d, n] c[b, t, n]; h [B, T, D, S], c [B, T, S].
template <class T>
Var<T> state_readout(const Var<T>& h, const Var<T>& c);

/// Depthwise causal convolution, x [B, T, D], w [W, D], bias [D]:
/// y_t = bias + sum_j w[j] x_{t-W+1+j}, inputs before t = 0 are zero.
template <class T>
Var<T> causal_conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

namespace testing {
// Negative-control hook: when set, the parallel decay mask uses gamma^(t-i+1).
void set_decay_mask_fault(bool enabled);
bool decay_mask_fault();
}  // namespace testing

}  // namespace densessm
