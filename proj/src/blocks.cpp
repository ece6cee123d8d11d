#include "densessm/blocks.hpp"

#include <cmath>

#include "densessm/init.hpp"
#include "densessm/ops.hpp"

namespace densessm {

template <class T>
GauRetentionBlock<T>::GauRetentionBlock(ParameterRegistry<T>& registry, const std::string& prefix, const GauDims& dims,
                                        const DenseConfig& dense, std::size_t n_sources, T init_std,
                                        std::mt19937_64& rng)
    : dims_(dims), gammas_(decay_schedule(dims.n_heads)) {
  if (dims.qk_dim % dims.n_heads != 0 || dims.v_dim % dims.n_heads != 0) {
    throw ConfigError("q/k width and value width must be divisible by the head count");
  }
  const std::size_t d = dims.d_model;
  norm = registry.add(prefix + ".norm", Tensor<T>::full({d}, T(1)), false);
  wq = registry.add(prefix + ".wq", random_normal<T>({d, dims.qk_dim}, init_std, rng), true);
  wk = registry.add(prefix + ".wk", random_normal<T>({d, dims.qk_dim}, init_std, rng), true);
  wu = registry.add(prefix + ".wu", random_normal<T>({d, 2 * dims.v_dim}, init_std, rng), true);
  wo = registry.add(prefix + ".wo", random_normal<T>({dims.v_dim, d}, init_std, rng), true);
  if (n_sources > 0) {
    k_transition = SelectiveTransition<T>(registry, prefix + ".dense_k", dense, n_sources, d, dims.qk_dim, init_std, rng);
    v_transition = SelectiveTransition<T>(registry, prefix + ".dense_v", dense, n_sources, d, dims.v_dim, init_std, rng);
  }
}

template <class T>
typename GauRetentionBlock<T>::Projected GauRetentionBlock<T>::project(const Var<T>& x) const {
  if (x.rank() != 3 || x.dim(2) != dims_.d_model) {
    throw DimensionError("retention block expects [B, T, " + std::to_string(dims_.d_model) + "], got " +
                         shape_str(x.shape()));
  }
  Projected p;
  p.xn = rms_norm(x, norm, T(kNormEps));
  p.q = matmul(p.xn, wq);
  p.k = matmul(p.xn, wk);
  Var<T> uv = matmul(p.xn, wu);
  p.u = slice_last(uv, 0, dims_.v_dim);
  p.v = slice_last(uv, dims_.v_dim, dims_.v_dim);
  return p;
}

template <class T>
BlockOutput<T> GauRetentionBlock<T>::forward_parallel(const Var<T>& x, const StashSources<T>& sources) const {
  const Projected p = project(x);
  auto [k, v] = dense_kv<T>(p.k, p.v, sources, p.xn, k_transition, v_transition);
  Var<T> a = retention_parallel_op(p.q, k, v, std::span<const double>(gammas_));
  Var<T> y = add(x, matmul(mul(p.u, a), wo));
  return {y, {p.k, p.v}};
}

template <class T>
BlockOutput<T> GauRetentionBlock<T>::forward_recurrent(const Var<T>& x_t, GauState<T>& state,
                                                       const StashSources<T>& sources) const {
  if (!state.ready) throw UsageError("retention block stepped with an uninitialized recurrent state");
  if (x_t.rank() != 3 || x_t.dim(0) != 1 || x_t.dim(1) != 1) {
    throw DimensionError("recurrent step expects a single token [1, 1, d], got " + shape_str(x_t.shape()));
  }
  const Projected p = project(x_t);
  auto [k, v] = dense_kv<T>(p.k, p.v, sources, p.xn, k_transition, v_transition);

  const std::size_t heads = dims_.n_heads, dk = dims_.qk_dim / heads, dv = dims_.v_dim / heads;
  Tensor<T> a(Shape{1, 1, dims_.v_dim});
  for (std::size_t h = 0; h < heads; ++h) {
    auto head_slice = [](const Tensor<T>& src, std::size_t off, std::size_t len) {
      return Tensor<T>(Shape{len}, std::vector<T>(src.ptr() + off, src.ptr() + off + len));
    };
    RetentionStep<T> step = retention_recurrent_step(state.s[h], RetentionHead(gammas_[h], dk, dv),
                                                     head_slice(p.q.value(), h * dk, dk),
                                                     head_slice(k.value(), h * dk, dk), head_slice(v.value(), h * dv, dv));
    state.s[h] = std::move(step.s);
    std::copy_n(step.y.ptr(), dv, a.mutable_ptr() + h * dv);
  }
  Var<T> y = add(x_t, matmul(mul(p.u, Var<T>(std::move(a))), wo));
  return {y, {p.k, p.v}};
}

template <class T>
GauState<T> GauRetentionBlock<T>::initial_state() const {
  GauState<T> st;
  const std::size_t dk = dims_.qk_dim / dims_.n_heads, dv = dims_.v_dim / dims_.n_heads;
  st.s.assign(dims_.n_heads, Tensor<T>(Shape{dk, dv}));
  st.ready = true;
  return st;
}

template <class T>
MambaBlock<T>::MambaBlock(ParameterRegistry<T>& registry, const std::string& prefix, const MambaDims& dims,
                          const DenseConfig& dense, std::size_t n_sources, T init_std, std::mt19937_64& rng)
    : dims_(dims) {
  const std::size_t d = dims.d_model, di = dims.d_inner, ss = dims.d_state, r = dims.dt_rank;
  norm = registry.add(prefix + ".norm", Tensor<T>::full({d}, T(1)), false);
  in_proj = registry.add(prefix + ".in_proj", random_normal<T>({d, 2 * di}, init_std, rng), true);
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(kMambaConvWidth));
  conv_w = registry.add(prefix + ".conv_w", random_uniform<T>({kMambaConvWidth, di}, -conv_bound, conv_bound, rng), true);
  conv_b = registry.add(prefix + ".conv_b", Tensor<T>(Shape{di}), false);
  x_proj = registry.add(prefix + ".x_proj", random_normal<T>({di, r + 2 * ss}, init_std, rng), true);
  dt_proj = registry.add(prefix + ".dt_proj", random_normal<T>({r, di}, init_std, rng), true);

  // softplus(dt_bias) log-uniform in [1e-3, 1e-1]
  Tensor<T> bias(Shape{di});
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (std::size_t i = 0; i < di; ++i) {
    const double dt = std::exp(u(rng));
    bias[i] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  dt_bias = registry.add(prefix + ".dt_bias", std::move(bias), false);

  // A = -exp(a_log) = -(n + 1)
  Tensor<T> alog(Shape{di, ss});
  for (std::size_t i = 0; i < di; ++i) {
    for (std::size_t n = 0; n < ss; ++n) alog[i * ss + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
  }
  a_log = registry.add(prefix + ".a_log", std::move(alog), false);
  d_skip = registry.add(prefix + ".d_skip", Tensor<T>::full({di}, T(1)), false);
  out_proj = registry.add(prefix + ".out_proj", random_normal<T>({di, d}, init_std, rng), true);
  if (n_sources > 0) {
    h_transition = SelectiveTransition<T>(registry, prefix + ".dense_h", dense, n_sources, d, di, init_std, rng);
  }
}

template <class T>
BlockOutput<T> MambaBlock<T>::forward_parallel(const Var<T>& x, const StashSources<T>& sources) const {
  const std::size_t di = dims_.d_inner, ss = dims_.d_state, r = dims_.dt_rank;
  if (x.rank() != 3 || x.dim(2) != dims_.d_model) {
    throw DimensionError("Mamba block expects [B, T, " + std::to_string(dims_.d_model) + "], got " +
                         shape_str(x.shape()));
  }
  Var<T> xn = rms_norm(x, norm, T(kNormEps));
  Var<T> xz = matmul(xn, in_proj);
  Var<T> xi = slice_last(xz, 0, di);
  Var<T> z = slice_last(xz, di, di);
  Var<T> u = silu(causal_conv1d(xi, conv_w, conv_b));
  Var<T> dbc = matmul(u, x_proj);
  Var<T> delta = softplus(add(matmul(slice_last(dbc, 0, r), dt_proj), dt_bias));
  Var<T> b = slice_last(dbc, r, ss);
  Var<T> c = slice_last(dbc, r + ss, ss);
  Var<T> a = scale(exp(a_log), T(-1));
  Var<T> h = selective_scan_states(u, delta, a, b);

  // The read-out is linear in the state and commutes with the per-channel
  // gate and channel projection, so C Fuse(h, H) = Fuse(C h, [C H_i]).
  Var<T> y = state_readout(h, c);
  if (!sources.empty()) {
    std::vector<Var<T>> transformed;
    for (std::size_t i = 0; i < sources.size() && i < h_transition.n_sources(); ++i) {
      Var<T> src = state_readout(sources[i]->signals.at(0), c);
      transformed.push_back(h_transition.transition(src, xn, i));
    }
    y = h_transition.fuse(y, transformed);
  }
  y = add(y, mul(u, d_skip));
  Var<T> out = add(x, matmul(mul(y, silu(z)), out_proj));
  return {out, {h}};
}

template <class T>
BlockOutput<T> MambaBlock<T>::forward_recurrent(const Var<T>& x_t, MambaState<T>& state,
                                                const StashSources<T>& sources) const {
  if (!state.ready) throw UsageError("Mamba block stepped without a conv-state buffer");
  if (x_t.rank() != 3 || x_t.dim(0) != 1 || x_t.dim(1) != 1 || x_t.dim(2) != dims_.d_model) {
    throw DimensionError("recurrent step expects a single token [1, 1, d], got " + shape_str(x_t.shape()));
  }
  const std::size_t di = dims_.d_inner, ss = dims_.d_state, r = dims_.dt_rank, w = kMambaConvWidth;
  Var<T> xn = rms_norm(x_t, norm, T(kNormEps));
  Var<T> xz = matmul(xn, in_proj);
  Var<T> xi = slice_last(xz, 0, di);
  Var<T> z = slice_last(xz, di, di);

  // conv over [buffer rows (oldest first), x_t]
  const Tensor<T>& cw = conv_w.value();
  Tensor<T> conv_out(Shape{1, 1, di});
  for (std::size_t d = 0; d < di; ++d) {
    T acc = conv_b.value()[d];
    for (std::size_t j = 0; j + 1 < w; ++j) acc += cw[j * di + d] * state.conv[j * di + d];
    acc += cw[(w - 1) * di + d] * xi.value()[d];
    conv_out[d] = acc;
  }
  for (std::size_t j = 0; j + 2 < w; ++j) {
    std::copy_n(state.conv.ptr() + (j + 1) * di, di, state.conv.mutable_ptr() + j * di);
  }
  std::copy_n(xi.value().ptr(), di, state.conv.mutable_ptr() + (w - 2) * di);

  Var<T> u = silu(Var<T>(std::move(conv_out)));
  Var<T> dbc = matmul(u, x_proj);
  Var<T> delta = softplus(add(matmul(slice_last(dbc, 0, r), dt_proj), dt_bias));
  Tensor<T> b = slice_last(dbc, r, ss).value().reshape({ss});
  Var<T> c = slice_last(dbc, r + ss, ss);
  Tensor<T> a = scale(exp(a_log), T(-1)).value();

  const Discretized<T> disc = selective_discretize(delta.value().reshape({di}), a, b);
  for (std::size_t i = 0; i < di * ss; ++i) {
    state.h[i] = disc.a_bar[i] * state.h[i] + disc.b_bar[i] * u.value()[i / ss];
  }
  Var<T> h(state.h.reshape({1, 1, di, ss}));

  // Fuse in state space, then read out with C.
  Var<T> fused = h;
  if (!sources.empty()) {
    std::vector<Var<T>> transformed;
    for (std::size_t i = 0; i < sources.size() && i < h_transition.n_sources(); ++i) {
      transformed.push_back(h_transition.transition_state(sources[i]->signals.at(0), xn, i));
    }
    fused = h_transition.fuse_state(h, transformed);
  }
  Var<T> y = add(state_readout(fused, c), mul(u, d_skip));
  Var<T> out = add(x_t, matmul(mul(y, silu(z)), out_proj));
  return {out, {h}};
}

template <class T>
MambaState<T> MambaBlock<T>::initial_state() const {
  MambaState<T> st;
  st.h = Tensor<T>(Shape{dims_.d_inner, dims_.d_state});
  st.conv = Tensor<T>(Shape{kMambaConvWidth - 1, dims_.d_inner});
  st.ready = true;
  return st;
}

template <class T>
FfnBlock<T>::FfnBlock(ParameterRegistry<T>& registry, const std::string& prefix, std::size_t d_model,
                      std::size_t hidden, Activation act, T init_std, std::mt19937_64& rng)
    : activation(act) {
  w_up = registry.add(prefix + ".w_up", random_normal<T>({d_model, hidden}, init_std, rng), true);
  w_down = registry.add(prefix + ".w_down", random_normal<T>({hidden, d_model}, init_std, rng), true);
}

template <class T>
Var<T> FfnBlock<T>::forward(const Var<T>& x) const {
  Var<T> hidden = matmul(x, w_up);
  hidden = activation == Activation::relu ? relu(hidden) : silu(hidden);
  return add(x, matmul(hidden, w_down));
}

template class GauRetentionBlock<float>;
template class GauRetentionBlock<double>;
template class MambaBlock<float>;
template class MambaBlock<double>;
template class FfnBlock<float>;
template class FfnBlock<double>;

}  // namespace densessm
