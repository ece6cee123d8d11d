#pragma once

#include <random>
#include <string>
#include <vector>

#include "densessm/dense.hpp"
#include "densessm/ssm_kernels.hpp"

namespace densessm {

inline constexpr double kNormEps = 1e-6;
inline constexpr std::size_t kMambaConvWidth = 4;

template <class T>
using StashSources = std::vector<const typename DenseStash<T>::Entry*>;

template <class T>
struct BlockOutput {
  Var<T> y;
  std::vector<Var<T>> published;  // pre-fusion signals for upper layers
};

struct GauDims {
  std::size_t d_model;
  std::size_t qk_dim;
  std::size_t v_dim;  // value width; the gate branch U has the same width
  std::size_t n_heads;
};

template <class T>
struct GauState {
  std::vector<Tensor<T>> s;  // one [dk, dv] retention state per head
  bool ready = false;
};

/// Retention in a gated attention unit, Y = (X W_u * A V) W_o + X, with
/// multi-scale per-head decay and optional dense key/value connections.
template <class T>
class GauRetentionBlock {
 public:
  GauRetentionBlock(ParameterRegistry<T>& registry, const std::string& prefix, const GauDims& dims,
                    const DenseConfig& dense, std::size_t n_sources, T init_std, std::mt19937_64& rng);

  /// x [B, T, d]; publishes {k, v} before fusion.
  BlockOutput<T> forward_parallel(const Var<T>& x, const StashSources<T>& sources) const;
  /// x_t [1, 1, d]; `sources` hold lower-layer {k_t, v_t} for this step.
  BlockOutput<T> forward_recurrent(const Var<T>& x_t, GauState<T>& state, const StashSources<T>& sources) const;

  GauState<T> initial_state() const;
  const GauDims& dims() const { return dims_; }
  const std::vector<double>& gammas() const { return gammas_; }

  Var<T> norm, wq, wk, wu, wo;
  SelectiveTransition<T> k_transition, v_transition;

 private:
  struct Projected {
    Var<T> xn, q, k, u, v;
  };
  Projected project(const Var<T>& x) const;

  GauDims dims_;
  std::vector<double> gammas_;
};

template <class T>
BlockOutput<T> gau_forward_parallel(const Var<T>& x, const GauRetentionBlock<T>& block, const StashSources<T>& sources) {
  return block.forward_parallel(x, sources);
}

template <class T>
BlockOutput<T> gau_forward_recurrent(const Var<T>& x_t, const GauRetentionBlock<T>& block, GauState<T>& state,
                                     const StashSources<T>& sources) {
  return block.forward_recurrent(x_t, state, sources);
}

struct MambaDims {
  std::size_t d_model;
  std::size_t d_inner;
  std::size_t d_state;
  std::size_t dt_rank;
};

template <class T>
struct MambaState {
  Tensor<T> h;     // [d_inner, d_state]
  Tensor<T> conv;  // last (width - 1) conv inputs, [width - 1, d_inner]
  bool ready = false;
};

/// Mamba block: norm, in-projection, causal conv, SiLU, selective scan with
/// dense state fusion ahead of the C read-out, SiLU gate branch, out-proj.
template <class T>
class MambaBlock {
 public:
  MambaBlock(ParameterRegistry<T>& registry, const std::string& prefix, const MambaDims& dims,
             const DenseConfig& dense, std::size_t n_sources, T init_std, std::mt19937_64& rng);

  /// x [B, T, d]; publishes {h} with h [B, T, d_inner, d_state].
  BlockOutput<T> forward_parallel(const Var<T>& x, const StashSources<T>& sources) const;
  /// x_t [1, 1, d]; publishes {h_t} with h_t [1, 1, d_inner, d_state].
  BlockOutput<T> forward_recurrent(const Var<T>& x_t, MambaState<T>& state, const StashSources<T>& sources) const;

  MambaState<T> initial_state() const;
  const MambaDims& dims() const { return dims_; }

  Var<T> norm, in_proj, conv_w, conv_b, x_proj, dt_proj, dt_bias, a_log, d_skip, out_proj;
  SelectiveTransition<T> h_transition;

 private:
  MambaDims dims_;
};

template <class T>
BlockOutput<T> mamba_forward(const Var<T>& x, const MambaBlock<T>& block, const StashSources<T>& sources) {
  return block.forward_parallel(x, sources);
}

template <class T>
BlockOutput<T> mamba_forward(const Var<T>& x_t, const MambaBlock<T>& block, MambaState<T>& state,
                             const StashSources<T>& sources) {
  return block.forward_recurrent(x_t, state, sources);
}

enum class Activation { relu, silu };

/// y = act(x W_up) W_down + x.
template <class T>
class FfnBlock {
 public:
  FfnBlock(ParameterRegistry<T>& registry, const std::string& prefix, std::size_t d_model, std::size_t hidden,
           Activation act, T init_std, std::mt19937_64& rng);

  Var<T> forward(const Var<T>& x) const;

  Var<T> w_up, w_down;
  Activation activation;
};

template <class T>
Var<T> ffn_forward(const Var<T>& x, const FfnBlock<T>& block) {
  return block.forward(x);
}

}  // namespace densessm
