#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "densessm/autograd.hpp"

namespace densessm {

template <class T>
inline T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
inline T silu_scalar(T x) {
  return x * sigmoid_scalar(x);
}

// Above the threshold log(1 + e^x) equals x to working precision.
template <class T>
inline T softplus_scalar(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

enum class Elementwise { add, sub, mul, exp, sigmoid, silu, softplus };

template <class T>
Var<T> elementwise(Elementwise op, const Var<T>& a);
template <class T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>& b);

// Binary ops broadcast when one shape is a trailing suffix of the other
// (e.g. a [d] bias over [n, d]). Anything else is a DimensionError.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> exp(const Var<T>& a);
template <class T>
Var<T> sigmoid(const Var<T>& a);
template <class T>
Var<T> silu(const Var<T>& a);
template <class T>
Var<T> softplus(const Var<T>& a);
template <class T>
Var<T> relu(const Var<T>& a);
template <class T>
Var<T> scale(const Var<T>& a, T s);

/// a [..., k] x b [k, n] -> [..., n].
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// a [..., k] x b[n, k]^T -> [..., n].
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> sum(const Var<T>& a);
template <class T>
Var<T> mean(const Var<T>& a);

/// Scale-only RMS normalization over the last dimension.
template <class T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& weight, T eps);

/// Rows of `table` [V, d] gathered by token id -> [B, T, d].
template <class T>
Var<T> embedding(const Var<T>& table, const Tokens& tokens);

/// Mean next-token cross-entropy (nats) of logits [..., V] against targets,
/// one target per leading position.
template <class T>
Var<T> cross_entropy_logits(const Var<T>& logits, std::span<const std::int32_t> targets);

template <class T>
Var<T> slice_last(const Var<T>& x, std::size_t start, std::size_t len);
template <class T>
Var<T> concat_last(const std::vector<Var<T>>& parts);
template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// Rows [start, start + len) of a rank-2 value.
template <class T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len);

/// Plain forward matrix product used by kernels and oracles (no tape).
template <class T>
Tensor<T> matmul_tensor(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace densessm
