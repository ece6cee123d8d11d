#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <type_traits>

#include "densessm/autograd.hpp"

namespace densessm {

struct GradCheckResult {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares the tape gradient of `loss_fn` w.r.t. `param` with central
/// differences (f(p+h) - f(p-h)) / 2h, one coordinate at a time.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor); the
/// floor keeps coordinates whose true gradient is ~0 from dividing roundoff
/// by roundoff. `loss_fn` must rebuild the graph on every call.
template <class T>
GradCheckResult finite_diff_check(const std::function<Var<T>()>& loss_fn, Var<T> param, T h,
                                  double abs_floor = 1e-4) {
  if constexpr (!std::is_same_v<T, double>) {
    throw PrecisionError("finite-difference checks require float64 parameters");
  } else {
    param.zero_grad();
    Var<T> loss = loss_fn();
    backward(loss);
    const Tensor<T> analytic = param.grad();

    GradCheckResult res;
    Tensor<T>& value = param.mutable_value();
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const T orig = value[i];
      value[i] = orig + h;
      const double fp = loss_fn().value().item();
      value[i] = orig - h;
      const double fm = loss_fn().value().item();
      value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), abs_floor});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_index = i;
      }
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      ++res.checked;
    }
    return res;
  }
}

}  // namespace densessm
