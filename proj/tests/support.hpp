#pragma once

// Shared helpers for the test suites: random tensor builders, gradient-check
// harness, and error measures.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "hatnet/rng.hpp"
#include "hatnet/tensor.hpp"

namespace testsup {

template <typename T>
hatnet::TensorT<T> random_tensor(hatnet::Dims dims, hatnet::Rng& rng, double lo = -1.0,
                                 double hi = 1.0, bool requires_grad = false) {
  return hatnet::TensorT<T>::uniform(std::move(dims), lo, hi, rng, requires_grad);
}

// Scale-aware relative error: each element is judged against the largest
// magnitude in either vector, so the result reads as "worst error relative
// to the gradient's own scale". Central differences cannot resolve entries
// far below that scale, in any storage precision.
template <typename T>
double max_rel_error(std::span<const T> a, std::span<const T> b, double floor_frac = 1.0) {
  double max_abs = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    max_abs = std::max({max_abs, std::abs(static_cast<double>(a[i])),
                        std::abs(static_cast<double>(b[i]))});
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    const double denom = std::max({std::abs(x), std::abs(y), floor_frac * max_abs, 1e-30});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

// Checks reverse-mode gradients of a scalar functional against central finite
// differences. Returns the worst scale-aware relative error over x's entries.
template <typename T, typename F>
double gradient_check(F&& f, hatnet::TensorT<T>& x, double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  hatnet::TensorT<T> loss = f(x);
  hatnet::backward(loss);
  std::vector<T> analytic(x.grad().begin(), x.grad().end());
  auto no_grad_f = [&](hatnet::TensorT<T>& t) {
    t.set_requires_grad(false);
    auto y = f(t);
    t.set_requires_grad(true);
    return y;
  };
  hatnet::TensorT<T> numeric = hatnet::finite_diff_grad(no_grad_f, x, eps);
  return max_rel_error<T>(analytic, numeric.values());
}

// Weighted double-precision reduction of an op output, used as the scalar
// proxy for per-op gradient checks (dense gradient, O(1) magnitudes).
template <typename T>
hatnet::TensorT<T> weighted_sum(const hatnet::TensorT<T>& y, const hatnet::TensorT<T>& w) {
  return hatnet::sum_all(hatnet::mul(y, w));
}

// Full Jacobian comparison for an op under test: reverse mode seeded with
// each output one-hot vs finite-difference columns. Avoids the cancellation
// a random weighted proxy can hit, so the error bound is deterministic.
template <typename T, typename F>
double jacobian_check(F&& op, hatnet::TensorT<T>& x, double eps) {
  using hatnet::TensorT;
  x.set_requires_grad(true);
  const std::size_t nin = x.numel();
  const std::size_t nout = op(x).numel();
  std::vector<T> j_an(nout * nin), j_fd(nout * nin);
  for (std::size_t k = 0; k < nout; ++k) {
    x.zero_grad();
    auto y = op(x);
    auto onehot = TensorT<T>::zeros(y.dims());
    onehot.values_mut()[k] = T(1);
    hatnet::backward(hatnet::sum_all(hatnet::mul(y, onehot)));
    for (std::size_t i = 0; i < nin; ++i) j_an[k * nin + i] = x.grad()[i];
  }
  x.set_requires_grad(false);
  auto xv = x.values_mut();
  for (std::size_t i = 0; i < nin; ++i) {
    const T orig = xv[i];
    const T hi = static_cast<T>(static_cast<double>(orig) + eps);
    const T lo = static_cast<T>(static_cast<double>(orig) - eps);
    const double h = static_cast<double>(hi) - static_cast<double>(lo);
    xv[i] = hi;
    auto yp = op(x);
    xv[i] = lo;
    auto ym = op(x);
    xv[i] = orig;
    for (std::size_t k = 0; k < nout; ++k)
      j_fd[k * nin + i] = static_cast<T>(
          (static_cast<double>(yp.values()[k]) - static_cast<double>(ym.values()[k])) / h);
  }
  x.set_requires_grad(true);
  return max_rel_error<T>(j_an, j_fd);
}

}  // namespace testsup
