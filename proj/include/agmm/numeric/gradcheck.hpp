#pragma once

// Central finite-difference verification of recorded gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>

#include "agmm/numeric/tensor.hpp"

namespace agmm {

/// Loss value plus a fingerprint of the discrete decisions taken while
/// computing it that the tape cannot see (argmax assignments, thresholded
/// seeds). ReLU and clamp sides are traced automatically. Coordinates whose
/// perturbation changes either fingerprint sit on a non-smooth boundary and
/// are excluded from the comparison.
template <class Real>
struct FdProbe {
  Tensor<Real> loss;
  std::uint64_t signature = 0;
};

struct FdReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

class NondeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class Real, class Fn>
FdProbe<Real> probe(Fn& fn, ParamSet<Real>& params) {
  BranchTrace trace;
  FdProbe<Real> p;
  if constexpr (std::is_same_v<std::invoke_result_t<Fn&, ParamSet<Real>&>, FdProbe<Real>>) {
    p = fn(params);
  } else {
    p = FdProbe<Real>{fn(params), 0};
  }
  p.signature = (p.signature ^ trace.value()) * 0x9E3779B97F4A7C15ull + trace.value();
  return p;
}

}  // namespace detail

template <class Real, class Fn>
FdReport finite_diff_report(Fn&& loss_fn, ParamSet<Real>& params, Real epsilon) {
  if (!(epsilon > Real(0))) throw std::invalid_argument("finite_diff_check: epsilon must be positive");

  params.zero_grad();
  auto base = detail::probe<Real>(loss_fn, params);
  backward(base.loss, params);
  const Real base_value = base.loss.item();
  {
    NoGradGuard ng;
    auto again = detail::probe<Real>(loss_fn, params);
    if (again.loss.item() != base_value || again.signature != base.signature)
      throw NondeterministicLoss("finite_diff_check: loss function is not deterministic");
  }

  FdReport rep;
  NoGradGuard ng;
  for (auto& [name, t] : params) {
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real orig = values[i];
      values[i] = orig + epsilon;
      auto up = detail::probe<Real>(loss_fn, params);
      values[i] = orig - epsilon;
      auto down = detail::probe<Real>(loss_fn, params);
      values[i] = orig;
      if (up.signature != base.signature || down.signature != base.signature) {
        ++rep.skipped;
        continue;
      }
      const double numeric = double((up.loss.item() - down.loss.item()) / (Real(2) * epsilon));
      const double a = double(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++rep.checked;
      if (rel > rep.max_relative_error || std::isnan(rel)) {
        rep.max_relative_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        rep.worst_param = name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

/// Maximum relative error between recorded and central-difference gradients.
template <class Real, class Fn>
double finite_diff_check(Fn&& loss_fn, ParamSet<Real>& params, Real epsilon) {
  return finite_diff_report(std::forward<Fn>(loss_fn), params, epsilon).max_relative_error;
}

}  // namespace agmm
