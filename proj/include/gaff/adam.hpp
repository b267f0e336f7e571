#pragma once

#include <span>
#include <vector>

#include "common.hpp"

namespace gaff {

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update, in place.
template <typename S>
void adam_step(AdamState& st, std::span<S> params, std::span<const S> grads, double lr) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  require(st.m.size() == params.size(), "adam_step: optimizer state was created for a different shape");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] = static_cast<S>(static_cast<double>(params[i]) - lr * mhat / (std::sqrt(vhat) + st.eps));
  }
}

// Convenience overload for Eigen storage.
template <typename Derived, typename DerivedG>
void adam_step(AdamState& st, Eigen::PlainObjectBase<Derived>& params, const Eigen::PlainObjectBase<DerivedG>& grads,
               double lr) {
  using S = typename Derived::Scalar;
  require(params.size() == grads.size(), "adam_step: parameter/gradient size mismatch");
  adam_step<S>(st, std::span<S>(params.data(), static_cast<std::size_t>(params.size())),
               std::span<const S>(grads.data(), static_cast<std::size_t>(grads.size())), lr);
}

}  // namespace gaff
