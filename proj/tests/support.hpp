#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <vector>

#include "modellab/ops.hpp"
#include "modellab/tensor.hpp"

namespace mlab::testing {

inline Tensor randn(Shape shape, std::mt19937_64& rng, float stddev = 1.0f, bool requires_grad = true) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline float max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) return INFINITY;
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline constexpr double kGradRtol = 1e-2;
inline constexpr double kGradAtol = 1e-3;

/// Worst elementwise |a - n| / (atol + rtol * max(|a|, |n|)); passes at <= 1.
struct GradCheck {
  double worst = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0, numeric = 0.0;
  bool ok() const { return worst <= 1.0; }
};

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central differences of sum(f(x) * R) for a fixed random R, so every output
/// element contributes. Perturbs leaf storage in place and restores it.
inline GradCheck grad_check(const Fn& f, const std::vector<Tensor>& inputs, std::uint64_t seed = 7,
                            float h = 1e-3f) {
  std::mt19937_64 rng(seed);
  const Tensor probe_out = [&] {
    NoGradGuard g;
    return f(inputs);
  }();
  const Tensor r = randn(probe_out.shape(), rng, 1.0f, false);
  const auto objective = [&] { return sum(mul(f(inputs), r)); };

  for (Tensor x : inputs) x.clear_grad();
  backward(objective());

  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor x = inputs[i];
    if (!x.requires_grad()) continue;
    const std::vector<float> analytic(x.grad().begin(), x.grad().end());
    std::vector<double> numeric(analytic.size());
    auto w = x.mutable_values();
    NoGradGuard g;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const float orig = w[k];
      w[k] = orig + h;
      const double up = objective().item();
      w[k] = orig - h;
      const double down = objective().item();
      w[k] = orig;
      numeric[k] = (up - down) / (2.0 * h);
    }
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double a = analytic[k], n = numeric[k];
      const double ratio = std::abs(a - n) / (kGradAtol + kGradRtol * std::max(std::abs(a), std::abs(n)));
      if (ratio > out.worst) out = {ratio, i, k, a, n};
    }
  }
  return out;
}

inline std::ostream& operator<<(std::ostream& os, const GradCheck& g) {
  return os << "worst ratio " << g.worst << " at input " << g.worst_input << "[" << g.worst_index
            << "]: analytic " << g.analytic << " numeric " << g.numeric;
}

}  // namespace mlab::testing
