#pragma once

// Central finite-difference gradient oracle. Lives in test code only and
// never touches the tape internals of the op it checks: the numeric side
// re-evaluates the loss with recording suspended.

#include <vector>

#include "qlr/tensor.hpp"

namespace qlrtest {

struct GradCheckResult {
  double max_rel = 0.0;
  size_t checked = 0;
};

// Relative error with a floored denominator (allclose convention): for
// entries where both the analytic and numeric values are below `floor`, the
// quoted tolerance acts as an absolute tolerance of tol*floor. The floor has
// to cover the FD evaluation noise eps_S*|loss|/h, so float32 probes use
// floor 1.0 while the float64 oracle mode can afford 1e-2.
inline double rel_err(double a, double n, double floor_) {
  const double denom = std::max({std::fabs(a), std::fabs(n), floor_});
  return std::fabs(a - n) / denom;
}

constexpr double kFloorF32 = 1.0;
constexpr double kFloorF64 = 1e-2;

// make_loss must rebuild the graph from the current parameter values and be
// deterministic between calls. max_per_tensor == 0 checks every element.
template <typename S, typename F>
GradCheckResult gradcheck(std::vector<qlr::TensorT<S>> params, F&& make_loss, double h,
                          qlr::Rng& rng, size_t max_per_tensor = 0,
                          double floor_ = sizeof(S) == 4 ? kFloorF32 : kFloorF64) {
  using namespace qlr;
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.clear_grad();
  }

  std::vector<std::vector<S>> analytic;
  {
    TapeT<S> tape;
    TapeScopeT<S> scope(tape);
    TensorT<S> loss = make_loss();
    tape.backward(loss);
    for (auto& p : params) {
      p.ensure_grad();
      analytic.emplace_back(p.grad(), p.grad() + p.numel());
    }
  }

  GradCheckResult res;
  NoGradT<S> off;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<size_t> idx(p.numel());
    std::iota(idx.begin(), idx.end(), size_t{0});
    if (max_per_tensor > 0 && idx.size() > max_per_tensor) {
      rng.shuffle(idx);
      idx.resize(max_per_tensor);
    }
    for (size_t i : idx) {
      const S orig = p.data()[i];
      p.data()[i] = orig + static_cast<S>(h);
      const double up = static_cast<double>(make_loss().item());
      p.data()[i] = orig - static_cast<S>(h);
      const double down = static_cast<double>(make_loss().item());
      p.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel = std::max(res.max_rel, rel_err(static_cast<double>(analytic[pi][i]), numeric, floor_));
      ++res.checked;
    }
  }
  return res;
}

template <typename S>
qlr::TensorT<S> random_tensor(std::vector<int> shape, qlr::Rng& rng, double stddev = 1.0) {
  return qlr::TensorT<S>::randn(std::move(shape), rng, stddev);
}

// Scalarizer for gradient probes: a fixed random weighted sum, accumulated in
// double so the reduction itself adds no float noise to the FD quotient. Its
// backward is linear and exact, so the op under test is the only thing the
// finite differences see.
template <typename S>
qlr::TensorT<S> probe_sum(const qlr::TensorT<S>& y, uint64_t seed) {
  using namespace qlr;
  const size_t n = y.numel();
  Rng rng(seed);
  std::vector<S> w(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& v : w) v = static_cast<S>(rng.normal(0.0, scale));
  double acc = 0;
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(y.data()[i]);
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));
  auto* tape = active_tape<S>();
  if (tape != nullptr && y.requires_grad()) {
    out.set_requires_grad(true);
    tape->record([yd = y, od = out, w, n]() mutable {
      yd.ensure_grad();
      for (size_t i = 0; i < n; ++i) yd.grad()[i] += w[i] * od.grad()[0];
    });
  }
  return out;
}

}  // namespace qlrtest
