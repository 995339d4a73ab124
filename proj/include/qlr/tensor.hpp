#pragma once

// Dense FP tensors with reverse-mode autodiff on an explicit tape.
// The scalar type is a template parameter: float is the compute dtype,
// double exists for the finite-difference gradient oracles in the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "qlr/common.hpp"

namespace qlr {

template <typename S>
struct TensorDataT {
  std::vector<int> shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty means absent
  bool requires_grad = false;
};

template <typename S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::vector<int> shape) : d_(std::make_shared<TensorDataT<S>>()) {
    d_->shape = std::move(shape);
    d_->data.assign(numel_of(d_->shape), S(0));
  }
  TensorT(std::vector<int> shape, std::vector<S> values)
      : d_(std::make_shared<TensorDataT<S>>()) {
    check(values.size() == numel_of(shape), "tensor: data length ", values.size(),
          " does not match shape product ", numel_of(shape));
    d_->shape = std::move(shape);
    d_->data = std::move(values);
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }
  static TensorT full(std::vector<int> shape, S v) {
    TensorT t(std::move(shape));
    std::fill(t.d_->data.begin(), t.d_->data.end(), v);
    return t;
  }
  static TensorT scalar(S v) { return TensorT({1}, {v}); }
  static TensorT randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    TensorT t(std::move(shape));
    for (auto& v : t.d_->data) v = static_cast<S>(rng.normal(0.0, stddev));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  size_t numel() const { return d_->data.size(); }
  int rows() const { return d_->shape.size() == 2 ? d_->shape[0] : 1; }
  int cols() const { return d_->shape.size() == 2 ? d_->shape[1] : static_cast<int>(numel()); }

  S* data() { return d_->data.data(); }
  const S* data() const { return d_->data.data(); }
  std::vector<S>& vec() { return d_->data; }
  const std::vector<S>& vec() const { return d_->data; }
  S& at(int i, int j) { return d_->data[static_cast<size_t>(i) * d_->shape[1] + j]; }
  S at(int i, int j) const { return d_->data[static_cast<size_t>(i) * d_->shape[1] + j]; }

  S item() const {
    check(numel() == 1, "item: tensor is not scalar, numel=", numel());
    return d_->data[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  S* grad() { return d_->grad.data(); }
  const S* grad() const { return d_->grad.data(); }
  std::vector<S>& grad_vec() { return d_->grad; }
  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), S(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }
  void clear_grad() { d_->grad.clear(); }

  std::shared_ptr<TensorDataT<S>> ptr() const { return d_; }

  TensorT clone() const {
    TensorT t(d_->shape, d_->data);
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  static size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

 private:
  std::shared_ptr<TensorDataT<S>> d_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// Tape

// Ordered record of executed ops; append order is topological by
// construction, so one reverse sweep visits every node after its users.
template <typename S>
struct TapeT {
  std::vector<std::function<void()>> nodes;
  bool used = false;

  void record(std::function<void()> backward_fn) { nodes.push_back(std::move(backward_fn)); }

  void backward(TensorT<S> loss) {
    check(loss.numel() == 1, "backward: loss must be scalar, numel=", loss.numel());
    check(!used, "backward: tape already consumed; reset() before reuse");
    check(loss.requires_grad(), "backward: loss is not connected to this tape");
    used = true;
    loss.ensure_grad();
    loss.grad()[0] = S(1);
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) (*it)();
  }

  void reset() {
    nodes.clear();
    used = false;
  }
};

using Tape = TapeT<float>;

template <typename S>
inline TapeT<S>*& active_tape() {
  thread_local TapeT<S>* t = nullptr;
  return t;
}

template <typename S>
struct TapeScopeT {
  TapeT<S>* prev;
  explicit TapeScopeT(TapeT<S>& tape) : prev(active_tape<S>()) { active_tape<S>() = &tape; }
  ~TapeScopeT() { active_tape<S>() = prev; }
};

using TapeScope = TapeScopeT<float>;

// Suspends recording (teacher forwards, finite-difference probes).
template <typename S>
struct NoGradT {
  TapeT<S>* prev;
  NoGradT() : prev(active_tape<S>()) { active_tape<S>() = nullptr; }
  ~NoGradT() { active_tape<S>() = prev; }
};

template <typename S>
void backward(const TensorT<S>& loss) {
  auto* tape = active_tape<S>();
  check(tape != nullptr, "backward: no active tape");
  tape->backward(loss);
}

namespace detail {

template <typename S>
bool track(TapeT<S>* tape, const TensorT<S>& t) {
  return tape != nullptr && t.requires_grad();
}

// C[m x n] = A[m x k] * B[k x n], optionally accumulating.
template <typename S, bool Acc>
void gemm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
  if (!Acc) std::fill(c, c + static_cast<size_t>(m) * n, S(0));
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<size_t>(i) * k;
    S* crow = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename S>
void t_copy(const S* a, int m, int n, S* out) {  // out[n x m] = a^T
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a[static_cast<size_t>(i) * n + j];
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename S, bool Acc>
void gemm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
  std::vector<S> bt(static_cast<size_t>(k) * n);
  t_copy(b, n, k, bt.data());
  gemm_nn<S, Acc>(a, bt.data(), c, m, k, n);
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
template <typename S, bool Acc>
void gemm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
  std::vector<S> at(static_cast<size_t>(k) * m);
  t_copy(a, m, k, at.data());
  gemm_nn<S, Acc>(at.data(), b, c, k, m, n);
}

template <typename S>
void check_2d(const TensorT<S>& t, const char* op) {
  check(t.shape().size() == 2, op, ": expected 2-D tensor, got rank ", t.shape().size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  check(k == k2, "matmul: inner dimensions disagree, lhs [", m, " x ", k, "] vs rhs [", k2,
        " x ", n, "]");
  TensorT<S> out({m, n});
  detail::gemm_nn<S, false>(a.data(), b.data(), out.data(), m, k, n);
  auto* tape = active_tape<S>();
  if (detail::track(tape, a) || detail::track(tape, b)) {
    out.set_requires_grad(true);
    tape->record([ad = a, bd = b, od = out, m, k, n]() mutable {
      if (ad.requires_grad()) {
        ad.ensure_grad();
        detail::gemm_nt<S, true>(od.grad(), bd.data(), ad.grad(), m, n, k);
      }
      if (bd.requires_grad()) {
        bd.ensure_grad();
        detail::gemm_tn<S, true>(ad.data(), od.grad(), bd.grad(), m, k, n);
      }
    });
  }
  return out;
}

// y = x * W^T (+ bias). W is [out x in] as stored in linear layers.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias = {}) {
  detail::check_2d(x, "linear");
  detail::check_2d(w, "linear");
  const int m = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  check(w.shape()[1] == in, "linear: input width ", in, " vs weight [", out_f, " x ",
        w.shape()[1], "]");
  TensorT<S> out({m, out_f});
  detail::gemm_nt<S, false>(x.data(), w.data(), out.data(), m, in, out_f);
  if (bias.defined()) {
    check(bias.numel() == static_cast<size_t>(out_f), "linear: bias length mismatch");
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < out_f; ++j) out.at(i, j) += bias.data()[j];
  }
  auto* tape = active_tape<S>();
  if (detail::track(tape, x) || detail::track(tape, w) || (bias.defined() && detail::track(tape, bias))) {
    out.set_requires_grad(true);
    tape->record([xd = x, wd = w, bd = bias, od = out, m, in, out_f]() mutable {
      if (xd.requires_grad()) {
        xd.ensure_grad();
        detail::gemm_nn<S, true>(od.grad(), wd.data(), xd.grad(), m, out_f, in);
      }
      if (wd.requires_grad()) {
        wd.ensure_grad();
        detail::gemm_tn<S, true>(od.grad(), xd.data(), wd.grad(), m, out_f, in);
      }
      if (bd.defined() && bd.requires_grad()) {
        bd.ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < out_f; ++j) bd.grad()[j] += od.grad()[static_cast<size_t>(i) * out_f + j];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& x) {
  detail::check_2d(x, "transpose");
  const int m = x.shape()[0], n = x.shape()[1];
  TensorT<S> out({n, m});
  detail::t_copy(x.data(), m, n, out.data());
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out, m, n]() mutable {
      xd.ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          xd.grad()[static_cast<size_t>(j) * n + i] += od.grad()[static_cast<size_t>(i) * m + j];
    });
  }
  return out;
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch");
  TensorT<S> out(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  auto* tape = active_tape<S>();
  if (detail::track(tape, a) || detail::track(tape, b)) {
    out.set_requires_grad(true);
    tape->record([ad = a, bd = b, od = out, n]() mutable {
      if (ad.requires_grad()) {
        ad.ensure_grad();
        for (size_t i = 0; i < n; ++i) ad.grad()[i] += od.grad()[i];
      }
      if (bd.requires_grad()) {
        bd.ensure_grad();
        for (size_t i = 0; i < n; ++i) bd.grad()[i] += od.grad()[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  TensorT<S> out(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  auto* tape = active_tape<S>();
  if (detail::track(tape, a) || detail::track(tape, b)) {
    out.set_requires_grad(true);
    tape->record([ad = a, bd = b, od = out, n]() mutable {
      if (ad.requires_grad()) {
        ad.ensure_grad();
        for (size_t i = 0; i < n; ++i) ad.grad()[i] += od.grad()[i];
      }
      if (bd.requires_grad()) {
        bd.ensure_grad();
        for (size_t i = 0; i < n; ++i) bd.grad()[i] -= od.grad()[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  TensorT<S> out(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  auto* tape = active_tape<S>();
  if (detail::track(tape, a) || detail::track(tape, b)) {
    out.set_requires_grad(true);
    tape->record([ad = a, bd = b, od = out, n]() mutable {
      if (ad.requires_grad()) {
        ad.ensure_grad();
        for (size_t i = 0; i < n; ++i) ad.grad()[i] += od.grad()[i] * bd.data()[i];
      }
      if (bd.requires_grad()) {
        bd.ensure_grad();
        for (size_t i = 0; i < n; ++i) bd.grad()[i] += od.grad()[i] * ad.data()[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul_scalar(const TensorT<S>& a, S s) {
  TensorT<S> out(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  auto* tape = active_tape<S>();
  if (detail::track(tape, a)) {
    out.set_requires_grad(true);
    tape->record([ad = a, od = out, s, n]() mutable {
      ad.ensure_grad();
      for (size_t i = 0; i < n; ++i) ad.grad()[i] += od.grad()[i] * s;
    });
  }
  return out;
}

// Row-broadcast bias add, the one broadcasting form the layers need.
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& b) {
  detail::check_2d(x, "add_bias");
  const int m = x.shape()[0], n = x.shape()[1];
  check(b.numel() == static_cast<size_t>(n), "add_bias: bias length ", b.numel(),
        " vs row width ", n);
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + b.data()[j];
  auto* tape = active_tape<S>();
  if (detail::track(tape, x) || detail::track(tape, b)) {
    out.set_requires_grad(true);
    tape->record([xd = x, bd = b, od = out, m, n]() mutable {
      if (xd.requires_grad()) {
        xd.ensure_grad();
        const size_t total = static_cast<size_t>(m) * n;
        for (size_t i = 0; i < total; ++i) xd.grad()[i] += od.grad()[i];
      }
      if (bd.requires_grad()) {
        bd.ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) bd.grad()[j] += od.grad()[static_cast<size_t>(i) * n + j];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& x) {
  S acc = 0;
  for (size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  TensorT<S> out = TensorT<S>::scalar(acc);
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out]() mutable {
      xd.ensure_grad();
      const S g = od.grad()[0];
      for (size_t i = 0; i < xd.numel(); ++i) xd.grad()[i] += g;
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& x) {
  return mul_scalar(sum(x), S(1) / static_cast<S>(x.numel()));
}

// Rows (axis=1) or columns (axis=0) of a 2-D tensor; 1-D uses axis 0.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis = -1) {
  const bool is1d = x.shape().size() == 1;
  check(is1d || x.shape().size() == 2, "softmax: expected 1-D or 2-D tensor");
  if (axis < 0) axis = is1d ? 0 : 1;
  check(is1d ? axis == 0 : (axis == 0 || axis == 1), "softmax: invalid axis ", axis);
  const int rows = is1d ? 1 : x.shape()[0];
  const int cols = is1d ? static_cast<int>(x.numel()) : x.shape()[1];
  // normalize over columns by working on the transposed view
  const bool by_col = !is1d && axis == 0;
  const int nr = by_col ? cols : rows, nc = by_col ? rows : cols;
  auto idx = [by_col, cols](int r, int c) -> size_t {
    return by_col ? static_cast<size_t>(c) * cols + r : static_cast<size_t>(r) * cols + c;
  };
  TensorT<S> out(x.shape());
  for (int r = 0; r < nr; ++r) {
    S mx = x.data()[idx(r, 0)];
    for (int c = 1; c < nc; ++c) mx = std::max(mx, x.data()[idx(r, c)]);
    S denom = 0;
    for (int c = 0; c < nc; ++c) {
      const S e = std::exp(x.data()[idx(r, c)] - mx);
      out.data()[idx(r, c)] = e;
      denom += e;
    }
    const S inv = S(1) / denom;
    for (int c = 0; c < nc; ++c) out.data()[idx(r, c)] *= inv;
  }
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out, nr, nc, idx]() mutable {
      xd.ensure_grad();
      for (int r = 0; r < nr; ++r) {
        S dot = 0;
        for (int c = 0; c < nc; ++c) dot += od.grad()[idx(r, c)] * od.data()[idx(r, c)];
        for (int c = 0; c < nc; ++c) {
          const size_t i = idx(r, c);
          xd.grad()[i] += od.data()[i] * (od.grad()[i] - dot);
        }
      }
    });
  }
  return out;
}

// Mean over positions of -log softmax(logits)[t, target_t].
// Optional mask restricts the mean to positions with mask[t] != 0.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& mask = {}) {
  detail::check_2d(logits, "cross_entropy");
  const int t_len = logits.shape()[0], vocab = logits.shape()[1];
  check(static_cast<int>(targets.size()) == t_len, "cross_entropy: ", targets.size(),
        " targets for ", t_len, " positions");
  check(mask.empty() || static_cast<int>(mask.size()) == t_len, "cross_entropy: mask length");
  int counted = 0;
  S total = 0;
  std::vector<S> logz(t_len);
  for (int t = 0; t < t_len; ++t) {
    if (!mask.empty() && !mask[t]) continue;
    const int y = targets[t];
    check(y >= 0 && y < vocab, "cross_entropy: target ", y, " out of range [0, ", vocab,
          ") at position ", t);
    const S* row = logits.data() + static_cast<size_t>(t) * vocab;
    S mx = row[0];
    for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
    S denom = 0;
    for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
    logz[t] = mx + std::log(denom);
    total += logz[t] - row[y];
    ++counted;
  }
  check(counted > 0, "cross_entropy: no unmasked positions");
  TensorT<S> out = TensorT<S>::scalar(total / static_cast<S>(counted));
  auto* tape = active_tape<S>();
  if (detail::track(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([ld = logits, od = out, targets, mask, logz, counted, t_len, vocab]() mutable {
      ld.ensure_grad();
      const S g = od.grad()[0] / static_cast<S>(counted);
      for (int t = 0; t < t_len; ++t) {
        if (!mask.empty() && !mask[t]) continue;
        const S* row = ld.data() + static_cast<size_t>(t) * vocab;
        S* grow = ld.grad() + static_cast<size_t>(t) * vocab;
        for (int v = 0; v < vocab; ++v) grow[v] += g * std::exp(row[v] - logz[t]);
        grow[targets[t]] -= g;
      }
    });
  }
  return out;
}

// D_KL(p || q) from logits, mean over the row (position) dimension.
// p is the student distribution; gradients flow into both logit sets when
// they are tracked, though the teacher side is normally frozen.
template <typename S>
TensorT<S> kl_divergence(const TensorT<S>& p_logits, const TensorT<S>& q_logits) {
  detail::check_2d(p_logits, "kl_divergence");
  check(p_logits.shape() == q_logits.shape(), "kl_divergence: shape mismatch");
  const int t_len = p_logits.shape()[0], vocab = p_logits.shape()[1];
  std::vector<S> lp(static_cast<size_t>(t_len) * vocab), lq(lp.size());
  auto log_softmax_rows = [&](const S* src, S* dst) {
    for (int t = 0; t < t_len; ++t) {
      const S* row = src + static_cast<size_t>(t) * vocab;
      S* drow = dst + static_cast<size_t>(t) * vocab;
      S mx = row[0];
      for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
      S denom = 0;
      for (int v = 0; v < vocab; ++v) denom += std::exp(row[v] - mx);
      const S logz = mx + std::log(denom);
      for (int v = 0; v < vocab; ++v) drow[v] = row[v] - logz;
    }
  };
  log_softmax_rows(p_logits.data(), lp.data());
  log_softmax_rows(q_logits.data(), lq.data());
  std::vector<S> row_kl(t_len, S(0));
  S total = 0;
  for (int t = 0; t < t_len; ++t) {
    S acc = 0;
    for (int v = 0; v < vocab; ++v) {
      const size_t i = static_cast<size_t>(t) * vocab + v;
      acc += std::exp(lp[i]) * (lp[i] - lq[i]);
    }
    row_kl[t] = acc;
    total += acc;
  }
  TensorT<S> out = TensorT<S>::scalar(total / static_cast<S>(t_len));
  auto* tape = active_tape<S>();
  if (detail::track(tape, p_logits) || detail::track(tape, q_logits)) {
    out.set_requires_grad(true);
    tape->record([pd = p_logits, qd = q_logits, od = out, lp, lq, row_kl, t_len, vocab]() mutable {
      const S g = od.grad()[0] / static_cast<S>(t_len);
      if (pd.requires_grad()) {
        pd.ensure_grad();
        for (int t = 0; t < t_len; ++t)
          for (int v = 0; v < vocab; ++v) {
            const size_t i = static_cast<size_t>(t) * vocab + v;
            pd.grad()[i] += g * std::exp(lp[i]) * (lp[i] - lq[i] - row_kl[t]);
          }
      }
      if (qd.requires_grad()) {
        qd.ensure_grad();
        for (int t = 0; t < t_len; ++t)
          for (int v = 0; v < vocab; ++v) {
            const size_t i = static_cast<size_t>(t) * vocab + v;
            qd.grad()[i] += g * (std::exp(lq[i]) - std::exp(lp[i]));
          }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<int>& ids) {
  detail::check_2d(table, "embedding");
  const int vocab = table.shape()[0], dim = table.shape()[1];
  TensorT<S> out({static_cast<int>(ids.size()), dim});
  for (size_t t = 0; t < ids.size(); ++t) {
    check(ids[t] >= 0 && ids[t] < vocab, "embedding: id ", ids[t], " out of range [0, ", vocab,
          ")");
    std::copy_n(table.data() + static_cast<size_t>(ids[t]) * dim, dim,
                out.data() + t * dim);
  }
  auto* tape = active_tape<S>();
  if (detail::track(tape, table)) {
    out.set_requires_grad(true);
    tape->record([td = table, od = out, ids, dim]() mutable {
      td.ensure_grad();
      for (size_t t = 0; t < ids.size(); ++t) {
        S* dst = td.grad() + static_cast<size_t>(ids[t]) * dim;
        const S* src = od.grad() + t * dim;
        for (int j = 0; j < dim; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// y_i = g_i * x_i / sqrt(mean(x^2) + eps), per row.
template <typename S>
TensorT<S> rmsnorm(const TensorT<S>& x, const TensorT<S>& gain, S eps = S(1e-5)) {
  detail::check_2d(x, "rmsnorm");
  const int m = x.shape()[0], n = x.shape()[1];
  check(gain.numel() == static_cast<size_t>(n), "rmsnorm: gain length mismatch");
  TensorT<S> out({m, n});
  std::vector<S> inv_rms(m);
  for (int i = 0; i < m; ++i) {
    const S* row = x.data() + static_cast<size_t>(i) * n;
    S ss = 0;
    for (int j = 0; j < n; ++j) ss += row[j] * row[j];
    inv_rms[i] = S(1) / std::sqrt(ss / static_cast<S>(n) + eps);
    for (int j = 0; j < n; ++j) out.at(i, j) = gain.data()[j] * row[j] * inv_rms[i];
  }
  auto* tape = active_tape<S>();
  if (detail::track(tape, x) || detail::track(tape, gain)) {
    out.set_requires_grad(true);
    tape->record([xd = x, gd = gain, od = out, inv_rms, m, n]() mutable {
      for (int i = 0; i < m; ++i) {
        const S* row = xd.data() + static_cast<size_t>(i) * n;
        const S* grow = od.grad() + static_cast<size_t>(i) * n;
        const S inv = inv_rms[i];
        if (xd.requires_grad()) {
          xd.ensure_grad();
          S dot = 0;
          for (int j = 0; j < n; ++j) dot += grow[j] * gd.data()[j] * row[j];
          const S k = dot * inv * inv * inv / static_cast<S>(n);
          S* xg = xd.grad() + static_cast<size_t>(i) * n;
          for (int j = 0; j < n; ++j) xg[j] += grow[j] * gd.data()[j] * inv - k * row[j];
        }
        if (gd.requires_grad()) {
          gd.ensure_grad();
          for (int j = 0; j < n; ++j) gd.grad()[j] += grow[j] * row[j] * inv;
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> silu(const TensorT<S>& x) {
  TensorT<S> out(x.shape());
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) {
    const S v = x.data()[i];
    out.data()[i] = v / (S(1) + std::exp(-v));
  }
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out, n]() mutable {
      xd.ensure_grad();
      for (size_t i = 0; i < n; ++i) {
        const S v = xd.data()[i];
        const S sig = S(1) / (S(1) + std::exp(-v));
        xd.grad()[i] += od.grad()[i] * sig * (S(1) + v * (S(1) - sig));
      }
    });
  }
  return out;
}

// Entries above the diagonal are replaced by a large negative constant so
// softmax assigns them exactly zero weight.
template <typename S>
TensorT<S> causal_mask(const TensorT<S>& scores) {
  detail::check_2d(scores, "causal_mask");
  const int m = scores.shape()[0], n = scores.shape()[1];
  check(m == n, "causal_mask: expected square scores, got [", m, " x ", n, "]");
  constexpr S kNegInf = S(-1e30);
  TensorT<S> out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = j <= i ? scores.at(i, j) : kNegInf;
  auto* tape = active_tape<S>();
  if (detail::track(tape, scores)) {
    out.set_requires_grad(true);
    tape->record([sd = scores, od = out, m, n]() mutable {
      sd.ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j <= i; ++j)
          sd.grad()[static_cast<size_t>(i) * n + j] += od.grad()[static_cast<size_t>(i) * n + j];
    });
  }
  return out;
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, int c0, int c1) {
  detail::check_2d(x, "slice_cols");
  const int m = x.shape()[0], n = x.shape()[1];
  check(0 <= c0 && c0 < c1 && c1 <= n, "slice_cols: invalid range [", c0, ", ", c1, ") of ", n);
  const int w = c1 - c0;
  TensorT<S> out({m, w});
  for (int i = 0; i < m; ++i)
    std::copy_n(x.data() + static_cast<size_t>(i) * n + c0, w, out.data() + static_cast<size_t>(i) * w);
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out, c0, w, m, n]() mutable {
      xd.ensure_grad();
      for (int i = 0; i < m; ++i) {
        S* dst = xd.grad() + static_cast<size_t>(i) * n + c0;
        const S* src = od.grad() + static_cast<size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  check(!parts.empty(), "concat_cols: empty input");
  const int m = parts[0].shape()[0];
  int total = 0;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    check(p.shape()[0] == m, "concat_cols: row count mismatch");
    total += p.shape()[1];
  }
  TensorT<S> out({m, total});
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.shape()[1];
    for (int i = 0; i < m; ++i)
      std::copy_n(p.data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * total + off);
    off += w;
  }
  auto* tape = active_tape<S>();
  bool any = false;
  for (const auto& p : parts) any = any || detail::track(tape, p);
  if (any) {
    out.set_requires_grad(true);
    tape->record([parts = parts, od = out, m, total]() mutable {
      int off2 = 0;
      for (auto& p : parts) {
        const int w = p.shape()[1];
        if (p.requires_grad()) {
          p.ensure_grad();
          for (int i = 0; i < m; ++i) {
            S* dst = p.grad() + static_cast<size_t>(i) * w;
            const S* src = od.grad() + static_cast<size_t>(i) * total + off2;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, std::vector<int> shape) {
  check(TensorT<S>::numel_of(shape) == x.numel(), "reshape: element count mismatch");
  TensorT<S> out(std::move(shape), x.vec());
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out]() mutable {
      xd.ensure_grad();
      for (size_t i = 0; i < xd.numel(); ++i) xd.grad()[i] += od.grad()[i];
    });
  }
  return out;
}

// Inverted dropout on the adapter input path. Identity when p == 0.
template <typename S>
TensorT<S> dropout(const TensorT<S>& x, double p, Rng& rng) {
  check(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1), got ", p);
  if (p == 0.0) return x;
  const size_t n = x.numel();
  std::vector<S> mask(n);
  const S scale = S(1.0 / (1.0 - p));
  for (size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < p ? S(0) : scale;
  TensorT<S> out(x.shape());
  for (size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * mask[i];
  auto* tape = active_tape<S>();
  if (detail::track(tape, x)) {
    out.set_requires_grad(true);
    tape->record([xd = x, od = out, mask, n]() mutable {
      xd.ensure_grad();
      for (size_t i = 0; i < n; ++i) xd.grad()[i] += od.grad()[i] * mask[i];
    });
  }
  return out;
}

}  // namespace qlr
