#pragma once

// Round-to-nearest and GPTQ quantization of FP weight matrices into
// PackedMatrix + QuantParams. GPTQ follows the one-shot per-column scheme:
// quantize a column, divide the residual by the diagonal of the upper
// Cholesky factor of H^-1, and push it into every later column. Internals
// run in double; the stored scales stay f32.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qlr/bitpack.hpp"
#include "qlr/common.hpp"
#include "qlr/tensor.hpp"

namespace qlr {

struct QuantizeConfig {
  int bits = 4;
  int group_size = QuantParams::kPerRow;
  bool act_order = false;
  bool true_sequential = false;
  double percdamp = 0.01;
  int calib_samples = 128;
  uint64_t seed = 0;

  void validate() const {
    check(PackedMatrix::valid_bits(bits), "quantize: bits must be one of 2,3,4,8, got ", bits);
    check(group_size == QuantParams::kPerRow || group_size > 0, "quantize: bad group size");
    check(percdamp > 0.0 && percdamp < 1.0, "quantize: percdamp must be in (0,1), got ", percdamp);
    check(calib_samples >= 1, "quantize: calib_samples must be >= 1");
  }
};

// (2/n) * sum over calibration activation rows of x x^T.
struct Hessian {
  int width = 0;
  size_t samples = 0;
  std::vector<double> h;  // [width x width]

  static Hessian zero(int width) {
    Hessian out;
    out.width = width;
    out.h.assign(static_cast<size_t>(width) * width, 0.0);
    return out;
  }

  double diag(int i) const { return h[static_cast<size_t>(i) * width + i]; }
};

template <typename S>
void accumulate_hessian(Hessian& hess, const S* x, int rows, int width) {
  check(width == hess.width, "hessian: activation width ", width, " vs ", hess.width);
  const size_t n_new = hess.samples + static_cast<size_t>(rows);
  const double keep = static_cast<double>(hess.samples) / static_cast<double>(n_new);
  for (auto& v : hess.h) v *= keep;
  const double w = 2.0 / static_cast<double>(n_new);
  for (int t = 0; t < rows; ++t) {
    const S* row = x + static_cast<size_t>(t) * width;
    for (int i = 0; i < width; ++i) {
      const double xi = static_cast<double>(row[i]) * w;
      double* hrow = hess.h.data() + static_cast<size_t>(i) * width;
      for (int j = 0; j < width; ++j) hrow[j] += xi * static_cast<double>(row[j]);
    }
  }
  hess.samples = n_new;
}

template <typename S>
void accumulate_hessian(Hessian& hess, const TensorT<S>& x_batch) {
  detail::check_2d(x_batch, "accumulate_hessian");
  accumulate_hessian(hess, x_batch.data(), x_batch.shape()[0], x_batch.shape()[1]);
}

struct QuantizedLayer {
  PackedMatrix pm;
  QuantParams qp;
  double layer_error = 0.0;  // trace((W - What) H (W - What)^T)
};

namespace qdetail {

struct GroupParams {
  float scale = 1.0f;   // stored and used by the dequant kernels
  double scale_d = 1.0; // full-precision copy used for rounding decisions
  int zero = 0;
};

// Range is clamped to include zero so the zero point stays in [0, maxq] and
// exact zeros survive the round trip.
inline GroupParams find_group_params(const double* w, int stride, int rows, int width, int col0,
                                     int bits) {
  double xmin = 0.0, xmax = 0.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < width; ++c) {
      const double v = w[static_cast<size_t>(r) * stride + col0 + c];
      xmin = std::min(xmin, v);
      xmax = std::max(xmax, v);
    }
  const int maxq = (1 << bits) - 1;
  GroupParams gp;
  if (xmax == xmin) return gp;
  gp.scale_d = (xmax - xmin) / maxq;
  gp.scale = static_cast<float>(gp.scale_d);
  gp.zero = static_cast<int>(std::clamp<long long>(std::llround(-xmin / gp.scale_d), 0, maxq));
  return gp;
}

// Per-row group parameters for one column block, from the current
// (possibly error-compensated) weights.
inline std::vector<GroupParams> per_row_params(const std::vector<double>& w, int out, int in,
                                               int col0, int width, int bits) {
  std::vector<GroupParams> gp(out);
  for (int r = 0; r < out; ++r)
    gp[r] = find_group_params(w.data() + static_cast<size_t>(r) * in, 0, 1, width, col0, bits);
  return gp;
}

inline int quantize_value(double v, const GroupParams& gp, int maxq) {
  return static_cast<int>(std::clamp<long long>(std::llround(v / gp.scale_d) + gp.zero, 0, maxq));
}

inline double dequantize_value(int q, const GroupParams& gp) {
  return (static_cast<double>(q) - static_cast<double>(gp.zero)) * static_cast<double>(gp.scale);
}

// In-place lower Cholesky; false if the matrix is not positive definite.
inline bool cholesky_lower(std::vector<double>& a, int n) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
      if (i == j) {
        if (s <= 0.0) return false;
        a[static_cast<size_t>(i) * n + i] = std::sqrt(s);
      } else {
        a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
      }
    }
    for (int j = i + 1; j < n; ++j) a[static_cast<size_t>(i) * n + j] = 0.0;
  }
  return true;
}

// Upper Cholesky factor U of H^-1 (H^-1 = U^T U), from the lower factor of H.
inline std::vector<double> inv_upper_factor(std::vector<double> h, int n) {
  check(cholesky_lower(h, n), "gptq: Cholesky failed after damping; try a larger percdamp");
  // L^-1 by forward substitution
  std::vector<double> linv(static_cast<size_t>(n) * n, 0.0);
  for (int c = 0; c < n; ++c) {
    linv[static_cast<size_t>(c) * n + c] = 1.0 / h[static_cast<size_t>(c) * n + c];
    for (int r = c + 1; r < n; ++r) {
      double s = 0.0;
      for (int k = c; k < r; ++k)
        s -= h[static_cast<size_t>(r) * n + k] * linv[static_cast<size_t>(k) * n + c];
      linv[static_cast<size_t>(r) * n + c] = s / h[static_cast<size_t>(r) * n + r];
    }
  }
  // H^-1 = L^-T L^-1
  std::vector<double> hinv(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      double s = 0.0;
      for (int k = std::max(i, j); k < n; ++k)
        s += linv[static_cast<size_t>(k) * n + i] * linv[static_cast<size_t>(k) * n + j];
      hinv[static_cast<size_t>(i) * n + j] = s;
      hinv[static_cast<size_t>(j) * n + i] = s;
    }
  check(cholesky_lower(hinv, n), "gptq: Cholesky of H^-1 failed; try a larger percdamp");
  // U = (lower factor of H^-1)^T
  std::vector<double> u(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) u[static_cast<size_t>(i) * n + j] = hinv[static_cast<size_t>(j) * n + i];
  return u;
}

inline double error_trace(const std::vector<double>& delta, const std::vector<double>& h, int out,
                          int in) {
  // trace(D H D^T) = sum_r d_r^T H d_r
  double total = 0.0;
  std::vector<double> tmp(in);
  for (int r = 0; r < out; ++r) {
    const double* d = delta.data() + static_cast<size_t>(r) * in;
    for (int i = 0; i < in; ++i) {
      double s = 0.0;
      const double* hrow = h.data() + static_cast<size_t>(i) * in;
      for (int j = 0; j < in; ++j) s += hrow[j] * d[j];
      tmp[i] = s;
    }
    for (int i = 0; i < in; ++i) total += d[i] * tmp[i];
  }
  return total;
}

}  // namespace qdetail

// trace((W - dequant(pm, qp)) H (...)^T) for an already-quantized layer.
inline double layer_error(const std::vector<float>& w, int out, int in, const PackedMatrix& pm,
                          const QuantParams& qp, const Hessian& hess) {
  check(hess.width == in, "layer_error: hessian width mismatch");
  const auto what = dequantize<double>(pm, qp);
  std::vector<double> delta(w.size());
  for (size_t i = 0; i < w.size(); ++i) delta[i] = static_cast<double>(w[i]) - what[i];
  return qdetail::error_trace(delta, hess.h, out, in);
}

inline QuantizedLayer rtn_quantize(const std::vector<float>& w, int out, int in,
                                   const QuantizeConfig& cfg) {
  cfg.validate();
  check(w.size() == static_cast<size_t>(out) * in, "rtn: weight count mismatch");
  for (float v : w) check(std::isfinite(v), "rtn: non-finite weight");
  const int gs = cfg.group_size == QuantParams::kPerRow ? in : cfg.group_size;
  const int ng = (in + gs - 1) / gs;
  const int maxq = (1 << cfg.bits) - 1;

  std::vector<double> wd(w.begin(), w.end());
  QuantizedLayer out_layer;
  out_layer.qp.group_size = cfg.group_size;
  out_layer.qp.scales.resize(static_cast<size_t>(out) * ng);
  out_layer.qp.zeros.resize(out_layer.qp.scales.size());
  std::vector<int> q(w.size());
  for (int r = 0; r < out; ++r) {
    for (int g = 0; g < ng; ++g) {
      const int c0 = g * gs;
      const int width = std::min(gs, in - c0);
      const auto gp =
          qdetail::find_group_params(wd.data() + static_cast<size_t>(r) * in, 0, 1, width, c0, cfg.bits);
      out_layer.qp.scales[static_cast<size_t>(r) * ng + g] = gp.scale;
      out_layer.qp.zeros[static_cast<size_t>(r) * ng + g] = static_cast<uint32_t>(gp.zero);
      for (int c = c0; c < c0 + width; ++c)
        q[static_cast<size_t>(r) * in + c] =
            qdetail::quantize_value(wd[static_cast<size_t>(r) * in + c], gp, maxq);
    }
  }
  out_layer.pm = pack(q, out, in, cfg.bits);
  return out_layer;
}

// One-shot quantization with per-column error compensation. Guarantees:
// with H proportional to the identity the result is bit-identical to RTN,
// because the off-diagonal propagation terms vanish.
inline QuantizedLayer gptq_quantize(const std::vector<float>& w, int out, int in,
                                    const Hessian& hess, const QuantizeConfig& cfg) {
  cfg.validate();
  check(hess.width == in, "gptq: hessian width ", hess.width, " vs in_features ", in);
  check(w.size() == static_cast<size_t>(out) * in, "gptq: weight count mismatch");
  for (float v : w) check(std::isfinite(v), "gptq: non-finite weight");
  const int gs = cfg.group_size == QuantParams::kPerRow ? in : cfg.group_size;
  const int ng = (in + gs - 1) / gs;
  const int maxq = (1 << cfg.bits) - 1;

  std::vector<int> perm;
  if (cfg.act_order) {
    perm.resize(in);
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&](int a, int b) { return hess.diag(a) > hess.diag(b); });
    bool identity = true;
    for (int i = 0; i < in; ++i) identity = identity && perm[i] == i;
    if (identity) perm.clear();
  }
  auto stored_col = [&](int j) { return perm.empty() ? j : perm[j]; };

  // working copies in processing order
  std::vector<double> wd(static_cast<size_t>(out) * in);
  std::vector<double> hd(static_cast<size_t>(in) * in);
  for (int r = 0; r < out; ++r)
    for (int j = 0; j < in; ++j)
      wd[static_cast<size_t>(r) * in + j] = w[static_cast<size_t>(r) * in + stored_col(j)];
  for (int i = 0; i < in; ++i)
    for (int j = 0; j < in; ++j)
      hd[static_cast<size_t>(i) * in + j] =
          hess.h[static_cast<size_t>(stored_col(i)) * hess.width + stored_col(j)];

  // dead columns carry no signal; pin them so the factorization survives
  for (int i = 0; i < in; ++i) {
    if (hd[static_cast<size_t>(i) * in + i] == 0.0) {
      hd[static_cast<size_t>(i) * in + i] = 1.0;
      for (int r = 0; r < out; ++r) wd[static_cast<size_t>(r) * in + i] = 0.0;
    }
  }
  const std::vector<double> w_orig = wd;
  const std::vector<double> h_orig = hd;

  double mean_diag = 0.0;
  for (int i = 0; i < in; ++i) mean_diag += hd[static_cast<size_t>(i) * in + i];
  mean_diag /= in;
  for (int i = 0; i < in; ++i) hd[static_cast<size_t>(i) * in + i] += cfg.percdamp * mean_diag;

  const std::vector<double> u = qdetail::inv_upper_factor(hd, in);

  QuantizedLayer res;
  res.qp.group_size = cfg.group_size;
  res.qp.scales.resize(static_cast<size_t>(out) * ng);
  res.qp.zeros.resize(res.qp.scales.size());
  std::vector<int> q(static_cast<size_t>(out) * in);
  std::vector<double> what(static_cast<size_t>(out) * in);
  std::vector<qdetail::GroupParams> gp;

  for (int i = 0; i < in; ++i) {
    if (i % gs == 0) {
      const int width = std::min(gs, in - i);
      gp = qdetail::per_row_params(wd, out, in, i, width, cfg.bits);
      const int g = i / gs;
      for (int r = 0; r < out; ++r) {
        res.qp.scales[static_cast<size_t>(r) * ng + g] = gp[r].scale;
        res.qp.zeros[static_cast<size_t>(r) * ng + g] = static_cast<uint32_t>(gp[r].zero);
      }
    }
    const double dii = u[static_cast<size_t>(i) * in + i];
    for (int r = 0; r < out; ++r) {
      const double wv = wd[static_cast<size_t>(r) * in + i];
      const int qv = qdetail::quantize_value(wv, gp[r], maxq);
      const double dq = qdetail::dequantize_value(qv, gp[r]);
      q[static_cast<size_t>(r) * in + i] = qv;
      what[static_cast<size_t>(r) * in + i] = dq;
      const double err = (wv - dq) / dii;
      double* wrow = wd.data() + static_cast<size_t>(r) * in;
      const double* urow = u.data() + static_cast<size_t>(i) * in;
      for (int j = i + 1; j < in; ++j) wrow[j] -= err * urow[j];
    }
  }

  std::vector<double> delta(what.size());
  for (size_t i = 0; i < what.size(); ++i) delta[i] = w_orig[i] - what[i];
  res.layer_error = qdetail::error_trace(delta, h_orig, out, in);
  res.pm = pack(q, out, in, cfg.bits, perm);
  return res;
}

}  // namespace qlr
