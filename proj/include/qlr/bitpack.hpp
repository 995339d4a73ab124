#pragma once

// Bit-exact b-bit weight storage packed into little-endian u32 words, plus
// the fused dequantize-matmul forward and transposed-unpack backward.
//
// Layout: one LSB-first contiguous bit stream over row-major (out x in)
// values in stored column order; values may span word boundaries (b = 3).
// When a column permutation is present (activation ordering), stored column
// j holds logical column perm[j], and scale/zero groups are formed over the
// stored order, matching the order the quantizer processed columns in.

#include <cstdint>
#include <memory>
#include <vector>

#include "qlr/common.hpp"
#include "qlr/tensor.hpp"

namespace qlr {

struct PackedMatrix {
  int out_features = 0;
  int in_features = 0;
  int bits = 0;
  std::vector<uint32_t> words;
  std::vector<int> perm;  // empty = identity

  static bool valid_bits(int b) { return b == 2 || b == 3 || b == 4 || b == 8; }

  static size_t words_needed(int out, int in, int bits) {
    const size_t total_bits = static_cast<size_t>(out) * in * bits;
    return (total_bits + 31) / 32;
  }

  size_t byte_size() const { return words.size() * 4; }

  void validate() const {
    check(valid_bits(bits), "packed matrix: unsupported bit width ", bits);
    check(out_features > 0 && in_features > 0, "packed matrix: empty shape");
    check(words.size() == words_needed(out_features, in_features, bits),
          "packed matrix: corrupted word count ", words.size(), ", expected ",
          words_needed(out_features, in_features, bits));
    if (!perm.empty()) {
      check(static_cast<int>(perm.size()) == in_features, "packed matrix: perm length");
      std::vector<uint8_t> seen(in_features, 0);
      for (int p : perm) {
        check(p >= 0 && p < in_features && !seen[p], "packed matrix: perm is not a permutation");
        seen[p] = 1;
      }
    }
  }

  int get(int r, int c_stored) const {
    const size_t bit = (static_cast<size_t>(r) * in_features + c_stored) * bits;
    const size_t w = bit >> 5;
    const int off = static_cast<int>(bit & 31);
    uint64_t v = words[w] >> off;
    if (off + bits > 32) v |= static_cast<uint64_t>(words[w + 1]) << (32 - off);
    return static_cast<int>(v & ((1u << bits) - 1));
  }
};

// values are row-major [out x in] in stored order; perm records which
// logical column each stored column carries.
inline PackedMatrix pack(const std::vector<int>& values, int out, int in, int bits,
                         std::vector<int> perm = {}) {
  check(PackedMatrix::valid_bits(bits), "pack: unsupported bit width ", bits);
  check(values.size() == static_cast<size_t>(out) * in, "pack: value count mismatch");
  PackedMatrix pm;
  pm.out_features = out;
  pm.in_features = in;
  pm.bits = bits;
  pm.perm = std::move(perm);
  pm.words.assign(PackedMatrix::words_needed(out, in, bits), 0);
  const int maxq = (1 << bits) - 1;
  for (size_t idx = 0; idx < values.size(); ++idx) {
    const int v = values[idx];
    check(v >= 0 && v <= maxq, "pack: value ", v, " out of [0, ", maxq + 1, ") at row ",
          idx / in, ", col ", idx % in);
    const size_t bit = idx * bits;
    const size_t w = bit >> 5;
    const int off = static_cast<int>(bit & 31);
    pm.words[w] |= static_cast<uint32_t>(static_cast<uint64_t>(v) << off);
    if (off + bits > 32) pm.words[w + 1] |= static_cast<uint32_t>(static_cast<uint64_t>(v) >> (32 - off));
  }
  pm.validate();
  return pm;
}

// Logical column order (perm applied), row-major [out x in].
inline std::vector<int> unpack(const PackedMatrix& pm) {
  pm.validate();
  std::vector<int> out(static_cast<size_t>(pm.out_features) * pm.in_features);
  for (int r = 0; r < pm.out_features; ++r)
    for (int j = 0; j < pm.in_features; ++j) {
      const int logical = pm.perm.empty() ? j : pm.perm[j];
      out[static_cast<size_t>(r) * pm.in_features + logical] = pm.get(r, j);
    }
  return out;
}

// transpose(unpack(pm)) in one pass over the stored stream.
inline std::vector<int> unpack_transposed(const PackedMatrix& pm) {
  pm.validate();
  std::vector<int> out(static_cast<size_t>(pm.out_features) * pm.in_features);
  for (int r = 0; r < pm.out_features; ++r)
    for (int j = 0; j < pm.in_features; ++j) {
      const int logical = pm.perm.empty() ? j : pm.perm[j];
      out[static_cast<size_t>(logical) * pm.out_features + r] = pm.get(r, j);
    }
  return out;
}

struct QuantParams {
  static constexpr int kPerRow = -1;

  int group_size = kPerRow;
  std::vector<float> scales;    // [out x n_groups]
  std::vector<uint32_t> zeros;  // [out x n_groups], each in [0, 2^bits)

  int effective_group(int in_features) const {
    return group_size == kPerRow ? in_features : group_size;
  }
  int n_groups(int in_features) const {
    const int g = effective_group(in_features);
    return (in_features + g - 1) / g;
  }

  void validate(const PackedMatrix& pm) const {
    check(group_size == kPerRow || group_size > 0, "quant params: bad group size ", group_size);
    const size_t expect = static_cast<size_t>(pm.out_features) * n_groups(pm.in_features);
    check(scales.size() == expect, "quant params: scales length ", scales.size(), ", expected ",
          expect);
    check(zeros.size() == expect, "quant params: zeros length");
    const uint32_t maxq = (1u << pm.bits) - 1;
    for (float s : scales) check(s > 0.0f, "quant params: non-positive scale");
    for (uint32_t z : zeros) check(z <= maxq, "quant params: zero point out of range");
  }
};

// Dequantized weights in logical column order, W[r][c] as the fused ops see
// them. Reference path for the kernels below; the kernels never call it.
template <typename S = float>
std::vector<S> dequantize(const PackedMatrix& pm, const QuantParams& qp) {
  qp.validate(pm);
  const int out = pm.out_features, in = pm.in_features;
  const int gs = qp.effective_group(in);
  const int ng = qp.n_groups(in);
  std::vector<S> w(static_cast<size_t>(out) * in);
  for (int r = 0; r < out; ++r)
    for (int j = 0; j < in; ++j) {
      const int g = j / gs;
      const int logical = pm.perm.empty() ? j : pm.perm[j];
      const S scale = static_cast<S>(qp.scales[static_cast<size_t>(r) * ng + g]);
      const S zero = static_cast<S>(qp.zeros[static_cast<size_t>(r) * ng + g]);
      w[static_cast<size_t>(r) * in + logical] = (static_cast<S>(pm.get(r, j)) - zero) * scale;
    }
  return w;
}

// y[m x out] = x[m x in] * W^T (+ bias), decoding one group of stored
// columns at a time. Accumulation is per output element in stored-column
// order, deterministic.
template <typename S>
void fused_forward_raw(const S* x, int m, const PackedMatrix& pm, const QuantParams& qp,
                       const S* bias, S* y) {
  const int out = pm.out_features, in = pm.in_features;
  const int gs = qp.effective_group(in);
  const int ng = qp.n_groups(in);

  // stored-order view of x so the inner loops stay contiguous
  std::vector<S> xp;
  const S* xs = x;
  if (!pm.perm.empty()) {
    xp.resize(static_cast<size_t>(m) * in);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < in; ++j)
        xp[static_cast<size_t>(i) * in + j] = x[static_cast<size_t>(i) * in + pm.perm[j]];
    xs = xp.data();
  }

  for (int i = 0; i < m; ++i)
    for (int r = 0; r < out; ++r) y[static_cast<size_t>(i) * out + r] = bias ? bias[r] : S(0);

  std::vector<S> dq(gs);
  for (int r = 0; r < out; ++r) {
    for (int g = 0; g < ng; ++g) {
      const int c0 = g * gs;
      const int width = std::min(gs, in - c0);
      const S scale = static_cast<S>(qp.scales[static_cast<size_t>(r) * ng + g]);
      const S zero = static_cast<S>(qp.zeros[static_cast<size_t>(r) * ng + g]);
      for (int c = 0; c < width; ++c) dq[c] = (static_cast<S>(pm.get(r, c0 + c)) - zero) * scale;
      for (int i = 0; i < m; ++i) {
        const S* xrow = xs + static_cast<size_t>(i) * in + c0;
        S acc = 0;
        for (int c = 0; c < width; ++c) acc += xrow[c] * dq[c];
        y[static_cast<size_t>(i) * out + r] += acc;
      }
    }
  }
}

// gx[m x in] += gy[m x out] * W: the transposed-unpack path of the backward
// branch. Never produces gradients for the packed ints or quant params.
template <typename S>
void fused_backward_input_raw(const S* gy, int m, const PackedMatrix& pm, const QuantParams& qp,
                              S* gx) {
  const int out = pm.out_features, in = pm.in_features;
  const int gs = qp.effective_group(in);
  const int ng = qp.n_groups(in);

  std::vector<S> gxp(static_cast<size_t>(m) * in, S(0));
  std::vector<S> dq(gs);
  for (int r = 0; r < out; ++r) {
    for (int g = 0; g < ng; ++g) {
      const int c0 = g * gs;
      const int width = std::min(gs, in - c0);
      const S scale = static_cast<S>(qp.scales[static_cast<size_t>(r) * ng + g]);
      const S zero = static_cast<S>(qp.zeros[static_cast<size_t>(r) * ng + g]);
      for (int c = 0; c < width; ++c) dq[c] = (static_cast<S>(pm.get(r, c0 + c)) - zero) * scale;
      for (int i = 0; i < m; ++i) {
        const S gv = gy[static_cast<size_t>(i) * out + r];
        if (gv == S(0)) continue;
        S* grow = gxp.data() + static_cast<size_t>(i) * in + c0;
        for (int c = 0; c < width; ++c) grow[c] += gv * dq[c];
      }
    }
  }

  for (int i = 0; i < m; ++i)
    for (int j = 0; j < in; ++j) {
      const int logical = pm.perm.empty() ? j : pm.perm[j];
      gx[static_cast<size_t>(i) * in + logical] += gxp[static_cast<size_t>(i) * in + j];
    }
}

// Tape op over the fused kernels. The frozen packed weights are opaque to
// the tape; only x (and the optional bias) can receive gradients.
template <typename S>
TensorT<S> packed_linear(const TensorT<S>& x, const std::shared_ptr<const PackedMatrix>& pm,
                         const std::shared_ptr<const QuantParams>& qp,
                         const TensorT<S>& bias = {}) {
  detail::check_2d(x, "packed_linear");
  const int m = x.shape()[0];
  check(x.shape()[1] == pm->in_features, "packed_linear: input width ", x.shape()[1],
        " vs packed [", pm->out_features, " x ", pm->in_features, "]");
  qp->validate(*pm);
  if (bias.defined())
    check(bias.numel() == static_cast<size_t>(pm->out_features), "packed_linear: bias length");
  TensorT<S> out({m, pm->out_features});
  fused_forward_raw(x.data(), m, *pm, *qp, bias.defined() ? bias.data() : nullptr, out.data());
  auto* tape = active_tape<S>();
  if (detail::track(tape, x) || (bias.defined() && detail::track(tape, bias))) {
    out.set_requires_grad(true);
    tape->record([xd = x, bd = bias, od = out, pm, qp, m]() mutable {
      if (xd.requires_grad()) {
        xd.ensure_grad();
        fused_backward_input_raw(od.grad(), m, *pm, *qp, xd.grad());
      }
      if (bd.defined() && bd.requires_grad()) {
        bd.ensure_grad();
        const int outf = pm->out_features;
        for (int i = 0; i < m; ++i)
          for (int r = 0; r < outf; ++r) bd.grad()[r] += od.grad()[static_cast<size_t>(i) * outf + r];
      }
    });
  }
  return out;
}

}  // namespace qlr
