#pragma once

// Trainable low-rank adapter pairs. delta(x) = (alpha/r) * dropout(x) A^T B^T
// with A ~ N(0, 0.02^2) and B = 0 at init, so a freshly injected model is
// function-identical to its base.

#include <memory>
#include <string>
#include <vector>

#include "qlr/common.hpp"
#include "qlr/tensor.hpp"

namespace qlr {

template <typename S>
struct LoraAdapterT {
  TensorT<S> a;  // [r x in]
  TensorT<S> b;  // [out x r]
  int rank = 0;
  double alpha = 16.0;
  double dropout_p = 0.0;
  bool frozen = false;

  static LoraAdapterT init(int out, int in, int r, double alpha, double dropout_p, Rng& rng) {
    check(r >= 1, "lora: rank must be >= 1, got ", r);
    check(r <= std::min(out, in), "lora: rank ", r, " exceeds min(out,in) = ",
          std::min(out, in));
    LoraAdapterT ad;
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.a = TensorT<S>::randn({r, in}, rng, 0.02);
    ad.b = TensorT<S>::zeros({out, r});
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    return ad;
  }

  TensorT<S> apply(const TensorT<S>& x, bool training, Rng* rng) const {
    TensorT<S> in = x;
    if (training && dropout_p > 0.0 && rng != nullptr) in = dropout(x, dropout_p, *rng);
    TensorT<S> h = linear(in, a);   // [m x r]
    TensorT<S> d = linear(h, b);    // [m x out]
    return mul_scalar(d, static_cast<S>(alpha / rank));
  }

  void set_frozen(bool v) {
    frozen = v;
    a.set_requires_grad(!v);
    b.set_requires_grad(!v);
  }

  size_t param_count() const { return a.numel() + b.numel(); }
  size_t byte_size() const { return param_count() * sizeof(float); }
};

using LoraAdapter = LoraAdapterT<float>;

struct InjectionSpec {
  std::vector<std::string> targets;  // subset of all_targets()
  int r = 8;
  double alpha = 16.0;
  double dropout_p = 0.05;

  static const std::vector<std::string>& all_targets() {
    static const std::vector<std::string> t = {"q", "k", "v", "o", "mlp_gate", "mlp_up", "mlp_down"};
    return t;
  }

  static InjectionSpec all(int r, double alpha = 16.0, double dropout_p = 0.05) {
    InjectionSpec s;
    s.targets = all_targets();
    s.r = r;
    s.alpha = alpha;
    s.dropout_p = dropout_p;
    return s;
  }

  void validate() const {
    check(!targets.empty(), "injection spec: targets must be nonempty");
    check(r >= 1, "injection spec: rank must be >= 1");
    const auto& known = all_targets();
    for (const auto& t : targets)
      check(std::find(known.begin(), known.end(), t) != known.end(),
            "injection spec: unknown target '", t, "' (valid: q, k, v, o, mlp_gate, mlp_up, mlp_down)");
  }
};

// Trainable parameter count for a spec against live model dimensions:
// exact sum of r*(out+in) over targeted slots, which reduces to
// 2 * L_hat * d_model * r when every projection is square.
template <typename Model>
size_t lora_param_count(const InjectionSpec& spec, const Model& model) {
  spec.validate();
  size_t total = 0;
  for (const auto& block : model.blocks)
    for (const auto& t : spec.targets) {
      const auto& slot = block.slot(t);
      total += static_cast<size_t>(spec.r) * (slot.out_features + slot.in_features);
    }
  return total;
}

// Closed form for square projections: |theta_l| = 2 * L_hat * d_model * r.
inline size_t lora_param_count_square(size_t n_projections, size_t d_model, size_t r) {
  return 2 * n_projections * d_model * r;
}

template <typename S>
using AdapterHandles = std::vector<std::shared_ptr<LoraAdapterT<S>>>;

// Injects one adapter per targeted slot. Stacking: calling again appends an
// independent second set on top of whatever is already attached.
template <typename S, typename Model>
AdapterHandles<S> inject(Model& model, const InjectionSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  AdapterHandles<S> handles;
  for (auto& block : model.blocks)
    for (const auto& t : spec.targets) {
      auto& slot = block.slot(t);
      auto ad = std::make_shared<LoraAdapterT<S>>(
          LoraAdapterT<S>::init(slot.out_features, slot.in_features, spec.r, spec.alpha,
                                spec.dropout_p, rng));
      slot.adapters.push_back(ad);
      handles.push_back(ad);
    }
  return handles;
}

template <typename S>
void freeze_adapters(const AdapterHandles<S>& handles) {
  for (const auto& h : handles) h->set_frozen(true);
}

}  // namespace qlr
