#pragma once

// Byte-level decoder-only toy LM: pre-norm blocks with RMS normalization,
// multi-head causal attention, SiLU-gated MLP, learned absolute positions.
// Every block projection is a LinearSlot that can hold FP weights or a
// packed quantized matrix, with an ordered adapter stack on top of either.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qlr/bitpack.hpp"
#include "qlr/common.hpp"
#include "qlr/lora.hpp"
#include "qlr/tensor.hpp"

namespace qlr {

struct TransformerConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 256;  // byte-level
  int ctx_len = 128;
  std::string norm_type = "rmsnorm";
  uint64_t seed = 0;

  void validate() const {
    check(n_layers >= 0, "model: n_layers must be >= 0");
    check(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
          "model: d_model (", d_model, ") must be divisible by n_heads (", n_heads, ")");
    check(d_ff > 0 && vocab_size > 0, "model: bad dimensions");
    check(ctx_len >= 2, "model: ctx_len must be >= 2");
    check(norm_type == "rmsnorm", "model: unsupported norm_type '", norm_type, "'");
  }
};

template <typename S>
struct LinearSlotT {
  std::string name;
  int out_features = 0;
  int in_features = 0;
  TensorT<S> weight;  // FP base; undefined when quantized
  std::shared_ptr<const PackedMatrix> packed;
  std::shared_ptr<const QuantParams> qparams;
  std::vector<std::shared_ptr<LoraAdapterT<S>>> adapters;
  // quantizer hook: observes the slot input during calibration forwards
  std::function<void(const TensorT<S>&)> capture_input;

  bool is_quantized() const { return packed != nullptr; }

  void replace_with_packed(PackedMatrix pm, QuantParams qp) {
    check(pm.out_features == out_features && pm.in_features == in_features,
          "slot ", name, ": packed shape mismatch");
    packed = std::make_shared<const PackedMatrix>(std::move(pm));
    qparams = std::make_shared<const QuantParams>(std::move(qp));
    weight = {};
  }

  TensorT<S> forward(const TensorT<S>& x, bool training, Rng* rng) const {
    if (capture_input) capture_input(x);
    TensorT<S> y = packed ? packed_linear(x, packed, qparams) : linear(x, weight);
    for (const auto& ad : adapters) y = add(y, ad->apply(x, training, rng));
    return y;
  }
};

template <typename S>
struct TransformerModelT {
  using Slot = LinearSlotT<S>;

  struct Block {
    TensorT<S> attn_norm, mlp_norm;  // gains [d]
    Slot q, k, v, o, mlp_gate, mlp_up, mlp_down;

    Slot& slot(const std::string& t) {
      if (t == "q") return q;
      if (t == "k") return k;
      if (t == "v") return v;
      if (t == "o") return o;
      if (t == "mlp_gate") return mlp_gate;
      if (t == "mlp_up") return mlp_up;
      if (t == "mlp_down") return mlp_down;
      fail("model: unknown slot '", t, "'");
    }
    const Slot& slot(const std::string& t) const {
      return const_cast<Block*>(this)->slot(t);
    }
  };

  TransformerConfig cfg;
  TensorT<S> tok_emb;  // [V x d]
  TensorT<S> pos_emb;  // [ctx x d]
  std::vector<Block> blocks;
  TensorT<S> final_norm;
  TensorT<S> head;  // [V x d], stays FP
  bool frozen = false;

  static TransformerModelT init(const TransformerConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    TransformerModelT m;
    m.cfg = cfg;
    const double std0 = 0.02;
    // residual-in projections scaled down with depth, GPT-style
    const double std_res = std0 / std::sqrt(2.0 * std::max(1, cfg.n_layers));
    m.tok_emb = TensorT<S>::randn({cfg.vocab_size, cfg.d_model}, rng, std0);
    m.pos_emb = TensorT<S>::randn({cfg.ctx_len, cfg.d_model}, rng, std0);
    m.blocks.resize(cfg.n_layers);
    int bi = 0;
    for (auto& b : m.blocks) {
      b.attn_norm = TensorT<S>::full({cfg.d_model}, S(1));
      b.mlp_norm = TensorT<S>::full({cfg.d_model}, S(1));
      auto make = [&](const std::string& t, int out, int in, double sd) {
        Slot s;
        s.name = strcat("blk", bi, ".", t);
        s.out_features = out;
        s.in_features = in;
        s.weight = TensorT<S>::randn({out, in}, rng, sd);
        return s;
      };
      b.q = make("q", cfg.d_model, cfg.d_model, std0);
      b.k = make("k", cfg.d_model, cfg.d_model, std0);
      b.v = make("v", cfg.d_model, cfg.d_model, std0);
      b.o = make("o", cfg.d_model, cfg.d_model, std_res);
      b.mlp_gate = make("mlp_gate", cfg.d_ff, cfg.d_model, std0);
      b.mlp_up = make("mlp_up", cfg.d_ff, cfg.d_model, std0);
      b.mlp_down = make("mlp_down", cfg.d_model, cfg.d_ff, std_res);
      ++bi;
    }
    m.final_norm = TensorT<S>::full({cfg.d_model}, S(1));
    m.head = TensorT<S>::randn({cfg.vocab_size, cfg.d_model}, rng, std0);
    return m;
  }

  std::vector<Slot*> slots() {
    std::vector<Slot*> out;
    for (auto& b : blocks)
      for (const auto& t : InjectionSpec::all_targets()) out.push_back(&b.slot(t));
    return out;
  }
  std::vector<const Slot*> slots() const {
    std::vector<const Slot*> out;
    for (const auto& b : blocks)
      for (const auto& t : InjectionSpec::all_targets()) out.push_back(&b.slot(t));
    return out;
  }

  bool is_quantized() const {
    for (const auto* s : slots())
      if (s->is_quantized()) return true;
    return false;
  }

  // Base (non-adapter) FP tensors: embeddings, norms, FP slot weights, head.
  std::vector<TensorT<S>> base_parameters() {
    std::vector<TensorT<S>> out = {tok_emb, pos_emb};
    for (auto& b : blocks) {
      out.push_back(b.attn_norm);
      out.push_back(b.mlp_norm);
      for (const auto& t : InjectionSpec::all_targets()) {
        auto& s = b.slot(t);
        if (s.weight.defined()) out.push_back(s.weight);
      }
    }
    out.push_back(final_norm);
    out.push_back(head);
    return out;
  }

  std::vector<TensorT<S>> adapter_parameters() {
    std::vector<TensorT<S>> out;
    for (auto* s : slots())
      for (auto& ad : s->adapters) {
        out.push_back(ad->a);
        out.push_back(ad->b);
      }
    return out;
  }

  std::vector<TensorT<S>> parameters() {
    auto out = base_parameters();
    for (auto& t : adapter_parameters()) out.push_back(t);
    return out;
  }

  // Everything currently marked requires_grad; what an optimizer should see.
  std::vector<TensorT<S>> trainable_parameters() {
    std::vector<TensorT<S>> out;
    for (auto& t : parameters())
      if (t.requires_grad()) out.push_back(t);
    return out;
  }

  void set_base_trainable(bool v) {
    for (auto& t : base_parameters()) t.set_requires_grad(v && !frozen);
  }

  TensorT<S> forward(const std::vector<int>& tokens, bool training = false,
                     Rng* rng = nullptr) const {
    const int t_len = static_cast<int>(tokens.size());
    check(t_len >= 1, "forward: empty token sequence");
    check(t_len <= cfg.ctx_len, "forward: context overflow, ", t_len, " tokens > ctx_len ",
          cfg.ctx_len);
    for (int tok : tokens)
      check(tok >= 0 && tok < cfg.vocab_size, "forward: token ", tok, " out of range [0, ",
            cfg.vocab_size, ")");
    std::vector<int> positions(t_len);
    std::iota(positions.begin(), positions.end(), 0);

    TensorT<S> x = add(embedding(tok_emb, tokens), embedding(pos_emb, positions));
    const int dh = cfg.d_model / cfg.n_heads;
    const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (const auto& b : blocks) {
      TensorT<S> xn = rmsnorm(x, b.attn_norm);
      TensorT<S> qp = b.q.forward(xn, training, rng);
      TensorT<S> kp = b.k.forward(xn, training, rng);
      TensorT<S> vp = b.v.forward(xn, training, rng);
      std::vector<TensorT<S>> heads;
      heads.reserve(cfg.n_heads);
      for (int h = 0; h < cfg.n_heads; ++h) {
        TensorT<S> qh = slice_cols(qp, h * dh, (h + 1) * dh);
        TensorT<S> kh = slice_cols(kp, h * dh, (h + 1) * dh);
        TensorT<S> vh = slice_cols(vp, h * dh, (h + 1) * dh);
        TensorT<S> scores = mul_scalar(matmul(qh, transpose(kh)), att_scale);
        TensorT<S> att = softmax(causal_mask(scores), 1);
        heads.push_back(matmul(att, vh));
      }
      TensorT<S> ctx = cfg.n_heads == 1 ? heads[0] : concat_cols(heads);
      x = add(x, b.o.forward(ctx, training, rng));
      TensorT<S> xm = rmsnorm(x, b.mlp_norm);
      TensorT<S> gate = silu(b.mlp_gate.forward(xm, training, rng));
      TensorT<S> up = b.mlp_up.forward(xm, training, rng);
      x = add(x, b.mlp_down.forward(mul(gate, up), training, rng));
    }
    x = rmsnorm(x, final_norm);
    return linear(x, head);  // [T x vocab]
  }

  // Deep copy: fresh tensor storage, shared immutable packed matrices.
  TransformerModelT deep_clone() const {
    TransformerModelT m;
    m.cfg = cfg;
    m.frozen = frozen;
    m.tok_emb = tok_emb.clone();
    m.pos_emb = pos_emb.clone();
    m.final_norm = final_norm.clone();
    m.head = head.clone();
    m.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
      m.blocks[i].attn_norm = blocks[i].attn_norm.clone();
      m.blocks[i].mlp_norm = blocks[i].mlp_norm.clone();
      for (const auto& t : InjectionSpec::all_targets()) {
        const auto& src = blocks[i].slot(t);
        auto& dst = m.blocks[i].slot(t);
        dst.name = src.name;
        dst.out_features = src.out_features;
        dst.in_features = src.in_features;
        if (src.weight.defined()) dst.weight = src.weight.clone();
        dst.packed = src.packed;
        dst.qparams = src.qparams;
        for (const auto& ad : src.adapters) {
          auto copy = std::make_shared<LoraAdapterT<S>>(*ad);
          copy->a = ad->a.clone();
          copy->b = ad->b.clone();
          dst.adapters.push_back(copy);
        }
      }
    }
    return m;
  }

  TransformerModelT clone_as_teacher() const {
    check(!is_quantized(), "clone_as_teacher: model must be full precision");
    TransformerModelT t = deep_clone();
    t.frozen = true;
    for (auto& p : t.parameters()) p.set_requires_grad(false);
    return t;
  }
};

using TransformerModel = TransformerModelT<float>;

// Greedy (temperature 0) or seeded sampling continuation.
template <typename S>
std::vector<int> generate(const TransformerModelT<S>& model, const std::vector<int>& prompt,
                          int max_new, double temperature, uint64_t seed) {
  check(temperature >= 0.0, "generate: temperature must be >= 0");
  check(!prompt.empty(), "generate: empty prompt");
  check(static_cast<int>(prompt.size()) + max_new <= model.cfg.ctx_len,
        "generate: context overflow, prompt ", prompt.size(), " + max_new ", max_new,
        " > ctx_len ", model.cfg.ctx_len);
  NoGradT<S> off;
  Rng rng(seed);
  std::vector<int> out = prompt;
  for (int step = 0; step < max_new; ++step) {
    TensorT<S> logits = model.forward(out);
    const int t_last = logits.shape()[0] - 1;
    const int vocab = logits.shape()[1];
    int next = 0;
    if (temperature == 0.0) {
      for (int v = 1; v < vocab; ++v)
        if (logits.at(t_last, v) > logits.at(t_last, next)) next = v;
    } else {
      std::vector<double> p(vocab);
      double mx = -1e300;
      for (int v = 0; v < vocab; ++v)
        mx = std::max(mx, static_cast<double>(logits.at(t_last, v)) / temperature);
      double denom = 0;
      for (int v = 0; v < vocab; ++v) {
        p[v] = std::exp(static_cast<double>(logits.at(t_last, v)) / temperature - mx);
        denom += p[v];
      }
      double u = rng.uniform() * denom, acc = 0;
      next = vocab - 1;
      for (int v = 0; v < vocab; ++v) {
        acc += p[v];
        if (u <= acc) {
          next = v;
          break;
        }
      }
    }
    out.push_back(next);
  }
  return out;
}

}  // namespace qlr
