#pragma once

// Whole-model quantization: every block projection becomes PackedMatrix +
// QuantParams while embeddings, norms and the output head stay FP. Blocks
// are always processed in order against the partially quantized model;
// true_sequential additionally splits each block into projection groups so
// later projections see activations produced by already-quantized earlier
// ones.

#include <string>
#include <utility>
#include <vector>

#include "qlr/model.hpp"
#include "qlr/quantize.hpp"

namespace qlr {

struct ModelQuantizeReport {
  std::vector<std::pair<std::string, double>> layer_errors;
  double total_error = 0.0;
};

inline ModelQuantizeReport quantize_model(TransformerModel& model,
                                          const std::vector<std::vector<int>>& calib,
                                          const QuantizeConfig& cfg) {
  cfg.validate();
  check(!model.is_quantized(), "quantize_model: model already has quantized slots");
  check(!calib.empty(), "quantize_model: calibration set is empty");

  ModelQuantizeReport report;
  using Group = std::vector<std::string>;
  std::vector<Group> groups;
  if (cfg.true_sequential)
    groups = {{"q", "k", "v"}, {"o"}, {"mlp_gate", "mlp_up"}, {"mlp_down"}};
  else
    groups = {{"q", "k", "v", "o", "mlp_gate", "mlp_up", "mlp_down"}};

  for (auto& block : model.blocks) {
    for (const auto& group : groups) {
      std::vector<Hessian> hessians;
      hessians.reserve(group.size());
      for (size_t gi = 0; gi < group.size(); ++gi) {
        auto& slot = block.slot(group[gi]);
        hessians.push_back(Hessian::zero(slot.in_features));
        Hessian* h = &hessians.back();
        slot.capture_input = [h](const Tensor& x) { accumulate_hessian(*h, x); };
      }
      {
        NoGradT<float> off;
        for (const auto& seq : calib) model.forward(seq);
      }
      for (size_t gi = 0; gi < group.size(); ++gi) {
        auto& slot = block.slot(group[gi]);
        slot.capture_input = nullptr;
        auto q = gptq_quantize(slot.weight.vec(), slot.out_features, slot.in_features,
                               hessians[gi], cfg);
        report.layer_errors.emplace_back(slot.name, q.layer_error);
        report.total_error += q.layer_error;
        slot.replace_with_packed(std::move(q.pm), std::move(q.qp));
      }
    }
  }
  return report;
}

}  // namespace qlr
