#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modabs/autodiff.hpp"
#include "modabs/model.hpp"

namespace modabs {

struct LossWeights {
  double lambda1 = 1.0;  // summarization; fixed at 1 outside of tests
  double lambda2 = 0.0;  // divergence
  double lambda3 = 0.0;  // aspect count
  LimitKind limit = LimitKind::Sigmoid;
};

std::string limit_kind_name(LimitKind kind);
LimitKind limit_kind_from_name(const std::string& name);

struct LossBreakdown {
  double summarization = 0.0;  // >= 0
  double divergence = 0.0;     // <= 0 for limits mapping KL>=0 to >=0; 0 when disabled
  double aspect_count = 0.0;   // >= 0; 0 when disabled
  double total = 0.0;          // lambda1*s + lambda2*d + lambda3*a, exactly
};

/// Per-aspect token cross entropy with PAD ignored: masked mean per slice,
/// summed over all N slices, divided by N. Slices past the reference count
/// are supervised against [EOS] via the teacher-forcing framing.
Var summarization_loss(Tape& tape, const std::vector<Var>& aspect_logits,
                       const TeacherForcing& tf);

/// For every ordered slice pair (i, j), i != j: token-distribution KL per
/// position averaged over positions where either slice is non-pad, passed
/// through the limit function; pair terms are summed, divided by N, negated.
/// Returns 0 (with the warning flag set) when fewer than two slices exist.
Var divergence_loss(Tape& tape, const std::vector<Var>& aspect_logits,
                    const std::vector<std::vector<char>>& nonpad_mask,
                    const LossWeights& weights, bool* single_slice_warning = nullptr);

/// Cross entropy of the count classifier against class reference_count - 1.
Var aspect_count_loss(Tape& tape, Var count_logits, int reference_count);

struct TotalLoss {
  Var total;
  LossBreakdown breakdown;  // components reported unweighted; disabled terms are 0
};

/// Builds encode/decode/loss graphs for every sample in the batch and
/// averages each component across the batch. Terms with zero weight are not
/// computed at all, so their logged component is exactly 0 and no gradient
/// flows through them.
TotalLoss total_loss(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                     std::span<const Sample* const> batch, const LossWeights& weights);

/// Convenience overload for prebuilt per-sample outputs (used by tests).
TotalLoss total_loss_from_outputs(Tape& tape, const std::vector<DecodeVars>& outputs,
                                  const std::vector<TeacherForcing>& frames,
                                  const LossWeights& weights);

}  // namespace modabs
