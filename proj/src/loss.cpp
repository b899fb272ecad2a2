#include "modabs/loss.hpp"

#include <stdexcept>

namespace modabs {

std::string limit_kind_name(LimitKind kind) {
  switch (kind) {
    case LimitKind::Sigmoid: return "sigmoid";
    case LimitKind::Tanh: return "tanh";
    case LimitKind::None: return "none";
  }
  throw std::invalid_argument("unknown limit kind");
}

LimitKind limit_kind_from_name(const std::string& name) {
  if (name == "sigmoid") return LimitKind::Sigmoid;
  if (name == "tanh") return LimitKind::Tanh;
  if (name == "none") return LimitKind::None;
  throw std::invalid_argument("unknown limit kind '" + name + "'");
}

Var summarization_loss(Tape& tape, const std::vector<Var>& aspect_logits,
                       const TeacherForcing& tf) {
  const int n = static_cast<int>(aspect_logits.size());
  if (n == 0) throw std::invalid_argument("summarization_loss: no aspect slices");
  if (static_cast<int>(tf.labels.size()) != n)
    throw std::invalid_argument("summarization_loss: label slice count mismatch");
  if (tf.reference_count > n)
    throw std::invalid_argument("summarization_loss: reference aspect count exceeds slices");
  Var acc = tape.constant_scalar(0.0);
  for (int a = 0; a < n; ++a) {
    acc = add(acc, masked_mean_ce(aspect_logits[static_cast<size_t>(a)],
                                  tf.labels[static_cast<size_t>(a)],
                                  tf.label_mask[static_cast<size_t>(a)]));
  }
  return scalar_mul(acc, 1.0 / n);
}

Var divergence_loss(Tape& tape, const std::vector<Var>& aspect_logits,
                    const std::vector<std::vector<char>>& nonpad_mask,
                    const LossWeights& weights, bool* single_slice_warning) {
  const int n = static_cast<int>(aspect_logits.size());
  if (single_slice_warning) *single_slice_warning = false;
  if (n < 2) {
    if (single_slice_warning) *single_slice_warning = true;
    return tape.constant_scalar(0.0);
  }
  if (static_cast<int>(nonpad_mask.size()) != n)
    throw std::invalid_argument("divergence_loss: mask slice count mismatch");
  Var acc = tape.constant_scalar(0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto& mi = nonpad_mask[static_cast<size_t>(i)];
      const auto& mj = nonpad_mask[static_cast<size_t>(j)];
      std::vector<char> either(mi.size());
      for (size_t p = 0; p < mi.size(); ++p) either[p] = mi[p] || mj[p];
      Var pair_kl = masked_mean_kl_logits(aspect_logits[static_cast<size_t>(i)],
                                          aspect_logits[static_cast<size_t>(j)], either);
      acc = add(acc, apply_limit(pair_kl, weights.limit));
    }
  }
  return neg(scalar_mul(acc, 1.0 / n));
}

Var aspect_count_loss(Tape& tape, Var count_logits, int reference_count) {
  const Array& logits = tape.value(count_logits);
  const int n = logits.numel();
  if (reference_count < 1 || reference_count > n)
    throw std::invalid_argument("aspect_count_loss: reference count " +
                                std::to_string(reference_count) + " outside [1, " +
                                std::to_string(n) + "]");
  Var flat = logits.ndim() == 1 ? count_logits : reshape(count_logits, {n});
  return cross_entropy(flat, reference_count - 1);
}

namespace {

TotalLoss combine(Tape& tape, Var sum_s, std::optional<Var> sum_d, std::optional<Var> sum_a,
                  int batch_size, const LossWeights& weights) {
  const double inv = 1.0 / batch_size;
  Var s = scalar_mul(sum_s, inv);
  TotalLoss out{s, {}};
  out.breakdown.summarization = tape.value(s).item();
  Var total = scalar_mul(s, weights.lambda1);
  if (sum_d) {
    Var d = scalar_mul(*sum_d, inv);
    out.breakdown.divergence = tape.value(d).item();
    total = add(total, scalar_mul(d, weights.lambda2));
  }
  if (sum_a) {
    Var a = scalar_mul(*sum_a, inv);
    out.breakdown.aspect_count = tape.value(a).item();
    total = add(total, scalar_mul(a, weights.lambda3));
  }
  out.total = total;
  out.breakdown.total = tape.value(total).item();
  return out;
}

}  // namespace

TotalLoss total_loss_from_outputs(Tape& tape, const std::vector<DecodeVars>& outputs,
                                  const std::vector<TeacherForcing>& frames,
                                  const LossWeights& weights) {
  if (outputs.empty() || outputs.size() != frames.size())
    throw std::invalid_argument("total_loss: outputs/frames mismatch");
  const int batch = static_cast<int>(outputs.size());
  Var sum_s = tape.constant_scalar(0.0);
  std::optional<Var> sum_d, sum_a;
  if (weights.lambda2 != 0.0) sum_d = tape.constant_scalar(0.0);
  if (weights.lambda3 != 0.0) sum_a = tape.constant_scalar(0.0);
  for (int b = 0; b < batch; ++b) {
    const DecodeVars& dec = outputs[static_cast<size_t>(b)];
    const TeacherForcing& tf = frames[static_cast<size_t>(b)];
    sum_s = add(sum_s, summarization_loss(tape, dec.aspect_logits, tf));
    if (sum_d) *sum_d = add(*sum_d, divergence_loss(tape, dec.aspect_logits, tf.label_mask, weights));
    if (sum_a) *sum_a = add(*sum_a, aspect_count_loss(tape, dec.count_logits, tf.reference_count));
  }
  return combine(tape, sum_s, sum_d, sum_a, batch, weights);
}

TotalLoss total_loss(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                     std::span<const Sample* const> batch, const LossWeights& weights) {
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  std::vector<DecodeVars> outputs;
  std::vector<TeacherForcing> frames;
  outputs.reserve(batch.size());
  frames.reserve(batch.size());
  for (const Sample* sample : batch) {
    TeacherForcing tf = make_teacher_forcing(*sample, config);
    EncoderVars enc = encode_vars(tape, vars, config, sample->article_tokens());
    outputs.push_back(decode_vars(tape, vars, config, enc, tf.step_inputs));
    frames.push_back(std::move(tf));
  }
  return total_loss_from_outputs(tape, outputs, frames, weights);
}

}  // namespace modabs
