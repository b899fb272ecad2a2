#include "modabs/model.hpp"

#include <algorithm>
#include <cmath>

#include "modabs/rng.hpp"

namespace modabs {

namespace {
constexpr double kMaskedScore = -1e9;
constexpr double kInitStd = 0.08;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size < 5) fail("vocab_size must cover the four special ids plus content");
  if (d_model <= 0 || max_aspects <= 0) fail("d_model and max_aspects must be positive");
  if (d_model % max_aspects != 0) fail("d_model must be divisible by max_aspects");
  if (num_heads <= 0 || d_model % num_heads != 0) fail("num_heads must divide d_model");
  if (num_encoder_layers < 1 || num_decoder_layers < 1) fail("layer counts must be >= 1");
  if (max_source_len < 1 || max_summary_len < 1) fail("sequence length bounds must be >= 1");
  const int ids[4] = {pad_id, bos_id, eos_id, unk_id};
  for (int i = 0; i < 4; ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size) fail("special token id out of range");
    for (int j = i + 1; j < 4; ++j)
      if (ids[i] == ids[j]) fail("special token ids must be distinct");
  }
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

namespace {

Array normal_array(std::vector<int> shape, Rng& rng, double std) {
  Array a(std::move(shape));
  for (int i = 0; i < a.numel(); ++i) a.at(i) = rng.normal(0.0, std);
  return a;
}

LayerNormParamsT<Array> init_layer_norm(int dim) {
  return {Array::full({dim}, 1.0), Array::zeros({dim})};
}

AttentionParamsT<Array> init_attention(int dim, Rng& rng) {
  AttentionParamsT<Array> p;
  p.wq = normal_array({dim, dim}, rng, kInitStd);
  p.wk = normal_array({dim, dim}, rng, kInitStd);
  p.wv = normal_array({dim, dim}, rng, kInitStd);
  p.wo = normal_array({dim, dim}, rng, kInitStd);
  p.bq = Array::zeros({dim});
  p.bk = Array::zeros({dim});
  p.bv = Array::zeros({dim});
  p.bo = Array::zeros({dim});
  return p;
}

FeedForwardParamsT<Array> init_ff(int dim, int hidden, Rng& rng) {
  FeedForwardParamsT<Array> p;
  p.w1 = normal_array({dim, hidden}, rng, kInitStd);
  p.b1 = Array::zeros({hidden});
  p.w2 = normal_array({hidden, dim}, rng, kInitStd);
  p.b2 = Array::zeros({dim});
  return p;
}

}  // namespace

ModelParameters init_parameters(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int d = config.d_model;
  ModelParameters p;
  p.encoder_embedding = normal_array({config.vocab_size, d}, rng, kInitStd);
  p.decoder_embedding = normal_array({config.vocab_size, config.d_aspect()}, rng, kInitStd);
  for (int i = 0; i < config.num_encoder_layers; ++i) {
    EncoderLayerParamsT<Array> layer;
    layer.ln_attn = init_layer_norm(d);
    layer.attn = init_attention(d, rng);
    layer.ln_ff = init_layer_norm(d);
    layer.ff = init_ff(d, config.ff_hidden(), rng);
    p.encoder_layers.push_back(std::move(layer));
  }
  for (int i = 0; i < config.num_decoder_layers; ++i) {
    DecoderLayerParamsT<Array> layer;
    layer.ln_self = init_layer_norm(d);
    layer.self_attn = init_attention(d, rng);
    layer.ln_cross = init_layer_norm(d);
    layer.cross_attn = init_attention(d, rng);
    layer.ln_ff = init_layer_norm(d);
    layer.ff = init_ff(d, config.ff_hidden(), rng);
    p.decoder_layers.push_back(std::move(layer));
  }
  p.encoder_norm = init_layer_norm(d);
  p.decoder_norm = init_layer_norm(d);
  p.lm_head_weight = normal_array({config.d_aspect(), config.vocab_size}, rng, kInitStd);
  p.lm_head_bias = Array::zeros({config.vocab_size});
  p.count_head_weight = normal_array({d, config.max_aspects}, rng, kInitStd);
  p.count_head_bias = Array::zeros({config.max_aspects});
  return p;
}

ModelVars bind_parameters(Tape& tape, const ModelParameters& params, bool requires_grad) {
  ModelVars vars;
  vars.encoder_layers.resize(params.encoder_layers.size());
  vars.decoder_layers.resize(params.decoder_layers.size());
  std::vector<Var*> slots;
  for_each_param(vars, [&](const std::string&, Var& v) { slots.push_back(&v); });
  size_t i = 0;
  for_each_param(params, [&](const std::string&, const Array& a) {
    *slots[i++] = tape.leaf(a, requires_grad);
  });
  return vars;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

Array sinusoidal_positions(int len, int dim) {
  Array pe({len, dim});
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double rate = std::pow(10000.0, static_cast<double>(i) / dim);
      pe.at2(pos, i) = std::sin(pos / rate);
      if (i + 1 < dim) pe.at2(pos, i + 1) = std::cos(pos / rate);
    }
  }
  return pe;
}

Var multi_head_attention(Tape& tape, const AttentionParamsT<Var>& p, Var queries_in,
                         Var keys_in, const Array& additive_mask, int num_heads) {
  const int d = tape.value(queries_in).dim(1);
  const int head_dim = d / num_heads;
  Var q = add_row_broadcast(matmul(queries_in, p.wq), p.bq);
  Var k = add_row_broadcast(matmul(keys_in, p.wk), p.bk);
  Var v = add_row_broadcast(matmul(keys_in, p.wv), p.bv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Var mask = tape.constant(additive_mask);
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    Var qh = slice_cols(q, h * head_dim, head_dim);
    Var kh = slice_cols(k, h * head_dim, head_dim);
    Var vh = slice_cols(v, h * head_dim, head_dim);
    Var scores = add(scalar_mul(matmul(qh, transpose(kh)), scale), mask);
    Var attn = softmax(scores, 1);
    heads.push_back(matmul(attn, vh));
  }
  return add_row_broadcast(matmul(concat_cols(heads), p.wo), p.bo);
}

namespace {

Array padding_mask(int query_len, const std::vector<char>& attend) {
  Array mask({query_len, static_cast<int>(attend.size())});
  for (int i = 0; i < query_len; ++i)
    for (size_t j = 0; j < attend.size(); ++j)
      if (!attend[j]) mask.at2(i, static_cast<int>(j)) = kMaskedScore;
  return mask;
}

Array causal_mask(int len) {
  Array mask({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) mask.at2(i, j) = kMaskedScore;
  return mask;
}

Var feed_forward(const FeedForwardParamsT<Var>& p, Var x) {
  Var h = gelu(add_row_broadcast(matmul(x, p.w1), p.b1));
  return add_row_broadcast(matmul(h, p.w2), p.b2);
}

void check_finite(Tape& tape, Var x, const char* stage, int layer) {
  if (!tape.value(x).all_finite())
    throw std::runtime_error(std::string(stage) + " layer " + std::to_string(layer) +
                             ": non-finite activation");
}

void check_tokens(const std::vector<int>& tokens, const ModelConfig& config, const char* what) {
  for (int id : tokens)
    if (id < 0 || id >= config.vocab_size)
      throw std::invalid_argument(std::string(what) + ": token id out of range");
}

}  // namespace

EncoderVars encode_vars(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                        const std::vector<int>& source_tokens) {
  if (source_tokens.empty()) throw std::invalid_argument("encode: empty source");
  if (static_cast<int>(source_tokens.size()) > config.max_source_len)
    throw std::invalid_argument("encode: source longer than max_source_len (" +
                                std::to_string(source_tokens.size()) + " > " +
                                std::to_string(config.max_source_len) + "); truncate upstream");
  check_tokens(source_tokens, config, "encode");
  const int s = static_cast<int>(source_tokens.size());
  EncoderVars out;
  out.attend.resize(static_cast<size_t>(s));
  for (int i = 0; i < s; ++i) out.attend[static_cast<size_t>(i)] = source_tokens[static_cast<size_t>(i)] != config.pad_id;

  Var x = add(gather_rows(vars.encoder_embedding, source_tokens),
              tape.constant(sinusoidal_positions(s, config.d_model)));
  const Array mask = padding_mask(s, out.attend);
  for (size_t i = 0; i < vars.encoder_layers.size(); ++i) {
    const auto& layer = vars.encoder_layers[i];
    Var normed = layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias);
    x = add(x, multi_head_attention(tape, layer.attn, normed, normed, mask, config.num_heads));
    Var normed_ff = layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias);
    x = add(x, feed_forward(layer.ff, normed_ff));
    check_finite(tape, x, "encoder", static_cast<int>(i));
  }
  out.states = layer_norm(x, vars.encoder_norm.gain, vars.encoder_norm.bias);
  return out;
}

DecodeVars decode_vars(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                       const EncoderVars& encoder, const std::vector<std::vector<int>>& step_inputs) {
  const int steps = static_cast<int>(step_inputs.size());
  const int n = config.max_aspects;
  if (steps < 1) throw std::invalid_argument("decode: need at least one step");
  if (steps > config.max_summary_len)
    throw std::invalid_argument("decode: step count exceeds max_summary_len");
  std::vector<int> flat_ids;
  flat_ids.reserve(static_cast<size_t>(steps) * n);
  for (const auto& step : step_inputs) {
    if (static_cast<int>(step.size()) != n)
      throw std::invalid_argument("decode: each step must carry one id per aspect slice");
    flat_ids.insert(flat_ids.end(), step.begin(), step.end());
  }
  check_tokens(flat_ids, config, "decode");

  // Row l of the input embedding is the concatenation of the N aspect-slice
  // embeddings for step l, mirroring the output reshape.
  Var emb = reshape(gather_rows(vars.decoder_embedding, flat_ids), {steps, config.d_model});
  Var x = add(emb, tape.constant(sinusoidal_positions(steps, config.d_model)));

  const Array self_mask = causal_mask(steps);
  const Array cross_mask = padding_mask(steps, encoder.attend);
  for (size_t i = 0; i < vars.decoder_layers.size(); ++i) {
    const auto& layer = vars.decoder_layers[i];
    Var normed_self = layer_norm(x, layer.ln_self.gain, layer.ln_self.bias);
    x = add(x, multi_head_attention(tape, layer.self_attn, normed_self, normed_self, self_mask,
                                    config.num_heads));
    Var normed_cross = layer_norm(x, layer.ln_cross.gain, layer.ln_cross.bias);
    x = add(x, multi_head_attention(tape, layer.cross_attn, normed_cross, encoder.states,
                                    cross_mask, config.num_heads));
    Var normed_ff = layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias);
    x = add(x, feed_forward(layer.ff, normed_ff));
    check_finite(tape, x, "decoder", static_cast<int>(i));
  }

  DecodeVars out;
  out.embeddings = layer_norm(x, vars.decoder_norm.gain, vars.decoder_norm.bias);
  out.embeddings_reshaped = reshape(out.embeddings, {steps, n, config.d_aspect()});
  out.aspect_logits.reserve(static_cast<size_t>(n));
  for (int a = 0; a < n; ++a) {
    Var slice = slice_cols(out.embeddings, a * config.d_aspect(), config.d_aspect());
    out.aspect_logits.push_back(
        add_row_broadcast(matmul(slice, vars.lm_head_weight), vars.lm_head_bias));
  }
  out.count_logits = add_row_broadcast(matmul(slice_rows(out.embeddings, 0, 1), vars.count_head_weight),
                                       vars.count_head_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Plain-array API
// ---------------------------------------------------------------------------

EncoderStates encode(const std::vector<int>& source_tokens, const ModelParameters& params,
                     const ModelConfig& config) {
  Tape tape;
  ModelVars vars = bind_parameters(tape, params, false);
  EncoderVars enc = encode_vars(tape, vars, config, source_tokens);
  return {tape.value(enc.states), enc.attend};
}

AspectDecoding decode(const std::vector<std::vector<int>>& step_inputs,
                      const EncoderStates& encoder, const ModelParameters& params,
                      const ModelConfig& config) {
  Tape tape;
  ModelVars vars = bind_parameters(tape, params, false);
  EncoderVars enc{tape.constant(encoder.states), encoder.attend};
  DecodeVars dec = decode_vars(tape, vars, config, enc, step_inputs);

  const int steps = static_cast<int>(step_inputs.size());
  const int n = config.max_aspects;
  AspectDecoding out;
  out.embeddings = tape.value(dec.embeddings).reshaped({1, steps, config.d_model});
  out.embeddings_reshaped =
      tape.value(dec.embeddings_reshaped).reshaped({1, steps, n, config.d_aspect()});
  out.token_logits = Array({1, n, steps, config.vocab_size});
  for (int a = 0; a < n; ++a) {
    const Array& logits = tape.value(dec.aspect_logits[static_cast<size_t>(a)]);
    std::copy_n(logits.data(), logits.numel(),
                out.token_logits.data() + static_cast<size_t>(a) * logits.numel());
  }
  out.count_logits = tape.value(dec.count_logits).reshaped({1, n});
  return out;
}

Array predict_aspect_count(const Array& embeddings_reshaped, const ModelParameters& params) {
  const int d = params.count_head_weight.dim(0);
  const int n = params.count_head_weight.dim(1);
  if (embeddings_reshaped.numel() < d)
    throw std::invalid_argument("predict_aspect_count: no decoded position available");
  // First decoded position across all aspect slices: the leading D values in
  // row-major order.
  Array logits({n});
  for (int j = 0; j < n; ++j) {
    double acc = params.count_head_bias.at(j);
    for (int i = 0; i < d; ++i) acc += embeddings_reshaped.at(i) * params.count_head_weight.at2(i, j);
    logits.at(j) = acc;
  }
  return softmax(logits, 0);
}

// ---------------------------------------------------------------------------
// Greedy generation
// ---------------------------------------------------------------------------

namespace {

int argmax_row(const Array& mat, int row) {
  const int cols = mat.dim(1);
  int best = 0;
  double best_v = mat.at2(row, 0);
  for (int j = 1; j < cols; ++j) {
    if (mat.at2(row, j) > best_v) {
      best_v = mat.at2(row, j);
      best = j;
    }
  }
  return best;
}

}  // namespace

GenerationResult generate(const std::vector<int>& source_tokens, const ModelParameters& params,
                          const ModelConfig& config, int max_len) {
  if (max_len < 1 || max_len > config.max_summary_len)
    throw std::invalid_argument("generate: max_len must be in [1, max_summary_len]");
  const int n = config.max_aspects;
  EncoderStates enc = encode(source_tokens, params, config);

  GenerationResult result;
  result.slice_summaries.assign(static_cast<size_t>(n), {});
  std::vector<char> finished(static_cast<size_t>(n), 0);
  std::vector<std::vector<int>> steps = {std::vector<int>(static_cast<size_t>(n), config.bos_id)};

  for (int t = 0; t < max_len; ++t) {
    Tape tape;
    ModelVars vars = bind_parameters(tape, params, false);
    EncoderVars enc_vars{tape.constant(enc.states), enc.attend};
    DecodeVars dec = decode_vars(tape, vars, config, enc_vars, steps);
    if (t == 0) {
      const Array probs = softmax(tape.value(dec.count_logits).reshaped({n}), 0);
      int best = 0;
      for (int j = 1; j < n; ++j)
        if (probs.at(j) > probs.at(best)) best = j;
      result.predicted_count = best + 1;
    }
    std::vector<int> next(static_cast<size_t>(n), config.pad_id);
    bool all_done = true;
    for (int a = 0; a < n; ++a) {
      if (finished[static_cast<size_t>(a)]) continue;
      const int tok = argmax_row(tape.value(dec.aspect_logits[static_cast<size_t>(a)]), t);
      if (tok == config.eos_id) {
        finished[static_cast<size_t>(a)] = 1;
      } else {
        result.slice_summaries[static_cast<size_t>(a)].push_back(tok);
        next[static_cast<size_t>(a)] = tok;
        all_done = false;
      }
    }
    if (all_done || t + 1 >= max_len) break;
    steps.push_back(std::move(next));
  }

  for (const auto& summary : result.slice_summaries) {
    if (static_cast<int>(result.reported.size()) >= result.predicted_count) break;
    if (!summary.empty()) result.reported.push_back(summary);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Teacher forcing
// ---------------------------------------------------------------------------

TeacherForcing make_teacher_forcing(const Sample& sample, const ModelConfig& config) {
  const int n = config.max_aspects;
  const int k = sample.aspect_count();
  if (k > n)
    throw std::invalid_argument("teacher forcing: sample " + sample.id + " has " +
                                std::to_string(k) + " aspects but the model caps at " +
                                std::to_string(n) + "; preprocessing must filter");
  // Steps: longest reference plus its EOS, capped at the decoder window.
  int steps = 1;
  for (const Aspect& a : sample.aspects)
    steps = std::max(steps, static_cast<int>(a.summary.size()) + 1);
  steps = std::min(steps, config.max_summary_len);

  TeacherForcing tf;
  tf.reference_count = k;
  tf.step_inputs.assign(static_cast<size_t>(steps), std::vector<int>(static_cast<size_t>(n), config.pad_id));
  tf.labels.assign(static_cast<size_t>(n), std::vector<int>(static_cast<size_t>(steps), config.pad_id));
  tf.label_mask.assign(static_cast<size_t>(n), std::vector<char>(static_cast<size_t>(steps), 0));
  for (int a = 0; a < n; ++a) {
    std::vector<int> reference;  // tokens without framing; empty for unused slices
    if (a < k) {
      reference = sample.aspects[static_cast<size_t>(a)].summary;
      if (static_cast<int>(reference.size()) > steps - 1) reference.resize(static_cast<size_t>(steps - 1));
    }
    tf.step_inputs[0][static_cast<size_t>(a)] = config.bos_id;
    for (size_t i = 0; i < reference.size(); ++i) {
      tf.labels[static_cast<size_t>(a)][i] = reference[i];
      tf.label_mask[static_cast<size_t>(a)][i] = 1;
      if (i + 1 < static_cast<size_t>(steps)) tf.step_inputs[i + 1][static_cast<size_t>(a)] = reference[i];
    }
    const size_t eos_pos = reference.size();
    if (eos_pos < static_cast<size_t>(steps)) {
      tf.labels[static_cast<size_t>(a)][eos_pos] = config.eos_id;
      tf.label_mask[static_cast<size_t>(a)][eos_pos] = 1;
    }
  }
  return tf;
}

}  // namespace modabs
