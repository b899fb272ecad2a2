#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "modabs/autodiff.hpp"
#include "modabs/data.hpp"

namespace modabs {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 0;      // D, split into max_aspects slices of d_aspect
  int max_aspects = 0;  // N
  int num_encoder_layers = 1;
  int num_decoder_layers = 1;
  int num_heads = 2;
  int max_source_len = 64;
  int max_summary_len = 12;  // L, decoder positions
  int pad_id = Vocabulary::kPad;
  int bos_id = Vocabulary::kBos;
  int eos_id = Vocabulary::kEos;
  int unk_id = Vocabulary::kUnk;

  int d_aspect() const { return d_model / max_aspects; }
  int head_dim() const { return d_model / num_heads; }
  int ff_hidden() const { return 4 * d_model; }
  void validate() const;  // throws std::invalid_argument
};

// ---------------------------------------------------------------------------
// Parameters. The same structs hold Arrays (stored weights) or Vars (weights
// bound to a tape for one forward/backward pass).
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParamsT {
  T wq, wk, wv, wo;  // D×D each
  T bq, bk, bv, bo;  // D each
};

template <typename T>
struct LayerNormParamsT {
  T gain, bias;
};

template <typename T>
struct FeedForwardParamsT {
  T w1, b1, w2, b2;  // D×H, H, H×D, D
};

template <typename T>
struct EncoderLayerParamsT {
  LayerNormParamsT<T> ln_attn;
  AttentionParamsT<T> attn;
  LayerNormParamsT<T> ln_ff;
  FeedForwardParamsT<T> ff;
};

template <typename T>
struct DecoderLayerParamsT {
  LayerNormParamsT<T> ln_self;
  AttentionParamsT<T> self_attn;
  LayerNormParamsT<T> ln_cross;
  AttentionParamsT<T> cross_attn;
  LayerNormParamsT<T> ln_ff;
  FeedForwardParamsT<T> ff;
};

template <typename T>
struct ModelParametersT {
  T encoder_embedding;  // vocab × D
  T decoder_embedding;  // vocab × D_n, shared across aspect slices
  std::vector<EncoderLayerParamsT<T>> encoder_layers;
  std::vector<DecoderLayerParamsT<T>> decoder_layers;
  LayerNormParamsT<T> encoder_norm;
  LayerNormParamsT<T> decoder_norm;
  T lm_head_weight;     // D_n × vocab, shared across aspect slices
  T lm_head_bias;       // vocab
  T count_head_weight;  // D × N
  T count_head_bias;    // N
};

using ModelParameters = ModelParametersT<Array>;
using ModelVars = ModelParametersT<Var>;

/// Enumerates every parameter as (name, member) in a fixed order.
template <typename Params, typename F>
void for_each_param(Params& p, F&& f) {
  f("encoder_embedding", p.encoder_embedding);
  f("decoder_embedding", p.decoder_embedding);
  auto visit_ln = [&](const std::string& prefix, auto& ln) {
    f(prefix + ".gain", ln.gain);
    f(prefix + ".bias", ln.bias);
  };
  auto visit_attn = [&](const std::string& prefix, auto& a) {
    f(prefix + ".wq", a.wq);
    f(prefix + ".wk", a.wk);
    f(prefix + ".wv", a.wv);
    f(prefix + ".wo", a.wo);
    f(prefix + ".bq", a.bq);
    f(prefix + ".bk", a.bk);
    f(prefix + ".bv", a.bv);
    f(prefix + ".bo", a.bo);
  };
  auto visit_ff = [&](const std::string& prefix, auto& ff) {
    f(prefix + ".w1", ff.w1);
    f(prefix + ".b1", ff.b1);
    f(prefix + ".w2", ff.w2);
    f(prefix + ".b2", ff.b2);
  };
  for (size_t i = 0; i < p.encoder_layers.size(); ++i) {
    const std::string base = "encoder.layer" + std::to_string(i);
    auto& layer = p.encoder_layers[i];
    visit_ln(base + ".ln_attn", layer.ln_attn);
    visit_attn(base + ".attn", layer.attn);
    visit_ln(base + ".ln_ff", layer.ln_ff);
    visit_ff(base + ".ff", layer.ff);
  }
  for (size_t i = 0; i < p.decoder_layers.size(); ++i) {
    const std::string base = "decoder.layer" + std::to_string(i);
    auto& layer = p.decoder_layers[i];
    visit_ln(base + ".ln_self", layer.ln_self);
    visit_attn(base + ".self_attn", layer.self_attn);
    visit_ln(base + ".ln_cross", layer.ln_cross);
    visit_attn(base + ".cross_attn", layer.cross_attn);
    visit_ln(base + ".ln_ff", layer.ln_ff);
    visit_ff(base + ".ff", layer.ff);
  }
  visit_ln("encoder_norm", p.encoder_norm);
  visit_ln("decoder_norm", p.decoder_norm);
  f("lm_head.weight", p.lm_head_weight);
  f("lm_head.bias", p.lm_head_bias);
  f("count_head.weight", p.count_head_weight);
  f("count_head.bias", p.count_head_bias);
}

ModelParameters init_parameters(const ModelConfig& config, uint64_t seed);

/// Binds stored parameters to a tape as gradient-tracked leaves.
ModelVars bind_parameters(Tape& tape, const ModelParameters& params, bool requires_grad = true);

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Fixed sinusoidal position table, rows 0..len-1.
Array sinusoidal_positions(int len, int dim);

/// Attention over already-projected inputs: queries from `queries_in`,
/// keys/values from `keys_in`, additive mask added to the score matrix.
Var multi_head_attention(Tape& tape, const AttentionParamsT<Var>& p, Var queries_in,
                         Var keys_in, const Array& additive_mask, int num_heads);

struct EncoderVars {
  Var states;                // S × D
  std::vector<char> attend;  // per source position, false for PAD
};

EncoderVars encode_vars(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                        const std::vector<int>& source_tokens);

/// step_inputs[l] holds the N aspect-interleaved input ids for position l.
struct DecodeVars {
  Var embeddings;                 // steps × D
  Var embeddings_reshaped;        // steps × N × D_n (pure reindexing)
  std::vector<Var> aspect_logits; // N entries of steps × vocab
  Var count_logits;               // 1 × N
};

DecodeVars decode_vars(Tape& tape, const ModelVars& vars, const ModelConfig& config,
                       const EncoderVars& encoder, const std::vector<std::vector<int>>& step_inputs);

// ---------------------------------------------------------------------------
// Plain-array inference API (batch dimension fixed at 1)
// ---------------------------------------------------------------------------

struct EncoderStates {
  Array states;              // S × D
  std::vector<char> attend;
};

EncoderStates encode(const std::vector<int>& source_tokens, const ModelParameters& params,
                     const ModelConfig& config);

struct AspectDecoding {
  Array embeddings;           // 1 × L × D
  Array embeddings_reshaped;  // 1 × L × N × D_n
  Array token_logits;         // 1 × N × L × vocab
  Array count_logits;         // 1 × N
};

AspectDecoding decode(const std::vector<std::vector<int>>& step_inputs,
                      const EncoderStates& encoder, const ModelParameters& params,
                      const ModelConfig& config);

/// Distribution over {1..N} from the first decoded position's embedding
/// across all aspect slices.
Array predict_aspect_count(const Array& embeddings_reshaped, const ModelParameters& params);

// ---------------------------------------------------------------------------
// Greedy generation
// ---------------------------------------------------------------------------

struct GenerationResult {
  std::vector<std::vector<int>> slice_summaries;  // per slice, EOS excluded; may be empty
  int predicted_count = 0;                        // argmax of the count head + 1
  std::vector<std::vector<int>> reported;         // first predicted_count non-empty slices
};

/// All N slices advance in lockstep from a shared BOS; a slice ends at its
/// first EOS, and a slice whose first token is EOS is empty.
GenerationResult generate(const std::vector<int>& source_tokens, const ModelParameters& params,
                          const ModelConfig& config, int max_len);

// ---------------------------------------------------------------------------
// Teacher forcing
// ---------------------------------------------------------------------------

/// Reference framing for training: aspect j supervises slice j; slices past
/// the reference count are supervised to emit EOS immediately.
struct TeacherForcing {
  std::vector<std::vector<int>> step_inputs;   // steps × N, BOS-led
  std::vector<std::vector<int>> labels;        // N × steps, EOS-terminated, PAD-filled
  std::vector<std::vector<char>> label_mask;   // N × steps, false on PAD
  int reference_count = 0;
};

TeacherForcing make_teacher_forcing(const Sample& sample, const ModelConfig& config);

}  // namespace modabs
