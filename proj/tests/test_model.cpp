#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "modabs/model.hpp"
#include "modabs/rng.hpp"

using namespace modabs;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 18;
  c.max_aspects = 3;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.num_heads = 3;
  c.max_source_len = 16;
  c.max_summary_len = 8;
  return c;
}

std::vector<std::vector<int>> bos_steps(const ModelConfig& c, int steps) {
  std::vector<std::vector<int>> out(static_cast<size_t>(steps),
                                    std::vector<int>(static_cast<size_t>(c.max_aspects), 5));
  out[0].assign(static_cast<size_t>(c.max_aspects), c.bos_id);
  for (int l = 1; l < steps; ++l)
    for (int a = 0; a < c.max_aspects; ++a)
      out[static_cast<size_t>(l)][static_cast<size_t>(a)] = 4 + ((l * 3 + a) % 20);
  return out;
}

}  // namespace

TEST_CASE("model config invariants are validated") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  ModelConfig bad = c;
  bad.d_model = 16;  // not divisible by 3 aspects
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.num_heads = 4;  // does not divide 18
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.eos_id = bad.bos_id;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.unk_id = 99;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("encode produces a (len, D) state matrix deterministically") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 1);
  const std::vector<int> source = {4, 5, 6, 7, 8};
  EncoderStates a = encode(source, params, c);
  EncoderStates b = encode(source, params, c);
  CHECK(a.states.shape() == std::vector<int>{5, c.d_model});
  CHECK(a.states == b.states);
  CHECK(a.states.all_finite());
}

TEST_CASE("pad tail positions are masked out of encoder attention") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 2);
  const std::vector<int> plain = {4, 5, 6};
  const std::vector<int> padded = {4, 5, 6, c.pad_id, c.pad_id};
  const std::vector<int> padded_longer = {4, 5, 6, c.pad_id, c.pad_id, c.pad_id};
  Array s0 = encode(plain, params, c).states;
  Array s1 = encode(padded, params, c).states;
  Array s2 = encode(padded_longer, params, c).states;
  for (int i = 0; i < 3; ++i) {
    for (int d = 0; d < c.d_model; ++d) {
      CHECK(std::fabs(s0.at2(i, d) - s1.at2(i, d)) <= 1e-10);
      CHECK(std::fabs(s1.at2(i, d) - s2.at2(i, d)) <= 1e-10);
    }
  }
}

TEST_CASE("encode rejects overlong and out-of-range inputs") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 3);
  std::vector<int> too_long(static_cast<size_t>(c.max_source_len) + 1, 4);
  CHECK_THROWS_AS(encode(too_long, params, c), std::invalid_argument);
  CHECK_THROWS_AS(encode({4, 99}, params, c), std::invalid_argument);
  CHECK_THROWS_AS(encode({}, params, c), std::invalid_argument);
}

TEST_CASE("decode emits the documented shapes") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 4);
  EncoderStates enc = encode({4, 5, 6, 7}, params, c);
  AspectDecoding dec = decode(bos_steps(c, 8), enc, params, c);
  CHECK(dec.embeddings.shape() == std::vector<int>{1, 8, 18});
  CHECK(dec.embeddings_reshaped.shape() == std::vector<int>{1, 8, 3, 6});
  CHECK(dec.token_logits.shape() == std::vector<int>{1, 3, 8, 32});
  CHECK(dec.count_logits.shape() == std::vector<int>{1, 3});
}

TEST_CASE("reshaped embeddings are a pure reindexing") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 5);
  EncoderStates enc = encode({4, 5, 6}, params, c);
  AspectDecoding dec = decode(bos_steps(c, 8), enc, params, c);
  CHECK(dec.embeddings.raw() == dec.embeddings_reshaped.raw());
  // element (0, 5, 2, 3) against E(0, 5, 2*D_n + 3)
  const int dn = c.d_aspect();
  const double lhs = dec.embeddings_reshaped.at(((5 * c.max_aspects) + 2) * dn + 3);
  const double rhs = dec.embeddings.at(5 * c.d_model + (2 * dn + 3));
  CHECK(lhs == rhs);
}

TEST_CASE("attention matches an independent per-position recomputation") {
  Rng rng(17);
  const int lq = 5, lk = 4, d = 8, heads = 2, hd = d / heads;
  auto randmat = [&](int r, int cc) {
    Array m({r, cc});
    for (int i = 0; i < m.numel(); ++i) m.at(i) = rng.normal(0.0, 0.5);
    return m;
  };
  Array x = randmat(lq, d), y = randmat(lk, d);
  AttentionParamsT<Array> p;
  p.wq = randmat(d, d);
  p.wk = randmat(d, d);
  p.wv = randmat(d, d);
  p.wo = randmat(d, d);
  p.bq = randmat(1, d).reshaped({d});
  p.bk = randmat(1, d).reshaped({d});
  p.bv = randmat(1, d).reshaped({d});
  p.bo = randmat(1, d).reshaped({d});

  Tape tape;
  AttentionParamsT<Var> pv;
  pv.wq = tape.constant(p.wq);
  pv.wk = tape.constant(p.wk);
  pv.wv = tape.constant(p.wv);
  pv.wo = tape.constant(p.wo);
  pv.bq = tape.constant(p.bq);
  pv.bk = tape.constant(p.bk);
  pv.bv = tape.constant(p.bv);
  pv.bo = tape.constant(p.bo);
  Array mask = Array::zeros({lq, lk});
  mask.at2(1, 3) = -1e9;  // arbitrary masked slot exercised by the oracle too
  Var out = multi_head_attention(tape, pv, tape.constant(x), tape.constant(y), mask, heads);

  // Independent recomputation of output row `pos` with plain loops.
  const int pos = 1;
  auto project_row = [&](const Array& in, int row, const Array& w, const Array& b, std::vector<double>& dst) {
    dst.assign(static_cast<size_t>(d), 0.0);
    for (int j = 0; j < d; ++j) {
      double acc = b.at(j);
      for (int i = 0; i < d; ++i) acc += in.at2(row, i) * w.at2(i, j);
      dst[static_cast<size_t>(j)] = acc;
    }
  };
  std::vector<double> qrow;
  project_row(x, pos, p.wq, p.bq, qrow);
  std::vector<std::vector<double>> krows(static_cast<size_t>(lk)), vrows(static_cast<size_t>(lk));
  for (int r = 0; r < lk; ++r) {
    project_row(y, r, p.wk, p.bk, krows[static_cast<size_t>(r)]);
    project_row(y, r, p.wv, p.bv, vrows[static_cast<size_t>(r)]);
  }
  std::vector<double> attended(static_cast<size_t>(d), 0.0);
  for (int h = 0; h < heads; ++h) {
    std::vector<double> scores(static_cast<size_t>(lk));
    for (int r = 0; r < lk; ++r) {
      double dot = 0.0;
      for (int i = 0; i < hd; ++i)
        dot += qrow[static_cast<size_t>(h * hd + i)] * krows[static_cast<size_t>(r)][static_cast<size_t>(h * hd + i)];
      scores[static_cast<size_t>(r)] = dot / std::sqrt(static_cast<double>(hd)) + mask.at2(pos, r);
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double denom = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      denom += s;
    }
    for (int r = 0; r < lk; ++r)
      for (int i = 0; i < hd; ++i)
        attended[static_cast<size_t>(h * hd + i)] +=
            scores[static_cast<size_t>(r)] / denom * vrows[static_cast<size_t>(r)][static_cast<size_t>(h * hd + i)];
  }
  for (int j = 0; j < d; ++j) {
    double acc = p.bo.at(j);
    for (int i = 0; i < d; ++i) acc += attended[static_cast<size_t>(i)] * p.wo.at2(i, j);
    CHECK(tape.value(out).at2(pos, j) == doctest::Approx(acc).epsilon(1e-10));
  }
}

TEST_CASE("causal masking: perturbing step t never changes earlier logits") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 6);
  EncoderStates enc = encode({4, 5, 6, 7, 8, 9}, params, c);
  auto steps = bos_steps(c, 8);
  AspectDecoding base = decode(steps, enc, params, c);
  for (int t : {3, 5, 7}) {
    auto perturbed = steps;
    perturbed[static_cast<size_t>(t)][1] = 21;
    AspectDecoding out = decode(perturbed, enc, params, c);
    for (int a = 0; a < c.max_aspects; ++a) {
      for (int l = 0; l < t; ++l) {
        for (int v = 0; v < c.vocab_size; ++v) {
          const int idx = ((a * 8) + l) * c.vocab_size + v;
          CHECK(out.token_logits.at(idx) == base.token_logits.at(idx));
        }
      }
    }
  }
}

TEST_CASE("token logits reuse one shared LM head across slices") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 7);
  EncoderStates enc = encode({4, 5, 6}, params, c);
  AspectDecoding dec = decode(bos_steps(c, 4), enc, params, c);
  const int dn = c.d_aspect();
  for (int a = 0; a < c.max_aspects; ++a) {
    for (int l = 0; l < 4; ++l) {
      for (int v = 0; v < c.vocab_size; ++v) {
        double acc = params.lm_head_bias.at(v);
        for (int i = 0; i < dn; ++i)
          acc += dec.embeddings.at(l * c.d_model + a * dn + i) * params.lm_head_weight.at2(i, v);
        const int idx = ((a * 4) + l) * c.vocab_size + v;
        CHECK(dec.token_logits.at(idx) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("predict_aspect_count returns a distribution over 1..N") {
  const ModelConfig c = tiny_config();
  ModelParameters params = init_parameters(c, 8);
  EncoderStates enc = encode({4, 5, 6}, params, c);
  AspectDecoding dec = decode(bos_steps(c, 3), enc, params, c);
  Array probs = predict_aspect_count(dec.embeddings_reshaped, params);
  REQUIRE(probs.numel() == c.max_aspects);
  double sum = 0.0;
  int best = 0;
  for (int i = 0; i < probs.numel(); ++i) {
    sum += probs.at(i);
    if (probs.at(i) > probs.at(best)) best = i;
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-12);
  CHECK(best + 1 >= 1);
  CHECK(best + 1 <= c.max_aspects);

  // Zero count head -> uniform distribution.
  ModelParameters zeroed = params;
  zeroed.count_head_weight = Array::zeros(zeroed.count_head_weight.shape());
  zeroed.count_head_bias = Array::zeros(zeroed.count_head_bias.shape());
  Array uniform = predict_aspect_count(dec.embeddings_reshaped, zeroed);
  for (int i = 0; i < uniform.numel(); ++i)
    CHECK(uniform.at(i) == doctest::Approx(1.0 / c.max_aspects).epsilon(1e-12));
}

TEST_CASE("count head consumes the first position across all slices") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 9);
  EncoderStates enc = encode({4, 5, 6}, params, c);
  AspectDecoding dec = decode(bos_steps(c, 5), enc, params, c);
  Array probs = predict_aspect_count(dec.embeddings_reshaped, params);
  Array from_decode = softmax(dec.count_logits.reshaped({c.max_aspects}), 0);
  for (int i = 0; i < probs.numel(); ++i)
    CHECK(probs.at(i) == doctest::Approx(from_decode.at(i)).epsilon(1e-12));
}

TEST_CASE("generate is deterministic and bounded") {
  const ModelConfig c = tiny_config();
  const ModelParameters params = init_parameters(c, 10);
  const std::vector<int> source = {4, 9, 14, 19};
  GenerationResult a = generate(source, params, c, c.max_summary_len);
  GenerationResult b = generate(source, params, c, c.max_summary_len);
  CHECK(a.slice_summaries == b.slice_summaries);
  CHECK(a.predicted_count == b.predicted_count);
  CHECK(a.reported == b.reported);
  CHECK(static_cast<int>(a.reported.size()) <= c.max_aspects);
  CHECK(a.predicted_count >= 1);
  CHECK(a.predicted_count <= c.max_aspects);
  for (const auto& summary : a.slice_summaries)
    CHECK(static_cast<int>(summary.size()) <= c.max_summary_len);
  CHECK_THROWS_AS(generate(source, params, c, c.max_summary_len + 1), std::invalid_argument);
}

TEST_CASE("teacher forcing frames references and pads unused slices") {
  ModelConfig c = tiny_config();
  Sample s;
  s.id = "tf-1";
  s.source_sentences = {{4, 5, 6}};
  s.aspects = {{"a", {7, 8}}, {"b", {9, 10, 11}}};
  TeacherForcing tf = make_teacher_forcing(s, c);
  CHECK(tf.reference_count == 2);
  REQUIRE(tf.step_inputs.size() == 4);  // longest reference (3) + EOS
  REQUIRE(tf.labels.size() == 3);
  // Slice 0: inputs BOS,7,8,PAD; labels 7,8,EOS,PAD masked on the tail.
  CHECK(tf.step_inputs[0][0] == c.bos_id);
  CHECK(tf.step_inputs[1][0] == 7);
  CHECK(tf.step_inputs[2][0] == 8);
  CHECK(tf.step_inputs[3][0] == c.pad_id);
  CHECK(tf.labels[0] == std::vector<int>{7, 8, c.eos_id, c.pad_id});
  CHECK(tf.label_mask[0] == std::vector<char>{1, 1, 1, 0});
  // Slice 1 uses all four steps.
  CHECK(tf.labels[1] == std::vector<int>{9, 10, 11, c.eos_id});
  // Unused slice 2 is supervised to emit EOS immediately.
  CHECK(tf.step_inputs[0][2] == c.bos_id);
  CHECK(tf.labels[2][0] == c.eos_id);
  CHECK(tf.label_mask[2] == std::vector<char>{1, 0, 0, 0});

  Sample crowded = s;
  crowded.aspects.push_back({"c", {12}});
  crowded.aspects.push_back({"d", {13}});
  CHECK_THROWS_AS(make_teacher_forcing(crowded, c), std::invalid_argument);
}

TEST_CASE("references longer than the decoder window are truncated with EOS kept") {
  ModelConfig c = tiny_config();
  c.max_summary_len = 4;
  Sample s;
  s.id = "tf-2";
  s.source_sentences = {{4}};
  s.aspects = {{"a", {7, 8, 9, 10, 11, 12}}, {"b", {7}}};
  TeacherForcing tf = make_teacher_forcing(s, c);
  REQUIRE(tf.step_inputs.size() == 4);
  CHECK(tf.labels[0] == std::vector<int>{7, 8, 9, c.eos_id});
  CHECK(tf.label_mask[0] == std::vector<char>{1, 1, 1, 1});
}
