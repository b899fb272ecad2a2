#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "modabs/grad_check.hpp"
#include "modabs/loss.hpp"
#include "modabs/rng.hpp"

using namespace modabs;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 18;
  c.max_aspects = 3;
  c.num_encoder_layers = 2;
  c.num_decoder_layers = 2;
  c.num_heads = 3;
  c.max_source_len = 16;
  c.max_summary_len = 8;
  return c;
}

Sample tiny_sample() {
  Sample s;
  s.id = "loss-1";
  s.source_sentences = {{4, 5, 6, 7}, {8, 9, 10, 7}};
  s.aspects = {{"a", {4, 5}}, {"b", {8, 9, 10}}};
  return s;
}

// Logits that put (near-)probability 1 on the wanted token at every position.
Array confident_logits(int steps, int vocab, const std::vector<int>& wanted) {
  Array logits({steps, vocab});
  for (int l = 0; l < steps; ++l) logits.at2(l, wanted[static_cast<size_t>(l)]) = 1000.0;
  return logits;
}

TeacherForcing frame_all_unmasked(int n, int steps, int vocab_target) {
  TeacherForcing tf;
  tf.reference_count = n;
  tf.step_inputs.assign(static_cast<size_t>(steps), std::vector<int>(static_cast<size_t>(n), 1));
  tf.labels.assign(static_cast<size_t>(n), std::vector<int>(static_cast<size_t>(steps), vocab_target));
  tf.label_mask.assign(static_cast<size_t>(n), std::vector<char>(static_cast<size_t>(steps), 1));
  return tf;
}

}  // namespace

TEST_CASE("summarization loss is zero under perfect prediction") {
  Tape tape;
  const int steps = 4, vocab = 16, n = 2;
  TeacherForcing tf;
  tf.reference_count = n;
  tf.labels = {{4, 5, 2, 0}, {6, 2, 0, 0}};
  tf.label_mask = {{1, 1, 1, 0}, {1, 1, 0, 0}};
  std::vector<Var> logits;
  for (int a = 0; a < n; ++a)
    logits.push_back(tape.leaf(confident_logits(steps, vocab, tf.labels[static_cast<size_t>(a)])));
  Var loss = summarization_loss(tape, logits, tf);
  CHECK(tape.value(loss).item() == 0.0);
}

TEST_CASE("summarization loss matches the uniform-logits scalar oracle") {
  Tape tape;
  const int steps = 5, vocab = 32, n = 3;
  TeacherForcing tf = frame_all_unmasked(n, steps, 7);
  std::vector<Var> logits;
  for (int a = 0; a < n; ++a) logits.push_back(tape.leaf(Array::zeros({steps, vocab})));
  Var loss = summarization_loss(tape, logits, tf);
  // Every position costs ln 32; per-aspect masked mean is ln 32; summed over
  // N slices and divided by N it stays ln 32.
  CHECK(tape.value(loss).item() == doctest::Approx(std::log(32.0)).epsilon(1e-12));
}

TEST_CASE("doubling N with perfectly-predicted EOS slices halves the loss") {
  Tape tape;
  const int steps = 3, vocab = 16;
  TeacherForcing small = frame_all_unmasked(2, steps, 6);
  std::vector<Var> logits2 = {tape.leaf(Array::zeros({steps, vocab})),
                              tape.leaf(Array::zeros({steps, vocab}))};
  const double base = tape.value(summarization_loss(tape, logits2, small)).item();

  TeacherForcing doubled = small;
  doubled.labels.push_back({2, 0, 0});
  doubled.labels.push_back({2, 0, 0});
  doubled.label_mask.push_back({1, 0, 0});
  doubled.label_mask.push_back({1, 0, 0});
  std::vector<Var> logits4 = logits2;
  logits4.push_back(tape.leaf(confident_logits(steps, vocab, {2, 2, 2})));
  logits4.push_back(tape.leaf(confident_logits(steps, vocab, {2, 2, 2})));
  const double grown = tape.value(summarization_loss(tape, logits4, doubled)).item();
  CHECK(grown == doctest::Approx(base / 2.0).epsilon(1e-12));
}

TEST_CASE("divergence loss on tied slices") {
  Tape tape;
  const int steps = 4, vocab = 12, n = 3;
  Rng rng(3);
  Array shared({steps, vocab});
  for (int i = 0; i < shared.numel(); ++i) shared.at(i) = rng.normal(0.0, 1.0);
  std::vector<Var> logits;
  for (int a = 0; a < n; ++a) logits.push_back(tape.leaf(shared));
  std::vector<std::vector<char>> mask(n, std::vector<char>(steps, 1));

  LossWeights tanh_w;
  tanh_w.limit = LimitKind::Tanh;
  CHECK(tape.value(divergence_loss(tape, logits, mask, tanh_w)).item() == 0.0);

  LossWeights sig_w;
  sig_w.limit = LimitKind::Sigmoid;
  const double v = tape.value(divergence_loss(tape, logits, mask, sig_w)).item();
  CHECK(v == doctest::Approx(-0.5 * (n - 1)).epsilon(1e-12));
  CHECK(v == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("divergence loss approaches -2/N for peaked disjoint slices") {
  Tape tape;
  const int steps = 3, vocab = 10, n = 2;
  std::vector<Var> logits = {tape.leaf(confident_logits(steps, vocab, {3, 3, 3})),
                             tape.leaf(confident_logits(steps, vocab, {7, 7, 7}))};
  std::vector<std::vector<char>> mask(n, std::vector<char>(steps, 1));
  LossWeights w;
  w.limit = LimitKind::Tanh;
  const double v = tape.value(divergence_loss(tape, logits, mask, w)).item();
  // Scalar oracle: each ordered pair's mean KL is the KL between the two
  // peaked softmax distributions, large enough that tanh saturates to 1.
  Array pa = softmax(confident_logits(1, vocab, {3}).reshaped({vocab}), 0);
  Array pb = softmax(confident_logits(1, vocab, {7}).reshaped({vocab}), 0);
  const double expected = -(std::tanh(kl_divergence(pa, pb)) + std::tanh(kl_divergence(pb, pa))) / n;
  CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  CHECK(v == doctest::Approx(-2.0 / n).epsilon(1e-6));
}

TEST_CASE("divergence loss with one slice returns zero and warns") {
  Tape tape;
  std::vector<Var> logits = {tape.leaf(Array::zeros({3, 8}))};
  std::vector<std::vector<char>> mask = {{1, 1, 1}};
  bool warned = false;
  Var v = divergence_loss(tape, logits, mask, LossWeights{}, &warned);
  CHECK(tape.value(v).item() == 0.0);
  CHECK(warned);
}

TEST_CASE("divergence loss is invariant to swapping identical slices") {
  Tape tape;
  Rng rng(11);
  const int steps = 4, vocab = 9;
  Array a({steps, vocab}), b({steps, vocab});
  for (int i = 0; i < a.numel(); ++i) a.at(i) = rng.normal(0.0, 1.0);
  for (int i = 0; i < b.numel(); ++i) b.at(i) = rng.normal(0.0, 1.0);
  std::vector<std::vector<char>> mask(3, std::vector<char>(steps, 1));
  LossWeights w;
  std::vector<Var> fwd = {tape.leaf(a), tape.leaf(b), tape.leaf(b)};
  std::vector<Var> swapped = {tape.leaf(a), tape.leaf(b), tape.leaf(b)};
  std::swap(swapped[1], swapped[2]);
  CHECK(tape.value(divergence_loss(tape, fwd, mask, w)).item() ==
        tape.value(divergence_loss(tape, swapped, mask, w)).item());
}

TEST_CASE("pad-only position pairs are excluded from the KL average") {
  Tape tape;
  const int steps = 2, vocab = 6;
  Rng rng(13);
  Array a({steps, vocab}), b({steps, vocab});
  for (int i = 0; i < a.numel(); ++i) a.at(i) = rng.normal(0.0, 1.0);
  for (int i = 0; i < b.numel(); ++i) b.at(i) = rng.normal(0.0, 1.0);
  // Mask second position off in both slices: result must match a single-step
  // computation regardless of what the logits say there.
  std::vector<Var> two_step = {tape.leaf(a), tape.leaf(b)};
  std::vector<std::vector<char>> mask = {{1, 0}, {1, 0}};
  LossWeights w;
  w.limit = LimitKind::None;
  const double full = tape.value(divergence_loss(tape, two_step, mask, w)).item();
  Array a1({1, vocab}), b1({1, vocab});
  for (int i = 0; i < vocab; ++i) {
    a1.at(i) = a.at(i);
    b1.at(i) = b.at(i);
  }
  std::vector<Var> one_step = {tape.leaf(a1), tape.leaf(b1)};
  std::vector<std::vector<char>> mask1 = {{1}, {1}};
  CHECK(full == doctest::Approx(tape.value(divergence_loss(tape, one_step, mask1, w)).item()).epsilon(1e-12));
}

TEST_CASE("aspect count loss oracle values") {
  Tape tape;
  SUBCASE("uniform logits cost ln N") {
    Var logits = tape.leaf(Array::zeros({4}));
    CHECK(tape.value(aspect_count_loss(tape, logits, 2)).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct prediction costs ~0") {
    Array l({4});
    l.at(2) = 1e3;
    Var logits = tape.leaf(l);
    CHECK(tape.value(aspect_count_loss(tape, logits, 3)).item() == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("random logits match the scalar oracle") {
    Rng rng(5);
    Array l({3});
    for (int i = 0; i < 3; ++i) l.at(i) = rng.normal(0.0, 2.0);
    Var logits = tape.leaf(l);
    const double expected = -std::log(softmax(l, 0).at(1));
    CHECK(tape.value(aspect_count_loss(tape, logits, 2)).item() ==
          doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("out-of-range reference count is an argument error") {
    Var logits = tape.leaf(Array::zeros({3}));
    CHECK_THROWS_AS(aspect_count_loss(tape, logits, 0), std::invalid_argument);
    CHECK_THROWS_AS(aspect_count_loss(tape, logits, 4), std::invalid_argument);
  }
}

TEST_CASE("total loss reduces to the summarization term when extras are off") {
  const ModelConfig config = tiny_config();
  const ModelParameters params = init_parameters(config, 21);
  const Sample sample = tiny_sample();
  Tape tape;
  ModelVars vars = bind_parameters(tape, params);
  const Sample* batch[] = {&sample};
  LossWeights w;
  w.lambda2 = 0.0;
  w.lambda3 = 0.0;
  TotalLoss out = total_loss(tape, vars, config, batch, w);
  CHECK(out.breakdown.total == out.breakdown.summarization);
  CHECK(out.breakdown.divergence == 0.0);
  CHECK(out.breakdown.aspect_count == 0.0);
}

TEST_CASE("total loss is the exact weighted sum of its components") {
  const ModelConfig config = tiny_config();
  const ModelParameters params = init_parameters(config, 22);
  const Sample sample = tiny_sample();
  Tape tape;
  ModelVars vars = bind_parameters(tape, params);
  const Sample* batch[] = {&sample};
  LossWeights w;
  w.lambda1 = 1.0;
  w.lambda2 = 0.5;
  w.lambda3 = 0.1;
  w.limit = LimitKind::Sigmoid;
  TotalLoss out = total_loss(tape, vars, config, batch, w);
  const double combined = w.lambda1 * out.breakdown.summarization +
                          w.lambda2 * out.breakdown.divergence +
                          w.lambda3 * out.breakdown.aspect_count;
  CHECK(std::fabs(out.breakdown.total - combined) <= 1e-12);
  CHECK(out.breakdown.summarization >= 0.0);
  CHECK(out.breakdown.aspect_count >= 0.0);
  CHECK(out.breakdown.divergence <= 0.0);
}

TEST_CASE("zero-weight terms leave no gradient in their heads") {
  const ModelConfig config = tiny_config();
  const ModelParameters params = init_parameters(config, 23);
  const Sample sample = tiny_sample();

  SUBCASE("count head untouched when lambda3 = 0") {
    Tape tape;
    ModelVars vars = bind_parameters(tape, params);
    const Sample* batch[] = {&sample};
    LossWeights w;  // lambda2 = lambda3 = 0
    TotalLoss out = total_loss(tape, vars, config, batch, w);
    tape.backward(out.total);
    const Array& g = tape.grad(vars.count_head_weight);
    for (int i = 0; i < g.numel(); ++i) CHECK(g.at(i) == 0.0);
    const Array& gb = tape.grad(vars.count_head_bias);
    for (int i = 0; i < gb.numel(); ++i) CHECK(gb.at(i) == 0.0);
  }

  SUBCASE("embedding gradients flow through the remaining terms when lambda1 = 0") {
    Tape tape;
    ModelVars vars = bind_parameters(tape, params);
    const Sample* batch[] = {&sample};
    LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.5;
    w.lambda3 = 0.5;
    TotalLoss out = total_loss(tape, vars, config, batch, w);
    tape.backward(out.total);
    double dec_norm = 0.0, enc_norm = 0.0;
    const Array& gd = tape.grad(vars.decoder_embedding);
    for (int i = 0; i < gd.numel(); ++i) dec_norm += gd.at(i) * gd.at(i);
    const Array& ge = tape.grad(vars.encoder_embedding);
    for (int i = 0; i < ge.numel(); ++i) enc_norm += ge.at(i) * ge.at(i);
    CHECK(dec_norm > 0.0);
    CHECK(enc_norm > 0.0);
  }
}

TEST_CASE("total loss gradients agree with finite differences on a tiny model") {
  ModelConfig config = tiny_config();
  config.num_encoder_layers = 1;
  config.num_decoder_layers = 1;
  const ModelParameters params = init_parameters(config, 24);
  const Sample sample = tiny_sample();

  std::vector<Array> flat;
  std::vector<std::string> names;
  for_each_param(params, [&](const std::string& name, const Array& a) {
    flat.push_back(a);
    names.push_back(name);
  });
  for (LimitKind limit : {LimitKind::Sigmoid, LimitKind::Tanh}) {
    LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 0.5;
    w.lambda3 = 0.5;
    w.limit = limit;
    auto f = [&](Tape& tape, const std::vector<Var>& vs) {
      ModelVars vars;
      vars.encoder_layers.resize(params.encoder_layers.size());
      vars.decoder_layers.resize(params.decoder_layers.size());
      std::vector<Var*> slots;
      for_each_param(vars, [&](const std::string&, Var& v) { slots.push_back(&v); });
      REQUIRE(slots.size() == vs.size());
      for (size_t i = 0; i < vs.size(); ++i) *slots[i] = vs[i];
      const Sample* batch[] = {&sample};
      return total_loss(tape, vars, config, batch, w).total;
    };
    auto report = grad_check(f, flat, names, 1e-5);
    CHECK(report.max_rel_error <= 1e-4);
  }
}
