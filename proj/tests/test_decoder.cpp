#include <catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "fcvae/decoder.hpp"
#include "fcvae/gradcheck.hpp"
#include "fcvae/training.hpp"

using namespace fcvae;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig micro(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.vocab_size = 7;
  c.d_h = 4;
  c.d_z = 4;
  c.init_scale = 0.5;
  return c;
}

Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.storage()) v = d(rng);
  return t;
}

struct Rows {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::size_t rows, len;
  SequenceView view() const { return {ids, mask, rows, len}; }
};

// Encoder, focus and attention memory for a fixed post batch and z.
struct Context {
  EncoderOutputs enc;
  std::optional<Var> z;
  AttentionMemory mem;
};

Context context(Tape& t, const Model& m, const Rows& post, const Tensor& z) {
  Context c;
  c.enc = encode(t, m, post.view());
  std::optional<Var> focus;
  if (has_latent(m.variant())) {
    c.z = t.constant(z);
    focus = focus_generate(t, m.focus(), c.enc.states, post.mask, *c.z);
  }
  c.mem = prepare_attention(t, m, c.enc.states, post.mask, focus);
  return c;
}

const Rows kPosts{{3, 4, 5, 6, 3, 0}, {1, 1, 1, 1, 1, 0}, 2, 3};

}  // namespace

TEST_CASE("an EOS-only response yields exactly one logits vector") {
  Model m(micro(Variant::FocConstrain), 1);
  const Rows post{{3, 4}, {1, 1}, 1, 2};
  const Rows resp{{kEosId}, {1}, 1, 1};
  Tape t;
  Context c = context(t, m, post, Tensor(Shape{1, 4}, 0.2));
  DecodeTrainOutput out = decode_train(t, m, resp.view(), c.mem, c.enc.mean, c.z);
  REQUIRE(out.logits.size() == 1);
  CHECK(out.logits[0].value().cols() == 7);
  CHECK(out.coverage.step == 1);
}

TEST_CASE("each row's coverage mass equals its response length") {
  Model m(micro(Variant::FocCoverage), 2);
  const Rows resp{{3, 4, 5, kEosId, 6, kEosId, 0, 0}, {1, 1, 1, 1, 1, 1, 0, 0}, 2, 4};
  std::mt19937_64 rng(1);
  Tape t;
  Context c = context(t, m, kPosts, random_tensor(rng, {2, 4}));
  DecodeTrainOutput out = decode_train(t, m, resp.view(), c.mem, c.enc.mean, c.z);
  CHECK(out.logits.size() == 4);
  CHECK(out.coverage.step == 4);
  const Tensor& d = out.coverage.d.value();
  CHECK_THAT(d.at(0, 0) + d.at(0, 1) + d.at(0, 2), WithinAbs(4.0, 1e-12));
  CHECK_THAT(d.at(1, 0) + d.at(1, 1) + d.at(1, 2), WithinAbs(2.0, 1e-12));
}

TEST_CASE("teacher forcing never looks at future gold tokens") {
  for (Variant v : {Variant::S2S, Variant::Foc, Variant::FocCoverage, Variant::FocConstrain}) {
    Model m(micro(v), 3);
    std::mt19937_64 rng(2);
    const Tensor z = random_tensor(rng, {2, 4});
    const Rows base{{3, 4, 5, 6, kEosId, 5, 3, 4, kEosId, 0}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 0}, 2, 5};
    Tape t0;
    Context c0 = context(t0, m, kPosts, z);
    DecodeTrainOutput ref = decode_train(t0, m, base.view(), c0.mem, c0.enc.mean, c0.z);
    for (std::size_t step = 0; step < 5; ++step) {
      Rows changed = base;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t p = step; p < 5; ++p)
          if (changed.mask[b * 5 + p]) changed.ids[b * 5 + p] = changed.ids[b * 5 + p] == 6 ? 3 : 6;
      Tape t;
      Context c = context(t, m, kPosts, z);
      DecodeTrainOutput out = decode_train(t, m, changed.view(), c.mem, c.enc.mean, c.z);
      for (std::size_t k = 0; k <= step; ++k) CHECK(out.logits[k].value() == ref.logits[k].value());
      if (step + 1 < 5) CHECK_FALSE(out.logits[step + 1].value() == ref.logits[step + 1].value());
    }
  }
}

TEST_CASE("initial state is conditioned on z only when configured") {
  std::mt19937_64 rng(3);
  const Tensor hx = random_tensor(rng, {1, 4});
  for (bool cond : {true, false}) {
    ModelConfig c = micro(Variant::FocConstrain);
    c.condition_s0_on_z = cond;
    Model m(c, 4);
    CHECK(m.decoder().W_s->tensor.rows() == (cond ? 8u : 4u));
    Tape t;
    DecoderState a = initial_decoder_state(t, m, t.constant(hx), t.constant(Tensor(Shape{1, 4}, 0.5)));
    DecoderState b = initial_decoder_state(t, m, t.constant(hx), t.constant(Tensor(Shape{1, 4}, -0.5)));
    CHECK((a.l1.value() == b.l1.value()) == !cond);
    if (cond) CHECK_THROWS_AS(initial_decoder_state(t, m, t.constant(hx), std::nullopt), PhaseError);
  }
}

TEST_CASE("W_d gradient of the sequence loss passes finite differences") {
  Model m(micro(Variant::FocConstrain), 5);
  std::mt19937_64 rng(4);
  const Tensor z = random_tensor(rng, {2, 4});
  const Rows resp{{3, 4, 5, kEosId, 6, kEosId, 0, 0}, {1, 1, 1, 1, 1, 1, 0, 0}, 2, 4};
  auto f = [&](Tape& t) {
    Context c = context(t, m, kPosts, z);
    DecodeTrainOutput out = decode_train(t, m, resp.view(), c.mem, c.enc.mean, c.z);
    return seq_loss(t, out.logits, resp.view());
  };
  const auto r = grad_check({m.decoder().W_d, m.decoder().d_d}, f);
  INFO(r);
  CHECK(r.pass);

  std::vector<Parameter*> rest;
  for (Parameter* p : m.params().all())
    if (p->name.rfind("dec.", 0) == 0) rest.push_back(p);
  const auto r2 = grad_check(rest, f);
  INFO(r2);
  CHECK(r2.pass);
}

TEST_CASE("generation is reproducible, bounded and EOS-terminated") {
  Model m(micro(Variant::FocConstrain), 6);
  const std::vector<int> post{3, 4, 5};
  std::mt19937_64 a(7), b(7);
  const auto g1 = generate(m, post, 3, a, 5);
  const auto g2 = generate(m, post, 3, b, 5);
  REQUIRE(g1.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(g1[s].token_ids == g2[s].token_ids);
    CHECK(g1[s].z == g2[s].z);
    CHECK(g1[s].focus == g2[s].focus);
    CHECK(g1[s].token_ids.size() <= 5);
    CHECK(g1[s].alphas.size() == g1[s].token_ids.size());
    const auto eos = std::find(g1[s].token_ids.begin(), g1[s].token_ids.end(), kEosId);
    if (eos != g1[s].token_ids.end()) CHECK(eos + 1 == g1[s].token_ids.end());
    CHECK(g1[s].focus.size() == 3);
    CHECK(g1[s].z_source == LatentSource::Prior);
    double cov = 0.0;
    for (double d : g1[s].coverage_final) cov += d;
    CHECK_THAT(cov, WithinAbs(static_cast<double>(g1[s].token_ids.size()), 1e-9));
  }
  CHECK_FALSE(g1[0].z == g1[1].z);

  CHECK_THROWS_AS(generate(m, {}, 3, a, 5), ValidationError);
  CHECK_THROWS_AS(generate(m, post, 0, a, 5), ValidationError);
  CHECK_THROWS_AS(generate(m, post, 3, a, 0), ValidationError);
}

TEST_CASE("greedy decoding halts at max_len for every setting") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m(micro(Variant::FocCoverage), seed);
    std::mt19937_64 rng(seed);
    for (std::size_t max_len : {1u, 2u, 7u})
      for (const auto& g : generate(m, {3, 5}, 2, rng, max_len)) CHECK(g.token_ids.size() <= max_len);
  }
}

TEST_CASE("batched generation matches per-post generation") {
  Model m(micro(Variant::FocConstrain), 8);
  const std::vector<std::vector<int>> posts{{3, 4, 5}, {6, 5, 4}};
  std::mt19937_64 a(3);
  const auto batched = generate_batch(m, posts, 2, a, 6);
  std::mt19937_64 b(3);
  const auto first = generate(m, posts[0], 2, b, 6);
  const auto second = generate(m, posts[1], 2, b, 6);
  for (std::size_t s = 0; s < 2; ++s) {
    CHECK(batched[0][s].token_ids == first[s].token_ids);
    CHECK(batched[1][s].token_ids == second[s].token_ids);
    CHECK(batched[1][s].z == second[s].z);
  }
}

TEST_CASE("S2S samples are identical token sequences") {
  Model m(micro(Variant::S2S), 9);
  std::mt19937_64 rng(1);
  const auto g = generate(m, {3, 4, 6, 5}, 3, rng, 8);
  CHECK(g[0].token_ids == g[1].token_ids);
  CHECK(g[1].token_ids == g[2].token_ids);
  CHECK(g[0].z.empty());
}
