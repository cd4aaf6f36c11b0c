#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "fcvae/gradcheck.hpp"
#include "fcvae/training.hpp"

namespace fcvae {

// The smallest complete model: vocab 7, d_h 4, d_z 4, posts of up to 3
// tokens, responses of up to 4 (EOS included), batch 2. The second row is
// one token shorter on both sides so the masks are exercised.
struct MicroSetup {
  std::unique_ptr<Model> model;
  std::vector<PostResponsePair> pairs;
  Batch batch;
  Tensor eps;
  double gamma = 0.5;
};

inline MicroSetup make_micro_setup(Variant variant, std::uint64_t seed, double init_scale = 0.5) {
  MicroSetup s;
  ModelConfig mc;
  mc.variant = variant;
  mc.vocab_size = 7;
  mc.d_h = 4;
  mc.d_z = 4;
  mc.init_scale = init_scale;
  s.model = std::make_unique<Model>(mc, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> word(3, 6);
  const std::size_t post_len[2] = {3, 2}, resp_len[2] = {4, 3};
  for (std::size_t b = 0; b < 2; ++b) {
    PostResponsePair p;
    for (std::size_t i = 0; i < post_len[b]; ++i) p.post.push_back(word(rng));
    for (std::size_t i = 0; i + 1 < resp_len[b]; ++i) p.response.push_back(word(rng));
    p.response.push_back(kEosId);
    p.record_index = b;
    s.pairs.push_back(std::move(p));
  }
  const std::vector<std::size_t> idx{0, 1};
  s.batch = make_batch(s.pairs, idx);
  s.eps = draw_standard_normal(rng, 2, mc.d_z);
  return s;
}

// Finite-difference check of L_total with respect to every parameter.
inline GradCheckReport model_grad_check(Variant variant, std::uint64_t seed, GradCheckOptions opts = {}) {
  MicroSetup s = make_micro_setup(variant, seed);
  const Model& m = *s.model;
  auto f = [&](Tape& tape) { return forward_loss(tape, m, s.batch, s.eps, s.gamma).total; };
  return grad_check(s.model->params().all(), f, opts);
}

}  // namespace fcvae
