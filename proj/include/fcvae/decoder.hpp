#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fcvae/autodiff.hpp"
#include "fcvae/corpus.hpp"
#include "fcvae/encoder.hpp"
#include "fcvae/focus_attention.hpp"
#include "fcvae/gru.hpp"
#include "fcvae/model.hpp"

namespace fcvae {

struct DecoderState {
  Var l0;  // [rows x d_h]
  Var l1;  // [rows x d_h], the state attention reads
};

// s_0 = tanh([h_x_bar; z] W_s + b_s), split across the two layers. Without a
// latent pathway (S2S, or conditioning disabled) z is left out.
inline DecoderState initial_decoder_state(Tape& tape, const Model& model, Var h_x_bar, std::optional<Var> z) {
  const auto& p = model.decoder();
  const bool with_z = has_latent(model.variant()) && model.config().condition_s0_on_z;
  if (with_z && !z) throw PhaseError("decoder initialization needs z for variant " + to_string(model.variant()));
  Var in = with_z ? ad::concat_cols({h_x_bar, *z}) : h_x_bar;
  Var s = ad::tanh(ad::add_row(ad::matmul(in, tape.param(*p.W_s)), tape.param(*p.b_s)));
  const std::size_t H = model.config().d_h;
  return {ad::slice_cols(s, 0, H), ad::slice_cols(s, H, H)};
}

struct DecodeStepOutput {
  Var logits;  // [rows x V]
  DecoderState state;
  Var alpha;
  Var context;
  Coverage coverage;
};

// Attend with s_{t-1}, feed [embedding(y_{t-1}); context] through both GRU
// layers, then predict from [s_t; context].
inline DecodeStepOutput decode_step(Tape& tape, const Model& model, const AttentionMemory& mem, Var input_embedding,
                                    const DecoderState& prev, const Coverage& coverage, std::size_t t,
                                    std::span<const std::uint8_t> active = {}) {
  const auto& p = model.decoder();
  AttendResult att = attend_step(tape, model, mem, prev.l1, coverage, t, active);
  Var x = ad::concat_cols({input_embedding, att.context});
  Var l0 = gru_cell(x, prev.l0, p.l0);
  Var l1 = gru_cell(l0, prev.l1, p.l1);
  Var logits = ad::add_row(ad::matmul(ad::concat_cols({l1, att.context}), tape.param(*p.W_d)), tape.param(*p.d_d));
  return {logits, {l0, l1}, att.alpha, att.context, att.coverage};
}

inline Var start_embedding(Tape& tape, const Model& model, std::size_t rows) {
  std::vector<int> zeros(rows, 0);
  return ad::gather_rows(tape.param(*model.decoder().start), zeros);
}

struct DecodeTrainOutput {
  std::vector<Var> logits;  // one [rows x V] per response position
  std::vector<Var> alphas;
  Coverage coverage;
};

// Teacher-forced decoding over a padded response matrix. Step t consumes
// gold token t-1 (the start embedding at t = 1) and its coverage update is
// applied only to rows whose response is at least t tokens long.
inline DecodeTrainOutput decode_train(Tape& tape, const Model& model, const SequenceView& resp, const AttentionMemory& mem,
                                      Var h_x_bar, std::optional<Var> z) {
  DecodeTrainOutput out;
  DecoderState state = initial_decoder_state(tape, model, h_x_bar, z);
  Coverage cov = initial_coverage(tape, resp.rows, mem.len);
  Var table = tape.param(model.embedding());
  for (std::size_t t = 1; t <= resp.len; ++t) {
    Var in = t == 1 ? start_embedding(tape, model, resp.rows) : ad::gather_rows(table, resp.column_ids(t - 2));
    const auto active = resp.column_mask(t - 1);
    DecodeStepOutput step = decode_step(tape, model, mem, in, state, cov, t, active);
    out.logits.push_back(step.logits);
    out.alphas.push_back(step.alpha);
    state = step.state;
    cov = step.coverage;
  }
  out.coverage = cov;
  return out;
}

struct GenerationResult {
  std::vector<int> token_ids;         // EOS-terminated unless truncated at max_len
  std::vector<double> focus;          // over the post's positions; empty for S2S
  std::vector<double> coverage_final;  // over the post's positions
  std::vector<std::vector<double>> alphas;
  LatentSource z_source = LatentSource::Prior;
  std::vector<double> z;
};

// Greedy decoding of n_samples responses for each post, every sample with its
// own z drawn from the prior. eps is drawn post by post, sample by sample.
inline std::vector<std::vector<GenerationResult>> generate_batch(const Model& model,
                                                                 const std::vector<std::vector<int>>& posts,
                                                                 std::size_t n_samples, std::mt19937_64& rng,
                                                                 std::size_t max_len) {
  if (n_samples == 0) throw ValidationError("generate: n_samples must be >= 1");
  if (max_len == 0) throw ValidationError("generate: max_len must be >= 1");
  if (posts.empty()) return {};
  std::size_t L = 0;
  for (const auto& p : posts) {
    if (p.empty()) throw ValidationError("generate: empty post");
    L = std::max(L, p.size());
  }
  const std::size_t rows = posts.size() * n_samples;
  std::vector<int> ids(rows * L, kPadId);
  std::vector<std::uint8_t> mask(rows * L, 0);
  for (std::size_t pi = 0; pi < posts.size(); ++pi)
    for (std::size_t s = 0; s < n_samples; ++s) {
      const std::size_t r = pi * n_samples + s;
      for (std::size_t i = 0; i < posts[pi].size(); ++i) {
        ids[r * L + i] = posts[pi][i];
        mask[r * L + i] = 1;
      }
    }
  const SequenceView seq{ids, mask, rows, L};

  Tape tape;
  tape.set_grad_enabled(false);
  EncoderOutputs enc = encode(tape, model, seq);
  std::optional<Var> z;
  std::optional<Var> focus;
  if (has_latent(model.variant())) {
    GaussianParams pr = prior(tape, model, enc.mean);
    z = sample(tape, pr, rng, LatentSource::Prior).z;
    focus = focus_generate(tape, model.focus(), enc.states, mask, *z);
  }
  AttentionMemory mem = prepare_attention(tape, model, enc.states, mask, focus);
  DecoderState state = initial_decoder_state(tape, model, enc.mean, z);
  Coverage cov = initial_coverage(tape, rows, L);

  std::vector<std::vector<int>> tokens(rows);
  std::vector<std::vector<std::vector<double>>> alphas(rows);
  std::vector<std::uint8_t> active(rows, 1);
  Var table = tape.param(model.embedding());
  Var in = start_embedding(tape, model, rows);
  const std::size_t V = model.config().vocab_size;
  for (std::size_t t = 1; t <= max_len; ++t) {
    DecodeStepOutput step = decode_step(tape, model, mem, in, state, cov, t, active);
    const Tensor& logits = step.logits.value();
    const Tensor& alpha = step.alpha.value();
    std::vector<int> next(rows, kPadId);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!active[r]) continue;
      const double* row = logits.data().data() + r * V;
      const int best = static_cast<int>(std::max_element(row, row + V) - row);
      tokens[r].push_back(best);
      alphas[r].emplace_back(alpha.data().begin() + static_cast<std::ptrdiff_t>(r * L),
                             alpha.data().begin() + static_cast<std::ptrdiff_t>(r * L + L));
      next[r] = best;
    }
    state = step.state;
    cov = step.coverage;
    for (std::size_t r = 0; r < rows; ++r)
      if (active[r] && next[r] == kEosId) active[r] = 0;
    if (std::none_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) break;
    in = ad::gather_rows(table, next);
  }

  std::vector<std::vector<GenerationResult>> out(posts.size());
  const Tensor& d = cov.d.value();
  for (std::size_t pi = 0; pi < posts.size(); ++pi) {
    const std::size_t len = posts[pi].size();
    for (std::size_t s = 0; s < n_samples; ++s) {
      const std::size_t r = pi * n_samples + s;
      GenerationResult g;
      g.token_ids = std::move(tokens[r]);
      g.alphas = std::move(alphas[r]);
      for (auto& a : g.alphas) a.resize(len);
      for (std::size_t i = 0; i < len; ++i) g.coverage_final.push_back(d[r * L + i]);
      if (focus) {
        const Tensor& f = focus->value();
        for (std::size_t i = 0; i < len; ++i) g.focus.push_back(f[r * L + i]);
        const Tensor& zv = z->value();
        g.z.assign(zv.data().begin() + static_cast<std::ptrdiff_t>(r * zv.cols()),
                   zv.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * zv.cols()));
      }
      out[pi].push_back(std::move(g));
    }
  }
  return out;
}

inline std::vector<GenerationResult> generate(const Model& model, const std::vector<int>& post, std::size_t n_samples,
                                              std::mt19937_64& rng, std::size_t max_len) {
  if (post.empty()) throw ValidationError("generate: empty post");
  return generate_batch(model, {post}, n_samples, rng, max_len).front();
}

}  // namespace fcvae
