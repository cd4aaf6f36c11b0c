#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "fcvae/autodiff.hpp"
#include "fcvae/gru.hpp"
#include "fcvae/model.hpp"

namespace fcvae {

// Padded id matrix [rows x len] with its validity mask.
struct SequenceView {
  std::span<const int> ids;
  std::span<const std::uint8_t> mask;
  std::size_t rows = 0;
  std::size_t len = 0;

  // Mask column i as a per-row flag vector.
  std::vector<std::uint8_t> column_mask(std::size_t i) const {
    std::vector<std::uint8_t> m(rows);
    for (std::size_t b = 0; b < rows; ++b) m[b] = mask[b * len + i];
    return m;
  }
  std::vector<int> column_ids(std::size_t i) const {
    std::vector<int> c(rows);
    for (std::size_t b = 0; b < rows; ++b) c[b] = ids[b * len + i];
    return c;
  }
  std::size_t length(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < len; ++i) n += mask[b * len + i] ? 1 : 0;
    return n;
  }
};

struct EncoderOutputs {
  std::vector<Var> states;  // per position, [rows x d_h]
  Var mean;                 // [rows x d_h], masked mean of states
};

struct BidirectionalStates {
  std::vector<Var> forward;
  std::vector<Var> backward;
};

// One bidirectional GRU layer. Padded positions carry the forward state
// unchanged and leave the backward state at zero, so each row's backward
// pass effectively starts at its own last real token.
inline BidirectionalStates bidirectional_layer(Tape& tape, const std::vector<Var>& inputs, const SequenceView& seq,
                                               const GruParams& fwd, const GruParams& bwd) {
  BidirectionalStates out;
  out.forward.resize(seq.len);
  out.backward.resize(seq.len);
  Var h = tape.constant(Tensor(Shape{seq.rows, fwd.state_size()}));
  for (std::size_t i = 0; i < seq.len; ++i) {
    const auto m = seq.column_mask(i);
    h = ad::where_rows(m, gru_cell(inputs[i], h, fwd), h);
    out.forward[i] = h;
  }
  h = tape.constant(Tensor(Shape{seq.rows, bwd.state_size()}));
  for (std::size_t i = seq.len; i-- > 0;) {
    const auto m = seq.column_mask(i);
    h = ad::where_rows(m, gru_cell(inputs[i], h, bwd), h);
    out.backward[i] = h;
  }
  return out;
}

// Mean over valid positions: weights[b, i] = mask[b, i] / length(b).
inline Var masked_mean(Tape& tape, const std::vector<Var>& states, const SequenceView& seq) {
  Tensor w(Shape{seq.rows, seq.len});
  for (std::size_t b = 0; b < seq.rows; ++b) {
    const double n = static_cast<double>(seq.length(b));
    for (std::size_t i = 0; i < seq.len; ++i) w[b * seq.len + i] = seq.mask[b * seq.len + i] ? 1.0 / n : 0.0;
  }
  return ad::weighted_sum(tape.constant(std::move(w)), states);
}

// Two stacked bidirectional layers over word embeddings. Posts and responses
// go through the same parameters.
inline EncoderOutputs encode(Tape& tape, const Model& model, const SequenceView& seq) {
  if (seq.rows == 0 || seq.len == 0) throw ValidationError("encode: empty batch");
  for (std::size_t b = 0; b < seq.rows; ++b) {
    if (seq.length(b) == 0) throw ValidationError("encode: row " + std::to_string(b) + " is an empty sequence");
    for (std::size_t i = 0; i + 1 < seq.len; ++i)
      if (!seq.mask[b * seq.len + i] && seq.mask[b * seq.len + i + 1])
        throw ValidationError("encode: row " + std::to_string(b) + " has padding inside the sequence");
  }
  Var table = tape.param(model.embedding());
  std::vector<Var> x(seq.len);
  for (std::size_t i = 0; i < seq.len; ++i) x[i] = ad::gather_rows(table, seq.column_ids(i));

  const auto& enc = model.encoder();
  auto l0 = bidirectional_layer(tape, x, seq, enc.l0_fwd, enc.l0_bwd);
  std::vector<Var> h0(seq.len);
  for (std::size_t i = 0; i < seq.len; ++i) h0[i] = ad::concat_cols({l0.forward[i], l0.backward[i]});
  auto l1 = bidirectional_layer(tape, h0, seq, enc.l1_fwd, enc.l1_bwd);

  EncoderOutputs out;
  out.states.resize(seq.len);
  for (std::size_t i = 0; i < seq.len; ++i) out.states[i] = ad::concat_cols({l1.forward[i], l1.backward[i]});
  out.mean = masked_mean(tape, out.states, seq);
  return out;
}

struct GaussianParams {
  Var mu;       // [rows x d_z]
  Var log_var;  // [rows x d_z], clamped
};

enum class LatentSource { Recognition, Prior };

struct LatentSample {
  Var z;
  Tensor eps;
  LatentSource source = LatentSource::Prior;
};

namespace detail {
inline GaussianParams gaussian_head(Tape& tape, const GaussianHeadParams& head, Var input, const ModelConfig& cfg) {
  Var out = ad::add_row(ad::matmul(input, tape.param(*head.W)), tape.param(*head.b));
  const std::size_t dz = cfg.d_z;
  return {ad::slice_cols(out, 0, dz), ad::clamp(ad::slice_cols(out, dz, dz), cfg.log_var_min, cfg.log_var_max)};
}
}  // namespace detail

// q(z | x, y): one affine map of [h_x_bar; h_y_bar] to [mu; log_var].
inline GaussianParams recognition(Tape& tape, const Model& model, Var h_x_bar, std::optional<Var> h_y_bar) {
  if (!has_latent(model.variant())) throw PhaseError("variant " + to_string(model.variant()) + " has no recognition network");
  if (!h_y_bar) throw PhaseError("recognition network needs the response summary (training only)");
  return detail::gaussian_head(tape, model.recognition(), ad::concat_cols({h_x_bar, *h_y_bar}), model.config());
}

// p(z | x): separate affine head on h_x_bar alone.
inline GaussianParams prior(Tape& tape, const Model& model, Var h_x_bar) {
  if (!has_latent(model.variant())) throw PhaseError("variant " + to_string(model.variant()) + " has no prior network");
  return detail::gaussian_head(tape, model.prior(), h_x_bar, model.config());
}

inline Tensor draw_standard_normal(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor eps(Shape{rows, cols});
  for (double& v : eps.storage()) v = dist(rng);
  return eps;
}

// z = mu + exp(0.5 * log_var) * eps. eps enters as a constant.
inline LatentSample sample(Tape& tape, const GaussianParams& params, Tensor eps, LatentSource source) {
  if (eps.shape() != params.mu.value().shape())
    throw DimensionError("sample: eps " + shape_str(eps.shape()) + " vs mu " + shape_str(params.mu.value().shape()));
  Var std_dev = ad::exp(ad::scale(params.log_var, 0.5));
  Var z = ad::add(params.mu, ad::mul(std_dev, tape.constant(eps)));
  return {z, std::move(eps), source};
}

inline LatentSample sample(Tape& tape, const GaussianParams& params, std::mt19937_64& rng, LatentSource source) {
  const auto& mu = params.mu.value();
  return sample(tape, params, draw_standard_normal(rng, mu.rows(), mu.cols()), source);
}

// KL(q || p) for diagonal Gaussians, one value per row: [rows x 1].
inline Var kl_divergence(Tape& tape, const GaussianParams& q, const GaussianParams& p) {
  if (q.mu.value().shape() != p.mu.value().shape())
    throw DimensionError("kl_divergence: " + shape_str(q.mu.value().shape()) + " vs " + shape_str(p.mu.value().shape()));
  using namespace ad;
  Var diff = sub(q.mu, p.mu);
  Var num = add(exp(q.log_var), mul(diff, diff));
  Var quad = mul(num, scale(exp(neg(p.log_var)), 0.5));
  Var logdet = scale(sub(p.log_var, q.log_var), 0.5);
  Var per_dim = add(add(logdet, quad), tape.constant(Tensor::scalar(-0.5)));
  return sum_cols(per_dim);
}

}  // namespace fcvae
