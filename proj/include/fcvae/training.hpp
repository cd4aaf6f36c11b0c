#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fcvae/autodiff.hpp"
#include "fcvae/corpus.hpp"
#include "fcvae/decoder.hpp"
#include "fcvae/encoder.hpp"
#include "fcvae/focus_attention.hpp"
#include "fcvae/model.hpp"

namespace fcvae {

// ---------------------------------------------------------------------------
// Loss terms

// Mean over valid response positions of -log p(gold).
inline Var seq_loss(Tape& tape, const std::vector<Var>& logits, const SequenceView& gold) {
  if (logits.size() != gold.len)
    throw DimensionError("seq_loss: " + std::to_string(logits.size()) + " steps for responses of length " + std::to_string(gold.len));
  std::size_t n = 0;
  for (std::uint8_t m : gold.mask) n += m ? 1 : 0;
  if (n == 0) throw ValidationError("seq_loss: no valid response positions");
  const double w = 1.0 / static_cast<double>(n);
  std::optional<Var> total;
  for (std::size_t t = 0; t < gold.len; ++t) {
    const auto ids = gold.column_ids(t);
    const auto mask = gold.column_mask(t);
    std::vector<double> weights(gold.rows);
    for (std::size_t b = 0; b < gold.rows; ++b) weights[b] = mask[b] ? w : 0.0;
    Var ce = ad::cross_entropy(logits[t], ids, weights);
    total = total ? ad::add(*total, ce) : ce;
  }
  (void)tape;
  return *total;
}

// Mean over rows of || d_b / |y_b| - f_b ||_2. Padded positions have zero
// focus and zero coverage, so they add nothing to the norm.
inline Var focus_loss(Tape& tape, Var coverage, std::span<const std::size_t> resp_lengths, Var focus) {
  const std::size_t rows = coverage.rows();
  if (resp_lengths.size() != rows || focus.value().shape() != coverage.value().shape())
    throw DimensionError("focus_loss: coverage " + shape_str(coverage.value().shape()) + ", focus " +
                         shape_str(focus.value().shape()) + ", " + std::to_string(resp_lengths.size()) + " lengths");
  Tensor inv(Shape{rows, 1});
  for (std::size_t b = 0; b < rows; ++b) {
    if (resp_lengths[b] == 0) throw ValidationError("focus_loss: response length 0 in row " + std::to_string(b));
    inv[b] = 1.0 / static_cast<double>(resp_lengths[b]);
  }
  Var diff = ad::sub(ad::mul_col(coverage, tape.constant(std::move(inv))), focus);
  return ad::mean(ad::row_l2norm(diff));
}

// Bag-of-words loss: a one-hidden-layer tanh net maps [z; h_x_bar] to
// vocabulary logits, scored against every non-PAD, non-EOS response token
// irrespective of position. Mean over those tokens; zero if there are none.
inline Var bow_loss(Tape& tape, const BowParams& p, Var z, Var h_x_bar, const SequenceView& gold) {
  using namespace ad;
  Var hidden = tanh(add_row(matmul(concat_cols({z, h_x_bar}), tape.param(*p.W_1)), tape.param(*p.b_1)));
  Var logits = add_row(matmul(hidden, tape.param(*p.W_2)), tape.param(*p.b_2));
  std::vector<int> rows, targets;
  for (std::size_t b = 0; b < gold.rows; ++b)
    for (std::size_t t = 0; t < gold.len; ++t) {
      const int id = gold.ids[b * gold.len + t];
      if (!gold.mask[b * gold.len + t] || id == kPadId || id == kEosId) continue;
      rows.push_back(static_cast<int>(b));
      targets.push_back(id);
    }
  if (rows.empty()) return tape.constant(Tensor::scalar(0.0));
  std::vector<double> w(rows.size(), 1.0 / static_cast<double>(rows.size()));
  return cross_entropy(gather_rows(logits, rows), targets, w);
}

// ---------------------------------------------------------------------------
// Schedules

// gamma = min(1, step / anneal_steps)
inline double kl_anneal(std::size_t step, std::size_t anneal_steps) {
  if (anneal_steps < 1) throw ConfigError("kl_anneal_steps must be >= 1");
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
}

// Linear warmup to `peak` at step == warmup, then peak * sqrt(warmup / step).
inline double lr_schedule(std::size_t step, std::size_t warmup, double peak) {
  if (step < 1) throw ConfigError("lr_schedule step must be >= 1");
  if (warmup < 1) throw ConfigError("warmup_steps must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return step <= warmup ? peak * s / w : peak * std::sqrt(w / s);
}

// ---------------------------------------------------------------------------
// Forward pass

struct LossBreakdown {
  double l_seq = 0.0;
  double l_foc = 0.0;
  double l_kl = 0.0;
  double l_bow = 0.0;
  double gamma = 0.0;
  double total = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

// Per-term multipliers. All 1 reproduces L_total exactly; other values are
// for experiments only, and then total no longer equals the plain sum.
struct LossWeights {
  double seq = 1.0;
  double foc = 1.0;
  double kl = 1.0;
  double bow = 1.0;
};

struct ForwardResult {
  Var total;
  LossBreakdown losses;
  std::optional<Var> focus;
  Coverage coverage;
  std::vector<Var> alphas;
  std::optional<Var> kl_rows;
  std::optional<Var> unweighted_foc;  // computed for every latent variant
};

inline SequenceView post_view(const Batch& b) { return {b.post_ids, b.post_mask, b.size, b.post_len}; }
inline SequenceView resp_view(const Batch& b) { return {b.resp_ids, b.resp_mask, b.size, b.resp_len}; }

// Builds L_total = L_seq + L_foc + gamma * L_kl + L_bow for a batch.
// Variant gating: S2S has only L_seq; Foc and FocCoverage drop L_foc;
// FocConstrain keeps all four. Dropped terms are reported as 0.
// eps is the [B x d_z] standard-normal draw for the recognition sample
// (ignored for S2S).
inline ForwardResult forward_loss(Tape& tape, const Model& model, const Batch& batch, const Tensor& eps, double gamma,
                                  const LossWeights& weights = {}) {
  const SequenceView post = post_view(batch);
  const SequenceView resp = resp_view(batch);
  const Variant v = model.variant();
  ForwardResult out;

  EncoderOutputs ex = encode(tape, model, post);
  std::optional<Var> z;
  std::optional<Var> kl_term, bow_term, foc_term;
  if (has_latent(v)) {
    EncoderOutputs ey = encode(tape, model, resp);
    GaussianParams q = recognition(tape, model, ex.mean, ey.mean);
    GaussianParams p = prior(tape, model, ex.mean);
    z = sample(tape, q, eps, LatentSource::Recognition).z;
    out.focus = focus_generate(tape, model.focus(), ex.states, batch.post_mask, *z);
    out.kl_rows = kl_divergence(tape, q, p);
    kl_term = ad::mean(*out.kl_rows);
    bow_term = bow_loss(tape, model.bow(), *z, ex.mean, resp);
  }
  AttentionMemory mem = prepare_attention(tape, model, ex.states, batch.post_mask, out.focus);
  DecodeTrainOutput dec = decode_train(tape, model, resp, mem, ex.mean, z);
  out.coverage = dec.coverage;
  out.alphas = dec.alphas;

  Var l_seq = seq_loss(tape, dec.logits, resp);
  if (out.focus) out.unweighted_foc = focus_loss(tape, dec.coverage.d, batch.resp_lengths, *out.focus);
  if (trains_focus_constraint(v)) foc_term = out.unweighted_foc;

  Var total = weights.seq == 1.0 ? l_seq : ad::scale(l_seq, weights.seq);
  out.losses.l_seq = l_seq.value().item();
  out.losses.gamma = has_latent(v) ? gamma : 0.0;
  if (foc_term) {
    total = ad::add(total, weights.foc == 1.0 ? *foc_term : ad::scale(*foc_term, weights.foc));
    out.losses.l_foc = foc_term->value().item();
  }
  if (kl_term) {
    total = ad::add(total, ad::scale(*kl_term, gamma * weights.kl));
    out.losses.l_kl = kl_term->value().item();
  }
  if (bow_term) {
    total = ad::add(total, weights.bow == 1.0 ? *bow_term : ad::scale(*bow_term, weights.bow));
    out.losses.l_bow = bow_term->value().item();
  }
  out.total = total;
  out.losses.total = total.value().item();
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterStore& params, AdamConfig cfg) : cfg_(cfg) {
    for (const Parameter* p : params.all()) {
      m_.emplace_back(p->tensor.size(), 0.0);
      v_.emplace_back(p->tensor.size(), 0.0);
    }
  }

  void step(ParameterStore& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto all = params.all();
    for (std::size_t k = 0; k < all.size(); ++k) {
      auto& w = all[k]->tensor.storage();
      const auto& g = all[k]->tensor.grad;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }
  void restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw IntegrityError("optimizer state does not match the model");
    for (std::size_t k = 0; k < m.size(); ++k)
      if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size())
        throw IntegrityError("optimizer moment size mismatch for parameter " + std::to_string(k));
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the pre-clipping norm.
inline double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : std::as_const(params).all())
    for (double g : p->tensor.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params.all())
      for (double& g : p->tensor.grad) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 32;
  std::size_t total_steps = 3000;
  std::size_t warmup_steps = 200;
  double peak_lr = 0.002;
  std::size_t kl_anneal_steps = 500;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::size_t max_post_len = 16;
  std::size_t max_resp_len = 16;
  std::size_t max_decode_len = 0;  // 0: twice the longest training response
  std::size_t checkpoint_interval = 0;
  AdamConfig adam;
  LossWeights weights;

  void validate() const {
    model.validate();
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
    if (kl_anneal_steps < 1) throw ConfigError("kl_anneal_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_post_len < 1 || max_resp_len < 1) throw ConfigError("max lengths must be >= 1");
  }
};

// Independent deterministic streams derived from the one configured seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kShuffleStream = 2;
inline constexpr std::uint64_t kSampleStream = 3;

struct LogRow {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown losses;
};

inline std::string format_log_row(const LogRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.losses.l_seq, r.losses.l_foc,
                r.losses.l_kl, r.losses.l_bow, r.losses.gamma, r.lr, r.losses.total);
  return buf;
}
inline constexpr const char* kLossLogHeader = "step,l_seq,l_foc,l_kl,l_bow,gamma,lr,total";

struct Checkpoint;  // checkpoint.hpp

// Owns model, optimizer and rng state; step() performs one update on the
// next batch of a deterministic epoch schedule.
class Trainer {
 public:
  Trainer(TrainConfig cfg, Vocabulary vocab, std::vector<PostResponsePair> pairs)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), pairs_(std::move(pairs)) {
    cfg_.model.vocab_size = vocab_.size();
    cfg_.validate();
    if (pairs_.empty()) throw ValidationError("training set is empty");
    std::size_t longest = 0;
    for (const auto& p : pairs_) {
      if (p.post.empty() || p.post.size() > cfg_.max_post_len)
        throw ValidationError("post length " + std::to_string(p.post.size()) + " outside [1, max_post_len]");
      if (p.response.empty() || p.response.size() > cfg_.max_resp_len)
        throw ValidationError("response length " + std::to_string(p.response.size()) + " outside [1, max_resp_len]");
      longest = std::max(longest, p.response.size());
    }
    if (cfg_.max_decode_len == 0) cfg_.max_decode_len = 2 * longest;
    model_ = std::make_unique<Model>(cfg_.model, derive_seed(cfg_.seed, kInitStream));
    adam_ = Adam(model_->params(), cfg_.adam);
    sample_rng_.seed(derive_seed(cfg_.seed, kSampleStream));
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  Model& model() noexcept { return *model_; }
  const Model& model() const noexcept { return *model_; }
  std::size_t step_count() const noexcept { return step_; }
  const Adam& optimizer() const noexcept { return adam_; }
  const std::mt19937_64& sample_rng() const noexcept { return sample_rng_; }

  // The batch consumed by update number k (1-based).
  const Batch& batch_for_step(std::size_t k) {
    const std::size_t per_epoch = (pairs_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    const std::size_t epoch = (k - 1) / per_epoch;
    if (!epoch_batches_ || cached_epoch_ != epoch) {
      epoch_batches_ = make_batches(pairs_, cfg_.batch_size, derive_seed(cfg_.seed, kShuffleStream) + epoch);
      cached_epoch_ = epoch;
    }
    return (*epoch_batches_)[(k - 1) % per_epoch];
  }

  // One update. The returned row carries the losses measured before the
  // update, with gamma = kl_anneal(k) and lr = lr_schedule(k).
  LogRow step() {
    const std::size_t k = step_ + 1;
    const Batch& batch = batch_for_step(k);
    const double gamma = kl_anneal(k, cfg_.kl_anneal_steps);
    const double lr = lr_schedule(k, cfg_.warmup_steps, cfg_.peak_lr);
    Tensor eps = has_latent(cfg_.model.variant) ? draw_standard_normal(sample_rng_, batch.size, cfg_.model.d_z)
                                                : Tensor(Shape{batch.size, cfg_.model.d_z});
    Tape tape;
    ForwardResult fr = forward_loss(tape, *model_, batch, eps, gamma, cfg_.weights);
    check_finite(fr.losses, k);
    model_->params().zero_grad();
    tape.backward(fr.total);
    if (cfg_.clip_norm > 0.0) clip_grad_norm(model_->params(), cfg_.clip_norm);
    adam_.step(model_->params(), lr);
    step_ = k;
    return {k, lr, fr.losses};
  }

  friend Checkpoint make_checkpoint(const Trainer&);
  friend Trainer resume_trainer(const Checkpoint&, std::vector<PostResponsePair>);

 private:
  struct ResumeTag {};
  Trainer(ResumeTag, TrainConfig cfg, Vocabulary vocab, std::vector<PostResponsePair> pairs)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), pairs_(std::move(pairs)) {
    cfg_.validate();
    model_ = std::make_unique<Model>(cfg_.model, derive_seed(cfg_.seed, kInitStream));
    adam_ = Adam(model_->params(), cfg_.adam);
  }

  static void check_finite(const LossBreakdown& l, std::size_t k) {
    if (!std::isfinite(l.l_seq)) throw NonFiniteLossError("l_seq", k);
    if (!std::isfinite(l.l_foc)) throw NonFiniteLossError("l_foc", k);
    if (!std::isfinite(l.l_kl)) throw NonFiniteLossError("l_kl", k);
    if (!std::isfinite(l.l_bow)) throw NonFiniteLossError("l_bow", k);
    if (!std::isfinite(l.total)) throw NonFiniteLossError("total", k);
  }

  TrainConfig cfg_;
  Vocabulary vocab_;
  std::vector<PostResponsePair> pairs_;
  std::unique_ptr<Model> model_;
  Adam adam_;
  std::mt19937_64 sample_rng_;
  std::size_t step_ = 0;
  std::optional<std::vector<Batch>> epoch_batches_;
  std::size_t cached_epoch_ = 0;
};

}  // namespace fcvae
