#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "fcvae/autodiff.hpp"
#include "fcvae/gru.hpp"

namespace fcvae {

// Ablation ladder. S2S has no latent pathway at all; Foc adds the focus
// column to the attention keys; FocCoverage adds the coverage term to the
// attention energy; FocConstrain additionally trains with the focus
// constraint.
enum class Variant { S2S, Foc, FocCoverage, FocConstrain };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::S2S: return "s2s";
    case Variant::Foc: return "foc";
    case Variant::FocCoverage: return "foccoverage";
    case Variant::FocConstrain: return "focconstrain";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "s2s") return Variant::S2S;
  if (s == "foc") return Variant::Foc;
  if (s == "foccoverage") return Variant::FocCoverage;
  if (s == "focconstrain") return Variant::FocConstrain;
  throw ConfigError("unknown variant '" + s + "' (expected s2s|foc|foccoverage|focconstrain)");
}

inline bool has_latent(Variant v) { return v != Variant::S2S; }
inline bool uses_coverage_term(Variant v) { return v == Variant::FocCoverage || v == Variant::FocConstrain; }
inline bool trains_focus_constraint(Variant v) { return v == Variant::FocConstrain; }

struct ModelConfig {
  Variant variant = Variant::FocConstrain;
  std::size_t vocab_size = 64;
  std::size_t d_h = 64;  // encoder output width (both directions) and decoder state width
  std::size_t d_z = 32;  // latent width, also the word embedding width
  double init_scale = 0.08;
  double log_var_min = -10.0;
  double log_var_max = 10.0;
  bool condition_s0_on_z = true;
  // Word prediction reads the attention context from h_x by default; this
  // switches it to the focus-augmented states.
  bool context_from_augmented = false;

  std::size_t d_e() const { return d_z; }
  std::size_t d_a() const { return d_h; }
  std::size_t key_width() const { return variant == Variant::S2S ? d_h : d_h + 1; }

  void validate() const {
    if (d_h < 2 || d_h % 2 != 0) throw ConfigError("d_h must be even and >= 2");
    if (d_z < 1) throw ConfigError("d_z must be >= 1");
    if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
    if (!(init_scale > 0.0)) throw ConfigError("init_scale must be > 0");
    if (!(log_var_min < log_var_max)) throw ConfigError("log_var clamp bounds are inverted");
  }
};

struct EncoderParams {
  GruParams l0_fwd, l0_bwd, l1_fwd, l1_bwd;
};

struct GaussianHeadParams {
  Parameter* W = nullptr;
  Parameter* b = nullptr;
};

struct FocusParams {
  Parameter* W_f = nullptr;
  Parameter* U_f = nullptr;
  Parameter* v_f = nullptr;
};

struct AttentionParams {
  Parameter* W_a = nullptr;
  Parameter* U_a = nullptr;
  Parameter* V_a = nullptr;  // null unless the variant uses the coverage term
  Parameter* v_a = nullptr;
};

struct DecoderParams {
  Parameter* start = nullptr;  // learned step-1 input embedding
  Parameter* W_s = nullptr;    // initial state map
  Parameter* b_s = nullptr;
  GruParams l0, l1;
  Parameter* W_d = nullptr;  // word prediction
  Parameter* d_d = nullptr;
};

struct BowParams {
  Parameter* W_1 = nullptr;
  Parameter* b_1 = nullptr;
  Parameter* W_2 = nullptr;
  Parameter* b_2 = nullptr;
};

// All trainable state of one model. Parameters absent from a variant (for
// S2S: recognition, prior, focus, bag-of-words) are not created.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed) : config_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(init_seed);
    const double s = cfg.init_scale;
    const std::size_t H = cfg.d_h, Z = cfg.d_z, E = cfg.d_e(), A = cfg.d_a(), V = cfg.vocab_size;
    const std::size_t half = H / 2;

    embedding_ = &store_.add_uniform("embed.E", {V, E}, s, rng);
    encoder_.l0_fwd = GruParams::create(store_, "enc.l0.fwd", E, half, s, rng);
    encoder_.l0_bwd = GruParams::create(store_, "enc.l0.bwd", E, half, s, rng);
    encoder_.l1_fwd = GruParams::create(store_, "enc.l1.fwd", H, half, s, rng);
    encoder_.l1_bwd = GruParams::create(store_, "enc.l1.bwd", H, half, s, rng);

    if (has_latent(cfg.variant)) {
      recognition_.W = &store_.add_uniform("recog.W_q", {2 * H, 2 * Z}, s, rng);
      recognition_.b = &store_.add_uniform("recog.b_q", {1, 2 * Z}, s, rng);
      prior_.W = &store_.add_uniform("prior.W_p", {H, 2 * Z}, s, rng);
      prior_.b = &store_.add_uniform("prior.b_p", {1, 2 * Z}, s, rng);
      focus_.W_f = &store_.add_uniform("focus.W_f", {H, A}, s, rng);
      focus_.U_f = &store_.add_uniform("focus.U_f", {Z, A}, s, rng);
      focus_.v_f = &store_.add_uniform("focus.v_f", {A, 1}, s, rng);
    }

    attention_.W_a = &store_.add_uniform("attn.W_a", {cfg.key_width(), A}, s, rng);
    attention_.U_a = &store_.add_uniform("attn.U_a", {H, A}, s, rng);
    if (uses_coverage_term(cfg.variant))
      attention_.V_a = &store_.add_uniform("attn.V_a", {cfg.key_width(), A}, s, rng);
    attention_.v_a = &store_.add_uniform("attn.v_a", {A, 1}, s, rng);

    const std::size_t init_in = H + (has_latent(cfg.variant) && cfg.condition_s0_on_z ? Z : 0);
    const std::size_t ctx = cfg.context_from_augmented ? cfg.key_width() : H;
    decoder_.start = &store_.add_uniform("dec.start", {1, E}, s, rng);
    decoder_.W_s = &store_.add_uniform("dec.init.W_s", {init_in, 2 * H}, s, rng);
    decoder_.b_s = &store_.add_uniform("dec.init.b_s", {1, 2 * H}, s, rng);
    decoder_.l0 = GruParams::create(store_, "dec.l0", E + ctx, H, s, rng);
    decoder_.l1 = GruParams::create(store_, "dec.l1", H, H, s, rng);
    decoder_.W_d = &store_.add_uniform("out.W_d", {H + ctx, V}, s, rng);
    decoder_.d_d = &store_.add_uniform("out.d_d", {1, V}, s, rng);

    if (has_latent(cfg.variant)) {
      bow_.W_1 = &store_.add_uniform("bow.W_1", {Z + H, H}, s, rng);
      bow_.b_1 = &store_.add_uniform("bow.b_1", {1, H}, s, rng);
      bow_.W_2 = &store_.add_uniform("bow.W_2", {H, V}, s, rng);
      bow_.b_2 = &store_.add_uniform("bow.b_2", {1, V}, s, rng);
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  Variant variant() const noexcept { return config_.variant; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }

  Parameter& embedding() const { return *embedding_; }
  const EncoderParams& encoder() const noexcept { return encoder_; }
  const GaussianHeadParams& recognition() const noexcept { return recognition_; }
  const GaussianHeadParams& prior() const noexcept { return prior_; }
  const FocusParams& focus() const noexcept { return focus_; }
  const AttentionParams& attention() const noexcept { return attention_; }
  const DecoderParams& decoder() const noexcept { return decoder_; }
  const BowParams& bow() const noexcept { return bow_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Parameter* embedding_ = nullptr;
  EncoderParams encoder_;
  GaussianHeadParams recognition_, prior_;
  FocusParams focus_;
  AttentionParams attention_;
  DecoderParams decoder_;
  BowParams bow_;
};

}  // namespace fcvae
