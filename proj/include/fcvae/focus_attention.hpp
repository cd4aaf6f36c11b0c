#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcvae/autodiff.hpp"
#include "fcvae/model.hpp"

namespace fcvae {

// Focus over post positions: softmax_i( v_f . tanh(h_i W_f + z U_f) ),
// with padded positions masked out. Returns [rows x len].
inline Var focus_generate(Tape& tape, const FocusParams& p, const std::vector<Var>& h_x,
                          std::span<const std::uint8_t> post_mask, Var z) {
  if (h_x.empty()) throw DimensionError("focus_generate: no positions");
  using namespace ad;
  Var W_f = tape.param(*p.W_f);
  Var v_f = tape.param(*p.v_f);
  Var z_proj = matmul(z, tape.param(*p.U_f));
  std::vector<Var> scores;
  scores.reserve(h_x.size());
  for (const Var& h : h_x) scores.push_back(matmul(tanh(add(matmul(h, W_f), z_proj)), v_f));
  return masked_softmax(concat_cols(scores), post_mask);
}

// Everything attention needs about the post, computed once per sequence.
struct AttentionMemory {
  std::vector<Var> states;     // h_x, [rows x d_h] per position
  std::vector<Var> augmented;  // [h_x; f] per position (h_x itself for S2S)
  std::vector<Var> keys;       // augmented_i W_a, [rows x d_a]
  std::vector<std::uint8_t> mask;
  std::size_t rows = 0;
  std::size_t len = 0;
  bool context_from_augmented = false;
};

// `focus` must be present for every variant except S2S, whose keys are the
// raw encoder states.
inline AttentionMemory prepare_attention(Tape& tape, const Model& model, const std::vector<Var>& h_x,
                                         std::span<const std::uint8_t> post_mask, std::optional<Var> focus) {
  AttentionMemory mem;
  mem.states = h_x;
  mem.rows = h_x.front().rows();
  mem.len = h_x.size();
  mem.mask.assign(post_mask.begin(), post_mask.end());
  mem.context_from_augmented = model.config().context_from_augmented;
  const bool augment = model.variant() != Variant::S2S;
  if (augment && !focus) throw PhaseError("variant " + to_string(model.variant()) + " needs a focus distribution");
  Var W_a = tape.param(*model.attention().W_a);
  for (std::size_t i = 0; i < mem.len; ++i) {
    Var a = augment ? ad::concat_cols({h_x[i], ad::slice_cols(*focus, i, 1)}) : h_x[i];
    mem.augmented.push_back(a);
    mem.keys.push_back(ad::matmul(a, W_a));
  }
  return mem;
}

// D_t on the tape: d[b, i] = sum of attention on position i over the steps
// row b has taken so far.
struct Coverage {
  Var d;  // [rows x len]
  std::size_t step = 0;
};

inline Coverage initial_coverage(Tape& tape, std::size_t rows, std::size_t len) {
  return {tape.constant(Tensor(Shape{rows, len})), 0};
}

struct AttendResult {
  Var alpha;    // [rows x len]
  Var context;  // [rows x d_h]
  Coverage coverage;
};

// One decoding step of attention:
//   e_i = v_a . tanh(h'_i W_a + s_prev U_a + a_prev V_a),  a_prev = sum_i d_i h'_i
//   alpha = masked softmax(e), context = sum_i alpha_i h_i
// The a_prev term is present only for FocCoverage and FocConstrain. Rows with
// active[b] == 0 (already finished) leave their coverage untouched; an empty
// `active` means every row is live.
inline AttendResult attend_step(Tape& tape, const Model& model, const AttentionMemory& mem, Var s_prev,
                                const Coverage& coverage, std::size_t t, std::span<const std::uint8_t> active = {}) {
  if (coverage.step + 1 != t)
    throw SequencingError("attend_step for step " + std::to_string(t) + " with coverage at step " +
                          std::to_string(coverage.step));
  using namespace ad;
  const auto& p = model.attention();
  Var query = matmul(s_prev, tape.param(*p.U_a));
  if (uses_coverage_term(model.variant())) {
    Var history = weighted_sum(coverage.d, mem.augmented);
    query = add(query, matmul(history, tape.param(*p.V_a)));
  }
  Var v_a = tape.param(*p.v_a);
  std::vector<Var> energies;
  energies.reserve(mem.len);
  for (const Var& k : mem.keys) energies.push_back(matmul(tanh(add(k, query)), v_a));
  Var alpha = masked_softmax(concat_cols(energies), mem.mask);
  Var context = weighted_sum(alpha, mem.context_from_augmented ? mem.augmented : mem.states);

  Var next = add(coverage.d, alpha);
  if (!active.empty()) next = where_rows(active, next, coverage.d);
  return {alpha, context, Coverage{next, t}};
}

// Focus vs. length-normalized accumulated attention for one generated or
// teacher-forced response, over the post's real positions.
struct AlignmentRecord {
  std::vector<double> focus;
  std::vector<double> coverage_over_len;
  double distance = 0.0;
  std::size_t argmax_focus = 0;
  std::size_t argmax_coverage = 0;
};

inline AlignmentRecord coverage_report(std::span<const double> coverage, std::size_t resp_len,
                                       std::span<const double> focus) {
  if (coverage.size() != focus.size())
    throw DimensionError("coverage_report: coverage of length " + std::to_string(coverage.size()) + " vs focus of length " +
                         std::to_string(focus.size()));
  if (resp_len == 0) throw ValidationError("coverage_report: response length 0");
  AlignmentRecord r;
  r.focus.assign(focus.begin(), focus.end());
  double sq = 0.0;
  for (std::size_t i = 0; i < coverage.size(); ++i) {
    const double c = coverage[i] / static_cast<double>(resp_len);
    r.coverage_over_len.push_back(c);
    sq += (c - focus[i]) * (c - focus[i]);
  }
  r.distance = std::sqrt(sq);
  if (!focus.empty()) {
    r.argmax_focus = static_cast<std::size_t>(std::max_element(focus.begin(), focus.end()) - focus.begin());
    r.argmax_coverage = static_cast<std::size_t>(std::max_element(r.coverage_over_len.begin(), r.coverage_over_len.end()) -
                                                 r.coverage_over_len.begin());
  }
  return r;
}

// CSV with columns position,token,focus,coverage_over_len.
inline void write_alignment_csv(const AlignmentRecord& r, std::span<const std::string> post_tokens, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "position,token,focus,coverage_over_len\n";
  char buf[64];
  for (std::size_t i = 0; i < r.focus.size(); ++i) {
    out << i << ',' << (i < post_tokens.size() ? post_tokens[i] : std::string()) << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.focus[i], r.coverage_over_len[i]);
    out << buf << '\n';
  }
}

}  // namespace fcvae
