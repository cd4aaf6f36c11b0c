#pragma once

#include <random>
#include <string>

#include "fcvae/autodiff.hpp"

namespace fcvae {

// Parameters of one GRU cell, input width d_in and state width d_h. Inputs
// are rows, so x * W_u is [B x d_h].
struct GruParams {
  Parameter* W_u = nullptr;
  Parameter* W_r = nullptr;
  Parameter* W_h = nullptr;
  Parameter* U_u = nullptr;
  Parameter* U_r = nullptr;
  Parameter* U_h = nullptr;
  Parameter* b_u = nullptr;
  Parameter* b_r = nullptr;
  Parameter* b_h = nullptr;

  static GruParams create(ParameterStore& store, const std::string& prefix, std::size_t d_in, std::size_t d_h,
                          double init_scale, std::mt19937_64& rng) {
    GruParams g;
    g.W_u = &store.add_uniform(prefix + ".W_u", {d_in, d_h}, init_scale, rng);
    g.W_r = &store.add_uniform(prefix + ".W_r", {d_in, d_h}, init_scale, rng);
    g.W_h = &store.add_uniform(prefix + ".W_h", {d_in, d_h}, init_scale, rng);
    g.U_u = &store.add_uniform(prefix + ".U_u", {d_h, d_h}, init_scale, rng);
    g.U_r = &store.add_uniform(prefix + ".U_r", {d_h, d_h}, init_scale, rng);
    g.U_h = &store.add_uniform(prefix + ".U_h", {d_h, d_h}, init_scale, rng);
    g.b_u = &store.add_uniform(prefix + ".b_u", {1, d_h}, init_scale, rng);
    g.b_r = &store.add_uniform(prefix + ".b_r", {1, d_h}, init_scale, rng);
    g.b_h = &store.add_uniform(prefix + ".b_h", {1, d_h}, init_scale, rng);
    return g;
  }

  static GruParams lookup(ParameterStore& store, const std::string& prefix) {
    GruParams g;
    g.W_u = &store.get(prefix + ".W_u");
    g.W_r = &store.get(prefix + ".W_r");
    g.W_h = &store.get(prefix + ".W_h");
    g.U_u = &store.get(prefix + ".U_u");
    g.U_r = &store.get(prefix + ".U_r");
    g.U_h = &store.get(prefix + ".U_h");
    g.b_u = &store.get(prefix + ".b_u");
    g.b_r = &store.get(prefix + ".b_r");
    g.b_h = &store.get(prefix + ".b_h");
    return g;
  }

  std::size_t input_size() const { return W_u->tensor.rows(); }
  std::size_t state_size() const { return U_u->tensor.rows(); }
};

// u = sigmoid(x W_u + h U_u + b_u)
// r = sigmoid(x W_r + h U_r + b_r)
// c = tanh(x W_h + (r * h) U_h + b_h)
// h' = (1 - u) * h + u * c
inline Var gru_cell(Var x, Var h_prev, const GruParams& w) {
  using namespace ad;
  Tape& t = x.tape();
  if (x.cols() != w.input_size() || h_prev.cols() != w.state_size() || x.rows() != h_prev.rows())
    throw DimensionError("gru_cell: input " + shape_str(x.value().shape()) + ", state " +
                         shape_str(h_prev.value().shape()) + " for cell " + std::to_string(w.input_size()) + "->" +
                         std::to_string(w.state_size()));
  Var u = sigmoid(add_row(add(matmul(x, t.param(*w.W_u)), matmul(h_prev, t.param(*w.U_u))), t.param(*w.b_u)));
  Var r = sigmoid(add_row(add(matmul(x, t.param(*w.W_r)), matmul(h_prev, t.param(*w.U_r))), t.param(*w.b_r)));
  Var c = tanh(add_row(add(matmul(x, t.param(*w.W_h)), matmul(mul(r, h_prev), t.param(*w.U_h))), t.param(*w.b_h)));
  // (1 - u) * h + u * c == h + u * (c - h)
  return add(h_prev, mul(u, sub(c, h_prev)));
}

}  // namespace fcvae
