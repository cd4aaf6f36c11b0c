#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>

#include "fcvae/autodiff.hpp"
#include "fcvae/gradcheck.hpp"
#include "fcvae/gru.hpp"

using namespace fcvae;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(s));
  for (double& v : t.storage()) v = d(rng);
  return t;
}

// sum(y * R) for a fixed random R, so every output element gets its own
// upstream gradient.
Var project(Tape& tape, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(rng, y.value().shape()))));
}

}  // namespace

TEST_CASE("matmul values and errors") {
  Tape t;
  Var a = t.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var i = t.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  CHECK(ad::matmul(a, i).value() == Tensor::matrix({{1, 2}, {3, 4}}));
  Var r = t.constant(Tensor::matrix({{1, 2}}));
  Var c = t.constant(Tensor::matrix({{3}, {4}}));
  CHECK(ad::matmul(r, c).value().item() == 11.0);

  Var bad = t.constant(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  try {
    ad::matmul(r, bad);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x2]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient equals ones * b^T") {
  std::mt19937_64 rng(3);
  ParameterStore s;
  Parameter& a = s.add("a", random_tensor(rng, {2, 3}));
  Tensor b = random_tensor(rng, {3, 4});
  Tape t;
  t.backward(ad::sum(ad::matmul(t.param(a), t.constant(b))));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 4; ++j) expect += b.at(k, j);
      CHECK_THAT(a.tensor.grad[i * 3 + k], WithinAbs(expect, 1e-15));
    }
  GradCheckOptions tight;
  tight.tolerance = 1e-6;
  auto r = grad_check({&a}, [&](Tape& tp) { return ad::sum(ad::matmul(tp.param(a), tp.constant(b))); }, tight);
  CHECK(r.pass);
}

TEST_CASE("elementwise values") {
  Tape t;
  CHECK(ad::tanh(t.constant(Tensor::scalar(0.0))).value().item() == 0.0);
  CHECK_THAT(ad::tanh(t.constant(Tensor::scalar(1.0))).value().item(), WithinAbs(0.7615941559557649, 1e-15));
  CHECK(ad::exp(t.constant(Tensor::scalar(0.0))).value().item() == 1.0);
  CHECK(ad::neg(t.constant(Tensor::scalar(2.0))).value().item() == -2.0);
  CHECK_THROWS_AS(ad::log(t.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  CHECK_THROWS_AS(ad::log(t.constant(Tensor::scalar(-1.0))), DomainError);
  Var s = t.constant(Tensor::scalar(2.0));
  Var v = t.constant(Tensor::vector({1, 2, 3}));
  CHECK(ad::mul(s, v).value() == Tensor::vector({2, 4, 6}));
  CHECK(ad::add(v, s).value() == Tensor::vector({3, 4, 5}));
  CHECK_THROWS_AS(ad::add(v, t.constant(Tensor::vector({1, 2}))), DimensionError);
}

TEST_CASE("tanh derivative at 1") {
  ParameterStore s;
  Parameter& x = s.add("x", Tensor::scalar(1.0));
  Tape t;
  t.backward(ad::tanh(t.param(x)));
  const double analytic = x.tensor.grad[0];
  const double th = std::tanh(1.0);
  CHECK_THAT(analytic, WithinAbs(1.0 - th * th, 1e-15));
  CHECK_THAT(analytic, WithinAbs(0.41997434, 1e-8));
  const double h = 1e-5;
  const double numeric = (std::tanh(1.0 + h) - std::tanh(1.0 - h)) / (2 * h);
  CHECK_THAT(analytic, WithinAbs(numeric, 1e-7));
}

TEST_CASE("masked softmax") {
  Tape t;
  auto sm = [&](Tensor x, std::vector<std::uint8_t> m = {}) { return ad::masked_softmax(t.constant(std::move(x)), m).value(); };
  auto u = sm(Tensor::matrix(1, 3, {0, 0, 0}));
  for (double v : u.data()) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));
  auto p = sm(Tensor::matrix(1, 3, {1, 2, 3}));
  CHECK_THAT(p[0], WithinAbs(0.09003057, 1e-8));
  CHECK_THAT(p[1], WithinAbs(0.24472847, 1e-8));
  CHECK_THAT(p[2], WithinAbs(0.66524096, 1e-8));
  auto m = sm(Tensor::matrix(1, 3, {5, 5, 5}), {1, 1, 0});
  CHECK(m[0] == 0.5);
  CHECK(m[1] == 0.5);
  CHECK(m[2] == 0.0);
  CHECK_THROWS_AS(sm(Tensor::matrix(2, 2, {1, 2, 3, 4}), {1, 1, 0, 0}), InvalidMaskError);
  // Large logits stay finite thanks to max subtraction.
  auto big = sm(Tensor::matrix(1, 2, {1000, 1000}));
  CHECK(big[0] == 0.5);
}

TEST_CASE("masked softmax invariants over random draws") {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution keep(0.7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + trial % 4, cols = 1 + trial % 7;
    Tensor x = random_tensor(rng, {rows, cols}, -20, 20);
    std::vector<std::uint8_t> mask(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) mask[r * cols + c] = keep(rng);
      mask[r * cols + trial % cols] = 1;
    }
    Tape t;
    const Tensor y = ad::masked_softmax(t.constant(x), mask).value();
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double v = y[r * cols + c];
        CHECK(v >= 0.0);
        if (!mask[r * cols + c]) CHECK(v == 0.0);
        sum += v;
      }
      CHECK_THAT(sum, WithinAbs(1.0, 1e-12));
    }
  }
}

TEST_CASE("masked positions receive exactly zero gradient") {
  std::mt19937_64 rng(5);
  ParameterStore s;
  Parameter& x = s.add("x", random_tensor(rng, {2, 3}));
  const std::vector<std::uint8_t> mask{1, 0, 1, 1, 1, 0};
  Tape t;
  t.backward(project(t, ad::masked_softmax(t.param(x), mask), 9));
  CHECK(x.tensor.grad[1] == 0.0);
  CHECK(x.tensor.grad[5] == 0.0);
}

TEST_CASE("gru_cell closed forms") {
  ParameterStore s;
  std::mt19937_64 rng(1);
  GruParams g = GruParams::create(s, "g", 3, 2, 0.0, rng);
  for (Parameter* p : s.all()) std::fill(p->tensor.storage().begin(), p->tensor.storage().end(), 0.0);
  Tape t;
  Var x = t.constant(Tensor::matrix(1, 3, {0.3, -0.2, 0.9}));
  Var h = t.constant(Tensor::matrix(1, 2, {0.8, -0.4}));
  const Tensor out = gru_cell(x, h, g).value();
  CHECK(out[0] == 0.4);
  CHECK(out[1] == -0.2);

  GruParams w = GruParams::create(s, "w", 3, 2, 0.5, rng);
  for (Parameter* p : {w.b_u, w.b_r, w.b_h}) std::fill(p->tensor.storage().begin(), p->tensor.storage().end(), 0.0);
  const Tensor zero = gru_cell(t.constant(Tensor(Shape{1, 3})), t.constant(Tensor(Shape{1, 2})), w).value();
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  CHECK_THROWS_AS(gru_cell(t.constant(Tensor(Shape{1, 2})), h, g), DimensionError);
}

TEST_CASE("gru_cell gradient") {
  std::mt19937_64 rng(2);
  ParameterStore s;
  GruParams g = GruParams::create(s, "g", 3, 4, 0.6, rng);
  Parameter& x = s.add("x", random_tensor(rng, {2, 3}));
  Parameter& h = s.add("h", random_tensor(rng, {2, 4}));
  GradCheckOptions o;
  o.tolerance = 1e-5;
  auto r = grad_check(s.all(), [&](Tape& t) { return ad::sum(gru_cell(t.param(x), t.param(h), g)); }, o);
  INFO(r);
  CHECK(r.pass);
}

namespace {

struct Draw {
  ParameterStore s;
  Parameter *a, *b, *m, *row, *col, *sc, *pos, *table;
  explicit Draw(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    a = &s.add("a", random_tensor(rng, {3, 4}));
    b = &s.add("b", random_tensor(rng, {3, 4}));
    m = &s.add("m", random_tensor(rng, {4, 2}));
    row = &s.add("row", random_tensor(rng, {1, 4}));
    col = &s.add("col", random_tensor(rng, {3, 1}));
    sc = &s.add("sc", random_tensor(rng, {}));
    pos = &s.add("pos", random_tensor(rng, {3, 4}, 0.5, 2.0));
    table = &s.add("table", random_tensor(rng, {5, 4}));
  }
};

struct OpCase {
  const char* name;
  std::function<std::vector<Parameter*>(Draw&)> inputs;
  std::function<Var(Tape&, Draw&, std::uint64_t)> f;
};

const std::vector<std::uint8_t> kMask{1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1};
const std::vector<int> kIds{4, 0, 4, 2};
const std::vector<int> kTargets{1, 3, 0};
const std::vector<double> kWeights{0.5, 0.0, 1.5};
const std::vector<std::uint8_t> kRows{1, 0, 1};

std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](Draw& d) { return std::vector{d.a, d.m}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::matmul(t.param(*d.a), t.param(*d.m)), k); }},
      {"add sub mul", [](Draw& d) { return std::vector{d.a, d.b}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         Var x = t.param(*d.a), y = t.param(*d.b);
         return project(t, ad::mul(ad::add(x, y), ad::sub(x, y)), k);
       }},
      {"scalar broadcast", [](Draw& d) { return std::vector{d.a, d.sc}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         return project(t, ad::mul(t.param(*d.sc), ad::add(t.param(*d.a), t.param(*d.sc))), k);
       }},
      {"neg scale", [](Draw& d) { return std::vector{d.a}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::scale(ad::neg(t.param(*d.a)), 0.7), k); }},
      {"tanh sigmoid exp log", [](Draw& d) { return std::vector{d.a, d.pos}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         Var x = t.param(*d.a);
         return project(t, ad::add(ad::add(ad::tanh(x), ad::sigmoid(x)), ad::add(ad::exp(x), ad::log(t.param(*d.pos)))), k);
       }},
      // Some entries fall outside the bounds and must get zero gradient.
      {"clamp", [](Draw& d) { return std::vector{d.a}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::clamp(t.param(*d.a), -0.5, 0.5), k); }},
      {"add_row mul_col", [](Draw& d) { return std::vector{d.a, d.row, d.col}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         return project(t, ad::mul_col(ad::add_row(t.param(*d.a), t.param(*d.row)), t.param(*d.col)), k);
       }},
      {"concat slice", [](Draw& d) { return std::vector{d.a, d.b}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         return project(t, ad::slice_cols(ad::concat_cols({t.param(*d.a), t.param(*d.b)}), 2, 4), k);
       }},
      {"gather_rows", [](Draw& d) { return std::vector{d.table}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::gather_rows(t.param(*d.table), kIds), k); }},
      {"where_rows", [](Draw& d) { return std::vector{d.a, d.b}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::where_rows(kRows, t.param(*d.a), t.param(*d.b)), k); }},
      {"masked_softmax", [](Draw& d) { return std::vector{d.a}; },
       [](Tape& t, Draw& d, std::uint64_t k) { return project(t, ad::masked_softmax(t.param(*d.a), kMask), k); }},
      {"cross_entropy", [](Draw& d) { return std::vector{d.a}; },
       [](Tape& t, Draw& d, std::uint64_t) { return ad::cross_entropy(t.param(*d.a), kTargets, kWeights); }},
      {"sum mean sum_cols row_l2norm", [](Draw& d) { return std::vector{d.a}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         Var x = t.param(*d.a);
         return ad::add(ad::add(ad::sum(ad::row_l2norm(x)), ad::mean(x)), project(t, ad::sum_cols(x), k));
       }},
      {"weighted_sum", [](Draw& d) { return std::vector{d.a, d.b}; },
       [](Tape& t, Draw& d, std::uint64_t k) {
         Var w = ad::masked_softmax(ad::slice_cols(t.param(*d.a), 0, 2));
         Var b = t.param(*d.b);
         return project(t, ad::weighted_sum(w, {b, ad::mul(b, b)}), k);
       }},
  };
}

}  // namespace

TEST_CASE("every primitive passes finite differences over 10 draws") {
  for (const OpCase& op : op_cases())
    for (std::uint64_t draw = 0; draw < 10; ++draw) {
      Draw d(100 + draw);
      INFO(op.name << " draw " << draw);
      auto r = grad_check(op.inputs(d), [&](Tape& t) { return op.f(t, d, 1000 + draw); });
      INFO(r);
      CHECK(r.pass);
    }
}

TEST_CASE("cross entropy values") {
  Tape t;
  Var logits = t.constant(Tensor::matrix(2, 4, {0, 0, 0, 0, 0, 0, 0, 0}));
  const std::vector<int> tg{1, 3};
  const std::vector<double> w{0.5, 0.5};
  CHECK_THAT(ad::cross_entropy(logits, tg, w).value().item(), WithinAbs(std::log(4.0), 1e-15));
  const std::vector<int> bad{1, 4};
  CHECK_THROWS_AS(ad::cross_entropy(logits, bad, w), ValidationError);
}

TEST_CASE("grad_check oracles") {
  ParameterStore s;
  Parameter& x = s.add("x", Tensor::vector({1, 2, 3}));
  auto r = grad_check({&x}, [&](Tape& t) { Var v = t.param(x); return ad::sum(ad::mul(v, v)); });
  CHECK(x.tensor.grad == std::vector<double>{2, 4, 6});
  CHECK(r.pass);
  CHECK(r.max_rel_error() < 1e-8);

  Parameter& y = s.add("y", Tensor::vector({1, 2}));
  auto c = grad_check({&y}, [&](Tape& t) { return t.constant(Tensor::scalar(4.0)); });
  CHECK(y.tensor.grad == std::vector<double>{0, 0});
  CHECK(c.pass);
  CHECK(c.max_rel_error() == 0.0);
}

TEST_CASE("grad_check reports the probe location of a non-finite value") {
  ParameterStore s;
  // exp overflows only once the second entry is nudged up by h.
  Parameter& x = s.add("x", Tensor::vector({1.0, std::log(std::numeric_limits<double>::max()) - 5e-6}));
  try {
    grad_check({&x}, [&](Tape& t) { Var v = t.param(x); return ad::sum(ad::exp(v)); });
    FAIL("expected an evaluation error");
  } catch (const EvaluationError& e) {
    CHECK(std::string(e.what()).find("x[1]") != std::string::npos);
  }
  Parameter& y = s.add("y", Tensor::vector({1e300}));
  CHECK_THROWS_WITH(grad_check({&y}, [&](Tape& t) { return ad::sum(ad::exp(t.param(y))); }),
                    Catch::Matchers::ContainsSubstring("base point"));
}

TEST_CASE("backward is deterministic and skips frozen tensors") {
  std::mt19937_64 rng(8);
  ParameterStore s;
  Parameter& a = s.add("a", random_tensor(rng, {3, 3}));
  Parameter& frozen = s.add("frozen", random_tensor(rng, {3, 3}));
  frozen.tensor.requires_grad = false;
  frozen.tensor.grad.clear();
  auto run = [&] {
    a.tensor.zero_grad();
    Tape t;
    Var y = ad::tanh(ad::matmul(t.param(a), t.param(frozen)));
    t.backward(project(t, ad::masked_softmax(y), 4));
    return a.tensor.grad;
  };
  const auto g1 = run();
  const auto g2 = run();
  CHECK(g1 == g2);
  CHECK(frozen.tensor.grad.empty());
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor(Shape{0, 2}), DimensionError);
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  t.enable_grad();
  CHECK(t.grad.size() == t.size());
  ParameterStore s;
  s.add("p", Tensor::scalar(1));
  CHECK_THROWS_AS(s.add("p", Tensor::scalar(2)), ConfigError);
}
