#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "vitfl/checkpoint.hpp"
#include "vitfl/error.hpp"
#include "vitfl/matrix.hpp"
#include "vitfl/ops.hpp"
#include "vitfl/optim.hpp"
#include "vitfl/oracles.hpp"
#include "vitfl/summation.hpp"

using namespace vitfl;

TEST_SUITE("numeric-core") {

TEST_CASE("matmul: identity, annihilator and triple-loop oracle") {
  Rng rng(11);
  const Matrix a = test::random_matrix(3, 4, rng);
  CHECK(Matrix::identity(3) * a == a);
  CHECK(a * Matrix(4, 2, 0.0) == Matrix(3, 2, 0.0));

  const Matrix x = test::random_matrix(4, 5, rng);
  const Matrix y = test::random_matrix(5, 3, rng);
  const Matrix z = x * y;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 5; ++p) s += x(i, p) * y(p, j);
      CHECK(std::abs(z(i, j) - s) <= 1e-12);
    }

  // Same product through the autograd op.
  Tensor tx = Tensor::from({4, 5}, {x.data().begin(), x.data().end()});
  Tensor ty = Tensor::from({5, 3}, {y.data().begin(), y.data().end()});
  const Tensor tz = ops::matmul(tx, ty);
  for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(tz[i] - z.data()[i]) <= 1e-12);

  CHECK_THROWS_AS(ops::matmul(tx, tx), ShapeError);
}

TEST_CASE("gemm transposed layouts agree with explicit transposes") {
  Rng rng(5);
  const Matrix a = test::random_matrix(3, 4, rng);
  const Matrix b = test::random_matrix(4, 2, rng);
  const Matrix want = a * b;
  const Matrix at = a.transposed(), bt = b.transposed();
  for (int ta = 0; ta < 2; ++ta)
    for (int tb = 0; tb < 2; ++tb) {
      Matrix c(3, 2);
      gemm(ta, tb, 3, 2, 4, 1.0, (ta ? at : a).data().data(), (tb ? bt : b).data().data(), 0.0,
           c.data().data());
      for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(c.data()[i] - want.data()[i]) <= 1e-12);
    }
}

TEST_CASE("cross-entropy") {
  const std::vector<int> one{3};
  CHECK(ops::cross_entropy(Tensor::zeros({1, 10}), one).item() == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(std::abs(ops::cross_entropy(Tensor::zeros({1, 10}), one).item() - std::log(10.0)) < 1e-12);

  std::vector<double> sat(10, 0.0);
  sat[3] = 100.0;
  CHECK(ops::cross_entropy(Tensor::from({1, 10}, sat), one).item() < 1e-8);

  Rng rng(21);
  std::vector<double> logits(12);
  for (double& v : logits) v = rng.normal(0.0, 3.0);
  const std::vector<int> labels{0, 3, 1};
  double want = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double mx = -1e300;
    for (std::size_t c = 0; c < 4; ++c) mx = std::max(mx, logits[r * 4 + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += std::exp(logits[r * 4 + c] - mx);
    want += mx + std::log(s) - logits[r * 4 + labels[r]];
  }
  want /= 3.0;
  CHECK(std::abs(ops::cross_entropy(Tensor::from({3, 4}, logits), labels).item() - want) <= 1e-10);
}

TEST_CASE("backward on trivial losses") {
  Tensor w = Tensor::from({2, 3}, {1, -2, 3, 0.5, 7, -1}, true);
  ops::sum(w).backward();
  for (double g : w.grad()) CHECK(g == 1.0);

  Tensor v = Tensor::from({4}, {1, 2, 3, 4}, true);
  ops::sum(ops::scale(v, 0.0)).backward();
  for (double g : v.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward accumulates into shared leaves and runs once per graph") {
  Tensor w = Tensor::from({3}, {1, 2, 3}, true);
  Tensor loss = ops::sum(ops::mul(w, w));
  loss.backward();
  CHECK(w.grad()[0] == 2.0);
  CHECK(w.grad()[2] == 6.0);
  CHECK_THROWS_AS(loss.backward(), Error);

  ops::sum(w).backward();  // accumulates until zero_grad
  CHECK(w.grad()[0] == 3.0);
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("no-grad guard records nothing") {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = ops::sum(ops::mul(w, w));
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(grad_enabled());
}

TEST_CASE("non-finite values raise NumericError") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ops::add(Tensor::from({1}, {inf}), Tensor::from({1}, {-inf})), NumericError);
  CHECK_THROWS_AS(ops::scale(Tensor::from({1}, {1e308}), 1e10), NumericError);
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  for (const auto& c : oracles::op_gradient_cases()) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto g = c.run(derive_seed({77, seed}));
      INFO(c.name << " seed " << seed << " at " << g.worst);
      CHECK(g.checked > 0);
      CHECK(g.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("SGD step") {
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::SgdMomentum;
  cfg.learning_rate = 1.0;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  Optimizer opt(cfg);
  std::vector<ParamTensor> p{{"w", Tensor::from({2}, {0, 0}, true)}};
  p[0].value.mutable_grad()[0] = 1.0;
  p[0].value.mutable_grad()[1] = 2.0;
  opt.step(p);
  CHECK(p[0].value[0] == -1.0);
  CHECK(p[0].value[1] == -2.0);

  p[0].value.zero_grad();
  opt.step(p);
  CHECK(p[0].value[0] == -1.0);
  CHECK(p[0].value[1] == -2.0);
}

TEST_CASE("SGD rejects non-finite updates without touching parameters") {
  Optimizer opt(OptimizerConfig::convolutional_default());
  std::vector<ParamTensor> p{{"w", Tensor::from({2}, {1, 1}, true)}};
  p[0].value.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(opt.step(p), NumericError);
  CHECK(p[0].value[0] == 1.0);
  CHECK(p[0].value[1] == 1.0);
}

TEST_CASE("AdamW trajectory matches a scalar oracle") {
  // f(w) = (w - 3)^2 / 2
  OptimizerConfig cfg = OptimizerConfig::transformer_default();
  cfg.learning_rate = 0.1;
  Optimizer opt(cfg);
  std::vector<ParamTensor> p{{"w", Tensor::from({1}, {0.5}, true)}};

  double w = 0.5, m = 0.0, v = 0.0;
  const double b1 = cfg.momentum, b2 = cfg.beta2;
  for (int t = 1; t <= 3; ++t) {
    const double g = w - 3.0;
    p[0].value.zero_grad();
    p[0].value.mutable_grad()[0] = p[0].value[0] - 3.0;
    opt.step(p);

    w -= cfg.learning_rate * cfg.weight_decay * w;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    CHECK(std::abs(p[0].value[0] - w) <= 1e-10);
  }
  CHECK(opt.steps_taken() == 3);
}

TEST_CASE("optimizer defaults") {
  const auto t = OptimizerConfig::transformer_default();
  CHECK(t.kind == OptimizerKind::AdamW);
  CHECK(t.learning_rate == 1e-5);
  CHECK(t.weight_decay == 0.05);
  CHECK(t.momentum == 0.9);
  const auto c = OptimizerConfig::convolutional_default();
  CHECK(c.kind == OptimizerKind::SgdMomentum);
  CHECK(c.learning_rate == 0.03);
  CHECK(c.weight_decay == 0.0);
  CHECK(c.momentum == 0.9);
}

TEST_CASE("exact summation is order independent") {
  std::vector<double> v{1e16, 1.0, -1e16, 3.0, 0.5, -2.5e15, 2.5e15};
  const double s = fsum(v);
  CHECK(s == 4.5);
  std::sort(v.begin(), v.end());
  do {
    CHECK(fsum(v) == s);
  } while (std::next_permutation(v.begin(), v.begin() + 4));

  ExactSum acc;
  for (int i = 0; i < 10; ++i) acc.add(0.1);
  CHECK(acc.value() == 1.0);
}

TEST_CASE("seed derivation and rng streams are deterministic") {
  CHECK(derive_seed({1, 2, 3}) == derive_seed({1, 2, 3}));
  CHECK(derive_seed({1, 2, 3}) != derive_seed({1, 3, 2}));
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const double t = r.truncated_normal(0.5);
    CHECK(std::abs(t) <= 1.0);
    CHECK(r.below(7) < 7);
  }
}

TEST_CASE("checkpoint round trip and truncation") {
  const auto dir = test::scratch("checkpoint");
  Checkpoint ck;
  ModelParams p({NamedArray{"a.weight", {2, 2}, {1, 2, 3, 4}, ParamKind::Trainable, 0},
                 NamedArray{"bn.running_mean", {2}, {0.5, -0.25}, ParamKind::Buffer, 1}});
  ck.add_params("server/", p);
  ck.add_scalar("round", 7);
  ck.save(dir / "x.ckpt");
  const Checkpoint back = Checkpoint::load(dir / "x.ckpt");
  CHECK(back == ck);
  CHECK(back.params("server/", p) == p);
  CHECK(back.scalar("round") == 7.0);
  CHECK(back.has_section("server/"));
  CHECK_FALSE(back.has_section("client/0/"));

  const auto size = std::filesystem::file_size(dir / "x.ckpt");
  std::filesystem::resize_file(dir / "x.ckpt", size - 3);
  CHECK_THROWS_AS(Checkpoint::load(dir / "x.ckpt"), FormatError);
  CHECK_THROWS_AS(Checkpoint::load(dir / "missing.ckpt"), Error);
}

}  // TEST_SUITE
