#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "lambo/autodiff.hpp"
#include "lambo/rng.hpp"

using namespace lambo;
using namespace lambo::ad;
using lambo::test::grad_check_probes;
using lambo::test::ScalarFn;

namespace {

// scalar loss = sum(weights .* x), weights fixed per check
Var weighted(Tape& t, Var x, const Tensor& w) { return sum(mul_const(x, w)); }

Tensor rand_t(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
  return rng.normal_tensor(std::move(shape), 0.0, scale);
}

Tensor spd(Rng& rng, std::size_t n) {
  Tensor m = rng.normal_tensor({n, n});
  Tensor a = linalg::matmul(m, linalg::transpose(m));
  for (std::size_t i = 0; i < n; ++i) a.at2(i, i) += static_cast<double>(n);
  return a;
}

Tensor ones_mask(std::size_t n, std::size_t t) { return Tensor::full({n, t}, 1.0); }

}  // namespace

TEST_CASE("backward of sum of squares") {
  Tape t;
  Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
  Var loss = sum(mul(x, x));
  t.backward(loss);
  Tensor g = t.grad_of(x);
  CHECK(g[0] == Catch::Approx(2.0));
  CHECK(g[1] == Catch::Approx(4.0));
}

TEST_CASE("off-path tensors get zero gradient") {
  Tape t;
  Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
  Var y = t.leaf(Tensor({2}, {3.0, 4.0}));
  Var loss = sum(mul(x, x));
  t.backward(loss);
  Tensor gy = t.grad_of(y);
  CHECK(gy[0] == 0.0);
  CHECK(gy[1] == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Tape t;
  Var x = t.leaf(Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(x), NotScalar);
}

TEST_CASE("gradient accumulation at fan-out") {
  Tape t;
  Var x = t.leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Var f = sum(mul(x, x));
  Var g = sum(vexp(x));
  Var loss = add(f, g);
  t.backward(loss);
  Tensor grad = t.grad_of(x);

  Tape t2;
  Var x2 = t2.leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Var f2 = sum(mul(x2, x2));
  t2.backward(f2);
  Tensor gf = t2.grad_of(x2);

  Tape t3;
  Var x3 = t3.leaf(Tensor({3}, {1.0, -2.0, 0.5}));
  Var g3 = sum(vexp(x3));
  t3.backward(g3);
  Tensor gg = t3.grad_of(x3);

  for (std::size_t i = 0; i < 3; ++i) CHECK(grad[i] == Catch::Approx(gf[i] + gg[i]));
}

TEST_CASE("determinism: identical tape gives bitwise identical gradients") {
  auto run = [] {
    Rng rng(11);
    Tape t;
    Var x = t.leaf(rng.normal_tensor({4, 4}));
    Var l = t.leaf(rng.normal_tensor({4, 3}));
    Var loss = sum(vexp(scale(matmul(x, l), 0.1)));
    t.backward(loss);
    return std::make_pair(t.grad_of(x).values(), t.grad_of(l).values());
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("masked conv with identity kernel reproduces input") {
  // single channel, center tap 1
  Tape t;
  Tensor x({1, 4, 1}, {1.0, 2.0, 3.0, 0.0});
  Tensor mask({1, 4}, {1.0, 1.0, 1.0, 0.0});
  Var xv = t.leaf(x);
  Var w = t.constant(Tensor({1, 1, 3}, {0.0, 1.0, 0.0}));
  Var b = t.constant(Tensor({1}));
  Var y = conv1d_masked(xv, w, b, mask);
  CHECK(y.val().at3(0, 0, 0) == Catch::Approx(1.0));
  CHECK(y.val().at3(0, 1, 0) == Catch::Approx(2.0));
  CHECK(y.val().at3(0, 2, 0) == Catch::Approx(3.0));
  CHECK(y.val().at3(0, 3, 0) == 0.0);  // padding position stays zero
}

TEST_CASE("layer norm of a constant vector is zero before affine") {
  Tape t;
  Var x = t.leaf(Tensor({1, 1, 4}, {3.0, 3.0, 3.0, 3.0}));
  Var gain = t.constant(Tensor({4}, {1.0, 1.0, 1.0, 1.0}));
  Var bias = t.constant(Tensor({4}));
  Var y = layer_norm(x, gain, bias, ones_mask(1, 1));
  for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y.val()[j]) < 1e-9);
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape t;
  Var x = t.leaf(Tensor({1, 1, 5}, {2.0, 2.0, 2.0, 2.0, 2.0}));
  Var y = softmax_lastdim(x);
  for (std::size_t j = 0; j < 5; ++j) CHECK(y.val()[j] == Catch::Approx(0.2));
}

TEST_CASE("per-primitive randomized gradient checks") {
  Rng rng(2024);
  const int probes = 20;
  const double tol = 1e-4;

  SECTION("elementwise add/mul/neg/exp/log/sqrt") {
    for (int i = 0; i < probes; ++i) {
      Tensor a = rand_t(rng, {3, 4});
      Tensor b = rand_t(rng, {3, 4});
      Tensor pos = rand_t(rng, {3, 4});
      for (auto& x : pos.values()) x = std::abs(x) + 0.5;
      Tensor w = rand_t(rng, {3, 4});
      ScalarFn f_add = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, add(v[0], v[1]), w);
      };
      ScalarFn f_mul = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, mul(v[0], v[1]), w);
      };
      ScalarFn f_neg = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, neg(v[0]), w);
      };
      ScalarFn f_exp = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, vexp(v[0]), w);
      };
      ScalarFn f_log = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, vlog(v[0]), w);
      };
      ScalarFn f_sqrt = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, vsqrt(v[0]), w);
      };
      CHECK(grad_check_probes(f_add, {a, b}, rng, 1) < tol);
      CHECK(grad_check_probes(f_mul, {a, b}, rng, 1) < tol);
      CHECK(grad_check_probes(f_neg, {a}, rng, 1) < tol);
      CHECK(grad_check_probes(f_exp, {a}, rng, 1) < tol);
      CHECK(grad_check_probes(f_log, {pos}, rng, 1) < tol);
      CHECK(grad_check_probes(f_sqrt, {pos}, rng, 1) < tol);
    }
  }

  SECTION("matmul / transpose / reshape / concat / diag") {
    for (int i = 0; i < probes; ++i) {
      Tensor a = rand_t(rng, {3, 4});
      Tensor b = rand_t(rng, {4, 2});
      Tensor w = rand_t(rng, {3, 2});
      ScalarFn f = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, matmul(v[0], v[1]), w);
      };
      CHECK(grad_check_probes(f, {a, b}, rng, 1) < tol);

      Tensor wt = rand_t(rng, {4, 3});
      ScalarFn ft = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, transpose(v[0]), wt);
      };
      CHECK(grad_check_probes(ft, {a}, rng, 1) < tol);

      Tensor wc = rand_t(rng, {3, 8});
      ScalarFn fc = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, concat_lastdim(v[0], v[1]), wc);
      };
      CHECK(grad_check_probes(fc, {a, a}, rng, 1) < tol);

      Tensor sq = rand_t(rng, {4, 4});
      Tensor wd = rand_t(rng, {4});
      ScalarFn fd = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, take_diag(v[0]), wd);
      };
      CHECK(grad_check_probes(fd, {sq}, rng, 1) < tol);

      Tensor vec = rand_t(rng, {4});
      Tensor wde = rand_t(rng, {4, 4});
      ScalarFn fde = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, diag_embed(v[0]), wde);
      };
      CHECK(grad_check_probes(fde, {vec}, rng, 1) < tol);
    }
  }

  SECTION("kron / pairwise_sqdist / smul") {
    for (int i = 0; i < probes; ++i) {
      Tensor a = rand_t(rng, {2, 3});
      Tensor b = rand_t(rng, {2, 2});
      Tensor w = rand_t(rng, {4, 6});
      ScalarFn fk = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, kron(v[0], v[1]), w);
      };
      CHECK(grad_check_probes(fk, {a, b}, rng, 1) < tol);

      Tensor fa = rand_t(rng, {3, 4});
      Tensor fb = rand_t(rng, {2, 4});
      Tensor wp = rand_t(rng, {3, 2});
      ScalarFn fp = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, pairwise_sqdist(v[0], v[1]), wp);
      };
      CHECK(grad_check_probes(fp, {fa, fb}, rng, 1) < tol);

      Tensor s = rand_t(rng, {});
      Tensor ws = rand_t(rng, {3, 4});
      ScalarFn fs = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, smul(v[0], v[1]), ws);
      };
      CHECK(grad_check_probes(fs, {fa, s}, rng, 1) < tol);
    }
  }

  SECTION("cholesky and triangular solve") {
    for (int i = 0; i < probes; ++i) {
      Tensor a = spd(rng, 4);
      Tensor w = rand_t(rng, {4, 4});
      ScalarFn f = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, ad::cholesky(v[0]), w);
      };
      CHECK(grad_check_probes(f, {a}, rng, 1, 1e-5, {true}) < tol);

      Tensor b = rand_t(rng, {4, 2});
      Tensor wb = rand_t(rng, {4, 2});
      for (bool trans : {false, true}) {
        ScalarFn fsol = [&, trans](Tape& t, const std::vector<Var>& v) {
          Var l = ad::cholesky(v[0]);
          return weighted(t, solve_tri(l, v[1], trans), wb);
        };
        CHECK(grad_check_probes(fsol, {a, b}, rng, 1, 1e-5, {true, false}) < tol);
      }
    }
  }

  SECTION("nn primitives: embed, conv, layernorm, swish, linear, pool") {
    std::vector<std::vector<std::size_t>> ids = {{0, 2, 1, 3}, {3, 3, 0, 0}};
    Tensor mask({2, 4}, {1, 1, 1, 0, 1, 1, 1, 1});
    for (int i = 0; i < probes; ++i) {
      Tensor table = rand_t(rng, {4, 3});
      Tensor we = rand_t(rng, {2, 4, 3});
      ScalarFn fe = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, embed(v[0], ids, mask), we);
      };
      CHECK(grad_check_probes(fe, {table}, rng, 1) < tol);

      Tensor x = rand_t(rng, {2, 4, 3});
      Tensor cw = rand_t(rng, {2, 3, 3});
      Tensor cb = rand_t(rng, {2});
      Tensor wo = rand_t(rng, {2, 4, 2});
      ScalarFn fconv = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, conv1d_masked(v[0], v[1], v[2], mask), wo);
      };
      CHECK(grad_check_probes(fconv, {x, cw, cb}, rng, 1) < tol);

      Tensor gain = rand_t(rng, {3});
      Tensor bias = rand_t(rng, {3});
      Tensor wl = rand_t(rng, {2, 4, 3});
      ScalarFn fln = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, layer_norm(v[0], v[1], v[2], mask), wl);
      };
      CHECK(grad_check_probes(fln, {x, gain, bias}, rng, 1) < tol);

      ScalarFn fsw = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, swish(v[0]), wl);
      };
      CHECK(grad_check_probes(fsw, {x}, rng, 1) < tol);

      Tensor lw = rand_t(rng, {5, 3});
      Tensor lb = rand_t(rng, {5});
      Tensor wlin = rand_t(rng, {2, 4, 5});
      ScalarFn flin = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, linear(v[0], v[1], v[2]), wlin);
      };
      CHECK(grad_check_probes(flin, {x, lw, lb}, rng, 1) < tol);

      Tensor wpool = rand_t(rng, {2, 3});
      ScalarFn fpool = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, masked_mean_pool(v[0], mask), wpool);
      };
      CHECK(grad_check_probes(fpool, {x}, rng, 1) < tol);
    }
  }

  SECTION("softmax, log-softmax, cross entropy, entropy, reductions") {
    std::vector<std::vector<std::size_t>> targets = {{1, 0, 2, 2}, {0, 1, 1, 0}};
    Tensor sel({2, 4}, {1, 0, 1, 0, 0, 1, 0, 0});
    for (int i = 0; i < probes; ++i) {
      Tensor logits = rand_t(rng, {2, 4, 3});
      Tensor w = rand_t(rng, {2, 4, 3});
      ScalarFn fsm = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, softmax_lastdim(v[0]), w);
      };
      ScalarFn flsm = [&](Tape& t, const std::vector<Var>& v) {
        return weighted(t, log_softmax_lastdim(v[0]), w);
      };
      ScalarFn fce = [&](Tape& t, const std::vector<Var>& v) {
        return cross_entropy_masked(v[0], targets, sel);
      };
      ScalarFn fent = [&](Tape& t, const std::vector<Var>& v) {
        return entropy_masked(v[0], sel);
      };
      ScalarFn fmean = [&](Tape& t, const std::vector<Var>& v) { return mean(v[0]); };
      ScalarFn fsum = [&](Tape& t, const std::vector<Var>& v) { return sum(v[0]); };
      CHECK(grad_check_probes(fsm, {logits}, rng, 1) < tol);
      CHECK(grad_check_probes(flsm, {logits}, rng, 1) < tol);
      CHECK(grad_check_probes(fce, {logits}, rng, 1) < tol);
      CHECK(grad_check_probes(fent, {logits}, rng, 1) < tol);
      CHECK(grad_check_probes(fmean, {logits}, rng, 1) < tol);
      CHECK(grad_check_probes(fsum, {logits}, rng, 1) < tol);
    }
  }
}

TEST_CASE("cholesky rejects non-PD input") {
  Tape t;
  Var a = t.leaf(Tensor({2, 2}, {1.0, 2.0, 2.0, 1.0}));
  CHECK_THROWS_AS(ad::cholesky(a), NotPositiveDefinite);
}

TEST_CASE("empty selections are rejected") {
  Tape t;
  Var logits = t.leaf(Tensor({1, 2, 3}));
  Tensor none({1, 2}, {0.0, 0.0});
  CHECK_THROWS_AS(cross_entropy_masked(logits, {{0, 0}}, none), EmptySelection);
  CHECK_THROWS_AS(entropy_masked(logits, none), EmptySelection);
}
