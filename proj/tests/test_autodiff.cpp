#include <doctest.h>

#include <random>

#include "gcct/autodiff.hpp"
#include "gcct/conv.hpp"
#include "test_util.hpp"

using namespace gcct;
using testutil::fd_gradient;
using testutil::max_abs_diff;

namespace {

// FD-checks d(sum of f(x)) / dx for an arbitrary graph builder.
void check_grad(const std::function<Var<double>(const Var<double>&)>& build,
                const Tensor<double>& x0, double tol = 1e-7) {
  auto x = Var<double>::leaf(x0.clone(), true);
  auto y = build(x);
  auto analytic = grad(sum_all(y), {x})[0];
  auto numeric = fd_gradient(
      [&](const Tensor<double>& t) {
        NoGradGuard ng;
        auto v = build(Var<double>::leaf(t.clone(), false));
        return v.val().sum_value();
      },
      x0);
  CHECK(max_abs_diff(analytic.val(), numeric) < tol);
}

Tensor<double> rand_tensor(std::vector<int> shape, unsigned seed, double lo = -1.0,
                           double hi = 1.0) {
  std::mt19937 rng(seed);
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("elementwise ops match finite differences") {
  auto x0 = rand_tensor({3, 4}, 7);
  auto c = Var<double>::constant(rand_tensor({3, 4}, 8, 0.5, 2.0));
  check_grad([&](const Var<double>& x) { return add(x, c); }, x0);
  check_grad([&](const Var<double>& x) { return sub(c, x); }, x0);
  check_grad([&](const Var<double>& x) { return mul(x, c); }, x0);
  check_grad([&](const Var<double>& x) { return div(x, c); }, x0);
  check_grad([&](const Var<double>& x) { return div(c, add_const(mul(x, x), 1.0)); }, x0);
  check_grad([&](const Var<double>& x) { return neg(scale(x, 3.5)); }, x0);
  check_grad([&](const Var<double>& x) { return exp(scale(x, 0.5)); }, x0);
  check_grad([&](const Var<double>& x) { return log(add_const(mul(x, x), 1.5)); }, x0);
  check_grad([&](const Var<double>& x) { return sqrt(add_const(mul(x, x), 2.0)); }, x0);
  check_grad([&](const Var<double>& x) { return rsqrt(add_const(mul(x, x), 2.0)); }, x0);
}

TEST_CASE("broadcasting gradients reduce correctly") {
  auto x0 = rand_tensor({4}, 11);
  auto big = Var<double>::constant(rand_tensor({2, 3, 4}, 12));
  check_grad([&](const Var<double>& x) { return mul(big, x); }, x0);
  check_grad([&](const Var<double>& x) { return add(big, reshape(x, {1, 1, 4})); }, x0);

  auto col0 = rand_tensor({3, 1}, 13, 0.5, 1.5);
  auto mat = Var<double>::constant(rand_tensor({3, 5}, 14));
  check_grad([&](const Var<double>& x) { return div(mat, x); }, col0);
  check_grad([&](const Var<double>& x) { return broadcast_to(x, {3, 5}); }, col0);
}

TEST_CASE("reductions match finite differences") {
  auto x0 = rand_tensor({2, 3, 4}, 21);
  check_grad([&](const Var<double>& x) { return sum(x, {1}, false); }, x0);
  check_grad([&](const Var<double>& x) { return sum(x, {0, 2}, true); }, x0);
  check_grad([&](const Var<double>& x) { return mean(x, {2}, false); }, x0);
  check_grad([&](const Var<double>& x) { return mean_all(mul(x, x)); }, x0);
}

TEST_CASE("max/min route gradient to the arg cell") {
  auto x0 = rand_tensor({3, 5}, 31);
  check_grad([&](const Var<double>& x) { return reduce_max(x, {1}, false); }, x0);
  check_grad([&](const Var<double>& x) { return reduce_min(x, {1}, true); }, x0);
  check_grad([&](const Var<double>& x) { return reduce_max(mul(x, x), {0, 1}, false); }, x0);
}

TEST_CASE("relu and clamp_min subgradients") {
  auto x0 = rand_tensor({4, 4}, 41);
  check_grad([&](const Var<double>& x) { return relu(x); }, x0);
  check_grad([&](const Var<double>& x) { return clamp_min(x, 0.25); }, x0);
}

TEST_CASE("safe_div is a/b off zeros and exactly zero on them") {
  auto a = Var<double>::leaf(rand_tensor({2, 3}, 51), true);
  Tensor<double> bt({2, 3});
  bt.fill(0.0);
  bt[0] = 2.0;
  bt[4] = 4.0;
  auto b = Var<double>::constant(bt);
  auto y = safe_div(a, b);
  CHECK(y.val()[0] == doctest::Approx(a.val()[0] / 2.0));
  CHECK(y.val()[1] == 0.0);
  CHECK(y.val()[4] == doctest::Approx(a.val()[4] / 4.0));
  auto g = grad(sum_all(y), {a})[0];
  CHECK(g.val()[0] == doctest::Approx(0.5));
  CHECK(g.val()[1] == 0.0);

  // denominator gradient via FD on the nonzero cells
  auto b0 = rand_tensor({2, 3}, 52, 0.5, 2.0);
  check_grad(
      [&](const Var<double>& x) {
        return safe_div(Var<double>::constant(rand_tensor({2, 3}, 53)), x);
      },
      b0, 1e-6);
}

TEST_CASE("matmul all transpose combinations") {
  auto a0 = rand_tensor({3, 4}, 61);
  auto b = Var<double>::constant(rand_tensor({4, 5}, 62));
  auto bt = Var<double>::constant(rand_tensor({5, 4}, 63));
  auto at_shape = rand_tensor({4, 3}, 64);
  check_grad([&](const Var<double>& x) { return matmul(x, b, false, false); }, a0);
  check_grad([&](const Var<double>& x) { return matmul(x, bt, false, true); }, a0);
  check_grad([&](const Var<double>& x) { return matmul(x, b, true, false); }, at_shape);
  check_grad([&](const Var<double>& x) { return matmul(x, bt, true, true); }, at_shape);
  // gradient wrt the second operand
  auto w0 = rand_tensor({4, 5}, 65);
  auto lhs = Var<double>::constant(rand_tensor({3, 4}, 66));
  check_grad([&](const Var<double>& x) { return matmul(lhs, x, false, false); }, w0);
  check_grad([&](const Var<double>& x) { return matmul(lhs, x, true, true); },
             rand_tensor({5, 3}, 67));
}

TEST_CASE("gather/scatter rows") {
  auto idx = std::make_shared<std::vector<int>>(std::vector<int>{2, 0, 1});
  auto x0 = rand_tensor({3, 4}, 71);
  check_grad([&](const Var<double>& x) { return gather_rows(x, idx); }, x0);
  CHECK_THROWS_AS(
      gather_rows(Var<double>::constant(x0),
                  std::make_shared<std::vector<int>>(std::vector<int>{0, 9, 1})),
      std::invalid_argument);
}

TEST_CASE("conv2d against direct convolution oracle") {
  std::mt19937 rng(81);
  auto x0 = Tensor<double>::randn({2, 3, 6, 6}, rng);
  auto w0 = Tensor<double>::randn({4, 3, 3, 3}, rng);
  auto x = Var<double>::constant(x0);
  auto w = Var<double>::constant(w0);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}, std::pair{2, 0}}) {
    auto y = conv2d(x, w, {stride, pad});
    const int ho = (6 + 2 * pad - 3) / stride + 1;
    REQUIRE(y.shape() == std::vector<int>{2, 4, ho, ho});
    // direct sum oracle
    for (int n = 0; n < 2; ++n)
      for (int co = 0; co < 4; ++co)
        for (int oi = 0; oi < ho; ++oi)
          for (int oj = 0; oj < ho; ++oj) {
            double acc = 0.0;
            for (int ci = 0; ci < 3; ++ci)
              for (int ki = 0; ki < 3; ++ki)
                for (int kj = 0; kj < 3; ++kj) {
                  const int ii = oi * stride - pad + ki;
                  const int jj = oj * stride - pad + kj;
                  if (ii < 0 || ii >= 6 || jj < 0 || jj >= 6) continue;
                  acc += x0.at({n, ci, ii, jj}) * w0.at({co, ci, ki, kj});
                }
            CHECK(y.val().at({n, co, oi, oj}) == doctest::Approx(acc).epsilon(1e-10));
          }
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  auto x0 = rand_tensor({2, 2, 5, 5}, 91);
  auto w0 = rand_tensor({3, 2, 3, 3}, 92);
  auto wc = Var<double>::constant(w0);
  auto xc = Var<double>::constant(x0);
  check_grad([&](const Var<double>& x) { return conv2d(x, wc, {2, 1}); }, x0, 1e-6);
  check_grad([&](const Var<double>& w) { return conv2d(xc, w, {2, 1}); }, w0, 1e-6);
  check_grad([&](const Var<double>& x) { return conv2d(relu(x), wc, {1, 1}); }, x0, 1e-6);
}

TEST_CASE("maxpool2d gradient and shape") {
  auto x0 = rand_tensor({2, 3, 6, 6}, 101);
  check_grad([&](const Var<double>& x) { return maxpool2d(x, 2, 2, 0); }, x0);
  check_grad([&](const Var<double>& x) { return maxpool2d(x, 3, 2, 1); }, x0);
  auto y = maxpool2d(Var<double>::constant(x0), 3, 2, 1);
  CHECK(y.shape() == std::vector<int>{2, 3, 3, 3});
}

TEST_CASE("second-order gradients flow through grad(create_graph=true)") {
  // f(x) = sum((x*x) * c); df/dx = 2*x*c; sum(df/dx) differentiated again = 2*c
  auto x0 = rand_tensor({3, 3}, 111);
  auto c0 = rand_tensor({3, 3}, 112);
  auto x = Var<double>::leaf(x0.clone(), true);
  auto c = Var<double>::constant(c0);
  auto f = sum_all(mul(mul(x, x), c));
  auto g1 = grad(f, {x}, /*create_graph=*/true)[0];
  REQUIRE(g1.requires_grad());
  auto g2 = grad(sum_all(g1), {x})[0];
  for (std::int64_t i = 0; i < g2.val().numel(); ++i)
    CHECK(g2.val()[i] == doctest::Approx(2.0 * c0[i]).epsilon(1e-10));

  // FD oracle on a hairier composite: d/dx [ sum(grad(sum(exp(x)*x)) ) ]
  auto build_first_grad_sum = [&](const Tensor<double>& t) {
    auto xv = Var<double>::leaf(t.clone(), true);
    auto fv = sum_all(mul(exp(xv), xv));
    auto gv = grad(fv, {xv}, true)[0];
    return gv;
  };
  auto xg = Var<double>::leaf(x0.clone(), true);
  auto fv = sum_all(mul(exp(xg), xg));
  auto gv = grad(fv, {xg}, true)[0];
  auto second = grad(sum_all(gv), {xg})[0];
  auto numeric = fd_gradient(
      [&](const Tensor<double>& t) { return build_first_grad_sum(t).val().sum_value(); }, x0);
  CHECK(max_abs_diff(second.val(), numeric) < 1e-6);
}

TEST_CASE("second order through conv") {
  auto x0 = rand_tensor({1, 2, 4, 4}, 121);
  auto w0 = rand_tensor({2, 2, 3, 3}, 122);
  auto w = Var<double>::leaf(w0.clone(), true);
  auto x = Var<double>::leaf(x0.clone(), true);
  auto y = conv2d(x, w, {1, 1});
  auto score = sum_all(mul(y, y));
  auto gx = grad(score, {x}, true)[0];     // 2 * convT(conv(x,w), w), depends on w twice
  auto loss = sum_all(mul(gx, gx));
  auto gw = grad(loss, {w})[0];
  auto numeric = fd_gradient(
      [&](const Tensor<double>& wt) {
        NoGradGuard outer;  // grads of the FD probe itself are not needed
        auto xv = Var<double>::leaf(x0.clone(), true);
        Var<double> wv;
        {
          GradModeGuard on(true);
          wv = Var<double>::leaf(wt.clone(), false);
          auto yv = conv2d(xv, wv, {1, 1});
          auto sv = sum_all(mul(yv, yv));
          auto gxv = grad(sv, {xv}, false)[0];
          double acc = 0.0;
          for (std::int64_t i = 0; i < gxv.val().numel(); ++i)
            acc += gxv.val()[i] * gxv.val()[i];
          return acc;
        }
      },
      w0, 1e-5);
  CHECK(max_abs_diff(gw.val(), numeric) < 1e-5);
}

TEST_CASE("detached branches receive exactly zero gradient") {
  auto x = Var<double>::leaf(rand_tensor({2, 2}, 131), true);
  auto d = mul(x, x).detach();
  auto y = sum_all(mul(d, Var<double>::constant(rand_tensor({2, 2}, 132))));
  auto g = grad(y, {x})[0];
  for (std::int64_t i = 0; i < g.val().numel(); ++i) CHECK(g.val()[i] == 0.0);
}

TEST_CASE("grad wrt an intermediate stops at that node") {
  auto x = Var<double>::leaf(rand_tensor({3}, 141), true);
  auto h = mul(x, x);
  auto y = sum_all(scale(h, 3.0));
  auto gh = grad(y, {h})[0];
  for (std::int64_t i = 0; i < 3; ++i) CHECK(gh.val()[i] == doctest::Approx(3.0));
}

TEST_CASE("no-grad mode builds constants") {
  NoGradGuard ng;
  auto x = Var<double>::leaf(rand_tensor({2}, 151), true);
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_SUITE_END();
