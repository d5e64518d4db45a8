#include <doctest.h>

#include <cmath>
#include <vector>

#include "datr/numkit.hpp"

namespace nk = datr::numkit;
using nk::Tensor;

namespace {

Tensor<double> rand_t(nk::Rng& rng, std::vector<int> shape, bool rg = true) {
  return nk::rng_normal<double>(rng, std::move(shape), 0.0, 1.0, rg);
}

// Direct strided-convolution loop, independent of unfold.
std::vector<double> naive_conv(const std::vector<double>& x, int h, int w, int c,
                               const std::vector<double>& wgt, int cout, int k, int s, int p) {
  const int ho = (h + 2 * p - k) / s + 1;
  const int wo = (w + 2 * p - k) / s + 1;
  std::vector<double> out(static_cast<std::size_t>(ho) * wo * cout, 0.0);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int co = 0; co < cout; ++co) {
        double acc = 0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * s - p + ky, ix = ox * s - p + kx;
            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
            for (int ci = 0; ci < c; ++ci)
              acc += x[(static_cast<std::size_t>(iy) * w + ix) * c + ci] *
                     wgt[(static_cast<std::size_t>(ky * k + kx) * c + ci) * cout + co];
          }
        out[(static_cast<std::size_t>(oy) * wo + ox) * cout + co] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("matmul basics") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto prod = nk::matmul(eye, m);
  for (int i = 0; i < 4; ++i) CHECK(prod.val()[i] == doctest::Approx(m.val()[i]));

  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  CHECK(nk::matmul(a, b).item() == doctest::Approx(11.0));

  CHECK_THROWS_WITH_AS(nk::matmul(a, a), doctest::Contains("[1x2]"), nk::DimensionError);
}

TEST_CASE("matmul gradient equals column sums of B") {
  nk::Rng rng(7);
  auto a = rand_t(rng, {3, 4});
  auto b = rand_t(rng, {4, 5}, false);
  auto loss = nk::sum_all(nk::matmul(a, b));
  loss.backward();
  // d sum(AB) / dA[i][k] = sum_j B[k][j], identical for every row i
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      double colsum = 0;
      for (int j = 0; j < 5; ++j) colsum += b.val()[k * 5 + j];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(colsum).epsilon(1e-12));
    }
  double err = nk::grad_check([&] { return nk::sum_all(nk::matmul(a, b)); }, {a});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax values and stability") {
  auto u = nk::softmax(Tensor<double>::from({3}, {0, 0, 0}), 0);
  for (double v : u.val()) CHECK(v == doctest::Approx(1.0 / 3));

  auto hot = nk::softmax(Tensor<double>::from({2}, {1000, 0}), 0);
  CHECK(hot.val()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(hot.val()[1] == doctest::Approx(0.0).epsilon(1e-12));

  // oracle: direct exp / sum evaluation
  auto sm = nk::softmax(Tensor<double>::from({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(sm.val()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(sm.val()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(sm.val()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
  CHECK(sm.val()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(sm.val()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(sm.val()[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  nk::Rng rng(11);
  for (int seed = 0; seed < 20; ++seed) {
    auto x = rand_t(rng, {4, 6}, false);
    auto y = nk::softmax(x, 1);
    auto shifted = x;
    std::vector<double> sdata = x.val();
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j < 6; ++j) sdata[r * 6 + j] += 3.25 * (r + 1);
    auto y2 = nk::softmax(Tensor<double>::from({4, 6}, sdata), 1);
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int j = 0; j < 6; ++j) sum += y.val()[r * 6 + j];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < y.val().size(); ++i)
      CHECK(y.val()[i] == doctest::Approx(y2.val()[i]).epsilon(1e-6));
  }
}

TEST_CASE("softmax along a non-trailing axis") {
  auto x = Tensor<double>::from({2, 2}, {1, 5, 3, 2});
  auto y = nk::softmax(x, 0);
  CHECK(y.val()[0] + y.val()[2] == doctest::Approx(1.0));
  CHECK(y.val()[1] + y.val()[3] == doctest::Approx(1.0));
  CHECK_THROWS_AS(nk::softmax(x, 2), nk::DimensionError);
}

TEST_CASE("layernorm values") {
  auto gamma = Tensor<double>::from({3}, {1, 1, 1});
  auto beta = Tensor<double>::from({3}, {0, 0, 0});
  auto flat = nk::layernorm(Tensor<double>::from({3}, {2, 2, 2}), gamma, beta);
  for (double v : flat.val()) CHECK(v == doctest::Approx(0.0));

  auto g2 = Tensor<double>::from({2}, {1, 1});
  auto b2 = Tensor<double>::from({2}, {0, 0});
  auto y = nk::layernorm(Tensor<double>::from({2}, {1, 3}), g2, b2);
  CHECK(y.val()[0] == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(y.val()[1] == doctest::Approx(1.0).epsilon(1e-3));

  CHECK_THROWS_AS(nk::layernorm(Tensor<double>::from({2}, {1, 3}), g2, b2, 0.0),
                  nk::DimensionError);
}

TEST_CASE("unfold shapes") {
  nk::Rng rng(3);
  auto big = rand_t(rng, {64, 128, 2}, false);
  auto u = nk::unfold(big, 7, 4, 3);
  CHECK(u.size(0) == 16);
  CHECK(u.size(1) == 32);
  CHECK(u.size(2) == 7 * 7 * 2);

  auto x = rand_t(rng, {4, 4, 3}, false);
  auto id = nk::unfold(x, 1, 1, 0);
  CHECK(id.shape() == std::vector<int>{4, 4, 3});
  for (std::size_t i = 0; i < x.val().size(); ++i) CHECK(id.val()[i] == x.val()[i]);

  CHECK_THROWS_AS(nk::unfold(x, 9, 1, 0), nk::DimensionError);
}

TEST_CASE("unfold plus linear equals naive strided convolution") {
  nk::Rng rng(5);
  for (int kcase = 0; kcase < 3; ++kcase) {
    const int k = 2 + kcase, s = 1 + kcase % 2, p = kcase % 2, c = 2, cout = 3;
    auto x = rand_t(rng, {5, 5, c}, false);
    auto wgt = rand_t(rng, {k * k * c, cout}, false);
    auto got = nk::linear(nk::unfold(x, k, s, p), wgt);
    auto want = naive_conv(x.val(), 5, 5, c, wgt.val(), cout, k, s, p);
    REQUIRE(got.val().size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(got.val()[i] == doctest::Approx(want[i]).epsilon(1e-6));
  }
}

TEST_CASE("grad_check oracle basics") {
  nk::Rng rng(13);
  auto x = rand_t(rng, {6});
  nk::sum_all(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);  // analytic gradient is exactly all-ones
  x.zero_grad();
  CHECK(nk::grad_check([&] { return nk::sum_all(x); }, {x}) < 1e-9);

  auto x8 = rand_t(rng, {8});
  double err = nk::grad_check(
      [&] {
        auto s = nk::softmax(x8, 0);
        return nk::sum_all(nk::mul(s, s));
      },
      {x8});
  CHECK(err < 1e-6);
}

TEST_CASE("reverse-mode gradients match finite differences across ops") {
  for (int seed = 0; seed < 20; ++seed) {
    nk::Rng rng(100 + seed);
    auto a = rand_t(rng, {3, 4});
    auto b = rand_t(rng, {3, 4});
    auto w = rand_t(rng, {4, 5});
    auto bias = rand_t(rng, {5});
    auto img = rand_t(rng, {4, 6, 2});
    auto gamma = rand_t(rng, {4});
    auto beta = rand_t(rng, {4});

    auto sq_mean = [](const Tensor<double>& t) { return nk::mean_all(nk::mul(t, t)); };

    CHECK(nk::grad_check([&] { return sq_mean(nk::add(a, b)); }, {a, b}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::sub(a, b)); }, {a, b}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::mul(a, b)); }, {a, b}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::scale(a, 1.7)); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::gelu(a)); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::linear(a, w, bias)); }, {a, w, bias}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::softmax(a, 1)); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::layernorm(a, gamma, beta)); },
                         {a, gamma, beta}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::transpose2d(a)); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::reshape(a, {4, 3})); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::slice_cols(a, 1, 3)); }, {a}) < 1e-4);
    CHECK(nk::grad_check(
              [&] { return sq_mean(nk::concat_cols(std::vector<Tensor<double>>{a, b})); },
              {a, b}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::gather_rows(a, {2, 0, 2})); }, {a}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::row_scale(a, {0.5, -1.5, 2.0})); }, {a}) <
          1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::unfold(img, 3, 2, 1)); }, {img}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::avg_pool2d(img, 2)); }, {img}) < 1e-4);
    CHECK(nk::grad_check([&] { return sq_mean(nk::bilinear_resize(img, 7, 9)); }, {img}) < 1e-4);
    CHECK(nk::grad_check(
              [&] {
                std::vector<int> labels{0, 3, 255};
                return nk::cross_entropy_mean(nk::softmax(a, 1), labels);
              },
              {a}) < 1e-4);
    CHECK(nk::grad_check(
              [&] {
                std::vector<int> labels{1, 0, 1};
                return sq_mean(nk::masked_mean_rows(a, labels, 2));
              },
              {a}) < 1e-4);
  }
}

TEST_CASE("cross entropy values") {
  // uniform over 4 classes -> ln 4
  auto probs = Tensor<double>::filled({3, 4}, 0.25);
  std::vector<int> labels{0, 1, 2};
  CHECK(nk::cross_entropy_mean(probs, labels).item() == doctest::Approx(std::log(4.0)));

  auto onehot = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  std::vector<int> l2{0, 1};
  CHECK(nk::cross_entropy_mean(onehot, l2).item() == doctest::Approx(0.0));

  bool all_ignored = false;
  std::vector<int> ign{255, 255};
  CHECK(nk::cross_entropy_mean(onehot, ign, 255, &all_ignored).item() == 0.0);
  CHECK(all_ignored);
}

TEST_CASE("masked mean rows matches loop oracle") {
  nk::Rng rng(21);
  auto feat = rand_t(rng, {4, 4, 2}, false);
  std::vector<int> labels(16);
  for (auto& l : labels) l = static_cast<int>(rng.next_below(2));
  std::vector<long> counts;
  auto centers = nk::masked_mean_rows(feat, labels, 3, &counts);
  for (int cls = 0; cls < 3; ++cls) {
    double sum0 = 0, sum1 = 0;
    long n = 0;
    for (int r = 0; r < 16; ++r)
      if (labels[r] == cls) {
        sum0 += feat.val()[r * 2];
        sum1 += feat.val()[r * 2 + 1];
        ++n;
      }
    CHECK(counts[cls] == n);
    if (n) {
      CHECK(centers.val()[cls * 2] == doctest::Approx(sum0 / n));
      CHECK(centers.val()[cls * 2 + 1] == doctest::Approx(sum1 / n));
    } else {
      CHECK(centers.val()[cls * 2] == 0.0);
      CHECK(centers.val()[cls * 2 + 1] == 0.0);
    }
  }
}

TEST_CASE("rng streams are reproducible and seed sensitive") {
  nk::Rng a(42), b(42), c(43);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    auto va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    any_diff = any_diff || (va != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);

  nk::Rng d(42);
  auto d1 = d.derive(1), d2 = d.derive(2);
  CHECK(d1.next_u64() != d2.next_u64());

  nk::Rng u(9);
  for (int i = 0; i < 100; ++i) {
    double v = u.uniform(-0.02, 0.02);
    CHECK(v >= -0.02);
    CHECK(v < 0.02);
  }
}

TEST_CASE("adamw reduces a quadratic and applies decoupled decay") {
  auto x = Tensor<double>::from({2}, {5.0, -3.0}, true);
  nk::AdamW<double> opt({x});
  double first = 0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    auto loss = nk::mean_all(nk::mul(x, x));
    if (i == 0) first = loss.item();
    loss.backward();
    opt.step(0.05);
  }
  auto final_loss = nk::mean_all(nk::mul(x, x)).item();
  CHECK(final_loss < first * 0.01);

  // weight decay moves a zero-gradient parameter toward zero
  auto y = Tensor<double>::from({1}, {1.0}, true);
  std::vector<double> m{0.0}, v{0.0}, g{0.0};
  nk::adamw_step(y, g, m, v, 1, 0.1);
  CHECK(y.val()[0] == doctest::Approx(1.0 - 0.1 * 1e-4 * 1.0));
}

TEST_CASE("no-grad guard suppresses graph construction") {
  nk::Rng rng(2);
  auto x = rand_t(rng, {3, 3});
  nk::NoGradGuard ng;
  auto y = nk::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("backward accumulates into leaves until zero_grad") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  nk::sum_all(x).backward();
  nk::sum_all(x).backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  x.zero_grad();
  nk::sum_all(x).backward();
  CHECK(x.grad()[0] == doctest::Approx(1.0));
}
