#include <doctest.h>

#include <cmath>

#include "datr/uda.hpp"

namespace nk = datr::numkit;
namespace ud = datr::uda;
using nk::Tensor;

TEST_CASE("segmentation loss") {
  auto onehot = Tensor<double>::from({2, 3}, {1, 0, 0, 0, 0, 1});
  std::vector<int> labels{0, 2};
  CHECK(ud::seg_loss(onehot, labels).item() == doctest::Approx(0.0));

  auto uniform = Tensor<double>::filled({4, 4}, 0.25);
  std::vector<int> l4{1, 2, 3, 0};
  CHECK(ud::seg_loss(uniform, l4).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  bool warn = false;
  std::vector<int> ignored{ud::kIgnore, ud::kIgnore, ud::kIgnore, ud::kIgnore};
  CHECK(ud::seg_loss(uniform, ignored, &warn).item() == 0.0);
  CHECK(warn);

  nk::Rng rng(3);
  auto logits = nk::rng_normal<double>(rng, {6, 4}, 0, 1, true);
  std::vector<int> lr{0, 1, ud::kIgnore, 3, 2, 1};
  double err = nk::grad_check(
      [&] { return ud::seg_loss(nk::softmax(logits, 1), lr); }, {logits});
  CHECK(err < 1e-4);
}

TEST_CASE("pseudo labels") {
  auto probs = Tensor<double>::from({1, 3}, {0.1, 0.7, 0.2});
  auto pl = ud::make_pseudo_labels(probs);
  CHECK(pl.labels[0] == 1);
  CHECK(pl.confidence[0] == doctest::Approx(0.7));

  auto masked = ud::make_pseudo_labels(probs, 0.8);
  CHECK(masked.labels[0] == ud::kIgnore);

  // brute-force per-pixel max scan oracle on random maps
  nk::Rng rng(11);
  auto raw = nk::rng_uniform<double>(rng, {5, 7, 4}, 0.01, 1.0);
  auto rows = nk::softmax(raw, 2);
  auto got = ud::make_pseudo_labels(rows);
  CHECK(got.h == 5);
  CHECK(got.w == 7);
  for (long r = 0; r < 35; ++r) {
    int best = 0;
    for (int j = 1; j < 4; ++j)
      if (rows.val()[r * 4 + j] > rows.val()[r * 4 + best]) best = j;
    CHECK(got.labels[r] == best);
  }

  // idempotence: pseudo labels of the one-hot encoding reproduce the labels
  std::vector<double> onehot(35 * 4, 0.0);
  for (long r = 0; r < 35; ++r) onehot[r * 4 + got.labels[r]] = 1.0;
  auto again = ud::make_pseudo_labels(Tensor<double>::from({5, 7, 4}, std::move(onehot)));
  CHECK(again.labels == got.labels);
}

TEST_CASE("self-training loss") {
  nk::Rng rng(13);
  auto raw = nk::rng_normal<double>(rng, {8, 3}, 0, 1, true);
  auto probs = nk::softmax(raw, 1);
  auto pl = ud::make_pseudo_labels(probs);

  // threshold 0: loss is the mean of -log(max prob)
  double want = 0;
  for (long r = 0; r < 8; ++r) want -= std::log(pl.confidence[r]);
  want /= 8;
  CHECK(ud::ss_loss(probs, pl).item() == doctest::Approx(want).epsilon(1e-12));

  std::vector<double> onehot(8 * 3, 0.0);
  for (long r = 0; r < 8; ++r) onehot[r * 3 + pl.labels[r]] = 1.0;
  CHECK(ud::ss_loss(Tensor<double>::from({8, 3}, std::move(onehot)), pl).item() ==
        doctest::Approx(0.0));

  double err = nk::grad_check(
      [&] { return ud::ss_loss(nk::softmax(raw, 1), pl); }, {raw});
  CHECK(err < 1e-4);
}

TEST_CASE("class centers") {
  nk::Rng rng(17);

  SUBCASE("single class equals the global mean") {
    auto feat = nk::rng_normal<double>(rng, {3, 3, 2}, 0, 1);
    std::vector<int> labels(9, 1);
    auto cc = ud::class_centers(feat, labels, 3);
    double m0 = 0, m1 = 0;
    for (int r = 0; r < 9; ++r) {
      m0 += feat.val()[r * 2];
      m1 += feat.val()[r * 2 + 1];
    }
    CHECK(cc.centers.val()[2] == doctest::Approx(m0 / 9));
    CHECK(cc.centers.val()[3] == doctest::Approx(m1 / 9));
    CHECK(cc.valid[1]);
    CHECK_FALSE(cc.valid[0]);
    CHECK(cc.centers.val()[0] == 0.0);
    CHECK_FALSE(cc.valid[2]);
  }

  SUBCASE("matches the loop-and-average oracle") {
    auto feat = nk::rng_normal<double>(rng, {4, 4, 2}, 0, 1);
    std::vector<int> labels(16);
    for (auto& l : labels) l = static_cast<int>(rng.next_below(2));
    auto cc = ud::class_centers(feat, labels, 2);
    for (int cls = 0; cls < 2; ++cls) {
      double s0 = 0, s1 = 0;
      long n = 0;
      for (int r = 0; r < 16; ++r)
        if (labels[r] == cls) {
          s0 += feat.val()[r * 2];
          s1 += feat.val()[r * 2 + 1];
          ++n;
        }
      if (n) {
        CHECK(cc.centers.val()[cls * 2] == doctest::Approx(s0 / n));
        CHECK(cc.centers.val()[cls * 2 + 1] == doctest::Approx(s1 / n));
      }
    }
  }
}

TEST_CASE("bank update follows the epoch mixing rule") {
  auto bank = ud::ClassCenterBank<double>::make(1, 2);

  // e = 1: coefficient (1 - 1/1) = 0, the current center is adopted
  bank = ud::bank_update(bank, {5.0, 7.0}, {1}, {1.0, 2.0}, {1}, 1);
  CHECK(bank.source[0] == 5.0);
  CHECK(bank.source[1] == 7.0);

  // e = 2 with prev [1,1] and current [3,3] mixes to [2,2]
  auto b2 = ud::ClassCenterBank<double>::make(1, 2);
  b2 = ud::bank_update(b2, {1.0, 1.0}, {1}, {0.0, 0.0}, {0}, 1);
  b2 = ud::bank_update(b2, {3.0, 3.0}, {1}, {0.0, 0.0}, {0}, 2);
  CHECK(b2.source[0] == doctest::Approx(2.0));
  CHECK(b2.source[1] == doctest::Approx(2.0));
  CHECK_FALSE(b2.valid_target[0]);

  // invalid current leaves the stored center untouched
  auto before = b2.source;
  b2 = ud::bank_update(b2, {9.0, 9.0}, {0}, {0.0, 0.0}, {0}, 3);
  CHECK(b2.source == before);

  CHECK_THROWS_AS(ud::bank_update(b2, {0, 0}, {1}, {0, 0}, {0}, 0), std::invalid_argument);

  // repeated updates stay inside the hull of observed values (1-D stream)
  nk::Rng rng(23);
  auto stream = ud::ClassCenterBank<double>::make(1, 1);
  double lo = 1e9, hi = -1e9;
  for (int e = 1; e <= 20; ++e) {
    const double v = rng.uniform(-4.0, 4.0);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    stream = ud::bank_update(stream, {v}, {1}, {0.0}, {0}, e);
    CHECK(stream.source[0] >= lo - 1e-12);
    CHECK(stream.source[0] <= hi + 1e-12);
  }
}

TEST_CASE("cfa loss") {
  auto bank = ud::ClassCenterBank<double>::make(2, 2);
  bank = ud::bank_update(bank, {1, 0, 0.5, 0.5}, {1, 1}, {1, 0, 0.5, 0.5}, {1, 1}, 1);
  CHECK(ud::cfa_loss(bank) == doctest::Approx(0.0));

  auto one = ud::ClassCenterBank<double>::make(1, 2);
  one = ud::bank_update(one, {1, 0}, {1}, {0, 1}, {1}, 1);
  CHECK(ud::cfa_loss(one) == doctest::Approx(1.0));  // ((1)^2 + (-1)^2) / 2
  CHECK(ud::center_distance(one) == doctest::Approx(2.0));

  // no doubly-valid class -> zero
  auto empty = ud::ClassCenterBank<double>::make(2, 2);
  empty = ud::bank_update(empty, {1, 1, 0, 0}, {1, 0}, {0, 0, 2, 2}, {0, 1}, 1);
  CHECK(ud::cfa_loss(empty) == 0.0);

  // nonnegative, zero iff equal
  nk::Rng rng(29);
  for (int i = 0; i < 50; ++i) {
    auto b = ud::ClassCenterBank<double>::make(3, 4);
    std::vector<double> s(12), t(12);
    for (auto& v : s) v = rng.normal();
    for (auto& v : t) v = rng.normal();
    b = ud::bank_update(b, s, {1, 1, 1}, t, {1, 1, 1}, 1);
    CHECK(ud::cfa_loss(b) >= 0.0);
    if (ud::cfa_loss(b) < 1e-12) CHECK(ud::center_distance(b) < 1e-10);
  }
}

TEST_CASE("gradient flows through current-batch centers only") {
  nk::Rng rng(31);
  auto feat_s = nk::rng_normal<double>(rng, {4, 2}, 0, 1, true);
  auto feat_t = nk::rng_normal<double>(rng, {4, 2}, 0, 1, true);
  std::vector<int> lab_s{0, 0, 1, 1}, lab_t{0, 1, 1, 0};
  std::vector<double> stored_s{0.3, -0.1, 0.7, 0.2}, stored_t{0.0, 0.0, 0.4, 0.4};
  std::vector<unsigned char> stored_valid{1, 1};

  auto loss_fn = [&] {
    auto cs = ud::class_centers(feat_s, lab_s, 2);
    auto ct = ud::class_centers(feat_t, lab_t, 2);
    auto ms = ud::mixed_centers_expr(cs.centers, cs.valid, stored_s, stored_valid, 3);
    auto mt = ud::mixed_centers_expr(ct.centers, ct.valid, stored_t, stored_valid, 3);
    std::vector<unsigned char> both{1, 1};
    return ud::cfa_loss_expr(ms, mt, both);
  };
  CHECK(nk::grad_check(loss_fn, {feat_s, feat_t}) < 1e-4);

  feat_t.zero_grad();
  loss_fn().backward();
  double tsum = 0;
  for (double g : feat_t.grad()) tsum += std::fabs(g);
  CHECK(tsum > 0);  // target-side features receive gradient via the 1/e term

  // mixing weights: a class absent from the batch contributes no gradient
  auto cs = ud::class_centers(feat_s, std::vector<int>{0, 0, 0, 0}, 2);
  auto mix = ud::mixed_centers_expr(cs.centers, cs.valid, stored_s, stored_valid, 2);
  CHECK(mix.val()[2] == doctest::Approx(stored_s[2]));  // class 1 falls back to stored
  CHECK(mix.val()[0] == doctest::Approx(0.5 * cs.centers.val()[0] + 0.5 * stored_s[0]));
}

TEST_CASE("poly learning rate schedule") {
  CHECK(ud::poly_lr(0, 1000, 5e-5) == doctest::Approx(5e-5));
  CHECK(ud::poly_lr(1000, 1000, 5e-5) == doctest::Approx(0.0));
  CHECK(ud::poly_lr(500, 1000, 5e-5) == doctest::Approx(2.6795e-5).epsilon(1e-4));
  CHECK(ud::poly_lr(500, 1000, 5e-5) ==
        doctest::Approx(5e-5 * std::pow(0.5, 0.9)).epsilon(1e-12));
  CHECK_THROWS_AS(ud::poly_lr(-1, 10, 1e-4), std::invalid_argument);
  CHECK_THROWS_AS(ud::poly_lr(11, 10, 1e-4), std::invalid_argument);
}

TEST_CASE("label downsampling is a nearest-neighbor pick") {
  std::vector<int> labels(8 * 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) labels[i * 8 + j] = (i < 4) ? 0 : 1;
  auto down = ud::downsample_labels(labels, 8, 8, 2, 2);
  CHECK(down == std::vector<int>{0, 0, 1, 1});
}
