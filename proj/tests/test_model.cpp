#include <doctest.h>

#include <cmath>

#include "datr/model.hpp"

namespace nk = datr::numkit;
namespace at = datr::attention;
namespace md = datr::model;
using nk::Tensor;

namespace {

// Small config for fast structural tests; keeps the mandated patch layout.
md::ModelConfig tiny_config(int num_classes = 3, const std::string& mask = "ooos") {
  md::ModelConfig cfg;
  cfg.variant = 'M';
  cfg.num_classes = num_classes;
  cfg.structure_mask = mask;
  cfg.decoder_dim = 8;
  cfg.da.window_h = cfg.da.window_w = 3;
  const std::array<int, 4> channels{4, 4, 8, 8};
  const std::array<int, 4> heads{1, 1, 2, 2};
  const std::array<int, 4> reductions{8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    auto& s = cfg.stages[i];
    s.patch_k = i == 0 ? 7 : 3;
    s.patch_s = i == 0 ? 4 : 2;
    s.patch_p = i == 0 ? 3 : 1;
    s.depth = 1;
    s.channels = channels[i];
    s.heads = heads[i];
    s.esa_reduction = reductions[i];
    s.attn_kind = mask[i] == 's' ? md::AttnKind::kDa : md::AttnKind::kEsa;
    s.mlp_ratio = 2;
  }
  return cfg;
}

}  // namespace

TEST_CASE("variant parameter totals sit in the published budgets") {
  nk::Rng rng(1);
  const double m = md::param_count(md::build_model<float>(md::make_config('M', 19), rng));
  const double t = md::param_count(md::build_model<float>(md::make_config('T', 19), rng));
  const double s = md::param_count(md::build_model<float>(md::make_config('S', 19), rng));
  CHECK(m > 4.64e6 * 0.85);
  CHECK(m < 4.64e6 * 1.15);
  CHECK(t > 14.72e6 * 0.85);
  CHECK(t < 14.72e6 * 1.15);
  CHECK(s > 25.76e6 * 0.85);
  CHECK(s < 25.76e6 * 1.15);

  // no parameter depends on the input resolution
  auto model = md::build_model<float>(md::make_config('M', 19), rng);
  CHECK(md::param_count(model) == static_cast<long>(m));
}

TEST_CASE("config validation") {
  nk::Rng rng(2);
  CHECK_THROWS_AS(md::make_config('X', 5), std::invalid_argument);
  CHECK_THROWS_AS(md::make_config('M', 1), std::invalid_argument);
  CHECK_THROWS_AS(md::make_config('M', 5, {}, "ooxs"), std::invalid_argument);
  CHECK_THROWS_AS(md::make_config('M', 5, {}, "ooossss"), std::invalid_argument);
  auto bad = tiny_config();
  bad.stages[0].patch_k = 5;
  CHECK_THROWS_AS(md::build_model<float>(bad, rng), std::invalid_argument);
  auto odd = tiny_config();
  odd.stages[2].heads = 3;
  CHECK_THROWS_AS(md::build_model<float>(odd, rng), std::invalid_argument);
}

TEST_CASE("block with zero output projections is the identity") {
  nk::Rng rng(3);
  auto model = md::build_model<double>(tiny_config(3, "oos" "s"), rng);
  for (auto& stage : model.stages)
    for (auto& block : stage.blocks) {
      auto zero = [](Tensor<double>& t) { std::fill(t.val().begin(), t.val().end(), 0.0); };
      if (block.kind == md::AttnKind::kDa) {
        zero(block.da.o.w);
        zero(block.da.o.b);
      } else {
        zero(block.esa.o.w);
        zero(block.esa.o.b);
      }
      zero(block.fc2.w);
      zero(block.fc2.b);
    }
  auto x = nk::rng_normal<double>(rng, {4, 6, 4}, 0, 1);
  auto y = md::block_forward(x, model.stages[0].blocks[0]);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.val().size(); ++i)
    CHECK(y.val()[i] == doctest::Approx(x.val()[i]).epsilon(1e-12));
}

TEST_CASE("encoder produces the documented pyramid") {
  nk::Rng rng(4);
  auto model = md::build_model<float>(tiny_config(), rng);

  auto img = nk::rng_uniform<float>(rng, {64, 128, 3}, 0.f, 1.f);
  auto feats = md::encoder_forward(img, model);
  CHECK(feats[0].shape() == std::vector<int>{16, 32, 4});
  CHECK(feats[1].shape() == std::vector<int>{8, 16, 4});
  CHECK(feats[2].shape() == std::vector<int>{4, 8, 8});
  CHECK(feats[3].shape() == std::vector<int>{2, 4, 8});

  auto big = nk::rng_uniform<float>(rng, {128, 256, 3}, 0.f, 1.f);
  auto feats2 = md::encoder_forward(big, model);
  CHECK(feats2[3].shape() == std::vector<int>{4, 8, 8});

  for (const auto& f : feats)
    for (float v : f.val()) REQUIRE(std::isfinite(v));

  CHECK_THROWS_AS(md::encoder_forward(nk::rng_uniform<float>(rng, {16, 16, 3}, 0.f, 1.f), model),
                  nk::DimensionError);
  CHECK_THROWS_AS(md::encoder_forward(nk::rng_uniform<float>(rng, {64, 66, 3}, 0.f, 1.f), model),
                  nk::DimensionError);
}

TEST_CASE("decoder geometry and probability maps") {
  nk::Rng rng(5);
  auto model = md::build_model<float>(tiny_config(5), rng);
  auto img = nk::rng_uniform<float>(rng, {64, 64, 3}, 0.f, 1.f);
  auto dec = md::decoder_forward(md::encoder_forward(img, model), model);
  CHECK(dec.logits.shape() == std::vector<int>{16, 16, 5});
  CHECK(dec.fused.shape() == std::vector<int>{16, 16, 8});

  auto probs = softmax(dec.logits, 2);
  for (long r = 0; r < probs.rows(); ++r) {
    float sum = 0;
    for (int j = 0; j < 5; ++j) sum += probs.val()[r * 5 + j];
    CHECK(sum == doctest::Approx(1.f).epsilon(1e-5));
  }
}

TEST_CASE("predict: labels, determinism, resolution robustness") {
  nk::Rng rng(6);
  auto model = md::build_model<float>(tiny_config(4), rng);
  auto img = nk::rng_uniform<float>(rng, {64, 128, 3}, 0.f, 1.f);

  auto pred = md::predict(img, model);
  CHECK(pred.probs.shape() == std::vector<int>{64, 128, 4});
  CHECK(static_cast<long>(pred.labels.size()) == 64 * 128);
  for (int l : pred.labels) {
    CHECK(l >= 0);
    CHECK(l < 4);
  }

  auto again = md::predict(img, model);
  CHECK(pred.probs.val() == again.probs.val());
  CHECK(pred.labels == again.labels);

  const long params = md::param_count(model);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{32, 64}, {128, 256}, {52, 70}}) {
    auto other = md::predict(nk::rng_uniform<float>(rng, {h, w, 3}, 0.f, 1.f), model);
    CHECK(other.probs.shape() == std::vector<int>{h, w, 4});
    for (long r = 0; r < other.probs.rows(); ++r) {
      float sum = 0;
      for (int j = 0; j < 4; ++j) sum += other.probs.val()[r * 4 + j];
      CHECK(sum == doctest::Approx(1.f).epsilon(1e-5));
    }
    CHECK(md::param_count(model) == params);
  }
}

TEST_CASE("every structure mask builds and runs") {
  nk::Rng rng(7);
  for (const char* mask : {"oooo", "sooo", "osoo", "ooso", "ooos", "soso", "osos"}) {
    auto model = md::build_model<float>(tiny_config(3, mask), rng);
    auto img = nk::rng_uniform<float>(rng, {32, 32, 3}, 0.f, 1.f);
    auto dec = md::decoder_forward(md::encoder_forward(img, model), model);
    CHECK(dec.logits.shape() == std::vector<int>{8, 8, 3});
  }
}

TEST_CASE("gradients flow through a DA block end to end") {
  nk::Rng rng(8);
  auto cfg = tiny_config(3, "sooo");
  auto model = md::build_model<double>(cfg, rng);
  auto& block = model.stages[0].blocks[0];
  REQUIRE(block.kind == md::AttnKind::kDa);
  auto x = nk::rng_normal<double>(rng, {4, 5, 4}, 0, 1, true);
  auto loss = [&] {
    auto y = md::block_forward(x, block);
    return nk::mean_all(nk::mul(y, y));
  };
  // composite graphs need a coarser step: at 1e-5 the fd noise floor of the
  // long forward dominates the tiniest gradient entries
  double err = nk::grad_check(
      loss, {x, block.da.q.w, block.da.rpe, block.fc1.w, block.ln1.g, block.ln2.b}, 1e-4);
  CHECK(err < 1e-4);
}

TEST_CASE("deepest-stage DA with a covering window degenerates to full attention") {
  nk::Rng rng(9);
  auto cfg = tiny_config(3, "ooos");
  cfg.da.window_h = cfg.da.window_w = 11;  // covers the 2x2 stage-4 map of a 32x32 input
  auto model = md::build_model<double>(cfg, rng);
  auto& block = model.stages[3].blocks[0];
  REQUIRE(block.kind == md::AttnKind::kDa);
  std::fill(block.da.rpe.val().begin(), block.da.rpe.val().end(), 0.0);

  // ESA with r=1 and the same projections is exactly MHSA over the map; a
  // covering window with zero RPE must reproduce it on the stage-4 extent
  at::EsaLayer<double> esa{block.da.cfg.heads, 1, block.da.q, block.da.k, block.da.v,
                           block.da.o, {}};
  auto x = nk::rng_normal<double>(rng, {2, 2, 8}, 0, 1);  // F4 of a 32x32 input
  auto da_out = at::da_forward(x, block.da);
  auto esa_out = at::esa_forward(x, esa);
  for (std::size_t i = 0; i < da_out.val().size(); ++i)
    CHECK(da_out.val()[i] == doctest::Approx(esa_out.val()[i]).epsilon(1e-10));
}

TEST_CASE("seg loss on a fixed batch decreases after 50 steps") {
  nk::Rng rng(10);
  auto model = md::build_model<double>(tiny_config(3), rng);
  // block-constant colors with dominant-channel labels: learnable at the
  // decoder's H/4 logit resolution
  std::vector<double> img_data(32 * 32 * 3);
  std::vector<int> labels(32 * 32);
  for (int by = 0; by < 8; ++by)
    for (int bx = 0; bx < 8; ++bx) {
      double c[3] = {rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
      const int lab = c[0] > c[1] ? (c[0] > c[2] ? 0 : 2) : (c[1] > c[2] ? 1 : 2);
      for (int y = by * 4; y < by * 4 + 4; ++y)
        for (int x = bx * 4; x < bx * 4 + 4; ++x) {
          for (int ch = 0; ch < 3; ++ch) img_data[(y * 32 + x) * 3 + ch] = c[ch];
          labels[y * 32 + x] = lab;
        }
    }
  auto img = nk::Tensor<double>::from({32, 32, 3}, std::move(img_data));
  auto loss_fn = [&] {
    auto dec = md::decoder_forward(md::encoder_forward(img, model), model);
    auto probs = softmax(bilinear_resize(dec.logits, 32, 32), 2);
    return nk::cross_entropy_mean(probs, labels);
  };
  nk::AdamW<double> opt(md::param_list(model));
  const double before = loss_fn().item();
  for (int step = 0; step < 50; ++step) {
    opt.zero_grad();
    loss_fn().backward();
    opt.step(3e-3);  // small model, short horizon
  }
  const double after = loss_fn().item();
  CHECK(after < before);
  CHECK(after < before * 0.8);
}

TEST_CASE("one small step on a fixed batch lowers the loss") {
  for (int seed = 0; seed < 5; ++seed) {
    nk::Rng rng(40 + seed);
    auto model = md::build_model<double>(tiny_config(3), rng);
    auto img = nk::rng_uniform<double>(rng, {32, 32, 3}, 0., 1.);
    std::vector<int> labels(32 * 32);
    for (auto& l : labels) l = static_cast<int>(rng.next_below(3));

    auto loss_fn = [&] {
      auto dec = md::decoder_forward(md::encoder_forward(img, model), model);
      auto probs = softmax(bilinear_resize(dec.logits, 32, 32), 2);
      return nk::cross_entropy_mean(probs, labels);
    };
    nk::AdamW<double> opt(md::param_list(model));
    opt.zero_grad();
    auto before = loss_fn();
    before.backward();
    opt.step(1e-4);
    auto after = loss_fn();
    CHECK(after.item() < before.item());
  }
}
