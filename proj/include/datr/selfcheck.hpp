#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "datr/erpgeo.hpp"
#include "datr/model.hpp"
#include "datr/testing/oracles.hpp"
#include "datr/uda.hpp"

// Built-in oracle suite behind the `selfcheck` command: neighborhood
// attention against the masked brute-force oracle, full-window degeneration
// against MHSA, finite-difference gradient checks, the closed-form
// distortion identities and the variant parameter budgets.
namespace datr::selfcheck {

namespace nk = datr::numkit;
namespace at = datr::attention;
namespace eg = datr::erpgeo;

struct CheckResult {
  std::string name;
  std::string tolerance;
  double value = 0;  // measured error / deviation
  bool pass = false;
  std::string note;
};

inline std::string tol_str(double tol) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "<= %.0e", tol);
  return buf;
}

inline std::vector<CheckResult> run_checks(const std::string& inject = "") {
  std::vector<CheckResult> results;
  auto record = [&](const std::string& name, const std::string& tol, double value, bool pass,
                    std::string note = "") {
    results.push_back({name, tol, value, pass, std::move(note)});
  };

  // --- neighborhood attention vs masked full-attention oracle
  for (auto [label, is64] : {std::pair<const char*, bool>{"da-vs-masked-oracle-f64", true},
                             std::pair<const char*, bool>{"da-vs-masked-oracle-f32", false}}) {
    const double tol = is64 ? 1e-10 : 1e-5;
    double worst = 0;
    std::string note;
    try {
      for (int window : {1, 3, 5}) {
        nk::Rng rng(7000 + window + is64);
        at::DaConfig cfg;
        cfg.window_h = cfg.window_w = window;
        cfg.heads = 2;
        cfg.wrap_horizontal = window == 3;
        const int h = 5 + window / 2, w = 7, c = 8;
        if (is64) {
          auto layer = at::make_da_layer<double>(c, cfg, rng);
          if (inject == "rpe-shape" && window == 3)
            layer.rpe = nk::Tensor<double>::zeros({cfg.heads, 4, c / cfg.heads}, true);
          auto x = nk::rng_normal<double>(rng, {h, w, c}, 0, 1);
          auto got = at::da_forward(x, layer);
          worst = std::max(
              worst, testing::max_abs_diff(got.val(), testing::masked_da_oracle(x.val(), layer,
                                                                                h, w, c)));
        } else {
          auto layer = at::make_da_layer<float>(c, cfg, rng);
          auto x = nk::rng_normal<float>(rng, {h, w, c}, 0.f, 1.f);
          auto got = at::da_forward(x, layer);
          worst = std::max(
              worst, testing::max_abs_diff(got.val(), testing::masked_da_oracle(x.val(), layer,
                                                                                h, w, c)));
        }
      }
      record(label, tol_str(tol), worst, worst <= tol);
    } catch (const std::exception& e) {
      record(label, tol_str(tol), INFINITY, false, e.what());
    }
  }

  // --- full-window degeneration to MHSA
  {
    double worst = 0;
    nk::Rng rng(7103);
    auto mhsa = at::make_mhsa_layer<double>(8, 2, rng);
    at::DaConfig cfg;
    cfg.window_h = cfg.window_w = 13;
    cfg.heads = 2;
    at::DaLayer<double> da{cfg, mhsa.q, mhsa.k, mhsa.v, mhsa.o,
                           nk::Tensor<double>::zeros({2, 169, 4}, true)};
    auto x = nk::rng_normal<double>(rng, {4, 6, 8}, 0, 1);
    auto yda = at::da_forward(x, da);
    auto ymh = at::mhsa_forward(nk::reshape(x, {24, 8}), mhsa);
    worst = testing::max_abs_diff(yda.val(), ymh.val());
    record("full-window-da-equals-mhsa", "<= 1e-10", worst, worst <= 1e-10);
  }

  // --- gradient checks
  {
    nk::Rng rng(7207);
    auto a = nk::rng_normal<double>(rng, {3, 5}, 0, 1, true);
    auto gamma = nk::rng_normal<double>(rng, {5}, 0, 1, true);
    auto beta = nk::rng_normal<double>(rng, {5}, 0, 1, true);
    double worst = nk::grad_check(
        [&] { return nk::mean_all(nk::mul(nk::softmax(a, 1), nk::softmax(a, 1))); }, {a});
    worst = std::max(worst, nk::grad_check(
                                [&] {
                                  auto y = nk::layernorm(a, gamma, beta);
                                  return nk::mean_all(nk::mul(y, y));
                                },
                                {a, gamma, beta}));
    record("grad-basic-ops", "<= 1e-4", worst, worst <= 1e-4);

    at::DaConfig cfg;
    cfg.window_h = cfg.window_w = 3;
    cfg.heads = 2;
    auto layer = at::make_da_layer<double>(4, cfg, rng);
    auto x = nk::rng_normal<double>(rng, {3, 4, 4}, 0, 1, true);
    const double err = nk::grad_check(
        [&] {
          auto y = at::da_forward(x, layer);
          return nk::mean_all(nk::mul(y, y));
        },
        {x, layer.q.w, layer.v.w, layer.rpe}, 1e-4);
    record("grad-da-attention", "<= 1e-4", err, err <= 1e-4);
  }

  // --- distortion identities
  {
    double worst = 0;
    for (double w : {2 * eg::kPi, 1.0, 8.0})
      worst = std::max(worst, std::fabs(eg::distortion_coefficient({w, 16, 5, w / (2 * eg::kPi)})));
    record("distortion-zero-at-equator", "<= 1e-12", worst, worst <= 1e-12);

    nk::Rng rng(7311);
    double ident = 0;
    for (int i = 0; i < 1000; ++i) {
      eg::ErpSpec s{4.0, 32, 7, rng.uniform(0.0, 4.0 / eg::kPi)};
      ident = std::max(ident, std::fabs(eg::distortion_coefficient(s) -
                                        7 * (4.0 / 32 - eg::pixel_width(s))));
    }
    record("distortion-width-identity", "<= 1e-12", ident, ident <= 1e-12);

    const double worked = eg::distortion_coefficient({2 * eg::kPi, 8, 4, 0.5});
    const double dev = std::fabs(worked - 0.420894);
    record("distortion-worked-value", "<= 5e-7", dev, dev <= 5e-7);
  }

  // --- parameter budgets
  {
    nk::Rng rng(7401);
    const double targets[3] = {4.64e6, 14.72e6, 25.76e6};
    const char variants[3] = {'M', 'T', 'S'};
    double worst = 0;
    for (int i = 0; i < 3; ++i) {
      const long count =
          model::param_count(model::build_model<float>(model::make_config(variants[i], 19), rng));
      worst = std::max(worst, std::fabs(count / targets[i] - 1.0));
    }
    record("param-count-budgets", "within 15%", worst, worst <= 0.15);
  }

  // --- seeded stream determinism
  {
    nk::Rng a(99), b(99);
    bool same = true;
    for (int i = 0; i < 512; ++i) same = same && a.next_u64() == b.next_u64();
    record("rng-determinism", "bit-exact", same ? 0.0 : 1.0, same);
  }

  return results;
}

inline bool print_report(const std::vector<CheckResult>& results, std::FILE* out = stdout) {
  bool ok = true;
  std::fprintf(out, "%-32s %-14s %-14s %s\n", "check", "tolerance", "measured", "status");
  for (const auto& r : results) {
    ok = ok && r.pass;
    std::fprintf(out, "%-32s %-14s %-14.3e %s%s%s\n", r.name.c_str(), r.tolerance.c_str(),
                 r.value, r.pass ? "PASS" : "FAIL", r.note.empty() ? "" : "  ",
                 r.note.c_str());
  }
  std::fprintf(out, "%s\n", ok ? "all checks passed" : "CHECKS FAILED");
  return ok;
}

}  // namespace datr::selfcheck
