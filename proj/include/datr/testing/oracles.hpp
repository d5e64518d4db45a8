#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "datr/attention.hpp"

// Brute-force reference implementations used by the test suites and the
// self-check command. Everything here is plain loops over raw arrays,
// independent of the graded op implementations they are compared against.
namespace datr::testing {

// Plain matrix product with bias, y[n x cout] = x[n x cin] * w + b.
template <typename T>
std::vector<T> loop_linear(const std::vector<T>& x, const std::vector<T>& w,
                           const std::vector<T>& b, long n, int cin, int cout) {
  std::vector<T> y(static_cast<std::size_t>(n) * cout, T(0));
  for (long i = 0; i < n; ++i)
    for (int o = 0; o < cout; ++o) {
      double acc = b.empty() ? 0.0 : static_cast<double>(b[o]);
      for (int p = 0; p < cin; ++p) acc += static_cast<double>(x[i * cin + p]) * w[p * cout + o];
      y[i * cout + o] = static_cast<T>(acc);
    }
  return y;
}

// Three-loop softmax attention over already-projected q/k/v. q has n rows,
// k/v have m rows, all with `heads` heads of width c/heads.
template <typename T>
std::vector<T> loop_attention(const std::vector<T>& q, const std::vector<T>& k,
                              const std::vector<T>& v, long n, long m, int c, int heads) {
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<T> out(static_cast<std::size_t>(n) * c, T(0));
  std::vector<double> logits(m);
  for (long i = 0; i < n; ++i) {
    for (int hh = 0; hh < heads; ++hh) {
      double mx = -std::numeric_limits<double>::infinity();
      for (long j = 0; j < m; ++j) {
        double dot = 0;
        for (int d = 0; d < dh; ++d)
          dot += static_cast<double>(q[i * c + hh * dh + d]) * k[j * c + hh * dh + d];
        logits[j] = dot * scale;
        mx = std::max(mx, logits[j]);
      }
      double z = 0;
      for (long j = 0; j < m; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        z += logits[j];
      }
      for (long j = 0; j < m; ++j) {
        const double a = logits[j] / z;
        for (int d = 0; d < dh; ++d)
          out[i * c + hh * dh + d] += static_cast<T>(a * v[j * c + hh * dh + d]);
      }
    }
  }
  return out;
}

// Full multi-head self-attention via the loop kernels, given layer weights.
template <typename T>
std::vector<T> loop_mhsa(const std::vector<T>& x, const attention::MhsaLayer<T>& layer, long n,
                         int c) {
  auto q = loop_linear(x, layer.q.w.val(), layer.q.b.val(), n, c, c);
  auto k = loop_linear(x, layer.k.w.val(), layer.k.b.val(), n, c, c);
  auto v = loop_linear(x, layer.v.w.val(), layer.v.b.val(), n, c, c);
  auto ctx = loop_attention(q, k, v, n, n, c, layer.heads);
  return loop_linear(ctx, layer.o.w.val(), layer.o.b.val(), n, c, c);
}

// Masked full-attention oracle for neighborhood attention: an N x N logit
// matrix gets -inf outside each pixel's neighborhood, and RPE rows (when
// given) are added to the permitted value rows by window slot.
template <typename T>
std::vector<T> masked_attention_oracle(const std::vector<T>& q, const std::vector<T>& k,
                                       const std::vector<T>& v, const std::vector<T>& rpe,
                                       const attention::NeighborhoodMap& map, int c, int heads) {
  const long n = static_cast<long>(map.h) * map.w;
  const int dh = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<T> out(static_cast<std::size_t>(n) * c, T(0));
  std::vector<double> logits(n);
  std::vector<int> slot_of(n);
  for (long p = 0; p < n; ++p) {
    for (int hh = 0; hh < heads; ++hh) {
      std::fill(logits.begin(), logits.end(), ninf);
      std::fill(slot_of.begin(), slot_of.end(), -1);
      for (int t = 0; t < map.eff; ++t) {
        const long j = map.idx[p * map.eff + t];
        slot_of[j] = map.slot[p * map.eff + t];
        double dot = 0;
        for (int d = 0; d < dh; ++d)
          dot += static_cast<double>(q[p * c + hh * dh + d]) * k[j * c + hh * dh + d];
        logits[j] = dot * scale;
      }
      double mx = ninf;
      for (long j = 0; j < n; ++j) mx = std::max(mx, logits[j]);
      double z = 0;
      std::vector<double> expd(n, 0.0);
      for (long j = 0; j < n; ++j)
        if (logits[j] != ninf) {
          expd[j] = std::exp(logits[j] - mx);
          z += expd[j];
        }
      for (long j = 0; j < n; ++j) {
        if (expd[j] == 0.0) continue;
        const double a = expd[j] / z;
        for (int d = 0; d < dh; ++d) {
          double vv = v[j * c + hh * dh + d];
          if (!rpe.empty())
            vv += rpe[(static_cast<long>(hh) * map.slots + slot_of[j]) * dh + d];
          out[p * c + hh * dh + d] += static_cast<T>(a * vv);
        }
      }
    }
  }
  return out;
}

// Neighborhood attention including the projections, against layer weights.
template <typename T>
std::vector<T> masked_da_oracle(const std::vector<T>& x, const attention::DaLayer<T>& layer,
                                int h, int w, int c) {
  std::vector<T> inp = x;
  if (layer.cfg.pe_mode == attention::PeMode::kApe) {
    auto ape = attention::ape_encoding<T>(h, w, c);
    for (std::size_t i = 0; i < inp.size(); ++i) inp[i] += ape.val()[i];
  }
  const long n = static_cast<long>(h) * w;
  auto q = loop_linear(inp, layer.q.w.val(), layer.q.b.val(), n, c, c);
  auto k = loop_linear(inp, layer.k.w.val(), layer.k.b.val(), n, c, c);
  auto v = loop_linear(inp, layer.v.w.val(), layer.v.b.val(), n, c, c);
  const auto map = attention::build_neighborhood_map(h, w, layer.cfg);
  std::vector<T> rpe;
  if (layer.rpe.defined()) rpe = layer.rpe.val();
  auto ctx = masked_attention_oracle(q, k, v, rpe, map, c, layer.cfg.heads);
  return loop_linear(ctx, layer.o.w.val(), layer.o.b.val(), n, c, c);
}

// Pool-then-attend oracle for efficient self-attention.
template <typename T>
std::vector<T> pooled_esa_oracle(const std::vector<T>& x, const attention::EsaLayer<T>& layer,
                                 int h, int w, int c) {
  const long n = static_cast<long>(h) * w;
  auto q = loop_linear(x, layer.q.w.val(), layer.q.b.val(), n, c, c);
  std::vector<T> src = x;
  long m = n;
  if (layer.reduction > 1) {
    const int r = layer.reduction;
    const int ho = (h + r - 1) / r, wo = (w + r - 1) / r;
    std::vector<T> pooled(static_cast<std::size_t>(ho) * wo * c, T(0));
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const int y1 = std::min((oy + 1) * r, h), x1 = std::min((ox + 1) * r, w);
        const double inv = 1.0 / ((y1 - oy * r) * (x1 - ox * r));
        for (int iy = oy * r; iy < y1; ++iy)
          for (int ix = ox * r; ix < x1; ++ix)
            for (int d = 0; d < c; ++d)
              pooled[(static_cast<long>(oy) * wo + ox) * c + d] +=
                  static_cast<T>(inv * x[(static_cast<long>(iy) * w + ix) * c + d]);
      }
    m = static_cast<long>(ho) * wo;
    src = loop_linear(pooled, layer.reduce.w.val(), layer.reduce.b.val(), m, c, c);
  }
  auto k = loop_linear(src, layer.k.w.val(), layer.k.b.val(), m, c, c);
  auto v = loop_linear(src, layer.v.w.val(), layer.v.b.val(), m, c, c);
  auto ctx = loop_attention(q, k, v, n, m, c, layer.heads);
  return loop_linear(ctx, layer.o.w.val(), layer.o.b.val(), n, c, c);
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = a.size() == b.size() ? 0.0 : std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i)
    worst = std::max(worst, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

}  // namespace datr::testing
