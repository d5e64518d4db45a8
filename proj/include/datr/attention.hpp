#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "datr/numkit.hpp"

// Attention variants. mhsa_forward is plain multi-head self-attention over
// the whole sequence and doubles as the reference that a full-coverage
// neighborhood window must reproduce. da_forward restricts every pixel to a
// fixed-size neighborhood window and adds a trainable relative positional
// encoding to the value rows, so its parameter shapes are independent of the
// input resolution. esa_forward keeps full attention but computes keys and
// values from a spatially reduced sequence.
namespace datr::attention {

namespace nk = datr::numkit;

enum class PeMode { kRpe, kApe, kNone };

inline PeMode pe_mode_from_string(const std::string& s) {
  if (s == "rpe") return PeMode::kRpe;
  if (s == "ape") return PeMode::kApe;
  if (s == "none") return PeMode::kNone;
  throw std::invalid_argument("pe mode must be rpe, ape or none, got '" + s + "'");
}

inline std::string to_string(PeMode m) {
  switch (m) {
    case PeMode::kRpe: return "rpe";
    case PeMode::kApe: return "ape";
    default: return "none";
  }
}

struct DaConfig {
  int window_h = 11;
  int window_w = 11;
  int heads = 1;
  PeMode pe_mode = PeMode::kRpe;
  bool wrap_horizontal = false;

  void validate() const {
    if (window_h < 1 || window_w < 1 || window_h % 2 == 0 || window_w % 2 == 0)
      throw std::invalid_argument("neighborhood window dims must be odd and >= 1");
    if (heads < 1) throw std::invalid_argument("heads must be >= 1");
  }
};

// Neighborhood of pixel (i, j) on an H x W grid. The window is centered and
// shifts inward at non-wrapped borders; with wrap_horizontal the columns wrap
// modulo W. A window larger than an axis clamps to the full axis, so the
// count is min(window_h, H) * min(window_w, W).
inline std::vector<std::pair<int, int>> neighborhood_indices(int i, int j, int h, int w,
                                                             const DaConfig& cfg) {
  cfg.validate();
  if (i < 0 || i >= h || j < 0 || j >= w)
    throw std::invalid_argument("neighborhood_indices: pixel (" + std::to_string(i) + "," +
                                std::to_string(j) + ") outside " + std::to_string(h) + "x" +
                                std::to_string(w));
  const int eff_h = std::min(cfg.window_h, h);
  const int eff_w = std::min(cfg.window_w, w);
  int r0 = i - cfg.window_h / 2;
  r0 = std::max(0, std::min(r0, h - eff_h));
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(eff_h) * eff_w);
  if (cfg.wrap_horizontal) {
    const int c0 = j - eff_w / 2;
    for (int a = 0; a < eff_h; ++a)
      for (int b = 0; b < eff_w; ++b) out.emplace_back(r0 + a, ((c0 + b) % w + w) % w);
  } else {
    int c0 = j - cfg.window_w / 2;
    c0 = std::max(0, std::min(c0, w - eff_w));
    for (int a = 0; a < eff_h; ++a)
      for (int b = 0; b < eff_w; ++b) out.emplace_back(r0 + a, c0 + b);
  }
  return out;
}

// Flattened neighborhoods for a whole grid. `slot` holds the RPE slot of
// each entry: its position within the window grid, row-major over the full
// window_h x window_w table.
struct NeighborhoodMap {
  int h = 0, w = 0;
  int eff = 0;    // entries per pixel
  int slots = 0;  // RPE table rows (window_h * window_w)
  std::vector<std::int32_t> idx;   // h*w*eff flattened pixel indices
  std::vector<std::int32_t> slot;  // h*w*eff RPE slots
};

inline NeighborhoodMap build_neighborhood_map(int h, int w, const DaConfig& cfg) {
  NeighborhoodMap map;
  map.h = h;
  map.w = w;
  const int eff_h = std::min(cfg.window_h, h);
  const int eff_w = std::min(cfg.window_w, w);
  map.eff = eff_h * eff_w;
  map.slots = cfg.window_h * cfg.window_w;
  map.idx.reserve(static_cast<std::size_t>(h) * w * map.eff);
  map.slot.reserve(map.idx.capacity());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const auto nbr = neighborhood_indices(i, j, h, w, cfg);
      for (int t = 0; t < map.eff; ++t) {
        map.idx.push_back(nbr[t].first * w + nbr[t].second);
        map.slot.push_back((t / eff_w) * cfg.window_w + (t % eff_w));
      }
    }
  return map;
}

// Trainable relative positional encoding: one {slots, d_head} table per
// head, initialized uniformly in [-0.02, 0.02]. The shape depends only on
// the window, never on the input resolution.
template <typename T>
nk::Tensor<T> rpe_init(const DaConfig& cfg, int d_head, nk::Rng& rng) {
  cfg.validate();
  return nk::rng_uniform<T>(rng, {cfg.heads, cfg.window_h * cfg.window_w, d_head},
                            static_cast<T>(-0.02), static_cast<T>(0.02), true);
}

// Fixed 2-D sinusoidal absolute encoding (the APE ablation baseline).
template <typename T>
nk::Tensor<T> ape_encoding(int h, int w, int c) {
  const int half = c / 2;
  std::vector<T> out(static_cast<std::size_t>(h) * w * c, T(0));
  auto wave = [&](int pos, int t, int span) {
    const double freq = std::exp(-std::log(10000.0) * (2.0 * (t / 2)) / std::max(span, 1));
    return static_cast<T>((t % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq));
  };
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      T* px = out.data() + (static_cast<std::size_t>(i) * w + j) * c;
      for (int t = 0; t < half; ++t) px[t] = wave(i, t, half);
      for (int t = half; t < c; ++t) px[t] = wave(j, t - half, c - half);
    }
  return nk::Tensor<T>::from({h, w, c}, std::move(out));
}

// Neighborhood attention core: for every pixel p with query row q_p, keys
// and values are gathered from its neighborhood; RPE (when given) is added
// to the gathered value rows by window slot before the weighted sum.
// rpe must be {heads, slots, d_head} or undefined. attn_out, when non-null,
// receives the softmax weights laid out [pixel][head][entry].
template <typename T>
nk::Tensor<T> neighborhood_attention(const nk::Tensor<T>& q, const nk::Tensor<T>& k,
                                     const nk::Tensor<T>& v, const nk::Tensor<T>& rpe,
                                     const NeighborhoodMap& map, int heads,
                                     std::vector<T>* attn_out = nullptr) {
  const long n = q.rows();
  const int c = q.last_dim();
  if (c % heads != 0)
    throw std::invalid_argument("neighborhood_attention: channels " + std::to_string(c) +
                                " not divisible by " + std::to_string(heads) + " heads");
  const int dh = c / heads;
  if (n != static_cast<long>(map.h) * map.w)
    throw nk::DimensionError("neighborhood_attention: map is " + std::to_string(map.h) + "x" +
                             std::to_string(map.w) + " but input has " + std::to_string(n) +
                             " pixels");
  if (rpe.defined() &&
      rpe.shape() != std::vector<int>{heads, map.slots, dh})
    throw nk::DimensionError("neighborhood_attention: RPE shape " + nk::shape_str(rpe.shape()) +
                             " does not match {heads," + std::to_string(map.slots) + "," +
                             std::to_string(dh) + "}");
  const int eff = map.eff;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool use_rpe = rpe.defined();

  auto weights = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * heads * eff);
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  const T* qv = q.val().data();
  const T* kv = k.val().data();
  const T* vv = v.val().data();
  const T* pe = use_rpe ? rpe.val().data() : nullptr;

  nk::parallel_for(n, [&](long p0, long p1) {
    std::vector<T> logits(eff);
    for (long p = p0; p < p1; ++p) {
      const std::int32_t* idx = map.idx.data() + p * eff;
      const std::int32_t* slot = map.slot.data() + p * eff;
      for (int hh = 0; hh < heads; ++hh) {
        const T* qrow = qv + p * c + hh * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int t = 0; t < eff; ++t) {
          const T* krow = kv + static_cast<long>(idx[t]) * c + hh * dh;
          T dot = 0;
          for (int d = 0; d < dh; ++d) dot += qrow[d] * krow[d];
          logits[t] = dot * scale;
          mx = std::max(mx, logits[t]);
        }
        T sum = 0;
        for (int t = 0; t < eff; ++t) {
          logits[t] = std::exp(logits[t] - mx);
          sum += logits[t];
        }
        T* a = weights->data() + (p * heads + hh) * eff;
        for (int t = 0; t < eff; ++t) a[t] = logits[t] / sum;
        T* orow = out.data() + p * c + hh * dh;
        std::fill(orow, orow + dh, T(0));
        for (int t = 0; t < eff; ++t) {
          const T* vrow = vv + static_cast<long>(idx[t]) * c + hh * dh;
          if (use_rpe) {
            const T* prow = pe + (static_cast<long>(hh) * map.slots + slot[t]) * dh;
            for (int d = 0; d < dh; ++d) orow[d] += a[t] * (vrow[d] + prow[d]);
          } else {
            for (int d = 0; d < dh; ++d) orow[d] += a[t] * vrow[d];
          }
        }
      }
    }
  });
  if (attn_out) *attn_out = *weights;

  auto pq = q.node(), pk = k.node(), pv = v.node();
  auto ppe = rpe.defined() ? rpe.node() : nullptr;
  auto map_copy = std::make_shared<NeighborhoodMap>(map);
  auto back = [pq, pk, pv, ppe, weights, map_copy, heads, dh, c, scale](nk::Node<T>& nd) {
    const int eff = map_copy->eff;
    const long n = static_cast<long>(map_copy->h) * map_copy->w;
    std::vector<T> dlog(eff);
    for (long p = 0; p < n; ++p) {
      const std::int32_t* idx = map_copy->idx.data() + p * eff;
      const std::int32_t* slot = map_copy->slot.data() + p * eff;
      for (int hh = 0; hh < heads; ++hh) {
        const T* g = nd.grad.data() + p * c + hh * dh;
        const T* a = weights->data() + (p * heads + hh) * eff;
        // value and RPE side: dU_t = a_t * g
        T dadot = 0;
        for (int t = 0; t < eff; ++t) {
          const long row = static_cast<long>(idx[t]) * c + hh * dh;
          const T* vrow = pv->val.data() + row;
          T da = 0;
          if (ppe) {
            const T* prow =
                ppe->val.data() + (static_cast<long>(hh) * map_copy->slots + slot[t]) * dh;
            for (int d = 0; d < dh; ++d) da += g[d] * (vrow[d] + prow[d]);
          } else {
            for (int d = 0; d < dh; ++d) da += g[d] * vrow[d];
          }
          dlog[t] = da;
          dadot += da * a[t];
          if (pv->requires_grad) {
            T* gv = pv->grad.data() + row;
            for (int d = 0; d < dh; ++d) gv[d] += a[t] * g[d];
          }
          if (ppe && ppe->requires_grad) {
            T* gp = ppe->grad.data() +
                    (static_cast<long>(hh) * map_copy->slots + slot[t]) * dh;
            for (int d = 0; d < dh; ++d) gp[d] += a[t] * g[d];
          }
        }
        // softmax jacobian, then query/key sides
        const T* qrow = pq->val.data() + p * c + hh * dh;
        T* gq = pq->requires_grad ? pq->grad.data() + p * c + hh * dh : nullptr;
        for (int t = 0; t < eff; ++t) {
          const T dl = (dlog[t] - dadot) * a[t] * scale;
          const long row = static_cast<long>(idx[t]) * c + hh * dh;
          const T* krow = pk->val.data() + row;
          if (gq)
            for (int d = 0; d < dh; ++d) gq[d] += dl * krow[d];
          if (pk->requires_grad) {
            T* gk = pk->grad.data() + row;
            for (int d = 0; d < dh; ++d) gk[d] += dl * qrow[d];
          }
        }
      }
    }
  };
  return nk::Tensor<T>::make_op(q.shape(), std::move(out), {pq, pk, pv, ppe}, back);
}

// ----------------------------------------------------------------- layers

template <typename T>
struct LinearParam {
  nk::Tensor<T> w, b;
};

template <typename T>
LinearParam<T> make_linear(int cin, int cout, nk::Rng& rng, T init_std = static_cast<T>(0.02)) {
  return {nk::rng_normal<T>(rng, {cin, cout}, T(0), init_std, true),
          nk::Tensor<T>::zeros({cout}, true)};
}

template <typename T>
struct MhsaLayer {
  int heads = 1;
  LinearParam<T> q, k, v, o;
};

template <typename T>
MhsaLayer<T> make_mhsa_layer(int channels, int heads, nk::Rng& rng) {
  if (channels % heads != 0)
    throw std::invalid_argument("mhsa: channels " + std::to_string(channels) +
                                " not divisible by " + std::to_string(heads) + " heads");
  return {heads, make_linear<T>(channels, channels, rng), make_linear<T>(channels, channels, rng),
          make_linear<T>(channels, channels, rng), make_linear<T>(channels, channels, rng)};
}

// Full-sequence scaled dot-product attention from already-projected q/k/v,
// composed from the basic ops; per-head slices attend independently.
template <typename T>
nk::Tensor<T> sdp_attention(const nk::Tensor<T>& q, const nk::Tensor<T>& k,
                            const nk::Tensor<T>& v, int heads) {
  const int c = q.last_dim();
  const int dh = c / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto q2 = reshape(q, {static_cast<int>(q.rows()), c});
  auto k2 = reshape(k, {static_cast<int>(k.rows()), c});
  auto v2 = reshape(v, {static_cast<int>(v.rows()), c});
  if (heads == 1) {
    auto attn = softmax(nk::scale(matmul(q2, transpose2d(k2)), scale), 1);
    return reshape(matmul(attn, v2), q.shape());
  }
  std::vector<nk::Tensor<T>> heads_out;
  heads_out.reserve(heads);
  for (int hh = 0; hh < heads; ++hh) {
    auto qh = slice_cols(q2, hh * dh, (hh + 1) * dh);
    auto kh = slice_cols(k2, hh * dh, (hh + 1) * dh);
    auto vh = slice_cols(v2, hh * dh, (hh + 1) * dh);
    auto attn = softmax(nk::scale(matmul(qh, transpose2d(kh)), scale), 1);
    heads_out.push_back(matmul(attn, vh));
  }
  auto merged = concat_cols(heads_out);
  return reshape(merged, q.shape());
}

template <typename T>
nk::Tensor<T> mhsa_forward(const nk::Tensor<T>& x, const MhsaLayer<T>& layer) {
  if (x.last_dim() % layer.heads != 0)
    throw std::invalid_argument("mhsa: channels not divisible by heads");
  auto q = linear(x, layer.q.w, layer.q.b);
  auto k = linear(x, layer.k.w, layer.k.b);
  auto v = linear(x, layer.v.w, layer.v.b);
  return linear(sdp_attention(q, k, v, layer.heads), layer.o.w, layer.o.b);
}

template <typename T>
struct DaLayer {
  DaConfig cfg;
  LinearParam<T> q, k, v, o;
  nk::Tensor<T> rpe;  // defined only in rpe mode
};

template <typename T>
DaLayer<T> make_da_layer(int channels, const DaConfig& cfg, nk::Rng& rng) {
  cfg.validate();
  if (channels % cfg.heads != 0)
    throw std::invalid_argument("da: channels " + std::to_string(channels) +
                                " not divisible by " + std::to_string(cfg.heads) + " heads");
  DaLayer<T> layer{cfg,
                   make_linear<T>(channels, channels, rng),
                   make_linear<T>(channels, channels, rng),
                   make_linear<T>(channels, channels, rng),
                   make_linear<T>(channels, channels, rng),
                   {}};
  if (cfg.pe_mode == PeMode::kRpe) layer.rpe = rpe_init<T>(cfg, channels / cfg.heads, rng);
  return layer;
}

// Distortion-aware attention over an {H, W, C} feature map.
template <typename T>
nk::Tensor<T> da_forward(const nk::Tensor<T>& x, const DaLayer<T>& layer,
                         std::vector<T>* attn_out = nullptr) {
  if (x.rank() != 3)
    throw nk::DimensionError("da_forward: expected {H,W,C}, got " + nk::shape_str(x.shape()));
  nk::Tensor<T> inp = x;
  if (layer.cfg.pe_mode == PeMode::kApe)
    inp = nk::add(x, ape_encoding<T>(x.size(0), x.size(1), x.size(2)));
  auto q = linear(inp, layer.q.w, layer.q.b);
  auto k = linear(inp, layer.k.w, layer.k.b);
  auto v = linear(inp, layer.v.w, layer.v.b);
  const auto map = build_neighborhood_map(x.size(0), x.size(1), layer.cfg);
  auto ctx = neighborhood_attention(q, k, v, layer.rpe, map, layer.cfg.heads, attn_out);
  return linear(ctx, layer.o.w, layer.o.b);
}

template <typename T>
struct EsaLayer {
  int heads = 1;
  int reduction = 1;
  LinearParam<T> q, k, v, o;
  LinearParam<T> reduce;  // used only when reduction > 1
};

template <typename T>
EsaLayer<T> make_esa_layer(int channels, int heads, int reduction, nk::Rng& rng) {
  if (channels % heads != 0)
    throw std::invalid_argument("esa: channels not divisible by heads");
  if (reduction < 1) throw std::invalid_argument("esa: reduction must be >= 1");
  EsaLayer<T> layer{heads,
                    reduction,
                    make_linear<T>(channels, channels, rng),
                    make_linear<T>(channels, channels, rng),
                    make_linear<T>(channels, channels, rng),
                    make_linear<T>(channels, channels, rng),
                    {}};
  if (reduction > 1) layer.reduce = make_linear<T>(channels, channels, rng);
  return layer;
}

// Efficient self-attention: queries at full length, keys/values from an
// r x r patch-average followed by a linear reduction. r = 1 degenerates to
// exactly mhsa_forward.
template <typename T>
nk::Tensor<T> esa_forward(const nk::Tensor<T>& x, const EsaLayer<T>& layer) {
  if (x.rank() != 3)
    throw nk::DimensionError("esa_forward: expected {H,W,C}, got " + nk::shape_str(x.shape()));
  auto q = linear(x, layer.q.w, layer.q.b);
  nk::Tensor<T> src = x;
  if (layer.reduction > 1)
    src = linear(nk::avg_pool2d(x, layer.reduction), layer.reduce.w, layer.reduce.b);
  auto k = linear(src, layer.k.w, layer.k.b);
  auto v = linear(src, layer.v.w, layer.v.b);
  const int n = static_cast<int>(x.rows());
  const int m = static_cast<int>(src.rows());
  const int c = x.last_dim();
  auto ctx = sdp_attention(reshape(q, {n, c}), reshape(k, {m, c}), reshape(v, {m, c}),
                           layer.heads);
  return linear(reshape(ctx, x.shape()), layer.o.w, layer.o.b);
}

template <typename T>
void collect_params(const LinearParam<T>& p, std::vector<nk::Tensor<T>>& out) {
  if (p.w.defined()) out.push_back(p.w);
  if (p.b.defined()) out.push_back(p.b);
}

}  // namespace datr::attention
