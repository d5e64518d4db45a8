#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "datr/attention.hpp"
#include "datr/numkit.hpp"

// Hierarchical segmentation transformer: four stages of overlapping patch
// merging (7/4/3 then 3/2/1) produce feature maps at H/2^(i+1), with ESA
// blocks in the shallow stages and neighborhood attention in the deepest by
// default; an all-MLP decoder aligns, resizes and fuses the four maps.
namespace datr::model {

namespace nk = datr::numkit;
namespace at = datr::attention;

enum class AttnKind { kEsa, kDa };

struct StageConfig {
  int patch_k = 3, patch_s = 2, patch_p = 1;
  int depth = 2;
  int channels = 64;
  int heads = 1;
  AttnKind attn_kind = AttnKind::kEsa;
  int esa_reduction = 1;
  int mlp_ratio = 4;
};

struct ModelConfig {
  char variant = 'M';
  std::array<StageConfig, 4> stages;
  int decoder_dim = 256;
  int num_classes = 5;
  at::DaConfig da;                      // window / PE / wrap for DA stages
  std::string structure_mask = "ooos";  // per stage, 'o' = ESA, 's' = DA

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("model: num_classes must be >= 2");
    if (structure_mask.size() != 4)
      throw std::invalid_argument("model: structure mask must have 4 entries of o/s, got '" +
                                  structure_mask + "'");
    for (char c : structure_mask)
      if (c != 'o' && c != 's')
        throw std::invalid_argument("model: structure mask must use only o/s, got '" +
                                    structure_mask + "'");
    if (stages[0].patch_k != 7 || stages[0].patch_s != 4 || stages[0].patch_p != 3)
      throw std::invalid_argument("model: stage 1 patch merge must be 7/4/3");
    for (int i = 1; i < 4; ++i)
      if (stages[i].patch_k != 3 || stages[i].patch_s != 2 || stages[i].patch_p != 1)
        throw std::invalid_argument("model: stages 2-4 patch merge must be 3/2/1");
    for (const auto& s : stages)
      if (s.channels % s.heads != 0)
        throw std::invalid_argument("model: stage channels " + std::to_string(s.channels) +
                                    " not divisible by " + std::to_string(s.heads) + " heads");
  }
};

// Variant presets in the mix-transformer family, depth-tuned so the three
// totals land on 4.6M / 14.7M / 25.8M-class budgets.
inline ModelConfig make_config(char variant, int num_classes, const at::DaConfig& da = {},
                               const std::string& structure_mask = "ooos") {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.num_classes = num_classes;
  cfg.da = da;
  cfg.structure_mask = structure_mask;
  std::array<int, 4> channels{}, depths{};
  switch (variant) {
    case 'M':
      channels = {32, 64, 160, 256};
      depths = {2, 2, 3, 3};
      cfg.decoder_dim = 256;
      break;
    case 'T':
      channels = {64, 128, 320, 512};
      depths = {2, 2, 2, 3};
      cfg.decoder_dim = 256;
      break;
    case 'S':
      channels = {64, 128, 320, 512};
      depths = {3, 4, 6, 3};
      cfg.decoder_dim = 768;
      break;
    default:
      throw std::invalid_argument(std::string("model: unknown variant '") + variant + "'");
  }
  const std::array<int, 4> heads{1, 2, 5, 8};
  const std::array<int, 4> reductions{8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    auto& s = cfg.stages[i];
    s.patch_k = i == 0 ? 7 : 3;
    s.patch_s = i == 0 ? 4 : 2;
    s.patch_p = i == 0 ? 3 : 1;
    s.depth = depths[i];
    s.channels = channels[i];
    s.heads = heads[i];
    s.esa_reduction = reductions[i];
    s.attn_kind = structure_mask[i] == 's' ? AttnKind::kDa : AttnKind::kEsa;
    s.mlp_ratio = 4;
  }
  cfg.validate();
  return cfg;
}

template <typename T>
struct LayerNormParam {
  nk::Tensor<T> g, b;
};

template <typename T>
LayerNormParam<T> make_layernorm(int c) {
  return {nk::Tensor<T>::filled({c}, T(1), true), nk::Tensor<T>::zeros({c}, true)};
}

template <typename T>
struct Block {
  AttnKind kind = AttnKind::kEsa;
  LayerNormParam<T> ln1, ln2;
  at::EsaLayer<T> esa;
  at::DaLayer<T> da;
  at::LinearParam<T> fc1, fc2;
};

template <typename T>
struct Stage {
  StageConfig cfg;
  at::LinearParam<T> merge;
  LayerNormParam<T> merge_ln;
  std::vector<Block<T>> blocks;
};

template <typename T>
struct Decoder {
  std::array<at::LinearParam<T>, 4> align;
  at::LinearParam<T> fuse, classifier;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  std::array<Stage<T>, 4> stages;
  Decoder<T> dec;
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg, nk::Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  int cin = 3;
  for (int i = 0; i < 4; ++i) {
    const auto& sc = cfg.stages[i];
    auto& stage = m.stages[i];
    stage.cfg = sc;
    stage.merge = at::make_linear<T>(sc.patch_k * sc.patch_k * cin, sc.channels, rng);
    stage.merge_ln = make_layernorm<T>(sc.channels);
    for (int b = 0; b < sc.depth; ++b) {
      Block<T> block;
      block.kind = sc.attn_kind;
      block.ln1 = make_layernorm<T>(sc.channels);
      block.ln2 = make_layernorm<T>(sc.channels);
      if (sc.attn_kind == AttnKind::kDa) {
        at::DaConfig da = cfg.da;
        da.heads = sc.heads;
        block.da = at::make_da_layer<T>(sc.channels, da, rng);
      } else {
        block.esa = at::make_esa_layer<T>(sc.channels, sc.heads, sc.esa_reduction, rng);
      }
      const int hidden = sc.channels * sc.mlp_ratio;
      block.fc1 = at::make_linear<T>(sc.channels, hidden, rng);
      block.fc2 = at::make_linear<T>(hidden, sc.channels, rng);
      stage.blocks.push_back(std::move(block));
    }
    cin = sc.channels;
  }
  for (int i = 0; i < 4; ++i)
    m.dec.align[i] = at::make_linear<T>(cfg.stages[i].channels, cfg.decoder_dim, rng);
  m.dec.fuse = at::make_linear<T>(4 * cfg.decoder_dim, cfg.decoder_dim, rng);
  m.dec.classifier = at::make_linear<T>(cfg.decoder_dim, cfg.num_classes, rng);
  return m;
}

// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)).
template <typename T>
nk::Tensor<T> block_forward(const nk::Tensor<T>& x, const Block<T>& block) {
  auto normed = layernorm(x, block.ln1.g, block.ln1.b);
  auto attn = block.kind == AttnKind::kDa ? at::da_forward(normed, block.da)
                                          : at::esa_forward(normed, block.esa);
  auto h = add(x, attn);
  auto mlp_in = layernorm(h, block.ln2.g, block.ln2.b);
  auto mlp = linear(gelu(linear(mlp_in, block.fc1.w, block.fc1.b)), block.fc2.w, block.fc2.b);
  return add(h, mlp);
}

// Multi-scale features F1..F4 for an {H, W, 3} image, H and W >= 32 and
// divisible by 4 (predict() pads arbitrary inputs before calling this).
template <typename T>
std::array<nk::Tensor<T>, 4> encoder_forward(const nk::Tensor<T>& img, const Model<T>& m) {
  if (img.rank() != 3 || img.size(2) != 3)
    throw nk::DimensionError("encoder: expected {H,W,3}, got " + nk::shape_str(img.shape()));
  if (img.size(0) < 32 || img.size(1) < 32 || img.size(0) % 4 || img.size(1) % 4)
    throw nk::DimensionError("encoder: input " + nk::shape_str(img.shape()) +
                             " must be >= 32x32 and divisible by 4 (pad first)");
  std::array<nk::Tensor<T>, 4> feats;
  nk::Tensor<T> x = img;
  for (int i = 0; i < 4; ++i) {
    const auto& stage = m.stages[i];
    auto merged = linear(unfold(x, stage.cfg.patch_k, stage.cfg.patch_s, stage.cfg.patch_p),
                         stage.merge.w, stage.merge.b);
    x = layernorm(merged, stage.merge_ln.g, stage.merge_ln.b);
    for (const auto& block : stage.blocks) x = block_forward(x, block);
    feats[i] = x;
  }
  return feats;
}

template <typename T>
struct DecoderOut {
  nk::Tensor<T> fused;   // {H/4, W/4, decoder_dim}, the CFA feature space
  nk::Tensor<T> logits;  // {H/4, W/4, K}
};

template <typename T>
DecoderOut<T> decoder_forward(const std::array<nk::Tensor<T>, 4>& feats, const Model<T>& m) {
  const int h1 = feats[0].size(0), w1 = feats[0].size(1);
  std::vector<nk::Tensor<T>> aligned;
  aligned.reserve(4);
  for (int i = 0; i < 4; ++i) {
    auto a = linear(feats[i], m.dec.align[i].w, m.dec.align[i].b);
    if (i > 0) a = bilinear_resize(a, h1, w1);
    aligned.push_back(a);
  }
  auto fused = linear(concat_cols(aligned), m.dec.fuse.w, m.dec.fuse.b);
  auto logits = linear(fused, m.dec.classifier.w, m.dec.classifier.b);
  return {fused, logits};
}

// Pads an image with zeros up to at least 32x32 and a multiple of 4.
template <typename T>
nk::Tensor<T> pad_to_grid(const nk::Tensor<T>& img) {
  const int h = img.size(0), w = img.size(1), c = img.size(2);
  const int hp = std::max(32, (h + 3) / 4 * 4);
  const int wp = std::max(32, (w + 3) / 4 * 4);
  if (hp == h && wp == w) return img;
  std::vector<T> data(static_cast<std::size_t>(hp) * wp * c, T(0));
  for (int i = 0; i < h; ++i)
    std::copy_n(img.val().data() + static_cast<std::size_t>(i) * w * c, w * c,
                data.data() + static_cast<std::size_t>(i) * wp * c);
  return nk::Tensor<T>::from({hp, wp, c}, std::move(data));
}

template <typename T>
struct Prediction {
  nk::Tensor<T> probs;      // {H, W, K}
  std::vector<int> labels;  // H*W argmax
};

// Inference: encoder, decoder, x4 bilinear upsampling back to (padded) input
// resolution, softmax, argmax; crops away any padding.
template <typename T>
Prediction<T> predict(const nk::Tensor<T>& img, const Model<T>& m) {
  nk::NoGradGuard ng;
  const int h = img.size(0), w = img.size(1);
  auto padded = pad_to_grid(img);
  auto dec = decoder_forward(encoder_forward(padded, m), m);
  auto up = bilinear_resize(dec.logits, padded.size(0), padded.size(1));
  auto probs = softmax(up, 2);
  if (padded.size(0) != h || padded.size(1) != w) {
    const int k = probs.size(2);
    std::vector<T> crop(static_cast<std::size_t>(h) * w * k);
    for (int i = 0; i < h; ++i)
      std::copy_n(probs.val().data() + static_cast<std::size_t>(i) * padded.size(1) * k,
                  static_cast<std::size_t>(w) * k, crop.data() + static_cast<std::size_t>(i) * w * k);
    probs = nk::Tensor<T>::from({h, w, k}, std::move(crop));
  }
  return {probs, nk::argmax_rows(probs)};
}

template <typename T>
void collect_block_params(const Block<T>& b, const std::string& prefix,
                          std::vector<std::pair<std::string, nk::Tensor<T>>>& out) {
  out.emplace_back(prefix + ".ln1.g", b.ln1.g);
  out.emplace_back(prefix + ".ln1.b", b.ln1.b);
  if (b.kind == AttnKind::kDa) {
    out.emplace_back(prefix + ".attn.q.w", b.da.q.w);
    out.emplace_back(prefix + ".attn.q.b", b.da.q.b);
    out.emplace_back(prefix + ".attn.k.w", b.da.k.w);
    out.emplace_back(prefix + ".attn.k.b", b.da.k.b);
    out.emplace_back(prefix + ".attn.v.w", b.da.v.w);
    out.emplace_back(prefix + ".attn.v.b", b.da.v.b);
    out.emplace_back(prefix + ".attn.o.w", b.da.o.w);
    out.emplace_back(prefix + ".attn.o.b", b.da.o.b);
    if (b.da.rpe.defined()) out.emplace_back(prefix + ".attn.rpe", b.da.rpe);
  } else {
    out.emplace_back(prefix + ".attn.q.w", b.esa.q.w);
    out.emplace_back(prefix + ".attn.q.b", b.esa.q.b);
    out.emplace_back(prefix + ".attn.k.w", b.esa.k.w);
    out.emplace_back(prefix + ".attn.k.b", b.esa.k.b);
    out.emplace_back(prefix + ".attn.v.w", b.esa.v.w);
    out.emplace_back(prefix + ".attn.v.b", b.esa.v.b);
    out.emplace_back(prefix + ".attn.o.w", b.esa.o.w);
    out.emplace_back(prefix + ".attn.o.b", b.esa.o.b);
    if (b.esa.reduction > 1) {
      out.emplace_back(prefix + ".attn.reduce.w", b.esa.reduce.w);
      out.emplace_back(prefix + ".attn.reduce.b", b.esa.reduce.b);
    }
  }
  out.emplace_back(prefix + ".ln2.g", b.ln2.g);
  out.emplace_back(prefix + ".ln2.b", b.ln2.b);
  out.emplace_back(prefix + ".mlp.fc1.w", b.fc1.w);
  out.emplace_back(prefix + ".mlp.fc1.b", b.fc1.b);
  out.emplace_back(prefix + ".mlp.fc2.w", b.fc2.w);
  out.emplace_back(prefix + ".mlp.fc2.b", b.fc2.b);
}

// Stable name -> tensor listing; checkpointing and the optimizer rely on
// this order.
template <typename T>
std::vector<std::pair<std::string, nk::Tensor<T>>> named_params(const Model<T>& m) {
  std::vector<std::pair<std::string, nk::Tensor<T>>> out;
  for (int i = 0; i < 4; ++i) {
    const auto& stage = m.stages[i];
    const std::string sp = "enc.s" + std::to_string(i + 1);
    out.emplace_back(sp + ".merge.w", stage.merge.w);
    out.emplace_back(sp + ".merge.b", stage.merge.b);
    out.emplace_back(sp + ".merge_ln.g", stage.merge_ln.g);
    out.emplace_back(sp + ".merge_ln.b", stage.merge_ln.b);
    for (std::size_t b = 0; b < stage.blocks.size(); ++b)
      collect_block_params(stage.blocks[b], sp + ".b" + std::to_string(b), out);
  }
  for (int i = 0; i < 4; ++i) {
    out.emplace_back("dec.align" + std::to_string(i + 1) + ".w", m.dec.align[i].w);
    out.emplace_back("dec.align" + std::to_string(i + 1) + ".b", m.dec.align[i].b);
  }
  out.emplace_back("dec.fuse.w", m.dec.fuse.w);
  out.emplace_back("dec.fuse.b", m.dec.fuse.b);
  out.emplace_back("dec.cls.w", m.dec.classifier.w);
  out.emplace_back("dec.cls.b", m.dec.classifier.b);
  return out;
}

template <typename T>
std::vector<nk::Tensor<T>> param_list(const Model<T>& m) {
  std::vector<nk::Tensor<T>> out;
  for (auto& [name, t] : named_params(m)) out.push_back(t);
  return out;
}

template <typename T>
long param_count(const Model<T>& m) {
  return nk::param_count(param_list(m));
}

}  // namespace datr::model
