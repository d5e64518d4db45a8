#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "datr/checkpoint.hpp"
#include "datr/config.hpp"
#include "datr/dataset.hpp"
#include "datr/metrics.hpp"
#include "datr/model.hpp"
#include "datr/uda.hpp"

// Two-phase training: source-only supervision, then joint adaptation where
// every batch regenerates target pseudo-labels from the current model,
// refreshes the class-center bank with the epoch-indexed mixing rule and
// adds the self-training and center-alignment terms to the loss.
namespace datr::train {

namespace nk = datr::numkit;
namespace at = datr::attention;

enum class Phase { kSourceOnly, kAdapt };

template <typename T>
struct FullForward {
  nk::Tensor<T> probs;  // input resolution, rows sum to 1
  nk::Tensor<T> fused;  // decoder feature map at H/4 x W/4
};

template <typename T>
FullForward<T> forward_full(const nk::Tensor<T>& img, const model::Model<T>& m) {
  auto dec = model::decoder_forward(model::encoder_forward(img, m), m);
  auto up = bilinear_resize(dec.logits, img.size(0), img.size(1));
  return {softmax(up, 2), dec.fused};
}

template <typename T>
struct BatchResult {
  nk::Tensor<T> total;
  double seg = 0, ss = 0, f = 0;
  bool has_centers = false;
  std::vector<T> centers_s, centers_t;  // detached current-batch centers
  std::vector<unsigned char> valid_s, valid_t;
};

// Combined objective for one batch: L_seg on labeled source samples plus,
// in the adaptation phase, lambda_ss * L_ss on pseudo-labeled target samples
// and lambda_f * L_f between the epoch-mixed class centers. `mix_epoch` is
// the 1-based adaptation epoch used by the bank mixing rule.
template <typename T>
BatchResult<T> total_loss(const std::vector<const data::Sample*>& batch_s,
                          const std::vector<const data::Sample*>& batch_t,
                          const model::Model<T>& m, const uda::ClassCenterBank<T>& bank,
                          double lambda_ss, double lambda_f, Phase phase, double threshold,
                          int mix_epoch) {
  if (batch_s.empty()) throw std::invalid_argument("total_loss: empty source batch");
  const int k = m.cfg.num_classes;
  BatchResult<T> out;

  std::vector<nk::Tensor<T>> seg_terms, fused_s, fused_t;
  std::vector<int> labels_s_ds, labels_t_ds;
  for (const data::Sample* s : batch_s) {
    auto img = data::image_tensor<T>(s->source);
    auto fwd = forward_full(img, m);
    seg_terms.push_back(uda::seg_loss(fwd.probs, s->source_labels));
    if (phase == Phase::kAdapt) {
      auto ds = uda::downsample_labels(s->source_labels, img.size(0), img.size(1),
                                       fwd.fused.size(0), fwd.fused.size(1));
      labels_s_ds.insert(labels_s_ds.end(), ds.begin(), ds.end());
      fused_s.push_back(fwd.fused);
    }
  }
  auto mean_of = [](std::vector<nk::Tensor<T>>& terms) {
    nk::Tensor<T> acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return nk::scale(acc, T(1) / static_cast<T>(terms.size()));
  };
  auto l_seg = mean_of(seg_terms);
  out.seg = l_seg.item();

  if (phase == Phase::kSourceOnly) {
    out.total = l_seg;
    return out;
  }
  if (batch_t.empty()) throw std::invalid_argument("total_loss: empty target batch in adapt");

  std::vector<nk::Tensor<T>> ss_terms;
  for (const data::Sample* s : batch_t) {
    auto img = data::image_tensor<T>(s->target);
    auto fwd = forward_full(img, m);
    const auto pl = uda::make_pseudo_labels(fwd.probs, threshold);
    ss_terms.push_back(uda::ss_loss(fwd.probs, pl));
    auto ds = uda::downsample_labels(pl.labels, img.size(0), img.size(1), fwd.fused.size(0),
                                     fwd.fused.size(1));
    labels_t_ds.insert(labels_t_ds.end(), ds.begin(), ds.end());
    fused_t.push_back(fwd.fused);
  }
  auto l_ss = mean_of(ss_terms);
  out.ss = l_ss.item();

  auto cs = uda::class_centers(nk::concat_rows(fused_s), labels_s_ds, k);
  auto ct = uda::class_centers(nk::concat_rows(fused_t), labels_t_ds, k);
  auto mixed_s = uda::mixed_centers_expr(cs.centers, cs.valid, bank.source, bank.valid_source,
                                         mix_epoch);
  auto mixed_t = uda::mixed_centers_expr(ct.centers, ct.valid, bank.target, bank.valid_target,
                                         mix_epoch);
  std::vector<unsigned char> valid_both(k, 0);
  for (int c = 0; c < k; ++c)
    valid_both[c] = (bank.valid_source[c] || cs.valid[c]) && (bank.valid_target[c] || ct.valid[c]);
  auto l_f = uda::cfa_loss_expr(mixed_s, mixed_t, valid_both);
  out.f = l_f.item();

  out.total = add(l_seg, add(nk::scale(l_ss, static_cast<T>(lambda_ss)),
                             nk::scale(l_f, static_cast<T>(lambda_f))));
  out.has_centers = true;
  out.centers_s = cs.centers.val();
  out.centers_t = ct.centers.val();
  out.valid_s = cs.valid;
  out.valid_t = ct.valid;
  return out;
}

struct EpochLog {
  std::string phase;
  int epoch = 0;
  double lr = 0, loss_seg = 0, loss_ss = 0, loss_f = 0, center_dist = 0, miou_val = 0;
};

inline std::string log_csv_header() {
  return "phase,epoch,lr,loss_seg,loss_ss,loss_f,center_dist,miou_val";
}

inline std::string log_csv_row(const EpochLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", log.phase.c_str(),
                log.epoch, log.lr, log.loss_seg, log.loss_ss, log.loss_f, log.center_dist,
                log.miou_val);
  return buf;
}

// Target-domain mIoU of the current model over a labeled split.
template <typename T>
double evaluate_target_miou(const model::Model<T>& m, const data::Split& split) {
  metrics::ConfusionMatrix cm(m.cfg.num_classes);
  for (const auto& sample : split.samples) {
    if (!sample.target_labels) continue;
    auto pred = model::predict(data::image_tensor<T>(sample.target), m);
    cm.add(pred.labels, *sample.target_labels);
  }
  return cm.report().miou;
}

// Runs the remaining epochs of st's schedule. on_epoch fires after each
// epoch with st already advanced (checkpointing hook); is_best tracks the
// best validation mIoU within this invocation.
template <typename T>
std::vector<EpochLog> run_training(
    ckpt::TrainerState<T>& st, const data::Split& train_split, const data::Split& val_split,
    const std::function<void(const EpochLog&, bool)>& on_epoch = {}) {
  st.cfg.validate();
  if (st.classes != train_split.meta.classes)
    throw config::ConfigError("model expects " + std::to_string(st.classes) +
                              " classes but dataset has " +
                              std::to_string(train_split.meta.classes));
  const int n = static_cast<int>(train_split.samples.size());
  if (n == 0) throw config::ConfigError("training split is empty");

  nk::AdamW<T> opt(model::param_list(st.model));
  opt.eps = static_cast<T>(config::RunConfig::kAdamEps);
  opt.weight_decay = static_cast<T>(config::RunConfig::kWeightDecay);
  if (!st.moment1.empty()) {
    for (std::size_t i = 0; i < st.moment1.size(); ++i) {
      opt.moment1(i) = st.moment1[i];
      opt.moment2(i) = st.moment2[i];
    }
  }
  opt.set_step_count(st.step);

  const int total_epochs = st.cfg.epochs_source + st.cfg.epochs_adapt;
  const long steps_per_epoch = (n + st.cfg.batch_size - 1) / st.cfg.batch_size;
  const long total_steps = total_epochs * steps_per_epoch;

  std::vector<EpochLog> logs;
  double best = -1.0;
  for (int epoch = st.epoch + 1; epoch <= total_epochs; ++epoch) {
    const Phase phase = epoch <= st.cfg.epochs_source ? Phase::kSourceOnly : Phase::kAdapt;
    const int mix_epoch = phase == Phase::kAdapt ? epoch - st.cfg.epochs_source : 1;

    std::vector<int> order_s(n), order_t(n);
    std::iota(order_s.begin(), order_s.end(), 0);
    std::iota(order_t.begin(), order_t.end(), 0);
    st.rng.shuffle(order_s);
    if (phase == Phase::kAdapt) st.rng.shuffle(order_t);

    EpochLog log;
    log.phase = phase == Phase::kSourceOnly ? "source" : "adapt";
    log.epoch = epoch;
    long batches = 0;
    for (int b0 = 0; b0 < n; b0 += st.cfg.batch_size) {
      const int b1 = std::min(b0 + st.cfg.batch_size, n);
      std::vector<const data::Sample*> batch_s, batch_t;
      for (int i = b0; i < b1; ++i) {
        batch_s.push_back(&train_split.samples[order_s[i]]);
        if (phase == Phase::kAdapt) batch_t.push_back(&train_split.samples[order_t[i]]);
      }
      auto result = total_loss(batch_s, batch_t, st.model, st.bank, st.cfg.lambda_ss,
                               st.cfg.lambda_f, phase, st.cfg.threshold, mix_epoch);
      opt.zero_grad();
      result.total.backward();
      log.lr = uda::poly_lr(st.step, total_steps, st.cfg.lr);
      opt.step(static_cast<T>(log.lr));
      ++st.step;
      if (result.has_centers)
        st.bank = uda::bank_update(std::move(st.bank), result.centers_s, result.valid_s,
                                   result.centers_t, result.valid_t, mix_epoch);
      log.loss_seg += result.seg;
      log.loss_ss += result.ss;
      log.loss_f += result.f;
      ++batches;
    }
    log.loss_seg /= batches;
    log.loss_ss /= batches;
    log.loss_f /= batches;
    log.center_dist = uda::center_distance(st.bank);
    log.miou_val = evaluate_target_miou(st.model, val_split);

    st.epoch = epoch;
    st.phase = log.phase;
    st.moment1.resize(opt.params().size());
    st.moment2.resize(opt.params().size());
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
      st.moment1[i] = opt.moment1(i);
      st.moment2[i] = opt.moment2(i);
    }
    const bool is_best = log.miou_val > best;
    if (is_best) best = log.miou_val;
    logs.push_back(log);
    if (on_epoch) on_epoch(log, is_best);
  }
  return logs;
}

// Fresh trainer state for a run configuration and class count.
template <typename T>
ckpt::TrainerState<T> make_state(const config::RunConfig& cfg, int classes) {
  cfg.validate();
  ckpt::TrainerState<T> st;
  st.cfg = cfg;
  st.classes = classes;
  at::DaConfig da;
  da.window_h = da.window_w = cfg.neighborhood;
  da.pe_mode = at::pe_mode_from_string(cfg.pe);
  da.wrap_horizontal = cfg.wrap_horizontal;
  nk::Rng init_rng(cfg.seed);
  st.model = model::build_model<T>(
      model::make_config(cfg.variant[0], classes, da, cfg.structure), init_rng);
  const int dim = st.model.cfg.decoder_dim;
  st.bank = uda::ClassCenterBank<T>::make(classes, dim);
  st.rng = init_rng.derive(0x0a7a);  // data-order stream, decoupled from init
  return st;
}

}  // namespace datr::train
