// Command-line surface: dataset generation, training, evaluation, inference,
// distortion reports and the oracle self-check. Exit codes: 0 ok, 1 runtime
// failure, 2 configuration error.

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "datr/checkpoint.hpp"
#include "datr/config.hpp"
#include "datr/dataset.hpp"
#include "datr/erpgeo.hpp"
#include "datr/image_io.hpp"
#include "datr/metrics.hpp"
#include "datr/selfcheck.hpp"
#include "datr/synthdata.hpp"
#include "datr/trainer.hpp"

namespace fs = std::filesystem;
using datr::config::ConfigError;
using datr::config::RunConfig;

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 16> kVisPalette{{{70, 130, 180},
                                                                   {128, 64, 128},
                                                                   {70, 70, 70},
                                                                   {153, 153, 153},
                                                                   {220, 20, 60},
                                                                   {107, 142, 35},
                                                                   {244, 35, 232},
                                                                   {102, 102, 156},
                                                                   {250, 170, 30},
                                                                   {220, 220, 0},
                                                                   {152, 251, 152},
                                                                   {0, 0, 142},
                                                                   {0, 60, 100},
                                                                   {119, 11, 32},
                                                                   {190, 153, 153},
                                                                   {81, 0, 81}}};

struct TrainFlags {
  RunConfig cfg;
  std::string config_file, resume;
  // CLI option handles, queried for explicit-use precedence on resume
  std::map<std::string, CLI::Option*> opts;
};

void add_run_flags(CLI::App* cmd, TrainFlags& f) {
  f.opts["variant"] = cmd->add_option("--variant", f.cfg.variant, "Model variant: M, T or S");
  f.opts["neighborhood"] =
      cmd->add_option("--neighborhood", f.cfg.neighborhood, "DA window size (odd)");
  f.opts["structure"] =
      cmd->add_option("--structure", f.cfg.structure, "Per-stage attention, 4 chars of o/s");
  f.opts["pe"] = cmd->add_option("--pe", f.cfg.pe, "Positional encoding: rpe, ape or none");
  f.opts["wrap-horizontal"] = cmd->add_flag("--wrap-horizontal", f.cfg.wrap_horizontal,
                                            "Wrap the DA window across the ERP seam");
  f.opts["lr"] = cmd->add_option("--lr", f.cfg.lr, "Initial learning rate");
  f.opts["epochs-source"] =
      cmd->add_option("--epochs-source", f.cfg.epochs_source, "Source-only epochs");
  f.opts["epochs-adapt"] =
      cmd->add_option("--epochs-adapt", f.cfg.epochs_adapt, "Adaptation epochs");
  f.opts["batch-size"] = cmd->add_option("--batch-size", f.cfg.batch_size, "Samples per step");
  f.opts["lambda-ss"] =
      cmd->add_option("--lambda-ss", f.cfg.lambda_ss, "Self-training loss weight");
  f.opts["lambda-f"] =
      cmd->add_option("--lambda-f", f.cfg.lambda_f, "Center-alignment loss weight");
  f.opts["threshold"] =
      cmd->add_option("--threshold", f.cfg.threshold, "Pseudo-label confidence cutoff");
  f.opts["seed"] = cmd->add_option("--seed", f.cfg.seed, "Run seed");
  f.opts["data"] = cmd->add_option("--data", f.cfg.data_dir, "Dataset directory");
  f.opts["out"] = cmd->add_option("--out", f.cfg.out_dir, "Output directory");
  cmd->add_option("--config", f.config_file, "key = value config file");
  cmd->add_option("--resume", f.resume, "Checkpoint to resume from");
}

// defaults < config file < explicit flags; on resume the checkpoint config
// replaces the defaults layer.
RunConfig resolve_config(const TrainFlags& f, const RunConfig& parsed,
                         const RunConfig* from_ckpt) {
  RunConfig cfg = from_ckpt ? *from_ckpt : RunConfig{};
  if (from_ckpt) {
    cfg.data_dir = parsed.data_dir;
    cfg.out_dir = parsed.out_dir;
  }
  if (!f.config_file.empty()) datr::config::apply_config_file(cfg, f.config_file);
  auto take = [&](const char* name, auto member) {
    const auto it = f.opts.find(name);
    if (it != f.opts.end() && it->second->count() > 0) cfg.*member = parsed.*member;
  };
  take("variant", &RunConfig::variant);
  take("neighborhood", &RunConfig::neighborhood);
  take("structure", &RunConfig::structure);
  take("pe", &RunConfig::pe);
  take("wrap-horizontal", &RunConfig::wrap_horizontal);
  take("lr", &RunConfig::lr);
  take("epochs-source", &RunConfig::epochs_source);
  take("epochs-adapt", &RunConfig::epochs_adapt);
  take("batch-size", &RunConfig::batch_size);
  take("lambda-ss", &RunConfig::lambda_ss);
  take("lambda-f", &RunConfig::lambda_f);
  take("threshold", &RunConfig::threshold);
  take("seed", &RunConfig::seed);
  take("data", &RunConfig::data_dir);
  take("out", &RunConfig::out_dir);
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainFlags& flags) {
  std::optional<datr::ckpt::TrainerState<float>> st;
  if (!flags.resume.empty()) {
    auto loaded = datr::ckpt::load<float>(flags.resume);
    loaded.cfg = resolve_config(flags, flags.cfg, &loaded.cfg);
    st = std::move(loaded);
  }
  RunConfig cfg = st ? st->cfg : resolve_config(flags, flags.cfg, nullptr);
  if (cfg.data_dir.empty() || cfg.out_dir.empty())
    throw ConfigError("train requires --data and --out");

  auto train_split = datr::data::load_split(cfg.data_dir, "train");
  auto val_split = datr::data::load_split(cfg.data_dir, "val", true);
  if (st && st->classes != train_split.meta.classes)
    throw ConfigError("checkpoint was trained with " + std::to_string(st->classes) +
                      " classes but dataset has " + std::to_string(train_split.meta.classes));
  if (!st) st = datr::train::make_state<float>(cfg, train_split.meta.classes);
  st->cfg = cfg;

  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  const fs::path log_path = out / "train_log.csv";
  const bool append = st->epoch > 0 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw datr::io::IoError("cannot write " + log_path.string());
  if (!append) log << datr::train::log_csv_header() << "\n";

  std::printf("%s\n", datr::train::log_csv_header().c_str());
  datr::train::run_training<float>(
      *st, train_split, val_split, [&](const datr::train::EpochLog& row, bool is_best) {
        const std::string csv = datr::train::log_csv_row(row);
        log << csv << "\n";
        log.flush();
        std::printf("%s\n", csv.c_str());
        std::fflush(stdout);
        datr::ckpt::save((out / "ckpt_last.dtrc").string(), *st);
        if (is_best) datr::ckpt::save((out / "ckpt_best.dtrc").string(), *st);
        // phase-boundary snapshot: the source-only model, also the branch
        // point for adaptation variants
        if (row.epoch == st->cfg.epochs_source)
          datr::ckpt::save((out / "ckpt_source.dtrc").string(), *st);
      });
  std::printf("done: %s\n", (out / "ckpt_last.dtrc").string().c_str());
  return 0;
}

int cmd_gen_data(const std::string& out_dir, datr::synth::DatasetParams params, int n_train,
                 int n_val) {
  if (params.classes < 2) throw ConfigError("gen-data requires at least 2 classes");
  if (n_train < 1 || n_val < 1) throw ConfigError("gen-data requires positive sample counts");
  if (out_dir.empty()) throw ConfigError("gen-data requires --out");
  fs::create_directories(out_dir);
  datr::synth::write_dataset(out_dir, params, n_train, n_val);
  std::printf("dataset written to %s\n", out_dir.c_str());
  std::printf("  classes      %d\n", params.classes);
  std::printf("  pinhole      %dx%d\n", params.pinhole_size, params.pinhole_size);
  std::printf("  erp          %dx%d\n", 2 * params.erp_height, params.erp_height);
  std::printf("  hfov         %.1f deg\n", params.hfov_deg);
  std::printf("  seed         %llu\n", static_cast<unsigned long long>(params.seed));
  std::printf("  train/val    %d/%d pairs\n", n_train, n_val);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& split,
             const std::string& out_csv) {
  auto st = datr::ckpt::load<float>(ckpt_path);
  auto data = datr::data::load_split(data_dir, split, true);
  if (st.classes != data.meta.classes)
    throw ConfigError("checkpoint has " + std::to_string(st.classes) + " classes, dataset " +
                      std::to_string(data.meta.classes));
  datr::metrics::ConfusionMatrix cm(st.classes);
  for (const auto& sample : data.samples) {
    auto pred = datr::model::predict(datr::data::image_tensor<float>(sample.target), st.model);
    cm.add(pred.labels, *sample.target_labels);
  }
  const auto rep = cm.report();
  std::printf("%-8s %-10s %s\n", "class", "iou", "present");
  std::string csv = "class,iou,present\n";
  for (int c = 0; c < st.classes; ++c) {
    std::printf("%-8d %-10.4f %s\n", c, rep.iou[c], rep.present[c] ? "yes" : "no");
    csv += std::to_string(c) + "," + std::to_string(rep.iou[c]) + "," +
           (rep.present[c] ? "1" : "0") + "\n";
  }
  std::printf("mIoU     %.4f  (mean over classes present in ground truth)\n", rep.miou);
  csv += "miou," + std::to_string(rep.miou) + ",\n";
  if (!out_csv.empty()) {
    std::ofstream out(out_csv);
    if (!out) throw datr::io::IoError("cannot write " + out_csv);
    out << csv;
  }
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& prefix) {
  auto st = datr::ckpt::load<float>(ckpt_path);
  auto img = datr::data::load_image(image_path);
  auto pred = datr::model::predict(datr::data::image_tensor<float>(img), st.model);

  std::vector<std::uint8_t> labels(pred.labels.begin(), pred.labels.end());
  datr::io::write_pnm(prefix + "_labels.pgm", img.h, img.w, 1, labels);

  std::vector<std::uint8_t> color(static_cast<std::size_t>(img.h) * img.w * 3);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const auto& rgb = kVisPalette[labels[p] % kVisPalette.size()];
    for (int c = 0; c < 3; ++c) color[p * 3 + c] = rgb[c];
  }
  datr::io::write_pnm(prefix + "_color.ppm", img.h, img.w, 3, color);

  nlohmann::json palette = nlohmann::json::array();
  for (int c = 0; c < st.classes; ++c) {
    const auto& rgb = kVisPalette[c % kVisPalette.size()];
    palette.push_back({{"class", c}, {"rgb", {rgb[0], rgb[1], rgb[2]}}});
  }
  std::ofstream side(prefix + "_palette.json");
  side << palette.dump(2) << "\n";
  std::printf("wrote %s_labels.pgm, %s_color.ppm, %s_palette.json\n", prefix.c_str(),
              prefix.c_str(), prefix.c_str());
  return 0;
}

int cmd_distortion_report(double width, int n, int n_prime, int rows, const std::string& out) {
  const auto table = datr::erpgeo::distortion_report(width, n, n_prime, rows);
  const std::string csv = datr::erpgeo::distortion_report_csv(table);
  if (out.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    std::ofstream f(out);
    if (!f) throw datr::io::IoError("cannot write " + out);
    f << csv;
    std::printf("wrote %s (%zu rows)\n", out.c_str(), table.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"datr: distortion-aware neighborhood attention segmentation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a paired pinhole/panorama dataset");
  datr::synth::DatasetParams gen_params;
  int n_train = 128, n_val = 32;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--seed", gen_params.seed, "Generator seed");
  gen->add_option("--n-train", n_train, "Training pairs");
  gen->add_option("--n-val", n_val, "Validation pairs");
  gen->add_option("--classes", gen_params.classes, "Number of classes (>= 2)");
  gen->add_option("--pinhole", gen_params.pinhole_size, "Pinhole image size (square)");
  gen->add_option("--erp-height", gen_params.erp_height, "ERP height (width is 2x)");
  gen->add_option("--hfov-deg", gen_params.hfov_deg, "Pinhole horizontal FoV in degrees");

  // train
  auto* train = app.add_subcommand("train", "Train source-only then adapt to the target domain");
  TrainFlags train_flags;
  add_run_flags(train, train_flags);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint: per-class IoU and mIoU");
  std::string eval_ckpt, eval_data, eval_split = "val", eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--split", eval_split, "Dataset split (needs target labels)");
  eval->add_option("--out", eval_out, "Optional CSV report path");

  // infer
  auto* infer = app.add_subcommand("infer", "Segment one image into label/color maps");
  std::string infer_ckpt, infer_image, infer_prefix = "prediction";
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint path")->required();
  infer->add_option("--image", infer_image, "Input PPM image")->required();
  infer->add_option("--out-prefix", infer_prefix, "Output file prefix");

  // distortion-report
  auto* dist = app.add_subcommand("distortion-report", "Tabulate ERP pixel width and distortion");
  double dr_width = 2 * datr::erpgeo::kPi;
  int dr_n = 2048, dr_np = 1, dr_rows = 9;
  std::string dr_out;
  dist->add_option("--width", dr_width, "ERP width in arc-length units");
  dist->add_option("--n", dr_n, "Pixels per latitude row");
  dist->add_option("--n-prime", dr_np, "Pixel separation n'");
  dist->add_option("--rows", dr_rows, "Sample rows (>= 2)");
  dist->add_option("--out", dr_out, "CSV path (stdout when omitted)");

  // selfcheck
  auto* self = app.add_subcommand("selfcheck", "Run the built-in oracle suite");
  std::string inject;
  self->add_option("--inject", inject, "Fault injection for testing (rpe-shape)")
      ->check(CLI::IsMember({"", "rpe-shape"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_params, n_train, n_val);
    if (train->parsed()) return cmd_train(train_flags);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_out);
    if (infer->parsed()) return cmd_infer(infer_ckpt, infer_image, infer_prefix);
    if (dist->parsed()) return cmd_distortion_report(dr_width, dr_n, dr_np, dr_rows, dr_out);
    if (self->parsed()) return datr::selfcheck::print_report(datr::selfcheck::run_checks(inject)) ? 0 : 1;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
