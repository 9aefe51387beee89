// lakd: train, evaluate and ablate locally-distilled students from the
// command line. Every run is driven by a RunConfig: --config loads a JSON
// document, individual flags override its fields.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lakd/error.hpp"
#include "lakd/experiment.hpp"

namespace {

using lakd::RunConfig;

// flag holders + the CLI11 options that tell us which were actually given
struct ConfigFlags {
  std::string config_path;
  std::string regime;
  std::uint64_t seed = 0;
  std::size_t epochs = 0, batch_size = 0;
  double lr = 0, momentum = 0, weight_decay = 0;
  int depth = 0, width = 0;
  std::string teacher;
  double alpha = 0, beta = 0, temperature = 0;
  std::string detach, align;
  double ndam_alpha = 0, ndam_beta = 0;
  bool ndam_no_abs = false, ndam_raw = false;
  std::size_t synth_classes = 0, synth_samples = 0, synth_size = 0;
  double synth_sigma = 0;
  std::uint64_t synth_seed = 0;
  std::string cifar;
  std::size_t train_count = 0, val_count = 0;
  std::uint64_t shuffle_seed = 0;
  bool augment = true, normalize = false;
  std::string out;

  CLI::Option *o_regime = nullptr, *o_seed = nullptr, *o_epochs = nullptr, *o_batch = nullptr,
              *o_lr = nullptr, *o_momentum = nullptr, *o_wd = nullptr, *o_depth = nullptr,
              *o_width = nullptr, *o_teacher = nullptr, *o_alpha = nullptr, *o_beta = nullptr,
              *o_temp = nullptr, *o_detach = nullptr, *o_align = nullptr, *o_nalpha = nullptr,
              *o_nbeta = nullptr, *o_noabs = nullptr, *o_raw = nullptr, *o_sclasses = nullptr,
              *o_ssamples = nullptr, *o_ssize = nullptr, *o_ssigma = nullptr, *o_sseed = nullptr,
              *o_cifar = nullptr, *o_train = nullptr, *o_val = nullptr, *o_shuffle = nullptr,
              *o_augment = nullptr, *o_normalize = nullptr, *o_out = nullptr;
};

void add_config_flags(CLI::App* sub, ConfigFlags& f) {
  sub->add_option("--config", f.config_path, "JSON run configuration; flags override its fields");
  f.o_regime = sub->add_option("--regime", f.regime, "scratch, traditional-kd or lakd");
  f.o_seed = sub->add_option("--seed", f.seed, "master seed for the run");
  f.o_epochs = sub->add_option("--epochs", f.epochs, "training epochs");
  f.o_batch = sub->add_option("--batch-size", f.batch_size, "samples per step");
  f.o_lr = sub->add_option("--lr", f.lr, "base learning rate (decays linearly)");
  f.o_momentum = sub->add_option("--momentum", f.momentum, "nesterov momentum");
  f.o_wd = sub->add_option("--weight-decay", f.weight_decay, "l2 weight decay");
  f.o_depth = sub->add_option("--depth", f.depth, "student depth in units");
  f.o_width = sub->add_option("--width", f.width, "student base width in channels");
  f.o_teacher = sub->add_option("--teacher", f.teacher, "teacher checkpoint path");
  f.o_alpha = sub->add_option("--alpha", f.alpha, "hard-loss weight");
  f.o_beta = sub->add_option("--beta", f.beta, "feature-loss weight");
  f.o_temp = sub->add_option("--temperature", f.temperature, "distillation temperature");
  f.o_detach = sub->add_option("--detach", f.detach,
                               "detach points, e.g. '1,4' ('none' clears them)");
  f.o_align = sub->add_option("--align", f.align,
                              "alignment taps, e.g. '1,4,9' ('none' clears them)");
  f.o_nalpha = sub->add_option("--ndam-alpha", f.ndam_alpha, "average-pool weight");
  f.o_nbeta = sub->add_option("--ndam-beta", f.ndam_beta, "max-pool weight");
  f.o_noabs = sub->add_flag("--ndam-no-abs", f.ndam_no_abs, "sum signed activations");
  f.o_raw = sub->add_flag("--ndam-raw", f.ndam_raw, "weight the raw tap instead of the projected one");
  f.o_sclasses = sub->add_option("--synth-classes", f.synth_classes, "synthetic class count");
  f.o_ssamples = sub->add_option("--synth-samples", f.synth_samples, "synthetic sample count");
  f.o_ssize = sub->add_option("--synth-size", f.synth_size, "synthetic image side");
  f.o_ssigma = sub->add_option("--synth-sigma", f.synth_sigma, "synthetic noise sigma");
  f.o_sseed = sub->add_option("--synth-seed", f.synth_seed, "synthetic generator seed");
  f.o_cifar = sub->add_option("--cifar", f.cifar, "CIFAR-10 binary file (overrides synthetic)");
  f.o_train = sub->add_option("--train-count", f.train_count, "training split size");
  f.o_val = sub->add_option("--val-count", f.val_count, "validation split size");
  f.o_shuffle = sub->add_option("--shuffle-seed", f.shuffle_seed, "split shuffle seed");
  f.o_augment = sub->add_flag("--augment,!--no-augment", f.augment, "pad-crop + flip augmentation");
  f.o_normalize = sub->add_flag("--normalize,!--no-normalize", f.normalize,
                                "CIFAR channel normalization");
  f.o_out = sub->add_option("--out", f.out, "output directory");
}

RunConfig build_config(const ConfigFlags& f) {
  RunConfig c;
  if (!f.config_path.empty()) c = lakd::load_config_file(f.config_path);
  if (f.o_regime->count()) c.regime = lakd::regime_from_name(f.regime);
  if (f.o_seed->count()) c.seed = f.seed;
  if (f.o_epochs->count()) c.opt.epochs = f.epochs;
  if (f.o_batch->count()) c.opt.batch_size = f.batch_size;
  if (f.o_lr->count()) c.opt.lr = f.lr;
  if (f.o_momentum->count()) c.opt.momentum = f.momentum;
  if (f.o_wd->count()) c.opt.weight_decay = f.weight_decay;
  if (f.o_depth->count()) c.student_depth = f.depth;
  if (f.o_width->count()) c.student_width = f.width;
  if (f.o_teacher->count()) c.teacher_checkpoint = f.teacher;
  if (f.o_alpha->count()) c.weights.alpha = f.alpha;
  if (f.o_beta->count()) c.weights.beta = f.beta;
  if (f.o_temp->count()) c.weights.temperature = f.temperature;
  auto parse_units = [](const std::string& s, const char* flag) {
    std::vector<int> out;
    if (s == "none" || s.empty()) return out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      std::size_t comma = s.find(',', pos);
      std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      try {
        std::size_t used = 0;
        out.push_back(std::stoi(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw lakd::ConfigError(std::string(flag) + ": '" + tok + "' is not a unit index");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    return out;
  };
  if (f.o_detach->count()) c.detach_after = parse_units(f.detach, "--detach");
  if (f.o_align->count()) c.align_at = parse_units(f.align, "--align");
  if (f.o_nalpha->count()) c.ndam.alpha_pool = f.ndam_alpha;
  if (f.o_nbeta->count()) c.ndam.beta_pool = f.ndam_beta;
  if (f.o_noabs->count()) c.ndam.use_abs = !f.ndam_no_abs;
  if (f.o_raw->count()) c.ndam.weight_projected = !f.ndam_raw;
  if (f.o_sclasses->count()) c.data.synth.num_classes = f.synth_classes;
  if (f.o_ssamples->count()) c.data.synth.samples = f.synth_samples;
  if (f.o_ssize->count()) c.data.synth.image_size = f.synth_size;
  if (f.o_ssigma->count()) c.data.synth.sigma = f.synth_sigma;
  if (f.o_sseed->count()) c.data.synth.seed = f.synth_seed;
  if (f.o_cifar->count()) c.data.cifar_path = f.cifar;
  if (f.o_train->count()) c.data.train_count = f.train_count;
  if (f.o_val->count()) c.data.val_count = f.val_count;
  if (f.o_shuffle->count()) c.data.shuffle_seed = f.shuffle_seed;
  if (f.o_augment->count()) c.augment = f.augment;
  if (f.o_normalize->count()) c.normalize = f.normalize;
  if (f.o_out->count()) c.out_dir = f.out;
  return c;
}

void print_eval(const lakd::EvalReport& rep) {
  std::printf("samples %zu  top1 %.4f  top5 %.4f", rep.samples, rep.top1, rep.top5);
  if (rep.ek_defined) std::printf("  ek %.4f", rep.ek);
  std::printf("\n");
  if (!rep.cka.taps.empty()) {
    const std::size_t k = rep.cka.taps.size();
    std::printf("cka (student rows x teacher cols, taps");
    for (int t : rep.cka.taps) std::printf(" %d", t);
    std::printf("):\n");
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        double v = rep.cka.values[i * k + j];
        if (v == v) std::printf("  %.4f", v);
        else std::printf("     nan");
      }
      std::printf("\n");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"local-block knowledge distillation trainer"};
  app.require_subcommand(1);

  ConfigFlags train_f, eval_f, ablate_f, export_f;

  CLI::App* train = app.add_subcommand("train", "train one student per the configured regime");
  add_config_flags(train, train_f);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  add_config_flags(eval, eval_f);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint to evaluate")->required();

  CLI::App* ablate = app.add_subcommand("ablate", "run a sweep with seeds held fixed");
  add_config_flags(ablate, ablate_f);
  std::string sweep_kind;
  std::string sweep_cells;
  ablate->add_option("--sweep", sweep_kind, "detach | ndam")->required();
  ablate->add_option("--cells", sweep_cells, "semicolon-separated sweep cells")->required();

  CLI::App* exporter =
      app.add_subcommand("export-attention", "dump per-sample attention maps as PGM files");
  add_config_flags(exporter, export_f);
  std::string export_ckpt;
  std::size_t export_count = 4;
  exporter->add_option("--checkpoint", export_ckpt, "checkpoint whose maps to dump")->required();
  exporter->add_option("--count", export_count, "validation samples to export");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      RunConfig cfg = build_config(train_f);
      lakd::RunRecord rec = lakd::cmd_train(cfg);
      const lakd::EpochRow& last = rec.rows.back();
      std::printf("trained %zu epochs  loss %.4f  top1 %.4f  top5 %.4f", rec.rows.size(),
                  last.total, last.top1, last.top5);
      if (last.ek_defined) std::printf("  ek %.4f", last.ek);
      std::printf("  peak_retained %zu\n", last.peak_retained);
      if (!cfg.out_dir.empty()) std::printf("wrote %s/{record.csv,record.json,model.ckpt}\n",
                                            cfg.out_dir.c_str());
    } else if (eval->parsed()) {
      print_eval(lakd::cmd_eval(eval_ckpt, build_config(eval_f)));
    } else if (ablate->parsed()) {
      RunConfig cfg = build_config(ablate_f);
      lakd::SweepKind kind;
      if (sweep_kind == "detach") kind = lakd::SweepKind::detach_locations;
      else if (sweep_kind == "ndam") kind = lakd::SweepKind::ndam_grid;
      else throw lakd::ConfigError("--sweep must be 'detach' or 'ndam'");
      std::vector<std::string> cells;
      std::size_t pos = 0;
      while (pos <= sweep_cells.size()) {
        std::size_t semi = sweep_cells.find(';', pos);
        cells.push_back(sweep_cells.substr(
            pos, semi == std::string::npos ? std::string::npos : semi - pos));
        if (semi == std::string::npos) break;
        pos = semi + 1;
      }
      lakd::SweepTable table = lakd::cmd_ablate(cfg, kind, cells);
      std::fputs(lakd::table_to_csv(cfg, table).c_str(), stdout);
      if (!table.all_ok) return 1;
    } else if (exporter->parsed()) {
      RunConfig cfg = build_config(export_f);
      std::string out = cfg.out_dir.empty() ? std::string(".") : cfg.out_dir;
      lakd::cmd_export_attention(export_ckpt, cfg, export_count, out);
      std::printf("wrote %s/attention/*.pgm\n", out.c_str());
    }
  } catch (const lakd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const lakd::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const lakd::DimensionError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
