#pragma once
// Experiment runner: JSON-configured training for the three regimes, the
// detachment and weighting sweeps, evaluation, and CSV/JSON record output.

#include <cstdint>
#include <string>
#include <vector>

#include "lakd/data.hpp"
#include "lakd/losses.hpp"
#include "lakd/sdm.hpp"

namespace lakd {

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
};

// One experiment, fully determined: two runs of the same config produce the
// same record content, wall-clock column aside. The trained net is always
// the "student"; a teacher enters only through its checkpoint, and must
// share the student's depth (taps pair up by unit index).
struct RunConfig {
  DatasetSpec data;
  // center the inputs: CIFAR channel statistics for CIFAR data, [0,1] ->
  // [-1,1] for synthetic. Uncentered narrow nets lose whole samples to
  // dead relu channels, which the attention loss (rightly) rejects.
  bool normalize = true;
  bool augment = true;
  int student_depth = 4;
  int student_width = 8;
  std::string teacher_checkpoint;  // required by the distillation regimes
  Regime regime = Regime::scratch;
  LossWeights weights;
  std::vector<int> detach_after;
  std::vector<int> align_at;
  bool terminal_hard = true;
  bool terminal_attention = true;
  bool terminal_feature = true;
  NdamConfig ndam;
  OptimizerConfig opt;
  std::uint64_t seed = 1;
  std::string out_dir;  // empty: in-memory run, nothing written
};

int dataset_classes(const RunConfig& config);
void validate_config(const RunConfig& config);

std::string regime_name(Regime regime);
Regime regime_from_name(const std::string& name);

// Canonical serialization (sorted keys, compact) and its FNV-1a 64 hash;
// the hash is stamped into every output file so drift is detectable.
std::string config_to_json(const RunConfig& config);
RunConfig config_from_json(const std::string& text);
RunConfig load_config_file(const std::string& path);
std::string config_hash(const RunConfig& config);

struct EpochRow {
  std::size_t epoch = 0;
  double hard = 0, soft = 0, attention = 0, feature = 0, total = 0;
  double top1 = 0, top5 = 0;
  double ek = 0;
  bool ek_defined = false;          // false: left blank in the CSV
  std::vector<double> layer_l2;    // one entry per alignment tap
  std::size_t peak_retained = 0;
  double seconds = 0;              // outside the reproducibility contract
};

// Student rows x teacher columns over the shared tap set; NaN marks a cell
// whose activations were degenerate.
struct CkaMatrix {
  std::vector<int> taps;
  std::vector<double> values;  // row-major, taps.size()^2 when present
};

struct RunRecord {
  std::vector<EpochRow> rows;
  CkaMatrix cka;  // empty for scratch runs
  std::string hash;
  double final_top1 = 0;
};

std::vector<std::string> csv_header(const RunConfig& config);
std::string record_to_csv(const RunConfig& config, const RunRecord& rec);
std::string record_to_json(const RunConfig& config, const RunRecord& rec);

// Trains per the regime and, when out_dir is set, writes record.csv,
// record.json and model.ckpt there.
RunRecord cmd_train(const RunConfig& config);

struct EvalReport {
  double top1 = 0, top5 = 0;
  double ek = 0;
  bool ek_defined = false;
  CkaMatrix cka;  // populated when a teacher checkpoint is given
  std::size_t samples = 0;
};

// Evaluates a checkpoint on the config's validation split; the config's
// teacher checkpoint, when set, adds EK and the CKA matrix.
EvalReport cmd_eval(const std::string& checkpoint, const RunConfig& config);

enum class SweepKind { detach_locations, ndam_grid };

// Cell grammar: detach sweep cells are "none" or "1,4,9" (alignment
// locations; every location but the last becomes a detach point). Weighting
// sweep cells are "off", "abs:0.5,0.5" or "noabs:0.25,0.75".
RunConfig cell_config(const RunConfig& base, SweepKind kind, const std::string& cell);

struct SweepCell {
  std::string name;
  bool ok = false;
  double top1 = 0;
  double ek = 0;
  bool ek_defined = false;
  std::string detail;  // failure message when !ok
};

struct SweepTable {
  SweepKind kind = SweepKind::detach_locations;
  std::vector<SweepCell> cells;
  bool all_ok = true;
};

// One cmd_train per cell with the base seed held fixed; a failing cell is
// recorded and the sweep continues. Writes <out_dir>/ablation.csv when the
// base config names an output directory.
SweepTable cmd_ablate(const RunConfig& base, SweepKind kind,
                      const std::vector<std::string>& cells);
std::string table_to_csv(const RunConfig& base, const SweepTable& table);

// Dumps per-sample attention maps of the checkpointed net at every stage
// end to <out_dir>/attention/u<unit>_s<i>.pgm, using the config's pooling
// weights (0.5/0.5 when the config has weighting off).
void cmd_export_attention(const std::string& checkpoint, const RunConfig& config,
                          std::size_t count, const std::string& out_dir);

}  // namespace lakd
