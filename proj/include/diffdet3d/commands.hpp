#pragma once

#include "diffdet3d/run_config.hpp"
#include "diffdet3d/ssl.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace diffdet3d {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissingInput = 3,
  kExitNonFinite = 4,
};

/// A command failure together with the process exit code it maps to.
class CommandError : public std::runtime_error {
 public:
  CommandError(int code, const std::string& message) : std::runtime_error(message), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

using Logger = std::function<void(const std::string&)>;

/// $DIFFDET3D_OUT when set and non-empty, otherwise "runs".
std::filesystem::path default_out_root();

/// 64-bit FNV-1a as 16 hex digits.
std::string fingerprint(std::string_view bytes);

// ------------------------------------------------------------------ gen-data

/// "<dataset>.manifest.json" next to the dataset file.
std::filesystem::path manifest_path(const std::filesystem::path& dataset);

/// Writes the dataset and its split manifest.
Dataset gen_data(const RunConfig& config, const std::filesystem::path& out);

struct LoadedDataset {
  Dataset data;
  std::string fingerprint;
};

/// Missing files, unreadable records, a manifest that does not describe the
/// file, or a class count different from the config are CommandError(3).
LoadedDataset load_dataset_checked(const std::filesystem::path& path, const RunConfig& config);

// --------------------------------------------------------------------- train

namespace run_files {
inline constexpr const char* kConfig = "config.ini";
inline constexpr const char* kMetrics = "metrics.csv";
inline constexpr const char* kUnlabeled = "unlabeled.csv";
inline constexpr const char* kPlQuality = "pl_quality.csv";
inline constexpr const char* kEval = "eval.csv";
inline constexpr const char* kState = "state.ckpt";
inline constexpr const char* kPretrain = "pretrain.ckpt";
inline constexpr const char* kStudent = "student.ckpt";
inline constexpr const char* kTeacher = "teacher.ckpt";
}  // namespace run_files

namespace schemas {
inline constexpr const char* kMetrics = "diffdet3d.metrics/1";
inline constexpr const char* kUnlabeled = "diffdet3d.unlabeled/1";
inline constexpr const char* kPlQuality = "diffdet3d.pl_quality/1";
inline constexpr const char* kApTable = "diffdet3d.ap_table/1";
inline constexpr const char* kAblation = "diffdet3d.ablation/1";
inline constexpr const char* kAblationRuns = "diffdet3d.ablation_runs/1";
}  // namespace schemas

struct TrainOptions {
  RunConfig config;
  std::filesystem::path out;
  /// Train the supervised phase from scratch; otherwise start SSL from `init`
  /// (default: <out>/pretrain.ckpt).
  bool pretrain = false;
  std::optional<std::filesystem::path> init;
  bool ssl = true;
  /// Continue from <out>/state.ckpt.
  bool resume = false;
  /// Stop after this many epochs in this invocation (0 = no limit).
  int max_epochs = 0;
  Logger log;
};

struct TrainOutcome {
  bool finished = false;
  int epochs_run = 0;
  EvalResult eval;  // student on the validation split, when finished
};

/// Runs pretraining and/or SSL into a run directory. Non-finite losses become
/// CommandError(4), missing checkpoints CommandError(3).
TrainOutcome train(const TrainOptions& options, const Dataset& data);

/// Resumable training state in the checkpoint byte format, entries prefixed
/// student/, teacher/, adam_m/, adam_v/ plus meta/ scalars.
void save_train_state(const std::filesystem::path& path, const TrainState& state, bool ssl_enabled);
TrainState load_train_state(const std::filesystem::path& path, const RunConfig& config, bool* ssl_enabled);

// ---------------------------------------------------------------------- eval

/// Loads detector parameters and checks their manifest against the config.
ParamStore load_model(const std::filesystem::path& checkpoint, const DetectorConfig& config);

/// "val", "train", "labeled" or "unlabeled".
std::vector<Scene> select_split(const Dataset& data, const std::string& split);

void write_eval_csv(const std::filesystem::path& path, const EvalResult& result);
EvalResult read_eval_csv(const std::filesystem::path& path);

// -------------------------------------------------------------------- ablate

struct GridAxis {
  std::string name;
  std::vector<std::string> values;
};

std::vector<std::string> ablation_axes();

/// "axis=v1,v2;axis=v1,v2". Unknown axes and bad values are CommandError(2).
std::vector<GridAxis> parse_grid(const std::string& spec);

void apply_axis(RunConfig& config, const std::string& axis, const std::string& value);

/// Cells in table order: the first axis varies fastest.
std::vector<std::vector<std::string>> grid_cells(const std::vector<GridAxis>& grid);

struct RunRecord {
  std::uint64_t seed = 0;
  std::string run_key;
  std::filesystem::path run_dir;
  std::filesystem::path pretrain_dir;
  EvalResult eval;
  EvalResult pretrain_eval;
  PseudoLabelQuality pl;  // teacher at the final epoch, unlabeled split, IoU 0.5
};

/// Directories are keyed by the config fingerprint, so identical runs are
/// shared across grids and invocations.
std::filesystem::path pretrain_dir_for(const RunConfig& config, const std::string& data_fp,
                                       const std::filesystem::path& cache);
std::filesystem::path run_dir_for(const RunConfig& config, const std::string& data_fp,
                                  const std::filesystem::path& cache);

/// Supervised pretraining into its cache directory unless already complete.
void ensure_pretrain(const RunConfig& config, const Dataset& data, const std::string& data_fp,
                     const std::filesystem::path& cache, const Logger& log);

/// Pretrain (cached) then SSL (cached), returning the recorded results.
RunRecord cached_run(const RunConfig& config, const Dataset& data, const std::string& data_fp,
                     const std::filesystem::path& cache, const Logger& log);

struct AblateOptions {
  RunConfig base;
  std::vector<GridAxis> grid;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out;
  std::filesystem::path cache;
  int jobs = 1;
  Logger log;
};

struct CellResult {
  std::vector<std::string> values;
  std::vector<RunRecord> runs;
  double map25_mean = 0.0;
  double map25_std = 0.0;
  double map50_mean = 0.0;
  double map50_std = 0.0;
};

/// One seeded run per (cell, seed); writes ablation.csv and ablation_runs.csv.
std::vector<CellResult> ablate(const AblateOptions& options, const LoadedDataset& data);

}  // namespace diffdet3d
