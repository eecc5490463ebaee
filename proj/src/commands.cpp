#include "diffdet3d/commands.hpp"

#include "diffdet3d/csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace diffdet3d {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << bytes;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void log_to(const Logger& log, const std::string& line) {
  if (log) log(line);
}

const char* phase_name(Phase p) { return p == Phase::kPretrain ? "pretrain" : "ssl"; }

int phase_rank(const std::string& name) { return name == "pretrain" ? 0 : 1; }

Eigen::MatrixXd scalar(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

std::string manifest_difference(const ParamStore& got, const ParamStore& want) {
  if (got.size() != want.size()) {
    return std::to_string(got.size()) + " entries, expected " + std::to_string(want.size());
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto& a = got.entries()[i];
    const auto& b = want.entries()[i];
    if (a.name != b.name) return "entry " + std::to_string(i) + " is '" + a.name + "', expected '" + b.name + "'";
    if (a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
      return "'" + a.name + "' is " + std::to_string(a.value.rows()) + "x" + std::to_string(a.value.cols()) +
             ", expected " + std::to_string(b.value.rows()) + "x" + std::to_string(b.value.cols());
    }
  }
  return "";
}

template <typename F>
void parallel_for(std::size_t n, int jobs, F f) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next++;
        if (i >= n) return;
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

RunConfig pretrain_key_config(RunConfig c) {
  const RunConfig d;
  c.checkpoint_every = d.checkpoint_every;
  c.pl_quality_every = d.pl_quality_every;
  c.ssl.ddim_on = d.ssl.ddim_on;
  c.ssl.ddim_steps = d.ssl.ddim_steps;
  c.ssl.renewal_on = d.ssl.renewal_on;
  c.ssl.renew_thresh = d.ssl.renew_thresh;
  c.ssl.renew_use_iou = d.ssl.renew_use_iou;
  c.ssl.lambda_u = d.ssl.lambda_u;
  c.ssl.obj_thresh = d.ssl.obj_thresh;
  c.ssl.cls_thresh = d.ssl.cls_thresh;
  c.ssl.iou_thresh = d.ssl.iou_thresh;
  c.ssl.pl_nms_iou = d.ssl.pl_nms_iou;
  c.ssl.ema_decay = d.ssl.ema_decay;
  c.ssl.batch_unlabeled = d.ssl.batch_unlabeled;
  c.ssl.ssl_epochs = d.ssl.ssl_epochs;
  return c;
}

PseudoLabelQuality last_pl_quality(const fs::path& path) {
  const CsvTable t = read_csv(path);
  if (t.rows.empty()) throw std::runtime_error("no pseudo-label quality rows in " + path.string());
  const auto& r = t.rows.back();
  return {std::stod(r[t.column("map50")]), std::stod(r[t.column("recall50")])};
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

fs::path default_out_root() {
  const char* env = std::getenv("DIFFDET3D_OUT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
}

std::string fingerprint(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

// ------------------------------------------------------------------ gen-data

fs::path manifest_path(const fs::path& dataset) { return fs::path(dataset.string() + ".manifest.json"); }

Dataset gen_data(const RunConfig& config, const fs::path& out) {
  config.validate();
  Dataset ds = generate_dataset(config.scene, config.n_train, config.n_val, config.labeled_ratio, config.seed);
  const std::string text = dataset_to_string(ds);
  write_file_atomic(out, text);
  json m;
  m["format"] = "diffdet3d.split_manifest";
  m["version"] = 1;
  m["dataset"] = out.filename().string();
  m["dataset_fingerprint"] = fingerprint(text);
  m["seed"] = ds.seed;
  m["labeled_ratio"] = ds.labeled_ratio;
  m["n_train"] = ds.train.size();
  m["n_val"] = ds.val.size();
  m["labeled"] = ds.split.labeled;
  m["unlabeled"] = ds.split.unlabeled;
  write_file_atomic(manifest_path(out), m.dump(2) + "\n");
  return ds;
}

LoadedDataset load_dataset_checked(const fs::path& path, const RunConfig& config) {
  if (!fs::exists(path)) throw CommandError(kExitMissingInput, "dataset not found: " + path.string());
  LoadedDataset out;
  std::string text;
  try {
    text = read_file(path);
    out.data = dataset_from_string(text);
  } catch (const std::exception& e) {
    throw CommandError(kExitMissingInput, "cannot load dataset " + path.string() + ": " + e.what());
  }
  out.fingerprint = fingerprint(text);
  const fs::path mpath = manifest_path(path);
  if (fs::exists(mpath)) {
    json m;
    try {
      m = json::parse(read_file(mpath));
    } catch (const std::exception& e) {
      throw CommandError(kExitMissingInput, "cannot parse manifest " + mpath.string() + ": " + e.what());
    }
    if (m.value("dataset_fingerprint", std::string()) != out.fingerprint ||
        m.value("labeled", std::vector<std::size_t>{}) != out.data.split.labeled) {
      throw CommandError(kExitMissingInput, "manifest mismatch: " + mpath.string() + " does not describe " +
                                                path.string());
    }
  }
  if (out.data.config.n_classes != config.ssl.detector.n_classes) {
    throw CommandError(kExitMissingInput, "manifest mismatch: dataset has " +
                                              std::to_string(out.data.config.n_classes) +
                                              " classes, config expects " +
                                              std::to_string(config.ssl.detector.n_classes));
  }
  return out;
}

// --------------------------------------------------------------------- train

void save_train_state(const fs::path& path, const TrainState& state, bool ssl_enabled) {
  ParamStore st;
  for (const auto& e : state.student.entries()) st.add("student/" + e.name, e.value);
  for (const auto& e : state.teacher.entries()) st.add("teacher/" + e.name, e.value);
  for (const auto& e : state.opt.first_moment.entries()) st.add("adam_m/" + e.name, e.value);
  for (const auto& e : state.opt.second_moment.entries()) st.add("adam_v/" + e.name, e.value);
  st.add("meta/phase", scalar(state.phase == Phase::kSsl ? 1.0 : 0.0));
  st.add("meta/epoch", scalar(state.epoch));
  st.add("meta/adam_step", scalar(static_cast<double>(state.opt.step)));
  st.add("meta/ssl_enabled", scalar(ssl_enabled ? 1.0 : 0.0));
  write_file_atomic(path, serialize_params(st));
}

TrainState load_train_state(const fs::path& path, const RunConfig& config, bool* ssl_enabled) {
  if (!fs::exists(path)) throw CommandError(kExitMissingInput, "training state not found: " + path.string());
  ParamStore st;
  try {
    st = deserialize_params(read_file(path));
  } catch (const std::exception& e) {
    throw CommandError(kExitMissingInput, "cannot load training state " + path.string() + ": " + e.what());
  }
  TrainState s;
  s.opt.config = config.ssl.adamw;
  for (const auto& e : st.entries()) {
    const auto slash = e.name.find('/');
    const std::string group = e.name.substr(0, slash);
    const std::string name = e.name.substr(slash + 1);
    if (group == "student") {
      s.student.add(name, e.value);
    } else if (group == "teacher") {
      s.teacher.add(name, e.value);
    } else if (group == "adam_m") {
      s.opt.first_moment.add(name, e.value);
    } else if (group == "adam_v") {
      s.opt.second_moment.add(name, e.value);
    }
  }
  try {
    s.phase = st.at("meta/phase")(0, 0) > 0.5 ? Phase::kSsl : Phase::kPretrain;
    s.epoch = static_cast<int>(st.at("meta/epoch")(0, 0));
    s.opt.step = static_cast<std::int64_t>(st.at("meta/adam_step")(0, 0));
    if (ssl_enabled != nullptr) *ssl_enabled = st.at("meta/ssl_enabled")(0, 0) > 0.5;
  } catch (const std::out_of_range& e) {
    throw CommandError(kExitMissingInput, "training state " + path.string() + " lacks " + e.what());
  }
  const ParamStore want = init_detector_params(config.ssl.detector, 0);
  for (const ParamStore* p : {&s.student, &s.teacher, &s.opt.first_moment, &s.opt.second_moment}) {
    const std::string diff = manifest_difference(*p, want);
    if (!diff.empty()) {
      throw CommandError(kExitMissingInput, "manifest mismatch in training state " + path.string() + ": " + diff);
    }
  }
  return s;
}

TrainOutcome train(const TrainOptions& o, const Dataset& data) {
  const RunConfig& cfg = o.config;
  cfg.validate();
  const fs::path out = o.out;
  const std::string ini = to_ini(cfg);
  const fs::path snapshot = out / run_files::kConfig;
  TrainState state;
  bool ssl_enabled = o.ssl;

  if (o.resume) {
    if (!fs::exists(out / run_files::kState)) {
      throw CommandError(kExitMissingInput, "cannot resume: no " + std::string(run_files::kState) + " in " +
                                                out.string());
    }
    if (fs::exists(snapshot) && read_file(snapshot) != ini) {
      throw CommandError(kExitConfig, "cannot resume: config differs from the run snapshot " + snapshot.string());
    }
    state = load_train_state(out / run_files::kState, cfg, &ssl_enabled);
    const std::string phase = phase_name(state.phase);
    const int epoch = state.epoch;
    filter_csv_rows(out / run_files::kMetrics, [&](const CsvTable& t, const CsvRow& r) {
      const int rank = phase_rank(r[t.column("phase")]);
      return rank < phase_rank(phase) || (rank == phase_rank(phase) && std::stoi(r[t.column("epoch")]) <= epoch);
    });
    for (const char* f : {run_files::kUnlabeled, run_files::kPlQuality}) {
      filter_csv_rows(out / f, [&](const CsvTable& t, const CsvRow& r) {
        return state.phase == Phase::kSsl && std::stoi(r[t.column("epoch")]) <= epoch;
      });
    }
    log_to(o.log, "resuming " + phase + " at epoch " + std::to_string(epoch));
  } else {
    if (fs::exists(out / run_files::kMetrics) || fs::exists(out / run_files::kState)) {
      throw CommandError(kExitConfig, "run directory " + out.string() +
                                          " already holds a run; pass --resume or choose a fresh --out");
    }
    if (o.pretrain) {
      state = start_pretrain(cfg.ssl, cfg.seed);
    } else {
      if (!ssl_enabled) throw CommandError(kExitConfig, "--ssl off without --pretrain leaves nothing to train");
      const fs::path init = o.init ? *o.init : out / run_files::kPretrain;
      if (!fs::exists(init)) {
        throw CommandError(kExitMissingInput, "pretrained checkpoint not found: " + init.string() +
                                                  " (pass --pretrain to train one)");
      }
      state = start_ssl(load_model(init, cfg.ssl.detector), cfg.ssl);
      fs::create_directories(out);
      if (!fs::exists(out / run_files::kPretrain) || !fs::equivalent(init, out / run_files::kPretrain)) {
        save_checkpoint(out / run_files::kPretrain, state.student);
      }
    }
    write_file_atomic(snapshot, ini);
  }

  const std::vector<Scene> labeled = data.labeled();
  const std::vector<Scene> unlabeled = data.unlabeled();
  CsvAppender metrics(out / run_files::kMetrics, schemas::kMetrics,
                      {"phase", "epoch", "steps", "lr", "loss", "loss_labeled"});
  std::optional<CsvAppender> unl_csv;
  std::optional<CsvAppender> pl_csv;
  if (ssl_enabled) {
    unl_csv.emplace(out / run_files::kUnlabeled, schemas::kUnlabeled,
                    CsvRow{"epoch", "steps", "loss_unlabeled", "weighted_loss_unlabeled"});
    pl_csv.emplace(out / run_files::kPlQuality, schemas::kPlQuality, CsvRow{"epoch", "map50", "recall50"});
  }

  struct Stop {};
  int run_epochs = 0;
  const auto hook = [&](const TrainState& s, const EpochRecord& r) {
    const bool ssl_phase = r.phase == Phase::kSsl;
    const int total = ssl_phase ? cfg.ssl.ssl_epochs : cfg.ssl.pretrain_epochs;
    metrics.write({phase_name(r.phase), std::to_string(r.epoch), std::to_string(r.steps), format_double(r.lr),
                   format_double(r.loss), format_double(r.loss_labeled)});
    if (ssl_phase) {
      unl_csv->write({std::to_string(r.epoch), std::to_string(r.steps), format_double(r.loss_unlabeled),
                      format_double(cfg.ssl.lambda_u * r.loss_unlabeled)});
      if ((cfg.pl_quality_every > 0 && r.epoch % cfg.pl_quality_every == 0) || r.epoch == total) {
        const auto q = evaluate_pseudo_labels(s.teacher, unlabeled, cfg.ssl, cfg.eval_seed, 0.5);
        pl_csv->write({std::to_string(r.epoch), format_double(q.map), format_double(q.recall)});
      }
    }
    ++run_epochs;
    const bool last = r.epoch == total && (ssl_phase || !ssl_enabled);
    const bool stop = o.max_epochs > 0 && run_epochs >= o.max_epochs && !last;
    if (r.epoch % cfg.checkpoint_every == 0 || r.epoch == total || stop) {
      save_train_state(out / run_files::kState, s, ssl_enabled);
      log_to(o.log, std::string(phase_name(r.phase)) + " epoch " + std::to_string(r.epoch) + "/" +
                        std::to_string(total) + " loss " + format_double(r.loss));
    }
    if (stop) throw Stop{};
  };

  try {
    if (state.phase == Phase::kPretrain) {
      run_pretrain(state, labeled, cfg.ssl, cfg.seed, hook);
      save_checkpoint(out / run_files::kPretrain, state.student);
      if (ssl_enabled) {
        state = start_ssl(state.student, cfg.ssl);
        save_train_state(out / run_files::kState, state, ssl_enabled);
      }
    }
    if (ssl_enabled) run_ssl(state, labeled, unlabeled, cfg.ssl, cfg.seed, hook);
  } catch (const Stop&) {
    log_to(o.log, "stopped after " + std::to_string(run_epochs) + " epochs; continue with --resume");
    return {false, run_epochs, {}};
  } catch (const NonFiniteError& e) {
    throw CommandError(kExitNonFinite, std::string(phase_name(state.phase)) + ": " + e.what());
  }

  save_checkpoint(out / run_files::kStudent, state.student);
  save_checkpoint(out / run_files::kTeacher, ssl_enabled ? state.teacher : state.student);
  TrainOutcome result;
  result.finished = true;
  result.epochs_run = run_epochs;
  result.eval = evaluate(state.student, data.val, cfg.ssl, cfg.eval_seed);
  write_eval_csv(out / run_files::kEval, result.eval);
  log_to(o.log, "finished: val mAP@0.25 " + format_double(result.eval.map25.map) + ", mAP@0.5 " +
                    format_double(result.eval.map50.map));
  return result;
}

// ---------------------------------------------------------------------- eval

ParamStore load_model(const fs::path& checkpoint, const DetectorConfig& config) {
  if (!fs::exists(checkpoint)) throw CommandError(kExitMissingInput, "checkpoint not found: " + checkpoint.string());
  ParamStore p;
  try {
    p = deserialize_params(read_file(checkpoint));
  } catch (const std::exception& e) {
    throw CommandError(kExitMissingInput, "cannot load checkpoint " + checkpoint.string() + ": " + e.what());
  }
  const std::string diff = manifest_difference(p, init_detector_params(config, 0));
  if (!diff.empty()) {
    throw CommandError(kExitMissingInput, "manifest mismatch: checkpoint " + checkpoint.string() +
                                              " does not fit the model config: " + diff);
  }
  return p;
}

std::vector<Scene> select_split(const Dataset& data, const std::string& split) {
  if (split == "val") return data.val;
  if (split == "train") return data.train;
  if (split == "labeled") return data.labeled();
  if (split == "unlabeled") return data.unlabeled();
  throw CommandError(kExitConfig, "unknown split '" + split + "' (expected val, train, labeled or unlabeled)");
}

void write_eval_csv(const fs::path& path, const EvalResult& result) {
  std::ostringstream os;
  os << "# schema: " << schemas::kApTable << '\n';
  write_ap_table_csv(os, result.map25, result.map50);
  write_file_atomic(path, os.str());
}

EvalResult read_eval_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  EvalResult r;
  const auto c25 = t.column("ap_25");
  const auto c50 = t.column("ap_50");
  for (const auto& row : t.rows) {
    const double a = std::stod(row[c25]);
    const double b = std::stod(row[c50]);
    if (row[0] == "mean") {
      r.map25.map = a;
      r.map50.map = b;
    } else {
      const int c = std::stoi(row[0]);
      r.map25.per_class[c] = a;
      r.map50.per_class[c] = b;
    }
  }
  return r;
}

// -------------------------------------------------------------------- ablate

std::vector<std::string> ablation_axes() {
  return {"size_diffusion", "label_diffusion", "diffusion",   "ddim_on",
          "renewal_on",     "ddim_steps",      "scale_factor", "sampling_strategy"};
}

void apply_axis(RunConfig& config, const std::string& axis, const std::string& value) {
  if (axis == "size_diffusion") {
    set_config_value(config, "diffusion.size_diffusion", value);
  } else if (axis == "label_diffusion") {
    set_config_value(config, "diffusion.label_diffusion", value);
  } else if (axis == "diffusion") {
    set_config_value(config, "diffusion.size_diffusion", value);
    set_config_value(config, "diffusion.label_diffusion", value);
  } else if (axis == "ddim_on") {
    set_config_value(config, "sampler.ddim_on", value);
  } else if (axis == "renewal_on") {
    set_config_value(config, "sampler.renewal_on", value);
  } else if (axis == "ddim_steps") {
    set_config_value(config, "sampler.ddim_steps", value);
  } else if (axis == "scale_factor") {
    set_config_value(config, "diffusion.size_scale", value);
    set_config_value(config, "diffusion.label_scale", value);
  } else if (axis == "sampling_strategy") {
    set_config_value(config, "model.sampling_strategy", value);
  } else {
    std::string known;
    for (const auto& a : ablation_axes()) known += (known.empty() ? "" : ", ") + a;
    throw CommandError(kExitConfig, "unknown ablation axis '" + axis + "' (expected one of " + known + ")");
  }
}

std::vector<GridAxis> parse_grid(const std::string& spec) {
  std::vector<GridAxis> grid;
  std::istringstream is(spec);
  std::string part;
  while (std::getline(is, part, ';')) {
    const auto b = part.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw CommandError(kExitConfig, "grid axis '" + part + "' needs '=' and values");
    GridAxis a;
    a.name = part.substr(b, eq - b);
    a.name.erase(a.name.find_last_not_of(" \t") + 1);
    std::istringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      const auto vb = v.find_first_not_of(" \t");
      if (vb == std::string::npos) continue;
      v = v.substr(vb);
      v.erase(v.find_last_not_of(" \t") + 1);
      a.values.push_back(v);
    }
    if (a.values.empty()) throw CommandError(kExitConfig, "grid axis '" + a.name + "' has no values");
    for (const auto& g : grid) {
      if (g.name == a.name) throw CommandError(kExitConfig, "grid axis '" + a.name + "' given twice");
    }
    for (const auto& val : a.values) {
      RunConfig probe;
      try {
        apply_axis(probe, a.name, val);
        probe.validate();
      } catch (const ConfigError& e) {
        throw CommandError(kExitConfig, "grid axis '" + a.name + "': " + e.what());
      }
    }
    grid.push_back(std::move(a));
  }
  if (grid.empty()) throw CommandError(kExitConfig, "empty grid");
  return grid;
}

std::vector<std::vector<std::string>> grid_cells(const std::vector<GridAxis>& grid) {
  std::size_t n = 1;
  for (const auto& a : grid) n *= a.values.size();
  std::vector<std::vector<std::string>> cells;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> cell;
    std::size_t rem = i;
    for (const auto& a : grid) {
      cell.push_back(a.values[rem % a.values.size()]);
      rem /= a.values.size();
    }
    cells.push_back(std::move(cell));
  }
  return cells;
}

fs::path pretrain_dir_for(const RunConfig& config, const std::string& data_fp, const fs::path& cache) {
  return cache / ("pretrain-" + fingerprint(to_ini(pretrain_key_config(config)) + data_fp));
}

fs::path run_dir_for(const RunConfig& config, const std::string& data_fp, const fs::path& cache) {
  RunConfig c = config;
  c.checkpoint_every = RunConfig{}.checkpoint_every;
  return cache / ("run-" + fingerprint(to_ini(c) + data_fp));
}

void ensure_pretrain(const RunConfig& config, const Dataset& data, const std::string& data_fp,
                     const fs::path& cache, const Logger& log) {
  const fs::path dir = pretrain_dir_for(config, data_fp, cache);
  if (fs::exists(dir / run_files::kEval)) return;
  TrainOptions t;
  t.config = config;
  t.out = dir;
  t.pretrain = true;
  t.ssl = false;
  t.resume = fs::exists(dir / run_files::kState);
  if (!t.resume && fs::exists(dir)) fs::remove_all(dir);
  t.log = [&](const std::string& line) { log_to(log, dir.filename().string() + ": " + line); };
  train(t, data);
}

RunRecord cached_run(const RunConfig& config, const Dataset& data, const std::string& data_fp,
                     const fs::path& cache, const Logger& log) {
  ensure_pretrain(config, data, data_fp, cache, log);
  RunRecord r;
  r.seed = config.seed;
  r.pretrain_dir = pretrain_dir_for(config, data_fp, cache);
  r.run_dir = run_dir_for(config, data_fp, cache);
  r.run_key = r.run_dir.filename().string();
  if (!fs::exists(r.run_dir / run_files::kEval)) {
    TrainOptions t;
    t.config = config;
    t.out = r.run_dir;
    t.init = r.pretrain_dir / run_files::kStudent;
    t.resume = fs::exists(r.run_dir / run_files::kState);
    if (!t.resume && fs::exists(r.run_dir)) fs::remove_all(r.run_dir);
    t.log = [&](const std::string& line) { log_to(log, r.run_key + ": " + line); };
    train(t, data);
  }
  r.eval = read_eval_csv(r.run_dir / run_files::kEval);
  r.pretrain_eval = read_eval_csv(r.pretrain_dir / run_files::kEval);
  r.pl = last_pl_quality(r.run_dir / run_files::kPlQuality);
  return r;
}

std::vector<CellResult> ablate(const AblateOptions& o, const LoadedDataset& data) {
  if (o.seeds.empty()) throw CommandError(kExitConfig, "ablate needs at least one seed");
  const auto cells = grid_cells(o.grid);
  std::vector<RunConfig> configs;
  for (const auto& cell : cells) {
    for (const auto seed : o.seeds) {
      RunConfig c = o.base;
      for (std::size_t a = 0; a < o.grid.size(); ++a) apply_axis(c, o.grid[a].name, cell[a]);
      c.seed = seed;
      try {
        c.validate();
      } catch (const ConfigError& e) {
        throw CommandError(kExitConfig, std::string("grid cell is invalid: ") + e.what());
      }
      configs.push_back(c);
    }
  }

  std::mutex log_mu;
  const Logger log = [&](const std::string& line) {
    std::lock_guard<std::mutex> lock(log_mu);
    log_to(o.log, line);
  };
  std::vector<std::size_t> pretrain_jobs;
  std::set<fs::path> seen;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (seen.insert(pretrain_dir_for(configs[i], data.fingerprint, o.cache)).second) pretrain_jobs.push_back(i);
  }
  parallel_for(pretrain_jobs.size(), o.jobs, [&](std::size_t j) {
    ensure_pretrain(configs[pretrain_jobs[j]], data.data, data.fingerprint, o.cache, log);
  });
  std::vector<RunRecord> records(configs.size());
  parallel_for(configs.size(), o.jobs, [&](std::size_t i) {
    records[i] = cached_run(configs[i], data.data, data.fingerprint, o.cache, log);
  });

  std::vector<CellResult> results;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    CellResult cr;
    cr.values = cells[c];
    std::vector<double> m25, m50;
    for (std::size_t s = 0; s < o.seeds.size(); ++s) {
      const RunRecord& r = records[c * o.seeds.size() + s];
      cr.runs.push_back(r);
      m25.push_back(r.eval.map25.map);
      m50.push_back(r.eval.map50.map);
    }
    cr.map25_mean = mean_of(m25);
    cr.map25_std = std_of(m25);
    cr.map50_mean = mean_of(m50);
    cr.map50_std = std_of(m50);
    results.push_back(std::move(cr));
  }

  fs::create_directories(o.out);
  CsvTable table;
  table.schema = schemas::kAblation;
  table.header = {"id"};
  for (const auto& a : o.grid) table.header.push_back(a.name);
  for (const char* h : {"n_seeds", "map25_mean", "map25_std", "map50_mean", "map50_std"}) table.header.push_back(h);
  CsvTable runs;
  runs.schema = schemas::kAblationRuns;
  runs.header = {"id"};
  for (const auto& a : o.grid) runs.header.push_back(a.name);
  for (const char* h : {"seed", "map25", "map50", "pretrain_map25", "pretrain_map50", "pl_map50", "pl_recall50",
                        "run_key"}) {
    runs.header.push_back(h);
  }
  for (std::size_t c = 0; c < results.size(); ++c) {
    const auto& cr = results[c];
    CsvRow row = {std::to_string(c + 1)};
    row.insert(row.end(), cr.values.begin(), cr.values.end());
    for (double v : {cr.map25_mean, cr.map25_std, cr.map50_mean, cr.map50_std}) row.push_back(format_double(v));
    row.insert(row.begin() + static_cast<std::ptrdiff_t>(1 + cr.values.size()), std::to_string(cr.runs.size()));
    table.rows.push_back(row);
    for (const auto& r : cr.runs) {
      CsvRow rr = {std::to_string(c + 1)};
      rr.insert(rr.end(), cr.values.begin(), cr.values.end());
      rr.push_back(std::to_string(r.seed));
      for (double v : {r.eval.map25.map, r.eval.map50.map, r.pretrain_eval.map25.map, r.pretrain_eval.map50.map,
                       r.pl.map, r.pl.recall}) {
        rr.push_back(format_double(v));
      }
      rr.push_back(r.run_key);
      runs.rows.push_back(rr);
    }
  }
  write_csv_table(o.out / "ablation.csv", table);
  write_csv_table(o.out / "ablation_runs.csv", runs);
  write_file_atomic(o.out / "base_config.ini", to_ini(o.base));
  return results;
}

}  // namespace diffdet3d
