#include "diffdet3d/commands.hpp"
#include "diffdet3d/csv.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace diffdet3d;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.path, "INI config file (defaults when omitted)");
  cmd->add_option("--set", a.overrides, "Override one key, e.g. --set ssl.ssl_epochs=5")->take_all();
}

RunConfig load_config(const ConfigArgs& a) {
  RunConfig c;
  if (!a.path.empty()) {
    if (!fs::exists(a.path)) throw CommandError(kExitMissingInput, "config not found: " + a.path);
    c = load_run_config(a.path);
  }
  for (const auto& o : a.overrides) apply_override(c, o);
  c.validate();
  return c;
}

void log_line(const std::string& line) { std::cerr << line << std::endl; }

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::istringstream is(text);
  std::string s;
  while (std::getline(is, s, ',')) {
    if (s.empty()) continue;
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw CommandError(kExitConfig, "bad seed '" + s + "' in --seeds");
    }
  }
  if (seeds.empty()) throw CommandError(kExitConfig, "--seeds is empty");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-based semi-supervised 3D object detection on synthetic scenes"};
  app.require_subcommand(1);

  ConfigArgs init_cfg;
  std::string init_out;
  auto* init_cmd = app.add_subcommand("init-config", "Write a complete config file");
  add_config_args(init_cmd, init_cfg);
  init_cmd->add_option("--out", init_out, "Output path (stdout when omitted)");

  ConfigArgs gen_cfg;
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset and its split manifest");
  add_config_args(gen_cmd, gen_cfg);
  gen_cmd->add_option("--out", gen_out, "Dataset path")->required();
  gen_cmd->add_option("--seed", gen_seed, "Dataset seed (overrides run.seed)");

  ConfigArgs train_cfg;
  std::string train_data, train_out, train_init, train_ssl = "on";
  bool train_pretrain = false, train_resume = false;
  int train_max_epochs = 0;
  auto* train_cmd = app.add_subcommand("train", "Pretrain and/or run semi-supervised training");
  add_config_args(train_cmd, train_cfg);
  train_cmd->add_option("--data", train_data, "Dataset path")->required();
  train_cmd->add_option("--out", train_out, "Run directory (default $DIFFDET3D_OUT/train)");
  train_cmd->add_flag("--pretrain", train_pretrain, "Train the supervised phase from scratch first");
  train_cmd->add_option("--init", train_init, "Pretrained checkpoint (default <out>/pretrain.ckpt)");
  train_cmd->add_option("--ssl", train_ssl, "Semi-supervised phase")->check(CLI::IsMember({"on", "off"}));
  train_cmd->add_flag("--resume", train_resume, "Continue from <out>/state.ckpt");
  train_cmd->add_option("--max-epochs", train_max_epochs, "Stop after this many epochs")->check(CLI::NonNegativeNumber);

  ConfigArgs eval_cfg;
  std::string eval_ckpt, eval_data, eval_out, eval_split = "val";
  std::optional<int> eval_steps;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_config_args(eval_cmd, eval_cfg);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset path")->required();
  eval_cmd->add_option("--out", eval_out, "Write the AP table here as well as to stdout");
  eval_cmd->add_option("--split", eval_split, "val, train, labeled or unlabeled");
  eval_cmd->add_option("--ddim-steps", eval_steps, "Sampler steps (0 = one decode)")->check(CLI::NonNegativeNumber);

  ConfigArgs abl_cfg;
  std::string abl_data, abl_grid, abl_seeds = "1", abl_out, abl_cache;
  int abl_jobs = 1;
  auto* abl_cmd = app.add_subcommand("ablate", "Run a grid of configurations over several seeds");
  add_config_args(abl_cmd, abl_cfg);
  abl_cmd->add_option("--data", abl_data, "Dataset path")->required();
  abl_cmd->add_option("--grid", abl_grid, "axis=v1,v2;axis=v1,v2")->required();
  abl_cmd->add_option("--seeds", abl_seeds, "Comma-separated training seeds");
  abl_cmd->add_option("--out", abl_out, "Output directory (default $DIFFDET3D_OUT/ablate)");
  abl_cmd->add_option("--cache", abl_cache, "Run cache (default $DIFFDET3D_OUT/cache)");
  abl_cmd->add_option("--jobs", abl_jobs, "Parallel runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (init_cmd->parsed()) {
      const std::string ini = to_ini(load_config(init_cfg));
      if (init_out.empty()) {
        std::cout << ini;
      } else {
        std::ofstream(init_out) << ini;
      }
    } else if (gen_cmd->parsed()) {
      RunConfig c = load_config(gen_cfg);
      if (gen_seed) c.seed = *gen_seed;
      const Dataset ds = gen_data(c, gen_out);
      log_line("wrote " + gen_out + ": " + std::to_string(ds.train.size()) + " train (" +
               std::to_string(ds.split.labeled.size()) + " labeled), " + std::to_string(ds.val.size()) + " val");
    } else if (train_cmd->parsed()) {
      TrainOptions o;
      o.config = load_config(train_cfg);
      const LoadedDataset data = load_dataset_checked(train_data, o.config);
      o.out = train_out.empty() ? default_out_root() / "train" : fs::path(train_out);
      o.pretrain = train_pretrain;
      if (!train_init.empty()) o.init = train_init;
      o.ssl = train_ssl == "on";
      o.resume = train_resume;
      o.max_epochs = train_max_epochs;
      o.log = log_line;
      const TrainOutcome r = train(o, data.data);
      if (r.finished) {
        std::cout << "map25," << format_double(r.eval.map25.map) << "\nmap50," << format_double(r.eval.map50.map)
                  << '\n';
      }
    } else if (eval_cmd->parsed()) {
      RunConfig c = load_config(eval_cfg);
      if (eval_steps) {
        c.ssl.ddim_steps = *eval_steps;
        c.validate();
      }
      const LoadedDataset data = load_dataset_checked(eval_data, c);
      const ParamStore params = load_model(eval_ckpt, c.ssl.detector);
      const EvalResult r = evaluate(params, select_split(data.data, eval_split), c.ssl, c.eval_seed);
      write_ap_table_csv(std::cout, r.map25, r.map50);
      if (!eval_out.empty()) write_eval_csv(eval_out, r);
    } else if (abl_cmd->parsed()) {
      AblateOptions o;
      o.base = load_config(abl_cfg);
      o.grid = parse_grid(abl_grid);
      o.seeds = parse_seeds(abl_seeds);
      o.out = abl_out.empty() ? default_out_root() / "ablate" : fs::path(abl_out);
      o.cache = abl_cache.empty() ? default_out_root() / "cache" : fs::path(abl_cache);
      o.jobs = abl_jobs;
      o.log = log_line;
      const LoadedDataset data = load_dataset_checked(abl_data, o.base);
      const auto cells = ablate(o, data);
      for (std::size_t i = 0; i < cells.size(); ++i) {
        std::cout << i + 1;
        for (const auto& v : cells[i].values) std::cout << ',' << v;
        std::cout << ',' << format_double(cells[i].map25_mean) << ',' << format_double(cells[i].map50_mean) << '\n';
      }
    }
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.code();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitConfig;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitNonFinite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitFailure;
  }
  return kExitOk;
}
