#include "diffdet3d/csv.hpp"

#include <doctest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace fs = std::filesystem;

namespace {

const char* const kSmoke =
    " --set data.n_train=5 data.n_val=5 data.labeled_ratio=0.4 ssl.pretrain_epochs=2 ssl.ssl_epochs=2";

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Sandbox {
 public:
  explicit Sandbox(const std::string& name) : dir_(fs::temp_directory_path() / ("diffdet3d_cli_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Sandbox() { fs::remove_all(dir_); }

  fs::path path(const std::string& rel) const { return dir_ / rel; }

  Run run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && DIFFDET3D_OUT='" + (dir_ / "out").string() + "' '" +
                            DIFFDET3D_CLI + "' " + args + " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout.txt");
    r.err = slurp(dir_ / "stderr.txt");
    return r;
  }

 private:
  fs::path dir_;
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("gen-data is byte-reproducible") {
    Sandbox box("gen");
    REQUIRE(box.run(std::string("gen-data --out a.jsonl --seed 4") + kSmoke).code == 0);
    REQUIRE(box.run(std::string("gen-data --out b.jsonl --seed 4") + kSmoke).code == 0);
    CHECK(slurp(box.path("a.jsonl")) == slurp(box.path("b.jsonl")));
    const std::string ma = slurp(box.path("a.jsonl.manifest.json"));
    const std::string mb = slurp(box.path("b.jsonl.manifest.json"));
    CHECK(ma.find("\"labeled\"") != std::string::npos);
    CHECK(ma.substr(ma.find("\"dataset_fingerprint\"")) == mb.substr(mb.find("\"dataset_fingerprint\"")));
    REQUIRE(box.run(std::string("gen-data --out c.jsonl --seed 5") + kSmoke).code == 0);
    CHECK(slurp(box.path("a.jsonl")) != slurp(box.path("c.jsonl")));
  }

  TEST_CASE("a zero labeled ratio is a usage error") {
    Sandbox box("ratio");
    const Run r = box.run("gen-data --out d.jsonl --set data.labeled_ratio=0");
    CHECK(r.code == 2);
    CHECK(r.err.find("labeled_ratio") != std::string::npos);
    CHECK_FALSE(fs::exists(box.path("d.jsonl")));
  }

  TEST_CASE("usage and config errors exit with 2") {
    Sandbox box("usage");
    CHECK(box.run("").code == 2);
    CHECK(box.run("train --bogus").code == 2);
    CHECK(box.run("train --data x --ssl maybe").code == 2);
    {
      std::ofstream(box.path("bad.ini")) << "[run]\nversion = 1\n[ssl]\nlambda = 2\n";
    }
    const Run r = box.run("init-config --config bad.ini");
    CHECK(r.code == 2);
    CHECK(r.err.find("ssl.lambda") != std::string::npos);
    CHECK(box.run("init-config --set model.bogus=1").code == 2);
  }

  TEST_CASE("init-config emits a loadable file") {
    Sandbox box("init");
    REQUIRE(box.run("init-config --out c.ini --set ssl.ssl_epochs=3").code == 0);
    const Run r = box.run("init-config --config c.ini");
    CHECK(r.code == 0);
    CHECK(r.out == slurp(box.path("c.ini")));
    CHECK(r.out.find("ssl_epochs = 3") != std::string::npos);
  }

  TEST_CASE("a smoke training run finishes quickly and logs everything") {
    Sandbox box("smoke");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    const auto t0 = std::chrono::steady_clock::now();
    const Run r = box.run(std::string("train --data d.jsonl --out run --pretrain") + kSmoke);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(r.code == 0);
    CHECK(secs < 60.0);
    for (const char* f : {"config.ini", "metrics.csv", "unlabeled.csv", "pl_quality.csv", "eval.csv",
                          "pretrain.ckpt", "student.ckpt", "teacher.ckpt", "state.ckpt"}) {
      CAPTURE(f);
      CHECK(fs::exists(box.path("run") / f));
    }
    const auto metrics = diffdet3d::read_csv(box.path("run/metrics.csv"));
    CHECK(metrics.schema == "diffdet3d.metrics/1");
    CHECK(metrics.rows.size() == 4);
    CHECK(diffdet3d::read_csv(box.path("run/unlabeled.csv")).rows.size() == 2);
  }

  TEST_CASE("the default output root comes from the environment") {
    Sandbox box("envroot");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    REQUIRE(box.run(std::string("train --data d.jsonl --pretrain --ssl off") + kSmoke).code == 0);
    CHECK(fs::exists(box.path("out/train/eval.csv")));
    CHECK_FALSE(fs::exists(box.path("out/train/unlabeled.csv")));
  }

  TEST_CASE("an interrupted run resumes where it stopped") {
    Sandbox box("resume");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    REQUIRE(box.run(std::string("train --data d.jsonl --out full --pretrain") + kSmoke).code == 0);
    CHECK(box.run(std::string("train --data d.jsonl --out part --pretrain --max-epochs 3") + kSmoke).code == 0);
    CHECK_FALSE(fs::exists(box.path("part/eval.csv")));
    CHECK(box.run(std::string("train --data d.jsonl --out part --pretrain") + kSmoke).code == 2);
    CHECK(box.run(std::string("train --data d.jsonl --out part --resume --set ssl.lambda_u=1") + kSmoke).code == 2);
    CHECK(box.run(std::string("train --data d.jsonl --out part --resume") + kSmoke).code == 0);
    for (const char* f : {"metrics.csv", "unlabeled.csv", "pl_quality.csv", "eval.csv", "student.ckpt"}) {
      CAPTURE(f);
      CHECK(slurp(box.path("full") / f) == slurp(box.path("part") / f));
    }
  }

  TEST_CASE("missing inputs exit with 3") {
    Sandbox box("missing");
    CHECK(box.run("train --data none.jsonl --out r").code == 3);
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    const Run r = box.run(std::string("train --data d.jsonl --out r") + kSmoke);
    CHECK(r.code == 3);
    CHECK(r.err.find("pretrain.ckpt") != std::string::npos);
    CHECK(box.run(std::string("train --data d.jsonl --out r --resume") + kSmoke).code == 3);
    CHECK(box.run(std::string("eval --data d.jsonl --checkpoint none.ckpt") + kSmoke).code == 3);
    CHECK(box.run("init-config --config none.ini").code == 3);
  }

  TEST_CASE("evaluation is deterministic and rejects mismatched checkpoints") {
    Sandbox box("eval");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    REQUIRE(box.run(std::string("train --data d.jsonl --out run --pretrain --ssl off") + kSmoke).code == 0);
    const Run a = box.run(std::string("eval --data d.jsonl --checkpoint run/student.ckpt --out a.csv") + kSmoke);
    const Run b = box.run(std::string("eval --data d.jsonl --checkpoint run/student.ckpt --out b.csv") + kSmoke);
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(a.out.find("class_id,ap_25,ap_50") == 0);
    CHECK(slurp(box.path("a.csv")) == slurp(box.path("b.csv")));
    CHECK(slurp(box.path("a.csv")) == slurp(box.path("run/eval.csv")));
    const Run z = box.run(std::string("eval --data d.jsonl --checkpoint run/student.ckpt --ddim-steps 0") + kSmoke);
    CHECK(z.code == 0);
    CHECK(z.out.find("mean,") != std::string::npos);
    const Run m = box.run(std::string("eval --data d.jsonl --checkpoint run/student.ckpt") + kSmoke +
                          " model.feature_width=8");
    CHECK(m.code == 3);
    CHECK(m.err.find("mismatch") != std::string::npos);
    REQUIRE(box.run(std::string("gen-data --out e.jsonl --seed 8") + kSmoke).code == 0);
    fs::copy_file(box.path("e.jsonl.manifest.json"), box.path("d.jsonl.manifest.json"),
                  fs::copy_options::overwrite_existing);
    CHECK(box.run(std::string("eval --data d.jsonl --checkpoint run/student.ckpt") + kSmoke).code == 3);
  }

  TEST_CASE("a non-finite loss exits with 4 and says where") {
    Sandbox box("nonfinite");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    const Run r = box.run(std::string("train --data d.jsonl --out r --pretrain") + kSmoke + " optim.lr=1e300");
    CHECK(r.code == 4);
    CHECK(r.err.find("epoch") != std::string::npos);
    CHECK(r.err.find("pretrain") != std::string::npos);
  }

  TEST_CASE("ablation grids produce one row per cell") {
    Sandbox box("ablate");
    REQUIRE(box.run(std::string("gen-data --out d.jsonl") + kSmoke).code == 0);
    const struct {
      const char* grid;
      std::size_t rows;
    } cases[] = {{"ddim_on=false,true;renewal_on=false,true", 4},
                 {"scale_factor=1,2,4", 3},
                 {"sampling_strategy=fps,random;diffusion=false,true", 4}};
    for (const auto& c : cases) {
      CAPTURE(c.grid);
      const Run r = box.run(std::string("ablate --data d.jsonl --seeds 1,2 --jobs 2 --out abl --grid '") + c.grid +
                            "'" + kSmoke);
      REQUIRE(r.code == 0);
      const auto table = diffdet3d::read_csv(box.path("abl/ablation.csv"));
      CHECK(table.schema == "diffdet3d.ablation/1");
      CHECK(table.rows.size() == c.rows);
      CHECK(diffdet3d::read_csv(box.path("abl/ablation_runs.csv")).rows.size() == 2 * c.rows);
      CHECK(table.rows[0][table.column("n_seeds")] == "2");
    }
    const Run again = box.run(std::string("ablate --data d.jsonl --seeds 1,2 --out abl2 --grid "
                                          "'sampling_strategy=fps,random;diffusion=false,true'") + kSmoke);
    CHECK(slurp(box.path("abl/ablation.csv")) == slurp(box.path("abl2/ablation.csv")));
    const Run bad = box.run(std::string("ablate --data d.jsonl --grid 'warp=1,2'") + kSmoke);
    CHECK(bad.code == 2);
    CHECK(bad.err.find("warp") != std::string::npos);
  }
}
