#include "diffdet3d/commands.hpp"
#include "diffdet3d/csv.hpp"

#include "oracle_decoder.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

using namespace diffdet3d;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + what + (ok ? "" : " [violated]");
  }
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << v.detail << std::endl;
}

Box3 make_box(const Point3& c, const Point3& s, int cls = 0) {
  Box3 b;
  b.center = c;
  b.size = s;
  b.class_id = cls;
  return b;
}

std::vector<Box3> disjoint_gts(std::mt19937_64& rng, int n, int k) {
  std::uniform_real_distribution<double> u(0.15, 0.85), s(0.05, 0.3);
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::vector<Box3> gts;
  while (static_cast<int>(gts.size()) < n) {
    const Box3 b = make_box(Point3(u(rng), u(rng), u(rng)), Point3(s(rng), s(rng), s(rng)), cls(rng));
    if (std::all_of(gts.begin(), gts.end(), [&](const Box3& g) { return iou_aabb(g, b) == 0.0; })) gts.push_back(b);
  }
  return gts;
}

Predictions scored(const Eigen::VectorXd& obj, const Eigen::VectorXd& cls, const Eigen::VectorXd& iou, int k) {
  const Eigen::Index n = obj.size();
  Predictions p;
  p.center_offset = Eigen::MatrixXd::Zero(n, 3);
  p.size = Eigen::MatrixXd::Constant(n, 3, 0.2);
  p.class_probs.resize(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    p.class_probs.row(i).setConstant((1.0 - cls(i)) / (k - 1));
    p.class_probs(i, i % k) = cls(i);
  }
  p.class_logits = p.class_probs;
  p.objectness = obj;
  p.iou_est = iou;
  return p;
}

// ------------------------------------------------------------ criterion 1

void corruption_marginals() {
  const auto t0 = Clock::now();
  const int t = 500, max_t = 1000, draws = 100000;
  const long double pi = 3.14159265358979323846264338327950288L;
  auto f = [&](long double x) {
    const long double c = std::cos((x + 0.008L) / 1.008L * pi / 2.0L);
    return c * c;
  };
  const double ab = static_cast<double>(f(static_cast<long double>(t) / max_t) / f(0.0L));
  const NoiseSchedule schedule(max_t);
  Eigen::MatrixXd x0(3, 4);
  x0 << -4, -2, 0, 1, 2, 4, 0.5, -1, 3, -3, 1.5, -0.5;
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::ArrayXXd sum = Eigen::ArrayXXd::Zero(3, 4), sum2 = sum;
  Eigen::MatrixXd eps(3, 4);
  for (int d = 0; d < draws; ++d) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = z(rng);
    const Eigen::ArrayXXd x = corrupt(x0, t, eps, schedule).array();
    sum += x;
    sum2 += x * x;
  }
  const Eigen::ArrayXXd mean = sum / draws;
  const Eigen::ArrayXXd var = (sum2 - draws * mean * mean) / (draws - 1);
  const double se = std::sqrt((1.0 - ab) / draws);
  const double mean_z = ((mean - std::sqrt(ab) * x0.array()).abs() / se).maxCoeff();
  const double var_rel = ((var - (1.0 - ab)).abs() / (1.0 - ab)).maxCoeff();
  const double secs = seconds_since(t0);
  Verdict v;
  v.require(mean_z <= 3.0, "max |mean - sqrt(ab) x0| = " + fmt(mean_z, 3) + " SE (<= 3)");
  v.require(var_rel <= 0.02, "max variance error " + fmt(100 * var_rel, 3) + "% (<= 2%)");
  v.require(secs < 5.0, "alpha_bar(500) = " + fmt(ab, 6) + ", " + fmt(secs, 3) + " s (< 5 s)");
  report(1, "corruption marginals at t = 500 over 1e5 draws", v);
}

// ------------------------------------------------------------ criterion 2

void perfect_oracle_ddim() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  double min_recall = 1.0;
  int cases = 0;
  for (const int steps : {1, 2, 4}) {
    for (int trial = 0; trial < 20; ++trial) {
      SslConfig c;
      c.ddim_steps = steps;
      const NoiseSchedule schedule(c.max_t);
      const int k = c.detector.n_classes;
      std::mt19937_64 rng(1000 * steps + trial);
      const auto gts = disjoint_gts(rng, 1 + trial % 6, k);
      const PointCloud centers = oracle::centers_with(gts, c.detector.n_proposals, rng);
      const auto decoder = oracle::perfect_decoder(centers, gts, k);
      const auto run = run_sampler(decoder, static_cast<int>(c.detector.n_proposals), c, schedule, rng);
      const auto nearest = oracle::nearest_candidates(centers, gts);
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const Eigen::Index i = nearest[g];
        for (int d = 0; d < 3; ++d) {
          worst = std::max(worst, std::abs(unscale_signal(run.state.sizes(i, d), c.scaling.size_scale) - gts[g].size(d)));
        }
        for (int cl = 0; cl < k; ++cl) {
          const double want = cl == gts[g].class_id ? 1.0 : 0.0;
          worst = std::max(worst, std::abs(unscale_signal(run.state.labels(i, cl), c.scaling.label_scale) - want));
        }
      }
      const auto pls = generate_pseudo_labels(decoder, centers, c, schedule, rng);
      SceneDetections d(1);
      for (const auto& p : pls) d[0].push_back({p.box, p.score()});
      min_recall = std::min(min_recall, recall_at(d, {gts}, 0.5));
      ++cases;
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.require(worst <= 1e-9, "max size/label error " + fmt(worst, 3) + " (<= 1e-9) over " + std::to_string(cases) +
                               " scenes, ddim_steps in {1,2,4}");
  v.require(min_recall == 1.0, "min pseudo-label recall@0.5 = " + fmt(min_recall));
  v.require(secs < 5.0, fmt(secs, 3) + " s (< 5 s)");
  report(2, "perfect-oracle DDIM chain", v);
}

// ------------------------------------------------------------ criterion 3

void gradient_integrity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  long checked = 0;
  for (const std::uint64_t seed : {1u, 2u, 3u}) {
    SslConfig c;
    auto& d = c.detector;
    d.feature_width = 8;
    d.n_rep_points = 48;
    d.n_proposals = 16;
    d.knn = 8;
    d.context_knn = 8;
    d.encoder_hidden = 8;
    d.roi_hidden = 8;
    d.time_embed_width = 8;
    d.decoder_hidden = 8;
    const NoiseSchedule schedule(c.max_t);
    SceneConfig sc;
    sc.n_points = 384;
    const Scene scene = generate_scene(sc, 500 + seed);
    const TrainSample sample{scene, scene.gt_boxes};
    ParamStore p = init_detector_params(d, seed);
    std::mt19937_64 jitter(100 + seed);
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    for (auto& e : p.mutable_entries()) {
      for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] += u(jitter);
    }
    const int t = 100 + 300 * static_cast<int>(seed);
    ParamStore g = p.zeros_like();
    std::mt19937_64 rng0(seed);
    const Eigen::VectorXd frozen = scene_loss_and_grad(p, sample, t, c, schedule, rng0, 1.0, &g).iou_targets;
    auto loss = [&](const ParamStore& q) {
      std::mt19937_64 r(seed);
      return scene_loss_and_grad(q, sample, t, c, schedule, r, 1.0, nullptr, &frozen).value;
    };
    const double h = 1e-5;
    for (const auto& e : p.entries()) {
      for (Eigen::Index i = 0; i < e.value.size(); i += 2) {
        ParamStore a = p, b = p;
        a.mutable_at(e.name).data()[i] += h;
        b.mutable_at(e.name).data()[i] -= h;
        const double num = (loss(a) - loss(b)) / (2 * h);
        const double ana = g.at(e.name).data()[i];
        worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.require(worst < 1e-4, "max relative error " + fmt(worst, 3) + " (< 1e-4) over " + std::to_string(checked) +
                              " coordinates, 3 seeds");
  v.require(secs < 60.0, fmt(secs, 3) + " s (< 60 s)");
  report(3, "end-to-end gradient vs central differences", v);
}

// ------------------------------------------------------------ criterion 4

void geometry_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(44);
  std::uniform_real_distribution<double> u(0.0, 1.0), s(0.05, 0.6), shift(-0.3, 0.3);
  double iou_err = 0.0;
  int overlapping = 0;
  for (int i = 0; i < 100; ++i) {
    const Box3 a = make_box(Point3(u(rng), u(rng), u(rng)), Point3(s(rng), s(rng), s(rng)));
    const Point3 cb = i % 10 == 0 ? Point3(u(rng), u(rng), u(rng)) : Point3(a.center + Point3(shift(rng), shift(rng), shift(rng)));
    const Box3 b = make_box(cb, Point3(s(rng), s(rng), s(rng)));
    const double exact = iou_aabb(a, b);
    overlapping += exact > 0.0;
    iou_err = std::max(iou_err, std::abs(exact - oracle::monte_carlo_iou(a, b, 1000000, 900 + i)));
  }
  double ratio = 0.0;
  int instances = 0;
  for (int trial = 0; trial < 20; ++trial) {
    for (int n = 1; n <= 10; ++n) {
      PointCloud p(n, 3);
      for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
      for (int k = 1; k <= n; ++k) {
        const auto idx = farthest_point_sample(p, k);
        const double opt = oracle::optimal_cover_radius(p, k);
        const double got = oracle::cover_radius(p, std::vector<Eigen::Index>(idx.begin(), idx.end()));
        ratio = std::max(ratio, opt > 0.0 ? got / opt : (got > 0.0 ? INFINITY : 1.0));
        ++instances;
      }
    }
  }
  DetectorConfig dc;
  dc.n_rep_points = 128;
  dc.n_proposals = 32;
  const ScalingConfig scaling;
  SceneConfig sc;
  sc.n_points = 1024;
  double pool_err = 0.0;
  std::normal_distribution<double> z(0.0, 1.5);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto params = init_detector_params(dc, seed);
    const auto enc = encode(generate_scene(sc, 4000 + seed).cloud, params, dc);
    std::mt19937_64 r(seed);
    DiffusionState st;
    st.sizes.resize(dc.n_proposals, 3);
    st.labels.resize(dc.n_proposals, dc.n_classes);
    for (Eigen::Index i = 0; i < st.sizes.size(); ++i) st.sizes.data()[i] = z(r) - 1.0;
    for (Eigen::Index i = 0; i < st.labels.size(); ++i) st.labels.data()[i] = z(r);
    st.t = 500;
    const auto cands = make_candidates(enc, select_centers(enc, dc, r), st);
    const auto roi = extract_roi_features(enc, cands, params, dc, scaling);
    pool_err = std::max(pool_err, (roi.pooled - oracle::pooled(enc, cands, dc, scaling)).cwiseAbs().maxCoeff());
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.require(iou_err <= 2e-3, "max |IoU - MC(1e6)| = " + fmt(iou_err, 3) + " (<= 2e-3) on 100 pairs (" +
                                 std::to_string(overlapping) + " overlapping)");
  v.require(ratio <= 2.0, "max FPS/optimal covering radius " + fmt(ratio, 4) + " (<= 2) on " +
                              std::to_string(instances) + " instances");
  v.require(pool_err == 0.0, "max RoI pooling difference " + fmt(pool_err, 3) + " on 50 scenes");
  v.require(secs < 60.0, fmt(secs, 3) + " s (< 60 s)");
  report(4, "geometry oracles", v);
}

// ------------------------------------------------------------ criterion 9

void filter_semantics() {
  Verdict v;
  const SslConfig c;
  const int k = c.detector.n_classes;
  v.require(c.obj_thresh == 0.9 && c.cls_thresh == 0.9 && c.iou_thresh == 0.25,
            "defaults " + fmt(c.obj_thresh) + "/" + fmt(c.cls_thresh) + "/" + fmt(c.iou_thresh));
  const double below_o = std::nextafter(0.9, 0.0), below_i = std::nextafter(0.25, 0.0);
  Eigen::VectorXd o(4), q(4), i(4);
  o << 0.9, below_o, 0.9, 0.9;
  q << 0.9, 0.9, below_o, 0.9;
  i << 0.25, 0.25, 0.25, below_i;
  const auto kept = filter_pseudo_labels(scored(o, q, i, k), PointCloud::Zero(4, 3), c);
  v.require(kept.size() == 1 && kept[0].objectness == 0.9 && kept[0].iou_est == 0.25,
            "boundary rows: exactly-at-threshold kept, one ulp below dropped");
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int gate_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + trial % 16;
    Eigen::VectorXd ro(n), rq(n), ri(n);
    for (int r = 0; r < n; ++r) {
      ro(r) = std::round(u(rng) * 40) / 40;
      rq(r) = std::max(0.2, std::round(u(rng) * 40) / 40);
      ri(r) = std::round(u(rng) * 40) / 40;
    }
    const auto got = filter_pseudo_labels(scored(ro, rq, ri, k), PointCloud::Zero(n, 3), c);
    std::size_t want = 0;
    for (int r = 0; r < n; ++r) want += ro(r) >= 0.9 && rq(r) >= 0.9 && ri(r) >= 0.25;
    gate_mismatch += got.size() != want;
  }
  v.require(gate_mismatch == 0, "random gate cases mismatching: " + std::to_string(gate_mismatch) + "/1000");

  int count_bad = 0, kept_bad = 0, oracle_bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    SslConfig rc;
    rc.detector.n_classes = 2 + trial % 5;
    rc.renew_thresh = u(rng);
    rc.renew_use_iou = trial % 3 == 0;
    const int kk = rc.detector.n_classes;
    const int n = 1 + static_cast<int>(u(rng) * 128);
    std::mt19937_64 r0(rng());
    const auto state = init_noisy_state(n, kk, rc, r0);
    Eigen::VectorXd ro(n), rq(n), ri(n);
    for (int r = 0; r < n; ++r) {
      ro(r) = u(rng);
      rq(r) = 1.0 / kk + u(rng) * (1.0 - 1.0 / kk);
      ri(r) = u(rng);
    }
    const auto preds = scored(ro, rq, ri, kk);
    const std::uint64_t seed = rng();
    std::mt19937_64 r1(seed), r2(seed);
    const auto out = box_renewal(state, preds, rc, r1);
    const auto want = oracle::renew_rows(state, preds, rc, r2);
    count_bad += out.rows() != n;
    for (int r = 0; r < n; ++r) {
      double score = ro(r) * rq(r);
      if (rc.renew_use_iou) score *= ri(r);
      if (score >= rc.renew_thresh) {
        kept_bad += out.sizes.row(r) != state.sizes.row(r) || out.labels.row(r) != state.labels.row(r);
      }
    }
    oracle_bad += out.sizes != want.sizes || out.labels != want.labels;
  }
  v.require(count_bad == 0, "renewal row-count changes: " + std::to_string(count_bad) + "/1000");
  v.require(kept_bad == 0, "kept rows not bit-equal: " + std::to_string(kept_bad));
  v.require(oracle_bad == 0, "cases differing from the row-wise reimplementation: " + std::to_string(oracle_bad));
  report(9, "pseudo-label filter and box renewal semantics", v);
}

// ------------------------------------------------------------ criteria 5-7

class Timings {
 public:
  explicit Timings(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      std::ifstream in(path_);
      data_ = json::parse(in);
    }
  }

  std::optional<double> get(const std::string& key) const {
    if (!data_.contains(key)) return std::nullopt;
    return data_[key].get<double>();
  }

  void set(const std::string& key, double secs) {
    data_[key] = secs;
    std::ofstream(path_) << data_.dump(2) << '\n';
  }

 private:
  fs::path path_;
  json data_ = json::object();
};

struct Bench {
  fs::path work;
  fs::path cache;
  LoadedDataset data;
  RunConfig base;
  std::vector<std::uint64_t> seeds;
  Timings timings;
  Logger log;

  /// Pretrain + SSL through the cache; every cached directory must carry a
  /// measured compute time, otherwise it is recomputed.
  std::pair<RunRecord, double> run(const RunConfig& config) {
    const fs::path pdir = pretrain_dir_for(config, data.fingerprint, cache);
    const fs::path rdir = run_dir_for(config, data.fingerprint, cache);
    for (const fs::path& d : {pdir, rdir}) {
      if (fs::exists(d) && !timings.get(d.filename().string())) fs::remove_all(d);
    }
    if (!timings.get(pdir.filename().string())) {
      const auto t0 = Clock::now();
      ensure_pretrain(config, data.data, data.fingerprint, cache, log);
      timings.set(pdir.filename().string(), seconds_since(t0));
    }
    if (!timings.get(rdir.filename().string())) {
      const auto t0 = Clock::now();
      cached_run(config, data.data, data.fingerprint, cache, log);
      timings.set(rdir.filename().string(), seconds_since(t0));
    }
    const RunRecord r = cached_run(config, data.data, data.fingerprint, cache, log);
    return {r, *timings.get(pdir.filename().string()) + *timings.get(rdir.filename().string())};
  }

  /// Sum of measured compute over the distinct directories behind `configs`.
  double cost(const std::vector<RunConfig>& configs) {
    std::set<std::string> keys;
    for (const auto& c : configs) {
      keys.insert(pretrain_dir_for(c, data.fingerprint, cache).filename().string());
      keys.insert(run_dir_for(c, data.fingerprint, cache).filename().string());
    }
    double total = 0.0;
    for (const auto& k : keys) total += timings.get(k).value_or(NAN);
    return total;
  }

  RunConfig seeded(std::uint64_t seed) const {
    RunConfig c = base;
    c.seed = seed;
    return c;
  }
};

void ssl_benefit_and_pl_quality(Bench& bench) {
  std::vector<RunConfig> configs;
  double student = 0.0, baseline = 0.0;
  std::string per_seed;
  std::vector<RunRecord> records;
  for (const auto seed : bench.seeds) {
    configs.push_back(bench.seeded(seed));
    const auto [r, secs] = bench.run(configs.back());
    (void)secs;
    records.push_back(r);
    student += r.eval.map25.map;
    baseline += r.pretrain_eval.map25.map;
    per_seed += (per_seed.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + ": " +
                fmt(r.pretrain_eval.map25.map) + " -> " + fmt(r.eval.map25.map);
  }
  const double n = static_cast<double>(bench.seeds.size());
  student /= n;
  baseline /= n;
  const double cost = bench.cost(configs);
  Verdict v5;
  v5.require(student - baseline >= 0.05, "mean mAP@0.25 " + fmt(baseline) + " (pretrain) -> " + fmt(student) +
                                             " (SSL), gain " + fmt(100 * (student - baseline), 3) +
                                             " points (>= 5) [" + per_seed + "]");
  v5.require(cost < 1800.0, "compute " + fmt(cost, 4) + " s (< 1800 s)");
  report(5, "SSL benefit over the supervised pretrain", v5);

  const auto t0 = Clock::now();
  const std::vector<Scene> unlabeled = bench.data.data.unlabeled();
  double on_sum = 0.0, off_sum = 0.0;
  std::string detail;
  for (std::size_t s = 0; s < records.size(); ++s) {
    const RunConfig& c = configs[s];
    const ParamStore teacher = load_model(records[s].run_dir / run_files::kTeacher, c.ssl.detector);
    SslConfig on = c.ssl;
    on.ddim_on = true;
    on.renewal_on = true;
    SslConfig off = c.ssl;
    off.ddim_on = false;
    off.renewal_on = false;
    const double r_on = evaluate_pseudo_labels(teacher, unlabeled, on, c.eval_seed, 0.5).recall;
    const double r_off = evaluate_pseudo_labels(teacher, unlabeled, off, c.eval_seed, 0.5).recall;
    on_sum += r_on;
    off_sum += r_off;
    detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(c.seed) + ": " + fmt(r_off) +
              " -> " + fmt(r_on);
  }
  const double secs = seconds_since(t0);
  Verdict v6;
  v6.require((on_sum - off_sum) / n >= 0.02, "mean teacher recall@0.5 " + fmt(off_sum / n) + " (both off) -> " +
                                                 fmt(on_sum / n) + " (DDIM + renewal), gain " +
                                                 fmt(100 * (on_sum - off_sum) / n, 3) + " points (>= 2) [" + detail +
                                                 "]");
  v6.require(true, "extra evaluation " + fmt(secs, 3) + " s on the criterion-5 checkpoints");
  report(6, "pseudo-label recall with DDIM and renewal", v6);
}

void ablation_structure(Bench& bench) {
  struct Table {
    std::string a, b;
  };
  const Table tables[] = {{"size_diffusion", "label_diffusion"}, {"ddim_on", "renewal_on"}};
  std::vector<RunConfig> all;
  Verdict v;
  for (const auto& t : tables) {
    const auto grid = parse_grid(t.a + "=false,true;" + t.b + "=false,true");
    std::string detail;
    bool ordered = true;
    for (const auto& cell : grid_cells(grid)) {
      for (const auto seed : bench.seeds) {
        RunConfig c = bench.seeded(seed);
        apply_axis(c, t.a, cell[0]);
        apply_axis(c, t.b, cell[1]);
        bench.run(c);
        all.push_back(c);
      }
    }
    for (const auto seed : bench.seeds) {
      RunConfig on = bench.seeded(seed), off = bench.seeded(seed);
      apply_axis(off, t.a, "false");
      apply_axis(off, t.b, "false");
      apply_axis(on, t.a, "true");
      apply_axis(on, t.b, "true");
      const double m_on = bench.run(on).first.eval.map25.map;
      const double m_off = bench.run(off).first.eval.map25.map;
      ordered = ordered && m_on >= m_off;
      detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + ": off-off " +
                fmt(m_off) + ", on-on " + fmt(m_on);
    }
    v.require(ordered, t.a + " x " + t.b + " on-on >= off-off mAP@0.25 [" + detail + "]");

    AblateOptions o;
    o.base = bench.base;
    o.grid = grid;
    o.seeds = bench.seeds;
    o.out = bench.work / ("ablate_" + t.a + "_" + t.b);
    o.cache = bench.cache;
    o.log = bench.log;
    ablate(o, bench.data);
    const CsvTable csv = read_csv(o.out / "ablation.csv");
    const CsvRow header = {"id", t.a, t.b, "n_seeds", "map25_mean", "map25_std", "map50_mean", "map50_std"};
    const std::vector<std::pair<std::string, std::string>> rows = {
        {"false", "false"}, {"true", "false"}, {"false", "true"}, {"true", "true"}};
    bool shape = csv.schema == schemas::kAblation && csv.header == header && csv.rows.size() == rows.size();
    for (std::size_t r = 0; shape && r < rows.size(); ++r) {
      shape = csv.rows[r][0] == std::to_string(r + 1) && csv.rows[r][1] == rows[r].first &&
              csv.rows[r][2] == rows[r].second && csv.rows[r][3] == std::to_string(bench.seeds.size());
    }
    const CsvTable runs = read_csv(o.out / "ablation_runs.csv");
    shape = shape && runs.rows.size() == rows.size() * bench.seeds.size();
    v.require(shape, (o.out / "ablation.csv").filename().string() + " rows (1) off/off (2) " + t.a +
                         " (3) " + t.b + " (4) both, " + std::to_string(bench.seeds.size()) + " seeds each");
  }
  const double cost = bench.cost(all);
  v.require(cost < 7200.0, "grid compute " + fmt(cost, 4) + " s (< 7200 s)");
  report(7, "ablation structure of the two 2x2 grids", v);
}

// ------------------------------------------------------------ criterion 8

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + std::string(DIFFDET3D_CLI) + "' " + args +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg =
      " --set data.n_train=10 data.n_val=5 data.labeled_ratio=0.3 ssl.pretrain_epochs=3 ssl.ssl_epochs=3 "
      "eval.pl_quality_every=1";
  int bad_exit = 0;
  for (const char* rep : {"a", "b"}) {
    const fs::path r = dir / rep;
    fs::create_directories(r);
    bad_exit += run_cli(r, "gen-data --out data.jsonl --seed 5" + cfg) != 0;
    bad_exit += run_cli(r, "train --data data.jsonl --out train --pretrain" + cfg) != 0;
    bad_exit += run_cli(r, "train --data data.jsonl --out sup --pretrain --ssl off" + cfg) != 0;
    bad_exit += run_cli(r, "eval --data data.jsonl --checkpoint train/student.ckpt --out eval.csv" + cfg) != 0;
    bad_exit += run_cli(r, "ablate --data data.jsonl --grid 'ddim_on=false,true' --seeds 1,2 --out ablate "
                           "--cache cache" + cfg) != 0;
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
    if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), dir / "a"));
  }
  std::sort(files.begin(), files.end());
  int differing = 0;
  std::string which;
  for (const auto& f : files) {
    if (!fs::exists(dir / "b" / f) || slurp(dir / "a" / f) != slurp(dir / "b" / f)) {
      ++differing;
      which += " " + f.string();
    }
  }
  Verdict v;
  v.require(bad_exit == 0, std::to_string(bad_exit) + " commands exited non-zero");
  v.require(differing == 0, std::to_string(files.size()) + " files (datasets, manifests, CSVs, checkpoints) compared "
                            "across repeated gen-data, train, train --ssl off, eval and ablate; " + std::to_string(differing) + " differ" + which);
  v.require(true, fmt(seconds_since(t0), 3) + " s");
  report(8, "repeated commands are byte-identical", v);
  fs::remove_all(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string work = "acceptance_work";
  std::string only;
  std::string seeds_text = "1,2,3";
  bool verbose = false;
  app.add_option("--work", work, "Working directory; the run cache lives here");
  app.add_option("--only", only, "Comma-separated criterion ids");
  app.add_option("--seeds", seeds_text, "Training seeds for criteria 5-7");
  app.add_flag("--verbose", verbose, "Log training progress to stderr");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  {
    std::istringstream is(only);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      if (!tok.empty()) selected.insert(std::stoi(tok));
    }
  }
  const auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  try {
    if (want(1)) corruption_marginals();
    if (want(2)) perfect_oracle_ddim();
    if (want(3)) gradient_integrity();
    if (want(4)) geometry_oracles();
    if (want(9)) filter_semantics();
    if (want(8)) determinism(work);
    if (want(5) || want(6) || want(7)) {
      fs::create_directories(work);
      const fs::path data_path = fs::path(work) / "benchmark.jsonl";
      const RunConfig base;
      if (!fs::exists(data_path)) gen_data(base, data_path);
      Bench bench{work, fs::path(work) / "cache", load_dataset_checked(data_path, base), base, {},
                  Timings(fs::path(work) / "timings.json"), {}};
      std::istringstream is(seeds_text);
      std::string tok;
      while (std::getline(is, tok, ',')) bench.seeds.push_back(std::stoull(tok));
      if (verbose) bench.log = [](const std::string& line) { std::cerr << line << std::endl; };
      std::cout << "benchmark: " << base.n_train << " train scenes (" << bench.data.data.split.labeled.size()
                << " labeled), " << base.n_val << " val scenes, seeds " << seeds_text << std::endl;
      if (want(5) || want(6)) ssl_benefit_and_pl_quality(bench);
      if (want(7)) ablation_structure(bench);
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
