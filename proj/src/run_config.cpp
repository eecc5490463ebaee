#include "diffdet3d/run_config.hpp"

#include "diffdet3d/csv.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace diffdet3d {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  T v{};
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
    throw ConfigError(key, "cannot parse '" + text + "' as a number");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) throw ConfigError(key, "must be finite");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  std::string t = trim(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "on" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "off" || t == "0" || t == "no") return false;
  throw ConfigError(key, "expected true/false, got '" + text + "'");
}

template <typename T, typename Acc>
Field num(const std::string& key, Acc acc) {
  return {key, [acc](const RunConfig& c) {
            const T v = acc(c);
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(v);
            } else {
              return std::to_string(v);
            }
          },
          [acc, key](RunConfig& c, const std::string& s) { acc(c) = parse_number<T>(key, s); }};
}

template <typename Acc>
Field flag(const std::string& key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return acc(c) ? std::string("true") : "false"; },
          [acc, key](RunConfig& c, const std::string& s) { acc(c) = parse_bool(key, s); }};
}

std::string format_sizes(const Eigen::MatrixXd& m) {
  std::string s;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (r > 0) s += " | ";
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      if (k > 0) s += ' ';
      s += format_double(m(r, k));
    }
  }
  return s;
}

Eigen::MatrixXd parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream rs(text);
  std::string row;
  while (std::getline(rs, row, '|')) {
    std::istringstream vs(row);
    std::string tok;
    std::vector<double> vals;
    while (vs >> tok) vals.push_back(parse_number<double>(key, tok));
    if (vals.size() != 3) throw ConfigError(key, "each row needs 3 values (l w h), rows separated by '|'");
    rows.push_back(vals);
  }
  if (rows.empty()) throw ConfigError(key, "empty");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int k = 0; k < 3; ++k) m(static_cast<Eigen::Index>(r), k) = rows[r][static_cast<std::size_t>(k)];
  }
  return m;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(num<std::uint64_t>("run.seed", [](auto& c) -> auto& { return c.seed; }));
    v.push_back(num<int>("run.checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; }));

    v.push_back(num<int>("data.n_train", [](auto& c) -> auto& { return c.n_train; }));
    v.push_back(num<int>("data.n_val", [](auto& c) -> auto& { return c.n_val; }));
    v.push_back(num<double>("data.labeled_ratio", [](auto& c) -> auto& { return c.labeled_ratio; }));
    v.push_back(num<int>("data.n_points", [](auto& c) -> auto& { return c.scene.n_points; }));
    v.push_back({"data.n_classes", [](const RunConfig& c) { return std::to_string(c.scene.n_classes); },
                 [](RunConfig& c, const std::string& s) {
                   const int n = parse_number<int>("data.n_classes", s);
                   c.scene.n_classes = n;
                   c.ssl.detector.n_classes = n;
                 }});
    v.push_back(num<int>("data.min_objects", [](auto& c) -> auto& { return c.scene.min_objects; }));
    v.push_back(num<int>("data.max_objects", [](auto& c) -> auto& { return c.scene.max_objects; }));
    v.push_back({"data.class_size_means", [](const RunConfig& c) { return format_sizes(c.scene.class_size_means); },
                 [](RunConfig& c, const std::string& s) {
                   c.scene.class_size_means = parse_sizes("data.class_size_means", s);
                 }});
    v.push_back(num<double>("data.size_jitter", [](auto& c) -> auto& { return c.scene.size_jitter; }));
    v.push_back(num<double>("data.surface_noise", [](auto& c) -> auto& { return c.scene.surface_noise; }));
    v.push_back(num<double>("data.clutter_fraction", [](auto& c) -> auto& { return c.scene.clutter_fraction; }));
    v.push_back(num<double>("data.min_gap", [](auto& c) -> auto& { return c.scene.min_gap; }));
    v.push_back(num<int>("data.max_placement_attempts",
                         [](auto& c) -> auto& { return c.scene.max_placement_attempts; }));
    v.push_back(num<int>("data.max_layout_attempts", [](auto& c) -> auto& { return c.scene.max_layout_attempts; }));

    v.push_back(num<int>("model.feature_width", [](auto& c) -> auto& { return c.ssl.detector.feature_width; }));
    v.push_back(num<int>("model.n_rep_points", [](auto& c) -> auto& { return c.ssl.detector.n_rep_points; }));
    v.push_back(num<int>("model.n_proposals", [](auto& c) -> auto& { return c.ssl.detector.n_proposals; }));
    v.push_back(num<int>("model.knn", [](auto& c) -> auto& { return c.ssl.detector.knn; }));
    v.push_back(num<int>("model.context_knn", [](auto& c) -> auto& { return c.ssl.detector.context_knn; }));
    v.push_back(num<int>("model.encoder_hidden", [](auto& c) -> auto& { return c.ssl.detector.encoder_hidden; }));
    v.push_back(num<int>("model.roi_hidden", [](auto& c) -> auto& { return c.ssl.detector.roi_hidden; }));
    v.push_back(num<int>("model.time_embed_width", [](auto& c) -> auto& { return c.ssl.detector.time_embed_width; }));
    v.push_back(num<int>("model.decoder_hidden", [](auto& c) -> auto& { return c.ssl.detector.decoder_hidden; }));
    v.push_back(num<double>("model.neg_radius", [](auto& c) -> auto& { return c.ssl.detector.neg_radius; }));
    v.push_back(num<double>("model.offset_gain", [](auto& c) -> auto& { return c.ssl.detector.offset_gain; }));
    v.push_back(num<double>("model.knn_gain", [](auto& c) -> auto& { return c.ssl.detector.knn_gain; }));
    v.push_back(num<double>("model.context_gain", [](auto& c) -> auto& { return c.ssl.detector.context_gain; }));
    v.push_back(num<double>("model.length_unit", [](auto& c) -> auto& { return c.ssl.detector.length_unit; }));
    v.push_back({"model.sampling_strategy",
                 [](const RunConfig& c) {
                   return std::string(c.ssl.detector.sampling == SamplingStrategy::kFps ? "fps" : "random");
                 },
                 [](RunConfig& c, const std::string& s) {
                   const std::string t = trim(s);
                   if (t == "fps") {
                     c.ssl.detector.sampling = SamplingStrategy::kFps;
                   } else if (t == "random") {
                     c.ssl.detector.sampling = SamplingStrategy::kRandom;
                   } else {
                     throw ConfigError("model.sampling_strategy", "expected fps or random, got '" + s + "'");
                   }
                 }});

    v.push_back(num<int>("diffusion.max_t", [](auto& c) -> auto& { return c.ssl.max_t; }));
    v.push_back(flag("diffusion.size_diffusion", [](auto& c) -> auto& { return c.ssl.size_diffusion; }));
    v.push_back(flag("diffusion.label_diffusion", [](auto& c) -> auto& { return c.ssl.label_diffusion; }));
    v.push_back(num<double>("diffusion.size_scale", [](auto& c) -> auto& { return c.ssl.scaling.size_scale; }));
    v.push_back(num<double>("diffusion.label_scale", [](auto& c) -> auto& { return c.ssl.scaling.label_scale; }));
    v.push_back(num<double>("diffusion.size_mean", [](auto& c) -> auto& { return c.ssl.size_mean; }));
    v.push_back(num<double>("diffusion.label_mean", [](auto& c) -> auto& { return c.ssl.label_mean; }));
    v.push_back(flag("diffusion.centered_noise", [](auto& c) -> auto& { return c.ssl.centered_noise; }));
    v.push_back(num<double>("diffusion.pad_size_min", [](auto& c) -> auto& { return c.ssl.pad_size_min; }));
    v.push_back(num<double>("diffusion.pad_size_max", [](auto& c) -> auto& { return c.ssl.pad_size_max; }));

    v.push_back(flag("sampler.ddim_on", [](auto& c) -> auto& { return c.ssl.ddim_on; }));
    v.push_back(num<int>("sampler.ddim_steps", [](auto& c) -> auto& { return c.ssl.ddim_steps; }));
    v.push_back(flag("sampler.renewal_on", [](auto& c) -> auto& { return c.ssl.renewal_on; }));
    v.push_back(num<double>("sampler.renew_thresh", [](auto& c) -> auto& { return c.ssl.renew_thresh; }));
    v.push_back(flag("sampler.renew_use_iou", [](auto& c) -> auto& { return c.ssl.renew_use_iou; }));

    v.push_back(num<double>("ssl.lambda_u", [](auto& c) -> auto& { return c.ssl.lambda_u; }));
    v.push_back(num<double>("ssl.obj_thresh", [](auto& c) -> auto& { return c.ssl.obj_thresh; }));
    v.push_back(num<double>("ssl.cls_thresh", [](auto& c) -> auto& { return c.ssl.cls_thresh; }));
    v.push_back(num<double>("ssl.iou_thresh", [](auto& c) -> auto& { return c.ssl.iou_thresh; }));
    v.push_back(num<double>("ssl.pl_nms_iou", [](auto& c) -> auto& { return c.ssl.pl_nms_iou; }));
    v.push_back(num<double>("ssl.ema_decay", [](auto& c) -> auto& { return c.ssl.ema_decay; }));
    v.push_back(num<int>("ssl.batch_labeled", [](auto& c) -> auto& { return c.ssl.batch_labeled; }));
    v.push_back(num<int>("ssl.batch_unlabeled", [](auto& c) -> auto& { return c.ssl.batch_unlabeled; }));
    v.push_back(num<int>("ssl.pretrain_epochs", [](auto& c) -> auto& { return c.ssl.pretrain_epochs; }));
    v.push_back(num<int>("ssl.ssl_epochs", [](auto& c) -> auto& { return c.ssl.ssl_epochs; }));

    v.push_back(num<double>("optim.lr", [](auto& c) -> auto& { return c.ssl.adamw.lr; }));
    v.push_back(num<double>("optim.beta1", [](auto& c) -> auto& { return c.ssl.adamw.beta1; }));
    v.push_back(num<double>("optim.beta2", [](auto& c) -> auto& { return c.ssl.adamw.beta2; }));
    v.push_back(num<double>("optim.eps", [](auto& c) -> auto& { return c.ssl.adamw.eps; }));
    v.push_back(num<double>("optim.weight_decay", [](auto& c) -> auto& { return c.ssl.adamw.weight_decay; }));

    v.push_back(num<double>("augment.scale_min", [](auto& c) -> auto& { return c.ssl.augment.scale_min; }));
    v.push_back(num<double>("augment.scale_max", [](auto& c) -> auto& { return c.ssl.augment.scale_max; }));
    v.push_back(num<double>("augment.jitter_std", [](auto& c) -> auto& { return c.ssl.augment.jitter_std; }));
    v.push_back(num<double>("augment.dropout", [](auto& c) -> auto& { return c.ssl.augment.dropout; }));

    v.push_back(num<std::uint64_t>("eval.seed", [](auto& c) -> auto& { return c.eval_seed; }));
    v.push_back(num<double>("eval.nms_iou", [](auto& c) -> auto& { return c.ssl.eval_nms_iou; }));
    v.push_back(num<int>("eval.pl_quality_every", [](auto& c) -> auto& { return c.pl_quality_every; }));
    return v;
  }();
  return f;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError(key, "unknown key");
}

std::string section_of(const std::string& key) { return key.substr(0, key.find('.')); }

ConfigError rekey(const std::invalid_argument& e) {
  static const std::map<std::string, std::string> aliases = {
      {"lr", "optim.lr"}, {"eval_nms_iou", "eval.nms_iou"}, {"pad_size_min/pad_size_max", "diffusion.pad_size_min"}};
  const std::string what = e.what();
  const auto colon = what.find(':');
  if (colon == std::string::npos) return ConfigError("config", what);
  const std::string why = trim(what.substr(colon + 1));
  if (what.rfind("ScalingConfig", 0) == 0) return ConfigError("diffusion.size_scale", why);
  const auto dot = what.find('.');
  if (dot == std::string::npos || dot > colon) return ConfigError("config", what);
  const std::string leaf = what.substr(dot + 1, colon - dot - 1);
  if (const auto a = aliases.find(leaf); a != aliases.end()) return ConfigError(a->second, why);
  for (const auto& f : fields()) {
    if (f.key.substr(f.key.find('.') + 1) == leaf) return ConfigError(f.key, why);
  }
  return ConfigError(leaf, why);
}

}  // namespace

void RunConfig::validate() const {
  if (checkpoint_every < 1) throw ConfigError("run.checkpoint_every", "must be >= 1");
  if (n_train < 2) throw ConfigError("data.n_train", "must be >= 2");
  if (n_val < 0) throw ConfigError("data.n_val", "must be >= 0");
  if (!(labeled_ratio > 0.0 && labeled_ratio < 1.0)) {
    throw ConfigError("data.labeled_ratio", "must lie strictly between 0 and 1");
  }
  const long n_lab = std::lround(labeled_ratio * n_train);
  if (n_lab < 1 || n_lab > n_train - 1) {
    throw ConfigError("data.labeled_ratio", "leaves an empty labeled or unlabeled split for data.n_train = " +
                                                std::to_string(n_train));
  }
  if (scene.n_classes != ssl.detector.n_classes) {
    throw ConfigError("data.n_classes", "scene and model class counts differ");
  }
  if (scene.class_size_means.rows() != scene.n_classes) {
    throw ConfigError("data.class_size_means", "needs one row per class (" + std::to_string(scene.n_classes) + ")");
  }
  if (pl_quality_every < 0) throw ConfigError("eval.pl_quality_every", "must be >= 0");
  try {
    scene.validate();
    ssl.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw rekey(e);
  }
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return field(key).get(config); }

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like section.key=value");
  set_config_value(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

RunConfig parse_run_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", std::string("malformed INI: ") + e.what());
  }
  const auto version = tree.get_optional<std::string>("run.version");
  if (!version) throw ConfigError("run.version", "missing");
  if (parse_number<int>("run.version", *version) != kRunConfigVersion) {
    throw ConfigError("run.version", "unsupported version " + *version + " (expected " +
                                         std::to_string(kRunConfigVersion) + ")");
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "keys must live inside a [section]");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      if (key == "run.version") continue;
      set_config_value(c, key, value.data());
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_ini(const RunConfig& config) {
  std::ostringstream os;
  os << "[run]\nversion = " << kRunConfigVersion << '\n';
  std::string current = "run";
  for (const auto& f : fields()) {
    const std::string section = section_of(f.key);
    if (section != current) {
      os << "\n[" << section << "]\n";
      current = section;
    }
    os << f.key.substr(section.size() + 1) << " = " << f.get(config) << '\n';
  }
  return os.str();
}

}  // namespace diffdet3d
