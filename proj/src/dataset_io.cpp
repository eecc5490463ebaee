#include "diffdet3d/synthdata.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace diffdet3d {

using nlohmann::json;

namespace {

constexpr const char* kFormatName = "diffdet3d.dataset";

json config_to_json(const SceneConfig& c) {
  json sizes = json::array();
  for (Eigen::Index r = 0; r < c.class_size_means.rows(); ++r) {
    sizes.push_back({c.class_size_means(r, 0), c.class_size_means(r, 1), c.class_size_means(r, 2)});
  }
  return {
      {"n_points", c.n_points},
      {"n_classes", c.n_classes},
      {"min_objects", c.min_objects},
      {"max_objects", c.max_objects},
      {"class_size_means", sizes},
      {"size_jitter", c.size_jitter},
      {"surface_noise", c.surface_noise},
      {"clutter_fraction", c.clutter_fraction},
      {"min_gap", c.min_gap},
      {"max_placement_attempts", c.max_placement_attempts},
      {"max_layout_attempts", c.max_layout_attempts},
  };
}

SceneConfig config_from_json(const json& j) {
  SceneConfig c;
  c.n_points = j.at("n_points").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.min_objects = j.at("min_objects").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  const auto& sizes = j.at("class_size_means");
  c.class_size_means.resize(static_cast<Eigen::Index>(sizes.size()), 3);
  for (std::size_t r = 0; r < sizes.size(); ++r) {
    for (int k = 0; k < 3; ++k) c.class_size_means(static_cast<Eigen::Index>(r), k) = sizes.at(r).at(k).get<double>();
  }
  c.size_jitter = j.at("size_jitter").get<double>();
  c.surface_noise = j.at("surface_noise").get<double>();
  c.clutter_fraction = j.at("clutter_fraction").get<double>();
  c.min_gap = j.at("min_gap").get<double>();
  c.max_placement_attempts = j.at("max_placement_attempts").get<int>();
  c.max_layout_attempts = j.at("max_layout_attempts").get<int>();
  return c;
}

json scene_to_json(const Scene& s, const char* split, std::size_t index) {
  json pts = json::array();
  for (Eigen::Index i = 0; i < s.cloud.rows(); ++i) {
    pts.push_back(s.cloud(i, 0));
    pts.push_back(s.cloud(i, 1));
    pts.push_back(s.cloud(i, 2));
  }
  json boxes = json::array();
  for (const auto& b : s.gt_boxes) {
    boxes.push_back({{"center", {b.center(0), b.center(1), b.center(2)}},
                     {"size", {b.size(0), b.size(1), b.size(2)}},
                     {"orientation", b.orientation},
                     {"class_id", b.class_id}});
  }
  return {{"split", split}, {"index", index}, {"scene_id", s.scene_id}, {"points", pts}, {"boxes", boxes}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.scene_id = j.at("scene_id").get<std::string>();
  const auto& pts = j.at("points");
  if (pts.size() % 3 != 0) throw std::runtime_error("points array length not a multiple of 3");
  s.cloud.resize(static_cast<Eigen::Index>(pts.size() / 3), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    s.cloud(static_cast<Eigen::Index>(i / 3), static_cast<Eigen::Index>(i % 3)) = pts[i].get<double>();
  }
  for (const auto& jb : j.at("boxes")) {
    Box3 b;
    for (int k = 0; k < 3; ++k) {
      b.center(k) = jb.at("center").at(k).get<double>();
      b.size(k) = jb.at("size").at(k).get<double>();
    }
    b.orientation = jb.at("orientation").get<double>();
    b.class_id = jb.at("class_id").get<int>();
    validate_box(b);
    s.gt_boxes.push_back(b);
  }
  return s;
}

[[noreturn]] void fail_at(std::size_t line, std::size_t offset, const std::string& what) {
  throw std::runtime_error("dataset parse error at line " + std::to_string(line) + " (byte offset " +
                           std::to_string(offset) + "): " + what);
}

}  // namespace

std::string dataset_to_string(const Dataset& ds) {
  json header = {
      {"format", kFormatName},
      {"version", kDatasetFormatVersion},
      {"seed", ds.seed},
      {"labeled_ratio", ds.labeled_ratio},
      {"n_train", ds.train.size()},
      {"n_val", ds.val.size()},
      {"config", config_to_json(ds.config)},
      {"split", {{"labeled", ds.split.labeled}, {"unlabeled", ds.split.unlabeled}}},
  };
  std::string out = header.dump();
  out += '\n';
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    out += scene_to_json(ds.train[i], "train", i).dump();
    out += '\n';
  }
  for (std::size_t i = 0; i < ds.val.size(); ++i) {
    out += scene_to_json(ds.val[i], "val", i).dump();
    out += '\n';
  }
  return out;
}

Dataset dataset_from_string(const std::string& text) {
  Dataset ds;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  std::size_t n_train = 0, n_val = 0;
  bool have_header = false;
  while (pos < text.size()) {
    const std::size_t line_start = pos;
    std::size_t end = text.find('\n', pos);
    const bool terminated = end != std::string::npos;
    if (!terminated) end = text.size();
    pos = terminated ? end + 1 : end;
    ++line_no;
    const std::string_view line(text.data() + line_start, end - line_start);
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail_at(line_no, line_start + (e.byte > 0 ? e.byte - 1 : 0), e.what());
    }
    try {
      if (!have_header) {
        if (j.value("format", std::string{}) != kFormatName) {
          fail_at(line_no, line_start, "missing dataset header record");
        }
        const int version = j.at("version").get<int>();
        if (version != kDatasetFormatVersion) {
          fail_at(line_no, line_start, "unsupported dataset format version " + std::to_string(version) +
                                           " (expected " + std::to_string(kDatasetFormatVersion) + ")");
        }
        ds.seed = j.at("seed").get<std::uint64_t>();
        ds.labeled_ratio = j.at("labeled_ratio").get<double>();
        n_train = j.at("n_train").get<std::size_t>();
        n_val = j.at("n_val").get<std::size_t>();
        ds.config = config_from_json(j.at("config"));
        ds.split.labeled = j.at("split").at("labeled").get<std::vector<std::size_t>>();
        ds.split.unlabeled = j.at("split").at("unlabeled").get<std::vector<std::size_t>>();
        have_header = true;
        continue;
      }
      const auto split = j.at("split").get<std::string>();
      auto& target = split == "train" ? ds.train : ds.val;
      if (split != "train" && split != "val") fail_at(line_no, line_start, "unknown split '" + split + "'");
      if (j.at("index").get<std::size_t>() != target.size()) {
        fail_at(line_no, line_start, "scene records out of order");
      }
      target.push_back(scene_from_json(j));
    } catch (const json::exception& e) {
      fail_at(line_no, line_start, e.what());
    } catch (const std::invalid_argument& e) {
      fail_at(line_no, line_start, e.what());
    }
  }
  if (!have_header) fail_at(1, 0, "empty dataset file");
  if (ds.train.size() != n_train || ds.val.size() != n_val) {
    fail_at(line_no, text.size(),
            "truncated: expected " + std::to_string(n_train) + " train + " + std::to_string(n_val) +
                " val scenes, found " + std::to_string(ds.train.size()) + " + " +
                std::to_string(ds.val.size()));
  }
  for (auto i : ds.split.labeled) {
    if (i >= n_train) fail_at(1, 0, "split index out of range");
  }
  for (auto i : ds.split.unlabeled) {
    if (i >= n_train) fail_at(1, 0, "split index out of range");
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  const auto text = dataset_to_string(dataset);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write dataset " + path.string());
  f << text;
  if (!f) throw std::runtime_error("short write on dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return dataset_from_string(ss.str());
}

}  // namespace diffdet3d
