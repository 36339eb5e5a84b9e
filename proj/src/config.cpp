#include "pointforge/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace pointforge::cfg {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("config: " + msg); }

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Strips a trailing # comment, respecting double quotes.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

double parse_number(const std::string& key, const std::string& raw) {
  try {
    size_t used = 0;
    const double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    fail("key '" + key + "' has non-numeric value '" + raw + "'");
  }
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) fail("line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail("line " + std::to_string(line_no) + ": empty key");
    if (value.empty()) fail("line " + std::to_string(line_no) + ": empty value");
    if (!section.empty()) key = section + "." + key;
    if (c.values_.count(key)) fail("line " + std::to_string(line_no) + ": duplicate key " + key);
    c.values_[key] = value;
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("cannot open " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse(buf.str());
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

double Config::num(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("missing key '" + key + "'");
  return parse_number(key, it->second);
}

double Config::num(const std::string& key, double fallback) const {
  return has(key) ? num(key) : fallback;
}

int Config::integer(const std::string& key) const {
  const double v = num(key);
  const int i = static_cast<int>(std::llround(v));
  if (v != static_cast<double>(i)) fail("key '" + key + "' is not an integer");
  return i;
}

int Config::integer(const std::string& key, int fallback) const {
  return has(key) ? integer(key) : fallback;
}

bool Config::boolean(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true") return true;
  if (it->second == "false") return false;
  fail("key '" + key + "' must be true or false");
}

std::string Config::str(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("missing key '" + key + "'");
  const std::string& v = it->second;
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

std::string Config::str(const std::string& key, const std::string& fallback) const {
  return has(key) ? str(key) : fallback;
}

std::vector<double> Config::list(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) fail("missing key '" + key + "'");
  const std::string& v = it->second;
  if (v.size() < 2 || v.front() != '[' || v.back() != ']')
    fail("key '" + key + "' must be a [..] array");
  std::vector<double> out;
  std::string item;
  std::istringstream is(v.substr(1, v.size() - 2));
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) fail("key '" + key + "' has an empty array element");
    out.push_back(parse_number(key, item));
  }
  return out;
}

std::vector<double> Config::list(const std::string& key,
                                 const std::vector<double>& fallback) const {
  return has(key) ? list(key) : fallback;
}

namespace {

// Wraps a Config and records which keys were consumed so leftovers fail.
struct KeyedConfig {
  const Config& c;
  std::set<std::string> used;

  bool has(const std::string& k) {
    used.insert(k);
    return c.has(k);
  }
  double num(const std::string& k, double d) {
    used.insert(k);
    return c.num(k, d);
  }
  int integer(const std::string& k, int d) {
    used.insert(k);
    return c.integer(k, d);
  }
  bool boolean(const std::string& k, bool d) {
    used.insert(k);
    return c.boolean(k, d);
  }
  std::string str(const std::string& k, const std::string& d) {
    used.insert(k);
    return c.str(k, d);
  }
  std::vector<double> list(const std::string& k, const std::vector<double>& d) {
    used.insert(k);
    return c.list(k, d);
  }
  std::array<double, 2> pair(const std::string& k, std::array<double, 2> d) {
    auto v = list(k, {d[0], d[1]});
    if (v.size() != 2) fail("key '" + k + "' must have 2 values");
    return {v[0], v[1]};
  }
  geom::Vec3 vec3(const std::string& k, geom::Vec3 d) {
    auto v = list(k, {d.x, d.y, d.z});
    if (v.size() != 3) fail("key '" + k + "' must have 3 values");
    return {v[0], v[1], v[2]};
  }
};

}  // namespace

RunConfig run_config_from(const Config& c) {
  KeyedConfig k{c, {}};
  RunConfig r;
  r.data_dir = k.str("data.dir", r.data_dir);
  r.store_dir = k.str("data.store_dir", r.store_dir);
  r.seed = static_cast<std::uint64_t>(k.integer("seed", static_cast<int>(r.seed)));

  r.range.min = k.vec3("range.min", r.range.min);
  r.range.max = k.vec3("range.max", r.range.max);
  r.voxel_size = k.vec3("voxel.size", r.voxel_size);
  r.bev_cell = k.num("bev.cell", r.bev_cell);

  r.image_channels = k.integer("model.image_channels", r.image_channels);
  r.spe_channels = k.integer("model.spe_channels", r.spe_channels);
  r.bev_channels = k.integer("model.bev_channels", r.bev_channels);
  r.rpn_hidden = k.integer("model.rpn_hidden", r.rpn_hidden);
  r.grid_g = k.integer("model.grid_g", r.grid_g);
  r.fused_channels = k.integer("model.fused_channels", r.fused_channels);
  r.generated_channels = k.integer("model.generated_channels", r.generated_channels);
  r.set_mid = k.integer("model.set_mid", r.set_mid);
  r.set_out = k.integer("model.set_out", r.set_out);
  r.refiner_layers = k.integer("model.refiner_layers", r.refiner_layers);
  r.refiner_heads = k.integer("model.refiner_heads", r.refiner_heads);
  r.refiner_ff = k.integer("model.refiner_ff", r.refiner_ff);
  r.pool_radius_scale = k.num("model.pool_radius_scale", r.pool_radius_scale);
  r.pool_k = k.integer("model.pool_k", r.pool_k);
  r.enlarge_factor = k.num("model.enlarge_factor", r.enlarge_factor);
  r.roi_bins = k.integer("model.roi_bins", r.roi_bins);
  r.roi_samples_per_bin = k.integer("model.roi_samples_per_bin", r.roi_samples_per_bin);

  const double z_mid = 0.5 * (r.range.min.z + r.range.max.z);
  const double default_dims[3][3] = {{3.9, 1.6, 1.56}, {0.8, 0.6, 1.73}, {1.76, 0.6, 1.73}};
  const auto& names = data::class_names();
  for (size_t i = 0; i < names.size(); ++i) {
    auto v = k.list("anchors." + names[i],
                    {default_dims[i][0], default_dims[i][1], default_dims[i][2], z_mid});
    if (v.size() != 4) fail("anchors." + names[i] + " must be [l, w, h, z]");
    r.anchors.push_back({names[i], v[0], v[1], v[2], v[3]});
  }

  r.gamma = k.num("loss.gamma", r.gamma);
  r.rpn_beta = k.num("loss.rpn_beta", r.rpn_beta);
  r.rcnn_beta = k.num("loss.rcnn_beta", r.rcnn_beta);
  r.w_rpn = k.num("loss.w_rpn", r.w_rpn);
  r.w_rcnn = k.num("loss.w_rcnn", r.w_rcnn);
  r.w_rpg = k.num("loss.w_rpg", r.w_rpg);
  r.rpn_pos_iou = k.num("rpn.pos_iou", r.rpn_pos_iou);
  r.rpn_neg_iou = k.num("rpn.neg_iou", r.rpn_neg_iou);
  r.nms_iou = k.num("rpn.nms_iou", r.nms_iou);
  r.rcnn_pos_iou = k.num("rcnn.pos_iou", r.rcnn_pos_iou);
  r.score_samples = k.integer("rpg.score_samples", r.score_samples);

  r.iterations = k.integer("train.iterations", r.iterations);
  r.batch = k.integer("train.batch", r.batch);
  r.lr = k.num("train.lr", r.lr);
  r.gt_as_rois = k.boolean("train.gt_as_rois", r.gt_as_rois);
  r.augment_enable = k.boolean("train.augment", r.augment_enable);
  r.train_proposals = k.integer("train.proposals", r.train_proposals);
  r.aug.flip = k.boolean("aug.flip", r.aug.flip);
  r.aug.scale_range = k.pair("aug.scale", r.aug.scale_range);
  r.aug.rotation_range = k.pair("aug.rotation", r.aug.rotation_range);
  r.aug.gt_samples = k.integer("aug.gt_samples", r.aug.gt_samples);
  r.aug.gt_sample_distance = k.pair("aug.gt_sample_distance", r.aug.gt_sample_distance);

  r.infer_proposals = k.integer("infer.proposals", r.infer_proposals);
  r.infer_score_threshold = k.num("infer.score_threshold", r.infer_score_threshold);
  r.final_nms_iou = k.num("infer.final_nms_iou", r.final_nms_iou);

  r.density_threshold = k.integer("densify.threshold", r.density_threshold);

  {
    auto thr = k.list("eval.iou", r.eval.iou_thresholds);
    if (thr.size() != r.eval.class_names.size()) fail("eval.iou needs one value per class");
    r.eval.iou_thresholds = thr;
    r.eval.range_edges = k.list("eval.range_edges", r.eval.range_edges);
    const std::string mode = k.str("eval.difficulty", "wod");
    if (mode == "wod")
      r.eval.difficulty = eval::DifficultyMode::kWod;
    else if (mode == "kitti")
      r.eval.difficulty = eval::DifficultyMode::kKitti;
    else
      fail("eval.difficulty must be wod or kitti");
  }

  r.synth.sequences = k.integer("synth.sequences", r.synth.sequences);
  r.synth.frames_per_sequence =
      k.integer("synth.frames_per_sequence", r.synth.frames_per_sequence);
  {
    auto v = k.pair("synth.objects", {static_cast<double>(r.synth.objects_per_frame[0]),
                                      static_cast<double>(r.synth.objects_per_frame[1])});
    r.synth.objects_per_frame = {static_cast<int>(v[0]), static_cast<int>(v[1])};
  }
  r.synth.class_mix = k.list("synth.class_mix", r.synth.class_mix);
  r.synth.distance_range = k.pair("synth.distance", r.synth.distance_range);
  r.synth.dropout_start = k.num("synth.dropout_start", r.synth.dropout_start);
  r.synth.dropout_rate = k.num("synth.dropout_rate", r.synth.dropout_rate);
  r.synth.dropout_floor = k.num("synth.dropout_floor", r.synth.dropout_floor);
  r.synth.points_per_object = k.integer("synth.points_per_object", r.synth.points_per_object);
  r.synth.background_points = k.integer("synth.background_points", r.synth.background_points);
  r.synth.noise_sigma = k.num("synth.noise_sigma", r.synth.noise_sigma);
  r.synth.focal = k.num("synth.focal", r.synth.focal);
  {
    auto v = k.pair("synth.image", {static_cast<double>(r.synth.image_w),
                                    static_cast<double>(r.synth.image_h)});
    r.synth.image_w = static_cast<int>(v[0]);
    r.synth.image_h = static_cast<int>(v[1]);
  }
  r.synth.fmap_stride = k.num("synth.fmap_stride", r.synth.fmap_stride);
  // The generator emits scenes over the detector's range so the two agree.
  r.synth.range = r.range;

  for (const auto& [key, value] : c.entries()) {
    (void)value;
    if (!k.used.count(key)) fail("unknown key '" + key + "'");
  }
  return r;
}

}  // namespace pointforge::cfg
