#pragma once
// Flat TOML-style configuration: `key = value` lines, [section] headers that
// prefix the keys below them, `#` comments, and values that are numbers,
// booleans, quoted strings, or numeric arrays. Plus the typed run
// configuration the pipeline consumes.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pointforge/dataset.hpp"
#include "pointforge/eval.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/rpn.hpp"

namespace pointforge::cfg {

class Config {
 public:
  static Config parse(const std::string& text);  // throws with line numbers
  static Config load(const std::string& path);

  bool has(const std::string& key) const;
  // Required-value accessors throw when the key is absent; the fallback forms
  // return the fallback instead.
  double num(const std::string& key) const;
  double num(const std::string& key, double fallback) const;
  int integer(const std::string& key) const;
  int integer(const std::string& key, int fallback) const;
  bool boolean(const std::string& key, bool fallback) const;
  std::string str(const std::string& key) const;
  std::string str(const std::string& key, const std::string& fallback) const;
  std::vector<double> list(const std::string& key) const;
  std::vector<double> list(const std::string& key, const std::vector<double>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;  // raw value text per dotted key
};

// Every knob of the pipeline with its default. Values the published method
// pins (detection range, voxel size, focal gamma, augmentation ranges,
// evaluation thresholds, G) default to those; the rest are desk-scale
// choices meant to be overridden per experiment.
struct RunConfig {
  std::string data_dir = "data";
  std::string store_dir = "store";
  std::uint64_t seed = 1;

  pc::RangeSpec range{{0, -40, -3}, {70.4, 40, 1}};
  geom::Vec3 voxel_size{0.05, 0.05, 0.1};
  double bev_cell = 0.4;

  int image_channels = 3;
  int spe_channels = 8;       // decorated point feature width
  int bev_channels = 16;
  int rpn_hidden = 32;        // hidden width of the per-cell RPN heads
  int grid_g = 6;             // subvoxels per RoI axis
  int fused_channels = 16;
  int generated_channels = 8; // per generated point feature width
  int set_mid = 32, set_out = 32;
  int refiner_layers = 2, refiner_heads = 2, refiner_ff = 32;
  double pool_radius_scale = 2.5;  // multiple of the half-subvoxel diagonal
  int pool_k = 16;
  double enlarge_factor = 1.2;
  int roi_bins = 3, roi_samples_per_bin = 2;

  std::vector<rpn::AnchorSpec> anchors;  // defaults built per class

  double gamma = 2.0;
  double rpn_pos_iou = 0.6, rpn_neg_iou = 0.45;
  double rpn_beta = 1.0, rcnn_beta = 1.0;
  double rcnn_pos_iou = 0.45;
  int score_samples = 32;  // points scored per RoI in the generation loss
  double w_rpn = 1.0, w_rcnn = 1.0, w_rpg = 1.0;

  double nms_iou = 0.5;
  int train_proposals = 6;
  int infer_proposals = 12;
  double infer_score_threshold = 0.3;
  double final_nms_iou = 0.3;

  int iterations = 500;
  int batch = 1;  // scenes averaged per optimizer step
  double lr = 1e-3;
  bool gt_as_rois = true;
  bool augment_enable = true;
  data::AugmentConfig aug;
  int density_threshold = 64;

  eval::SuiteConfig eval;
  data::SyntheticSpec synth;
};

// Applies the file's overrides on top of the defaults; unknown keys throw so
// typos surface instead of silently running the defaults.
RunConfig run_config_from(const Config& c);

}  // namespace pointforge::cfg
