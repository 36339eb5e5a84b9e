#pragma once
// Detection metrics: greedy IoU matching, average precision interpolated at 40
// recall positions, heading-weighted AP, range-binned AP, and difficulty
// splits (in-box point count or label-based).

#include <string>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/head.hpp"

namespace pointforge::eval {

enum class MetricSpace { k3D, kBev };
enum class DifficultyMode { kWod, kKitti };
enum class Difficulty { kL1, kL2, kEasy, kModerate, kHard, kIgnored };

const char* difficulty_name(Difficulty d);

// Per detection, in input order. FP rows keep gt_index -1 and iou/heading 0.
struct MatchResult {
  bool tp = false;
  int gt_index = -1;
  double iou = 0.0;
  double heading_error = 0.0;  // min(|dyaw|, 2pi-|dyaw|), in [0, pi]
};

// Greedy matcher for one frame and one class: detections in descending
// confidence (ties by index) each take the highest-IoU still-unmatched ground
// truth with IoU >= threshold.
std::vector<MatchResult> match(const std::vector<geom::Box3D>& det_boxes,
                               const std::vector<double>& confidences,
                               const std::vector<geom::Box3D>& gt_boxes, double iou_threshold,
                               MetricSpace space);

// One detection's outcome carried into the cross-frame PR sweep.
struct ScoredMatch {
  double confidence = 0.0;
  bool tp = false;
  double heading_error = 0.0;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

// Precision/recall after each detection of the confidence-sorted sweep.
std::vector<PrPoint> pr_curve(const std::vector<ScoredMatch>& matches, int gt_count);

// AP = mean over recall thresholds {1/40,...,40/40} of the best precision at
// recall >= threshold (0 when unreached). Throws when gt_count < 1.
double ap_r40(const std::vector<ScoredMatch>& matches, int gt_count);

// Same sweep with every true positive contributing (1 - heading_error/pi) to
// both precision and recall numerators; never exceeds ap_r40.
double ap_heading_r40(const std::vector<ScoredMatch>& matches, int gt_count);

// One frame's boxes for a single class.
struct FrameEval {
  std::vector<geom::Box3D> det_boxes;
  std::vector<double> confidences;
  std::vector<geom::Box3D> gt_boxes;
};

struct RangeBinResult {
  double lo = 0.0, hi = 0.0;  // hi < 0 marks the open-ended last bin
  int gt_count = 0;
  bool defined = false;  // at least one ground truth in the bin
  double ap = 0.0;
  std::vector<PrPoint> pr;
};

// Matches globally per frame, then attributes each true positive to its
// matched ground truth's BEV-distance bin and each false positive to its own.
// Edges must start at 0 and increase; the last bin is open-ended.
std::vector<RangeBinResult> map_by_range(const std::vector<FrameEval>& frames,
                                         const std::vector<double>& edges, double iou_threshold,
                                         MetricSpace space);

// Ground-truth record mirroring the detections file plus the fields the
// difficulty rules need. Text format: header line
//   frame class cx cy cz l w h yaw points height occlusion truncation
// then one 6-decimal row per object.
struct GtRecord {
  int frame_id = 0;
  std::string class_name;
  geom::Box3D box;
  int point_count = 0;      // LiDAR points inside the box
  double bbox_height = 0.0; // projected 2D box height, pixels
  int occlusion = 0;
  double truncation = 0.0;
};

void save_ground_truth(const std::string& path, const std::vector<GtRecord>& gts);
std::vector<GtRecord> load_ground_truth(const std::string& path);

// WOD mode: more than 5 in-box points is L1, otherwise L2. KITTI mode: the
// easiest of Easy (height >= 40 px, occlusion 0, truncation <= 0.15),
// Moderate (>= 25 px, <= 1, <= 0.30), Hard (>= 25 px, <= 2, <= 0.50) whose
// gates all pass; otherwise Ignored.
std::vector<Difficulty> difficulty_split(const std::vector<GtRecord>& gts, DifficultyMode mode);

struct DifficultyResult {
  Difficulty level = Difficulty::kL1;
  int gt_count = 0;
  bool defined = false;
  double ap = 0.0;
};

struct SuiteConfig {
  std::vector<std::string> class_names{"car", "pedestrian", "cyclist"};
  std::vector<double> iou_thresholds{0.7, 0.5, 0.5};  // aligned with class_names
  std::vector<double> range_edges{0.0, 20.0, 40.0};
  DifficultyMode difficulty = DifficultyMode::kWod;
};

struct ClassReport {
  std::string class_name;
  double iou_threshold = 0.5;
  int gt_count = 0;
  bool defined = false;  // class has ground truth
  double ap_3d = 0.0, ap_bev = 0.0, aph_3d = 0.0;
  std::vector<PrPoint> pr_3d;
  std::vector<RangeBinResult> range_bins;        // 3D IoU
  std::vector<DifficultyResult> difficulties;    // 3D IoU
};

struct EvalReport {
  std::vector<ClassReport> classes;
  int defined_classes = 0;
  double map_3d = 0.0;  // mean over classes with ground truth
};

// Full protocol over a detections file's records and ground-truth records.
// Detections with class names outside the config are ignored.
EvalReport evaluate(const std::vector<head::DetectionRecord>& dets,
                    const std::vector<GtRecord>& gts, const SuiteConfig& cfg);

// Deterministic text table / per-class and per-bin PR CSV files
// (pr_<class>.csv, pr_<class>_range<i>.csv).
void write_report(const std::string& path, const EvalReport& report);
void write_pr_csv(const std::string& dir, const EvalReport& report);

}  // namespace pointforge::eval
