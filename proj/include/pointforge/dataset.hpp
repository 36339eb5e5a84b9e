#pragma once
// Scene ingestion and generation: KITTI-format readers/writers (velodyne
// binaries, calibration files, label files), a deterministic synthetic scene
// generator with distance-dependent sparsity, and training augmentation.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pointforge/densify.hpp"
#include "pointforge/eval.hpp"
#include "pointforge/feature_map.hpp"
#include "pointforge/geometry.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/rng.hpp"

namespace pointforge::data {

// Pipeline class ids: car 0, pedestrian 1, cyclist 2.
const std::vector<std::string>& class_names();
const std::string& kitti_type_name(int class_id);
// -1 for types outside the pipeline (case-insensitive match).
int class_id_from_type(const std::string& type);

struct GtObject {
  geom::Box3D box;  // LiDAR frame
  int class_id = 0;
  std::uint64_t track_id = 0;
};

struct SceneSample {
  int frame_id = 0;
  pc::PointCloud cloud;
  geom::CameraCalibration calib;
  img::FeatureMap fmap;
  std::vector<GtObject> gts;
  int image_w = 0, image_h = 0;  // pixels
};

// --- KITTI velodyne binary: little-endian f32 (x, y, z, intensity) rows. ---
pc::PointCloud read_velodyne_bin(const std::string& path);
void write_velodyne_bin(const std::string& path, const pc::PointCloud& cloud);

// --- KITTI calibration text: "P2:" 12 floats, "R0_rect:" 9,
//     "Tr_velo_to_cam:" 12; other keys are ignored. ---
geom::CameraCalibration read_calib(const std::string& path);
void write_calib(const std::string& path, const geom::CameraCalibration& calib);

// One KITTI label row as stored: camera-frame fields, no conversion applied.
struct LabelRecord {
  std::string type;  // KITTI class token ("Car", "DontCare", ...)
  double truncation = 0.0;
  int occlusion = 0;
  double alpha = 0.0;
  geom::Box2D bbox;           // pixels
  double h = 0, w = 0, l = 0; // KITTI order: height, width, length
  geom::Vec3 cam_center;      // rectified camera frame, bottom-face center
  double ry = 0.0;            // rotation about the camera y axis
  std::uint64_t track_id = 0; // 16th field when present
  bool has_track = false;
};

// Rows must have 15 fields (track_id defaults to the row index) or 16 (the
// trailing track id this writer emits). Malformed rows fail with their line
// number.
std::vector<LabelRecord> read_label_records(const std::string& path);
void write_label_records(const std::string& path, const std::vector<LabelRecord>& records);

// Camera-frame record -> LiDAR-frame box: bottom-face center lifted by h/2,
// then mapped through the calibration inverse; heading converted by rotating
// the camera-frame direction (cos ry, 0, -sin ry) into the LiDAR frame.
GtObject label_to_gt(const LabelRecord& rec, const geom::CameraCalibration& calib);
// Inverse of label_to_gt plus the derived 2D fields (bbox from projected
// corners clamped to the image, truncation = clipped-away bbox area fraction,
// alpha = ry - atan2(x, z), occlusion 0).
LabelRecord gt_to_label(const GtObject& gt, const geom::CameraCalibration& calib, int image_w,
                        int image_h);

// Convenience wrappers skipping DontCare and out-of-scope classes.
std::vector<GtObject> read_labels(const std::string& path,
                                  const geom::CameraCalibration& calib);
void write_labels(const std::string& path, const std::vector<GtObject>& gts,
                  const geom::CameraCalibration& calib, int image_w, int image_h);

// --- Synthetic scenes -------------------------------------------------------
// Objects persist with fixed dims and track ids across the frames of each
// sequence; per-object point counts thin with center distance, embedding the
// far-objects-are-sparser phenomenon the detector is meant to counter.
struct SyntheticSpec {
  int sequences = 4;
  int frames_per_sequence = 2;
  std::array<int, 2> objects_per_frame{1, 3};
  std::vector<double> class_mix{1.0, 0.0, 0.0};     // sampling weight per class id
  std::array<double, 2> distance_range{6.0, 44.0};  // BEV distance of centers
  // Keep probability clamp(1 - rate*(d - start), floor, 1): non-increasing in
  // distance, so dropout is non-decreasing.
  double dropout_start = 8.0;
  double dropout_rate = 0.02;
  double dropout_floor = 0.05;
  int points_per_object = 220;  // surface samples before dropout
  int background_points = 200;
  double noise_sigma = 0.01;
  double focal = 96.0;  // pinhole along +x, principal point at image center
  int image_w = 96, image_h = 64;
  double fmap_stride = 4.0;
  pc::RangeSpec range{{0, -24, -2}, {48, 24, 2}};
};

double keep_probability(const SyntheticSpec& spec, double distance);

// Paints the one-hot class silhouette over the box's projected 2D bounds.
void render_silhouette(img::FeatureMap& fmap, const geom::CameraCalibration& calib,
                       const geom::Box3D& box, int class_id);

std::vector<SceneSample> gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// --- Dataset directory ------------------------------------------------------
// <dir>/frames.txt lists zero-padded frame ids; per frame: <id>.bin,
// <id>_calib.txt, <id>_label.txt, <id>.fmap; <dir>/gt.txt carries the
// evaluation records (point counts and difficulty fields included).
void write_dataset(const std::string& dir, const std::vector<SceneSample>& scenes);
std::vector<SceneSample> read_dataset(const std::string& dir);

// In-box crops per (frame, tracked object); objects with no interior points
// in a frame contribute no observation for it.
std::vector<densify::TrackedObservation> to_observations(
    const std::vector<SceneSample>& scenes);

// Evaluation records for every ground truth in the scenes.
std::vector<eval::GtRecord> to_gt_records(const std::vector<SceneSample>& scenes);

// --- Augmentation -----------------------------------------------------------
// Template pasting happens first (points plus the silhouette patch at the
// box's projection), then y-flip, global scale, and global z-rotation apply to
// points and boxes only: the feature map is left untouched and the projection
// mask absorbs the mismatch.
struct AugmentConfig {
  bool flip = true;  // coin flip per scene when enabled
  std::array<double, 2> scale_range{0.95, 1.05};
  std::array<double, 2> rotation_range{-M_PI / 4, M_PI / 4};
  int gt_samples = 0;  // templates pasted per scene
  std::array<double, 2> gt_sample_distance{6.0, 30.0};
};

SceneSample augment(const SceneSample& sample, const AugmentConfig& cfg,
                    const std::vector<densify::DenseObjectTemplate>& templates, Rng& rng);

}  // namespace pointforge::data
