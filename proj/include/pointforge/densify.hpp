#pragma once
// Dense ground-truth template construction: cross-frame aggregation of tracked
// object points, lateral-symmetry mirroring, and best-match completion from a
// library of denser objects.

#include <cstdint>
#include <string>
#include <vector>

#include "pointforge/geometry.hpp"

namespace pointforge::densify {

// A completed object: points live in the box's canonical frame (centered,
// yaw-aligned) and stay inside the l/w/h half-extents to 1e-6.
struct DenseObjectTemplate {
  std::uint64_t object_id = 0;
  int class_id = 0;
  geom::Vec3 dims;                 // (l, w, h)
  std::vector<geom::Vec3> points;  // canonical frame
  int source_frames = 0;
  bool aggregated = false;  // built from >=1 cropped observation
  bool mirrored = false;    // lateral mirror appended
  bool matched = false;     // merged points from a library donor
};

// One frame's crop of a tracked object; points are world-frame and must lie
// inside the stored box.
struct TrackedObservation {
  int frame_id = 0;
  std::uint64_t object_id = 0;
  int class_id = 0;
  geom::Box3D box;
  std::vector<geom::Vec3> points;
};

// Deduplication cell edge; ~2 cm sits below sensor noise scale.
inline constexpr double kDedupCell = 0.02;

// Keeps the first point landing in each dedup voxel, in input order.
std::vector<geom::Vec3> dedup_points(const std::vector<geom::Vec3>& points, double cell);

// Throws unless every template point is inside the dims box (tolerance 1e-6)
// and the template is non-empty.
void check_template(const DenseObjectTemplate& t);

// Canonical-transforms each observation's points into its own box frame and
// unions them, processing frames in ascending frame-id order before dedup.
// Template dims are the per-axis max over the observations' boxes.
DenseObjectTemplate aggregate_by_id(const std::vector<TrackedObservation>& observations,
                                    double dedup_cell = kDedupCell);

// Appends the lateral mirror (y -> -y) of every point and dedups. Classes not
// in `symmetric_classes` pass through unchanged with `mirrored` still false.
DenseObjectTemplate mirror_symmetric(const DenseObjectTemplate& t,
                                     const std::vector<int>& symmetric_classes,
                                     double dedup_cell = kDedupCell);

// Ranks library entries with all dims within 10% of the target's by one-sided
// Chamfer (target points -> candidate points scaled to the target's dims) and
// merges the best `k` donors' scaled points. No compatible donor: unchanged
// with `matched` false.
DenseObjectTemplate best_match_complete(const DenseObjectTemplate& sparse,
                                        const std::vector<DenseObjectTemplate>& library, int k,
                                        double dedup_cell = kDedupCell);

struct DatabaseOptions {
  std::vector<int> symmetric_classes{0, 2};  // mirrored classes (car, cyclist)
  int density_threshold = 64;  // templates below this point count get best-match completion
  int merge_candidates = 1;    // donors merged per sparse template
  double dedup_cell = kDedupCell;
};

// Groups observations by object id (ascending), aggregates each track, mirrors
// eligible classes, then completes every template still under the density
// threshold from the library of templates at or above it.
std::vector<DenseObjectTemplate> build_gt_database(
    const std::vector<TrackedObservation>& observations, const DatabaseOptions& opts);

// Store layout: one "<class_name>.dgtb" per class present. File: magic "DGTB",
// u32 version, u32 object count, then per object: id u64, class u8, dims 3xf32,
// point count u32, points as 3xf32 rows. Little-endian throughout.
// Returns one message per class file that failed to write; writing continues
// past failures.
std::vector<std::string> save_template_store(const std::string& dir,
                                             const std::vector<DenseObjectTemplate>& templates,
                                             const std::vector<std::string>& class_names);

// Loads every *.dgtb file in the directory; templates come back sorted by
// object id. Provenance flags are not persisted: loaded templates report
// aggregated=true, mirrored=false, matched=false.
std::vector<DenseObjectTemplate> load_template_store(const std::string& dir);

}  // namespace pointforge::densify
