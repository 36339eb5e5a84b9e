#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "pointforge/geometry.hpp"
#include "pointforge/tensor.hpp"

// Voxelization, farthest-point sampling, set distances, and per-point
// derived features.
namespace pointforge::pc {

struct PointCloud {
  std::vector<geom::Vec3> coords;
  int feature_width = 1;          // channel 0 = intensity in [0,1]
  std::vector<double> features;   // size() * feature_width, row-major

  int size() const { return static_cast<int>(coords.size()); }
  const double* feature_row(int i) const { return features.data() + static_cast<size_t>(i) * feature_width; }
};

// Throws when rows are inconsistent or coords are non-finite.
void validate_cloud(const PointCloud& pc);

// Half-open per-axis interval [min, max).
struct RangeSpec {
  geom::Vec3 min, max;
  bool contains(const geom::Vec3& p) const {
    return p.x >= min.x && p.x < max.x && p.y >= min.y && p.y < max.y && p.z >= min.z &&
           p.z < max.z;
  }
};

struct Voxel {
  std::array<int, 3> index{};   // (ix, iy, iz)
  geom::Vec3 mean_coords;
  std::vector<double> mean_features;
  int count = 0;
  std::vector<int> point_rows;  // rows of the source cloud that landed here
};

struct VoxelGrid {
  geom::Vec3 origin;            // = range min
  geom::Vec3 voxel_size;
  std::array<int, 3> extents{}; // (nx, ny, nz)
  std::vector<Voxel> voxels;    // ordered by first point arrival

  std::int64_t linear_index(int ix, int iy, int iz) const {
    return (static_cast<std::int64_t>(ix) * extents[1] + iy) * extents[2] + iz;
  }
  // position in voxels, or -1
  int find(int ix, int iy, int iz) const;

  std::unordered_map<std::int64_t, int> lookup;  // linear index -> voxels position
};

VoxelGrid voxelize(const PointCloud& pc, const RangeSpec& range, const geom::Vec3& voxel_size);

// Greedy max-min selection; returns indices in pick order. Deterministic:
// distance ties resolve to the smallest index.
std::vector<int> farthest_point_sample(const std::vector<geom::Vec3>& coords, int k,
                                       int start_index);

// Symmetric mean of squared nearest-neighbor distances (both directions).
double chamfer_distance(const std::vector<geom::Vec3>& s1, const std::vector<geom::Vec3>& s2);

// Differentiable in the first set; s1 is [M,3]. The second set is fixed.
ad::Tensor chamfer_distance_ad(const ad::Tensor& s1, const std::vector<geom::Vec3>& s2);

// One-directional term: mean over s1 of squared distance to nearest s2 point.
double chamfer_one_sided(const std::vector<geom::Vec3>& s1, const std::vector<geom::Vec3>& s2);

// Boundary-inclusive containment in the oriented box (canonical-frame test).
std::vector<bool> points_in_box(const geom::Box3D& box, const std::vector<geom::Vec3>& coords);
bool point_in_box(const geom::Box3D& box, const geom::Vec3& p);
int count_points_in_box(const geom::Box3D& box, const std::vector<geom::Vec3>& coords);

// Euclidean norms of the original (pre-canonical) coordinates.
std::vector<double> depth_feature(const std::vector<geom::Vec3>& coords);

}  // namespace pointforge::pc
