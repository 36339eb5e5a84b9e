#include "pointforge/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pointforge::pc {

void validate_cloud(const PointCloud& pc) {
  if (pc.feature_width < 1) throw std::invalid_argument("point cloud: feature width must be >= 1");
  if (pc.features.size() != pc.coords.size() * static_cast<size_t>(pc.feature_width))
    throw std::invalid_argument("point cloud: feature rows do not match coords rows");
  for (const geom::Vec3& p : pc.coords)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw std::invalid_argument("point cloud: non-finite coordinate");
}

int VoxelGrid::find(int ix, int iy, int iz) const {
  if (ix < 0 || iy < 0 || iz < 0 || ix >= extents[0] || iy >= extents[1] || iz >= extents[2])
    return -1;
  auto it = lookup.find(linear_index(ix, iy, iz));
  return it == lookup.end() ? -1 : it->second;
}

VoxelGrid voxelize(const PointCloud& pc, const RangeSpec& range, const geom::Vec3& voxel_size) {
  if (voxel_size.x <= 0 || voxel_size.y <= 0 || voxel_size.z <= 0)
    throw std::invalid_argument("voxelize: voxel size components must be positive");
  validate_cloud(pc);
  VoxelGrid grid;
  grid.origin = range.min;
  grid.voxel_size = voxel_size;
  grid.extents = {static_cast<int>(std::ceil((range.max.x - range.min.x) / voxel_size.x)),
                  static_cast<int>(std::ceil((range.max.y - range.min.y) / voxel_size.y)),
                  static_cast<int>(std::ceil((range.max.z - range.min.z) / voxel_size.z))};

  for (int i = 0; i < pc.size(); ++i) {
    const geom::Vec3& p = pc.coords[i];
    if (!range.contains(p)) continue;
    const int ix = static_cast<int>(std::floor((p.x - grid.origin.x) / voxel_size.x));
    const int iy = static_cast<int>(std::floor((p.y - grid.origin.y) / voxel_size.y));
    const int iz = static_cast<int>(std::floor((p.z - grid.origin.z) / voxel_size.z));
    if (ix < 0 || iy < 0 || iz < 0 || ix >= grid.extents[0] || iy >= grid.extents[1] ||
        iz >= grid.extents[2])
      continue;  // numeric edge of the half-open range
    const std::int64_t key = grid.linear_index(ix, iy, iz);
    auto it = grid.lookup.find(key);
    int pos;
    if (it == grid.lookup.end()) {
      pos = static_cast<int>(grid.voxels.size());
      grid.lookup.emplace(key, pos);
      Voxel v;
      v.index = {ix, iy, iz};
      v.mean_features.assign(pc.feature_width, 0.0);
      grid.voxels.push_back(std::move(v));
    } else {
      pos = it->second;
    }
    Voxel& v = grid.voxels[pos];
    v.mean_coords = v.mean_coords + p;
    const double* f = pc.feature_row(i);
    for (int k = 0; k < pc.feature_width; ++k) v.mean_features[k] += f[k];
    v.count += 1;
    v.point_rows.push_back(i);
  }
  for (Voxel& v : grid.voxels) {
    v.mean_coords = (1.0 / v.count) * v.mean_coords;
    for (double& f : v.mean_features) f /= v.count;
  }
  return grid;
}

namespace {
double dist2(const geom::Vec3& a, const geom::Vec3& b) {
  const geom::Vec3 d = a - b;
  return d.x * d.x + d.y * d.y + d.z * d.z;
}
}  // namespace

std::vector<int> farthest_point_sample(const std::vector<geom::Vec3>& coords, int k,
                                       int start_index) {
  const int n = static_cast<int>(coords.size());
  if (k < 1 || k > n)
    throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  if (start_index < 0 || start_index >= n)
    throw std::invalid_argument("farthest_point_sample: start index out of range");
  std::vector<int> picks;
  picks.reserve(k);
  picks.push_back(start_index);
  std::vector<double> best(n);
  for (int i = 0; i < n; ++i) best[i] = dist2(coords[i], coords[start_index]);
  for (int round = 1; round < k; ++round) {
    int next = 0;
    double far = -1.0;
    for (int i = 0; i < n; ++i) {
      if (best[i] > far) {  // strict: ties keep the smaller index
        far = best[i];
        next = i;
      }
    }
    picks.push_back(next);
    for (int i = 0; i < n; ++i) best[i] = std::min(best[i], dist2(coords[i], coords[next]));
  }
  return picks;
}

double chamfer_one_sided(const std::vector<geom::Vec3>& s1, const std::vector<geom::Vec3>& s2) {
  if (s1.empty() || s2.empty())
    throw std::invalid_argument("chamfer: point sets must be non-empty");
  double total = 0;
  for (const geom::Vec3& p : s1) {
    double best = std::numeric_limits<double>::infinity();
    for (const geom::Vec3& q : s2) best = std::min(best, dist2(p, q));
    total += best;
  }
  return total / static_cast<double>(s1.size());
}

double chamfer_distance(const std::vector<geom::Vec3>& s1, const std::vector<geom::Vec3>& s2) {
  return chamfer_one_sided(s1, s2) + chamfer_one_sided(s2, s1);
}

ad::Tensor chamfer_distance_ad(const ad::Tensor& s1, const std::vector<geom::Vec3>& s2) {
  if (s1.ndim() != 2 || s1.cols() != 3)
    throw std::invalid_argument("chamfer: first set must be [M,3]");
  const int m = s1.rows();
  const int k = static_cast<int>(s2.size());
  if (m < 1 || k < 1) throw std::invalid_argument("chamfer: point sets must be non-empty");
  const auto& v = s1.value();

  std::vector<int> nn1(m);       // for each s1 row, nearest s2 index
  std::vector<int> nn2(k);       // for each s2 point, nearest s1 row
  double term1 = 0;
  for (int i = 0; i < m; ++i) {
    const geom::Vec3 p{v[i * 3], v[i * 3 + 1], v[i * 3 + 2]};
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) {
      const double d = dist2(p, s2[j]);
      if (d < best) {
        best = d;
        nn1[i] = j;
      }
    }
    term1 += best;
  }
  double term2 = 0;
  for (int j = 0; j < k; ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
      const geom::Vec3 p{v[i * 3], v[i * 3 + 1], v[i * 3 + 2]};
      const double d = dist2(p, s2[j]);
      if (d < best) {
        best = d;
        nn2[j] = i;
      }
    }
    term2 += best;
  }
  const double value = term1 / m + term2 / k;

  auto* si = s1.impl().get();
  return ad::make_op(
      {}, {value}, {s1},
      [si, s2, nn1 = std::move(nn1), nn2 = std::move(nn2), m, k](ad::TensorImpl& self) {
        if (!si->requires_grad) return;
        si->ensure_grad();
        const double g = self.grad[0];
        for (int i = 0; i < m; ++i) {
          const geom::Vec3& q = s2[nn1[i]];
          si->grad[i * 3 + 0] += g * 2.0 / m * (si->value[i * 3 + 0] - q.x);
          si->grad[i * 3 + 1] += g * 2.0 / m * (si->value[i * 3 + 1] - q.y);
          si->grad[i * 3 + 2] += g * 2.0 / m * (si->value[i * 3 + 2] - q.z);
        }
        for (int j = 0; j < k; ++j) {
          const int i = nn2[j];
          si->grad[i * 3 + 0] += g * 2.0 / k * (si->value[i * 3 + 0] - s2[j].x);
          si->grad[i * 3 + 1] += g * 2.0 / k * (si->value[i * 3 + 1] - s2[j].y);
          si->grad[i * 3 + 2] += g * 2.0 / k * (si->value[i * 3 + 2] - s2[j].z);
        }
      });
}

bool point_in_box(const geom::Box3D& box, const geom::Vec3& p) {
  const geom::Vec3 c = geom::canonical_transform(box, p);
  return std::abs(c.x) <= box.l / 2 && std::abs(c.y) <= box.w / 2 && std::abs(c.z) <= box.h / 2;
}

std::vector<bool> points_in_box(const geom::Box3D& box, const std::vector<geom::Vec3>& coords) {
  std::vector<bool> out(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) out[i] = point_in_box(box, coords[i]);
  return out;
}

int count_points_in_box(const geom::Box3D& box, const std::vector<geom::Vec3>& coords) {
  int n = 0;
  for (const geom::Vec3& p : coords)
    if (point_in_box(box, p)) ++n;
  return n;
}

std::vector<double> depth_feature(const std::vector<geom::Vec3>& coords) {
  std::vector<double> out(coords.size());
  for (size_t i = 0; i < coords.size(); ++i) {
    const geom::Vec3& p = coords[i];
    out[i] = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
  }
  return out;
}

}  // namespace pointforge::pc
