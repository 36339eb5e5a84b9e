#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "pointforge/nn.hpp"
#include "pointforge/pointcloud.hpp"
#include "pointforge/rng.hpp"

using namespace pointforge;
using geom::Vec3;

namespace {

pc::PointCloud cloud_from(std::vector<Vec3> coords) {
  pc::PointCloud out;
  out.coords = std::move(coords);
  out.feature_width = 1;
  out.features.assign(out.coords.size(), 0.5);
  return out;
}

double d2(const Vec3& a, const Vec3& b) {
  return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z);
}

}  // namespace

TEST_CASE("voxelize: corner point, floor indexing, per-voxel means") {
  pc::RangeSpec range{{0, -40, -3}, {70.4, 40, 1}};
  const Vec3 size{0.05, 0.05, 0.1};

  pc::VoxelGrid g1 = pc::voxelize(cloud_from({{1e-9, -40 + 1e-9, -3 + 1e-9}}), range, size);
  REQUIRE(g1.voxels.size() == 1);
  CHECK(g1.voxels[0].index == std::array<int, 3>{0, 0, 0});
  CHECK(g1.voxels[0].mean_coords.x == doctest::Approx(1e-9));
  CHECK(g1.voxels[0].count == 1);

  pc::VoxelGrid g2 = pc::voxelize(cloud_from({{0.12, -0.02, 0.35}}), range, size);
  REQUIRE(g2.voxels.size() == 1);
  CHECK(g2.voxels[0].index == std::array<int, 3>{2, 799, 33});

  pc::PointCloud two = cloud_from({{0.51, 0.01, 0.01}, {0.53, 0.02, 0.05}});
  two.features = {0.2, 0.8};
  pc::VoxelGrid g3 = pc::voxelize(two, range, size);
  REQUIRE(g3.voxels.size() == 1);
  CHECK(g3.voxels[0].count == 2);
  CHECK(g3.voxels[0].mean_coords.x == doctest::Approx(0.52));
  CHECK(g3.voxels[0].mean_features[0] == doctest::Approx(0.5));
  CHECK(g3.voxels[0].point_rows == std::vector<int>{0, 1});
}

TEST_CASE("voxelize drops out-of-range points and preserves in-range counts") {
  pc::RangeSpec range{{0, -10, -2}, {20, 10, 2}};
  Rng rng(8);
  std::vector<Vec3> coords;
  int in_range = 0;
  for (int i = 0; i < 500; ++i) {
    Vec3 p{rng.uniform(-5, 25), rng.uniform(-15, 15), rng.uniform(-4, 4)};
    coords.push_back(p);
    if (range.contains(p)) ++in_range;
  }
  pc::VoxelGrid grid = pc::voxelize(cloud_from(coords), range, {0.5, 0.5, 0.5});
  int counted = 0;
  for (const auto& v : grid.voxels) {
    CHECK(v.count >= 1);
    CHECK(v.count == static_cast<int>(v.point_rows.size()));
    CHECK(v.index[0] >= 0);
    CHECK(v.index[0] < grid.extents[0]);
    CHECK(v.index[1] < grid.extents[1]);
    CHECK(v.index[2] < grid.extents[2]);
    counted += v.count;
  }
  CHECK(counted == in_range);

  // exact-boundary point at max is outside the half-open range
  pc::VoxelGrid edge = pc::voxelize(cloud_from({{20.0, 0, 0}}), range, {0.5, 0.5, 0.5});
  CHECK(edge.voxels.empty());
}

TEST_CASE("voxel lookup finds occupied cells") {
  pc::RangeSpec range{{0, 0, 0}, {4, 4, 4}};
  pc::VoxelGrid grid = pc::voxelize(cloud_from({{0.5, 1.5, 2.5}, {3.5, 3.5, 3.5}}), range,
                                    {1, 1, 1});
  CHECK(grid.find(0, 1, 2) == 0);
  CHECK(grid.find(3, 3, 3) == 1);
  CHECK(grid.find(1, 1, 1) == -1);
  CHECK(grid.find(-1, 0, 0) == -1);
  CHECK(grid.find(4, 0, 0) == -1);
}

TEST_CASE("fps: full set, collinear trace, and rejection") {
  std::vector<Vec3> collinear{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {10, 0, 0}};
  auto picks = pc::farthest_point_sample(collinear, 2, 0);
  CHECK(picks == std::vector<int>{0, 3});

  auto all = pc::farthest_point_sample(collinear, 4, 1);
  std::vector<int> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>{0, 1, 2, 3});

  CHECK_THROWS(pc::farthest_point_sample(collinear, 5, 0));
  CHECK_THROWS(pc::farthest_point_sample(collinear, 1, 7));
}

TEST_CASE("fps matches a naive recompute-from-scratch oracle exactly") {
  Rng rng(321);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> pts;
    const int n = 40 + trial * 17;
    for (int i = 0; i < n; ++i)
      pts.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-2, 2)});
    const int k = 1 + static_cast<int>(rng.uniform(1, n));
    const int start = static_cast<int>(rng.uniform(0, n));

    // oracle: each round, recompute every candidate's distance to the whole
    // selected set from scratch (no incremental update)
    std::vector<int> sel{start};
    while (static_cast<int>(sel.size()) < k) {
      int best_i = -1;
      double best_d = -1;
      for (int i = 0; i < n; ++i) {
        double d = std::numeric_limits<double>::infinity();
        for (int s : sel) d = std::min(d, d2(pts[i], pts[s]));
        if (d > best_d) {
          best_d = d;
          best_i = i;
        }
      }
      sel.push_back(best_i);
    }
    CHECK(pc::farthest_point_sample(pts, k, start) == sel);
  }
}

TEST_CASE("fps max-min distances decrease monotonically") {
  Rng rng(654);
  std::vector<Vec3> pts;
  for (int i = 0; i < 60; ++i)
    pts.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-2, 2)});
  auto picks = pc::farthest_point_sample(pts, 20, 0);
  double prev = std::numeric_limits<double>::infinity();
  for (size_t r = 1; r < picks.size(); ++r) {
    double d = std::numeric_limits<double>::infinity();
    for (size_t s = 0; s < r; ++s) d = std::min(d, d2(pts[picks[r]], pts[picks[s]]));
    CHECK(d < prev);
    prev = d;
  }
}

TEST_CASE("chamfer distance hand values") {
  std::vector<Vec3> a{{0, 0, 0}};
  std::vector<Vec3> b{{1, 0, 0}};
  CHECK(pc::chamfer_distance(a, a) == 0.0);
  CHECK(pc::chamfer_distance(a, b) == doctest::Approx(2.0));

  std::vector<Vec3> c{{0, 0, 0}, {1, 0, 0}};
  CHECK(pc::chamfer_distance(c, a) == doctest::Approx(0.5));
  CHECK(pc::chamfer_one_sided(c, a) == doctest::Approx(0.5));
  CHECK(pc::chamfer_one_sided(a, c) == doctest::Approx(0.0));
  CHECK_THROWS(pc::chamfer_distance(a, {}));
}

namespace {

// oracle with swapped loop nesting: one pass over all pairs, tracking both
// sides' running minima
double chamfer_oracle(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2) {
  std::vector<double> best1(s1.size(), std::numeric_limits<double>::infinity());
  std::vector<double> best2(s2.size(), std::numeric_limits<double>::infinity());
  for (size_t j = 0; j < s2.size(); ++j)
    for (size_t i = 0; i < s1.size(); ++i) {
      const double d = d2(s1[i], s2[j]);
      best1[i] = std::min(best1[i], d);
      best2[j] = std::min(best2[j], d);
    }
  double t1 = 0, t2 = 0;
  for (double d : best1) t1 += d;
  for (double d : best2) t2 += d;
  return t1 / s1.size() + t2 / s2.size();
}

}  // namespace

TEST_CASE("chamfer symmetry, translation invariance, and the swapped-loop oracle") {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Vec3> a, b;
    for (int i = 0; i < 15 + trial; ++i)
      a.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1, 1)});
    for (int i = 0; i < 9 + trial; ++i)
      b.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1, 1)});
    const double d = pc::chamfer_distance(a, b);
    CHECK(d >= 0.0);
    CHECK(pc::chamfer_distance(b, a) == doctest::Approx(d).epsilon(1e-15));
    CHECK(std::abs(d - chamfer_oracle(a, b)) <= 1e-12);

    const Vec3 t{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    std::vector<Vec3> at, bt;
    for (const Vec3& p : a) at.push_back(p + t);
    for (const Vec3& p : b) bt.push_back(p + t);
    CHECK(std::abs(pc::chamfer_distance(at, bt) - d) < 1e-12);
  }
}

TEST_CASE("differentiable chamfer matches the plain value and its finite differences") {
  Rng rng(44);
  std::vector<Vec3> s2;
  for (int i = 0; i < 7; ++i)
    s2.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1)});
  std::vector<double> s1_data;
  std::vector<Vec3> s1_pts;
  for (int i = 0; i < 5; ++i) {
    Vec3 p{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1)};
    s1_pts.push_back(p);
    s1_data.insert(s1_data.end(), {p.x, p.y, p.z});
  }
  std::vector<ad::Tensor> inputs{ad::Tensor::matrix(5, 3, s1_data, true)};
  CHECK(pc::chamfer_distance_ad(inputs[0], s2).item() ==
        doctest::Approx(pc::chamfer_distance(s1_pts, s2)).epsilon(1e-14));
  auto f = [&](std::vector<ad::Tensor>& in) { return pc::chamfer_distance_ad(in[0], s2); };
  CHECK(nn::gradcheck(f, inputs) < 1e-4);
}

TEST_CASE("points_in_box: center, inclusive faces, rotation") {
  geom::Box3D box = geom::make_box3d({2, 1, 0}, 4, 2, 1, 0);
  CHECK(pc::point_in_box(box, box.center));
  CHECK(pc::point_in_box(box, {4.0, 1.0, 0.0}));        // +l/2 face, inclusive
  CHECK(pc::point_in_box(box, {2.0, 2.0, 0.5}));        // corner-ish boundary
  CHECK_FALSE(pc::point_in_box(box, {4.01, 1.0, 0.0}));

  // point inside the unrotated footprint but outside after rotation
  geom::Box3D rot = geom::make_box3d({0, 0, 0}, 4, 1, 1, std::numbers::pi / 2);
  CHECK_FALSE(pc::point_in_box(rot, {1.8, 0, 0}));
  CHECK(pc::point_in_box(rot, {0, 1.8, 0}));
}

TEST_CASE("points_in_box agrees with a corner-halfspace oracle") {
  Rng rng(98);
  for (int trial = 0; trial < 10; ++trial) {
    geom::Box3D box = geom::make_box3d(
        {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1)}, rng.uniform(1, 4),
        rng.uniform(1, 3), rng.uniform(0.5, 2), rng.uniform(-4, 4));
    // halfspace oracle built from the corner frame: unit axes from corners
    const auto corners = geom::box3d_corners(box);
    const Vec3 ex = corners[0] - corners[1];  // +l direction, length l
    const Vec3 ey = corners[0] - corners[3];  // +w direction, length w
    const Vec3 ez = corners[4] - corners[0];  // +h direction, length h
    auto inside = [&](const Vec3& p) {
      const Vec3 d = p - box.center;
      const double px = (d.x * ex.x + d.y * ex.y + d.z * ex.z) / box.l;
      const double py = (d.x * ey.x + d.y * ey.y + d.z * ey.z) / box.w;
      const double pz = (d.x * ez.x + d.y * ez.y + d.z * ez.z) / box.h;
      return std::abs(px) <= box.l / 2 + 1e-12 && std::abs(py) <= box.w / 2 + 1e-12 &&
             std::abs(pz) <= box.h / 2 + 1e-12;
    };
    std::vector<Vec3> pts;
    for (int i = 0; i < 200; ++i)
      pts.push_back({box.center.x + rng.uniform(-4, 4), box.center.y + rng.uniform(-4, 4),
                     box.center.z + rng.uniform(-2, 2)});
    auto flags = pc::points_in_box(box, pts);
    int agree = 0;
    for (int i = 0; i < 200; ++i)
      if (flags[i] == inside(pts[i])) ++agree;
    CHECK(agree == 200);
  }
}

TEST_CASE("depth feature is the euclidean norm of raw coordinates") {
  auto d = pc::depth_feature({{3, 4, 0}, {0, 0, 0}, {1, -2, 2}});
  CHECK(d[0] == doctest::Approx(5.0));
  CHECK(d[1] == 0.0);
  CHECK(d[2] == doctest::Approx(3.0));

  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    Vec3 p{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-5, 5)};
    CHECK(pc::depth_feature({p})[0] == doctest::Approx(std::hypot(p.x, p.y, p.z)).epsilon(1e-14));
  }
}

TEST_CASE("cloud validation rejects inconsistent rows") {
  pc::PointCloud bad;
  bad.coords = {{0, 0, 0}};
  bad.feature_width = 2;
  bad.features = {0.5};  // one value, needs two
  CHECK_THROWS(pc::validate_cloud(bad));
}
