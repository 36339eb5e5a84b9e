#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "model_helpers.hpp"
#include "pointforge/cmff.hpp"

using namespace pointforge;
using mh::axis_calib;

namespace {

pc::PointCloud cloud_of(std::vector<geom::Vec3> pts) {
  pc::PointCloud c;
  c.coords = std::move(pts);
  c.features.assign(c.coords.size(), 0.5);
  return c;
}

}  // namespace

TEST_CASE("make_grid_points subdivides the box") {
  geom::Box3D unit = geom::make_box3d({0, 0, 0}, 1, 1, 1, 0.0);
  SUBCASE("G=1 is the center") {
    auto pts = cmff::make_grid_points(geom::make_box3d({2, -1, 3}, 4, 2, 1, 0.7), 1);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].x == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(pts[0].y == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(pts[0].z == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("G=6 on the unit cube starts at (-5/12,-5/12,-5/12)") {
    auto pts = cmff::make_grid_points(unit, 6);
    REQUIRE(pts.size() == 216);
    CHECK(pts[0].x == doctest::Approx(-5.0 / 12).epsilon(1e-12));
    CHECK(pts[0].y == doctest::Approx(-5.0 / 12).epsilon(1e-12));
    CHECK(pts[0].z == doctest::Approx(-5.0 / 12).epsilon(1e-12));
    // Index layout ((ix*G)+iy)*G+iz: the second point advances z only.
    CHECK(pts[1].x == doctest::Approx(-5.0 / 12).epsilon(1e-12));
    CHECK(pts[1].z == doctest::Approx(-5.0 / 12 + 1.0 / 6).epsilon(1e-12));
  }
  SUBCASE("grid points average to the box center for any yaw") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      geom::Box3D box = geom::make_box3d(
          {rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-2.0, 2.0)},
          rng.uniform(0.5, 4.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.0),
          rng.uniform(-M_PI, M_PI));
      auto pts = cmff::make_grid_points(box, 3);
      geom::Vec3 mean{0, 0, 0};
      for (const auto& p : pts) mean = mean + p;
      mean = (1.0 / pts.size()) * mean;
      CHECK(mean.x == doctest::Approx(box.center.x).epsilon(1e-10));
      CHECK(mean.y == doctest::Approx(box.center.y).epsilon(1e-10));
      CHECK(mean.z == doctest::Approx(box.center.z).epsilon(1e-10));
    }
  }
  SUBCASE("all grid points lie inside the box") {
    geom::Box3D box = geom::make_box3d({1, 2, 0}, 3, 2, 1.5, 1.1);
    for (const auto& p : cmff::make_grid_points(box, 4)) CHECK(pc::point_in_box(box, p));
  }
  SUBCASE("rejects G < 1") { CHECK_THROWS(cmff::make_grid_points(unit, 0)); }
}

TEST_CASE("make_grid_points commutes with rigid motion of the box") {
  Rng rng(9);
  geom::Box3D box = geom::make_box3d({2, 1, -0.5}, 3, 1.5, 1, 0.4);
  const double alpha = rng.uniform(-M_PI, M_PI);
  const geom::Vec3 t{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 1.0)};
  const geom::Mat3 rot = geom::rot_z(alpha);
  geom::Box3D moved = geom::make_box3d(rot.apply(box.center) + t, box.l, box.w, box.h,
                                       geom::wrap_angle(box.yaw + alpha));
  auto grid = cmff::make_grid_points(box, 3);
  auto moved_grid = cmff::make_grid_points(moved, 3);
  for (size_t i = 0; i < grid.size(); ++i) {
    const geom::Vec3 want = rot.apply(grid[i]) + t;
    CHECK(moved_grid[i].x == doctest::Approx(want.x).epsilon(1e-10));
    CHECK(moved_grid[i].y == doctest::Approx(want.y).epsilon(1e-10));
    CHECK(moved_grid[i].z == doctest::Approx(want.z).epsilon(1e-10));
  }
}

TEST_CASE("default_pool_radius is half the subvoxel diagonal") {
  geom::Box3D box = geom::make_box3d({0, 0, 0}, 2, 2, 2, 0.0);
  CHECK(cmff::default_pool_radius(box, 2) == doctest::Approx(0.5 * std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("pool_voxel_features handles empty neighborhoods and exact hits") {
  const pc::RangeSpec range{{0, 0, 0}, {4, 4, 4}};
  pc::VoxelGrid grid = pc::voxelize(cloud_of({{0.5, 0.5, 0.5}}), range, {1, 1, 1});
  ad::Tensor vf = ad::Tensor::matrix(1, 2, {0.3, -0.8});
  nn::MlpSpec spec = nn::MlpSpec::make({5, 3});
  nn::MlpParams mlp = nn::mlp_init(spec, 77);

  SUBCASE("far query gives zeros") {
    ad::Tensor out = cmff::pool_voxel_features(grid, vf, {{3.5, 3.5, 3.5}}, 0.5, 4, spec, mlp);
    REQUIRE(out.rows() == 1);
    for (int j = 0; j < 3; ++j) CHECK(out.at(0, j) == 0.0);
  }
  SUBCASE("query on the voxel mean sees MLP([0; f])") {
    ad::Tensor out = cmff::pool_voxel_features(grid, vf, {{0.5, 0.5, 0.5}}, 0.5, 4, spec, mlp);
    const auto want = mh::mlp_row_oracle(spec, mlp, {0, 0, 0, 0.3, -0.8});
    for (int j = 0; j < 3; ++j) CHECK(out.at(0, j) == doctest::Approx(want[j]).epsilon(1e-12));
  }
  SUBCASE("validation") {
    CHECK_THROWS(cmff::pool_voxel_features(grid, vf, {{1, 1, 1}}, 0.0, 4, spec, mlp));
    CHECK_THROWS(cmff::pool_voxel_features(grid, vf, {{1, 1, 1}}, 0.5, 0, spec, mlp));
  }
}

TEST_CASE("pool_voxel_features matches a naive all-voxel oracle") {
  Rng rng(15);
  const pc::RangeSpec range{{0, 0, 0}, {6, 6, 6}};
  std::vector<geom::Vec3> pts;
  for (int i = 0; i < 120; ++i)
    pts.push_back({rng.uniform(0.0, 6.0), rng.uniform(0.0, 6.0), rng.uniform(0.0, 6.0)});
  pc::VoxelGrid grid = pc::voxelize(cloud_of(pts), range, {0.75, 0.75, 0.75});
  const int nvox = static_cast<int>(grid.voxels.size());
  std::vector<double> vf_data(static_cast<size_t>(nvox) * 2);
  for (double& v : vf_data) v = rng.uniform(-1.0, 1.0);
  ad::Tensor vf = ad::Tensor::matrix(nvox, 2, vf_data);
  nn::MlpSpec spec = nn::MlpSpec::make({5, 6, 3});
  nn::MlpParams mlp = nn::mlp_init(spec, 5);

  std::vector<geom::Vec3> queries;
  for (int i = 0; i < 25; ++i)
    queries.push_back({rng.uniform(-0.5, 6.5), rng.uniform(-0.5, 6.5), rng.uniform(-0.5, 6.5)});
  const double radius = 1.1;
  const int k = 4;
  ad::Tensor out = cmff::pool_voxel_features(grid, vf, queries, radius, k, spec, mlp);
  REQUIRE(out.rows() == 25);

  for (size_t q = 0; q < queries.size(); ++q) {
    std::vector<std::pair<double, int>> near;
    for (int v = 0; v < nvox; ++v) {
      const geom::Vec3 d = grid.voxels[v].mean_coords - queries[q];
      const double d2 = d.x * d.x + d.y * d.y + d.z * d.z;
      if (d2 <= radius * radius) near.emplace_back(d2, v);
    }
    std::sort(near.begin(), near.end());
    if (static_cast<int>(near.size()) > k) near.resize(k);
    std::vector<double> best(3, 0.0);
    bool first = true;
    for (const auto& [d2, v] : near) {
      const geom::Vec3 d = grid.voxels[v].mean_coords - queries[q];
      const auto row =
          mh::mlp_row_oracle(spec, mlp, {d.x, d.y, d.z, vf_data[2 * v], vf_data[2 * v + 1]});
      if (first) best = row;
      else
        for (int j = 0; j < 3; ++j) best[j] = std::max(best[j], row[j]);
      first = false;
    }
    for (int j = 0; j < 3; ++j)
      CHECK(out.at(static_cast<int>(q), j) == doctest::Approx(best[j]).epsilon(1e-12));
  }
}

TEST_CASE("pool_voxel_features ignores voxel storage order") {
  Rng rng(19);
  const pc::RangeSpec range{{0, 0, 0}, {4, 4, 4}};
  std::vector<geom::Vec3> pts;
  for (int i = 0; i < 40; ++i)
    pts.push_back({rng.uniform(0.0, 4.0), rng.uniform(0.0, 4.0), rng.uniform(0.0, 4.0)});
  pc::VoxelGrid grid = pc::voxelize(cloud_of(pts), range, {1, 1, 1});
  const int nvox = static_cast<int>(grid.voxels.size());
  REQUIRE(nvox >= 4);
  std::vector<double> vf_data(static_cast<size_t>(nvox) * 2);
  for (double& v : vf_data) v = rng.uniform(-1.0, 1.0);

  // Same voxels stored in reverse order, lookup rebuilt to match.
  pc::VoxelGrid reversed = grid;
  std::reverse(reversed.voxels.begin(), reversed.voxels.end());
  reversed.lookup.clear();
  for (int v = 0; v < nvox; ++v) {
    const auto& ix = reversed.voxels[v].index;
    reversed.lookup[reversed.linear_index(ix[0], ix[1], ix[2])] = v;
  }
  std::vector<double> vf_rev(vf_data.size());
  for (int v = 0; v < nvox; ++v)
    for (int j = 0; j < 2; ++j) vf_rev[2 * v + j] = vf_data[2 * (nvox - 1 - v) + j];

  nn::MlpSpec spec = nn::MlpSpec::make({5, 4, 3});
  nn::MlpParams mlp = nn::mlp_init(spec, 41);
  std::vector<geom::Vec3> queries{{1.2, 1.1, 0.9}, {2.7, 3.2, 2.5}, {0.4, 3.6, 1.8}};
  ad::Tensor a = cmff::pool_voxel_features(grid, ad::Tensor::matrix(nvox, 2, vf_data), queries,
                                           1.4, 6, spec, mlp);
  ad::Tensor b = cmff::pool_voxel_features(reversed, ad::Tensor::matrix(nvox, 2, vf_rev), queries,
                                           1.4, 6, spec, mlp);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      CHECK(a.at(i, j) == doctest::Approx(b.at(i, j)).epsilon(1e-12));
}

TEST_CASE("grid_image_features samples per point like bilinear_sample") {
  Rng rng(23);
  const geom::CameraCalibration calib = axis_calib(10.0, 7.0, 5.0);
  img::FeatureMap fm = mh::random_fm(3, 5, 7, 2.0, 31);
  std::vector<geom::Vec3> pts;
  for (int i = 0; i < 30; ++i)
    pts.push_back({rng.uniform(-2.0, 8.0), rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)});
  std::vector<bool> mask;
  ad::Tensor fi = cmff::grid_image_features(pts, fm, calib, &mask);
  REQUIRE(fi.rows() == 30);
  REQUIRE(fi.cols() == 3);
  for (int i = 0; i < 30; ++i) {
    geom::ProjectedPoint pp = geom::project_point(calib, pts[i]);
    std::vector<double> want(3, 0.0);
    bool vis = false;
    if (pp.in_view) {
      want = img::bilinear_sample(fm, pp.u, pp.v, &vis);
      if (!vis) want.assign(3, 0.0);
    }
    CHECK(mask[i] == vis);
    for (int j = 0; j < 3; ++j) CHECK(fi.at(i, j) == doctest::Approx(want[j]).epsilon(1e-12));
  }
}

TEST_CASE("roi_image_feature zeroes invisible boxes and is constant on constant maps") {
  const geom::CameraCalibration calib = axis_calib(5.0, 8.0, 6.0);
  img::FeatureMap fm = img::make_feature_map(2, 6, 8, 2.0, std::vector<double>(96, 0.0));
  for (int i = 0; i < 48; ++i) fm.data.mutable_value()[i] = 0.4;
  for (int i = 48; i < 96; ++i) fm.data.mutable_value()[i] = -0.2;
  const int S = 2;
  nn::MlpSpec spec = nn::MlpSpec::make({S * S * 2, 3});
  nn::MlpParams mlp = nn::mlp_init(spec, 10);

  geom::Box3D behind = geom::make_box3d({-6, 0, 0}, 2, 2, 1, 0.0);
  ad::Tensor zero = cmff::roi_image_feature(behind, fm, calib, 1.2, S, 2, spec, mlp);
  REQUIRE(zero.rows() == 1);
  for (int j = 0; j < 3; ++j) CHECK(zero.at(0, j) == 0.0);

  geom::Box3D near = geom::make_box3d({4, 0, 0}, 1.5, 1.5, 1, 0.3);
  geom::Box3D far = geom::make_box3d({7, 0.5, 0.2}, 2, 1, 1, -0.5);
  ad::Tensor a = cmff::roi_image_feature(near, fm, calib, 1.2, S, 2, spec, mlp);
  ad::Tensor b = cmff::roi_image_feature(far, fm, calib, 1.2, S, 2, spec, mlp);
  for (int j = 0; j < 3; ++j) CHECK(a.at(0, j) == doctest::Approx(b.at(0, j)).epsilon(1e-12));
}

TEST_CASE("roi_image_feature equals the chained projection/align/mlp oracle") {
  const geom::CameraCalibration calib = axis_calib(9.0, 8.0, 6.0);
  img::FeatureMap fm = mh::random_fm(2, 6, 8, 2.0, 47);
  const int S = 3;
  nn::MlpSpec spec = nn::MlpSpec::make({S * S * 2, 5, 4});
  nn::MlpParams mlp = nn::mlp_init(spec, 13);
  geom::Box3D box = geom::make_box3d({5, 0.4, -0.2}, 2.5, 1.5, 1.2, 0.7);

  ad::Tensor got = cmff::roi_image_feature(box, fm, calib, 1.5, S, 2, spec, mlp);

  geom::Box2DResult pr = geom::corners_to_box2d(calib, box);
  REQUIRE(pr.visible);
  geom::Box2D roi = geom::enlarge_box2d(pr.box, 1.5, fm.image_width(), fm.image_height());
  ad::Tensor bins = img::roi_align(fm, roi, S, 2);
  std::vector<double> flat;
  for (int r = 0; r < bins.rows(); ++r)
    for (int c = 0; c < bins.cols(); ++c) flat.push_back(bins.at(r, c));
  const auto want = mh::mlp_row_oracle(spec, mlp, flat);
  for (int j = 0; j < 4; ++j) CHECK(got.at(0, j) == doctest::Approx(want[j]).epsilon(1e-12));
}

TEST_CASE("fuse concatenates per row with the RoI vector broadcast") {
  ad::Tensor fv = ad::Tensor::matrix(2, 2, {1, 2, 3, 4});
  ad::Tensor fi = ad::Tensor::matrix(2, 1, {5, 6});
  ad::Tensor fb = ad::Tensor::matrix(1, 2, {7, 8});
  nn::MlpSpec spec = nn::MlpSpec::make({5, 5});
  SUBCASE("identity mlp passes the concatenation through") {
    std::vector<double> eye(25, 0.0);
    for (int i = 0; i < 5; ++i) eye[static_cast<size_t>(i) * 5 + i] = 1.0;
    ad::Tensor out = cmff::fuse(fv, fi, fb, spec, mh::linear_params(5, 5, eye, {0, 0, 0, 0, 0}));
    const std::vector<double> want{1, 2, 5, 7, 8, 3, 4, 6, 7, 8};
    for (int i = 0; i < 10; ++i)
      CHECK(out.value()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  SUBCASE("random weights match the row oracle") {
    nn::MlpSpec deep = nn::MlpSpec::make({5, 6, 3});
    nn::MlpParams mlp = nn::mlp_init(deep, 21);
    ad::Tensor out = cmff::fuse(fv, fi, fb, deep, mlp);
    const auto r0 = mh::mlp_row_oracle(deep, mlp, {1, 2, 5, 7, 8});
    const auto r1 = mh::mlp_row_oracle(deep, mlp, {3, 4, 6, 7, 8});
    for (int j = 0; j < 3; ++j) {
      CHECK(out.at(0, j) == doctest::Approx(r0[j]).epsilon(1e-12));
      CHECK(out.at(1, j) == doctest::Approx(r1[j]).epsilon(1e-12));
    }
  }
  SUBCASE("zero image inputs leave a pure LiDAR path") {
    nn::MlpSpec deep = nn::MlpSpec::make({5, 6, 3});
    nn::MlpParams mlp = nn::mlp_init(deep, 22);
    ad::Tensor out = cmff::fuse(fv, ad::Tensor::zeros({2, 1}), ad::Tensor::zeros({1, 2}), deep, mlp);
    const auto r0 = mh::mlp_row_oracle(deep, mlp, {1, 2, 0, 0, 0});
    for (int j = 0; j < 3; ++j) CHECK(out.at(0, j) == doctest::Approx(r0[j]).epsilon(1e-12));
  }
  SUBCASE("width mismatch is rejected") {
    nn::MlpSpec bad = nn::MlpSpec::make({4, 3});
    CHECK_THROWS(cmff::fuse(fv, fi, fb, bad, nn::mlp_init(bad, 1)));
  }
}

TEST_CASE("fusion path differentiates into voxel features and the feature map") {
  Rng rng(55);
  const geom::CameraCalibration calib = axis_calib(8.0, 6.0, 5.0);
  const pc::RangeSpec range{{0, -3, -2}, {8, 3, 2}};
  std::vector<geom::Vec3> pts;
  for (int i = 0; i < 25; ++i)
    pts.push_back({rng.uniform(2.0, 6.0), rng.uniform(-1.5, 1.5), rng.uniform(-1.0, 1.0)});
  pc::VoxelGrid grid = pc::voxelize(cloud_of(pts), range, {0.5, 0.5, 0.5});
  const int nvox = static_cast<int>(grid.voxels.size());
  std::vector<double> vf(static_cast<size_t>(nvox) * 2);
  for (double& v : vf) v = rng.uniform(-1.0, 1.0);
  img::FeatureMap fm = mh::random_fm(2, 5, 6, 2.0, 61, /*requires_grad=*/true);

  geom::Box3D box = geom::make_box3d({4, 0, 0}, 2.5, 1.8, 1.4, 0.3);
  auto gp = cmff::make_grid_points(box, 2);
  nn::MlpSpec pool_spec = nn::MlpSpec::make({5, 4});
  nn::MlpParams pool_mlp = nn::mlp_init(pool_spec, 71);
  const int S = 2;
  nn::MlpSpec roi_spec = nn::MlpSpec::make({S * S * 2, 3});
  nn::MlpParams roi_mlp = nn::mlp_init(roi_spec, 72);
  nn::MlpSpec fuse_spec = nn::MlpSpec::make({4 + 2 + 3, 4});
  nn::MlpParams fuse_mlp = nn::mlp_init(fuse_spec, 73);

  std::vector<ad::Tensor> inputs{ad::Tensor::matrix(nvox, 2, vf, true), fm.data};
  mh::append_params(inputs, fuse_mlp);
  auto f = [&](std::vector<ad::Tensor>& in) {
    ad::Tensor fvn =
        cmff::pool_voxel_features(grid, in[0], gp, cmff::default_pool_radius(box, 2) * 2.0, 3,
                                  pool_spec, pool_mlp);
    ad::Tensor fi = cmff::grid_image_features(gp, fm, calib);
    ad::Tensor fb = cmff::roi_image_feature(box, fm, calib, 1.3, S, 2, roi_spec, roi_mlp);
    return ad::sum(cmff::fuse(fvn, fi, fb, fuse_spec, fuse_mlp));
  };
  CHECK(nn::gradcheck(f, inputs) < 1e-5);
}
