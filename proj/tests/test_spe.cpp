#include <cmath>
#include <vector>

#include "doctest.h"
#include "model_helpers.hpp"
#include "pointforge/spe.hpp"

using namespace pointforge;
using mh::axis_calib;

namespace {

pc::PointCloud make_cloud(std::vector<geom::Vec3> coords, std::vector<double> features,
                          int width) {
  pc::PointCloud cloud;
  cloud.coords = std::move(coords);
  cloud.feature_width = width;
  cloud.features = std::move(features);
  return cloud;
}

}  // namespace

TEST_CASE("decorate passes point features through when nothing is visible") {
  // Points behind the camera; reducer keeps the two point channels.
  auto cloud = make_cloud({{-3.0, 0.2, 0.1}, {-1.0, -0.5, 0.3}}, {0.2, 5.0, 0.9, -1.0}, 2);
  img::FeatureMap fm = mh::random_fm(3, 4, 5, 2.0, 11);
  nn::MlpSpec spec = nn::MlpSpec::make({5, 2});
  nn::MlpParams reducer = mh::pick_columns(5, 2, 0);

  spe::DecoratedPoints dec = spe::decorate(cloud, fm, axis_calib(10, 5, 4), spec, reducer);
  REQUIRE(dec.features.rows() == 2);
  CHECK(dec.in_view == std::vector<bool>{false, false});
  CHECK(dec.features.at(0, 0) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(dec.features.at(0, 1) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(dec.features.at(1, 0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(dec.features.at(1, 1) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("decorate gives every visible point the same image half on a constant map") {
  img::FeatureMap fm = img::make_feature_map(2, 3, 4, 2.0, std::vector<double>(24, 0.0));
  for (int i = 0; i < 12; ++i) fm.data.mutable_value()[i] = 0.7;          // channel 0
  for (int i = 12; i < 24; ++i) fm.data.mutable_value()[i] = -0.3;        // channel 1
  auto cloud = make_cloud({{2.0, 0.1, -0.1}, {5.0, -0.4, 0.2}, {3.0, 0.0, 0.0}},
                          {0.1, 0.2, 0.3}, 1);
  nn::MlpSpec spec = nn::MlpSpec::make({3, 2});
  nn::MlpParams reducer = mh::pick_columns(3, 2, 1);  // expose the image half

  spe::DecoratedPoints dec = spe::decorate(cloud, fm, axis_calib(4, 3, 2), spec, reducer);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(dec.in_view[i]);
    CHECK(dec.features.at(i, 0) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(dec.features.at(i, 1) == doctest::Approx(-0.3).epsilon(1e-12));
  }
}

TEST_CASE("decorate matches the project-sample-concat-mlp pipeline per point") {
  Rng rng(42);
  const geom::CameraCalibration calib = axis_calib(12.0, 8.0, 6.0);
  img::FeatureMap fm = mh::random_fm(3, 5, 6, 2.0, 7);
  const int n = 40, fw = 2;
  std::vector<geom::Vec3> coords;
  std::vector<double> feats;
  for (int i = 0; i < n; ++i) {
    // Mix of visible, off-image, and behind-camera points.
    coords.push_back({rng.uniform(-4.0, 8.0), rng.uniform(-3.0, 3.0), rng.uniform(-2.0, 2.0)});
    feats.push_back(rng.uniform(0.0, 1.0));
    feats.push_back(rng.uniform(-1.0, 1.0));
  }
  auto cloud = make_cloud(coords, feats, fw);
  nn::MlpSpec spec = nn::MlpSpec::make({fw + 3, 6, 4});
  nn::MlpParams reducer = nn::mlp_init(spec, 99);

  spe::DecoratedPoints dec = spe::decorate(cloud, fm, calib, spec, reducer);
  REQUIRE(dec.features.rows() == n);
  REQUIRE(dec.features.cols() == 4);
  for (int i = 0; i < n; ++i) {
    geom::ProjectedPoint pp = geom::project_point(calib, coords[i]);
    std::vector<double> img_half(fm.C, 0.0);
    bool visible = false;
    if (pp.in_view) {
      img_half = img::bilinear_sample(fm, pp.u, pp.v, &visible);
      if (!visible) img_half.assign(fm.C, 0.0);
    }
    CHECK(dec.in_view[i] == visible);
    std::vector<double> row{feats[2 * i], feats[2 * i + 1]};
    row.insert(row.end(), img_half.begin(), img_half.end());
    const std::vector<double> want = mh::mlp_row_oracle(spec, reducer, row);
    for (int j = 0; j < 4; ++j)
      CHECK(dec.features.at(i, j) == doctest::Approx(want[j]).epsilon(1e-12));
  }
}

TEST_CASE("decorate on a zero feature map equals the reducer of [point features; zeros]") {
  auto cloud = make_cloud({{2.0, 0.3, -0.2}, {4.0, -0.6, 0.4}}, {0.5, 0.8}, 1);
  img::FeatureMap fm = img::make_feature_map(2, 3, 4, 1.0, std::vector<double>(24, 0.0));
  nn::MlpSpec spec = nn::MlpSpec::make({3, 5, 3});
  nn::MlpParams reducer = nn::mlp_init(spec, 3);

  spe::DecoratedPoints dec = spe::decorate(cloud, fm, axis_calib(2, 2, 1.5), spec, reducer);
  for (int i = 0; i < 2; ++i) {
    const std::vector<double> want =
        mh::mlp_row_oracle(spec, reducer, {cloud.features[i], 0.0, 0.0});
    for (int j = 0; j < 3; ++j)
      CHECK(dec.features.at(i, j) == doctest::Approx(want[j]).epsilon(1e-12));
  }
}

TEST_CASE("decorate gradient touches only the sampled 4-neighborhoods") {
  const geom::CameraCalibration calib = axis_calib(6.0, 4.0, 3.0);
  img::FeatureMap fm = mh::random_fm(2, 5, 8, 1.0, 21, /*requires_grad=*/true);
  auto cloud = make_cloud({{2.0, 0.4, -0.3}, {3.0, -0.8, 0.5}}, {0.3, 0.6}, 1);
  nn::MlpSpec spec = nn::MlpSpec::make({3, 2});
  nn::MlpParams reducer =
      mh::linear_params(3, 2, {1, 1, 1, 1, 1, 1}, {0, 0});

  spe::DecoratedPoints dec = spe::decorate(cloud, fm, calib, spec, reducer);
  ad::backward(ad::sum(dec.features));
  REQUIRE(fm.data.has_grad());

  std::vector<bool> allowed(fm.data.numel(), false);
  int marked = 0;
  for (int i = 0; i < 2; ++i) {
    geom::ProjectedPoint pp = geom::project_point(calib, cloud.coords[i]);
    REQUIRE(pp.in_view);
    const int x0 = std::min(std::max(0, static_cast<int>(std::floor(pp.u / fm.stride))), fm.W - 2);
    const int y0 = std::min(std::max(0, static_cast<int>(std::floor(pp.v / fm.stride))), fm.H - 2);
    for (int c = 0; c < fm.C; ++c)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          allowed[(c * fm.H + y0 + dy) * fm.W + x0 + dx] = true;
          ++marked;
        }
  }
  REQUIRE(marked > 0);
  bool any_nonzero = false;
  for (int i = 0; i < fm.data.numel(); ++i) {
    if (!allowed[i]) CHECK(fm.data.grad()[i] == 0.0);
    else if (fm.data.grad()[i] != 0.0) any_nonzero = true;
  }
  CHECK(any_nonzero);
}

TEST_CASE("decorate rejects invalid calibration and wrong reducer width") {
  auto cloud = make_cloud({{2.0, 0.0, 0.0}}, {0.5}, 1);
  img::FeatureMap fm = mh::random_fm(2, 3, 3, 1.0, 5);
  nn::MlpSpec bad = nn::MlpSpec::make({7, 2});
  CHECK_THROWS(spe::decorate(cloud, fm, axis_calib(2, 1, 1), bad, nn::mlp_init(bad, 1)));
  geom::CameraCalibration broken = axis_calib(2, 1, 1);
  broken.R0.m[0] = 3.0;
  nn::MlpSpec good = nn::MlpSpec::make({3, 2});
  CHECK_THROWS(spe::decorate(cloud, fm, broken, good, nn::mlp_init(good, 1)));
}

TEST_CASE("decorate_generated hits stored features at cell-aligned projections") {
  const double f = 5.0, cu = 4.0, cv = 3.0, stride = 2.0;
  const geom::CameraCalibration calib = axis_calib(f, cu, cv);
  img::FeatureMap fm = mh::random_fm(2, 4, 5, stride, 17);
  // Aim at feature cell (x=2, y=1): pixel (4,2) at depth 1.
  const double u = 2 * stride, v = 1 * stride;
  ad::Tensor coords = ad::Tensor::matrix(1, 3, {1.0, (cu - u) / f, (cv - v) / f});
  ad::Tensor semantic = ad::Tensor::matrix(1, 1, {0.0});
  nn::MlpSpec spec = nn::MlpSpec::make({3, 2});
  std::vector<bool> mask;
  ad::Tensor fi = spe::decorate_generated(coords, semantic, fm, calib, spec,
                                          mh::pick_columns(3, 2, 1), &mask);
  REQUIRE(mask == std::vector<bool>{true});
  CHECK(fi.at(0, 0) == doctest::Approx(fm.at(0, 1, 2)).epsilon(1e-12));
  CHECK(fi.at(0, 1) == doctest::Approx(fm.at(1, 1, 2)).epsilon(1e-12));
}

TEST_CASE("decorate_generated zeroes out-of-view points and flags them") {
  const geom::CameraCalibration calib = axis_calib(5, 4, 3);
  img::FeatureMap fm = mh::random_fm(2, 4, 5, 1.0, 23);
  ad::Tensor coords = ad::Tensor::matrix(2, 3, {-2.0, 0.0, 0.0, 1.0, 0.1, 0.1});
  ad::Tensor semantic = ad::Tensor::zeros({2, 1});
  nn::MlpSpec spec = nn::MlpSpec::make({3, 2});
  std::vector<bool> mask;
  ad::Tensor fi = spe::decorate_generated(coords, semantic, fm, calib, spec,
                                          mh::pick_columns(3, 2, 1), &mask);
  REQUIRE(mask.size() == 2);
  CHECK_FALSE(mask[0]);
  CHECK(mask[1]);
  CHECK(fi.at(0, 0) == 0.0);
  CHECK(fi.at(0, 1) == 0.0);
}

TEST_CASE("decorate_generated shares decorate's sampling path") {
  Rng rng(31);
  const geom::CameraCalibration calib = axis_calib(9.0, 6.0, 5.0);
  img::FeatureMap fm = mh::random_fm(3, 4, 6, 1.5, 29);
  const int n = 12;
  std::vector<geom::Vec3> pts;
  std::vector<double> flat, feats;
  for (int i = 0; i < n; ++i) {
    geom::Vec3 p{rng.uniform(0.5, 6.0), rng.uniform(-2.0, 2.0), rng.uniform(-1.5, 1.5)};
    pts.push_back(p);
    flat.insert(flat.end(), {p.x, p.y, p.z});
    feats.push_back(rng.uniform(0.0, 1.0));
  }
  nn::MlpSpec spec = nn::MlpSpec::make({1 + 3, 5, 3});
  nn::MlpParams reducer = nn::mlp_init(spec, 1234);

  spe::DecoratedPoints dec = spe::decorate(make_cloud(pts, feats, 1), fm, calib, spec, reducer);
  std::vector<bool> mask;
  ad::Tensor fi = spe::decorate_generated(ad::Tensor::matrix(n, 3, flat),
                                          ad::Tensor::matrix(n, 1, feats), fm, calib, spec,
                                          reducer, &mask);
  CHECK(mask == dec.in_view);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(fi.at(i, j) == doctest::Approx(dec.features.at(i, j)).epsilon(1e-12));
}

TEST_CASE("decorate_generated carries coordinate gradients") {
  const geom::CameraCalibration calib = axis_calib(7.0, 5.0, 4.0);
  img::FeatureMap fm = mh::random_fm(2, 5, 6, 1.0, 37);
  nn::MlpSpec spec = nn::MlpSpec::make({2 + 2, 4, 2});
  nn::MlpParams reducer = nn::mlp_init(spec, 77);

  std::vector<ad::Tensor> inputs{
      ad::Tensor::matrix(2, 3, {2.0, 0.31, -0.22, 3.0, -0.47, 0.18}, true),
      ad::Tensor::matrix(2, 2, {0.3, -0.1, 0.6, 0.2}, true)};
  auto f = [&](std::vector<ad::Tensor>& in) {
    return ad::sum(spe::decorate_generated(in[0], in[1], fm, calib, spec, reducer));
  };
  CHECK(nn::gradcheck(f, inputs) < 1e-6);
}
