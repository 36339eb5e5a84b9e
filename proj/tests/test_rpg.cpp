#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <vector>

#include "doctest.h"
#include "model_helpers.hpp"
#include "pointforge/cmff.hpp"
#include "pointforge/rpg.hpp"

using namespace pointforge;

namespace {

// Zero out every parameter of an MLP in place.
void zero_params(nn::MlpParams& p) {
  for (auto& w : p.weights) w.mutable_value().assign(w.numel(), 0.0);
  for (auto& b : p.biases) b.mutable_value().assign(b.numel(), 0.0);
}

rpg::GeneratedPoints tiny_generated(std::vector<geom::Vec3> grid, std::vector<double> coords,
                                    std::vector<double> scores) {
  rpg::GeneratedPoints g;
  const int n = static_cast<int>(grid.size());
  g.grid = std::move(grid);
  g.coords = ad::Tensor::matrix(n, 3, std::move(coords));
  std::vector<double> off(static_cast<size_t>(n) * 3, 0.0);
  g.offsets = ad::Tensor::matrix(n, 3, off);
  g.features = ad::Tensor::zeros({n, 1});
  g.scores = ad::Tensor::matrix(n, 1, std::move(scores));
  return g;
}

}  // namespace

TEST_CASE("positional_encoding feeds 27 relative coordinates through the ffn") {
  geom::Box3D box = geom::make_box3d({1, 2, 0.5}, 2, 1.5, 1, 0.4);
  auto grid = cmff::make_grid_points(box, 2);
  nn::MlpSpec ffn = nn::MlpSpec::make({27, 27});
  std::vector<double> eye(27 * 27, 0.0);
  for (int i = 0; i < 27; ++i) eye[static_cast<size_t>(i) * 27 + i] = 1.0;
  nn::MlpParams id = mh::linear_params(27, 27, std::move(eye), std::vector<double>(27, 0.0));

  // Identity FFN exposes the raw code: first three entries are g - center.
  std::vector<geom::Vec3> probe{box.center, grid[3]};
  ad::Tensor delta = rpg::positional_encoding(box, probe, ffn, id);
  REQUIRE(delta.rows() == 2);
  REQUIRE(delta.cols() == 27);
  CHECK(delta.at(0, 0) == doctest::Approx(0.0));
  CHECK(delta.at(0, 1) == doctest::Approx(0.0));
  CHECK(delta.at(0, 2) == doctest::Approx(0.0));
  const auto corners = geom::box3d_corners(box);
  for (int k = 0; k < 8; ++k) {
    CHECK(delta.at(1, 3 + 3 * k + 0) ==
          doctest::Approx(grid[3].x - corners[k].x).epsilon(1e-12));
    CHECK(delta.at(1, 3 + 3 * k + 1) ==
          doctest::Approx(grid[3].y - corners[k].y).epsilon(1e-12));
    CHECK(delta.at(1, 3 + 3 * k + 2) ==
          doctest::Approx(grid[3].z - corners[k].z).epsilon(1e-12));
  }
  nn::MlpSpec bad = nn::MlpSpec::make({26, 4});
  CHECK_THROWS(rpg::positional_encoding(box, probe, bad, nn::mlp_init(bad, 1)));
}

TEST_CASE("positional code norms are invariant to rigid motion of box and grid") {
  geom::Box3D box = geom::make_box3d({2, -1, 0.3}, 3, 1.6, 1.2, 0.9);
  auto grid = cmff::make_grid_points(box, 3);
  const double alpha = 1.234;
  const geom::Vec3 t{4.0, -2.5, 0.7};
  const geom::Mat3 rot = geom::rot_z(alpha);
  geom::Box3D moved = geom::make_box3d(rot.apply(box.center) + t, box.l, box.w, box.h,
                                       geom::wrap_angle(box.yaw + alpha));
  auto moved_grid = cmff::make_grid_points(moved, 3);

  nn::MlpSpec ffn = nn::MlpSpec::make({27, 27});
  std::vector<double> eye(27 * 27, 0.0);
  for (int i = 0; i < 27; ++i) eye[static_cast<size_t>(i) * 27 + i] = 1.0;
  nn::MlpParams id = mh::linear_params(27, 27, std::move(eye), std::vector<double>(27, 0.0));
  ad::Tensor a = rpg::positional_encoding(box, grid, ffn, id);
  ad::Tensor b = rpg::positional_encoding(moved, moved_grid, ffn, id);
  for (int i = 0; i < a.rows(); ++i)
    for (int k = 0; k < 9; ++k) {
      auto norm = [&](const ad::Tensor& m) {
        const double x = m.at(i, 3 * k), y = m.at(i, 3 * k + 1), z = m.at(i, 3 * k + 2);
        return std::sqrt(x * x + y * y + z * z);
      };
      CHECK(norm(a) == doctest::Approx(norm(b)).epsilon(1e-9));
    }
}

TEST_CASE("refine with zero positional code is the plain transformer stack") {
  rpg::RefinerSpec spec;
  spec.layer = {8, 2, 16};
  spec.layers = 2;
  rpg::RefinerParams params = rpg::refiner_init(spec, 91);
  Rng rng(12);
  std::vector<double> x(5 * 8);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  ad::Tensor fused = ad::Tensor::matrix(5, 8, x);
  ad::Tensor zero = ad::Tensor::zeros({5, 8});
  ad::Tensor got = rpg::refine(spec, params, fused, zero);

  ad::Tensor want = fused;
  for (int i = 0; i < 2; ++i)
    want = nn::transformer_layer_forward(spec.layer, params.layers[i], want);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(got.at(i, j) == doctest::Approx(want.at(i, j)).epsilon(1e-12));
}

TEST_CASE("refine injects the code additively before every layer") {
  rpg::RefinerSpec spec;
  spec.layer = {4, 1, 8};
  spec.layers = 2;
  rpg::RefinerParams params = rpg::refiner_init(spec, 17);
  Rng rng(18);
  std::vector<double> x(3 * 4), d(3 * 4);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  for (double& v : d) v = rng.uniform(-0.5, 0.5);
  ad::Tensor fused = ad::Tensor::matrix(3, 4, x);
  ad::Tensor delta = ad::Tensor::matrix(3, 4, d);
  ad::Tensor got = rpg::refine(spec, params, fused, delta);

  ad::Tensor want = fused;
  for (int i = 0; i < 2; ++i)
    want = nn::transformer_layer_forward(spec.layer, params.layers[i], ad::add(want, delta));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(got.at(i, j) == doctest::Approx(want.at(i, j)).epsilon(1e-12));
}

TEST_CASE("refine is permutation equivariant") {
  rpg::RefinerSpec spec;
  spec.layer = {6, 2, 12};
  spec.layers = 2;
  rpg::RefinerParams params = rpg::refiner_init(spec, 40);
  Rng rng(41);
  std::vector<double> x(4 * 6), d(4 * 6);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  for (double& v : d) v = rng.uniform(-1.0, 1.0);
  ad::Tensor fused = ad::Tensor::matrix(4, 6, x);
  ad::Tensor delta = ad::Tensor::matrix(4, 6, d);
  const std::vector<int> perm{2, 0, 3, 1};
  ad::Tensor direct = ad::gather_rows(rpg::refine(spec, params, fused, delta), perm);
  ad::Tensor permuted = rpg::refine(spec, params, ad::gather_rows(fused, perm),
                                    ad::gather_rows(delta, perm));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK(direct.at(i, j) == doctest::Approx(permuted.at(i, j)).epsilon(1e-12));
}

TEST_CASE("generate splits offsets and features and clamps scores") {
  auto grid = cmff::make_grid_points(geom::make_box3d({1, 1, 0}, 2, 2, 1, 0.2), 2);
  const int n = 8;
  rpg::PointHeads heads = rpg::point_heads_init(6, 4, 3);
  Rng rng(6);
  std::vector<double> x(static_cast<size_t>(n) * 6);
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  ad::Tensor refined = ad::Tensor::matrix(n, 6, x);

  SUBCASE("zero point head keeps points on the grid") {
    zero_params(heads.point);
    rpg::GeneratedPoints g = rpg::generate(grid, refined, heads);
    REQUIRE(g.size() == n);
    for (int i = 0; i < n; ++i) {
      CHECK(g.coords.at(i, 0) == doctest::Approx(grid[i].x).epsilon(1e-12));
      CHECK(g.coords.at(i, 1) == doctest::Approx(grid[i].y).epsilon(1e-12));
      CHECK(g.coords.at(i, 2) == doctest::Approx(grid[i].z).epsilon(1e-12));
      CHECK(g.offsets.at(i, 0) == 0.0);
    }
  }
  SUBCASE("zero score head gives 0.5 everywhere") {
    zero_params(heads.score);
    rpg::GeneratedPoints g = rpg::generate(grid, refined, heads);
    for (int i = 0; i < n; ++i) CHECK(g.scores.at(i, 0) == doctest::Approx(0.5));
  }
  SUBCASE("coords are exactly grid plus offsets and scores stay in the open interval") {
    rpg::GeneratedPoints g = rpg::generate(grid, refined, heads);
    for (int i = 0; i < n; ++i) {
      CHECK(g.coords.at(i, 0) == doctest::Approx(grid[i].x + g.offsets.at(i, 0)).epsilon(1e-12));
      CHECK(g.coords.at(i, 1) == doctest::Approx(grid[i].y + g.offsets.at(i, 1)).epsilon(1e-12));
      CHECK(g.coords.at(i, 2) == doctest::Approx(grid[i].z + g.offsets.at(i, 2)).epsilon(1e-12));
      CHECK(g.scores.at(i, 0) > 0.0);
      CHECK(g.scores.at(i, 0) < 1.0);
      CHECK(g.scores.at(i, 0) >= 1e-7);
      CHECK(g.scores.at(i, 0) <= 1.0 - 1e-7);
    }
    CHECK(g.features.cols() == 4);
  }
}

TEST_CASE("loss_offset hand values") {
  SUBCASE("matching sets give zero") {
    auto g = tiny_generated({{0, 0, 0}, {1, 0, 0}}, {0, 0, 0, 1, 0, 0}, {0.5, 0.5});
    auto r = rpg::loss_offset({g}, {{{0, 0, 0}, {1, 0, 0}}});
    CHECK(r.loss.item() == doctest::Approx(0.0));
    CHECK(r.had_positives);
    CHECK(r.skipped_empty == 0);
  }
  SUBCASE("unit displacement gives 2.0") {
    auto g = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
    auto r = rpg::loss_offset({g}, {{{1, 0, 0}}});
    CHECK(r.loss.item() == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("mean over positives") {
    auto g1 = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
    auto g2 = tiny_generated({{5, 5, 5}}, {5, 5, 5}, {0.5});
    auto r = rpg::loss_offset({g1, g2}, {{{1, 0, 0}}, {{5, 5, 5}}});
    CHECK(r.loss.item() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("empty template is skipped with a count") {
    auto g1 = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
    auto g2 = tiny_generated({{1, 1, 1}}, {1, 1, 1}, {0.5});
    auto r = rpg::loss_offset({g1, g2}, {{{1, 0, 0}}, {}});
    CHECK(r.loss.item() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.skipped_empty == 1);
    CHECK(r.had_positives);
  }
  SUBCASE("no usable positives") {
    auto g = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
    auto r = rpg::loss_offset({g}, {{}});
    CHECK(r.loss.item() == 0.0);
    CHECK_FALSE(r.had_positives);
    CHECK(r.skipped_empty == 1);
    auto none = rpg::loss_offset({}, {});
    CHECK(none.loss.item() == 0.0);
    CHECK_FALSE(none.had_positives);
  }
  SUBCASE("permutation of either point set changes nothing") {
    Rng rng(8);
    std::vector<double> c;
    std::vector<geom::Vec3> grid;
    for (int i = 0; i < 6; ++i) {
      grid.push_back({0, 0, 0});
      for (int j = 0; j < 3; ++j) c.push_back(rng.uniform(-2.0, 2.0));
    }
    std::vector<geom::Vec3> tmpl;
    for (int i = 0; i < 9; ++i)
      tmpl.push_back({rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)});
    auto g = tiny_generated(grid, c, std::vector<double>(6, 0.5));

    std::vector<double> c_perm;
    const std::vector<int> perm{4, 1, 5, 0, 2, 3};
    for (int i : perm)
      for (int j = 0; j < 3; ++j) c_perm.push_back(c[3 * i + j]);
    auto gp = tiny_generated(grid, c_perm, std::vector<double>(6, 0.5));
    std::vector<geom::Vec3> tmpl_rev(tmpl.rbegin(), tmpl.rend());

    const double base = rpg::loss_offset({g}, {tmpl}).loss.item();
    CHECK(rpg::loss_offset({gp}, {tmpl}).loss.item() == doctest::Approx(base).epsilon(1e-12));
    CHECK(rpg::loss_offset({g}, {tmpl_rev}).loss.item() == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("loss_score hand values and degenerate gamma") {
  geom::Box3D box = geom::make_box3d({0, 0, 0}, 2, 2, 2, 0.0);
  SUBCASE("single inside point at 0.5 with gamma 2") {
    auto g = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
    ad::Tensor loss = rpg::loss_score({g}, {box}, 2.0, 4, 1);
    CHECK(loss.item() == doctest::Approx(0.173287).epsilon(1e-4));
  }
  SUBCASE("confident inside points vanish") {
    auto g = tiny_generated({{0, 0, 0}, {0.5, 0, 0}}, {0, 0, 0, 0.5, 0, 0},
                            {1.0 - 1e-7, 1.0 - 1e-7});
    ad::Tensor loss = rpg::loss_score({g}, {box}, 2.0, 2, 1);
    CHECK(loss.item() < 1e-12);
  }
  SUBCASE("gamma zero equals mean BCE against containment labels") {
    Rng rng(10);
    std::vector<double> coords, scores;
    std::vector<geom::Vec3> grid;
    for (int i = 0; i < 10; ++i) {
      grid.push_back({0, 0, 0});
      coords.insert(coords.end(), {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                                   rng.uniform(-2.0, 2.0)});
      scores.push_back(rng.uniform(0.05, 0.95));
    }
    auto g = tiny_generated(grid, coords, scores);
    const int n_samples = 10;  // every point sampled, so ordering cannot matter
    ad::Tensor loss = rpg::loss_score({g}, {box}, 0.0, n_samples, 7);

    double want = 0.0;
    for (int i = 0; i < 10; ++i) {
      const geom::Vec3 p{coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]};
      const bool inside = pc::point_in_box(box, p);
      want += inside ? -std::log(scores[i]) : -std::log(1.0 - scores[i]);
    }
    want /= 10.0;
    CHECK(loss.item() == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("unmatched RoIs label everything background") {
    auto g = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {1e-7});
    ad::Tensor loss = rpg::loss_score({g}, {std::nullopt}, 2.0, 1, 1);
    CHECK(loss.item() < 1e-12);
  }
  SUBCASE("all-positive labels make the loss monotone in each score") {
    auto low = tiny_generated({{0, 0, 0}, {0.2, 0, 0}}, {0, 0, 0, 0.2, 0, 0}, {0.4, 0.7});
    auto high = tiny_generated({{0, 0, 0}, {0.2, 0, 0}}, {0, 0, 0, 0.2, 0, 0}, {0.5, 0.7});
    CHECK(rpg::loss_score({high}, {box}, 2.0, 2, 3).item() <
          rpg::loss_score({low}, {box}, 2.0, 2, 3).item());
  }
}

TEST_CASE("rpg_loss adds the two terms") {
  auto g = tiny_generated({{0, 0, 0}}, {0, 0, 0}, {0.5});
  auto off = rpg::loss_offset({g}, {{{1, 0, 0}}});
  geom::Box3D box = geom::make_box3d({0, 0, 0}, 2, 2, 2, 0.0);
  ad::Tensor score = rpg::loss_score({g}, {box}, 2.0, 1, 1);
  ad::Tensor total = rpg::rpg_loss(off, score);
  CHECK(total.item() ==
        doctest::Approx(off.loss.item() + score.item()).epsilon(1e-15));
}

TEST_CASE("rpg stage differentiates end to end") {
  geom::Box3D box = geom::make_box3d({1, 0.5, 0}, 2, 1.5, 1.2, 0.3);
  auto grid = cmff::make_grid_points(box, 2);
  const int d = 6;
  nn::MlpSpec ffn = nn::MlpSpec::make({27, d});
  nn::MlpParams ffn_p = nn::mlp_init(ffn, 14);
  rpg::RefinerSpec rspec;
  rspec.layer = {d, 2, 8};
  rspec.layers = 1;
  rpg::RefinerParams rparams = rpg::refiner_init(rspec, 15);
  rpg::PointHeads heads = rpg::point_heads_init(d, 3, 16);
  Rng rng(17);
  std::vector<double> fused(grid.size() * d);
  for (double& v : fused) v = rng.uniform(-1.0, 1.0);
  std::vector<geom::Vec3> tmpl{{1.2, 0.6, 0.1}, {0.8, 0.3, -0.2}, {1.0, 0.5, 0.3}};
  geom::Box3D gt = geom::make_box3d({1.1, 0.5, 0}, 2, 1.5, 1.2, 0.25);

  std::vector<ad::Tensor> inputs{
      ad::Tensor::matrix(static_cast<int>(grid.size()), d, fused, true)};
  mh::append_params(inputs, ffn_p);
  mh::append_params(inputs, heads.point);
  mh::append_params(inputs, heads.score);
  auto f = [&](std::vector<ad::Tensor>& in) {
    ad::Tensor delta = rpg::positional_encoding(box, grid, ffn, ffn_p);
    ad::Tensor refined = rpg::refine(rspec, rparams, in[0], delta);
    rpg::GeneratedPoints g = rpg::generate(grid, refined, heads);
    auto off = rpg::loss_offset({g}, {tmpl});
    ad::Tensor score = rpg::loss_score({g}, {gt}, 2.0, 4, 5);
    return rpg::rpg_loss(off, score);
  };
  CHECK(nn::gradcheck(f, inputs, 1e-5) < 1e-4);
}

TEST_CASE("offset head alone can be driven into a fixed template") {
  geom::Box3D box = geom::make_box3d({0, 0, 0}, 2, 2, 1.5, 0.0);
  auto grid = cmff::make_grid_points(box, 3);
  const int n = static_cast<int>(grid.size());
  const int d = 8;
  rpg::PointHeads heads = rpg::point_heads_init(d, 4, 29);
  Rng rng(30);
  std::vector<double> feat(static_cast<size_t>(n) * d);
  for (double& v : feat) v = rng.uniform(-1.0, 1.0);
  ad::Tensor refined = ad::Tensor::matrix(n, d, feat);
  std::vector<geom::Vec3> tmpl;
  for (int i = 0; i < 24; ++i)
    tmpl.push_back({rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.6, 0.6)});

  std::vector<ad::Tensor> params;
  mh::append_params(params, heads.point);
  nn::AdamState adam = nn::adam_init(0.01, params);

  double initial = 0.0, final_loss = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    rpg::GeneratedPoints g = rpg::generate(grid, refined, heads);
    auto r = rpg::loss_offset({g}, {tmpl});
    if (iter == 0) initial = r.loss.item();
    final_loss = r.loss.item();
    ad::backward(r.loss);
    // The score head is untouched by this loss; give it zero grads so the
    // optimizer update stays legal for the parameters we do feed it.
    nn::adam_step(adam, params);
  }
  CHECK(initial > 0.0);
  CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("gpts files round-trip byte for byte") {
  std::vector<rpg::GptsRoi> rois;
  rpg::GptsRoi a;
  a.box = geom::make_box3d({1.5, -2.25, 0.5}, 4, 2, 1.5, 0.75);
  a.points = {{0.1f, 0.2f, 0.3f, 0.9f}, {-1.f, 2.f, -3.f, 0.25f}};
  rpg::GptsRoi b;
  b.box = geom::make_box3d({0, 0, 0}, 1, 1, 1, 0);
  rois = {a, b};

  const std::string p1 = "test_roundtrip_a.gpts", p2 = "test_roundtrip_b.gpts";
  rpg::save_gpts(p1, rois);
  auto loaded = rpg::load_gpts(p1);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].points.size() == 2);
  CHECK(loaded[1].points.empty());
  CHECK(loaded[0].box.center.y == doctest::Approx(-2.25));
  CHECK(loaded[0].points[1][3] == 0.25f);
  rpg::save_gpts(p2, loaded);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(s1.size() == 2 * (7 * 4 + 4) + 2 * 16);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("make_gpts_roi copies generated values") {
  auto g = tiny_generated({{0, 0, 0}, {1, 1, 1}}, {0.5, 0.25, -0.125, 1, 2, 3}, {0.5, 0.75});
  geom::Box3D box = geom::make_box3d({0, 0, 0}, 2, 2, 2, 0.0);
  rpg::GptsRoi r = rpg::make_gpts_roi(box, g);
  REQUIRE(r.points.size() == 2);
  CHECK(r.points[0][0] == 0.5f);
  CHECK(r.points[0][3] == 0.5f);
  CHECK(r.points[1][2] == 3.0f);
}
