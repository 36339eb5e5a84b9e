#include "pointforge/cmff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pointforge::cmff {

namespace {

void fail(const std::string& msg) { throw std::invalid_argument("cmff: " + msg); }

}  // namespace

std::vector<geom::Vec3> make_grid_points(const geom::Box3D& box, int G) {
  if (G < 1) fail("grid size must be at least 1");
  std::vector<geom::Vec3> pts;
  pts.reserve(static_cast<size_t>(G) * G * G);
  for (int ix = 0; ix < G; ++ix)
    for (int iy = 0; iy < G; ++iy)
      for (int iz = 0; iz < G; ++iz) {
        const geom::Vec3 canonical{((ix + 0.5) / G - 0.5) * box.l,
                                   ((iy + 0.5) / G - 0.5) * box.w,
                                   ((iz + 0.5) / G - 0.5) * box.h};
        pts.push_back(geom::canonical_inverse(box, canonical));
      }
  return pts;
}

double default_pool_radius(const geom::Box3D& box, int G) {
  if (G < 1) fail("grid size must be at least 1");
  const double dx = box.l / G, dy = box.w / G, dz = box.h / G;
  return 0.5 * std::sqrt(dx * dx + dy * dy + dz * dz);
}

ad::Tensor pool_voxel_features(const pc::VoxelGrid& grid, const ad::Tensor& voxel_features,
                               const std::vector<geom::Vec3>& points, double radius, int K,
                               const nn::MlpSpec& mlp_spec, const nn::MlpParams& mlp) {
  if (!(radius > 0.0)) fail("pool radius must be positive");
  if (K < 1) fail("pool K must be at least 1");
  const int n = static_cast<int>(points.size());
  const int cv = mlp_spec.out_width();
  const bool have_voxels = !grid.voxels.empty();
  if (have_voxels) {
    if (!voxel_features.defined() || voxel_features.ndim() != 2 ||
        voxel_features.rows() != static_cast<int>(grid.voxels.size()))
      fail("voxel_features rows must match grid.voxels");
    if (mlp_spec.in_width() != 3 + voxel_features.cols())
      fail("pool mlp input width must be 3 + voxel feature width");
  }
  if (n == 0 || !have_voxels) return ad::Tensor::zeros({n, cv});

  std::vector<int> rows;
  std::vector<double> rel;
  ad::Segments segs(n, {0, 0});
  const double r2 = radius * radius;
  for (int i = 0; i < n; ++i) {
    const geom::Vec3& p = points[i];
    // Candidate voxel cells: those intersecting the ball around p. Voxel
    // means lie inside their own cell, so this range is exhaustive.
    int lo[3], hi[3];
    const double pmin[3] = {p.x - radius, p.y - radius, p.z - radius};
    const double pmax[3] = {p.x + radius, p.y + radius, p.z + radius};
    const double org[3] = {grid.origin.x, grid.origin.y, grid.origin.z};
    const double vs[3] = {grid.voxel_size.x, grid.voxel_size.y, grid.voxel_size.z};
    bool overlap = true;
    for (int ax = 0; ax < 3; ++ax) {
      lo[ax] = std::max(0, static_cast<int>(std::floor((pmin[ax] - org[ax]) / vs[ax])));
      hi[ax] = std::min(grid.extents[ax] - 1,
                        static_cast<int>(std::floor((pmax[ax] - org[ax]) / vs[ax])));
      if (lo[ax] > hi[ax]) overlap = false;
    }
    std::vector<std::pair<double, int>> near;  // (squared distance, voxel row)
    if (overlap) {
      for (int ix = lo[0]; ix <= hi[0]; ++ix)
        for (int iy = lo[1]; iy <= hi[1]; ++iy)
          for (int iz = lo[2]; iz <= hi[2]; ++iz) {
            const int v = grid.find(ix, iy, iz);
            if (v < 0) continue;
            const geom::Vec3 d = grid.voxels[v].mean_coords - p;
            const double d2 = d.x * d.x + d.y * d.y + d.z * d.z;
            if (d2 <= r2) near.emplace_back(d2, v);
          }
    }
    std::sort(near.begin(), near.end());
    if (static_cast<int>(near.size()) > K) near.resize(K);
    segs[i] = {static_cast<int>(rows.size()), static_cast<int>(near.size())};
    for (const auto& [d2, v] : near) {
      rows.push_back(v);
      const geom::Vec3 d = grid.voxels[v].mean_coords - p;
      rel.push_back(d.x);
      rel.push_back(d.y);
      rel.push_back(d.z);
    }
  }
  if (rows.empty()) return ad::Tensor::zeros({n, cv});

  const int m = static_cast<int>(rows.size());
  std::vector<ad::Tensor> parts{ad::Tensor::matrix(m, 3, std::move(rel)),
                                ad::gather_rows(voxel_features, rows)};
  ad::Tensor embedded = nn::mlp_forward(mlp_spec, mlp, ad::concat_cols(parts));
  return ad::segment_max_rows(embedded, segs);
}

ad::Tensor grid_image_features(const std::vector<geom::Vec3>& points, const img::FeatureMap& fm,
                               const geom::CameraCalibration& calib,
                               std::vector<bool>* in_view) {
  const int n = static_cast<int>(points.size());
  std::vector<double> xyz(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i) {
    xyz[3 * i + 0] = points[i].x;
    xyz[3 * i + 1] = points[i].y;
    xyz[3 * i + 2] = points[i].z;
  }
  return img::sample_at_points(calib, fm, ad::Tensor::matrix(n, 3, std::move(xyz)), in_view);
}

ad::Tensor roi_image_feature(const geom::Box3D& box, const img::FeatureMap& fm,
                             const geom::CameraCalibration& calib, double enlarge_factor, int S,
                             int samples_per_bin, const nn::MlpSpec& mlp_spec,
                             const nn::MlpParams& mlp) {
  if (mlp_spec.in_width() != S * S * fm.C)
    fail("roi mlp input width must be S*S * map channels");
  const geom::Box2DResult proj = geom::corners_to_box2d(calib, box);
  if (!proj.visible) return ad::Tensor::zeros({1, mlp_spec.out_width()});
  const geom::Box2D roi =
      geom::enlarge_box2d(proj.box, enlarge_factor, fm.image_width(), fm.image_height());
  ad::Tensor bins = img::roi_align(fm, roi, S, samples_per_bin);
  return nn::mlp_forward(mlp_spec, mlp, ad::reshape(bins, {1, S * S * fm.C}));
}

ad::Tensor fuse(const ad::Tensor& fv, const ad::Tensor& fi, const ad::Tensor& fb,
                const nn::MlpSpec& mlp_spec, const nn::MlpParams& mlp) {
  if (fv.ndim() != 2 || fi.ndim() != 2 || fb.ndim() != 2 || fb.rows() != 1)
    fail("fuse: expected [N,Cv], [N,Ci], [1,Cb]");
  if (fi.rows() != fv.rows()) fail("fuse: row counts differ");
  if (mlp_spec.in_width() != fv.cols() + fi.cols() + fb.cols())
    fail("fuse: mlp input width must be Cv+Ci+Cb");
  std::vector<ad::Tensor> parts{fv, fi, ad::repeat_row(fb, fv.rows())};
  return nn::mlp_forward(mlp_spec, mlp, ad::concat_cols(parts));
}

}  // namespace pointforge::cmff
